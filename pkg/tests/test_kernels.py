import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tnet import _kernels as K


def test_im2col_col2im_backends_agree():
    rng = np.random.default_rng(0)
    for k, s in [(3, 1), (3, 2), (5, 2), (2, 1)]:
        xp = rng.normal(size=(2, 9, 8, 3))
        ho, wo = (9 - k) // s + 1, (8 - k) // s + 1
        a = K.im2col_numpy(xp, k, s, ho, wo)
        b = K.im2col_numba(xp, k, s, ho, wo)
        np.testing.assert_array_equal(a, b)
        cols = rng.normal(size=a.shape)
        np.testing.assert_allclose(K.col2im_numpy(cols, 9, 8, s), K.col2im_numba(cols, 9, 8, s), atol=1e-12)


def test_col2im_is_adjoint_of_im2col():
    rng = np.random.default_rng(1)
    xp = rng.normal(size=(1, 7, 7, 2))
    cols = K.im2col(xp, 3, 2, 3, 3)
    g = rng.normal(size=cols.shape)
    lhs = np.sum(cols * g)
    rhs = np.sum(xp * K.col2im(g, 7, 7, 2))
    assert abs(lhs - rhs) < 1e-10


@settings(max_examples=40, deadline=None)
@given(
    seed=st.integers(0, 10**6),
    h=st.integers(2, 12),
    w=st.integers(2, 12),
    out=st.integers(1, 9),
)
def test_crop_resize_backends_agree(seed, h, w, out):
    rng = np.random.default_rng(seed)
    img = rng.normal(size=(h + 3, w + 2, 2))
    a = K.crop_resize_numpy(img, 1.0, 2.0, float(h), float(w), out, out)
    b = K.crop_resize_numba(img, 1.0, 2.0, float(h), float(w), out, out)
    np.testing.assert_allclose(a, b, atol=1e-12)


def _brute_union(rects, h, w):
    m = np.zeros((h, w), dtype=bool)
    for y in range(h):
        for x in range(w):
            m[y, x] = any(x0 <= x < x1 and y0 <= y < y1 for x0, y0, x1, y1 in rects)
    return m


def test_union_mask_backends_and_brute_force():
    rng = np.random.default_rng(2)
    for _ in range(20):
        n = int(rng.integers(0, 5))
        r = rng.integers(-3, 20, size=(n, 4))
        rects = np.concatenate([np.minimum(r[:, :2], r[:, 2:]), np.maximum(r[:, :2], r[:, 2:])], axis=1)
        ref = _brute_union(rects.tolist(), 16, 14)
        np.testing.assert_array_equal(K.union_mask_numpy(rects, 16, 14), ref)
        np.testing.assert_array_equal(K.union_mask_numba(rects.astype(np.int64), 16, 14), ref)


def test_env_flag_selects_numpy_backend():
    code = "import tnet._kernels as k; print(k.BACKEND)"
    env = dict(os.environ, TNET_DISABLE_NUMBA="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"


@pytest.mark.skipif(K.BACKEND != "numba", reason="numba disabled in this environment")
def test_conv_gradients_identical_across_backends():
    code = (
        "import numpy as np\n"
        "from tnet import tensor as T\n"
        "rng = np.random.default_rng(7)\n"
        "x = T.Tensor(rng.normal(size=(2, 9, 9, 3)), requires_grad=True)\n"
        "k = T.Tensor(rng.normal(size=(3, 3, 3, 4)), requires_grad=True)\n"
        "T.tsum(T.conv2d(x, k, 2, 'SAME')).backward()\n"
        "import sys; sys.stdout.buffer.write(x.grad.tobytes() + k.grad.tobytes())\n"
    )
    runs = []
    for flag in ("0", "1"):
        env = dict(os.environ, TNET_DISABLE_NUMBA=flag)
        runs.append(subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, check=True).stdout)
    a = np.frombuffer(runs[0], dtype=np.float64)
    b = np.frombuffer(runs[1], dtype=np.float64)
    np.testing.assert_allclose(a, b, atol=1e-12)
