"""Central finite differences against reverse-mode gradients."""

from __future__ import annotations

import numpy as np

from tnet import tensor as T
from tnet.tensor import Tensor


def numeric_grad(f, arrays, index, eps=1e-6, coords=None):
    """Central differences of scalar ``f(*arrays)`` w.r.t. ``arrays[index]``.

    ``coords`` restricts the probe to a subset of flat positions; other
    entries of the result stay zero.
    """
    x = arrays[index]
    flat = x.reshape(-1)
    g = np.zeros_like(flat)
    positions = range(flat.size) if coords is None else coords
    for i in positions:
        old = flat[i]
        flat[i] = old + eps
        hi = f(*arrays)
        flat[i] = old - eps
        lo = f(*arrays)
        flat[i] = old
        g[i] = (hi - lo) / (2 * eps)
    return g.reshape(x.shape)


STEPS = (1e-3, 1e-4, 1e-5, 1e-6, 1e-7)


def stable_numeric_grad(f, arrays, index, coords, steps=STEPS):
    """Central differences with the step chosen per coordinate from the function alone.

    Estimates are taken at every step in ``steps``. The kept estimate is
    the interior one that agrees best with both neighbours: large steps
    suffer truncation and kink crossings, small ones roundoff, and the
    plateau between them is where neighbouring estimates coincide.
    """
    x = arrays[index]
    g = np.zeros(x.size)
    for i in coords:
        d = [numeric_grad(f, arrays, index, eps=h, coords=[i]).reshape(-1)[i] for h in steps]
        spread = [max(abs(d[j] - d[j - 1]), abs(d[j] - d[j + 1])) for j in range(1, len(d) - 1)]
        g[i] = d[1 + int(np.argmin(spread))]
    return g.reshape(x.shape)


def rel_err(a, b) -> float:
    a, b = np.ravel(a), np.ravel(b)
    denom = max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def check_op(build, arrays, eps=1e-6):
    """Max relative error over every input of a tensor expression.

    ``build(*tensors)`` returns any-shaped Tensor; it is contracted with a
    fixed random weight so every output entry contributes.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = build(*ts)
    w = np.random.default_rng(1234).normal(size=out.shape)
    loss = T.tsum(out * Tensor(w))
    loss.backward()

    def f(*arrs):
        with T.no_grad():
            o = build(*[Tensor(a) for a in arrs])
        return float(np.sum(o.data * w))

    worst = 0.0
    for i, t in enumerate(ts):
        num = numeric_grad(f, arrays, i, eps)
        ana = t.grad if t.grad is not None else np.zeros_like(arrays[i])
        worst = max(worst, rel_err(ana, num))
    return worst


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-300) * margin + x, x)


def op_cases(rng):
    """(name, build, arrays) for every differentiable op, freshly randomized."""
    lab = rng.integers(0, 4, size=3)
    idx = rng.integers(0, 5, size=(3,))
    conv_s = int(rng.integers(1, 3))
    conv_p = ["SAME", "VALID"][int(rng.integers(2))]
    return [
        ("add", lambda a, b: a + b, [rng.normal(size=(3, 4)), rng.normal(size=(4,))]),
        ("sub", lambda a, b: a - b, [rng.normal(size=(3, 1)), rng.normal(size=(3, 4))]),
        ("mul", lambda a, b: a * b, [rng.normal(size=(2, 3)), rng.normal(size=(2, 3))]),
        ("div", lambda a, b: a / b, [rng.normal(size=(2, 3)), rng.uniform(0.5, 2.0, size=(2, 3))]),
        ("exp", T.exp, [rng.normal(size=(5,))]),
        ("log", T.log, [rng.uniform(0.2, 3.0, size=(5,))]),
        ("sigmoid", T.sigmoid, [rng.normal(size=(6,))]),
        ("silu", T.silu, [rng.normal(size=(6,))]),
        ("leaky_relu", T.leaky_relu, [_away_from_zero(rng, (6,))]),
        ("relu", T.relu, [_away_from_zero(rng, (6,))]),
        ("tsum", lambda a: T.tsum(a, axis=1), [rng.normal(size=(3, 4))]),
        ("tmean", lambda a: T.tmean(a, axis=0, keepdims=True), [rng.normal(size=(3, 4))]),
        ("reshape", lambda a: T.reshape(a, (4, 3)), [rng.normal(size=(3, 4))]),
        ("transpose", lambda a: T.transpose(a, (1, 0, 2)), [rng.normal(size=(2, 3, 2))]),
        ("getitem", lambda a: T.getitem(a, (slice(None), idx)), [rng.normal(size=(2, 5))]),
        ("concat", lambda a, b: T.concat([a, b], axis=-1), [rng.normal(size=(2, 3)), rng.normal(size=(2, 2))]),
        ("stack", lambda a, b: T.stack([a, b], axis=1), [rng.normal(size=(2, 3)), rng.normal(size=(2, 3))]),
        ("matmul", T.matmul, [rng.normal(size=(3, 4)), rng.normal(size=(4, 2))]),
        ("linear", T.linear, [rng.normal(size=(2, 3)), rng.normal(size=(3, 4)), rng.normal(size=(4,))]),
        (
            "conv2d",
            lambda x, k, b: T.conv2d(x, k, conv_s, conv_p, b),
            [rng.normal(size=(5, 5, 2)), rng.normal(size=(3, 3, 2, 3)), rng.normal(size=(3,))],
        ),
        ("conv2d_1x1", lambda x, k: T.conv2d(x, k, 2, "SAME"), [rng.normal(size=(2, 5, 5, 2)), rng.normal(size=(1, 1, 2, 3))]),
        ("gap", T.gap, [rng.normal(size=(3, 4, 2))]),
        ("softmax", lambda a: T.softmax(a, axis=-1), [rng.normal(size=(2, 5))]),
        ("log_softmax", lambda a: T.log_softmax(a, axis=-1), [rng.normal(size=(2, 5))]),
        ("l2_normalize", lambda a: T.l2_normalize(a, axis=-1), [rng.normal(size=(3, 4))]),
        ("pick", lambda a: T.pick(a, lab), [rng.normal(size=(3, 4))]),
        ("cross_entropy", lambda a: T.cross_entropy(a, lab), [rng.normal(size=(3, 4))]),
        ("cosine_similarity", T.cosine_similarity_matrix, [rng.normal(size=(4, 3))]),
    ]


OP_NAMES = [name for name, _, _ in op_cases(np.random.default_rng(0))]
