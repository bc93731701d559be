"""Time the numba kernels against their pure-numpy twins.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Each kernel is run once beforehand so compilation is not timed, and both
outputs are compared before timing. Shapes follow the glyph task
(batch 32, 16 px base resolution) and the 224 px ImageNet-scale crops.
"""

import argparse
import timeit

import numpy as np

from tnet import _kernels as K


def cases(rng):
    x_small = rng.normal(size=(32, 18, 18, 8))  # padded 16 px maps, 8 channels
    x_large = rng.normal(size=(8, 226, 226, 3))  # padded 224 px RGB crops
    cols_small = K.im2col_numpy(x_small, 3, 1, 16, 16)
    cols_large = K.im2col_numpy(x_large, 3, 2, 112, 112)
    img = rng.uniform(size=(224, 224, 3))
    rects = np.sort(rng.integers(0, 448, size=(64, 2, 2)), axis=1).transpose(0, 2, 1).reshape(64, 4)
    return [
        ("im2col 32x16x16x8 k3", K.im2col_numpy, "im2col_numba", (x_small, 3, 1, 16, 16)),
        ("im2col 8x224x224x3 k3 s2", K.im2col_numpy, "im2col_numba", (x_large, 3, 2, 112, 112)),
        ("col2im 32x16x16x8 k3", K.col2im_numpy, "col2im_numba", (cols_small, 18, 18, 1)),
        ("col2im 8x224x224x3 k3 s2", K.col2im_numpy, "col2im_numba", (cols_large, 225, 225, 2)),
        ("crop_resize 224 -> 77", K.crop_resize_numpy, "crop_resize_numba", (img, 10.0, 20.0, 150.0, 150.0, 77, 77)),
        ("crop_resize 224 -> 16", K.crop_resize_numpy, "crop_resize_numba", (img, 0.0, 0.0, 224.0, 224.0, 16, 16)),
        ("union_mask 64 rects 448 px", K.union_mask_numpy, "union_mask_numba", (rects, 448, 448)),
    ]


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=20)
    args = p.parse_args()
    rng = np.random.default_rng(0)
    if not hasattr(K, "im2col_numba"):
        print("numba is not importable; only the numpy kernels exist")
        return
    print(f"{'kernel':<30} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}")
    for name, np_fn, nb_name, fn_args in cases(rng):
        nb_fn = getattr(K, nb_name)
        ref = np_fn(*fn_args)
        got = nb_fn(*fn_args)  # compiles on first call
        assert np.allclose(ref, got, rtol=0, atol=1e-12), name
        t_np = min(timeit.repeat(lambda: np_fn(*fn_args), number=1, repeat=args.repeat)) * 1e3
        t_nb = min(timeit.repeat(lambda: nb_fn(*fn_args), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<30} {t_np:>10.3f} {t_nb:>10.3f} {t_np / t_nb:>7.1f}x")


if __name__ == "__main__":
    main()
