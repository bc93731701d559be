"""Hot inner loops, compiled with numba when available.

Every kernel exists twice: a ``@njit`` version and a pure-numpy version with
identical semantics. The numba path is used unless ``TNET_DISABLE_NUMBA=1``
is set in the environment (or numba cannot be imported). ``BACKEND`` reports
which one is active; both are importable directly for cross-checking.
"""

from __future__ import annotations

import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _HAVE_NUMBA = False

USE_NUMBA = _HAVE_NUMBA and os.environ.get("TNET_DISABLE_NUMBA", "0") not in ("1", "true", "yes")
BACKEND = "numba" if USE_NUMBA else "numpy"


# --------------------------------------------------------------------------
# numpy reference implementations

def im2col_numpy(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """[B,Hp,Wp,C] -> [B,ho,wo,k,k,C] patches."""
    win = sliding_window_view(xp, (k, k), axis=(1, 2))  # [B,Hp-k+1,Wp-k+1,C,k,k]
    win = win[:, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))


def col2im_numpy(cols: np.ndarray, hp: int, wp: int, stride: int) -> np.ndarray:
    """Adjoint of im2col: scatter-add [B,ho,wo,k,k,C] patches into [B,hp,wp,C]."""
    b, ho, wo, k, _, c = cols.shape
    out = np.zeros((b, hp, wp, c), dtype=cols.dtype)
    span_h = (ho - 1) * stride + 1
    span_w = (wo - 1) * stride + 1
    for i in range(k):
        for j in range(k):
            out[:, i : i + span_h : stride, j : j + span_w : stride, :] += cols[:, :, :, i, j, :]
    return out


def _bilinear_taps(start: float, length: float, n_out: int, n_in: int):
    # half-pixel centers; source coordinates clamped to the valid range
    scale = length / n_out
    src = start + (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    return lo, hi, frac


def crop_resize_numpy(
    img: np.ndarray, y0: float, x0: float, h: float, w: float, out_h: int, out_w: int
) -> np.ndarray:
    """Bilinear resample of the window (y0, x0, h, w) of an [H,W,C] image."""
    H, W, _ = img.shape
    ylo, yhi, fy = _bilinear_taps(y0, h, out_h, H)
    xlo, xhi, fx = _bilinear_taps(x0, w, out_w, W)
    fy = fy[:, None, None]
    fx = fx[None, :, None]
    top = img[ylo][:, xlo] * (1.0 - fx) + img[ylo][:, xhi] * fx
    bot = img[yhi][:, xlo] * (1.0 - fx) + img[yhi][:, xhi] * fx
    return (top * (1.0 - fy) + bot * fy).astype(img.dtype, copy=False)


def union_mask_numpy(rects: np.ndarray, height: int, width: int) -> np.ndarray:
    """Boolean [height,width] mask of the union of integer rects (x0,y0,x1,y1)."""
    mask = np.zeros((height, width), dtype=np.bool_)
    for x0, y0, x1, y1 in rects:
        mask[max(y0, 0) : max(min(y1, height), 0), max(x0, 0) : max(min(x1, width), 0)] = True
    return mask


# --------------------------------------------------------------------------
# numba implementations

if _HAVE_NUMBA:

    @njit(cache=True)
    def im2col_numba(xp, k, stride, ho, wo):
        b, _, _, c = xp.shape
        out = np.empty((b, ho, wo, k, k, c), dtype=xp.dtype)
        for n in range(b):
            for oy in range(ho):
                for ox in range(wo):
                    iy = oy * stride
                    ix = ox * stride
                    for i in range(k):
                        for j in range(k):
                            for ch in range(c):
                                out[n, oy, ox, i, j, ch] = xp[n, iy + i, ix + j, ch]
        return out

    @njit(cache=True)
    def col2im_numba(cols, hp, wp, stride):
        b, ho, wo, k, _, c = cols.shape
        out = np.zeros((b, hp, wp, c), dtype=cols.dtype)
        # kernel offsets outermost so the summation order matches the numpy path
        for i in range(k):
            for j in range(k):
                for n in range(b):
                    for oy in range(ho):
                        for ox in range(wo):
                            iy = oy * stride + i
                            ix = ox * stride + j
                            for ch in range(c):
                                out[n, iy, ix, ch] += cols[n, oy, ox, i, j, ch]
        return out

    @njit(cache=True)
    def crop_resize_numba(img, y0, x0, h, w, out_h, out_w):
        H, W, C = img.shape
        out = np.empty((out_h, out_w, C), dtype=img.dtype)
        sy = h / out_h
        sx = w / out_w
        for oy in range(out_h):
            fy = y0 + (oy + 0.5) * sy - 0.5
            fy = min(max(fy, 0.0), H - 1.0)
            ylo = int(np.floor(fy))
            yhi = min(ylo + 1, H - 1)
            ty = fy - ylo
            for ox in range(out_w):
                fx = x0 + (ox + 0.5) * sx - 0.5
                fx = min(max(fx, 0.0), W - 1.0)
                xlo = int(np.floor(fx))
                xhi = min(xlo + 1, W - 1)
                tx = fx - xlo
                for ch in range(C):
                    top = img[ylo, xlo, ch] * (1.0 - tx) + img[ylo, xhi, ch] * tx
                    bot = img[yhi, xlo, ch] * (1.0 - tx) + img[yhi, xhi, ch] * tx
                    out[oy, ox, ch] = top * (1.0 - ty) + bot * ty
        return out

    @njit(cache=True)
    def union_mask_numba(rects, height, width):
        mask = np.zeros((height, width), dtype=np.bool_)
        for r in range(rects.shape[0]):
            x0 = max(rects[r, 0], 0)
            y0 = max(rects[r, 1], 0)
            x1 = min(rects[r, 2], width)
            y1 = min(rects[r, 3], height)
            for y in range(y0, y1):
                for x in range(x0, x1):
                    mask[y, x] = True
        return mask

else:  # pragma: no cover
    im2col_numba = im2col_numpy
    col2im_numba = col2im_numpy
    crop_resize_numba = crop_resize_numpy
    union_mask_numba = union_mask_numpy


# --------------------------------------------------------------------------
# dispatch

def im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    if USE_NUMBA:
        return im2col_numba(np.ascontiguousarray(xp), k, stride, ho, wo)
    return im2col_numpy(xp, k, stride, ho, wo)


def col2im(cols: np.ndarray, hp: int, wp: int, stride: int) -> np.ndarray:
    if USE_NUMBA:
        return col2im_numba(np.ascontiguousarray(cols), hp, wp, stride)
    return col2im_numpy(cols, hp, wp, stride)


def crop_resize(img: np.ndarray, y0: float, x0: float, h: float, w: float, out_h: int, out_w: int) -> np.ndarray:
    if USE_NUMBA:
        return crop_resize_numba(np.ascontiguousarray(img), float(y0), float(x0), float(h), float(w), out_h, out_w)
    return crop_resize_numpy(img, y0, x0, h, w, out_h, out_w)


def union_mask(rects, height: int, width: int) -> np.ndarray:
    arr = np.asarray(rects, dtype=np.int64).reshape(-1, 4)
    if USE_NUMBA:
        return union_mask_numba(arr, height, width)
    return union_mask_numpy(arr, height, width)
