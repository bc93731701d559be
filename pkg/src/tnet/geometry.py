"""Candidate grids, crop/resize, receptive-field arithmetic, positional encodings.

Pixel coordinates follow the continuous convention: pixel ``i`` spans
``[i, i+1)`` and its center sits at ``i + 0.5``. Rectangles are half-open
``(x0, y0, x1, y1)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from . import _kernels
from .errors import GeometryError
from .tensor import Tensor, getitem


def round_half_up(v: float) -> int:
    return int(math.floor(v + 0.5))


class Rect(NamedTuple):
    x0: int
    y0: int
    x1: int
    y1: int

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def height(self) -> int:
        return self.y1 - self.y0

    @property
    def area(self) -> int:
        return max(self.width, 0) * max(self.height, 0)

    def center(self) -> tuple[float, float]:
        return (self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0

    def scaled(self, factor: float) -> Rect:
        return Rect(*(round_half_up(v * factor) for v in self))

    def shifted(self, dx: int, dy: int) -> Rect:
        return Rect(self.x0 + dx, self.y0 + dy, self.x1 + dx, self.y1 + dy)


class PositionalTriplet(NamedTuple):
    x: int
    y: int
    s: int


@dataclass(frozen=True)
class GridSpec:
    """An ``n x n`` grid of equally sized, possibly overlapping, square cells.

    Exactly one of ``cell_fraction`` (cell side as a fraction of the image
    side) or ``overlap_fraction`` (overlap between neighbouring cells as a
    fraction of the cell side) must be given.
    """

    n: int
    image_extent: int
    cell_fraction: float | None = None
    overlap_fraction: float | None = None

    def __post_init__(self):
        if self.n < 1:
            raise GeometryError(f"grid side must be >= 1, got {self.n}")
        if (self.cell_fraction is None) == (self.overlap_fraction is None):
            raise GeometryError("set exactly one of cell_fraction / overlap_fraction")
        if self.image_extent < 1:
            raise GeometryError(f"image extent must be positive, got {self.image_extent}")
        ext = self.cell_extent
        if ext < 1 or ext > self.image_extent:
            raise GeometryError(f"cell extent {ext}px outside [1, {self.image_extent}]")

    @property
    def k(self) -> int:
        return self.n * self.n

    @property
    def scale_fraction(self) -> float:
        """Cell side over image side, before pixel rounding."""
        if self.n == 1:
            return 1.0
        if self.cell_fraction is not None:
            return self.cell_fraction
        return 1.0 / (1.0 + (self.n - 1) * (1.0 - self.overlap_fraction))

    @property
    def cell_extent(self) -> int:
        if self.n == 1:
            return self.image_extent
        return round_half_up(self.scale_fraction * self.image_extent)

    @property
    def stride(self) -> float:
        if self.n == 1:
            return 0.0
        return (self.image_extent - self.cell_extent) / (self.n - 1)

    def with_extent(self, extent: int) -> GridSpec:
        return GridSpec(self.n, extent, self.cell_fraction, self.overlap_fraction)


def grid_cells(spec: GridSpec) -> list[Rect]:
    """Row-major list of the ``n*n`` cell rectangles."""
    ext = spec.cell_extent
    starts = [round_half_up(i * spec.stride) for i in range(spec.n)]
    return [Rect(sx, sy, sx + ext, sy + ext) for sy in starts for sx in starts]


def level_extent(base: int, grid: GridSpec, level: int) -> int:
    """Full-image side at ``level`` (1-based) so that level cells are ``base`` px."""
    return round_half_up(base / grid.scale_fraction ** (level - 1))


# --------------------------------------------------------------------------
# crop / resize

def crop_resize(image, rect: Rect, target: int) -> Tensor:
    """Bilinear resize of ``image[rect]`` to ``target x target`` (not differentiable)."""
    arr = image.data if isinstance(image, Tensor) else np.asarray(image)
    H, W = arr.shape[:2]
    if rect.x0 < 0 or rect.y0 < 0 or rect.x1 > W or rect.y1 > H or rect.width < 1 or rect.height < 1:
        raise GeometryError(f"rectangle {tuple(rect)} outside image of {W}x{H}")
    out = _kernels.crop_resize(arr, rect.y0, rect.x0, rect.height, rect.width, target, target)
    return Tensor(out)


def crop_resize_many(images: np.ndarray, rects: Sequence[Rect], owners: Sequence[int], target: int) -> np.ndarray:
    """Crop ``rects[i]`` from ``images[owners[i]]``; returns ``[len(rects), target, target, C]``."""
    c = images.shape[-1]
    out = np.empty((len(rects), target, target, c), dtype=images.dtype)
    for i, (rect, o) in enumerate(zip(rects, owners)):
        out[i] = crop_resize(images[o], rect, target).data
    return out


# --------------------------------------------------------------------------
# receptive fields

class ConvGeometry(NamedTuple):
    kernel: int
    stride: int = 1
    padding: str = "SAME"


@dataclass(frozen=True)
class ReceptiveField:
    size: int
    jump: int
    start: float  # image-coordinate center of the first output pixel

    def centers(self, count: int) -> np.ndarray:
        return self.start + self.jump * np.arange(count)


def rf_step(rf: ReceptiveField, layer: ConvGeometry, extent: int | None) -> tuple[ReceptiveField, int | None]:
    k, s = layer.kernel, layer.stride
    if layer.padding == "VALID":
        pad = 0
        out = None if extent is None else (extent - k) // s + 1
    else:
        if extent is None:
            pad, out = (k - 1) // 2, None
        else:
            out = -(-extent // s)
            pad = max((out - 1) * s + k - extent, 0) // 2
    nxt = ReceptiveField(
        size=rf.size + (k - 1) * rf.jump,
        jump=rf.jump * s,
        start=rf.start + ((k - 1) / 2.0 - pad) * rf.jump,
    )
    return nxt, out


def rf_chain(layers: Sequence[ConvGeometry | Sequence[ConvGeometry]], input_extent: int | None = None) -> list[ReceptiveField]:
    """Receptive field after each entry of ``layers``.

    An entry may be a single :class:`ConvGeometry` or a sequence of them (a
    block); blocks report the field after their last layer. ``input_extent``
    makes SAME-padding offsets exact; without it, symmetric padding is assumed.
    """
    rf = ReceptiveField(1, 1, 0.5)
    extent = input_extent
    result = []
    for entry in layers:
        group = [entry] if isinstance(entry, ConvGeometry) else list(entry)
        for layer in group:
            rf, extent = rf_step(rf, layer, extent)
        result.append(rf)
    return result


def select_tap_indices(h: int, w: int, rf: ReceptiveField, spec: GridSpec) -> np.ndarray:
    """Flat (row-major) feature-map indices nearest to each grid-cell center."""
    cy = rf.centers(h)
    cx = rf.centers(w)
    py, px = np.meshgrid(cy, cx, indexing="ij")
    pix = np.stack([px.ravel(), py.ravel()], axis=1)
    cells = np.array([r.center() for r in grid_cells(spec)])
    d2 = ((cells[:, None, :] - pix[None, :, :]) ** 2).sum(-1)
    # argmin returns the first minimum, i.e. the lowest (row, col) on ties
    return np.argmin(d2, axis=1)


def select_tap(feature_map: Tensor, rf: ReceptiveField, spec: GridSpec) -> Tensor:
    """Pick the ``n x n`` feature pixels whose receptive fields align with the grid cells.

    Accepts ``[h,w,c]`` or batched ``[B,h,w,c]``; the gather is differentiable.
    """
    h, w = feature_map.shape[-3], feature_map.shape[-2]
    if h < spec.n or w < spec.n:
        raise GeometryError(f"feature map {h}x{w} smaller than grid {spec.n}x{spec.n}")
    if h == spec.n and w == spec.n:
        return feature_map
    idx = select_tap_indices(h, w, rf, spec)
    rows, cols = np.divmod(idx, w)
    rows = rows.reshape(spec.n, spec.n)
    cols = cols.reshape(spec.n, spec.n)
    if feature_map.ndim == 3:
        return getitem(feature_map, (rows, cols))
    return getitem(feature_map, (slice(None), rows, cols))


# --------------------------------------------------------------------------
# positional encodings

def positional_encoding(triplet: PositionalTriplet | Sequence[int], length: int) -> np.ndarray:
    """Sine/cosine code of an ``(x, y, s)`` triplet, exactly ``length`` entries.

    Six blocks ``sin(x f), cos(x f), sin(y f), cos(y f), sin(s f), cos(s f)``
    with frequencies ``f_t = (1/100) ** (t / (length // 6))`` for
    ``t = 0 .. length // 6``; the concatenation is cut to ``length``. Short
    codes (below ~30 entries) lose the scale blocks to that cut.
    """
    return positional_encodings([triplet], length)[0]


def positional_encodings(triplets: Sequence[Sequence[int]], length: int) -> np.ndarray:
    if length < 6:
        raise GeometryError(f"encoding length must be >= 6, got {length}")
    m = length // 6
    freqs = (1.0 / 100.0) ** (np.arange(m + 1) / m)
    trip = np.asarray(triplets, dtype=np.float64).reshape(-1, 3)
    blocks = []
    for axis in range(3):
        phase = trip[:, axis : axis + 1] * freqs[None, :]
        blocks.append(np.sin(phase))
        blocks.append(np.cos(phase))
    return np.concatenate(blocks, axis=1)[:, :length]
