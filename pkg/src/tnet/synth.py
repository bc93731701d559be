"""Glyph-in-cell synthetic dataset.

Each image holds one full-contrast class glyph strictly inside one cell of
a placement grid, plus low-contrast clutter glyphs (random classes,
independent of the label) in other cells. All glyph patterns have exactly
half their pixels lit in every 2x2 window, so downscaling the whole image
by the grid factor blurs every glyph into the same flat patch: the class is
only readable after zooming into the right cell.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, FormatError
from .geometry import GridSpec, Rect, grid_cells

MAGIC = b"TNSD"
VERSION = 1
TARGET_CONTRAST = 1.0
CLUTTER_CONTRAST = 0.4
# a glyph narrower than this many pixels after the level-1 downscale is unreadable
READABLE_EXTENT = 4

_HEADER = struct.Struct("<4sHI")
_SPEC = struct.Struct("<HHHHfQ")
_SAMPLE_HEAD = struct.Struct("<HH4H")


def glyph_bank(num_classes: int, extent: int) -> np.ndarray:
    """``[num_classes, extent, extent]`` fixed binary patterns, pairwise distinct."""
    r, c = np.mgrid[0:extent, 0:extent]
    patterns = [
        r % 2,  # horizontal stripes
        c % 2,  # vertical stripes
        (r + c) % 2,  # checkerboard
        (c // 2 + r) % 2,  # staggered pairs
        (r // 2 + c) % 2,  # staggered pairs, transposed
        (r + 1) % 2,  # shifted horizontal stripes
        (c + 1) % 2,  # shifted vertical stripes
        (r + c + 1) % 2,  # shifted checkerboard
    ]
    if num_classes > len(patterns):
        raise ConfigurationError(f"at most {len(patterns)} glyph classes are available, asked for {num_classes}")
    return np.stack(patterns[:num_classes]).astype(np.float32)


@dataclass(frozen=True)
class SynthSpec:
    image_extent: int = 64
    glyph_extent: int = 12
    num_classes: int = 4
    grid_n: int = 4
    clutter_density: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 1:
            raise ConfigurationError("num_classes must be >= 1")
        if not 0.0 <= self.clutter_density <= 1.0:
            raise ConfigurationError(f"clutter density must lie in [0, 1], got {self.clutter_density}")
        if self.glyph_extent < 1:
            raise ConfigurationError("glyph extent must be >= 1")
        cell = self.placement_grid.cell_extent
        if self.glyph_extent > cell - 2:
            raise ConfigurationError(
                f"glyph of {self.glyph_extent} px does not fit strictly inside a {cell} px cell"
            )
        glyph_bank(self.num_classes, self.glyph_extent)

    @property
    def placement_grid(self) -> GridSpec:
        return GridSpec(self.grid_n, self.image_extent, cell_fraction=1.0 / self.grid_n)

    @property
    def level1_glyph_extent(self) -> float:
        """Glyph side after downscaling the image so one cell becomes one base-resolution input."""
        return self.glyph_extent / self.grid_n

    @property
    def information_limited(self) -> bool:
        return self.level1_glyph_extent < READABLE_EXTENT


@dataclass
class Dataset:
    spec: SynthSpec
    images: np.ndarray  # [n, E, E] float32 in [0, 1]
    labels: np.ndarray  # [n] int64
    cells: np.ndarray  # [n] int64, row-major placement cell
    bboxes: np.ndarray  # [n, 4] int64 (x0, y0, x1, y1), half-open

    def __len__(self) -> int:
        return len(self.labels)

    def model_inputs(self) -> np.ndarray:
        """``[n, E, E, 1]`` images rescaled to [-1, 1]."""
        return (self.images[..., None] * 2.0 - 1.0).astype(np.float32)

    def bbox(self, i: int) -> Rect:
        return Rect(*(int(v) for v in self.bboxes[i]))

    def subset(self, idx) -> Dataset:
        return Dataset(self.spec, self.images[idx], self.labels[idx], self.cells[idx], self.bboxes[idx])

    def to_bytes(self) -> bytes:
        return encode(self)

    @property
    def checksum(self) -> int:
        return zlib.crc32(encode_body(self))


def _sample(spec: SynthSpec, bank: np.ndarray, cells: list[Rect], index: int):
    rng = np.random.default_rng([spec.seed, index])
    E, g = spec.image_extent, spec.glyph_extent
    label = int(rng.integers(spec.num_classes))
    cell = int(rng.integers(len(cells)))
    img = np.zeros((E, E), dtype=np.float32)
    bbox = None
    for j, rect in enumerate(cells):
        room = rect.width - g - 1  # offsets 1..room keep the glyph strictly inside
        if j == cell:
            cls, contrast = label, TARGET_CONTRAST
        elif rng.random() < spec.clutter_density:
            cls, contrast = int(rng.integers(spec.num_classes)), CLUTTER_CONTRAST
        else:
            continue
        ox = rect.x0 + int(rng.integers(1, room + 1))
        oy = rect.y0 + int(rng.integers(1, room + 1))
        patch = bank[cls] * contrast
        region = img[oy : oy + g, ox : ox + g]
        np.maximum(region, patch, out=region)
        if j == cell:
            ys, xs = np.nonzero(bank[cls])
            bbox = (ox + xs.min(), oy + ys.min(), ox + xs.max() + 1, oy + ys.max() + 1)
    return img, label, cell, bbox


def generate(spec: SynthSpec, count: int) -> Dataset:
    """Deterministic dataset of ``count`` samples; sample ``i`` depends only on ``(seed, i)``."""
    if count < 0:
        raise ConfigurationError(f"count must be >= 0, got {count}")
    bank = glyph_bank(spec.num_classes, spec.glyph_extent)
    cells = grid_cells(spec.placement_grid)
    E = spec.image_extent
    images = np.zeros((count, E, E), dtype=np.float32)
    labels = np.zeros(count, dtype=np.int64)
    cell_idx = np.zeros(count, dtype=np.int64)
    bboxes = np.zeros((count, 4), dtype=np.int64)
    for i in range(count):
        images[i], labels[i], cell_idx[i], bboxes[i] = _sample(spec, bank, cells, i)
    return Dataset(spec, images, labels, cell_idx, bboxes)


# --------------------------------------------------------------------------
# binary format

def encode_body(ds: Dataset) -> bytes:
    s = ds.spec
    parts = [
        _HEADER.pack(MAGIC, VERSION, len(ds)),
        _SPEC.pack(s.image_extent, s.glyph_extent, s.num_classes, s.grid_n, s.clutter_density, s.seed),
    ]
    for i in range(len(ds)):
        parts.append(_SAMPLE_HEAD.pack(int(ds.labels[i]), int(ds.cells[i]), *(int(v) for v in ds.bboxes[i])))
        parts.append(np.ascontiguousarray(ds.images[i], dtype="<f4").tobytes())
    return b"".join(parts)


def encode(ds: Dataset) -> bytes:
    body = encode_body(ds)
    return body + struct.pack("<I", zlib.crc32(body))


def decode(buf: bytes) -> Dataset:
    if len(buf) < _HEADER.size:
        raise FormatError("truncated header", len(buf))
    magic, version, count = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    off = _HEADER.size
    if len(buf) < off + _SPEC.size:
        raise FormatError("truncated spec block", len(buf))
    E, g, k, n, density, seed = _SPEC.unpack_from(buf, off)
    off += _SPEC.size
    try:
        spec = SynthSpec(E, g, k, n, float(np.float32(density)), seed)
    except ConfigurationError as exc:
        raise FormatError(f"invalid spec block: {exc}", _HEADER.size) from None
    per = _SAMPLE_HEAD.size + 4 * E * E
    end = off + count * per
    if len(buf) < end + 4:
        raise FormatError(f"truncated: {count} samples need {end + 4} bytes, file has {len(buf)}", len(buf))
    if len(buf) > end + 4:
        raise FormatError(f"{len(buf) - end - 4} trailing bytes after checksum", end + 4)
    (crc,) = struct.unpack_from("<I", buf, end)
    if zlib.crc32(buf[:end]) != crc:
        raise FormatError("checksum mismatch", end)
    images = np.zeros((count, E, E), dtype=np.float32)
    labels = np.zeros(count, dtype=np.int64)
    cells = np.zeros(count, dtype=np.int64)
    bboxes = np.zeros((count, 4), dtype=np.int64)
    for i in range(count):
        lab, cell, *box = _SAMPLE_HEAD.unpack_from(buf, off)
        labels[i], cells[i], bboxes[i] = lab, cell, box
        off += _SAMPLE_HEAD.size
        images[i] = np.frombuffer(buf, dtype="<f4", count=E * E, offset=off).reshape(E, E)
        off += 4 * E * E
    return Dataset(spec, images, labels, cells, bboxes)


def save(ds: Dataset, path: str | Path) -> int:
    """Write ``ds``; returns the CRC32 stored in the trailer."""
    data = encode(ds)
    Path(path).write_bytes(data)
    return struct.unpack("<I", data[-4:])[0]


def load(path: str | Path) -> Dataset:
    return decode(Path(path).read_bytes())
