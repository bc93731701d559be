import struct

import numpy as np
import pytest

from tnet.errors import ConfigurationError, FormatError
from tnet.geometry import Rect, crop_resize, grid_cells
from tnet.profiler import policy_metrics
from tnet.synth import READABLE_EXTENT, SynthSpec, decode, encode, generate, glyph_bank, load, save


@pytest.fixture(scope="module")
def ds():
    return generate(SynthSpec(seed=3), 200)


def test_generation_is_deterministic(ds):
    again = generate(SynthSpec(seed=3), 200)
    assert encode(again) == encode(ds)
    assert encode(generate(SynthSpec(seed=4), 200)) != encode(ds)


def test_samples_depend_only_on_seed_and_index(ds):
    short = generate(SynthSpec(seed=3), 50)
    assert np.array_equal(short.images, ds.images[:50])


def test_zero_clutter_outside_bbox():
    clean = generate(SynthSpec(clutter_density=0.0, seed=1), 50)
    for i in range(len(clean)):
        x0, y0, x1, y1 = clean.bboxes[i]
        img = clean.images[i].copy()
        ys, xs = np.nonzero(img)
        # the box is the tight bound of the glyph pixels
        assert (xs.min(), ys.min(), xs.max() + 1, ys.max() + 1) == (x0, y0, x1, y1)
        img[y0:y1, x0:x1] = 0
        assert not img.any()


def test_bbox_self_consistency(ds):
    for i in range(20):
        m = policy_metrics([ds.bbox(i)], ds.bbox(i), 64)
        assert m.precision == 1.0 and m.recall == 1.0


def test_glyph_lies_inside_its_cell(ds):
    cells = grid_cells(ds.spec.placement_grid)
    for i in range(len(ds)):
        c = cells[ds.cells[i]]
        x0, y0, x1, y1 = ds.bboxes[i]
        assert c.x0 < x0 and c.y0 < y0 and x1 < c.x1 and y1 < c.y1


def test_clean_image_is_exactly_the_class_glyph():
    clean = generate(SynthSpec(clutter_density=0.0, seed=5), 40)
    bank = glyph_bank(4, 12)
    for i in range(len(clean)):
        g = bank[clean.labels[i]]
        gy, gx = (int(v.min()) for v in np.nonzero(g))
        x0, y0 = (int(v) for v in clean.bboxes[i][:2])
        ref = np.zeros((64, 64), dtype=np.float32)
        ref[y0 - gy : y0 - gy + 12, x0 - gx : x0 - gx + 12] = g
        assert np.array_equal(clean.images[i], ref)


def test_target_glyph_survives_clutter(ds):
    # clutter lives in other cells, so the target cell holds the full-contrast glyph only
    cells = grid_cells(ds.spec.placement_grid)
    for i in range(len(ds)):
        c = cells[ds.cells[i]]
        x0, y0, x1, y1 = ds.bboxes[i]
        inside = ds.images[i, c.y0 : c.y1, c.x0 : c.x1]
        assert set(np.unique(inside)) == {0.0, 1.0}
        assert ds.images[i, y0:y1, x0:x1].max() == 1.0


def _within_3_sigma(values, k):
    n = len(values)
    counts = np.bincount(values, minlength=k)
    sigma = np.sqrt(n * (1 / k) * (1 - 1 / k))
    return bool(np.all(np.abs(counts - n / k) < 3 * sigma))


def test_marginals_are_uniform():
    big = generate(SynthSpec(clutter_density=0.0), 10_000)
    assert _within_3_sigma(big.labels, 4) and _within_3_sigma(big.cells, 16)


def test_glyph_bank_distinct_and_balanced():
    bank = glyph_bank(8, 12)
    flat = bank.reshape(8, -1)
    assert len({row.tobytes() for row in flat}) == 8
    # every 2x2 window is half lit, so a 2x downscale is flat for every class
    windows = bank[:, :-1, :-1] + bank[:, 1:, :-1] + bank[:, :-1, 1:] + bank[:, 1:, 1:]
    assert np.all(windows == 2)


def test_level_one_view_is_information_limited():
    spec = SynthSpec(clutter_density=0.0, seed=2)
    assert spec.level1_glyph_extent == 3.0 < READABLE_EXTENT and spec.information_limited
    clean = generate(spec, 30)
    for i in range(len(clean)):
        img = clean.images[i][..., None]
        small = crop_resize(img, Rect(0, 0, 64, 64), 16).data[..., 0]
        x0, y0, x1, y1 = clean.bboxes[i]
        # output pixel j samples input pixels 4j+1 and 4j+2 on each axis
        ys = [j for j in range(16) if y0 <= 4 * j + 1 and 4 * j + 2 < y1]
        xs = [j for j in range(16) if x0 <= 4 * j + 1 and 4 * j + 2 < x1]
        inner = small[np.ix_(ys, xs)]
        assert inner.size and np.allclose(inner, 0.5, atol=1e-6)


def test_model_inputs_range(ds):
    x = ds.model_inputs()
    assert x.shape == (200, 64, 64, 1) and x.dtype == np.float32
    assert x.min() >= -1.0 and x.max() <= 1.0


def test_spec_validation():
    with pytest.raises(ConfigurationError):
        SynthSpec(glyph_extent=15)
    with pytest.raises(ConfigurationError):
        SynthSpec(num_classes=9)
    with pytest.raises(ConfigurationError):
        SynthSpec(clutter_density=1.5)


# -- file format --------------------------------------------------------

def test_round_trip(ds, tmp_path):
    path = tmp_path / "d.tnsd"
    crc = save(ds, path)
    back = load(path)
    assert back.spec == ds.spec
    for a in ("images", "labels", "cells", "bboxes"):
        assert np.array_equal(getattr(back, a), getattr(ds, a))
    assert crc == struct.unpack("<I", path.read_bytes()[-4:])[0]


def test_empty_dataset(tmp_path):
    empty = generate(SynthSpec(), 0)
    save(empty, tmp_path / "e.tnsd")
    back = load(tmp_path / "e.tnsd")
    assert len(back) == 0 and back.spec == empty.spec


def test_header_layout(ds):
    buf = encode(ds.subset(slice(0, 2)))
    assert buf[:4] == b"TNSD"
    assert struct.unpack_from("<HI", buf, 4) == (1, 2)


def _corrupt(buf, pos, byte=0xFF):
    b = bytearray(buf)
    b[pos] ^= byte
    return bytes(b)


def test_format_errors(ds):
    buf = encode(ds.subset(slice(0, 3)))
    with pytest.raises(FormatError) as e:
        decode(_corrupt(buf, 0))
    assert e.value.offset == 0
    with pytest.raises(FormatError) as e:
        decode(_corrupt(buf, 4, 0x07))
    assert e.value.offset == 4
    with pytest.raises(FormatError, match="checksum"):
        decode(_corrupt(buf, len(buf) - 100))
    with pytest.raises(FormatError, match="truncated"):
        decode(buf[:-10])
    with pytest.raises(FormatError, match="trailing"):
        decode(buf + b"\x00")
    with pytest.raises(FormatError):
        decode(b"TN")
