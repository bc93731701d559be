"""Versioned binary checkpoints.

Layout (little-endian)::

    b"TNCK" | u16 version | u32 manifest length | manifest (UTF-8 JSON)
    | raw arrays in manifest order | u32 CRC32 of everything before it

The manifest holds the run config text, the name/shape/dtype of every
stored array, optimizer step count, baselines, RNG state and training step.
It is read and checked against the model before any weight is touched.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig, parse_config, serialize_config
from .errors import FormatError, ShapeError
from .network import TNetModel
from .training import BaselineState, TrainerState, make_trainer

MAGIC = b"TNCK"
VERSION = 1
_HEAD = struct.Struct("<4sHI")


class CheckpointShapeError(ShapeError):
    """Stored arrays do not match the model described by the config."""


def _arrays(state: TrainerState) -> list[tuple[str, np.ndarray]]:
    out = [("param/" + k, p.data) for k, p in state.optimizer.params.items()]
    out += [("adam_m/" + k, v) for k, v in state.optimizer.m.items()]
    out += [("adam_v/" + k, v) for k, v in state.optimizer.v.items()]
    return out


def save_checkpoint(path: str | Path, cfg: RunConfig, state: TrainerState) -> None:
    arrays = _arrays(state)
    manifest = {
        "config": serialize_config(cfg),
        "arrays": [[name, list(a.shape), a.dtype.str] for name, a in arrays],
        "step": state.step,
        "adam_t": state.optimizer.t,
        "b_s": state.b_s.b,
        "b_k": state.b_k.b,
        "rng": state.rng.bit_generator.state,
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    parts = [_HEAD.pack(MAGIC, VERSION, len(blob)), blob]
    parts += [np.ascontiguousarray(a).tobytes() for _, a in arrays]
    body = b"".join(parts)
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


@dataclass
class Checkpoint:
    config: RunConfig
    state: TrainerState


def read_manifest(buf: bytes) -> tuple[dict, int]:
    if len(buf) < _HEAD.size:
        raise FormatError("truncated checkpoint header", len(buf))
    magic, version, n = _HEAD.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    end = _HEAD.size + n
    if len(buf) < end:
        raise FormatError("truncated manifest", len(buf))
    try:
        manifest = json.loads(buf[_HEAD.size : end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt manifest: {exc}", _HEAD.size) from None
    return manifest, end


def load_checkpoint(path: str | Path) -> Checkpoint:
    """Rebuild model, optimizer, baselines and RNG from a checkpoint file."""
    buf = Path(path).read_bytes()
    manifest, off = read_manifest(buf)
    cfg = parse_config(manifest["config"], f"{path}:manifest")
    model = TNetModel(cfg.model, cfg.traversal.grid_n, np.random.default_rng(0), spec=cfg.backbone_spec())
    state = make_trainer(model, cfg.train_config())
    expected = {name: (tuple(a.shape), a.dtype.str) for name, a in _arrays(state)}
    stored = {name: (tuple(shape), dt) for name, shape, dt in manifest["arrays"]}
    missing = sorted(set(expected) - set(stored))
    extra = sorted(set(stored) - set(expected))
    if missing or extra:
        raise CheckpointShapeError(f"checkpoint arrays differ from the model: missing {missing[:3]}, unexpected {extra[:3]}")
    for name, want in expected.items():
        if stored[name] != want:
            raise CheckpointShapeError(f"{name}: checkpoint has shape/dtype {stored[name]}, model expects {want}")
    total = sum(int(np.prod(s)) * np.dtype(d).itemsize for s, d in stored.values())
    if len(buf) != off + total + 4:
        raise FormatError(f"checkpoint size {len(buf)} does not match manifest ({off + total + 4})", len(buf))
    (crc,) = struct.unpack_from("<I", buf, off + total)
    if zlib.crc32(buf[: off + total]) != crc:
        raise FormatError("checkpoint checksum mismatch", off + total)
    targets = dict(_arrays(state))
    for name, shape, dt in manifest["arrays"]:
        n = int(np.prod(shape))
        arr = np.frombuffer(buf, dtype=np.dtype(dt), count=n, offset=off).reshape(shape)
        targets[name][...] = arr
        off += arr.nbytes
    state.optimizer.t = int(manifest["adam_t"])
    state.b_s = BaselineState(float(manifest["b_s"]))
    state.b_k = BaselineState(float(manifest["b_k"]))
    state.rng.bit_generator.state = manifest["rng"]
    state.step = int(manifest["step"])
    return Checkpoint(cfg, state)
