"""Run configuration: a flat ``key = value`` text format with dotted sections.

Example::

    # glyph task
    seed = 0
    data.count = 4000
    traversal.locations = 1
    loss.lambda_c = 0.3

Blank lines and ``#`` comments are ignored. Values are ints, floats,
``true``/``false``, ``none``, comma-separated lists or bare strings. Every key
must be known; unknown keys and bad values are reported with their line.
"""

from __future__ import annotations

import types
import typing
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .errors import ConfigurationError, TNetError
from .network import BACKBONES, LAYER_KINDS, BackboneSpec, LayerSpec, ModelConfig, get_backbone_spec, trace
from .synth import SynthSpec
from .training import LossWeights, TrainConfig
from .traversal import TraversalConfig


@dataclass(frozen=True)
class DataConfig:
    image_extent: int = 64
    glyph_extent: int = 12
    num_classes: int = 4
    grid_n: int = 4
    clutter_density: float = 0.5
    count: int = 4000

    def synth_spec(self, seed: int) -> SynthSpec:
        return SynthSpec(self.image_extent, self.glyph_extent, self.num_classes, self.grid_n, self.clutter_density, seed)


@dataclass(frozen=True)
class TrainSection:
    steps: int = 1500
    batch_size: int = 32
    lr: float = 1e-3
    lr_drop_step: int | None = None
    lr_drop_factor: float = 0.1
    grad_clip: float | None = 5.0
    shared_baseline: bool = True
    include_root: bool = False
    per_node_max_level: int | None = None
    log_every: int = 1
    checkpoint_every: int | None = None


@dataclass(frozen=True)
class TraversalSection:
    levels: int = 2
    base_resolution: int = 16
    grid_n: int = 4
    cell_fraction: float | None = 0.25
    overlap_fraction: float | None = None
    locations: tuple[int, ...] = (1,)
    selection_mode: str = "topk"
    exact_seq_prob: bool = False


@dataclass(frozen=True)
class BackboneSection:
    """Inline backbone, used when ``model.backbone = inline``."""

    base_resolution: int = 16
    in_channels: int = 1
    tap_layer: int = 2
    layers: str = ""


@dataclass(frozen=True)
class EvalSection:
    batch_size: int = 128
    max_locations: int | None = None


SECTIONS: dict[str, type] = {
    "data": DataConfig,
    "model": ModelConfig,
    "backbone": BackboneSection,
    "traversal": TraversalSection,
    "loss": LossWeights,
    "train": TrainSection,
    "eval": EvalSection,
}
TOP_LEVEL = {"seed": int, "workers": int}


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    workers: int = 1
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    backbone: BackboneSection = field(default_factory=BackboneSection)
    traversal: TraversalSection = field(default_factory=TraversalSection)
    loss: LossWeights = field(default_factory=LossWeights)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)

    # -- derived objects ----------------------------------------------------
    def backbone_spec(self) -> BackboneSpec:
        if self.model.backbone == "inline":
            b = self.backbone
            return BackboneSpec("inline", b.base_resolution, b.in_channels, parse_layers(b.layers), b.tap_layer)
        return get_backbone_spec(self.model.backbone)

    def traversal_config(self) -> TraversalConfig:
        t = self.traversal
        return TraversalConfig(
            levels=t.levels,
            base_resolution=t.base_resolution,
            grid_n=t.grid_n,
            cell_fraction=t.cell_fraction,
            overlap_fraction=t.overlap_fraction,
            locations_per_level=tuple(t.locations) if t.levels > 1 else (),
            selection_mode=t.selection_mode,
            exact_seq_prob=t.exact_seq_prob,
        )

    def train_config(self) -> TrainConfig:
        s = self.train
        return TrainConfig(
            steps=s.steps,
            batch_size=s.batch_size,
            lr=s.lr,
            lr_drop_step=s.lr_drop_step,
            lr_drop_factor=s.lr_drop_factor,
            grad_clip=s.grad_clip,
            weights=self.loss,
            shared_baseline=s.shared_baseline,
            include_root=s.include_root,
            per_node_max_level=s.per_node_max_level,
            seed=self.seed,
            log_every=s.log_every,
        )

    def synth_spec(self) -> SynthSpec:
        return self.data.synth_spec(self.seed)

    def validate(self, need_data: bool = True) -> None:
        """Cross-module consistency checks; raises :class:`ConfigurationError`."""
        spec = self.backbone_spec()
        tr = trace(spec)
        trav = self.traversal_config()
        if spec.base_resolution != trav.base_resolution:
            raise ConfigurationError(
                f"backbone base resolution {spec.base_resolution} != traversal.base_resolution {trav.base_resolution}"
            )
        tap = tr[spec.tap_layer].out_shape
        if tap[0] < trav.grid_n:
            raise ConfigurationError(f"tap map {tap[0]}x{tap[1]} is smaller than the {trav.grid_n}x{trav.grid_n} grid")
        if need_data:
            if self.data.image_extent != trav.full_extent:
                raise ConfigurationError(
                    f"data.image_extent {self.data.image_extent} != {trav.full_extent} px required by "
                    f"{trav.levels} levels at base {trav.base_resolution}"
                )
            if self.data.num_classes != self.model.num_classes:
                raise ConfigurationError(
                    f"data.num_classes {self.data.num_classes} != model.num_classes {self.model.num_classes}"
                )
            if spec.in_channels != 1:
                raise ConfigurationError("glyph images have one channel; backbone in_channels must be 1")
            self.synth_spec()
        if self.workers < 1:
            raise ConfigurationError("workers must be >= 1")


# --------------------------------------------------------------------------
# inline backbone layers:  "conv k=3 s=1 p=SAME c=8 act=leaky_relu; gap"

_LAYER_KEYS = {"k": "kernel", "s": "stride", "p": "padding", "c": "channels", "act": "activation", "expand": "expand"}


def parse_layers(text: str) -> tuple[LayerSpec, ...]:
    layers = []
    for chunk in text.split(";"):
        tokens = chunk.split()
        if not tokens:
            continue
        kind, kwargs = tokens[0], {}
        if kind not in LAYER_KINDS:
            raise ConfigurationError(f"unknown layer kind {kind!r} in backbone.layers")
        for tok in tokens[1:]:
            key, sep, val = tok.partition("=")
            if not sep or key not in _LAYER_KEYS:
                raise ConfigurationError(f"bad layer option {tok!r}; use k=, s=, p=, c=, act=, expand=")
            name = _LAYER_KEYS[key]
            kwargs[name] = val if name in ("padding", "activation") else int(val)
        layers.append(LayerSpec(kind, **kwargs))
    if not layers:
        raise ConfigurationError("backbone.layers is empty")
    return tuple(layers)


def format_layers(layers) -> str:
    inv = {v: k for k, v in _LAYER_KEYS.items()}
    default = LayerSpec("gap")
    out = []
    for layer in layers:
        parts = [layer.kind]
        for f in fields(LayerSpec):
            if f.name == "kind":
                continue
            v = getattr(layer, f.name)
            if v != getattr(default, f.name):
                parts.append(f"{inv[f.name]}={v}")
        out.append(" ".join(parts))
    return "; ".join(out)


# --------------------------------------------------------------------------
# value parsing

def _parse_value(raw: str, hint, key: str):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    low = raw.strip().lower()
    if origin in (typing.Union, types.UnionType) and type(None) in args:
        if low in ("none", "null", ""):
            return None
        inner = [a for a in args if a is not type(None)][0]
        return _parse_value(raw, inner, key)
    if origin is tuple:
        elem = args[0]
        items = [s for s in raw.split(",") if s.strip()]
        return tuple(_parse_value(s, elem, key) for s in items)
    if hint is bool:
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ValueError(f"expected true/false, got {raw!r}")
    if hint is int:
        return int(raw.strip())
    if hint is float:
        return float(raw.strip())
    if hint is str:
        return raw.strip()
    raise ValueError(f"unsupported type {hint}")


def _format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(_format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _hints(cls) -> dict:
    return typing.get_type_hints(cls)


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    values: dict[str, dict] = {name: {} for name in SECTIONS}
    top: dict = {}
    lines: dict[str, int] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        key, sep, raw = stripped.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigurationError(f"{source}:{lineno}: expected 'key = value', got {line.strip()!r}")
        if key in lines:
            raise ConfigurationError(f"{source}:{lineno}: duplicate key {key!r} (first set on line {lines[key]})")
        lines[key] = lineno
        if key in TOP_LEVEL:
            try:
                top[key] = _parse_value(raw, TOP_LEVEL[key], key)
            except ValueError as exc:
                raise ConfigurationError(f"{source}:{lineno}: field {key!r}: {exc}") from None
            continue
        section, dot, name = key.partition(".")
        if not dot or section not in SECTIONS:
            raise ConfigurationError(f"{source}:{lineno}: unknown key {key!r}")
        hints = _hints(SECTIONS[section])
        if name not in hints:
            raise ConfigurationError(f"{source}:{lineno}: unknown field {name!r} in section {section!r}")
        try:
            values[section][name] = _parse_value(raw, hints[name], key)
        except ValueError as exc:
            raise ConfigurationError(f"{source}:{lineno}: field {key!r}: {exc}") from None
    kwargs = dict(top)
    for section, cls in SECTIONS.items():
        try:
            kwargs[section] = cls(**values[section])
        except (ConfigurationError, TNetError, ValueError, TypeError) as exc:
            first = min((lines[f"{section}.{k}"] for k in values[section]), default=0)
            where = f"{source}:{first}" if first else source
            raise ConfigurationError(f"{where}: section {section!r}: {exc}") from None
    return RunConfig(**kwargs)


def serialize_config(cfg: RunConfig) -> str:
    out = ["# tnet run configuration", f"seed = {cfg.seed}", f"workers = {cfg.workers}"]
    for section in SECTIONS:
        obj = getattr(cfg, section)
        out.append("")
        for f in fields(obj):
            out.append(f"{section}.{f.name} = {_format_value(getattr(obj, f.name))}")
    return "\n".join(out) + "\n"


def load_config(path: str | Path) -> RunConfig:
    p = Path(path)
    return parse_config(p.read_text(), str(p))


def with_seed(cfg: RunConfig, seed: int | None) -> RunConfig:
    return cfg if seed is None else replace(cfg, seed=seed)


def preset_config(name: str) -> RunConfig:
    """A run config built from a named model/traversal preset."""
    from .presets import PRESETS

    if name not in PRESETS:
        raise ConfigurationError(f"unknown preset {name!r}; known: {sorted(PRESETS)}")
    model, trav = PRESETS[name]
    t = TraversalSection(
        levels=trav.levels,
        base_resolution=trav.base_resolution,
        grid_n=trav.grid_n,
        cell_fraction=trav.cell_fraction,
        overlap_fraction=trav.overlap_fraction,
        locations=tuple(trav.locations_per_level),
    )
    return RunConfig(model=model, traversal=t)


__all__ = [
    "RunConfig",
    "DataConfig",
    "TrainSection",
    "TraversalSection",
    "BackboneSection",
    "EvalSection",
    "parse_config",
    "serialize_config",
    "load_config",
    "parse_layers",
    "format_layers",
    "preset_config",
    "BACKBONES",
]
