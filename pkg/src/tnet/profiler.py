"""Static cost accounting and attention-policy metrics.

Only multiplications of convolutional and fully connected layers are
counted: a layer costs ``(C_in * k^2) * (H_out * W_out * C_out)``, with
depthwise convolutions charged ``k^2`` per output value instead of
``C_in * k^2``. Additions, activations, normalization and pooling are free.
Nothing here executes tensors; every number follows from the specs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Iterable, NamedTuple, Sequence

import numpy as np

from . import _kernels
from .errors import ContractError
from .geometry import Rect
from .network import BackboneSpec, ConvPrim, ModelConfig, get_backbone_spec, trace

if TYPE_CHECKING:  # pragma: no cover
    from .traversal import TraversalConfig


def layer_flops(c_in: int, k: int, h_out: int, w_out: int, c_out: int) -> int:
    for name, v in (("c_in", c_in), ("k", k), ("h_out", h_out), ("w_out", w_out), ("c_out", c_out)):
        if int(v) != v or v < 1:
            raise ContractError(f"layer_flops: {name} must be a positive integer, got {v}")
    return int(c_in) * int(k) ** 2 * int(h_out) * int(w_out) * int(c_out)


class LayerFlops(NamedTuple):
    name: str
    c_in: int
    k: int
    h_out: int
    w_out: int
    c_out: int
    flops: int


def prim_flops(p: ConvPrim) -> int:
    if p.depthwise:
        return p.k * p.k * p.h_out * p.w_out * p.cout
    return layer_flops(p.cin, p.k, p.h_out, p.w_out, p.cout)


def prim_params(p: ConvPrim) -> int:
    weights = p.k * p.k * p.cout if p.depthwise else p.k * p.k * p.cin * p.cout
    return weights + (p.cout if p.bias else 0)


def _record(p: ConvPrim) -> LayerFlops:
    return LayerFlops(p.name, p.cin, p.k, p.h_out, p.w_out, p.cout, prim_flops(p))


def backbone_prims(spec: BackboneSpec) -> list[ConvPrim]:
    return [p for t in trace(spec) for p in t.prims]


def _dense(name: str, cin: int, cout: int, positions: int = 1) -> ConvPrim:
    return ConvPrim(name, cin, 1, 1, "SAME", cout, positions, 1)


def module_prims(spec: BackboneSpec, cfg: ModelConfig, grid_n: int) -> dict[str, list[ConvPrim]]:
    """Conv/linear primitives of the non-backbone modules, per module.

    Dense layers applied at ``K`` grid positions are encoded as a 1x1
    convolution with a ``K x 1`` output.
    """
    tr = trace(spec)
    d = tr[-1].out_shape[-1]
    c = tr[spec.tap_layer].out_shape[-1]
    K = grid_n * grid_n
    h = cfg.location_hidden
    if cfg.location_variant == "concat":
        loc = [_dense("location.fuse", c + d + 2, h, K), _dense("location.out", h, 1, K)]
    else:
        loc = [
            _dense("location.pre", c, c, K),
            _dense("location.se.reduce", c, max(1, c // 2)),
            _dense("location.se.expand", max(1, c // 2), c),
            _dense("location.fuse", c + 2, h, K),
            _dense("location.out", h, 1, K),
        ]
    e = cfg.encoding_dim
    if cfg.encoding_mode == "concat_linear":
        pos = [_dense("positional.proj", d + e, d)]
    else:
        pos = [_dense("positional.proj", e, d)]
    out = {
        "location": loc,
        "positional": pos,
        "classifier": [_dense("classifier", d, cfg.num_classes)],
    }
    if cfg.feature_weighting:
        hw = max(1, int(d * 0.25))
        out["weighting"] = [
            _dense("weighting.se.reduce", d, hw),
            _dense("weighting.se.expand", hw, d),
        ]
        out["weighting.logit"] = [_dense("weighting.logit", d, 1)]
    return out


# --------------------------------------------------------------------------
# reports

@dataclass
class FlopsReport:
    """Per-layer multiplication counts of one traversal.

    ``fixed`` is paid once per image, ``delta`` once per attended location,
    so ``total == fixed + n_locations * delta`` exactly.
    """

    records: list[LayerFlops]
    fixed: int
    delta: int
    n_locations: int
    per_level: dict[int, int] = field(default_factory=dict)
    params: int = 0

    @property
    def total(self) -> int:
        return self.fixed + self.n_locations * self.delta

    def total_for(self, n: int) -> int:
        return self.fixed + n * self.delta

    def to_table(self) -> str:
        lines = [f"{'layer':<28} {'C_in':>6} {'k':>3} {'H_out':>6} {'W_out':>6} {'C_out':>6} {'flops':>16}"]
        for r in self.records:
            lines.append(f"{r.name:<28} {r.c_in:>6} {r.k:>3} {r.h_out:>6} {r.w_out:>6} {r.c_out:>6} {r.flops:>16,}")
        lines.append("")
        lines.append(f"fixed cost (level 1)        {self.fixed:>16,}  ({self.fixed / 1e9:.3f} G)")
        lines.append(f"per-location increment      {self.delta:>16,}  ({self.delta / 1e9:.3f} G)")
        for level, v in sorted(self.per_level.items()):
            lines.append(f"level {level} total               {v:>16,}")
        lines.append(f"total, {self.n_locations} locations          {self.total:>16,}  ({self.total / 1e9:.3f} G)")
        if self.params:
            lines.append(f"trainable parameters        {self.params:>16,}  ({self.params / 1e6:.2f} M)")
        return "\n".join(lines)

    def to_records(self) -> str:
        """One JSON object per line: layers first, then a summary record."""
        rows = [json.dumps({"record": "layer", **r._asdict()}) for r in self.records]
        rows.append(
            json.dumps(
                {
                    "record": "summary",
                    "fixed": self.fixed,
                    "delta": self.delta,
                    "n_locations": self.n_locations,
                    "total": self.total,
                    "per_level": {str(k): v for k, v in sorted(self.per_level.items())},
                    "params": self.params,
                }
            )
        )
        return "\n".join(rows)


def _cost(prims: Iterable[ConvPrim]) -> int:
    return sum(prim_flops(p) for p in prims)


def profile_traversal(
    config: TraversalConfig,
    spec: BackboneSpec | str,
    model_cfg: ModelConfig,
    n_locations: int | None = None,
) -> FlopsReport:
    """Affine cost model: level-1 cost plus ``n_locations`` times the per-location cost.

    The level-1 cost covers the backbone on the downscaled image, its
    location module, positional encoding, aggregation and the classifier.
    Each attended location adds one backbone pass, its positional encoding
    and its share of feature weighting. ``n_locations`` defaults to the
    config's total.
    """
    if isinstance(spec, str):
        spec = get_backbone_spec(spec)
    n = config.total_locations if n_locations is None else int(n_locations)
    if n < 0:
        raise ContractError(f"negative location count {n}")
    bb = backbone_prims(spec)
    mods = module_prims(spec, model_cfg, config.grid_n)
    per_node = bb + mods["positional"] + mods.get("weighting.logit", [])
    once = mods["location"] + mods["classifier"] + mods.get("weighting", [])
    fixed = _cost(per_node) + _cost(once)
    delta = _cost(per_node)
    records = [_record(p) for p in per_node + once]
    per_level = {1: fixed}
    if n == config.total_locations:
        for level, m in enumerate(config.nodes_per_level()[1:], start=2):
            per_level[level] = m * delta
    elif n:
        per_level[2] = n * delta  # a location count off the config's tree: all leaves at level 2
    return FlopsReport(records, fixed, delta, n, per_level, count_params(spec, model_cfg, config.grid_n))


def traversal_flops(config: TraversalConfig, spec: BackboneSpec, model_cfg: ModelConfig) -> int:
    """Cost of the exact traversal structure (location module only on non-leaf nodes)."""
    bb = backbone_prims(spec)
    mods = module_prims(spec, model_cfg, config.grid_n)
    per_node = _cost(bb) + _cost(mods["positional"]) + _cost(mods.get("weighting.logit", []))
    loc = _cost(mods["location"])
    counts = config.nodes_per_level()
    nodes = sum(counts)
    inner = sum(counts[:-1])
    return nodes * per_node + inner * loc + _cost(mods["classifier"]) + _cost(mods.get("weighting", []))


def count_params(spec: BackboneSpec | str | None = None, model_cfg: ModelConfig | None = None, grid_n: int | None = None) -> int:
    """Trainable scalars of a backbone spec, plus the other modules when ``model_cfg`` is given."""
    if spec is None:
        return 0
    if isinstance(spec, str):
        spec = get_backbone_spec(spec)
    if not spec.layers:
        return 0
    total = sum(prim_params(p) for p in backbone_prims(spec))
    if model_cfg is None:
        return total
    mods = module_prims(spec, model_cfg, grid_n or 1)
    for name, prims in mods.items():
        # module primitives are dense layers: weights plus bias, independent of position count
        total += sum(p.cin * p.cout + p.cout for p in prims)
    return total + 4  # the two scalar coordinate affine maps of the location module


# --------------------------------------------------------------------------
# policy metrics

class PolicyMetrics(NamedTuple):
    precision: float
    recall: float
    coverage: float


def _as_rects(rects) -> np.ndarray:
    arr = np.asarray([tuple(r) for r in rects], dtype=np.int64).reshape(-1, 4)
    return arr


def policy_metrics(attended: Sequence[Rect], bbox: Rect, extent: int | tuple[int, int]) -> PolicyMetrics:
    """Precision, recall and coverage of attended regions against a ground-truth box.

    Computed on exact pixel sets: the union of attended rectangles, the box,
    and their intersection.
    """
    h, w = (extent, extent) if isinstance(extent, int) else extent
    att = _kernels.union_mask(_as_rects(attended), h, w)
    box = _kernels.union_mask(_as_rects([bbox]), h, w)
    n_att = int(att.sum())
    n_box = int(box.sum())
    if n_att == 0:
        raise ContractError("precision is undefined for an empty attended set")
    if n_box == 0:
        raise ContractError("recall is undefined for an empty bounding box")
    inter = int(np.logical_and(att, box).sum())
    return PolicyMetrics(inter / n_att, inter / n_box, n_att / (h * w))


def union_area(rects: Sequence[Rect], extent: int) -> int:
    return int(_kernels.union_mask(_as_rects(rects), extent, extent).sum())
