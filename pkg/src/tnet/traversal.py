"""Top-down traversal of image scale-space with hard attention.

Level 1 looks at the whole image downscaled to the base resolution. The
location module scores an ``n x n`` grid of candidate cells; the selected
cells are cropped from the full-resolution image, resized to the base
resolution and processed at the next level, recursively. Every node's
feature vector is positionally encoded and the encoded vectors are averaged
(or weighted) into one vector for classification.

The tree is regular: every node at level ``l`` has exactly
``locations_per_level[l-2]`` children, so each level is one batch of
``B * M_l`` nodes with ``M_l`` the product of the counts above it.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, ContractError
from .geometry import GridSpec, Rect, crop_resize_many, grid_cells, level_extent, positional_encodings
from .network import TNetModel
from .profiler import traversal_flops
from .tensor import Tensor

SELECTION_MODES = ("topk", "sample")


@dataclass(frozen=True)
class TraversalConfig:
    levels: int = 2
    base_resolution: int = 16
    grid_n: int = 4
    cell_fraction: float | None = 0.25
    overlap_fraction: float | None = None
    # children per attended node, one entry per level 2..levels
    locations_per_level: tuple[int, ...] = (1,)
    selection_mode: str = "topk"
    exact_seq_prob: bool = False
    # input side when it cannot be derived from the levels (a 1-level run on full-size images)
    image_extent: int | None = None

    def __post_init__(self):
        if self.levels < 1:
            raise ConfigurationError(f"levels must be >= 1, got {self.levels}")
        if len(self.locations_per_level) != self.levels - 1:
            raise ConfigurationError(
                f"locations_per_level needs {self.levels - 1} entries for {self.levels} levels, "
                f"got {list(self.locations_per_level)}"
            )
        for count in self.locations_per_level:
            if not 1 <= count <= self.grid_n ** 2:
                raise ConfigurationError(f"locations per node must be in [1, {self.grid_n ** 2}], got {count}")
        if self.selection_mode not in SELECTION_MODES:
            raise ConfigurationError(f"unknown selection mode {self.selection_mode!r}")
        self.grid(self.base_resolution)  # validates the grid geometry
        if self.image_extent is not None:
            if self.image_extent < self.base_resolution:
                raise ConfigurationError(f"image extent {self.image_extent} below base resolution {self.base_resolution}")
            if self.levels > 1 and self.image_extent != self.extent(self.levels):
                raise ConfigurationError(
                    f"a {self.levels}-level traversal needs {self.extent(self.levels)} px images, config says {self.image_extent}"
                )

    def grid(self, extent: int) -> GridSpec:
        return GridSpec(self.grid_n, extent, self.cell_fraction, self.overlap_fraction)

    @property
    def tap_grid(self) -> GridSpec:
        return self.grid(self.base_resolution)

    def extent(self, level: int) -> int:
        return level_extent(self.base_resolution, self.tap_grid, level)

    @property
    def full_extent(self) -> int:
        if self.image_extent is not None:
            return self.image_extent
        return self.extent(self.levels)

    def nodes_per_level(self) -> list[int]:
        """``M_l`` for l = 1..levels (per image)."""
        counts = [1]
        for c in self.locations_per_level:
            counts.append(counts[-1] * c)
        return counts

    @property
    def total_locations(self) -> int:
        return sum(self.nodes_per_level()[1:])

    def with_locations(self, n: int) -> TraversalConfig:
        """Same traversal with ``n`` locations at level 2 (``n=0`` drops to one level)."""
        if n == 0:
            return replace(self, levels=1, locations_per_level=(), image_extent=self.full_extent)
        if self.levels == 1:
            return replace(self, levels=2, locations_per_level=(n,), image_extent=None)
        return replace(self, locations_per_level=(n,) + tuple(self.locations_per_level[1:]))


# --------------------------------------------------------------------------
# selection and sequence probabilities

def select_locations(probs: np.ndarray, count: int, mode: str = "topk", rng: np.random.Generator | None = None) -> np.ndarray:
    """Ordered indices of ``count`` cells drawn from one Categorical.

    ``topk`` returns the most probable cells (ties to the lower index);
    ``sample`` draws sequentially without replacement, renormalizing the
    remaining mass after every draw.
    """
    p = np.asarray(probs, dtype=np.float64)
    k = p.shape[-1]
    if count > k:
        raise ContractError(f"cannot select {count} of {k} locations")
    if count < 0:
        raise ContractError(f"negative selection count {count}")
    if mode == "topk":
        return np.argsort(-p, kind="stable")[:count]
    if mode != "sample":
        raise ConfigurationError(f"unknown selection mode {mode!r}")
    if rng is None:
        raise ContractError("sample mode needs a random generator")
    remaining = p.copy()
    out = np.empty(count, dtype=np.int64)
    for r in range(count):
        cdf = np.cumsum(remaining)
        u = rng.random() * cdf[-1]
        i = int(np.searchsorted(cdf, u, side="right"))
        i = min(i, k - 1)
        while remaining[i] == 0.0:  # guard against landing on a removed cell at the edge
            i -= 1
        out[r] = i
        remaining[i] = 0.0
    return out


def selection_log_probs(log_probs: Tensor, selected: np.ndarray, exact: bool) -> Tensor:
    """Per-rank log-probability terms of ordered selections.

    ``log_probs`` is ``[..., K]``, ``selected`` integer ``[..., L]``. The
    exact form divides rank ``r`` by the mass left after ranks ``< r``; the
    simplified form keeps the raw probabilities.
    """
    sel = np.asarray(selected, dtype=np.int64)
    lead = log_probs.shape[:-1]
    if sel.shape[:-1] != lead:
        raise ContractError(f"selection shape {sel.shape} does not match distributions {log_probs.shape}")
    flat_lp = T.reshape(log_probs, (-1, log_probs.shape[-1]))
    flat_sel = sel.reshape(-1, sel.shape[-1])
    rows = np.arange(flat_sel.shape[0])[:, None]
    picked = T.getitem(flat_lp, (rows, flat_sel))  # [R, L]
    if exact and flat_sel.shape[-1] > 1:
        p = T.exp(picked)
        used = T.concat([Tensor(np.zeros((p.shape[0], 1), dtype=p.dtype)), p[:, :-1]], axis=1)
        prefix = T.matmul(used, Tensor(np.triu(np.ones((p.shape[1], p.shape[1]), dtype=p.dtype))))
        picked = picked - T.log(1.0 - prefix)
    return T.reshape(picked, sel.shape)


def sequence_log_prob(log_probs: Tensor, selected: np.ndarray, exact: bool) -> Tensor:
    """Log-probability of an ordered selection, summed over ranks (and distributions)."""
    return T.tsum(selection_log_probs(log_probs, selected, exact), axis=-1)


# --------------------------------------------------------------------------
# traversal

@dataclass
class LocationTree:
    """Per-batch node bookkeeping; node order is level by level, parents first.

    Arrays are indexed ``[image, node]``. ``parent[j]`` is the parent node of
    node ``j`` (``-1`` for the root) and is shared by every image.
    """

    levels: np.ndarray  # [N] 1-based level of each node
    parent: np.ndarray  # [N]
    rects: np.ndarray  # [B,N,4] full-resolution (x0,y0,x1,y1)
    triplets: np.ndarray  # [B,N,3]
    cells: np.ndarray  # [B,N] selected cell within the parent's grid (-1 for the root)
    rank: np.ndarray  # [N] selection order within the parent (-1 for the root)
    location_log_probs: dict[int, Tensor] = field(default_factory=dict)  # level -> [B, M_l, K]
    selections: dict[int, np.ndarray] = field(default_factory=dict)  # level -> [B, M_{l-1}, L_l]

    @property
    def num_nodes(self) -> int:
        return len(self.levels)

    def sequence_log_prob(self, exact: bool) -> Tensor:
        total = None
        for level, sel in self.selections.items():
            term = T.tsum(T.reshape(selection_log_probs(self.location_log_probs[level - 1], sel, exact), (sel.shape[0], -1)), axis=1)
            total = term if total is None else total + term
        if total is None:
            return Tensor(np.zeros(self.rects.shape[0]))
        return total


@dataclass
class TraversalOutput:
    logits: Tensor  # [B, C]
    v_agg: Tensor  # [B, d]
    seq_log_prob: Tensor  # [B]
    node_log_probs: Tensor  # [B, N] path log-probabilities (root 0)
    node_logits: Tensor  # [B, N, C] per-node predictions from encoded features
    node_features: Tensor  # [B, N, d] encoded features
    feature_weights: Tensor  # [B, N]
    tree: LocationTree
    flops: int

    @property
    def batch_size(self) -> int:
        return self.logits.shape[0]


def _child_rects(parent: Rect, spec: TraversalConfig) -> list[Rect]:
    side = parent.width
    return [r.shifted(parent.x0, parent.y0) for r in grid_cells(spec.grid(side))]


def traverse(
    model: TNetModel,
    images,
    config: TraversalConfig,
    rng: np.random.Generator | None = None,
    forced: dict[int, np.ndarray] | None = None,
    train: bool = False,
) -> TraversalOutput:
    """Run the traversal for a batch of ``[B,R,R,C]`` images (or one ``[R,R,C]``).

    ``forced`` maps a level to preset selections ``[B, M_{l-1}, L_l]`` (used
    for enumeration); otherwise cells are chosen by ``config.selection_mode``.
    ``train`` enables dropout.
    """
    arr = images.data if isinstance(images, Tensor) else np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    arr = arr.astype(model.dtype, copy=False)
    B, R = arr.shape[0], arr.shape[1]
    if arr.shape[1] != arr.shape[2]:
        raise ConfigurationError(f"images must be square, got {arr.shape[1:3]}")
    if R != config.full_extent:
        raise ConfigurationError(f"{config.levels}-level traversal needs {config.full_extent} px images, got {R}")
    if arr.shape[3] != model.spec.in_channels:
        raise ConfigurationError(f"model expects {model.spec.in_channels} channels, got {arr.shape[3]}")
    if config.grid_n != model.grid_n:
        raise ConfigurationError(f"model built for a {model.grid_n}-grid, traversal uses {config.grid_n}")
    if config.selection_mode == "sample" and rng is None and not forced:
        raise ContractError("sample mode needs a random generator")
    forced = forced or {}
    base = config.base_resolution
    n, K = config.grid_n, config.grid_n ** 2
    dropout = model.cfg.dropout if train else 0.0
    enc_dim = model.cfg.encoding_dim

    # level 1
    rects = np.tile(np.array([0, 0, R, R], dtype=np.int64), (B, 1, 1))
    triplets = np.zeros((B, 1, 3), dtype=np.int64)
    levels_of = [1]
    parents = [-1]
    cells = [np.full((B, 1), -1, dtype=np.int64)]
    ranks = [-1]
    tree_rects, tree_trip = [rects], [triplets]
    loc_log_probs: dict[int, Tensor] = {}
    selections: dict[int, np.ndarray] = {}

    crops = crop_resize_many(arr, [Rect(0, 0, R, R)] * B, list(range(B)), base)
    encoded, node_lp = [], []
    path_lp = Tensor(np.zeros((B, 1), dtype=model.dtype))
    level_path = path_lp
    offset = 0
    for level in range(1, config.levels + 1):
        m = rects.shape[1]
        v, f_tap = model.backbone(Tensor(crops), dropout=dropout, rng=rng)
        enc = positional_encodings(triplets.reshape(-1, 3), enc_dim).astype(model.dtype)
        encoded.append(T.reshape(model.positional(v, Tensor(enc)), (B, m, -1)))
        node_lp.append(level_path)
        if level == config.levels:
            break
        count = config.locations_per_level[level - 1]
        logits = model.node_location_logits(v, f_tap, config.tap_grid)  # [B*m, K]
        log_p = T.reshape(T.log_softmax(logits, axis=-1), (B, m, K))
        if level + 1 in forced:
            sel = np.asarray(forced[level + 1], dtype=np.int64)
            if sel.shape != (B, m, count):
                raise ContractError(f"forced selection for level {level + 1} must be {(B, m, count)}, got {sel.shape}")
        else:
            probs = np.exp(log_p.data)
            sel = np.empty((B, m, count), dtype=np.int64)
            for b in range(B):
                for j in range(m):
                    sel[b, j] = select_locations(probs[b, j], count, config.selection_mode, rng)
        loc_log_probs[level] = log_p
        selections[level + 1] = sel
        # a node attended on its own has probability p_k along its path: no renormalization
        terms = selection_log_probs(log_p, sel, exact=False)  # [B, m, count]
        level_path = T.reshape(T.reshape(level_path, (B, m, 1)) + terms, (B, m * count))

        # children geometry, in node order parent-major then rank
        new_rects = np.empty((B, m * count, 4), dtype=np.int64)
        new_trip = np.empty((B, m * count, 3), dtype=np.int64)
        crop_rects, owners = [], []
        for b in range(B):
            for j in range(m):
                cand = _child_rects(Rect(*rects[b, j]), config)
                px, py, _ = triplets[b, j]
                for r in range(count):
                    c = int(sel[b, j, r])
                    cy, cx = divmod(c, n)
                    idx = j * count + r
                    new_rects[b, idx] = cand[c]
                    new_trip[b, idx] = (px * n + cx, py * n + cy, level)
                    crop_rects.append(cand[c])
                    owners.append(b)
        levels_of += [level + 1] * (m * count)
        parents += [offset + j for j in range(m) for _ in range(count)]
        ranks += [r for _ in range(m) for r in range(count)]
        cells.append(sel.reshape(B, m * count))
        offset += m
        rects, triplets = new_rects, new_trip
        tree_rects.append(rects)
        tree_trip.append(triplets)
        crops = crop_resize_many(arr, crop_rects, owners, base)

    features = T.concat(encoded, axis=1) if len(encoded) > 1 else encoded[0]
    node_log_probs = T.concat(node_lp, axis=1) if len(node_lp) > 1 else node_lp[0]
    weights, v_agg = model.aggregate(features)
    logits = model.classifier(v_agg)
    node_logits = model.classifier(features)
    tree = LocationTree(
        levels=np.array(levels_of),
        parent=np.array(parents),
        rects=np.concatenate(tree_rects, axis=1),
        triplets=np.concatenate(tree_trip, axis=1),
        cells=np.concatenate(cells, axis=1),
        rank=np.array(ranks),
        location_log_probs=loc_log_probs,
        selections=selections,
    )
    seq = tree.sequence_log_prob(config.exact_seq_prob)
    return TraversalOutput(
        logits=logits,
        v_agg=v_agg,
        seq_log_prob=seq,
        node_log_probs=node_log_probs,
        node_logits=node_logits,
        node_features=features,
        feature_weights=weights,
        tree=tree,
        flops=traversal_flops(config, model.spec, model.cfg),
    )


def predict(model: TNetModel, images: np.ndarray, config: TraversalConfig, batch_size: int = 64) -> tuple[np.ndarray, list[TraversalOutput]]:
    """Gradient-free top-1 predictions over a dataset, in batches."""
    if config.selection_mode != "topk":
        config = replace(config, selection_mode="topk")
    preds, outs = [], []
    with T.no_grad():
        for start in range(0, len(images), batch_size):
            out = traverse(model, images[start : start + batch_size], config)
            preds.append(np.argmax(out.logits.data, axis=-1))
            outs.append(out)
    return (np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)), outs


def enumerate_selections(k: int, count: int) -> list[tuple[int, ...]]:
    """All ordered selections of ``count`` distinct cells out of ``k``."""
    from itertools import permutations

    return list(permutations(range(k), count))


__all__: Sequence[str] = [
    "TraversalConfig",
    "LocationTree",
    "TraversalOutput",
    "select_locations",
    "selection_log_probs",
    "sequence_log_prob",
    "traverse",
    "predict",
    "enumerate_selections",
]
