"""Learning rules, optimizer and training loop.

The policy-gradient updates are realized as surrogate losses: scalars whose
autodiff gradient equals the update direction (negated, since the optimizer
minimizes). Rewards and baselines enter only as detached coefficients.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Callable, NamedTuple, Sequence, TextIO

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, ContractError, NumericDomainError, TNetError
from .network import TNetModel
from .tensor import Tensor
from .traversal import TraversalConfig, TraversalOutput, enumerate_selections, traverse


class NonFiniteLossError(TNetError, ArithmeticError):
    """Training produced a NaN or infinite loss."""


# --------------------------------------------------------------------------
# baselines, weights, rewards

@dataclass
class BaselineState:
    b: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.b <= 1.0:
            raise ContractError(f"baseline must lie in [0, 1], got {self.b}")


def update_baseline(state: BaselineState, rewards) -> BaselineState:
    """Exponential moving average of the batch mean reward: ``b <- 0.9 b + 0.1 mean(R)``."""
    r = np.asarray(rewards, dtype=np.float64).ravel()
    if r.size == 0:
        raise ContractError("baseline update needs at least one reward")
    if np.any((r != 0.0) & (r != 1.0)):
        raise ContractError("rewards must be 0 or 1")
    b = 0.9 * state.b + 0.1 * float(r.mean())
    return BaselineState(min(max(b, 0.0), 1.0))


@dataclass(frozen=True)
class LossWeights:
    lambda_f: float = 0.1
    lambda_c: float = 1.0
    lambda_r: float = 1.0
    lambda_con: float = 0.0
    alpha: float = 0.4
    mc_samples: int = 1

    def __post_init__(self):
        for name in ("lambda_c", "lambda_r"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigurationError(f"{name} must lie in [0, 1], got {v}")
        if self.lambda_con < 0:
            raise ConfigurationError(f"lambda_con must be >= 0, got {self.lambda_con}")
        if self.mc_samples < 1:
            raise ConfigurationError(f"mc_samples must be >= 1, got {self.mc_samples}")

    @property
    def per_feature(self) -> bool:
        return self.lambda_c < 1.0 or self.lambda_r < 1.0


class RewardRecord(NamedTuple):
    r_s: np.ndarray  # [B] sequence-level correctness
    r_k: np.ndarray  # [B, L] per-location correctness of the masked nodes


def node_mask(levels: np.ndarray, include_root: bool = False, max_level: int | None = None) -> np.ndarray:
    """Which traversal nodes count as "locations" for the per-feature terms."""
    levels = np.asarray(levels)
    mask = levels >= (1 if include_root else 2)
    if max_level is not None:
        mask &= levels <= max_level
    return mask


def compute_rewards(out: TraversalOutput, labels, mask: np.ndarray | None = None) -> RewardRecord:
    labels = np.asarray(labels)
    r_s = (np.argmax(out.logits.data, axis=-1) == labels).astype(np.float64)
    if mask is None:
        mask = node_mask(out.tree.levels)
    r_k = (np.argmax(out.node_logits.data[:, mask], axis=-1) == labels[:, None]).astype(np.float64)
    return RewardRecord(r_s, r_k)


# --------------------------------------------------------------------------
# surrogate losses

def _check_batch(out: TraversalOutput, labels) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if out.logits.shape[0] == 0 or labels.size == 0:
        raise ContractError("empty batch")
    if labels.shape != (out.logits.shape[0],):
        raise ContractError(f"{labels.shape[0] if labels.ndim else 0} labels for {out.logits.shape[0]} outputs")
    return labels


def _sequence_terms(out: TraversalOutput, labels: np.ndarray, r_s: np.ndarray, b: float, w_pred: float, w_policy: float) -> Tensor:
    nll = -T.label_log_prob(out.logits, labels)  # [B]
    adv = Tensor((r_s - b).astype(out.logits.dtype))  # constant coefficient
    return w_pred * nll - w_policy * (adv * out.seq_log_prob)


def loss_base(out: TraversalOutput, labels, baseline: BaselineState, weights: LossWeights) -> Tensor:
    """Surrogate whose gradient is minus the REINFORCE-variant update.

    ``mean_i[-log p(y_i | l_i) - lambda_f (R_i - b) log p(l_i)]`` over the
    ``N*M`` traversals in ``out``; the advantage ``R_i - b`` is a constant.
    """
    labels = _check_batch(out, labels)
    r_s = compute_rewards(out, labels, np.zeros(out.tree.num_nodes, dtype=bool)).r_s
    return T.tmean(_sequence_terms(out, labels, r_s, baseline.b, 1.0, weights.lambda_f))


def loss_perfeature(
    out: TraversalOutput,
    labels,
    b_s: BaselineState,
    b_k: BaselineState,
    weights: LossWeights,
    mask: np.ndarray | None = None,
) -> Tensor:
    """Surrogate of the per-feature regularized rule.

    Sequence part weighted by ``lambda_c`` (prediction) and
    ``lambda_f * lambda_r`` (policy); plus, averaged over the masked nodes,
    each node's own prediction (weight ``1 - lambda_c``) and own selection
    log-probability (weight ``lambda_f * (1 - lambda_r)``, advantage
    ``R_k - b_k``).
    """
    labels = _check_batch(out, labels)
    if mask is None:
        mask = node_mask(out.tree.levels)
    mask = np.asarray(mask, dtype=bool)
    rec = compute_rewards(out, labels, mask)
    seq = _sequence_terms(out, labels, rec.r_s, b_s.b, weights.lambda_c, weights.lambda_f * weights.lambda_r)
    n_loc = int(mask.sum())
    if n_loc == 0:
        if weights.per_feature:
            raise ContractError("per-feature terms need at least one attended location")
        return T.tmean(seq)
    idx = np.flatnonzero(mask)
    B = labels.shape[0]
    node_logits = T.getitem(out.node_logits, (slice(None), idx))  # [B, L, C]
    node_lp = T.getitem(out.node_log_probs, (slice(None), idx))  # [B, L]
    nll_k = -T.label_log_prob(node_logits, np.repeat(labels[:, None], n_loc, axis=1))
    adv_k = Tensor((rec.r_k - b_k.b).astype(out.logits.dtype))
    loc = (1.0 - weights.lambda_c) * nll_k - (weights.lambda_f * (1.0 - weights.lambda_r)) * (adv_k * node_lp)
    loc = T.tmean(loc, axis=1)
    assert loc.shape == (B,)
    return T.tmean(seq + loc)


def loss_contrastive(features: Tensor, labels, alpha: float, lambda_con: float) -> Tensor:
    """``lambda_con / N^2 * [sum_same (1 - cos) + sum_diff max(cos - alpha, 0)]`` over ordered pairs."""
    labels = np.asarray(labels)
    n = features.shape[0]
    if labels.shape != (n,):
        raise ContractError(f"{labels.shape} labels for {n} feature vectors")
    cos = T.cosine_similarity_matrix(features)
    same = (labels[:, None] == labels[None, :]).astype(features.dtype)
    pull = Tensor(same) * (1.0 - cos)
    push = Tensor(1.0 - same) * T.relu(cos - alpha)
    return (lambda_con / (n * n)) * T.tsum(pull + push)


# --------------------------------------------------------------------------
# optimizer

class Adam:
    """First/second-moment adaptive optimizer with bias correction."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.lr:
                p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)

    def state(self) -> dict:
        return {"t": self.t, "m": self.m, "v": self.v}

    def load_state(self, t: int, m: dict, v: dict) -> None:
        self.t = t
        for k in self.params:
            self.m[k][...] = m[k]
            self.v[k][...] = v[k]


def clip_grad_norm(params: dict[str, Tensor], max_norm: float | None) -> float:
    """Scale gradients so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    norm = math.sqrt(total)
    if max_norm and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return norm


# --------------------------------------------------------------------------
# training step and loop

@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 32
    lr: float = 1e-3
    lr_drop_step: int | None = None
    lr_drop_factor: float = 0.1
    grad_clip: float | None = 5.0
    weights: LossWeights = field(default_factory=LossWeights)
    shared_baseline: bool = True
    include_root: bool = False
    per_node_max_level: int | None = None
    seed: int = 0
    log_every: int = 1


@dataclass
class TrainerState:
    model: TNetModel
    optimizer: Adam
    b_s: BaselineState
    b_k: BaselineState
    rng: np.random.Generator
    step: int = 0


def make_trainer(model: TNetModel, tcfg: TrainConfig, rng: np.random.Generator | None = None) -> TrainerState:
    opt = Adam(model.parameters(), lr=tcfg.lr)
    rng = rng if rng is not None else np.random.default_rng(tcfg.seed + 1)
    return TrainerState(model, opt, BaselineState(), BaselineState(), rng)


def train_step(
    state: TrainerState,
    images: np.ndarray,
    labels: np.ndarray,
    tcfg: TrainConfig,
    trav: TraversalConfig,
) -> dict:
    """One update: M traversals per image, surrogate loss, backward, Adam, baseline EMA."""
    w = tcfg.weights
    model = state.model
    if w.mc_samples > 1:
        images = np.repeat(images, w.mc_samples, axis=0)
        labels = np.repeat(labels, w.mc_samples, axis=0)
    params = state.optimizer.params
    T.zero_grad(params.values())
    try:
        out = traverse(model, images, trav, rng=state.rng, train=True)
        mask = node_mask(out.tree.levels, tcfg.include_root, tcfg.per_node_max_level)
        b_k = state.b_s if tcfg.shared_baseline else state.b_k
        if w.per_feature:
            loss = loss_perfeature(out, labels, state.b_s, b_k, w, mask)
        else:
            loss = loss_base(out, labels, state.b_s, w)
        if w.lambda_con > 0:
            loss = loss + loss_contrastive(out.v_agg, labels, w.alpha, w.lambda_con)
    except NumericDomainError as exc:
        # diverged weights show up as non-finite activations before the loss exists
        raise NonFiniteLossError(f"non-finite values at step {state.step}: {exc}") from exc
    value = loss.item()
    if not math.isfinite(value):
        raise NonFiniteLossError(f"non-finite loss {value} at step {state.step}")
    loss.backward()
    gnorm = clip_grad_norm(params, tcfg.grad_clip)
    lr = tcfg.lr
    if tcfg.lr_drop_step is not None and state.step >= tcfg.lr_drop_step:
        lr *= tcfg.lr_drop_factor
    state.optimizer.lr = lr
    state.optimizer.step()
    rec = compute_rewards(out, labels, mask)
    state.b_s = update_baseline(state.b_s, rec.r_s)
    if not tcfg.shared_baseline and rec.r_k.size:
        state.b_k = update_baseline(state.b_k, rec.r_k)
    state.step += 1
    metrics = {
        "step": state.step,
        "loss": value,
        "accuracy": float(rec.r_s.mean()),
        "reward": float(rec.r_s.mean()),
        "b": state.b_s.b,
        "grad_norm": gnorm,
    }
    if rec.r_k.size:
        metrics["location_reward"] = float(rec.r_k.mean())
    if not tcfg.shared_baseline:
        metrics["b_k"] = state.b_k.b
    return metrics


def train(
    state: TrainerState,
    images: np.ndarray,
    labels: np.ndarray,
    tcfg: TrainConfig,
    trav: TraversalConfig,
    metrics_file: TextIO | None = None,
    echo: TextIO | None = None,
    callback: Callable[[dict], None] | None = None,
) -> list[dict]:
    """Run ``tcfg.steps - state.step`` steps on uniformly drawn mini-batches."""
    if len(images) == 0:
        raise ContractError("empty training set")
    history = []
    while state.step < tcfg.steps:
        idx = state.rng.integers(0, len(images), size=tcfg.batch_size)
        m = train_step(state, images[idx], labels[idx], tcfg, trav)
        history.append(m)
        if m["step"] % tcfg.log_every == 0 or m["step"] == tcfg.steps:
            line = json.dumps(m)
            for f in (metrics_file, echo):
                if f is not None:
                    f.write(line + "\n")
        if callback is not None:
            callback(m)
    return history


# --------------------------------------------------------------------------
# estimator check by enumeration

def _check_toy(model: TNetModel, config: TraversalConfig) -> None:
    if config.levels != 2:
        raise ContractError("the enumeration check needs exactly one level of attention (levels=2)")
    if config.grid_n ** 2 > 4:
        raise ContractError(f"{config.grid_n ** 2} candidate cells are too many to enumerate (max 4)")


def _grads(params: dict[str, Tensor], loss: Tensor) -> dict[str, np.ndarray]:
    T.zero_grad(params.values())
    loss.backward()
    return {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}


def enumerated_gradients(model: TNetModel, image: np.ndarray, label: int, config: TraversalConfig, baseline: float | str = 0.0):
    """Exact gradient of ``F = sum_l p(l) log p(y|l)`` and the enumerated estimator expectation.

    Every ordered selection is traversed once (forced). The exact route
    differentiates ``F`` directly, with ``p(l)`` the exact sequence
    probability. The estimator route averages the single-sample estimator
    ``d log p(y|l) + (log p(y|l) - b) d log p(l)`` under ``p(l)``. Passing
    ``baseline="mean"`` uses the expected reward as ``b``.

    Returns ``(exact, estimator, policy)`` gradient dicts, where ``policy`` is
    the expectation of the baseline-shifted policy term alone.
    """
    _check_toy(model, config)
    config = replace(config, selection_mode="sample", exact_seq_prob=True)
    seqs = enumerate_selections(config.grid_n ** 2, config.locations_per_level[0])
    S = len(seqs)
    batch = np.repeat(np.asarray(image)[None], S, axis=0)
    forced = {2: np.asarray(seqs, dtype=np.int64).reshape(S, 1, -1)}
    out = traverse(model, batch, config, forced=forced)
    params = model.parameters()
    log_py = T.label_log_prob(out.logits, np.full(S, label))  # [S]
    seq_lp = out.seq_log_prob  # [S]
    p = T.exp(seq_lp)
    exact = _grads(params, T.tsum(p * log_py))

    p_const = Tensor(p.data)
    if baseline == "mean":
        b = float(np.sum(p.data * log_py.data))
    else:
        b = float(baseline)
    coef = Tensor(log_py.data - b)
    est = _grads(params, T.tsum(p_const * (log_py + coef * seq_lp)))
    policy = _grads(params, T.tsum(p_const * coef * seq_lp))
    return exact, est, policy


def mc_gradient_check(model: TNetModel, image: np.ndarray, label: int, config: TraversalConfig, baseline: float | str = 0.0) -> float:
    """Max absolute deviation between the exact gradient and the estimator's expectation."""
    exact, est, _ = enumerated_gradients(model, image, label, config, baseline)
    return max(float(np.max(np.abs(exact[k] - est[k]))) if exact[k].size else 0.0 for k in exact)


def evaluate_accuracy(model: TNetModel, images: np.ndarray, labels: np.ndarray, config: TraversalConfig, batch_size: int = 128) -> float:
    from .traversal import predict

    preds, _ = predict(model, images, config, batch_size)
    return float(np.mean(preds == np.asarray(labels))) if len(labels) else float("nan")


def write_metrics(stream: TextIO, record: dict) -> None:
    stream.write(json.dumps(record) + "\n")


__all__: Sequence[str] = [
    "BaselineState",
    "LossWeights",
    "RewardRecord",
    "update_baseline",
    "loss_base",
    "loss_perfeature",
    "loss_contrastive",
    "Adam",
    "clip_grad_norm",
    "TrainConfig",
    "TrainerState",
    "make_trainer",
    "train_step",
    "train",
    "mc_gradient_check",
    "enumerated_gradients",
    "evaluate_accuracy",
    "NonFiniteLossError",
]
