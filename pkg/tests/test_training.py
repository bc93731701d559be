import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tnet import tensor as T
from tnet.errors import ConfigurationError, ContractError, NumericDomainError
from tnet.network import ModelConfig, TNetModel
from tnet.tensor import Tensor, _topological_order
from tnet.training import (
    Adam,
    BaselineState,
    LossWeights,
    NonFiniteLossError,
    TrainConfig,
    clip_grad_norm,
    compute_rewards,
    enumerated_gradients,
    loss_base,
    loss_contrastive,
    loss_perfeature,
    make_trainer,
    mc_gradient_check,
    node_mask,
    train,
    train_step,
    update_baseline,
)
from tnet.traversal import TraversalConfig, traverse

TOY = TraversalConfig(grid_n=2, cell_fraction=0.5, locations_per_level=(2,))


def _toy_model(seed=0, **kw):
    return TNetModel(ModelConfig(**kw), 2, np.random.default_rng(seed))


def _grads(model, loss):
    params = model.parameters()
    T.zero_grad(params.values())
    loss.backward()
    return {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}


def _batch(seed=1, n=4):
    rng = np.random.default_rng(seed)
    return rng.uniform(-1, 1, size=(n, 32, 32, 1)), rng.integers(0, 4, size=n)


# -- baseline -----------------------------------------------------------

def test_baseline_examples():
    assert update_baseline(BaselineState(), [1, 1, 1]).b == pytest.approx(0.55, abs=1e-15)
    assert update_baseline(BaselineState(), [0, 0]).b == pytest.approx(0.45, abs=1e-15)
    assert BaselineState().b == 0.5


@settings(max_examples=30, deadline=None)
@given(b0=st.floats(0, 1), ones=st.integers(0, 8), zeros=st.integers(0, 8), n=st.integers(1, 40))
def test_baseline_converges_geometrically(b0, ones, zeros, n):
    if ones + zeros == 0:
        return
    rewards = [1] * ones + [0] * zeros
    mean = ones / (ones + zeros)
    b = BaselineState(b0)
    for _ in range(n):
        b = update_baseline(b, rewards)
        assert 0.0 <= b.b <= 1.0
    assert abs(abs(b.b - mean) - 0.9**n * abs(b0 - mean)) < 1e-12


def test_baseline_rejects_bad_rewards():
    with pytest.raises(ContractError):
        update_baseline(BaselineState(), [])
    with pytest.raises(ContractError):
        update_baseline(BaselineState(), [0.5])
    with pytest.raises(ContractError):
        BaselineState(1.5)


def test_loss_weights_validation():
    assert LossWeights().lambda_f == 0.1 and LossWeights().mc_samples == 1
    with pytest.raises(ConfigurationError):
        LossWeights(lambda_c=1.2)
    with pytest.raises(ConfigurationError):
        LossWeights(lambda_con=-1)


# -- surrogate losses ---------------------------------------------------

def test_loss_base_matches_manual_assembly():
    model = _toy_model()
    images, labels = _batch()
    w = LossWeights(lambda_f=0.7)
    b = BaselineState(0.3)
    out = traverse(model, images, TOY)
    got = _grads(model, loss_base(out, labels, b, w))
    r = compute_rewards(out, labels).r_s
    out = traverse(model, images, TOY)
    g_nll = _grads(model, -T.tmean(T.label_log_prob(out.logits, labels)))
    out = traverse(model, images, TOY)
    g_pol = _grads(model, T.tmean(Tensor(r - 0.3) * out.seq_log_prob))
    for k in got:
        np.testing.assert_allclose(got[k], g_nll[k] - 0.7 * g_pol[k], atol=1e-10, rtol=0)


def test_vanishing_advantage_leaves_cross_entropy():
    model = _toy_model()
    images, _ = _batch()
    out = traverse(model, images, TOY)
    labels = np.argmax(out.logits.data, axis=-1)  # every reward is 1
    got = _grads(model, loss_base(out, labels, BaselineState(1.0), LossWeights()))
    out = traverse(model, images, TOY)
    ce = _grads(model, T.cross_entropy(out.logits, labels))
    for k in got:
        np.testing.assert_allclose(got[k], ce[k], atol=1e-14, rtol=0)


@pytest.mark.parametrize("seed", range(3))
def test_perfeature_degenerates_to_base(seed):
    model = _toy_model(seed, feature_weighting=True)
    images, labels = _batch(seed + 10)
    out = traverse(model, images, TOY)
    a = _grads(model, loss_base(out, labels, BaselineState(0.4), LossWeights()))
    out = traverse(model, images, TOY)
    bgr = _grads(model, loss_perfeature(out, labels, BaselineState(0.4), BaselineState(0.8), LossWeights()))
    for k in a:
        np.testing.assert_allclose(a[k], bgr[k], atol=1e-12, rtol=0)


def test_perfeature_matches_manual_assembly():
    model = _toy_model(3)
    images, labels = _batch(4)
    w = LossWeights(lambda_f=0.5, lambda_c=0.3, lambda_r=0.6)
    bs, bk = BaselineState(0.35), BaselineState(0.65)
    out = traverse(model, images, TOY)
    got = _grads(model, loss_perfeature(out, labels, bs, bk, w))
    rec = compute_rewards(out, labels)
    mask = node_mask(out.tree.levels)
    idx = np.flatnonzero(mask)

    def term(fn):
        o = traverse(model, images, TOY)
        return _grads(model, fn(o))

    nll = term(lambda o: -T.tmean(T.label_log_prob(o.logits, labels)))
    pol = term(lambda o: T.tmean(Tensor(rec.r_s - bs.b) * o.seq_log_prob))
    nll_k = term(lambda o: -T.tmean(T.label_log_prob(T.getitem(o.node_logits, (slice(None), idx)), np.repeat(labels[:, None], len(idx), 1))))
    pol_k = term(lambda o: T.tmean(Tensor(rec.r_k - bk.b) * T.getitem(o.node_log_probs, (slice(None), idx))))
    for k in got:
        manual = 0.3 * nll[k] - 0.5 * 0.6 * pol[k] + 0.7 * nll_k[k] - 0.5 * 0.4 * pol_k[k]
        np.testing.assert_allclose(got[k], manual, atol=1e-10, rtol=0)


def test_perfeature_needs_locations():
    model = _toy_model()
    images, labels = _batch()
    root_only = TraversalConfig(levels=1, grid_n=2, cell_fraction=0.5, locations_per_level=())
    out = traverse(model, images[:, ::2, ::2], root_only)
    with pytest.raises(ContractError):
        loss_perfeature(out, labels, BaselineState(), BaselineState(), LossWeights(lambda_c=0.3))


def test_empty_batch_rejected():
    model = _toy_model()
    images, labels = _batch()
    out = traverse(model, images, TOY)
    with pytest.raises(ContractError):
        loss_base(out, labels[:2], BaselineState(), LossWeights())


def test_no_gradient_into_rewards_or_baseline():
    model = _toy_model()
    images, labels = _batch()
    out = traverse(model, images, TOY)
    loss = loss_perfeature(out, labels, BaselineState(0.3), BaselineState(0.2), LossWeights(lambda_c=0.5, lambda_r=0.5))
    params = {id(p) for p in model.parameters().values()}
    leaves = [t for t in _topological_order(loss) if t._backward is None and t.requires_grad]
    assert leaves and all(id(t) in params for t in leaves)
    # shifting b changes the surrogate only through a constant coefficient
    g1 = _grads(model, loss_base(traverse(model, images, TOY), labels, BaselineState(0.3), LossWeights()))
    g2 = _grads(model, loss_base(traverse(model, images, TOY), labels, BaselineState(0.5), LossWeights()))
    g_seq = _grads(model, T.tmean(traverse(model, images, TOY).seq_log_prob))
    for k in g1:
        np.testing.assert_allclose(g2[k] - g1[k], 0.1 * 0.2 * g_seq[k], atol=1e-12, rtol=0)


# -- contrastive --------------------------------------------------------

def test_contrastive_examples():
    v = np.array([[1.0, 2.0], [1.0, 2.0]])
    assert loss_contrastive(Tensor(v), [0, 0], 0.4, 1.0).item() == pytest.approx(0.0, abs=1e-15)
    low = np.array([[1.0, 0.0], [0.3, np.sqrt(1 - 0.09)]])
    assert loss_contrastive(Tensor(low), [0, 1], 0.4, 1.0).item() == pytest.approx(0.0, abs=1e-15)
    high = np.array([[1.0, 0.0], [0.9, np.sqrt(1 - 0.81)]])
    assert loss_contrastive(Tensor(high), [0, 1], 0.4, 100.0).item() == pytest.approx(25.0, abs=1e-12)


def test_contrastive_permutation_invariant():
    rng = np.random.default_rng(0)
    f = rng.normal(size=(6, 4))
    lab = rng.integers(0, 3, size=6)
    perm = rng.permutation(6)
    a = loss_contrastive(Tensor(f), lab, 0.2, 3.0).item()
    b = loss_contrastive(Tensor(f[perm]), lab[perm], 0.2, 3.0).item()
    assert a == pytest.approx(b, abs=1e-13)


def test_contrastive_zero_vector():
    with pytest.raises(NumericDomainError):
        loss_contrastive(Tensor(np.array([[0.0, 0.0], [1.0, 0.0]])), [0, 1], 0.4, 1.0)


# -- optimizer ----------------------------------------------------------

def test_adam_first_step_moves_by_lr():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    p.grad = np.array([0.5, -3.0])
    Adam({"p": p}, lr=0.01).step()
    np.testing.assert_allclose(p.data, [0.99, -1.99], atol=1e-9)


def test_clip_grad_norm():
    p = Tensor(np.zeros(2), requires_grad=True)
    p.grad = np.array([3.0, 4.0])
    assert clip_grad_norm({"p": p}, 1.0) == pytest.approx(5.0)
    np.testing.assert_allclose(np.linalg.norm(p.grad), 1.0, atol=1e-9)


# -- training loop ------------------------------------------------------

def test_zero_learning_rate_keeps_parameters():
    model = _toy_model()
    before = {k: p.data.copy() for k, p in model.parameters().items()}
    tcfg = TrainConfig(steps=1, batch_size=4, lr=0.0)
    state = make_trainer(model, tcfg)
    images, labels = _batch()
    m = train_step(state, images, labels, tcfg, TOY)
    for k, p in model.parameters().items():
        assert np.array_equal(p.data, before[k])
    assert m["b"] == pytest.approx(0.9 * 0.5 + 0.1 * m["reward"])


def _run(seed, steps=6, weights=LossWeights(lambda_c=0.3, lambda_r=0.3)):
    model = _toy_model(seed)
    tcfg = TrainConfig(steps=steps, batch_size=4, lr=1e-3, weights=weights, seed=seed)
    state = make_trainer(model, tcfg)
    images, labels = _batch(seed, n=16)
    return train(state, images, labels, tcfg, TOY), state


def test_training_is_deterministic():
    a, sa = _run(5)
    b, sb = _run(5)
    assert a == b
    for k, p in sa.model.parameters().items():
        assert p.data.tobytes() == sb.model.parameters()[k].data.tobytes()


def test_separate_baselines_and_contrastive():
    h, state = _run(2, steps=3, weights=LossWeights(lambda_c=0.5, lambda_r=0.5, lambda_con=0.5))
    assert all(np.isfinite(m["loss"]) for m in h)
    model = _toy_model()
    tcfg = TrainConfig(steps=2, batch_size=4, shared_baseline=False, weights=LossWeights(lambda_c=0.5, lambda_r=0.5))
    state = make_trainer(model, tcfg)
    images, labels = _batch()
    m = train_step(state, images, labels, tcfg, TOY)
    assert "b_k" in m and m["b_k"] != 0.5


def test_mc_samples_repeat_images():
    model = _toy_model()
    tcfg = TrainConfig(steps=1, batch_size=2, weights=LossWeights(mc_samples=3))
    state = make_trainer(model, tcfg)
    images, labels = _batch(n=2)
    assert np.isfinite(train_step(state, images, labels, tcfg, TOY)["loss"])


def test_non_finite_loss_aborts():
    model = _toy_model()
    model.classifier.b.data[0] = np.nan
    tcfg = TrainConfig(steps=1, batch_size=4)
    state = make_trainer(model, tcfg)
    images, labels = _batch()
    with pytest.raises(NonFiniteLossError):
        train_step(state, images, labels, tcfg, TOY)


# -- estimator check ----------------------------------------------------

@pytest.mark.parametrize("count", [1, 2, 3])
@pytest.mark.parametrize("baseline", [0.0, "mean", -0.7])
def test_estimator_is_unbiased(count, baseline):
    trav = TraversalConfig(grid_n=2, cell_fraction=0.5, locations_per_level=(count,))
    model = _toy_model(7)
    image = np.random.default_rng(8).uniform(-1, 1, size=(32, 32, 1))
    assert mc_gradient_check(model, image, 2, trav, baseline) < 1e-8


def test_baseline_does_not_shift_expected_policy_term():
    model = _toy_model(9)
    image = np.random.default_rng(10).uniform(-1, 1, size=(32, 32, 1))
    _, est0, _ = enumerated_gradients(model, image, 1, TOY, 0.0)
    _, estb, _ = enumerated_gradients(model, image, 1, TOY, "mean")
    for k in est0:
        np.testing.assert_allclose(est0[k], estb[k], atol=1e-12, rtol=0)


def test_single_cell_policy_gradient_is_zero():
    trav = TraversalConfig(grid_n=1, cell_fraction=1.0, locations_per_level=(1,))
    model = TNetModel(ModelConfig(), 1, np.random.default_rng(0))
    image = np.random.default_rng(1).uniform(-1, 1, size=(16, 16, 1))
    _, _, policy = enumerated_gradients(model, image, 0, trav, 0.0)
    assert all(np.all(g == 0) for g in policy.values())
    assert mc_gradient_check(model, image, 0, trav) < 1e-8


def test_enumeration_limits():
    with pytest.raises(ContractError):
        mc_gradient_check(TNetModel(ModelConfig(), 4, np.random.default_rng(0)), np.zeros((64, 64, 1)), 0, TraversalConfig())
