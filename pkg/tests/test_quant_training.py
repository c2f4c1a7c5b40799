import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qeq.models import ConvFC, ConvFCSpec
from qeq.quant_training import (AlphaSchedule, BitMap, PartitionPlan, TrainConfig, TrainingDiverged, ab_blend,
                                ab_blend_node, ab_train, alpha_schedule, average_weight_bits, companded_blend,
                                companding_sab, ptq, qat_ste_train, run_epochs, sab, sptq, ste_quantize, train)
from qeq.quantizers import ClippingRange, QuantizationError, QuantizerSpec, uniform_grid
from qeq.tensor import Adam, Tensor, mse_loss

from conftest import finite_diff, rel_err

SPEC = QuantizerSpec()
FAST = TrainConfig(epochs=3, lr=3e-3, batch_size=32, seed=0, retrain_epochs=1, calib_size=64)


@pytest.fixture(scope="module")
def toy():
    """Small regression task and a briefly trained Conv-FC."""
    r = np.random.default_rng(5)
    X = r.normal(size=(192, 12))
    Y = np.tanh(X[:, [1, 4, 7, 10]] + 0.3 * X[:, [0, 3, 6, 9]])
    m = train(ConvFC(ConvFCSpec(M=2, K=2, n_h=6), seed=1), (X, Y), FAST)
    return m, (X, Y)


def assert_contained(m):
    assert m.quant.weights
    for name, entries in m.quant.weights.items():
        flat = m.params[name].value.ravel()
        for idx, grid in entries:
            assert np.all(np.isin(flat[idx], grid.symbols)), name


def params_equal(a, b):
    return all(np.array_equal(a.params[n].value, b.params[n].value) for n in a.params.names())


# -- alpha schedule and blends ------------------------------------------------------------

def test_alpha_schedule_examples():
    assert alpha_schedule(10, 10, 20) == 0.0
    assert alpha_schedule(20, 10, 20) == 1.0
    assert alpha_schedule(15, 10, 20) == 0.125
    assert alpha_schedule(3, 10, 20) == 0.0 and alpha_schedule(30, 10, 20) == 1.0
    with pytest.raises(QuantizationError):
        alpha_schedule(0, 5, 5)
    with pytest.raises(QuantizationError):
        AlphaSchedule(3, 2)


@given(k1=st.integers(0, 50), d=st.integers(1, 50))
def test_alpha_schedule_monotone(k1, d):
    a = [alpha_schedule(j, k1, k1 + d) for j in range(k1 - 2, k1 + d + 3)]
    assert all(x <= y for x, y in zip(a, a[1:]))
    assert all(0.0 <= x <= 1.0 for x in a)


def test_ab_blend_examples():
    g = uniform_grid(0.5, 4, 4, ClippingRange(-2, 5.5))
    assert ab_blend(1.4, 0.5, g) == pytest.approx(1.45, abs=1e-15)
    w = np.array([0.13, -1.7, 3.3])
    np.testing.assert_array_equal(ab_blend(w, 0.0, g), w)
    np.testing.assert_array_equal(ab_blend(w, 1.0, g), g(w))
    with pytest.raises(QuantizationError):
        ab_blend(w, 1.5, g)


def test_companded_blend_end_points(rng):
    g = QuantizerSpec(kind="companded", mu=50.0).build(rng.normal(size=100), 4)
    w = rng.normal(size=50)
    np.testing.assert_array_equal(companded_blend(w, 0.0, g), w)
    np.testing.assert_array_equal(companded_blend(w, 1.0, g), g(w))


# -- custom gradients ---------------------------------------------------------------------

def small_net(w, x, y):
    return mse_loss(x @ w.T, y)


def test_ste_gradient_equals_identity_inside(rng):
    g = uniform_grid(0.25, 8, 4, ClippingRange(-2.0, 1.75))
    w0 = rng.uniform(-1.5, 1.5, size=(3, 4))
    x, y = rng.normal(size=(6, 4)), rng.normal(size=(6, 3))
    wq = Tensor(w0, requires_grad=True)
    small_net(ste_quantize(wq, g), x, y).backward()
    # oracle: the same net evaluated at Q(w) with Q replaced by identity
    wi = Tensor(g(w0), requires_grad=True)
    small_net(wi, x, y).backward()
    np.testing.assert_allclose(wq.grad, wi.grad, rtol=0, atol=1e-10)


def test_ste_gradient_zero_outside(rng):
    g = uniform_grid(0.25, 8, 4, ClippingRange(-2.0, 1.75))
    w0 = np.array([[-3.0, 0.3, 2.5, 1.75]])
    wq = Tensor(w0, requires_grad=True)
    small_net(ste_quantize(wq, g), rng.normal(size=(5, 4)), rng.normal(size=(5, 1))).backward()
    assert wq.grad[0, 0] == 0.0 and wq.grad[0, 2] == 0.0
    assert wq.grad[0, 1] != 0.0 and wq.grad[0, 3] != 0.0


@pytest.mark.parametrize("alpha", [0.0, 0.2, 0.5, 0.9, 1.0])
def test_ab_gradient_scaling(rng, alpha):
    g = uniform_grid(0.25, 8, 4, ClippingRange(-2.0, 1.75))
    w0 = rng.normal(size=(3, 4))
    x, y = rng.normal(size=(6, 4)), rng.normal(size=(6, 3))
    wm = Tensor(w0, requires_grad=True)
    small_net(ab_blend_node(wm, alpha, g), x, y).backward()
    wb = Tensor(ab_blend(w0, alpha, g), requires_grad=True)
    small_net(wb, x, y).backward()
    np.testing.assert_allclose(wm.grad, (1 - alpha) * wb.grad, rtol=0, atol=1e-10)


def test_ab_gradient_finite_difference(rng):
    # on a grid this fine the quantizer is piecewise constant away from ties, so
    # finite differences see slope 1 - alpha
    g = uniform_grid(0.25, 8, 4, ClippingRange(-2.0, 1.75))
    w0 = g(rng.uniform(-1.5, 1.5, size=(2, 4))) + 0.05
    x, y = rng.normal(size=(5, 4)), rng.normal(size=(5, 2))
    wm = Tensor(w0, requires_grad=True)
    small_net(ab_blend_node(wm, 0.3, g), x, y).backward()
    fd = finite_diff(lambda w: small_net(Tensor(ab_blend(w, 0.3, g)), x, y).item(), w0.copy(), eps=1e-6)
    assert rel_err(wm.grad, fd) < 1e-4


def test_ste_pass_through_fine_grid(toy):
    m, data = toy
    cfg = TrainConfig(lr=1e-3, batch_size=32, seed=3)
    wide = QuantizerSpec(calibration="fixed", clip=(-50.0, 50.0))
    q = qat_ste_train(m, data, wide, BitMap(weights=24), 1, cfg)
    ref = m.clone()
    run_epochs(ref, data, cfg, 1, Adam(ref.params, cfg.lr), np.random.default_rng(cfg.seed))
    for n in m.weight_names():
        np.testing.assert_allclose(q.params[n].value, ref.params[n].value, atol=1e-4)


# -- strategies ----------------------------------------------------------------------------

def test_ptq_pass_through_is_identity(toy):
    m, (X, _) = toy
    q = ptq(m, SPEC, BitMap(weights=32))
    np.testing.assert_array_equal(q.predict(X), m.predict(X))
    assert average_weight_bits(q) == 32


def test_ptq_containment_and_biases(toy):
    m, (X, _) = toy
    q = ptq(m, SPEC, BitMap(weights=4, acts=8), calib=X[:64])
    assert_contained(q)
    assert set(q.quant.weights) == set(m.weight_names())
    assert "dense.bias" not in q.quant.weights
    np.testing.assert_array_equal(q.params["dense.bias"].value, m.params["dense.bias"].value.astype(np.float32))
    assert set(q.quant.acts) == set(m.act_points)


def test_ptq_needs_calibration_for_acts(toy):
    m, _ = toy
    with pytest.raises(QuantizationError):
        ptq(m, SPEC, BitMap(weights=4, acts=8))


def test_ptq_8bit_close(toy):
    m, (X, _) = toy
    q = ptq(m, SPEC, BitMap(weights=8))
    assert np.mean((q.predict(X) - m.predict(X)) ** 2) < 1e-3


def test_strategies_terminal_containment(toy):
    m, data = toy
    plan = PartitionPlan.build(m, 3, seed=0)
    sched = AlphaSchedule(0, 2)
    bm = BitMap(weights=3)
    for q in [qat_ste_train(m, data, SPEC, bm, 2, FAST),
              ab_train(m, data, SPEC, bm, sched, FAST),
              sptq(m, data, plan, SPEC, bm, FAST),
              sab(m, data, plan, sched, SPEC, bm, FAST),
              companding_sab(m, data, plan, sched, 20.0, bitmap=bm, cfg=FAST)]:
        assert_contained(q)
        assert q.quant.on_grid(q.params)
        assert average_weight_bits(q) == 3


def test_mixed_precision_plan(toy):
    m, data = toy
    plan = PartitionPlan.build(m, 4, seed=0, bits=[1, 1, 1, 4])
    q = sab(m, data, plan, AlphaSchedule(0, 1), SPEC, cfg=FAST)
    assert_contained(q)
    sizes = {n: m.params[n].value.size for n in m.weight_names()}
    expect = sum(sum(len(g) * b for g, b in zip(plan.groups[n], plan.bits)) for n in sizes) / sum(sizes.values())
    assert average_weight_bits(q) == pytest.approx(expect)


def test_partition_plan_invariants(toy):
    m, _ = toy
    for mode in ("random", "magnitude", "magnitude-asc"):
        plan = PartitionPlan.build(m, 4, mode=mode, seed=2)
        plan.check(m)
        for n in m.weight_names():
            allidx = np.concatenate(plan.groups[n])
            assert np.array_equal(np.sort(allidx), np.arange(m.params[n].value.size))
    with pytest.raises(QuantizationError):
        PartitionPlan.build(m, 0)
    with pytest.raises(QuantizationError):
        PartitionPlan.build(m, 2, bits=[4])
    with pytest.raises(QuantizationError):
        BitMap(weights=0)


def test_magnitude_groups_ordered(toy):
    m, _ = toy
    plan = PartitionPlan.build(m, 2, mode="magnitude")
    w = np.abs(m.params["dense.weight"].value.ravel())
    g0, g1 = plan.groups["dense.weight"]
    assert w[g0].min() >= w[g1].max()
    a0, a1 = PartitionPlan.build(m, 2, mode="magnitude-asc").groups["dense.weight"]
    assert w[a0].max() <= w[a1].min()


def test_sptq_freeze_monotonicity(toy):
    m, data = toy
    plan = PartitionPlan.build(m, 3, seed=1)
    hist: list = []
    snaps = []
    # record the store after every stage by stepping a growing number of groups
    for upto in range(1, 4):
        sub = PartitionPlan({n: g[:upto - 1] + [np.concatenate(g[upto - 1:])] for n, g in plan.groups.items()})
        snaps.append(sub)
    q = sptq(m, data, plan, SPEC, BitMap(weights=4), FAST, history=hist)
    final = {n: q.params[n].value.ravel() for n in m.weight_names()}
    for name, entries in q.quant.weights.items():
        for (idx, grid), group in zip(entries, plan.groups[name]):
            assert np.array_equal(idx, group)
    assert {h["stage"] for h in hist} == {0, 1}
    # group 0 is fixed right after rounding the trained weights, so it must equal PTQ of them
    p = ptq(m, SPEC, BitMap(weights=4), plan=plan)
    for name in m.weight_names():
        g0 = plan.groups[name][0]
        np.testing.assert_array_equal(final[name][g0], p.params[name].value.ravel()[g0])


def test_frozen_values_never_move(toy):
    m, data = toy
    plan = PartitionPlan.build(m, 2, seed=4)
    q = m.clone()
    for n in m.weight_names():
        mask = np.zeros(q.params[n].value.size, bool)
        mask[plan.groups[n][0]] = True
        q.params[n].frozen = mask.reshape(q.params[n].value.shape)
    before = {n: q.params[n].value.copy() for n in m.weight_names()}
    run_epochs(q, data, FAST, 2, Adam(q.params, 1e-2), np.random.default_rng(0))
    for n in m.weight_names():
        g0 = plan.groups[n][0]
        np.testing.assert_array_equal(q.params[n].value.ravel()[g0], before[n].ravel()[g0])
        assert not np.array_equal(q.params[n].value, before[n])


def test_sptq_single_group_is_ptq(toy):
    m, data = toy
    plan = PartitionPlan.build(m, 1)
    assert params_equal(sptq(m, data, plan, SPEC, BitMap(weights=4), FAST), ptq(m, SPEC, BitMap(weights=4)))


def test_sab_single_group_is_ab(toy):
    m, data = toy
    sched = AlphaSchedule(0, 3)
    a = sab(m, data, PartitionPlan.build(m, 1), sched, SPEC, BitMap(weights=4), FAST)
    b = ab_train(m, data, SPEC, BitMap(weights=4), sched, FAST)
    assert params_equal(a, b)


def test_ab_without_training_is_ptq(toy):
    m, data = toy
    cfg = TrainConfig(epochs_per_alpha=0, calib_size=64)
    q = ab_train(m, data, SPEC, BitMap(weights=4), AlphaSchedule(4, 5), cfg)
    assert params_equal(q, ptq(m, SPEC, BitMap(weights=4)))


def test_companding_small_mu_matches_uniform(toy):
    m, data = toy
    plan = PartitionPlan.build(m, 2, seed=0)
    sched = AlphaSchedule(0, 2)
    clip = QuantizerSpec(calibration="fixed", clip=(-1.5, 1.5))
    c = companding_sab(m, data, plan, sched, 1e-7, spec=clip, bitmap=BitMap(weights=4), cfg=FAST)
    u = sab(m, data, plan, sched, QuantizerSpec(kind="uniform-symmetric", calibration="fixed", clip=(-1.5, 1.5)),
            BitMap(weights=4), FAST)
    for n in m.weight_names():
        np.testing.assert_allclose(c.params[n].value, u.params[n].value, atol=1e-3)


def test_sab_requires_plan(toy):
    m, data = toy
    with pytest.raises(QuantizationError):
        sab(m, data, None, AlphaSchedule(), SPEC)


def test_determinism(toy):
    m, data = toy
    plan = PartitionPlan.build(m, 2, seed=0)
    a = sab(m, data, plan, AlphaSchedule(0, 2), SPEC, BitMap(weights=4), FAST)
    b = sab(m, data, plan, AlphaSchedule(0, 2), SPEC, BitMap(weights=4), FAST)
    for n in m.params.names():
        assert a.params[n].value.tobytes() == b.params[n].value.tobytes()


def test_divergence_raises(toy):
    m, data = toy
    X, Y = data
    with pytest.raises(TrainingDiverged):
        train(m, (X, Y * np.inf), FAST)


@settings(max_examples=20, deadline=None)
@given(bits=st.integers(1, 8), seed=st.integers(0, 1000))
def test_ptq_containment_property(toy, bits, seed):
    m, _ = toy
    plan = PartitionPlan.build(m, 3, seed=seed)
    assert_contained(ptq(m, SPEC, BitMap(weights=bits), plan=plan))
