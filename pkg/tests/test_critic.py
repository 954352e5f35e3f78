import numpy as np
import pytest

import hsrl.autodiff as ad
from hsrl.critic import (CriticConfig, CriticParams, TargetCritic, aggregate,
                         per_level_values, value_of_context, weight_snapshot)
from hsrl.errors import ContractError

from gradcheck import check_gradients


def _critic(levels=3, d_model=6, hidden=5, seed=0, **kw):
    return CriticParams(CriticConfig(d_model=d_model, levels=levels,
                                     hidden=hidden, **kw),
                        np.random.default_rng(seed))


def _contexts(levels=3, d_model=6, seed=1):
    rng = np.random.default_rng(seed)
    return [ad.constant(rng.normal(size=d_model)) for _ in range(levels + 1)]


# ---------------------------------------------------------------------------
# per-level values
# ---------------------------------------------------------------------------


def test_zero_weight_critic_returns_output_bias():
    critic = _critic()
    for t in critic.w1 + critic.w2:
        t.data[:] = 0.0
    critic.b2[0].data = np.asarray(1.5)
    values = per_level_values(critic, _contexts())
    assert all(float(v.data) == pytest.approx(1.5, abs=1e-15) for v in values)


def test_identical_contexts_identical_values():
    critic = _critic()
    c = ad.constant(np.random.default_rng(3).normal(size=6))
    values = per_level_values(critic, [c, c, c, c])
    first = float(values[0].data)
    assert all(float(v.data) == first for v in values)


def test_trajectory_length_mismatch():
    critic = _critic(levels=3)
    with pytest.raises(ContractError):
        per_level_values(critic, _contexts(levels=2))


def test_per_level_value_gradient():
    critic = _critic()
    contexts = _contexts(seed=5)
    params = [critic.w1[0], critic.b1[0], critic.w2[0], critic.b2[0]]
    check_gradients(lambda: per_level_values(critic, contexts)[2], params,
                    rtol=1e-3, atol=1e-7)


def test_per_level_heads_flag_gives_independent_heads():
    critic = _critic(per_level_heads=True)
    assert len(critic.w1) == 4
    contexts = _contexts(seed=6)
    values = per_level_values(critic, contexts)
    critic.w2[1].data[:] = 0.0
    critic.b2[1].data = np.asarray(9.0)
    values2 = per_level_values(critic, contexts)
    assert float(values2[1].data) == pytest.approx(9.0)
    assert float(values2[0].data) == float(values[0].data)


# ---------------------------------------------------------------------------
# aggregation
# ---------------------------------------------------------------------------


def test_aggregate_uniform_weights():
    critic = _critic(levels=3)
    values = [ad.constant(np.asarray(v)) for v in (1.0, 2.0, 3.0, 4.0)]
    assert float(aggregate(critic, values).data) == pytest.approx(2.5, abs=1e-12)
    assert weight_snapshot(critic) == pytest.approx([0.25] * 4, abs=1e-15)


def test_aggregate_dominant_weight():
    critic = _critic(levels=3)
    critic.w_raw.data = np.array([10.0, -10.0, -10.0, -10.0])
    values = [ad.constant(np.asarray(v)) for v in (1.0, 2.0, 3.0, 4.0)]
    assert float(aggregate(critic, values).data) == pytest.approx(1.0, abs=1e-4)


def test_aggregate_shift_invariance():
    critic = _critic(levels=3)
    rng = np.random.default_rng(9)
    critic.w_raw.data = rng.normal(size=4)
    values = [ad.constant(np.asarray(v)) for v in rng.normal(size=4)]
    before = float(aggregate(critic, values).data)
    critic.w_raw.data = critic.w_raw.data + 7.3
    after = float(aggregate(critic, values).data)
    assert abs(before - after) < 1e-12


def test_aggregate_wrong_arity():
    critic = _critic(levels=3)
    with pytest.raises(ContractError):
        aggregate(critic, [ad.constant(np.asarray(1.0))] * 3)


def test_snapshot_sums_to_one():
    critic = _critic()
    rng = np.random.default_rng(10)
    for _ in range(20):
        critic.w_raw.data = rng.normal(0, 3, size=4)
        snap = weight_snapshot(critic)
        assert abs(snap.sum() - 1.0) < 1e-9
        assert (snap > 0).all()


def test_snapshot_stable_without_updates():
    critic = _critic()
    a = weight_snapshot(critic)
    b = weight_snapshot(critic)
    assert np.array_equal(a, b)


def test_full_critic_gradient_end_to_end():
    # gradient flows through phi, the fusion weights, and the contexts
    critic = _critic(levels=2, d_model=5, hidden=4, seed=11)
    rng = np.random.default_rng(12)
    contexts = [ad.Tensor(rng.normal(size=5), requires_grad=True)
                for _ in range(3)]
    params = [critic.w1[0], critic.b1[0], critic.w2[0], critic.b2[0],
              critic.w_raw] + contexts
    check_gradients(
        lambda: aggregate(critic, per_level_values(critic, contexts)),
        params, rtol=1e-3, atol=1e-7)


# ---------------------------------------------------------------------------
# target critic
# ---------------------------------------------------------------------------


def test_target_full_tau_matches_live():
    live = _critic(seed=13)
    target = TargetCritic(live)
    for t in live.tensors().values():
        t.data += 0.5
    target.soft_update(live, tau=1.0)
    for name, t in live.tensors().items():
        assert np.array_equal(target.arrays[name], t.data)


def test_target_zero_tau_unchanged():
    live = _critic(seed=14)
    target = TargetCritic(live)
    before = {k: v.copy() for k, v in target.arrays.items()}
    for t in live.tensors().values():
        t.data += 1.0
    target.soft_update(live, tau=0.0)
    for name in before:
        assert np.array_equal(target.arrays[name], before[name])


def test_target_hard_sync_bitwise():
    live = _critic(seed=15)
    target = TargetCritic(live)
    for t in live.tensors().values():
        t.data *= -2.0
    target.hard_sync(live)
    for name, t in live.tensors().items():
        assert np.array_equal(target.arrays[name], t.data)


def test_target_value_matches_live_after_sync():
    live = _critic(seed=16)
    target = TargetCritic(live)
    contexts = _contexts(seed=17)
    live_value = float(aggregate(live, per_level_values(live, contexts)).data)
    target_value = target.value([c.data for c in contexts])
    assert target_value == pytest.approx(live_value, abs=1e-12)


def test_target_constant_between_syncs():
    live = _critic(seed=18)
    target = TargetCritic(live)
    contexts = [c.data for c in _contexts(seed=19)]
    v1 = target.value(contexts)
    for t in live.tensors().values():
        t.data += 3.0
    assert target.value(contexts) == v1


def test_target_structure_mismatch():
    live = _critic(seed=20)
    target = TargetCritic(live)
    other = _critic(levels=2, seed=20)
    with pytest.raises(ContractError):
        target.hard_sync(other)


def test_single_context_value_bypasses_fusion():
    live = _critic(seed=21)
    target = TargetCritic(live)
    c = np.random.default_rng(22).normal(size=6)
    direct = float(value_of_context(live, ad.constant(c), 0).data)
    assert target.value([c]) == pytest.approx(direct, abs=1e-12)
