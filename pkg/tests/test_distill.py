import itertools

import numpy as np
import pytest

from piekd import envs
from piekd.distill import (
    DistillConfig,
    NoEligibleTeacher,
    critic_mse,
    distill_critic,
    distill_phase,
    distill_policy,
    elect_teacher,
    gaussian_kl,
    graph_gaussian_kl,
    hardcopy,
    policy_kl,
)
from piekd.ensemble import init_ensemble, update_stat
from piekd.numcore import AdamState, Graph
from piekd.sac import SacConfig

SPEC = envs.Pendulum.spec
SMALL = SacConfig(hidden=(32, 32), batch_size=32)


def ensemble(k=3, seed=0, config=SMALL):
    return init_ensemble(SPEC, k, seed, config)


# --- election ----------------------------------------------------------------------


def test_election_examples():
    assert elect_teacher([3.0, 7.0, 5.0]) == 1
    assert elect_teacher([7.0, 7.0, 5.0]) == 0


def test_election_exhaustive_orderings():
    for values in ([1.0, 2.0, 3.0], [2.0, 2.0, 1.0], [1.0, 1.0, 2.0], [4.0, 4.0, 4.0]):
        for perm in set(itertools.permutations(values)):
            best = max(perm)
            assert elect_teacher(list(perm)) == perm.index(best)


def test_empty_windows_are_ineligible():
    assert elect_teacher([None, -500.0, None]) == 1
    assert elect_teacher([None, -5.0, -1.0]) == 2
    with pytest.raises(NoEligibleTeacher):
        elect_teacher([None, None, None])


def test_random_teacher_uniform():
    r = np.random.default_rng(0)
    picks = np.array([elect_teacher([1.0, 2.0, 3.0], "random", r) for _ in range(30_000)])
    freq = np.bincount(picks, minlength=3) / picks.size
    assert np.all((freq >= 0.31) & (freq <= 0.36))


# --- KL ----------------------------------------------------------------------------


def test_kl_unit_example():
    assert gaussian_kl(np.array([0.0]), np.array([0.0]), np.array([1.0]), np.array([0.0])) == pytest.approx(0.5)


def _mc_kl(mu_p, ls_p, mu_q, ls_q, n, rng):
    x = mu_p + np.exp(ls_p) * rng.standard_normal((n, mu_p.size))

    def logpdf(x, mu, ls):
        return np.sum(-0.5 * ((x - mu) / np.exp(ls)) ** 2 - ls - 0.5 * np.log(2 * np.pi), axis=-1)

    return float(np.mean(logpdf(x, mu_p, ls_p) - logpdf(x, mu_q, ls_q)))


def test_kl_unit_example_monte_carlo():
    est = _mc_kl(np.zeros(1), np.zeros(1), np.ones(1), np.zeros(1), 1_000_000, np.random.default_rng(0))
    assert est == pytest.approx(0.5, rel=0.01)


def test_kl_self_is_zero(rng):
    mu, ls = rng.normal(size=(10, 3)), rng.normal(size=(10, 3))
    assert np.max(np.abs(gaussian_kl(mu, ls, mu, ls))) <= 1e-12


def test_kl_matches_scalar_formula(rng):
    mu_p, ls_p, mu_q, ls_q = rng.normal(size=(4, 2))
    sp, sq = np.exp(ls_p), np.exp(ls_q)
    ref = np.sum(np.log(sq / sp) + (sp**2 + (mu_p - mu_q) ** 2) / (2 * sq**2) - 0.5)
    assert gaussian_kl(mu_p, ls_p, mu_q, ls_q) == pytest.approx(ref, abs=1e-12)


# --- policy distillation -----------------------------------------------------------


def test_identical_policy_distillation_is_noop(pendulum_buffer):
    s = ensemble()
    t, st = s.members[0], s.members[1]
    st.policy.net.flat[...] = t.policy.net.flat
    before = st.policy.net.flat.copy()
    kl0, kl1 = distill_policy(st.policy, t.policy, pendulum_buffer, 5, np.random.default_rng(0))
    assert kl0 == 0.0 and kl1 == 0.0
    assert st.policy.net.flat.tobytes() == before.tobytes()


def test_policy_distillation_decreases_kl(pendulum_buffer):
    s = ensemble()
    t, st = s.members[0], s.members[2]
    teacher_before = t.policy.net.flat.copy()
    obs = pendulum_buffer.obs[: len(pendulum_buffer)]
    start = policy_kl(t.policy, st.policy, obs)
    distill_policy(st.policy, t.policy, pendulum_buffer, 200, np.random.default_rng(0), batch_size=64)
    assert policy_kl(t.policy, st.policy, obs) < start
    assert t.policy.net.flat.tobytes() == teacher_before.tobytes()


def test_single_small_step_does_not_increase_batch_kl(pendulum_buffer):
    s = ensemble()
    t, st = s.members[0], s.members[1]
    r = np.random.default_rng(5)
    idx = pendulum_buffer.indices(64, np.random.default_rng(5))
    obs = pendulum_buffer.obs[idx]
    before = policy_kl(t.policy, st.policy, obs)
    distill_policy(st.policy, t.policy, pendulum_buffer, 1, r, batch_size=64, lr=1e-6)
    assert policy_kl(t.policy, st.policy, obs) <= before + 1e-8


# --- critic distillation -----------------------------------------------------------


def test_identical_critics_noop(pendulum_buffer):
    s = ensemble()
    t, st = s.members[0], s.members[1]
    st.critic_net.flat[...] = t.critic_net.flat
    before = st.critic_net.flat.copy()
    m0, m1 = distill_critic(st.critic_net, t.critic_net, pendulum_buffer, 3, np.random.default_rng(0))
    assert m0 == 0.0 and m1 == 0.0
    assert st.critic_net.flat.tobytes() == before.tobytes()


def test_critic_distillation_decreases_mse(pendulum_buffer):
    s = ensemble()
    t, st = s.members[0], s.members[1]
    teacher_before = t.critic_net.flat.copy()
    target_before = st.critic_target.flat.copy()
    b = pendulum_buffer.ordered()
    x = np.concatenate([b.obs, b.act], axis=-1)
    start = critic_mse(t.critic_net, st.critic_net, x)
    distill_critic(st.critic_net, t.critic_net, pendulum_buffer, 200, np.random.default_rng(0), batch_size=64)
    assert critic_mse(t.critic_net, st.critic_net, x) < start
    assert t.critic_net.flat.tobytes() == teacher_before.tobytes()
    assert st.critic_target.flat.tobytes() == target_before.tobytes()


def test_critic_pairs_are_matched_per_index(pendulum_buffer):
    # student critic i regresses onto teacher critic i, not onto the other twin
    s = ensemble()
    t, st = s.members[0], s.members[1]
    b = pendulum_buffer.ordered()
    x = np.concatenate([b.obs, b.act], axis=-1)
    distill_critic(st.critic_net, t.critic_net, pendulum_buffer, 300, np.random.default_rng(0), batch_size=64, lr=1e-3)
    for i in range(2):
        same = np.mean((st.critic_net[i](x) - t.critic_net[i](x)) ** 2)
        other = np.mean((st.critic_net[i](x) - t.critic_net[1 - i](x)) ** 2)
        assert same < other


# --- hardcopy ----------------------------------------------------------------------


def test_hardcopy_semantics(rng):
    s = ensemble()
    t, st = s.members[1], s.members[2]
    s.learner.pol_opt.m[2] = 1.0
    s.learner.q_opt.v[2] = 1.0
    hardcopy(st, t)
    assert st.policy.net.flat.tobytes() == t.policy.net.flat.tobytes()
    assert st.critic_net.flat.tobytes() == t.critic_net.flat.tobytes()
    assert st.critic_target.flat.tobytes() == t.critic_target.flat.tobytes()
    assert not s.learner.pol_opt.m[2].any() and not s.learner.q_opt.v[2].any()
    states = rng.normal(size=(100, 3))
    assert np.array_equal(st.policy.act(states, deterministic=True), t.policy.act(states, deterministic=True))


def test_hardcopy_self_is_noop():
    s = ensemble()
    m = s.members[0]
    s.learner.pol_opt.m[0] = 1.0
    hardcopy(m, m)
    assert s.learner.pol_opt.m[0].all()


def test_hardcopy_architecture_mismatch():
    a = ensemble().members[0]
    b = ensemble(config=SacConfig(hidden=(8,))).members[1]
    with pytest.raises(ValueError):
        hardcopy(a, b)


# --- phase -------------------------------------------------------------------------


def _with_data(s, buffer, returns):
    s.buffer = buffer
    for m, r in zip(s.members, returns):
        if r is not None:
            update_stat(m, r)
    return s


def test_phase_report_lists_students(pendulum_buffer):
    s = _with_data(ensemble(), pendulum_buffer, [-300.0, -100.0, -900.0])
    teacher_before = s.members[1].policy.net.flat.copy()
    rep = distill_phase(s, DistillConfig(steps=3, batch_size=16), np.random.default_rng(0))
    assert rep["teacher"] == 1
    assert [e["student"] for e in rep["students"]] == [0, 2]
    assert all(e["kl_final"] is not None for e in rep["students"])
    assert s.members[1].policy.net.flat.tobytes() == teacher_before.tobytes()
    assert s.grad_steps == 6


def test_phase_k1_is_noop(pendulum_buffer):
    s = _with_data(ensemble(k=1), pendulum_buffer, [-1.0])
    before = s.learner.policy_net.flat.copy()
    rep = distill_phase(s, DistillConfig(), np.random.default_rng(0))
    assert rep["students"] == [] and rep["teacher"] is None
    assert s.learner.policy_net.flat.tobytes() == before.tobytes()


def test_phase_mode_none(pendulum_buffer):
    s = _with_data(ensemble(), pendulum_buffer, [-1.0, -2.0, -3.0])
    rep = distill_phase(s, DistillConfig(mode="none"), np.random.default_rng(0))
    assert rep["students"] == []


def test_phase_hardcopy_and_shared_alpha(pendulum_buffer):
    s = _with_data(ensemble(), pendulum_buffer, [-1.0, -2.0, -3.0])
    s.learner.log_alpha[:, 0] = [0.5, -1.0, -2.0]
    distill_phase(s, DistillConfig(mode="hardcopy", share_alpha=True), np.random.default_rng(0))
    flat = s.learner.policy_net.flat
    assert flat[1].tobytes() == flat[0].tobytes() == flat[2].tobytes()
    np.testing.assert_array_equal(s.learner.log_alpha[:, 0], 0.5)


def test_teacher_states_only(pendulum_buffer):
    s = _with_data(ensemble(), pendulum_buffer, [-1.0, -2.0, -3.0])
    rep = distill_phase(s, DistillConfig(steps=2, batch_size=8, teacher_states_only=True), np.random.default_rng(0))
    assert rep["teacher"] == 0


def test_config_validation():
    with pytest.raises(ValueError):
        DistillConfig(mode="mutual")
    with pytest.raises(ValueError):
        DistillConfig(teacher_rule="worst")
    with pytest.raises(ValueError):
        DistillConfig(steps=0)


def test_separate_optimizer_can_be_passed(pendulum_buffer):
    s = ensemble()
    t, st = s.members[0], s.members[1]
    opt = AdamState.like(st.policy.net.flat, lr=1e-3)
    distill_policy(st.policy, t.policy, pendulum_buffer, 4, np.random.default_rng(0), opt=opt)
    assert opt.step == 4


def test_graph_kl_matches_numpy(rng):
    mu_t, ls_t, mu_s, ls_s = rng.normal(size=(4, 20, 2))
    g = Graph()
    out = graph_gaussian_kl(g, mu_t, ls_t, g.const(mu_s), g.const(ls_s))
    np.testing.assert_allclose(out.value, gaussian_kl(mu_t, ls_t, mu_s, ls_s), rtol=0, atol=1e-12)
