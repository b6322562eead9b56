"""Ensemble state, uniform policy selection, joint training and the distillation trigger."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import envs
from .replay import ReplayBuffer
from .sac import SacConfig, SacLearner, sac_update

# Fixed order of the independent random streams spawned from the master seed.
STREAMS = ("init", "select", "act", "update", "distill", "eval")


class EnsembleMember:
    """View of member ``k`` inside a :class:`SacLearner`.

    Parameter arrays are views into the learner's stacked buffers, so writes
    through a member are visible to the batched updates and vice versa.
    """

    def __init__(self, learner, k, window):
        self.learner = learner
        self.k = k
        self.returns = deque(maxlen=window)
        self.policy = learner.member_policy(k)
        self.critic_net = learner.q_net[k]  # stack (2,)
        self.critic_target = learner.q_target[k]
        self.critics = learner.member_critics(k)

    @property
    def recent_return(self):
        """Mean of the last M episodic returns, or None before the first episode."""
        if not self.returns:
            return None
        return float(np.mean(self.returns))

    @property
    def log_alpha(self):
        return self.learner.log_alpha[self.k]

    def reset_optimizers(self):
        self.learner.pol_opt.reset(self.k)
        self.learner.q_opt.reset(self.k)

    def act_fn(self, rng, deterministic=False):
        pol = self.policy
        return lambda obs: pol.act(obs, rng, deterministic)


def update_stat(member, episodic_return):
    member.returns.append(float(episodic_return))


@dataclass
class EnsembleState:
    learner: SacLearner
    members: list
    buffer: ReplayBuffer
    rngs: dict
    interval: int
    t_acc: int = 0
    total_steps: int = 0
    episodes: int = 0
    phases: int = 0
    # member-level gradient updates: SAC updates plus distillation student steps
    grad_steps: int = 0
    window_start: int = 0
    # grad_steps spent in each completed window (joint training + its phase)
    window_grad_steps: list = field(default_factory=list)

    @property
    def k(self):
        return len(self.members)

    def recent_returns(self):
        return [m.recent_return for m in self.members]


def member_rngs(seed_seq, k):
    return [np.random.default_rng(s) for s in seed_seq.spawn(k)]


def make_streams(seed):
    children = np.random.SeedSequence(seed).spawn(len(STREAMS))
    return dict(zip(STREAMS, children))


def init_ensemble(spec, k, seed, sac_config=None, interval=2000, window=10, capacity=1_000_000):
    """Fresh ensemble: K independently seeded members, empty buffer, t_acc = 0."""
    if k < 1:
        raise ValueError("ensemble size must be >= 1")
    sac_config = sac_config or SacConfig()
    seqs = make_streams(seed)
    learner = SacLearner(spec, sac_config, member_rngs(seqs["init"], k))
    members = [EnsembleMember(learner, i, window) for i in range(k)]
    buffer = ReplayBuffer(spec.obs_dim, spec.act_dim, capacity, spec.low, spec.high)
    rngs = {name: np.random.default_rng(seqs[name]) for name in STREAMS if name != "init"}
    return EnsembleState(learner, members, buffer, rngs, interval)


def select_policy(state, rng=None):
    """k_e ~ Uniform([0, K))."""
    rng = rng or state.rngs["select"]
    return int(rng.integers(0, state.k))


def rollout(env, policy, rng, deterministic=False):
    """One full episode with a :class:`SquashedGaussianPolicy`."""
    return envs.rollout(env, lambda obs: policy.act(obs, rng, deterministic), rng)


def run_updates(state, n, active=None):
    """``n`` batched SAC updates; each step draws a fresh batch per member."""
    learner = state.learner
    rng = state.rngs["update"]
    q_sum = np.zeros(state.k)
    pi_sum = np.zeros(state.k)
    for _ in range(n):
        batch = learner.sample_batch(state.buffer, rng)
        q, pi, _ = sac_update(learner, batch, rng, active)
        q_sum += q
        pi_sum += pi
    per_member = state.k if active is None else int(np.count_nonzero(active))
    state.grad_steps += n * per_member
    return q_sum / max(n, 1), pi_sum / max(n, 1)


def joint_training_round(state, env):
    """Select an actor, collect one stochastic episode, update every member T times."""
    k_e = select_policy(state)
    member = state.members[k_e]
    traj = rollout(env, member.policy, state.rngs["act"])
    state.buffer.append(traj, source=k_e)
    T = len(traj)
    q_loss, pi_loss = run_updates(state, T)
    update_stat(member, traj.ret)
    state.t_acc += T
    state.total_steps += T
    state.episodes += 1
    return {
        "member": k_e,
        "return": traj.ret,
        "q_loss": q_loss.tolist(),
        "pi_loss": pi_loss.tolist(),
        "alpha": state.learner.alpha.tolist(),
    }


def maybe_distill(state, phase):
    """Run ``phase(state)`` and reset t_acc once t_acc >= I; otherwise no-op.

    ``phase`` may be None (plain ensemble): the trigger still resets t_acc.
    Returns the phase report, or None when nothing fired.
    """
    if state.t_acc < state.interval:
        return None
    report = phase(state) if phase is not None else {}
    state.t_acc = 0
    state.phases += 1
    state.window_grad_steps.append(state.grad_steps - state.window_start)
    state.window_start = state.grad_steps
    return report

