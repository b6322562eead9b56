"""Intra-ensemble knowledge sharing: teacher election, policy/critic distillation, hardcopy."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numcore import AdamState, Graph, NonFiniteError
from .sac import LOG_STD_MAX, LOG_STD_MIN

MODES = ("distill", "hardcopy", "none")
TEACHER_RULES = ("best", "random")


@dataclass
class DistillConfig:
    steps: int = 200
    batch_size: int = 128
    mode: str = "distill"
    teacher_rule: str = "best"
    lr: float = 3e-4
    # sample distillation states only from transitions the teacher generated
    teacher_states_only: bool = False
    # copy the teacher's entropy temperature into students
    share_alpha: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"distill mode must be one of {MODES}, got {self.mode!r}")
        if self.teacher_rule not in TEACHER_RULES:
            raise ValueError(f"teacher rule must be one of {TEACHER_RULES}, got {self.teacher_rule!r}")
        if self.mode == "distill" and self.steps < 1:
            raise ValueError("distillation needs at least one step")


class NoEligibleTeacher(RuntimeError):
    pass


def elect_teacher(recent, rule="best", rng=None):
    """Index of the teacher.

    ``recent`` holds each member's recent mean return, None for members with no
    finished episode (never eligible under ``best``). Ties go to the lowest index.
    """
    if rule == "random":
        return int(rng.integers(0, len(recent)))
    if rule != "best":
        raise ValueError(f"unknown teacher rule {rule!r}")
    scores = [-np.inf if r is None else r for r in recent]
    if all(r is None for r in recent):
        raise NoEligibleTeacher("no member has a recorded episodic return yet")
    return int(np.argmax(scores))  # argmax returns the first maximum


def gaussian_kl(mu_p, log_std_p, mu_q, log_std_q):
    """KL(p || q) between diagonal Gaussians, summed over the last axis."""
    # the variance ratio is formed from the log-std difference so KL(p||p) is exactly 0
    d = log_std_q - log_std_p
    per_dim = d + 0.5 * (np.exp(-2.0 * d) + (mu_p - mu_q) ** 2 * np.exp(-2.0 * log_std_q)) - 0.5
    return per_dim.sum(axis=-1)


def graph_gaussian_kl(g, mu_t, log_std_t, mu_s, log_std_s):
    """Graph version of :func:`gaussian_kl` with teacher constants and student nodes."""
    d = log_std_s - g.const(log_std_t)
    diff = g.const(mu_t) - mu_s
    spread = g.exp(d * -2.0) + g.square(diff) * g.exp(log_std_s * -2.0)
    per_dim = d + spread * 0.5 - 0.5
    return g.sum(per_dim, axis=-1)


def _policy_kl_graph(student, mu_t, ls_t, obs):
    g = Graph()
    leaves = student.net.leaves(g)
    out = student.net.forward(g, g.const(obs), leaves)
    a = student.act_dim
    mu_s = g.cols(out, 0, a)
    ls_s = g.clip(g.cols(out, a, 2 * a), LOG_STD_MIN, LOG_STD_MAX)
    kl = g.mean(graph_gaussian_kl(g, mu_t, ls_t, mu_s, ls_s))
    return g, kl, leaves


def policy_kl(teacher, student, obs):
    mu_t, ls_t = teacher.dist(obs)
    mu_s, ls_s = student.dist(obs)
    return float(gaussian_kl(mu_t, ls_t, mu_s, ls_s).mean())


def distill_policy(student, teacher, buffer, steps, rng, batch_size=128, lr=3e-4, source=None, opt=None):
    """Adam steps on the student policy toward the teacher (forward KL, pre-squash).

    Returns (initial KL, final KL): batch KL before the first step and after
    the last one, each measured on that step's batch.
    """
    opt = opt or AdamState.like(student.net.flat, lr=lr, name="distill_policy")
    first = last = None
    for i in range(steps):
        obs = buffer.obs[buffer.indices(batch_size, rng, source=source)]
        mu_t, ls_t = teacher.dist(obs)
        try:
            g, kl, leaves = _policy_kl_graph(student, mu_t, ls_t, obs)
        except NonFiniteError as exc:
            raise NonFiniteError(
                "distill_policy", f"{exc}; states min={obs.min():.4g} max={obs.max():.4g}"
            ) from exc
        if i == 0:
            first = float(kl.value)
        g.backward(kl)
        opt.apply(student.net.flat, student.net.flat_grad(leaves))
        if i == steps - 1:
            last = policy_kl(teacher, student, obs)
    return first, last


def critic_mse(teacher_net, student_net, x):
    return float(np.mean((teacher_net(x) - student_net(x)) ** 2))


def distill_critic(student_net, teacher_net, buffer, steps, rng, batch_size=128, lr=3e-4, source=None, opt=None):
    """Adam steps regressing each student critic onto the matching teacher critic.

    ``student_net``/``teacher_net`` are critic stacks (twin critics along the
    leading axis). Target critics are not involved. Returns (initial, final) MSE.
    """
    opt = opt or AdamState.like(student_net.flat, lr=lr, name="distill_critic")
    first = last = None
    for i in range(steps):
        idx = buffer.indices(batch_size, rng, source=source)
        x = np.concatenate([buffer.obs[idx], buffer.act[idx]], axis=-1)
        y = teacher_net(x)
        g = Graph()
        leaves = student_net.leaves(g)
        try:
            q = student_net.forward(g, g.const(x), leaves)
            mse = g.mean(g.square(q - g.const(y)), axis=tuple(range(q.value.ndim - 2, q.value.ndim)))
            loss = g.sum(mse)
        except NonFiniteError as exc:
            raise NonFiniteError("distill_critic", f"{exc}; inputs min={x.min():.4g} max={x.max():.4g}") from exc
        if i == 0:
            first = float(mse.value.mean())
        g.backward(loss)
        opt.apply(student_net.flat, student_net.flat_grad(leaves))
        if i == steps - 1:
            last = critic_mse(teacher_net, student_net, x)
    return first, last


def hardcopy(student, teacher):
    """Overwrite the student's policy, critics and target critics with the teacher's.

    The student's RL optimizer moments are reset. Copying a member onto itself
    is a no-op.
    """
    if student is teacher or (student.learner is teacher.learner and student.k == teacher.k):
        return
    if (
        student.policy.net.widths != teacher.policy.net.widths
        or student.critic_net.widths != teacher.critic_net.widths
    ):
        raise ValueError("hardcopy needs identical architectures")
    student.policy.net.flat[...] = teacher.policy.net.flat
    student.critic_net.flat[...] = teacher.critic_net.flat
    student.critic_target.flat[...] = teacher.critic_target.flat
    student.reset_optimizers()


def distill_phase(state, config, rng=None):
    """Elect a teacher and transfer it into every other member."""
    rng = rng or state.rngs["distill"]
    recent = state.recent_returns()
    report = {"teacher": None, "recent": recent, "students": []}
    if config.mode == "none" or state.k == 1:
        return report
    teacher_k = elect_teacher(recent, config.teacher_rule, rng)
    teacher = state.members[teacher_k]
    report["teacher"] = teacher_k
    source = teacher_k if config.teacher_states_only else None
    for student in state.members:
        if student.k == teacher_k:
            continue
        entry = {"student": student.k}
        if config.mode == "hardcopy":
            hardcopy(student, teacher)
        else:
            kl0, kl1 = distill_policy(
                student.policy, teacher.policy, state.buffer, config.steps, rng, config.batch_size, config.lr, source
            )
            mse0, mse1 = distill_critic(
                student.critic_net, teacher.critic_net, state.buffer, config.steps, rng, config.batch_size, config.lr, source
            )
            entry.update(kl_initial=kl0, kl_final=kl1, mse_initial=mse0, mse_final=mse1)
            state.grad_steps += config.steps
        if config.share_alpha:
            state.learner.log_alpha[student.k] = state.learner.log_alpha[teacher_k]
        report["students"].append(entry)
    return report
