"""Soft actor-critic over a stack of identically shaped members.

A :class:`SacLearner` stores the policies of K members in one ``(K, N)``
parameter buffer and their twin critics in one ``(K, 2, N)`` buffer, so a
single autodiff pass updates all members. Every update accepts an ``active``
mask; inactive members are left bitwise untouched.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numcore import AdamState, Graph, Mlp, NonFiniteError, expand_mask, init_uniform
from . import kernels

LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
_LOG2 = math.log(2.0)


@dataclass
class SacConfig:
    lr: float = 3e-4
    batch_size: int = 128
    gamma: float = 0.99
    tau: float = 0.005
    hidden: tuple = (64, 64)
    init_alpha: float = 1.0
    learn_alpha: bool = True


class SquashedGaussianPolicy:
    """Tanh-squashed diagonal Gaussian rescaled to the action box."""

    def __init__(self, net, low, high):
        self.net = net
        self.low = np.asarray(low, dtype=np.float64)
        self.high = np.asarray(high, dtype=np.float64)
        self.scale = 0.5 * (self.high - self.low)
        self.center = 0.5 * (self.high + self.low)
        self.log_scale_sum = float(np.log(self.scale).sum())
        self.act_dim = len(self.low)

    def dist(self, obs):
        """(mean, clamped log-std) of the pre-squash Gaussian."""
        out = self.net(obs)
        a = self.act_dim
        return out[..., :a], np.clip(out[..., a:], LOG_STD_MIN, LOG_STD_MAX)

    def squash(self, u):
        return self.center + self.scale * np.tanh(u)

    def sample(self, obs, rng=None, noise=None):
        mu, log_std = self.dist(obs)
        if noise is None:
            noise = rng.standard_normal(mu.shape)
        u = mu + np.exp(log_std) * noise
        return self.squash(u), log_prob(u, noise, log_std, self.log_scale_sum)

    def act(self, obs, rng=None, deterministic=False):
        mu, log_std = self.dist(obs)
        if deterministic:
            a = self.squash(mu)
        else:
            a = self.squash(mu + np.exp(log_std) * rng.standard_normal(mu.shape))
        # tanh can round to exactly +-1 in float64; keep actions inside the box
        return np.clip(a, self.low, self.high)

    def graph_sample(self, g, obs, noise, leaves=None):
        """Reparameterized sample on graph ``g``; returns (action, log-prob, leaves)."""
        if leaves is None:
            leaves = self.net.leaves(g)
        out = self.net.forward(g, g.const(obs), leaves)
        node = squashed_sample(g, out, noise, self.scale, self.center, self.log_scale_sum)
        a = self.act_dim
        return g.cols(node, 0, a), g.index(node, (..., a)), leaves


def squashed_sample(g, out, noise, scale, center, log_scale_sum):
    """One graph node for the reparameterized squashed sample.

    ``out`` holds (mean, raw log-std) along the last axis. The node value is
    the action with the log-prob appended as one extra column.
    """
    ov = out.value
    a = ov.shape[-1] // 2
    mu, raw = ov[..., :a], ov[..., a:]
    log_std = np.clip(raw, LOG_STD_MIN, LOG_STD_MAX)
    std = np.exp(log_std)
    u = mu + std * noise
    t = np.tanh(u)
    logp = log_prob(u, noise, log_std, log_scale_sum)
    value = np.concatenate([center + scale * t, logp[..., None]], axis=-1)
    inside = (raw >= LOG_STD_MIN) & (raw <= LOG_STD_MAX)

    def vjp(grad):
        g_act, g_logp = grad[..., :a], grad[..., a:]
        # d logp / du = 2 tanh(u); d logp / d log_std = -1 on top of the path through u
        gu = g_act * scale * (1.0 - t * t) + g_logp * 2.0 * t
        g_ls = (gu * std * noise - g_logp) * inside
        return (np.concatenate([gu, g_ls], axis=-1),)

    return g.custom("squashed_sample", (out,), value, vjp)


def log_prob(u, noise, log_std, log_scale_sum):
    """Log-density of the squashed, rescaled sample ``center + scale*tanh(u)``."""
    log_det = 2.0 * (_LOG2 - u - np.logaddexp(0.0, -2.0 * u))
    per_dim = -0.5 * noise * noise - _HALF_LOG_2PI - log_std - log_det
    return per_dim.sum(axis=-1) - log_scale_sum


def sample_action(policy, state, rng):
    """Draw (action, log-prob) from ``policy`` at ``state``."""
    return policy.sample(state, rng)


class Critic:
    """Soft Q network(s) plus the Polyak-averaged target copy."""

    def __init__(self, net, target):
        self.net = net
        self.target = target

    def q(self, obs, act, target=False):
        net = self.target if target else self.net
        return net(np.concatenate([obs, act], axis=-1))


class SacLearner:
    """K SAC members with stacked parameters and per-member optimizer state."""

    def __init__(self, spec, config, rngs):
        self.spec = spec
        self.config = config
        self.k = len(rngs)
        k = self.k
        h = tuple(config.hidden)
        pol_widths = (spec.obs_dim,) + h + (2 * spec.act_dim,)
        q_widths = (spec.obs_dim + spec.act_dim,) + h + (1,)
        # each member owns a generator; policy first, then its two critics
        pol_rngs, q_rngs = [], []
        for r in rngs:
            pol_rngs.append(r)
        for r in rngs:
            q_rngs.extend([r, r])
        self.policy_net = init_uniform(pol_widths, pol_rngs, stack=(k,))
        self.q_net = init_uniform(q_widths, q_rngs, stack=(k, 2))
        self.q_target = self.q_net.copy()
        self.policy = SquashedGaussianPolicy(self.policy_net, spec.low, spec.high)
        self.critic = Critic(self.q_net, self.q_target)
        self.log_alpha = np.full((k, 1), math.log(config.init_alpha))
        self.target_entropy = -float(spec.act_dim)
        self.pol_opt = AdamState.like(self.policy_net.flat, lr=config.lr, name="policy")
        self.q_opt = AdamState.like(self.q_net.flat, lr=config.lr, name="critic")
        self.alpha_opt = AdamState.like(self.log_alpha, lr=config.lr, name="log_alpha")
        self._member_policies = [
            SquashedGaussianPolicy(self.policy_net[i], spec.low, spec.high) for i in range(k)
        ]
        self.update_count = np.zeros(k, dtype=np.int64)

    @property
    def alpha(self):
        return np.exp(self.log_alpha[:, 0])

    def member_policy(self, k):
        return self._member_policies[k]

    def member_critics(self, k):
        return tuple(Critic(self.q_net[k, i], self.q_target[k, i]) for i in range(2))

    def sample_batch(self, buffer, rng):
        return buffer.sample(None, rng, shape=(self.k, self.config.batch_size))

    # state for checkpoints -------------------------------------------------------

    def state_dict(self):
        d = {
            "policy": self.policy_net.flat,
            "q": self.q_net.flat,
            "q_target": self.q_target.flat,
            "log_alpha": self.log_alpha,
            "update_count": self.update_count,
        }
        for name, opt in (("pol_opt", self.pol_opt), ("q_opt", self.q_opt), ("alpha_opt", self.alpha_opt)):
            for key, val in opt.state_dict().items():
                d[f"{name}.{key}"] = val
        return d

    def load_state_dict(self, d):
        self.policy_net.flat[...] = d["policy"]
        self.q_net.flat[...] = d["q"]
        self.q_target.flat[...] = d["q_target"]
        self.log_alpha[...] = d["log_alpha"]
        self.update_count[...] = d["update_count"]
        for name, opt in (("pol_opt", self.pol_opt), ("q_opt", self.q_opt), ("alpha_opt", self.alpha_opt)):
            opt.load_state_dict({key: d[f"{name}.{key}"] for key in ("m", "v", "step")})


def _batch_stats(batch):
    parts = []
    for name in ("obs", "act", "rew", "next_obs"):
        arr = getattr(batch, name)
        finite = np.isfinite(arr)
        parts.append(
            f"{name}: finite={finite.mean():.3f} min={np.nanmin(arr):.4g} max={np.nanmax(arr):.4g}"
        )
    return "; ".join(parts)


def _guard(where, batch, fn):
    try:
        return fn()
    except NonFiniteError as exc:
        raise NonFiniteError(where, f"{exc}; batch {_batch_stats(batch)}") from exc


def _q_input(obs, act):
    # (K, B, d) -> (K, 1, B, d) so both critics of a member share the batch
    x = np.concatenate([obs, act], axis=-1)
    return x[:, None]


def update_critic(learner, batch, rng, gamma=None, alpha=None, active=None):
    """One Adam step on both critics of every active member. Returns (K,) losses."""
    gamma = learner.config.gamma if gamma is None else gamma
    alpha = learner.alpha if alpha is None else np.broadcast_to(np.asarray(alpha, float), (learner.k,))

    def run():
        pol = learner.policy
        next_act, next_logp = pol.sample(batch.next_obs, rng)
        qt = learner.q_target(_q_input(batch.next_obs, next_act))[..., 0]  # (K, 2, B)
        soft_v = qt.min(axis=1) - alpha[:, None] * next_logp
        y = batch.rew + gamma * (1.0 - batch.done) * soft_v  # (K, B)
        g = Graph()
        leaves = learner.q_net.leaves(g)
        q = learner.q_net.forward(g, g.const(_q_input(batch.obs, batch.act)), leaves)
        err = q - g.const(y[:, None, :, None])
        per_member = g.mean(g.square(err), axis=(1, 2, 3))
        g.backward(g.sum(per_member))
        learner.q_opt.apply(learner.q_net.flat, learner.q_net.flat_grad(leaves), active)
        return per_member.value

    return _guard("update_critic", batch, run)


def policy_loss(learner, obs, noise, alpha):
    """Graph of the per-member policy loss; returns (graph, (K,) loss node, logp node, leaves)."""
    g = Graph()
    action, logp, leaves = learner.policy.graph_sample(g, obs, noise)
    q_leaves = learner.q_net.leaves(g, requires_grad=False)
    x = g.concat([g.const(obs), action], axis=-1)
    x = g.reshape(x, (x.shape[0], 1) + x.shape[1:])
    q = learner.q_net.forward(g, x, q_leaves)  # (K, 2, B, 1)
    q_min = g.minimum(g.index(q, (slice(None), 0, slice(None), 0)), g.index(q, (slice(None), 1, slice(None), 0)))
    per_member = g.mean(logp * g.const(alpha[:, None]) - q_min, axis=1)
    return g, per_member, logp, leaves


def update_policy(learner, batch, rng, alpha=None, active=None):
    """One Adam step on every active policy. Returns ((K,) losses, (K, B) log-probs)."""
    alpha = learner.alpha if alpha is None else np.broadcast_to(np.asarray(alpha, float), (learner.k,))

    def run():
        noise = rng.standard_normal(batch.obs.shape[:-1] + (learner.policy.act_dim,))
        g, per_member, logp, leaves = policy_loss(learner, batch.obs, noise, alpha)
        g.backward(g.sum(per_member))
        learner.pol_opt.apply(learner.policy_net.flat, learner.policy_net.flat_grad(leaves), active)
        return per_member.value, logp.value

    return _guard("update_policy", batch, run)


def temperature_grad(log_alpha, logp, target_entropy):
    """d/d(log alpha) of mean(-alpha * (logp + target_entropy)), per member."""
    return -np.exp(log_alpha[:, 0]) * (logp.mean(axis=-1) + target_entropy)


def update_temperature(learner, logp, active=None):
    """One Adam step on log(alpha) per active member; returns the new alphas."""
    if learner.config.learn_alpha:
        grad = temperature_grad(learner.log_alpha, logp, learner.target_entropy)[:, None]
        learner.alpha_opt.apply(learner.log_alpha, grad, active)
    return learner.alpha


def polyak_update(online, target, rho, active=None):
    """target <- (1 - rho) * target + rho * online, for the active leading rows."""
    if not 0.0 < rho <= 1.0:
        raise ValueError(f"Polyak coefficient must lie in (0, 1], got {rho}")
    lead = online.shape[:1] if online.ndim > 1 else ()
    rows = int(np.prod(lead)) if lead else 1
    act = expand_mask(active, lead).reshape(rows) if lead else np.ones(1, dtype=np.bool_)
    kernels.polyak_update(target.reshape(rows, -1), online.reshape(rows, -1), float(rho), act)


def sac_update(learner, batch, rng, active=None):
    """One full policy update: critic, policy, temperature, then target tracking."""
    q_loss = update_critic(learner, batch, rng, active=active)
    pi_loss, logp = update_policy(learner, batch, rng, active=active)
    alpha = update_temperature(learner, logp, active)
    polyak_update(learner.q_net.flat, learner.q_target.flat, learner.config.tau, active)
    if active is None:
        learner.update_count += 1
    else:
        learner.update_count += np.asarray(active, dtype=np.int64)
    return q_loss, pi_loss, alpha
