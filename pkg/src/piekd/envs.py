"""Built-in deterministic continuous-control tasks with fixed-length episodes."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels


@dataclass(frozen=True)
class MdpSpec:
    obs_dim: int
    act_dim: int
    low: tuple
    high: tuple
    horizon: int
    gamma: float = 0.99

    def __post_init__(self):
        if len(self.low) != self.act_dim or len(self.high) != self.act_dim:
            raise ValueError("action bounds must have one entry per action dimension")
        if any(lo >= hi for lo, hi in zip(self.low, self.high)):
            raise ValueError("action box needs low < high in every dimension")
        if self.horizon < 1:
            raise ValueError("episode length must be >= 1")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("discount must lie in [0, 1]")


@dataclass
class StepResult:
    obs: np.ndarray
    reward: float
    done: bool


class EpisodeOver(RuntimeError):
    pass


class Env:
    spec: MdpSpec

    def __init__(self):
        self.t = 0
        self._done = True

    def reset(self, rng):
        self.t = 0
        self._done = False
        self._reset(rng)
        return self.observe()

    def step(self, action):
        if self._done:
            raise EpisodeOver(f"{type(self).__name__}.step called after episode end; call reset first")
        reward = self._step(np.asarray(action, dtype=np.float64))
        self.t += 1
        self._done = self.t >= self.spec.horizon
        return StepResult(self.observe(), float(reward), self._done)

    # state round-trip, used for replay checks
    def get_state(self):
        raise NotImplementedError

    def set_state(self, state):
        raise NotImplementedError


class Pendulum(Env):
    """Torque-limited pendulum swing-up. Observation (cos th, sin th, thdot)."""

    spec = MdpSpec(obs_dim=3, act_dim=1, low=(-2.0,), high=(2.0,), horizon=200)
    dt = 0.05
    g = 10.0
    m = 1.0
    length = 1.0
    max_speed = 8.0
    max_torque = 2.0

    def _reset(self, rng):
        self.th = float(rng.uniform(-math.pi, math.pi))
        self.thdot = float(rng.uniform(-1.0, 1.0))

    def _step(self, action):
        u = min(max(float(action[0]), -self.max_torque), self.max_torque)
        self.th, self.thdot, reward = kernels.pendulum_step(
            self.th, self.thdot, u, self.dt, self.g, self.m, self.length, self.max_speed
        )
        return reward

    def observe(self):
        return np.array([math.cos(self.th), math.sin(self.th), self.thdot])

    def get_state(self):
        return np.array([self.th, self.thdot, self.t])

    def set_state(self, state):
        self.th, self.thdot = float(state[0]), float(state[1])
        self.t = int(state[2])
        self._done = self.t >= self.spec.horizon


class MountainCar(Env):
    """Continuous mountain car: sparse +100 at the goal, -0.1 a^2 per step.

    Episodes always last the full horizon; once the goal is reached the car is
    held there and keeps collecting the goal bonus only on the first arrival.
    """

    spec = MdpSpec(obs_dim=2, act_dim=1, low=(-1.0,), high=(1.0,), horizon=999)
    min_pos = -1.2
    max_pos = 0.6
    max_speed = 0.07
    goal_pos = 0.45
    power = 0.0015

    def _reset(self, rng):
        self.pos = float(rng.uniform(-0.6, -0.4))
        self.vel = 0.0
        self.reached = False

    def _step(self, action):
        force = min(max(float(action[0]), -1.0), 1.0)
        if self.reached:
            return -0.1 * force * force
        self.pos, self.vel, reward, hit = kernels.mountaincar_step(
            self.pos, self.vel, force, self.power, self.min_pos, self.max_pos, self.max_speed, self.goal_pos
        )
        if hit:
            self.reached = True
            self.vel = 0.0
        return reward

    def observe(self):
        return np.array([self.pos, self.vel])

    def get_state(self):
        return np.array([self.pos, self.vel, float(self.reached), self.t])

    def set_state(self, state):
        self.pos, self.vel = float(state[0]), float(state[1])
        self.reached = bool(state[2])
        self.t = int(state[3])
        self._done = self.t >= self.spec.horizon


class PointMass(Env):
    """2-D point mass with velocity-command actions; reward -||pos - goal||.

    Observation (pos_x, pos_y, goal_x, goal_y). Spawn position lies in a disc of
    radius ``spawn_radius``; the goal is drawn uniformly in the arena box.
    """

    spec = MdpSpec(obs_dim=4, act_dim=2, low=(-1.0, -1.0), high=(1.0, 1.0), horizon=150)
    spawn_radius = 0.5
    arena = 1.0
    dt = 0.05

    def _reset(self, rng):
        r = self.spawn_radius * math.sqrt(rng.uniform())
        ang = rng.uniform(-math.pi, math.pi)
        self.pos = np.array([r * math.cos(ang), r * math.sin(ang)])
        self.goal = rng.uniform(-self.arena, self.arena, size=2)

    def _step(self, action):
        a = np.clip(action, -1.0, 1.0)
        self.pos = np.clip(self.pos + self.dt * a, -self.arena, self.arena)
        return -float(np.linalg.norm(self.pos - self.goal))

    def observe(self):
        return np.concatenate([self.pos, self.goal])

    def get_state(self):
        return np.concatenate([self.pos, self.goal, [self.t]])

    def set_state(self, state):
        self.pos = np.array(state[:2], dtype=np.float64)
        self.goal = np.array(state[2:4], dtype=np.float64)
        self.t = int(state[4])
        self._done = self.t >= self.spec.horizon


ENVS = {"pendulum": Pendulum, "mountaincar": MountainCar, "pointmass": PointMass}


def make(env_id):
    try:
        return ENVS[env_id]()
    except KeyError:
        raise ValueError(f"unknown env {env_id!r}; choose from {sorted(ENVS)}") from None


@dataclass
class Trajectory:
    obs: np.ndarray  # (T, obs_dim)
    act: np.ndarray  # (T, act_dim)
    rew: np.ndarray  # (T,)
    next_obs: np.ndarray  # (T, obs_dim)
    done: np.ndarray  # (T,) float, 1.0 on the last step only

    def __len__(self):
        return len(self.rew)

    @property
    def ret(self):
        return float(self.rew.sum())


def rollout(env, act_fn, rng):
    """Run one full episode; ``act_fn(obs) -> action`` must return an in-box action."""
    spec = env.spec
    T = spec.horizon
    obs = np.empty((T, spec.obs_dim))
    act = np.empty((T, spec.act_dim))
    rew = np.empty(T)
    nxt = np.empty((T, spec.obs_dim))
    done = np.zeros(T)
    o = env.reset(rng)
    for t in range(T):
        a = act_fn(o)
        res = env.step(a)
        obs[t] = o
        act[t] = a
        rew[t] = res.reward
        nxt[t] = res.obs
        o = res.obs
    done[-1] = 1.0
    return Trajectory(obs, act, rew, nxt, done)
