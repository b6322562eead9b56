import numpy as np

from piekd import envs
from piekd.replay import ReplayBuffer

# criterion number -> (passed, detail), filled in by test_acceptance.py
ACCEPTANCE = {}


def central_diff(f, x, h=1e-5):
    """Central finite differences of scalar ``f`` w.r.t. every entry of ``x`` (in place)."""
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        fp = f()
        x[idx] = old - h
        fm = f()
        x[idx] = old
        grad[idx] = (fp - fm) / (2 * h)
    return grad


def max_rel_err(a, b):
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12))


def fill_buffer(n_episodes=5, seed=0, env_id="pendulum"):
    """Buffer of uniformly random-action pendulum episodes."""
    env = envs.make(env_id)
    spec = env.spec
    r = np.random.default_rng(seed)
    buf = ReplayBuffer(spec.obs_dim, spec.act_dim, 100_000, spec.low, spec.high)
    for i in range(n_episodes):
        traj = envs.rollout(env, lambda o: r.uniform(spec.low, spec.high), r)
        buf.append(traj, source=i % 3)
    return buf
