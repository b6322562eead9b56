"""Shared FIFO experience buffer."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

DUMP_MAGIC = b"PIEKDRB1"
_HEADER = struct.Struct("<8sIIQ")  # magic, obs_dim, act_dim, count


@dataclass
class Batch:
    obs: np.ndarray
    act: np.ndarray
    rew: np.ndarray
    next_obs: np.ndarray
    done: np.ndarray

    def __len__(self):
        return self.rew.shape[-1]


class EmptyBufferError(RuntimeError):
    pass


class ReplayBuffer:
    """Ring buffer of (s, a, r, s', done) rows.

    Storage is columnar (one preallocated array per field). ``size`` saturates
    at ``capacity`` and each further insert overwrites the oldest row.
    """

    def __init__(self, obs_dim, act_dim, capacity=1_000_000, low=None, high=None):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.obs_dim = obs_dim
        self.act_dim = act_dim
        self.capacity = int(capacity)
        self.low = None if low is None else np.asarray(low, dtype=np.float64)
        self.high = None if high is None else np.asarray(high, dtype=np.float64)
        self.obs = np.zeros((self.capacity, obs_dim))
        self.act = np.zeros((self.capacity, act_dim))
        self.rew = np.zeros(self.capacity)
        self.next_obs = np.zeros((self.capacity, obs_dim))
        self.done = np.zeros(self.capacity)
        # id of the member that generated each row
        self.source = np.full(self.capacity, -1, dtype=np.int64)
        self.cursor = 0
        self.size = 0
        self.inserts = 0

    def __len__(self):
        return self.size

    def _validate(self, obs, act, rew, next_obs):
        for name, arr in (("obs", obs), ("act", act), ("rew", rew), ("next_obs", next_obs)):
            if not np.isfinite(arr).all():
                raise ValueError(f"trajectory field {name} contains non-finite values")
        if self.low is not None and ((act < self.low) | (act > self.high)).any():
            raise ValueError("trajectory contains out-of-box actions")

    def append(self, traj, source=-1):
        """Insert every transition of ``traj`` in order."""
        obs = np.asarray(traj.obs, dtype=np.float64).reshape(-1, self.obs_dim)
        act = np.asarray(traj.act, dtype=np.float64).reshape(-1, self.act_dim)
        rew = np.asarray(traj.rew, dtype=np.float64).reshape(-1)
        nxt = np.asarray(traj.next_obs, dtype=np.float64).reshape(-1, self.obs_dim)
        done = np.asarray(traj.done, dtype=np.float64).reshape(-1)
        self._validate(obs, act, rew, nxt)
        n = len(rew)
        if n > self.capacity:
            cut = n - self.capacity
            obs, act, rew, nxt, done = obs[cut:], act[cut:], rew[cut:], nxt[cut:], done[cut:]
            self.cursor = (self.cursor + cut) % self.capacity
            self.inserts += cut
            n = self.capacity
        idx = (self.cursor + np.arange(n)) % self.capacity
        self.obs[idx] = obs
        self.act[idx] = act
        self.rew[idx] = rew
        self.next_obs[idx] = nxt
        self.done[idx] = done
        self.source[idx] = source
        self.cursor = (self.cursor + n) % self.capacity
        self.size = min(self.size + n, self.capacity)
        self.inserts += n

    def indices(self, n, rng, shape=None, source=None):
        """Uniform row indices; ``source`` restricts to rows generated by that member."""
        if self.size == 0:
            raise EmptyBufferError("cannot sample from an empty replay buffer")
        size = n if shape is None else shape
        if source is None:
            return rng.integers(0, self.size, size=size)
        rows = np.flatnonzero(self.source[: self.size] == source)
        if rows.size == 0:
            raise EmptyBufferError(f"no transitions from member {source}")
        return rows[rng.integers(0, rows.size, size=size)]

    def gather(self, idx):
        return Batch(self.obs[idx], self.act[idx], self.rew[idx], self.next_obs[idx], self.done[idx])

    def sample(self, n, rng, shape=None):
        """Uniform draws with replacement. ``shape`` overrides ``n`` for stacked batches."""
        return self.gather(self.indices(n, rng, shape))

    def ordered(self):
        """Stored rows oldest-first."""
        if self.size < self.capacity:
            idx = np.arange(self.size)
        else:
            idx = (self.cursor + np.arange(self.capacity)) % self.capacity
        return self.gather(idx)

    # --- binary dump ---------------------------------------------------------

    def dump(self, path):
        """Write header (magic, dims, count) then little-endian f64 rows s|a|r|s'|done."""
        b = self.ordered()
        rows = np.concatenate([b.obs, b.act, b.rew[:, None], b.next_obs, b.done[:, None]], axis=1)
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(DUMP_MAGIC, self.obs_dim, self.act_dim, len(rows)))
            fh.write(rows.astype("<f8").tobytes())

    @classmethod
    def load_dump(cls, path, capacity=None):
        with open(path, "rb") as fh:
            magic, obs_dim, act_dim, count = _HEADER.unpack(fh.read(_HEADER.size))
            if magic != DUMP_MAGIC:
                raise ValueError(f"{path}: not a replay dump")
            width = 2 * obs_dim + act_dim + 2
            rows = np.frombuffer(fh.read(), dtype="<f8").reshape(count, width)
        buf = cls(obs_dim, act_dim, capacity=capacity or max(count, 1))
        o = obs_dim
        a = o + act_dim
        buf.append(
            Batch(rows[:, :o], rows[:, o:a], rows[:, a], rows[:, a + 1 : a + 1 + obs_dim], rows[:, -1])
        )
        return buf

    # --- checkpoint helpers ----------------------------------------------------

    def state_dict(self):
        n = self.size
        return {
            "obs": self.obs[:n],
            "act": self.act[:n],
            "rew": self.rew[:n],
            "next_obs": self.next_obs[:n],
            "done": self.done[:n],
            "source": self.source[:n],
            "meta": np.array([self.capacity, self.cursor, self.size, self.inserts], dtype=np.int64),
        }

    def load_state_dict(self, d):
        capacity, cursor, size, inserts = (int(x) for x in d["meta"])
        if capacity != self.capacity:
            raise ValueError(f"checkpoint buffer capacity {capacity} != {self.capacity}")
        for name in ("obs", "act", "rew", "next_obs", "done", "source"):
            getattr(self, name)[:size] = d[name]
        self.cursor, self.size, self.inserts = cursor, size, inserts
