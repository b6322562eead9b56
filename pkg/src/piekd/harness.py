"""Experiment runner: configs, arm presets, evaluation, checkpoints and seed sweeps."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import bootstrap

from . import envs
from .distill import DistillConfig, distill_phase, elect_teacher
from .ensemble import init_ensemble, joint_training_round, maybe_distill, run_updates
from .sac import SacConfig

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
CHECKPOINT_VERSION = 1

DISTILL_MODES = ("distill", "hardcopy", "none", "extra")


@dataclass
class TrainerConfig:
    arm: str = "piekd"
    env: str = "pendulum"
    total_steps: int = 60_000
    k: int = 3
    interval: int = 2000  # I, environment steps between distillation phases
    window: int = 10  # M, episodes in the recent-return average
    distill_mode: str = "distill"
    teacher_rule: str = "best"
    distill_steps: int = 200
    distill_batch: int = 128
    distill_lr: float = 3e-4
    teacher_states_only: bool = False
    share_alpha: bool = False
    # ensemble size whose distillation budget the "extra" arms match
    extra_reference_k: int = 3
    lr: float = 3e-4
    batch_size: int = 128
    gamma: float = 0.99
    tau: float = 0.005
    hidden: list = field(default_factory=lambda: [64, 64])
    init_alpha: float = 1.0
    learn_alpha: bool = True
    buffer_capacity: int = 1_000_000
    eval_interval: int = 2000
    eval_episodes: int = 10
    seed: int = 0

    @property
    def horizon(self):
        return envs.make(self.env).spec.horizon

    def validate(self):
        if self.env not in envs.ENVS:
            raise ValueError(f"unknown env {self.env!r}; choose from {sorted(envs.ENVS)}")
        if self.distill_mode not in DISTILL_MODES:
            raise ValueError(f"distill_mode must be one of {DISTILL_MODES}")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if self.total_steps < self.interval:
            raise ValueError("total_steps must be >= interval")
        T = self.horizon
        if self.eval_interval % T:
            raise ValueError(f"eval_interval {self.eval_interval} must be a multiple of the episode length {T}")
        if self.eval_episodes < 1:
            raise ValueError("eval_episodes must be >= 1")
        self.distill_config()  # field checks
        return self

    def sac_config(self):
        return SacConfig(
            lr=self.lr,
            batch_size=self.batch_size,
            gamma=self.gamma,
            tau=self.tau,
            hidden=tuple(self.hidden),
            init_alpha=self.init_alpha,
            learn_alpha=self.learn_alpha,
        )

    def distill_config(self):
        mode = self.distill_mode if self.distill_mode in ("distill", "hardcopy") else "none"
        return DistillConfig(
            steps=self.distill_steps,
            batch_size=self.distill_batch,
            mode=mode,
            teacher_rule=self.teacher_rule,
            lr=self.distill_lr,
            teacher_states_only=self.teacher_states_only,
            share_alpha=self.share_alpha,
        )

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)


ARMS = {
    "vanilla": dict(k=1, distill_mode="none"),
    "ensemble": dict(k=3, distill_mode="none"),
    "piekd": dict(k=3, distill_mode="distill", teacher_rule="best"),
    "piekd-hardcopy": dict(k=3, distill_mode="hardcopy", teacher_rule="best"),
    "piekd-random-teacher": dict(k=3, distill_mode="distill", teacher_rule="random"),
    "vanilla-extra": dict(k=1, distill_mode="extra"),
    "ensemble-extra": dict(k=3, distill_mode="extra", teacher_rule="best"),
}

PRESETS = {
    "desk": {},
    # the published protocol: 1M steps, I=5000, evaluate 20 episodes every 10k steps
    "paper": dict(
        total_steps=1_000_000,
        interval=5000,
        eval_interval=10_000,
        eval_episodes=20,
        hidden=[256, 256],
        batch_size=256,
        distill_batch=256,
    ),
}


def arm_config(arm, preset="desk", **overrides):
    if arm not in ARMS:
        raise ValueError(f"unknown arm {arm!r}; valid arms: {', '.join(ARMS)}")
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; valid presets: {', '.join(PRESETS)}")
    d = TrainerConfig().to_dict()
    d.update(PRESETS[preset])
    d.update(ARMS[arm])
    d["arm"] = arm
    d.update(overrides)
    return TrainerConfig.from_dict(d).validate()


def load_config(path, arm=None, **overrides):
    """Arm preset, then the JSON file, then explicit overrides."""
    with open(path) as fh:
        file_cfg = json.load(fh)
    if not isinstance(file_cfg, dict):
        raise ValueError(f"{path}: config must be a JSON object")
    TrainerConfig.from_dict({k: v for k, v in file_cfg.items()})  # reject unknown keys early
    arm = arm or file_cfg.get("arm", "piekd")
    merged = {k: v for k, v in file_cfg.items() if k != "arm"}
    merged.update(overrides)
    return arm_config(arm, **merged)


# --- evaluation --------------------------------------------------------------------


def evaluate(state, env_id, n, rng):
    """Deterministic-action returns: per-member means plus ensemble best and worst.

    All members run their ``n`` episodes in lockstep on fresh environments;
    the replay buffer and return windows are not touched.
    """
    if n < 1:
        raise ValueError("need at least one evaluation episode")
    k = state.k
    pool = [[envs.make(env_id) for _ in range(n)] for _ in range(k)]
    obs = np.stack([np.stack([e.reset(rng) for e in row]) for row in pool])  # (K, n, obs)
    returns = np.zeros((k, n))
    policy = state.learner.policy
    for _ in range(pool[0][0].spec.horizon):
        mu, _ = policy.dist(obs)
        act = np.clip(policy.squash(mu), policy.low, policy.high)
        for i, row in enumerate(pool):
            for j, e in enumerate(row):
                res = e.step(act[i, j])
                returns[i, j] += res.reward
                obs[i, j] = res.obs
    means = returns.mean(axis=1)
    return {"member_means": means.tolist(), "best": float(means.max()), "worst": float(means.min())}


# --- training ----------------------------------------------------------------------


class MetricsWriter:
    def __init__(self, path, append=False):
        self.path = Path(path)
        self.fh = open(self.path, "a" if append else "w")

    def write(self, record):
        self.fh.write(json.dumps(record, sort_keys=True) + "\n")

    def close(self):
        self.fh.close()


def _extra_phase(cfg):
    """Update-matched baseline: plain SAC updates in place of distillation."""

    def phase(state):
        n = (cfg.extra_reference_k - 1) * cfg.distill_steps
        if state.k == 1:
            if n:
                run_updates(state, n)
            return {"teacher": None, "recent": state.recent_returns(), "extra_updates": [n]}
        # the K-1 members that would have been students each get distill_steps updates
        skip = elect_teacher(state.recent_returns(), cfg.teacher_rule, state.rngs["distill"])
        active = np.ones(state.k, dtype=bool)
        active[skip] = False
        run_updates(state, cfg.distill_steps, active)
        per = [0 if i == skip else cfg.distill_steps for i in range(state.k)]
        return {"teacher": skip, "recent": state.recent_returns(), "extra_updates": per}

    return phase


def make_phase(cfg):
    if cfg.distill_mode == "extra":
        return _extra_phase(cfg)
    if cfg.distill_mode == "none":
        return None
    dcfg = cfg.distill_config()
    return lambda state: distill_phase(state, dcfg)


class Trainer:
    """Runs one arm for one seed, writing ``metrics.jsonl`` into ``out_dir``."""

    def __init__(self, cfg, out_dir=None, state=None, eval_count=0, append=False):
        self.cfg = cfg.validate()
        self.env = envs.make(cfg.env)
        self.state = state or init_ensemble(
            self.env.spec,
            cfg.k,
            cfg.seed,
            cfg.sac_config(),
            interval=cfg.interval,
            window=cfg.window,
            capacity=cfg.buffer_capacity,
        )
        self.phase = make_phase(cfg)
        self.eval_count = eval_count
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.writer = None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            self.writer = MetricsWriter(self.out_dir / "metrics.jsonl", append=append)
            if not append:
                self.writer.write(
                    {"type": "header", "schema": SCHEMA_VERSION, "env": cfg.env, "k": cfg.k, "seed": cfg.seed}
                )
        self.records = []

    def _emit(self, record):
        self.records.append(record)
        if self.writer is not None:
            self.writer.write(record)

    def episode(self):
        st = self.state
        info = joint_training_round(st, self.env)
        self._emit(
            {"type": "episode", "step": st.total_steps, "episode": st.episodes, "recent": st.recent_returns(), **info}
        )
        report = maybe_distill(st, self.phase)
        if report is not None:
            self._emit(
                {
                    "type": "phase",
                    "step": st.total_steps,
                    "phase": st.phases,
                    "window_grad_steps": st.window_grad_steps[-1],
                    **report,
                }
            )
        if st.total_steps % self.cfg.eval_interval == 0:
            self.eval_count += 1
            ev = evaluate(st, self.cfg.env, self.cfg.eval_episodes, st.rngs["eval"])
            self._emit({"type": "eval", "step": st.total_steps, "index": self.eval_count, **ev})
            log.info(
                "seed %d step %d best %.1f worst %.1f", self.cfg.seed, st.total_steps, ev["best"], ev["worst"]
            )

    def run(self, until=None):
        until = self.cfg.total_steps if until is None else min(until, self.cfg.total_steps)
        while self.state.total_steps < until:
            self.episode()
        return self

    def close(self):
        if self.writer is not None:
            self.writer.close()
            self.writer = None

    # --- checkpoints ---------------------------------------------------------------

    def save(self, path):
        st = self.state
        k, m = st.k, self.cfg.window
        windows = np.full((k, m), np.nan)
        counts = np.zeros(k, dtype=np.int64)
        for i, mem in enumerate(st.members):
            vals = list(mem.returns)
            windows[i, : len(vals)] = vals
            counts[i] = len(vals)
        arrays = {
            "version": np.array(CHECKPOINT_VERSION),
            "config": np.array(json.dumps(self.cfg.to_dict(), sort_keys=True)),
            "rng_states": np.array(json.dumps({n: g.bit_generator.state for n, g in st.rngs.items()})),
            "counters": np.array(
                [st.t_acc, st.total_steps, st.episodes, st.phases, st.grad_steps, st.window_start, self.eval_count],
                dtype=np.int64,
            ),
            "window_grad_steps": np.array(st.window_grad_steps, dtype=np.int64),
            "returns": windows,
            "return_counts": counts,
        }
        arrays.update({f"learner.{key}": val for key, val in st.learner.state_dict().items()})
        arrays.update({f"buffer.{key}": val for key, val in st.buffer.state_dict().items()})
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    @classmethod
    def load(cls, path, out_dir=None, append=True):
        with np.load(path, allow_pickle=False) as z:
            data = {key: z[key] for key in z.files}
        version = int(data["version"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
        cfg = TrainerConfig.from_dict(json.loads(str(data["config"])))
        t_acc, total, episodes, phases, grad_steps, window_start, eval_count = (int(x) for x in data["counters"])
        trainer = cls(cfg, out_dir, eval_count=eval_count, append=append)
        st = trainer.state
        st.learner.load_state_dict({key[8:]: val for key, val in data.items() if key.startswith("learner.")})
        st.buffer.load_state_dict({key[7:]: val for key, val in data.items() if key.startswith("buffer.")})
        for name, s in json.loads(str(data["rng_states"])).items():
            st.rngs[name].bit_generator.state = s
        for mem, row, n in zip(st.members, data["returns"], data["return_counts"]):
            mem.returns.clear()
            mem.returns.extend(float(x) for x in row[: int(n)])
        st.t_acc, st.total_steps, st.episodes, st.phases = t_acc, total, episodes, phases
        st.grad_steps, st.window_start = grad_steps, window_start
        st.window_grad_steps = [int(x) for x in data["window_grad_steps"]]
        return trainer


def run_arm(cfg, out_dir=None):
    """Train one arm to completion; writes metrics and ``checkpoint.npz`` when ``out_dir`` is set."""
    trainer = Trainer(cfg, out_dir)
    try:
        trainer.run()
        if trainer.out_dir is not None:
            trainer.save(trainer.out_dir / "checkpoint.npz")
            with open(trainer.out_dir / "config.json", "w") as fh:
                json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
    finally:
        trainer.close()
    return trainer


# --- sweeps ------------------------------------------------------------------------


def read_metrics(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh]


def eval_curve(records):
    evals = [r for r in records if r["type"] == "eval"]
    return (
        np.array([r["step"] for r in evals]),
        np.array([r["best"] for r in evals]),
        np.array([r["worst"] for r in evals]),
    )


def bootstrap_ci(values, n_resamples=10_000, level=0.95, seed=0):
    """Mean and percentile-bootstrap CI of the mean."""
    values = np.asarray(values, dtype=np.float64)
    mean = float(values.mean())
    if np.all(values == values[0]):
        return mean, mean, mean
    res = bootstrap(
        (values,),
        np.mean,
        n_resamples=n_resamples,
        confidence_level=level,
        method="percentile",
        random_state=np.random.default_rng(seed),
    )
    return mean, float(res.confidence_interval.low), float(res.confidence_interval.high)


def aggregate(curves):
    """Align per-seed (steps, best, worst) curves and summarize each evaluation point."""
    if len(curves) < 2:
        raise ValueError("aggregation needs at least two seeds")
    n = min(len(c[0]) for c in curves)
    steps = curves[0][0][:n]
    for c in curves:
        if not np.array_equal(c[0][:n], steps):
            raise ValueError("evaluation steps differ between seeds")
    best = np.stack([c[1][:n] for c in curves])
    worst = np.stack([c[2][:n] for c in curves])
    rows = []
    for j, step in enumerate(steps):
        mean, lo, hi = bootstrap_ci(best[:, j], seed=j)
        rows.append(
            {
                "step": int(step),
                "best_mean": mean,
                "worst_mean": float(worst[:, j].mean()),
                "ci_lo": lo,
                "ci_hi": hi,
                "best_median": float(np.median(best[:, j])),
            }
        )
    return rows


def _run_seed(args):
    cfg_dict, out_dir = args
    cfg = TrainerConfig.from_dict(cfg_dict)
    trainer = run_arm(cfg, out_dir)
    return eval_curve(trainer.records)


def sweep(cfg, seeds, out_dir, jobs=1):
    """Run ``cfg`` for each seed and write ``curve.csv`` plus ``summary.json``."""
    seeds = list(seeds)
    if len(seeds) < 2:
        raise ValueError("a sweep needs at least two seeds")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tasks = []
    for s in seeds:
        d = cfg.to_dict()
        d["seed"] = int(s)
        tasks.append((d, str(out_dir / f"seed_{s}")))
    if jobs > 1:
        import multiprocessing as mp

        with mp.get_context("spawn").Pool(jobs) as pool:
            curves = pool.map(_run_seed, tasks)
    else:
        curves = [_run_seed(t) for t in tasks]
    rows = aggregate(curves)
    with open(out_dir / "curve.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "best_mean", "worst_mean", "ci_lo", "ci_hi"])
        for r in rows:
            w.writerow([r["step"], r["best_mean"], r["worst_mean"], r["ci_lo"], r["ci_hi"]])
    summary = {
        "arm": cfg.arm,
        "env": cfg.env,
        "seeds": seeds,
        "points": rows,
        "per_seed_best": {str(s): c[1].tolist() for s, c in zip(seeds, curves)},
    }
    with open(out_dir / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2)
    return summary


def parse_seeds(text):
    """'0..4' -> [0, 1, 2, 3, 4]; '1,5,9' -> [1, 5, 9]."""
    text = text.strip()
    if ".." in text:
        lo, hi = text.split("..", 1)
        return list(range(int(lo), int(hi) + 1))
    return [int(x) for x in text.split(",") if x.strip()]

