"""Closed-loop generation under time-varying precisions.

With no observation available the output error is replaced by Gaussian
noise of std ``noise_amplitude``; that noise is propagated upward by the
same inference equations used against real targets. Mode A oscillates
sigma_c, mode B oscillates sigma_h, mode C alternates a normal sigma_c with
a very large one.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .model import PRIOR_STEPS, DivergenceError, ModelWeights, NetworkState, Precisions, prior_gain, step_closed_loop
from .prior import GmmPrior, gmm_log_density_grad
from .rng import SIM_STREAM, make_rng

SCHEDULE_KINDS = ("constant", "sinexp", "piecewise")
MODES = ("A", "B", "C")
RECORD_FORMAT_VERSION = 1


@dataclass(frozen=True)
class NoiseSchedule:
    """A strictly positive function of the step index.

    ``constant``: ``a``. ``sinexp``: ``a * exp(b * sin(t / s))``.
    ``piecewise``: ``a`` for ``dwell`` steps, then ``high`` for ``walk``
    steps, repeating.
    """

    kind: str = "constant"
    a: float = 1.0
    b: float = 0.0
    s: float = 1.0
    high: float = 100.0
    dwell: int = 1000
    walk: int = 200

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ValueError(f"schedule kind must be one of {SCHEDULE_KINDS}")
        if not (self.a > 0 and math.isfinite(self.a)):
            raise ValueError(f"schedule base must be positive and finite, got {self.a}")
        if self.kind == "sinexp" and not self.s > 0:
            raise ValueError("sinexp timescale must be positive")
        if self.kind == "piecewise":
            if not self.high > 0 or self.dwell < 1 or self.walk < 0:
                raise ValueError("piecewise schedule needs high > 0, dwell >= 1, walk >= 0")

    @property
    def period(self) -> float | None:
        if self.kind == "sinexp":
            return 2 * math.pi * self.s
        if self.kind == "piecewise":
            return float(self.dwell + self.walk)
        return None


def evaluate_schedule(sched: NoiseSchedule, t) -> float:
    if np.any(np.asarray(t) < 0):
        raise ValueError("schedule evaluated at negative time")
    if sched.kind == "constant":
        value = np.full(np.shape(t), sched.a, dtype=float)
    elif sched.kind == "sinexp":
        value = sched.a * np.exp(sched.b * np.sin(np.asarray(t, dtype=float) / sched.s))
    else:
        phase = np.asarray(t) % (sched.dwell + sched.walk)
        value = np.where(phase < sched.dwell, sched.a, sched.high).astype(float)
    if not np.all((value > 0) & np.isfinite(value)):
        raise ValueError(f"schedule {sched} produced a non-positive value")
    return float(value) if np.ndim(value) == 0 else value


def _schedule(doc) -> NoiseSchedule:
    return doc if isinstance(doc, NoiseSchedule) else NoiseSchedule(**doc)


@dataclass
class SimConfig:
    mode: str = "A"
    steps: int = 20000
    seed: int = 0
    noise_amplitude: float = 1.0
    sigma_x: float = 10.0
    schedule_c: NoiseSchedule = field(default_factory=lambda: NoiseSchedule("sinexp", 0.2, 2.0, 100.0))
    schedule_h: NoiseSchedule = field(default_factory=lambda: NoiseSchedule("constant", 0.1))
    c_init: list | None = None
    record_stride: int = 1
    record_states: bool = False
    tau: float = 5.0
    prior_rate: float = 1.0
    prior_step: str = "implicit"

    def __post_init__(self):
        self.schedule_c = _schedule(self.schedule_c)
        self.schedule_h = _schedule(self.schedule_h)
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.steps < 0 or self.record_stride < 1:
            raise ValueError("steps must be >= 0 and record_stride >= 1")
        if self.noise_amplitude < 0:
            raise ValueError("noise_amplitude must be >= 0")
        if self.prior_step not in PRIOR_STEPS:
            raise ValueError(f"prior_step must be one of {PRIOR_STEPS}")
        if self.mode == "A" and self.schedule_h.kind != "constant":
            raise ValueError("mode A keeps sigma_h constant")
        if self.mode == "B" and self.schedule_c.kind != "constant":
            raise ValueError("mode B keeps sigma_c constant")
        if self.mode == "C" and self.schedule_c.kind != "piecewise":
            raise ValueError("mode C needs a piecewise sigma_c schedule")

    @classmethod
    def from_dict(cls, doc: dict) -> "SimConfig":
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown simulation config keys: {sorted(unknown)}")
        return cls(**doc)

    def to_dict(self) -> dict:
        return asdict(self)

    def precisions(self, t: int) -> Precisions:
        return Precisions(
            sigma_x=self.sigma_x,
            sigma_h=evaluate_schedule(self.schedule_h, t),
            sigma_c=evaluate_schedule(self.schedule_c, t),
            tau=self.tau,
            prior_rate=self.prior_rate,
            prior_step=self.prior_step,
        )


@dataclass
class TrajectoryRecord:
    t: np.ndarray
    x: np.ndarray
    c: np.ndarray
    sigma_c: np.ndarray
    sigma_h: np.ndarray
    h_post: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.t)

    @property
    def p(self) -> int:
        return self.c.shape[1]

    def csv_header(self) -> str:
        m, p = self.x.shape[1], self.c.shape[1]
        cols = ["t"] + [f"x{i}" for i in range(m)] + [f"c{i}" for i in range(p)] + ["sigma_c", "sigma_h"]
        return ",".join(cols)

    def write_csv(self, path) -> None:
        """Comma-separated, LF endings, reals at 17 significant digits."""
        table = np.column_stack([self.t, self.x, self.c, self.sigma_c, self.sigma_h])
        with open(path, "w", newline="\n") as fh:
            fh.write(self.csv_header() + "\n")
            if len(self.t):
                fmt = ["%d"] + ["%.17g"] * (table.shape[1] - 1)
                np.savetxt(fh, table, fmt=fmt, delimiter=",")

    def write_states_csv(self, path) -> None:
        if self.h_post is None:
            raise ValueError("record holds no hidden states")
        n = self.h_post.shape[1]
        with open(path, "w", newline="\n") as fh:
            fh.write(",".join(["t"] + [f"h{i}" for i in range(n)]) + "\n")
            if len(self.t):
                np.savetxt(fh, np.column_stack([self.t, self.h_post]), fmt=["%d"] + ["%.17g"] * n, delimiter=",")

    @classmethod
    def read_csv(cls, path) -> "TrajectoryRecord":
        with open(path) as fh:
            header = fh.readline().strip().split(",")
        xs = [c for c in header if c.startswith("x")]
        cs = [c for c in header if c.startswith("c")]
        expected = ["t"] + xs + cs + ["sigma_c", "sigma_h"]
        if header != expected or not xs or not cs:
            raise ValueError(f"unexpected trajectory header {header}")
        if any(c != f"x{i}" for i, c in enumerate(xs)) or any(c != f"c{i}" for i, c in enumerate(cs)):
            raise ValueError(f"unexpected trajectory header {header}")
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        if data.size == 0:
            data = np.empty((0, len(header)))
        if data.shape[1] != len(header):
            raise ValueError("row width does not match header")
        m, p = len(xs), len(cs)
        return cls(
            t=data[:, 0].astype(np.int64),
            x=data[:, 1 : 1 + m],
            c=data[:, 1 + m : 1 + m + p],
            sigma_c=data[:, 1 + m + p],
            sigma_h=data[:, 2 + m + p],
        )


class DimensionMismatch(ValueError):
    """Weights and configuration disagree on a dimension."""


class SimulationDiverged(DivergenceError):
    """Divergence during a simulation; ``record`` holds the steps completed."""

    def __init__(self, message, step, record):
        super().__init__(message, step)
        self.record = record


def weights_hash(w: ModelWeights) -> str:
    return hashlib.sha256(json.dumps(w.to_dict()).encode()).hexdigest()


def _init_state(w: ModelWeights, cfg: SimConfig, batch: tuple = ()) -> NetworkState:
    p = w.w_c.shape[0]
    c0 = np.eye(p)[0] if cfg.c_init is None else np.asarray(cfg.c_init, dtype=float)
    if c0.shape != (p,):
        raise DimensionMismatch(f"c_init has {c0.size} entries but the model has p={p}")
    return NetworkState.initial(w, np.broadcast_to(c0, batch + (p,)))


def run_simulation(w: ModelWeights, cfg: SimConfig, prior: GmmPrior | None = None, run_index: int = 0) -> TrajectoryRecord:
    """Closed-loop trajectory with per-step schedules and injected noise.

    The noise for run ``run_index`` comes from ``make_rng(cfg.seed,
    SIM_STREAM, run_index)``, one (m,) draw per step.
    """
    return run_batch(w, cfg, prior, runs=[run_index])[0]


def run_batch(w: ModelWeights, cfg: SimConfig, prior: GmmPrior | None = None, runs=(0,)) -> list[TrajectoryRecord]:
    """Independent runs advanced together; run i draws from stream ``(seed, SIM_STREAM, runs[i])``.

    Each run is computed exactly as :func:`step_closed_loop` would, with the
    batch axis only sharing the matrix products.
    """
    p, m = w.w_c.shape[0], w.w_out.shape[0]
    prior = GmmPrior.one_hot(p) if prior is None else prior
    if prior.dim != p:
        raise DimensionMismatch(f"prior dimension {prior.dim} does not match p={p}")
    runs = list(runs)
    B = len(runs)
    rngs = [make_rng(cfg.seed, SIM_STREAM, r) for r in runs]
    state = _init_state(w, cfg, (B,))
    steps = cfg.steps
    t_all = np.arange(1, steps + 1)
    # schedules are evaluated at the index of the step being taken
    sig_c = evaluate_schedule(cfg.schedule_c, t_all - 1) if steps else np.empty(0)
    sig_h = evaluate_schedule(cfg.schedule_h, t_all - 1) if steps else np.empty(0)
    keep = (t_all % cfg.record_stride) == 0 if steps else np.zeros(0, bool)
    n_rec = int(keep.sum())
    xs = np.empty((B, n_rec, m))
    cs = np.empty((B, n_rec, p))
    hs = np.empty((B, n_rec, w.h_init.shape[0])) if cfg.record_states else None

    block = 4096
    noise_block = None
    leak = 1 - 1 / cfg.tau
    w_f, w_p, w_c, w_out = w.w_f, w.w_p, w.w_c, w.w_out
    sx2 = cfg.sigma_x**2
    hp, c = state.h_post, state.c
    j = 0
    for i in range(steps):
        if i % block == 0:
            size = min(block, steps - i)
            noise_block = np.stack([g.standard_normal((size, m)) for g in rngs], axis=1) * cfg.noise_amplitude
        noise = noise_block[i % block]
        proj = np.tanh(hp) @ w_p
        h = leak * hp + ((c @ w_c) * proj) @ w_f.T / cfg.tau
        x = np.tanh(h) @ w_out.T
        h_post = h - (noise @ w_out) / sx2
        eps_h = h - h_post
        with np.errstate(invalid="ignore", over="ignore"):
            c_new = c - ((eps_h @ w_f) * proj) @ w_c.T / sig_h[i] ** 2
            gain = prior_gain(sig_c[i], cfg.prior_rate, cfg.prior_step)
            if gain:
                try:
                    c_new = c_new + gain * gmm_log_density_grad(c, prior, sig_c[i])
                except FloatingPointError:
                    c_new = c_new + np.nan
        hp, c = h_post, c_new
        if not (np.all(np.isfinite(hp)) and np.all(np.isfinite(c)) and np.all(np.isfinite(x))):
            records = _records(cfg, w, runs, t_all[keep][:j], xs[:, :j], cs[:, :j], sig_c[keep][:j], sig_h[keep][:j],
                               None if hs is None else hs[:, :j])
            raise SimulationDiverged("closed-loop state diverged", step=i + 1, record=records[0] if B == 1 else records)
        if keep[i]:
            xs[:, j] = x
            cs[:, j] = c
            if hs is not None:
                hs[:, j] = hp
            j += 1
    return _records(cfg, w, runs, t_all[keep], xs, cs, sig_c[keep], sig_h[keep], hs)


def _records(cfg, w, runs, t, xs, cs, sc, sh, hs):
    base = {
        "config": cfg.to_dict(),
        "weights_hash": weights_hash(w),
        "seed": cfg.seed,
        "format_version": RECORD_FORMAT_VERSION,
    }
    return [
        TrajectoryRecord(
            t=t.copy(),
            x=xs[b].copy(),
            c=cs[b].copy(),
            sigma_c=sc.copy(),
            sigma_h=sh.copy(),
            h_post=None if hs is None else hs[b].copy(),
            meta={**base, "run_index": r},
        )
        for b, r in enumerate(runs)
    ]


def reference_run(w: ModelWeights, cfg: SimConfig, prior: GmmPrior | None = None, run_index: int = 0) -> TrajectoryRecord:
    """Same trajectory as :func:`run_simulation`, built by chaining :func:`step_closed_loop`.

    Slow; kept as the composition oracle for the fast loop.
    """
    p, m = w.w_c.shape[0], w.w_out.shape[0]
    prior = GmmPrior.one_hot(p) if prior is None else prior
    rng = make_rng(cfg.seed, SIM_STREAM, run_index)
    state = _init_state(w, cfg)
    noise = rng.standard_normal((cfg.steps, m)) * cfg.noise_amplitude
    rows = []
    for i in range(cfg.steps):
        state = step_closed_loop(state, noise[i], w, cfg.precisions(i), prior)
        if (i + 1) % cfg.record_stride == 0:
            rows.append((i + 1, state.x, state.c, state.h_post))
    t = np.array([r[0] for r in rows], dtype=np.int64)
    return TrajectoryRecord(
        t=t,
        x=np.array([r[1] for r in rows]).reshape(-1, m),
        c=np.array([r[2] for r in rows]).reshape(-1, p),
        sigma_c=evaluate_schedule(cfg.schedule_c, t - 1) if len(t) else np.empty(0),
        sigma_h=evaluate_schedule(cfg.schedule_h, t - 1) if len(t) else np.empty(0),
        h_post=np.array([r[3] for r in rows]).reshape(len(rows), -1),
    )


def state_statistics(rec: TrajectoryRecord, window: int | None = None) -> dict[str, np.ndarray]:
    """Windowed mean of |h*| and of the step-to-step speed |h*(t) - h*(t-1)|.

    The default window is one period of the varying schedule.
    """
    if rec.h_post is None:
        raise ValueError("record holds no hidden states")
    if window is None:
        cfg = rec.meta.get("config", {})
        periods = [_schedule(cfg[k]).period for k in ("schedule_c", "schedule_h") if k in cfg]
        periods = [pd for pd in periods if pd]
        window = int(round(periods[0])) if periods else 60
    if window < 1 or window > len(rec) - 1:
        raise ValueError(f"window {window} does not fit a record of {len(rec)} steps")
    speed = np.linalg.norm(np.diff(rec.h_post, axis=0), axis=1)
    norm = np.linalg.norm(rec.h_post[1:], axis=1)
    n_win = len(speed) // window
    return {
        "t": rec.t[1:][: n_win * window].reshape(n_win, window)[:, 0],
        "mean_norm": norm[: n_win * window].reshape(n_win, window).mean(axis=1),
        "mean_speed": speed[: n_win * window].reshape(n_win, window).mean(axis=1),
        "speed": speed,
    }
