"""BPTT training of the limit-cycle attractors.

The forward rollout either runs the top-down pass alone (``open_loop``) or
the full prediction/inference cycle against the targets (``pc_detached``).
In the latter the bottom-up corrections to h* and c are computed from the
current values but enter the backward pass as constants.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .model import DivergenceError, ModelDims, ModelWeights, Precisions
from .prior import GmmPrior, gmm_log_density_grad
from .rng import INIT_STREAM, make_rng
from .targets import TargetSpec, generate_targets

log = logging.getLogger(__name__)

ROLLOUT_MODES = ("open_loop", "pc_detached")
PARAM_NAMES = ("w_f", "w_p", "w_c", "w_out")


@dataclass
class Rollout:
    """Forward-pass cache. Time runs along axis 1; index t holds step t+1's values."""

    x: np.ndarray  # (B, T, m) predictions
    h: np.ndarray  # (B, T, n) prior states
    h_post: np.ndarray  # (B, T + 1, n) posterior states, index 0 is h_init
    c: np.ndarray  # (B, T + 1, p) causes, index 0 is c0
    delta: np.ndarray  # (B, T, n) detached corrections h*_t - h_t


def unroll(
    w: ModelWeights,
    prec: Precisions,
    prior: GmmPrior,
    c0,
    steps: int,
    mode: str = "pc_detached",
    targets=None,
    frozen: Rollout | None = None,
) -> Rollout:
    """Run ``steps`` prediction steps from ``h_init`` for a batch of causes ``c0`` (B, p).

    ``frozen`` replays the corrections and causes of an earlier rollout
    instead of recomputing them, which is how the detached graph is
    probed by finite differences.
    """
    if mode not in ROLLOUT_MODES:
        raise ValueError(f"unknown rollout mode {mode!r}")
    c0 = np.atleast_2d(np.asarray(c0, dtype=float))
    B = c0.shape[0]
    n, m = w.h_init.shape[0], w.w_out.shape[0]
    if mode == "pc_detached" and frozen is None:
        if targets is None:
            raise ValueError("pc_detached rollout needs targets")
        targets = np.asarray(targets, dtype=float).reshape(B, -1, m)
        if targets.shape[1] < steps:
            raise ValueError(f"{targets.shape[1]} target steps for a {steps}-step rollout")

    xs = np.empty((B, steps, m))
    hs = np.empty((B, steps, n))
    hps = np.empty((B, steps + 1, n))
    cs = np.empty((B, steps + 1, c0.shape[1]))
    deltas = np.zeros((B, steps, n))
    hps[:, 0] = w.h_init
    cs[:, 0] = c0
    leak = 1 - 1 / prec.tau
    hp, c = hps[:, 0], c0
    for t in range(steps):
        proj = np.tanh(hp) @ w.w_p
        h = leak * hp + ((c @ w.w_c) * proj) @ w.w_f.T / prec.tau
        x = np.tanh(h) @ w.w_out.T
        hs[:, t] = h
        xs[:, t] = x
        if mode == "open_loop":
            hp = h
        elif frozen is not None:
            deltas[:, t] = frozen.delta[:, t]
            hp = h + frozen.delta[:, t]
            c = frozen.c[:, t + 1]
        else:
            delta = -((x - targets[:, t]) @ w.w_out) / prec.sigma_x**2
            deltas[:, t] = delta
            # eps' = h - h* = -delta
            c = c + ((delta @ w.w_f) * proj) @ w.w_c.T / prec.sigma_h**2 + (
                prec.prior_gain * gmm_log_density_grad(c, prior, prec.sigma_c) if prec.prior_gain else 0.0
            )
            hp = h + delta
        hps[:, t + 1] = hp
        cs[:, t + 1] = c
    if not np.all(np.isfinite(xs)):
        first = int(np.argmax(~np.all(np.isfinite(xs), axis=(0, 2))))
        raise DivergenceError("rollout diverged", step=first + 1)
    return Rollout(x=xs, h=hs, h_post=hps, c=cs, delta=deltas)


def loss_mse(pred, target) -> float:
    """Mean squared error over batch, steps and output components."""
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    if pred.size == 0:
        raise ValueError("empty sequences")
    return float(np.mean((pred - target) ** 2))


def backprop(w: ModelWeights, prec: Precisions, roll: Rollout, targets, window: int | None = None) -> dict[str, np.ndarray]:
    """Reverse-mode gradients of :func:`loss_mse` through the top-down graph.

    Gradients are returned for the four weight matrices and for ``h_init``
    (summed over the batch); corrections and causes are constants. With
    ``window`` the sequence is cut into chunks of that many steps and no
    gradient crosses a chunk boundary.
    """
    B, T, m = roll.x.shape
    targets = np.asarray(targets, dtype=float).reshape(B, -1, m)[:, :T]
    leak = 1 - 1 / prec.tau
    g = {name: np.zeros_like(getattr(w, name)) for name in PARAM_NAMES}
    dx_all = 2.0 * (roll.x - targets) / (B * T * m)
    dhp = np.zeros((B, w.h_init.shape[0]))
    for t in range(T - 1, -1, -1):
        y = np.tanh(roll.h[:, t])
        dx = dx_all[:, t]
        g["w_out"] += dx.T @ y
        # h*_t = h_t + constant
        dh = (dx @ w.w_out) * (1 - y * y) + dhp
        hp_prev = roll.h_post[:, t]
        s = np.tanh(hp_prev)
        proj = s @ w.w_p
        gate = roll.c[:, t] @ w.w_c
        dz = (dh @ w.w_f) / prec.tau
        g["w_f"] += dh.T @ (gate * proj) / prec.tau
        dproj = dz * gate
        g["w_c"] += roll.c[:, t].T @ (dz * proj)
        g["w_p"] += s.T @ dproj
        dhp = leak * dh + (dproj @ w.w_p.T) * (1 - s * s)
        if window and t % window == 0 and t:
            dhp = np.zeros_like(dhp)
    g["h_init"] = dhp.sum(axis=0)
    return g


def compute_gradients(
    w: ModelWeights,
    prec: Precisions,
    prior: GmmPrior,
    c0,
    targets,
    mode: str = "pc_detached",
    window: int | None = None,
) -> tuple[float, dict[str, np.ndarray]]:
    """Loss and gradients averaged over the batch of (c0, target) pairs."""
    targets = np.asarray(targets, dtype=float)
    c0 = np.atleast_2d(np.asarray(c0, dtype=float))
    targets = targets.reshape(c0.shape[0], -1, w.w_out.shape[0])
    roll = unroll(w, prec, prior, c0, targets.shape[1], mode=mode, targets=targets)
    return loss_mse(roll.x, targets), backprop(w, prec, roll, targets, window)


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(v) for k, v in params.items()}, {k: np.zeros_like(v) for k, v in params.items()})


def adam_step(params, grads, state: AdamState, lr=0.01, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update; returns new params and new state."""
    t = state.t + 1
    new_params, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        new_m[k] = beta1 * state.m[k] + (1 - beta1) * g
        new_v[k] = beta2 * state.v[k] + (1 - beta2) * g * g
        m_hat = new_m[k] / (1 - beta1**t)
        v_hat = new_v[k] / (1 - beta2**t)
        new_params[k] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new_params, AdamState(new_m, new_v, t)


@dataclass
class TrainConfig:
    n: int = 100
    d: int | None = None
    m: int = 2
    shapes: tuple[str, ...] = ("circle", "square", "triangle")
    period: int = 60
    length: int = 1000
    amplitude: float = 1.0
    iterations: int = 1000
    learning_rate: float = 0.01
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    rollout_mode: str = "pc_detached"
    seed: int = 0
    sigma_x: float = 1.0
    sigma_h: float = 10.0
    sigma_c: float = 0.1
    tau: float = 5.0
    prior_rate: float = 1.0
    prior_step: str = "implicit"
    init_gain: float = 1.0
    curriculum_start: int | None = None
    curriculum_hold: int = 0
    curriculum_iterations: int = 0
    learning_rate_final: float | None = None
    log_every: int = 100
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.shapes = tuple(self.shapes)
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not (0 < self.adam_beta1 < 1 and 0 < self.adam_beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")
        if self.rollout_mode not in ROLLOUT_MODES:
            raise ValueError(f"rollout_mode must be one of {ROLLOUT_MODES}")
        if self.curriculum_start is not None and not 1 <= self.curriculum_start <= self.length:
            raise ValueError("curriculum_start must lie in [1, length]")
        if self.curriculum_iterations < 0 or self.curriculum_hold < 0:
            raise ValueError("curriculum_hold and curriculum_iterations must be >= 0")
        if self.learning_rate_final is not None and not self.learning_rate_final > 0:
            raise ValueError("learning_rate_final must be positive")

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__ if f != "extra"}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**doc)

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["shapes"] = list(self.shapes)
        doc.pop("extra")
        return doc

    @property
    def dims(self) -> ModelDims:
        return ModelDims(n=self.n, p=len(self.shapes), d=self.d, m=self.m)

    @property
    def precisions(self) -> Precisions:
        return Precisions(
            sigma_x=self.sigma_x,
            sigma_h=self.sigma_h,
            sigma_c=self.sigma_c,
            tau=self.tau,
            prior_rate=self.prior_rate,
            prior_step=self.prior_step,
        )

    def target_specs(self) -> list[TargetSpec]:
        return [TargetSpec(s, self.period, self.length, self.amplitude) for s in self.shapes]

    def rollout_length(self, iteration: int) -> int:
        """Steps unrolled at a 0-based iteration.

        ``curriculum_start`` steps for the first ``curriculum_hold``
        iterations, then a linear ramp to ``length`` over
        ``curriculum_iterations`` more.
        """
        if self.curriculum_start is None:
            return self.length
        k = iteration - self.curriculum_hold
        if k < 0:
            return self.curriculum_start
        if k >= self.curriculum_iterations:
            return self.length
        span = self.length - self.curriculum_start
        return self.curriculum_start + span * k // self.curriculum_iterations

    def learning_rate_at(self, iteration: int) -> float:
        """Constant during the curriculum hold, then geometric decay to
        ``learning_rate_final`` at the last iteration."""
        if self.learning_rate_final is None:
            return self.learning_rate
        start = self.curriculum_hold if self.curriculum_start is not None else 0
        if iteration < start or self.iterations <= start:
            return self.learning_rate
        frac = (iteration - start) / (self.iterations - start)
        return self.learning_rate * (self.learning_rate_final / self.learning_rate) ** frac


def initial_weights(config: TrainConfig) -> ModelWeights:
    w = ModelWeights.initialize(config.dims, make_rng(config.seed, INIT_STREAM))
    if config.init_gain != 1.0:
        for name in PARAM_NAMES:
            setattr(w, name, getattr(w, name) * config.init_gain)
    return w


def train(config: TrainConfig, weights: ModelWeights | None = None):
    """Train all attractors jointly; returns (weights, per-iteration losses).

    Each iteration rolls out every shape from the shared ``h_init`` with its
    one-hot cause and applies a single Adam step on the batch-mean loss.
    ``h_init`` itself is never updated. With a curriculum the early
    iterations fit only a prefix of the targets.
    """
    w = initial_weights(config) if weights is None else weights.copy()
    prec = config.precisions
    p = len(config.shapes)
    prior = GmmPrior.one_hot(p)
    targets = np.stack([generate_targets(s) for s in config.target_specs()])
    c0 = np.eye(p)
    params = w.params()
    state = AdamState.zeros_like(params)
    losses = []
    for it in range(config.iterations):
        steps = config.rollout_length(it)
        loss, grads = compute_gradients(w, prec, prior, c0, targets[:, :steps], mode=config.rollout_mode)
        losses.append(loss)
        params, state = adam_step(
            params,
            grads,
            state,
            lr=config.learning_rate_at(it),
            beta1=config.adam_beta1,
            beta2=config.adam_beta2,
            eps=config.adam_epsilon,
        )
        for name, value in params.items():
            setattr(w, name, value)
        if config.log_every and (it + 1) % config.log_every == 0:
            log.info("iteration %d/%d loss %.6g", it + 1, config.iterations, loss)
        if it and loss >= losses[it - 1] * 10:
            log.debug("loss jumped at iteration %d: %.4g -> %.4g", it + 1, losses[it - 1], loss)
    return w, np.array(losses)
