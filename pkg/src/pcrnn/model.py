"""Predictive-coding RNN with hidden causes.

Top-down pass::

    h_t = (1 - 1/tau) h*_{t-1} + (1/tau) W_f ((W_c^T c_{t-1}) * (W_p^T tanh h*_{t-1}))
    x_t = W_out tanh h_t

Bottom-up pass (gradient steps on the free energy)::

    eps_t  = x_t - x*_t
    h*_t   = h_t - W_out^T eps_t / sigma_x^2
    eps'_t = h_t - h*_t
    c_t    = c_{t-1} - W_c ((W_f^T eps'_t) * (W_p^T tanh h*_{t-1})) / sigma_h^2 + prior pull

All vector arguments may carry leading batch axes; the feature axis is last.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .prior import GmmPrior, gmm_log_density, gmm_log_density_grad

FORMAT_VERSION = 1
PRIOR_STEPS = ("explicit", "implicit")


class DivergenceError(FloatingPointError):
    """Raised when a network state acquires non-finite entries."""

    def __init__(self, message: str, step: int | None = None):
        self.step = step
        if step is not None:
            message = f"{message} (step {step})"
        super().__init__(message)


@dataclass(frozen=True)
class ModelDims:
    n: int
    p: int
    d: int | None = None
    m: int = 2

    def __post_init__(self):
        if self.d is None:
            if self.n % 2:
                raise ValueError("default factor size n/2 needs an even n")
            object.__setattr__(self, "d", self.n // 2)
        for name in ("n", "p", "d", "m"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")

    def as_dict(self) -> dict:
        return {"n": self.n, "p": self.p, "d": self.d, "m": self.m}


@dataclass
class ModelWeights:
    """Factored recurrent weights, readout and the shared initial state.

    Shapes: ``w_f`` (n, d), ``w_p`` (n, d), ``w_c`` (p, d), ``w_out`` (m, n),
    ``h_init`` (n,).
    """

    w_f: np.ndarray
    w_p: np.ndarray
    w_c: np.ndarray
    w_out: np.ndarray
    h_init: np.ndarray

    def __post_init__(self):
        for name in ("w_f", "w_p", "w_c", "w_out", "h_init"):
            arr = np.array(getattr(self, name), dtype=float)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} has non-finite entries")
            setattr(self, name, arr)
        n, d = self.w_f.shape
        p = self.w_c.shape[0]
        m = self.w_out.shape[0]
        expected = {"w_f": (n, d), "w_p": (n, d), "w_c": (p, d), "w_out": (m, n), "h_init": (n,)}
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")

    @property
    def dims(self) -> ModelDims:
        n, d = self.w_f.shape
        return ModelDims(n=n, p=self.w_c.shape[0], d=d, m=self.w_out.shape[0])

    @classmethod
    def initialize(cls, dims: ModelDims, rng: np.random.Generator) -> "ModelWeights":
        """Gaussian init with std 1/sqrt(fan-in) per matrix; h_init ~ N(0, 1)."""
        n, p, d, m = dims.n, dims.p, dims.d, dims.m
        # fan-in is the size of the vector each matrix multiplies
        w_f = rng.standard_normal((n, d)) / np.sqrt(d)
        w_p = rng.standard_normal((n, d)) / np.sqrt(n)
        w_c = rng.standard_normal((p, d)) / np.sqrt(p)
        w_out = rng.standard_normal((m, n)) / np.sqrt(n)
        h_init = rng.standard_normal(n)
        return cls(w_f, w_p, w_c, w_out, h_init)

    def recurrent_tensor(self) -> np.ndarray:
        """Dense W_rec[i, j, k] = sum_l W_p[i, l] W_f[j, l] W_c[k, l]."""
        return np.einsum("il,jl,kl->ijk", self.w_p, self.w_f, self.w_c)

    def copy(self) -> "ModelWeights":
        return replace(self)

    def params(self) -> dict[str, np.ndarray]:
        return {"w_f": self.w_f, "w_p": self.w_p, "w_c": self.w_c, "w_out": self.w_out}

    def to_dict(self) -> dict:
        return {
            "dims": self.dims.as_dict(),
            "w_f": self.w_f.tolist(),
            "w_p": self.w_p.tolist(),
            "w_c": self.w_c.tolist(),
            "w_out": self.w_out.tolist(),
            "h_init": self.h_init.tolist(),
            "format_version": FORMAT_VERSION,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelWeights":
        if doc.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported weights format_version {doc.get('format_version')!r}")
        w = cls(doc["w_f"], doc["w_p"], doc["w_c"], doc["w_out"], doc["h_init"])
        if w.dims.as_dict() != {k: int(v) for k, v in doc["dims"].items()}:
            raise ValueError(f"declared dims {doc['dims']} do not match arrays {w.dims.as_dict()}")
        return w

    def save(self, path) -> str:
        """Write JSON (floats in shortest round-trip form); returns the sha256 of the file."""
        text = json.dumps(self.to_dict())
        Path(path).write_text(text + "\n")
        return hashlib.sha256((text + "\n").encode()).hexdigest()

    @classmethod
    def load(cls, path) -> "ModelWeights":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class Precisions:
    """Standard deviations of the three generative levels and the time constant.

    ``prior_step`` selects how the complexity term of the causes update is
    discretized. ``"explicit"`` adds ``prior_rate * grad log p(c)`` directly
    (a forward-Euler step); with the Gaussian curvature
    1/sigma_c^2 this overshoots and diverges once
    ``prior_rate / sigma_c^2 > 2``. ``"implicit"`` takes the same step
    backward-Euler style against that curvature, giving the gain
    ``prior_rate * sigma_c^2 / (sigma_c^2 + prior_rate)``: stable for every
    sigma_c and indistinguishable from the explicit step when sigma_c is
    large.
    """

    sigma_x: float = 1.0
    sigma_h: float = 10.0
    sigma_c: float = 0.1
    tau: float = 5.0
    prior_rate: float = 1.0
    prior_step: str = "explicit"

    def __post_init__(self):
        for name in ("sigma_x", "sigma_h", "sigma_c"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if not self.tau >= 1:
            raise ValueError(f"tau must be >= 1, got {self.tau}")
        if not self.prior_rate >= 0:
            raise ValueError("prior_rate must be non-negative")
        if self.prior_step not in PRIOR_STEPS:
            raise ValueError(f"prior_step must be one of {PRIOR_STEPS}")

    def with_(self, **changes) -> "Precisions":
        return replace(self, **changes)

    @property
    def prior_gain(self) -> float:
        """Multiplier applied to grad log p(c) in the causes update."""
        return prior_gain(self.sigma_c, self.prior_rate, self.prior_step)


def prior_gain(sigma_c: float, rate: float = 1.0, step: str = "explicit") -> float:
    if step == "explicit":
        return rate
    s2 = sigma_c * sigma_c
    return rate * s2 / (s2 + rate) if rate else 0.0


@dataclass
class NetworkState:
    """Prior/posterior hidden state, causes, prediction and both error units."""

    h: np.ndarray
    h_post: np.ndarray
    c: np.ndarray
    x: np.ndarray
    eps: np.ndarray
    eps_h: np.ndarray
    t: int = field(default=0)

    @classmethod
    def initial(cls, w: ModelWeights, c0) -> "NetworkState":
        """State before the first step: h = h* = h_init, errors zero."""
        c0 = np.asarray(c0, dtype=float)
        batch = c0.shape[:-1]
        h0 = np.broadcast_to(w.h_init, batch + w.h_init.shape).copy()
        m = w.w_out.shape[0]
        return cls(
            h=h0.copy(),
            h_post=h0,
            c=c0.copy(),
            x=predict_output(h0, w),
            eps=np.zeros(batch + (m,)),
            eps_h=np.zeros_like(h0),
        )

    def is_finite(self) -> bool:
        return all(
            np.all(np.isfinite(a)) for a in (self.h, self.h_post, self.c, self.x, self.eps, self.eps_h)
        )


def _check_last(name, arr, size):
    if arr.shape[-1] != size:
        raise ValueError(f"{name} has trailing size {arr.shape[-1]}, expected {size}")


def predict_hidden(c_prev, h_post_prev, w: ModelWeights, prec: Precisions) -> np.ndarray:
    """Leaky, cause-gated recurrent prediction of the next hidden state."""
    c_prev = np.asarray(c_prev, dtype=float)
    h_post_prev = np.asarray(h_post_prev, dtype=float)
    _check_last("c_prev", c_prev, w.w_c.shape[0])
    _check_last("h_post_prev", h_post_prev, w.w_f.shape[0])
    gate = c_prev @ w.w_c
    proj = np.tanh(h_post_prev) @ w.w_p
    h = (1 - 1 / prec.tau) * h_post_prev + ((gate * proj) @ w.w_f.T) / prec.tau
    if not np.all(np.isfinite(h)):
        raise DivergenceError("non-finite hidden state prediction")
    return h


def predict_output(h, w: ModelWeights) -> np.ndarray:
    h = np.asarray(h, dtype=float)
    _check_last("h", h, w.w_out.shape[1])
    return np.tanh(h) @ w.w_out.T


def output_error(x_pred, x_obs) -> np.ndarray:
    x_pred = np.asarray(x_pred, dtype=float)
    x_obs = np.asarray(x_obs, dtype=float)
    if x_pred.shape[-1] != x_obs.shape[-1]:
        raise ValueError(f"prediction size {x_pred.shape[-1]} != observation size {x_obs.shape[-1]}")
    return x_pred - x_obs


def update_hidden_posterior(h, eps, w: ModelWeights, prec: Precisions) -> np.ndarray:
    """h* = h - W_out^T eps / sigma_x^2 (no tanh Jacobian)."""
    eps = np.asarray(eps, dtype=float)
    _check_last("eps", eps, w.w_out.shape[0])
    return np.asarray(h, dtype=float) - (eps @ w.w_out) / prec.sigma_x**2


def causes_bottom_up(eps_h, h_post_prev, w: ModelWeights, prec: Precisions) -> np.ndarray:
    """The state-error term W_c ((W_f^T eps') * (W_p^T tanh h*_{t-1})) / sigma_h^2."""
    eps_h = np.asarray(eps_h, dtype=float)
    _check_last("eps_h", eps_h, w.w_f.shape[0])
    proj = np.tanh(np.asarray(h_post_prev, dtype=float)) @ w.w_p
    return ((eps_h @ w.w_f) * proj) @ w.w_c.T / prec.sigma_h**2


def update_causes(c_prev, eps_h, h_post_prev, w: ModelWeights, prec: Precisions, prior: GmmPrior) -> np.ndarray:
    c_prev = np.asarray(c_prev, dtype=float)
    _check_last("c_prev", c_prev, w.w_c.shape[0])
    c = c_prev - causes_bottom_up(eps_h, h_post_prev, w, prec)
    if prec.prior_gain:
        c = c + prec.prior_gain * gmm_log_density_grad(c_prev, prior, prec.sigma_c)
    return c


def free_energy(x_obs, h, h_post, c, w: ModelWeights, prec: Precisions, prior: GmmPrior) -> float:
    """Accuracy terms at the posterior state plus the negative log prior (constant set to 0)."""
    out_err = np.asarray(x_obs, dtype=float) - predict_output(h_post, w)
    state_err = np.asarray(h_post, dtype=float) - np.asarray(h, dtype=float)
    return (
        np.sum(out_err**2, axis=-1) / (2 * prec.sigma_x**2)
        + np.sum(state_err**2, axis=-1) / (2 * prec.sigma_h**2)
        - gmm_log_density(c, prior, prec.sigma_c)
    )


def _advance(state: NetworkState, eps_fn, w, prec, prior) -> NetworkState:
    try:
        h = predict_hidden(state.c, state.h_post, w, prec)
        x = predict_output(h, w)
        eps = eps_fn(x)
        h_post = update_hidden_posterior(h, eps, w, prec)
        eps_h = h - h_post
        with np.errstate(invalid="ignore", over="ignore"):
            c = update_causes(state.c, eps_h, state.h_post, w, prec, prior)
    except FloatingPointError as exc:
        raise DivergenceError(str(exc), step=state.t + 1) from exc
    new = NetworkState(h=h, h_post=h_post, c=c, x=x, eps=eps, eps_h=eps_h, t=state.t + 1)
    if not new.is_finite():
        raise DivergenceError("non-finite network state", step=new.t)
    return new


def step_open_loop(state: NetworkState, x_obs, w: ModelWeights, prec: Precisions, prior: GmmPrior) -> NetworkState:
    """One prediction/inference cycle against an observed output."""
    return _advance(state, lambda x: output_error(x, x_obs), w, prec, prior)


def step_closed_loop(state: NetworkState, noise, w: ModelWeights, prec: Precisions, prior: GmmPrior) -> NetworkState:
    """As :func:`step_open_loop`, but the output error is replaced by ``noise``."""
    noise = np.asarray(noise, dtype=float)
    _check_last("noise", noise, w.w_out.shape[0])
    return _advance(state, lambda x: np.broadcast_to(noise, x.shape).copy(), w, prec, prior)
