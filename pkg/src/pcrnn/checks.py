"""Finite-difference verification of the analytic derivatives."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ModelDims, ModelWeights, Precisions, free_energy, predict_output
from .prior import GmmPrior, gmm_log_density, gmm_log_density_grad
from .rng import CHECK_STREAM, make_rng
from .training import PARAM_NAMES, compute_gradients, loss_mse, unroll

PRIOR_TOL = 1e-5
ENERGY_TOL = 1e-5
BPTT_TOL = 1e-4
FAULTS = ("prior", "energy", "bptt")


@dataclass
class CheckResult:
    name: str
    error: float
    tolerance: float

    @property
    def ok(self) -> bool:
        return bool(self.error < self.tolerance)


def _rel(a, b) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12))


def _central(f, x, eps):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        up, down = x.copy(), x.copy()
        up[idx] += eps
        down[idx] -= eps
        g[idx] = (f(up) - f(down)) / (2 * eps)
    return g


def check_prior_gradient(seed=0, points=100, dims=(1, 2, 3), sigmas=(0.1, 0.4, 0.8), fault=False) -> CheckResult:
    """Worst relative error of the mixture score over random points near the means."""
    rng = make_rng(seed, CHECK_STREAM, 0)
    worst = 0.0
    for p in dims:
        prior = GmmPrior.one_hot(p)
        for s in sigmas:
            for _ in range(points):
                # sample around a random component so no point sits in a numerically flat tail
                c = prior.means[rng.integers(p)] + s * rng.standard_normal(p)
                g = gmm_log_density_grad(c, prior, s)
                if fault:
                    g = g * (1 + 1e-3)
                fd = _central(lambda v: gmm_log_density(v, prior, s), c, 1e-6 * s)
                worst = max(worst, _rel(g, fd))
    return CheckResult("prior_gradient", worst, PRIOR_TOL)


def check_energy_terms(seed=0, dims=ModelDims(n=6, p=2, d=3), trials=10, fault=False) -> CheckResult:
    """Analytic free-energy gradients that the bottom-up corrections follow.

    dF/dh* at h* = h must equal -W_out^T (x* - W_out tanh h) (1 - tanh^2 h) / sigma_x^2
    (the correction drops the tanh slope), and dF/dc the negative prior score.
    """
    rng = make_rng(seed, CHECK_STREAM, 1)
    worst = 0.0
    for _ in range(trials):
        w = ModelWeights.initialize(dims, rng)
        prec = Precisions(sigma_x=rng.uniform(0.5, 2), sigma_h=rng.uniform(0.5, 2), sigma_c=rng.uniform(0.2, 0.9))
        prior = GmmPrior.one_hot(dims.p)
        h = rng.standard_normal(dims.n)
        x_obs = rng.standard_normal(dims.m)
        c = rng.uniform(0, 1, dims.p)
        y = np.tanh(h)
        analytic_h = -(w.w_out.T @ (x_obs - predict_output(h, w))) * (1 - y * y) / prec.sigma_x**2
        analytic_c = -gmm_log_density_grad(c, prior, prec.sigma_c)
        if fault:
            analytic_h = analytic_h * (1 + 1e-3)
        fd_h = _central(lambda v: free_energy(x_obs, h, v, c, w, prec, prior), h.copy(), 1e-6)
        fd_c = _central(lambda v: free_energy(x_obs, h, h, v, w, prec, prior), c.copy(), 1e-6)
        worst = max(worst, _rel(analytic_h, fd_h), _rel(analytic_c, fd_c))
    return CheckResult("free_energy_terms", worst, ENERGY_TOL)


def check_bptt(seed=0, dims=ModelDims(n=6, p=2, d=3), steps=20, modes=("open_loop", "pc_detached"), fault=False) -> CheckResult:
    """Worst relative error of the BPTT gradients against central differences."""
    rng = make_rng(seed, CHECK_STREAM, 2)
    w = ModelWeights.initialize(dims, rng)
    prec = Precisions(sigma_x=1.0, sigma_h=10.0, sigma_c=0.1, tau=5.0, prior_step="implicit")
    prior = GmmPrior.one_hot(dims.p)
    c0 = np.eye(dims.p)
    targets = 0.8 * rng.standard_normal((dims.p, steps, dims.m))
    worst = 0.0
    for mode in modes:
        _, grads = compute_gradients(w, prec, prior, c0, targets, mode=mode)
        frozen = unroll(w, prec, prior, c0, steps, mode=mode, targets=targets) if mode == "pc_detached" else None
        for name in PARAM_NAMES + ("h_init",):
            def loss_at(v, name=name):
                trial = w.copy()
                setattr(trial, name, v)
                return loss_mse(unroll(trial, prec, prior, c0, steps, mode=mode, frozen=frozen).x, targets)

            g = grads[name] * (1 + 1e-2) if fault else grads[name]
            worst = max(worst, _rel(g, _central(loss_at, getattr(w, name).copy(), 1e-5)))
    return CheckResult("bptt", worst, BPTT_TOL)


def run_all(seed=0, dims=ModelDims(n=6, p=2, d=3), steps=20, fault: str | None = None) -> list[CheckResult]:
    if fault is not None and fault not in FAULTS:
        raise ValueError(f"fault must be one of {FAULTS}")
    if dims.n > 16:
        raise ValueError("gradient checks are meant for n <= 16")
    return [
        check_prior_gradient(seed, fault=fault == "prior"),
        check_energy_terms(seed, dims, fault=fault == "energy"),
        check_bptt(seed, dims, steps, fault=fault == "bptt"),
    ]
