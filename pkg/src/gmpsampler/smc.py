"""Sequential Monte Carlo with geometric annealing, HMC moves and systematic resampling."""

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .dynamics import NumericalAbort


@dataclass
class HMCKernel:
    step_low: float = 0.001      # used while beta <= 0.5
    step_high: float = 0.1       # used once beta > 0.5
    n_leapfrog: int = 5

    def __post_init__(self):
        if self.step_low < 0 or self.step_high < 0:
            raise ValueError("HMC step sizes must be non-negative")
        if self.n_leapfrog < 1:
            raise ValueError("need at least one leapfrog step")

    def step_size(self, beta):
        return self.step_low if beta <= 0.5 else self.step_high


@dataclass
class SMCResult:
    particles: np.ndarray
    log_weights: np.ndarray
    log_z: float
    n_resamples: int
    acceptance: float
    ess_history: np.ndarray


def leapfrog(x, p, grad_log_pi, step, n_steps):
    """Unit-mass leapfrog integration of H(x, p) = -log pi(x) + |p|^2 / 2."""
    p = p + 0.5 * step * grad_log_pi(x)
    for i in range(n_steps):
        x = x + step * p
        if i < n_steps - 1:
            p = p + step * grad_log_pi(x)
    p = p + 0.5 * step * grad_log_pi(x)
    return x, p


def hmc_step(x, log_pi, grad_log_pi, step, n_leapfrog, rng):
    """One HMC transition per row of ``x``; returns ``(x_new, accepted_mask)``."""
    p0 = rng.standard_normal(x.shape)
    x1, p1 = leapfrog(x, p0, grad_log_pi, step, n_leapfrog)
    h0 = -log_pi(x) + 0.5 * np.sum(p0 * p0, axis=1)
    with np.errstate(invalid="ignore", over="ignore"):
        h1 = -log_pi(x1) + 0.5 * np.sum(p1 * p1, axis=1)
        log_a = h0 - h1
    ok = np.isfinite(log_a) & np.all(np.isfinite(x1), axis=1)
    acc = ok & (np.log(rng.uniform(size=x.shape[0])) < np.where(ok, log_a, -np.inf))
    return np.where(acc[:, None], x1, x), acc


def systematic_resample(weights, rng):
    """Offspring indices from normalized ``weights`` with a single uniform offset."""
    w = np.asarray(weights, dtype=np.float64)
    m = w.size
    positions = (rng.uniform() + np.arange(m)) / m
    cdf = np.cumsum(w)
    cdf[-1] = 1.0
    return np.minimum(np.searchsorted(cdf, positions, side="right"), m - 1)


def normalized_ess(log_w):
    return float(math.exp(2.0 * logsumexp(log_w) - logsumexp(2.0 * log_w)) / log_w.size)


def smc_run(target, rng, init_scale=1.0, n_anneal=128, m=2000, resample_threshold=0.3,
            kernel=None):
    """Anneal from N(0, init_scale^2 I) to the target along p0^(1-beta) rho^beta.

    Uses the linear schedule beta_n = n / n_anneal and one HMC move per
    temperature.  Returns an :class:`SMCResult` with the log-normalizer estimate.
    """
    if n_anneal < 1 or m < 1:
        raise ValueError("need n_anneal >= 1 and m >= 1")
    kernel = kernel or HMCKernel()
    d = target.dim
    s2 = init_scale ** 2

    def log_p0(x):
        return -0.5 * np.sum(x * x, axis=1) / s2 - 0.5 * d * math.log(2.0 * math.pi * s2)

    x = init_scale * rng.standard_normal((m, d))
    log_w = np.zeros(m)
    log_z = 0.0
    betas = np.arange(n_anneal + 1) / n_anneal
    n_res, n_acc = 0, 0
    ess_hist = []
    for n in range(1, n_anneal + 1):
        b_prev, b = betas[n - 1], betas[n]
        inc = (b - b_prev) * (target.log_rho_np(x) - log_p0(x))
        inc = np.where(np.isnan(inc), -np.inf, inc)
        new = log_w + inc
        if np.all(new == -np.inf):
            raise NumericalAbort("all SMC weights are zero")
        log_z += logsumexp(new) - logsumexp(log_w)
        log_w = new - logsumexp(new)
        ess = normalized_ess(log_w)
        if ess < resample_threshold:
            idx = systematic_resample(np.exp(log_w), rng)
            x = x[idx]
            log_w = np.full(m, -math.log(m))
            n_res += 1
            ess = 1.0
        ess_hist.append(ess)

        def log_pi(z, b=b):
            return (1.0 - b) * log_p0(z) + b * target.log_rho_np(z)

        def grad_log_pi(z, b=b):
            return -(1.0 - b) * z / s2 + b * target.score_np(z)

        x, acc = hmc_step(x, log_pi, grad_log_pi, kernel.step_size(b), kernel.n_leapfrog, rng)
        n_acc += int(acc.sum())
    return SMCResult(x, log_w, float(log_z), n_res, n_acc / (m * n_anneal), np.asarray(ess_hist))
