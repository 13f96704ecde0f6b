"""Evaluation criteria for trained samplers and SMC runs.

All weight-based metrics take the log importance weights ``log_w`` of a batch.
"""

import json
import math
import warnings
from dataclasses import asdict, dataclass, fields

import numpy as np
from scipy.special import logsumexp

from . import autodiff as ad


class SinkhornWarning(RuntimeWarning):
    pass


class PowerIterationWarning(RuntimeWarning):
    pass


def _log_weights(log_w):
    lw = np.asarray(log_w, dtype=np.float64).ravel()
    if lw.size == 0:
        raise ValueError("empty weight set")
    if np.any(np.isnan(lw)) or np.any(lw == np.inf):
        raise ValueError("log weights must be finite or -inf")
    return lw


def elbo(log_w):
    return float(np.mean(_log_weights(log_w)))


def log_z_hat(log_w):
    lw = _log_weights(log_w)
    return float(logsumexp(lw) - math.log(lw.size))


def ess(log_w):
    """Normalized effective sample size (sum w)^2 / (m sum w^2), in (0, 1]."""
    lw = _log_weights(log_w)
    if np.all(lw == -np.inf):
        raise ValueError("all weights are zero")
    return float(min(1.0, math.exp(2.0 * logsumexp(lw) - logsumexp(2.0 * lw) - math.log(lw.size))))


def delta_log_z(log_w, true_log_z):
    return abs(true_log_z - log_z_hat(log_w))


def free_energy_bound(log_w, L):
    """Per-site lower bound on the negative free energy of an L x L lattice."""
    return elbo(log_w) / (L * L)


def sinkhorn(samples_a, samples_b, eps=None, max_iter=1000, tol=1e-6, return_info=False):
    """Entropic OT cost <P, C> between two empirical measures with uniform weights.

    Squared-Euclidean ground cost; ``eps`` defaults to 0.05 times the median
    pairwise squared distance.  Iteration stops once the row-marginal L1
    violation falls below ``tol``; otherwise a :class:`SinkhornWarning` is
    issued and the last plan is used.
    """
    a = np.atleast_2d(np.asarray(samples_a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(samples_b, dtype=np.float64))
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("empty sample set")
    C = (np.sum(a * a, 1)[:, None] + np.sum(b * b, 1)[None, :] - 2.0 * a @ b.T)
    np.maximum(C, 0.0, out=C)
    if eps is None:
        eps = 0.05 * float(np.median(C))
    info = {"eps": eps, "iterations": 0, "converged": True}
    if eps <= 0.0:
        # all points coincide: any coupling has zero cost
        return (0.0, info) if return_info else 0.0
    n, m = C.shape
    log_mu, log_nu = -math.log(n), -math.log(m)
    f, g = np.zeros(n), np.zeros(m)
    K = -C / eps
    viol = np.inf
    for it in range(1, max_iter + 1):
        f = -eps * logsumexp(K + g[None, :] / eps, axis=1) - eps * log_nu
        g = -eps * logsumexp(K + f[:, None] / eps, axis=0) - eps * log_mu
        log_p = K + (f[:, None] + g[None, :]) / eps + log_mu + log_nu
        viol = float(np.abs(np.exp(logsumexp(log_p, axis=1)) - 1.0 / n).sum())
        info["iterations"] = it
        if viol < tol:
            break
    else:
        info["converged"] = False
        warnings.warn(f"Sinkhorn did not converge (violation {viol:.2e})", SinkhornWarning)
    cost = float(np.sum(np.exp(log_p) * C))
    return (cost, info) if return_info else cost


def emc(samples, mode_centers):
    """Entropic mode coverage: entropy of nearest-center frequencies over log M."""
    x = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    centers = np.atleast_2d(np.asarray(mode_centers, dtype=np.float64))
    if x.shape[0] == 0:
        raise ValueError("empty sample set")
    if centers.shape[0] == 0:
        raise ValueError("need at least one mode center")
    M = centers.shape[0]
    if M == 1:
        return 0.0
    d2 = np.sum((x[:, None, :] - centers[None]) ** 2, axis=2)
    q = np.bincount(np.argmin(d2, axis=1), minlength=M) / x.shape[0]
    q = q[q > 0]
    return float(-np.sum(q * np.log(q)) / math.log(M))


def spectral_norms(jac, n_iter=20, rng=None):
    """Largest singular value of each (d_out, d_in) matrix in ``jac`` by power iteration.

    Returns ``(norms, converged)``.
    """
    jac = np.asarray(jac, dtype=np.float64)
    rng = rng if rng is not None else np.random.default_rng(0)
    v = rng.standard_normal(jac.shape[:-2] + (jac.shape[-1],))
    v /= np.linalg.norm(v, axis=-1, keepdims=True)
    prev = None
    norm = np.zeros(jac.shape[:-2])
    for _ in range(n_iter):
        jv = np.einsum("...ij,...j->...i", jac, v)
        w = np.einsum("...ij,...i->...j", jac, jv)
        wn = np.linalg.norm(w, axis=-1, keepdims=True)
        prev, norm = norm, np.linalg.norm(jv, axis=-1)
        v = np.where(wn > 0, w / np.where(wn > 0, wn, 1.0), v)
    converged = bool(np.allclose(norm, prev, rtol=1e-6, atol=1e-12))
    return norm, converged


def control_jacobian(control_fn, x):
    """Per-sample Jacobians d u / d x, shape (B, d_out, d_in), from one VJP per output."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    rows = []
    d_out = None
    j = 0
    while d_out is None or j < d_out:
        xt = ad.Tensor(x, requires_grad=True)
        out = control_fn(xt)
        d_out = out.shape[1]
        if not out.requires_grad:
            return np.zeros((x.shape[0], d_out, x.shape[1]))
        ad.backward(ad.sum(out[:, j]), [xt])
        rows.append(xt.grad)
        j += 1
    return np.stack(rows, axis=1)


def control_spectral_norm(control_fn, states, dts, sigma=1.0, n_iter=20, rng=None):
    """Monte Carlo estimate of E[sum_n ||d(sigma u(x_n, n))/dx||_2 dt_n].

    ``control_fn(x_tensor, n)`` evaluates the control; ``states`` holds at
    least the N states x_0 .. x_{N-1} of each path, shape (>=N, B, d).
    """
    dts = np.asarray(dts, dtype=np.float64)
    states = np.asarray(states, dtype=np.float64)
    total = np.zeros(states.shape[1])
    all_converged = True
    for n, dt in enumerate(dts):
        jac = control_jacobian(lambda xt: control_fn(xt, n), states[n])
        norms, ok = spectral_norms(jac, n_iter, rng)
        all_converged &= ok
        total += sigma * norms * dt
    if not all_converged:
        warnings.warn("power iteration did not settle in the allotted iterations",
                      PowerIterationWarning)
    return float(total.mean())


def sampler_spectral_norm(sampler, states, n_iter=20, rng=None):
    """S for a sampler's forward control (its backward one if it has no forward control).

    ``states`` has shape (N + 1, B, d) or (N, B, d).
    """
    net = sampler.u if sampler.u is not None else sampler.v
    if net is None:
        return 0.0
    N = sampler.n_steps
    with ad.no_grad():
        # constant time features: each of the d VJPs consumes its own graph
        cache = net.time_features(N)

    def fn(xt, n):
        return net.eval(xt, n, N, sampler.target, cache)
    return control_spectral_norm(fn, np.asarray(states)[:N], sampler.schedule.dts_np(N),
                                 sampler.sigma, n_iter, rng)


def magnetization_values(samples):
    """M(phi) = sum of the field, one value per flattened configuration."""
    x = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    return x.reshape(x.shape[0], -1).sum(axis=1)


def magnetization_histogram(samples, bins=40, value_range=None):
    """Histogram of per-sample magnetization normalized to total mass 1.

    The default range is symmetric about zero.  Returns ``(mass, edges)``.
    """
    m = magnetization_values(samples)
    if m.size == 0:
        raise ValueError("empty sample set")
    if value_range is None:
        r = float(np.max(np.abs(m)))
        value_range = (-r, r) if r > 0 else None
    counts, edges = np.histogram(m, bins=bins, range=value_range)
    return counts / m.size, edges


def half_axis_mass(samples):
    """Fractions of samples with negative and positive magnetization."""
    m = magnetization_values(samples)
    return float(np.mean(m < 0)), float(np.mean(m > 0))


@dataclass
class MetricsReport:
    elbo: float = None
    log_z_hat: float = None
    delta_log_z: float = None
    ess: float = None
    sinkhorn: float = None
    emc: float = None
    s_norm: float = None
    free_energy_bound: float = None

    def __post_init__(self):
        if self.ess is not None and not 0.0 < self.ess <= 1.0:
            raise ValueError(f"ess {self.ess} outside (0, 1]")

    @classmethod
    def columns(cls):
        return [f.name for f in fields(cls)]

    def to_row(self):
        return ["" if v is None else repr(float(v)) for v in asdict(self).values()]

    def to_json(self):
        return json.dumps({k: v for k, v in asdict(self).items() if v is not None}, sort_keys=True)


def weight_report(log_w, true_log_z=None, lattice_size=None):
    """ELBO, log Z-hat, ESS (and Delta log Z / free-energy bound when applicable)."""
    lw = np.asarray(log_w, dtype=np.float64)
    lw = lw[np.isfinite(lw)]
    rep = MetricsReport(elbo=elbo(lw), log_z_hat=log_z_hat(lw), ess=ess(lw))
    if true_log_z is not None:
        rep.delta_log_z = abs(true_log_z - rep.log_z_hat)
    if lattice_size is not None:
        rep.free_energy_bound = rep.elbo / lattice_size ** 2
    return rep
