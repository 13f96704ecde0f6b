"""Learnable diagonal Gaussian and Gaussian-mixture priors.

Component standard deviations are ``softplus(raw_scale)``.  Mixture weights
are uniform and never trained; adding a component resets them to ``1/K``.
"""

import math

import numpy as np

from . import autodiff as ad

LOG_2PI = math.log(2.0 * math.pi)


def inv_softplus(y):
    y = np.asarray(y, dtype=np.float64)
    if np.any(y <= 0):
        raise ValueError("softplus inverse needs positive values")
    # log(exp(y) - 1), stable for large y
    return y + np.log(-np.expm1(-y))


def mixture_score(x, means, stds):
    """Score of a uniform mixture of diagonal Gaussians as one fused graph node.

    ``x`` is (B, d); ``means`` and ``stds`` are (K, d).  Differentiable in all
    three inputs.
    """
    x, means, stds = ad.as_tensor(x), ad.as_tensor(means), ad.as_tensor(stds)
    xd, md, sd = x.data, means.data, stds.data
    iv = 1.0 / (sd * sd)
    diff = xd[:, None, :] - md[None]                       # (B, K, d)
    a = -diff * iv                                          # per-component scores
    K = md.shape[0]
    if K == 1:
        r = None
        out = a[:, 0]
    else:
        logp = -0.5 * np.sum(diff * diff * iv, axis=2) - np.sum(np.log(sd), axis=1)
        logp -= logp.max(axis=1, keepdims=True)
        r = np.exp(logp)
        r /= r.sum(axis=1, keepdims=True)
        out = np.einsum("bk,bkd->bd", r, a)

    def vjp(g):
        if r is None:
            ga = g[:, None, :]
            gx_a = ga * -iv
            gs = np.sum(ga * 2.0 * diff * iv / sd, axis=0)
            return (gx_a[:, 0] if x.requires_grad else None,
                    -np.sum(gx_a, axis=0) if means.requires_grad else None,
                    gs if stds.requires_grad else None)
        ga = r[:, :, None] * g[:, None, :]                  # (B, K, d)
        gr = np.einsum("bd,bkd->bk", g, a)
        gl = r * (gr - np.sum(r * gr, axis=1, keepdims=True))
        gl3 = gl[:, :, None]
        # d logp_k / dx = a_k, d a_k / dx = -iv_k
        per_comp_x = -ga * iv + gl3 * a
        gs = np.sum(ga * 2.0 * diff * iv / sd + gl3 * (diff * diff * iv - 1.0) / sd, axis=0)
        return (per_comp_x.sum(axis=1) if x.requires_grad else None,
                -per_comp_x.sum(axis=0) if means.requires_grad else None,
                gs if stds.requires_grad else None)
    return ad.custom_op(out, (x, means, stds), vjp, "mixture_score")


class DiagGaussian:
    """One diagonal Gaussian component with mean and raw-scale parameters."""

    def __init__(self, mean, std=1.0, trainable=True, name="comp"):
        mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
        std = np.broadcast_to(np.asarray(std, dtype=np.float64), mean.shape)
        if np.any(std <= 0):
            raise ValueError("component std must be positive")
        self.mean = ad.Parameter(mean.copy(), name=f"{name}.mean")
        self.raw_scale = ad.Parameter(inv_softplus(std), name=f"{name}.raw_scale")
        if not trainable:
            self.mean.requires_grad = False
            self.raw_scale.requires_grad = False

    @property
    def dim(self):
        return self.mean.shape[0]

    def std(self):
        return ad.softplus(self.raw_scale)

    def std_np(self):
        return np.logaddexp(0.0, self.raw_scale.data)


class MixturePrior:
    """Uniform-weight mixture of diagonal Gaussians; K = 1 is a plain Gaussian."""

    def __init__(self, components, trainable=True):
        if not components:
            raise ValueError("a mixture needs at least one component")
        dims = {c.dim for c in components}
        if len(dims) != 1:
            raise ValueError("components must share the same dimension")
        self.components = list(components)
        self.trainable = trainable

    @classmethod
    def gaussian(cls, dim, mean=0.0, std=1.0, trainable=True):
        mean = np.broadcast_to(np.asarray(mean, dtype=np.float64), (dim,))
        return cls([DiagGaussian(mean, std, trainable, name="prior.0")], trainable)

    @classmethod
    def mixture(cls, means, stds=1.0, trainable=True):
        means = np.atleast_2d(np.asarray(means, dtype=np.float64))
        stds = np.broadcast_to(np.asarray(stds, dtype=np.float64), means.shape)
        comps = [DiagGaussian(m, s, trainable, name=f"prior.{k}")
                 for k, (m, s) in enumerate(zip(means, stds))]
        return cls(comps, trainable)

    @property
    def dim(self):
        return self.components[0].dim

    @property
    def n_components(self):
        return len(self.components)

    @property
    def weights(self):
        return np.full(self.n_components, 1.0 / self.n_components)

    def parameters(self):
        if not self.trainable:
            return []
        return [p for c in self.components for p in (c.mean, c.raw_scale)]

    def stacked(self):
        """(means, stds) as (K, d) tensors; pass to score/log_density to reuse."""
        return self._stacked()

    def _stacked(self):
        if self.n_components == 1:
            c = self.components[0]
            return ad.reshape(c.mean, (1, self.dim)), ad.reshape(c.std(), (1, self.dim))
        means = ad.stack([c.mean for c in self.components])
        stds = ad.softplus(ad.stack([c.raw_scale for c in self.components]))
        return means, stds

    def _check(self, x):
        x = ad.as_tensor(x)
        if x.ndim == 1:
            x = ad.reshape(x, (1, x.shape[0]))
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise ad.ShapeError(f"expected points of dimension {self.dim}, got shape {x.shape}")
        return x

    def _component_terms(self, x, stacked=None):
        x = self._check(x)
        means, stds = stacked or self._stacked()
        K, d = self.n_components, self.dim
        inv_var = 1.0 / ad.square(stds)
        diff = ad.reshape(x, (x.shape[0], 1, d)) - ad.reshape(means, (1, K, d))
        log_norm = -ad.sum(ad.log(stds), axis=1) - 0.5 * d * LOG_2PI - math.log(K)
        logp = ad.sum(ad.square(diff) * inv_var, axis=2) * -0.5 + log_norm
        return logp, diff, inv_var

    def log_density(self, x, stacked=None):
        """log sum_k alpha_k N(x | mu_k, diag sigma_k^2) for a batch of points."""
        logp, _, _ = self._component_terms(x, stacked)
        if self.n_components == 1:
            return ad.reshape(logp, (logp.shape[0],))
        return ad.logsumexp(logp, axis=1)

    def score(self, x, stacked=None):
        """Gradient of the log-density with respect to x."""
        x = self._check(x)
        means, stds = stacked or self._stacked()
        return mixture_score(x, means, stds)

    def responsibilities(self, x):
        with ad.no_grad():
            logp, _, _ = self._component_terms(x)
            lp = logp.data
        return np.exp(lp - np.logaddexp.reduce(lp, axis=1, keepdims=True))

    def sample_reparam(self, xi, k):
        """x0 = mu_k + sigma_k * xi, differentiable in the selected components.

        ``xi`` is (B, d) standard-normal noise and ``k`` a length-B array of
        component indices drawn by the caller.
        """
        xi = np.atleast_2d(np.asarray(xi, dtype=np.float64))
        k = np.atleast_1d(np.asarray(k))
        if np.any(k < 0) or np.any(k >= self.n_components):
            raise IndexError(f"component index out of range for K={self.n_components}")
        if self.n_components == 1:
            c = self.components[0]
            return c.mean + c.std() * xi
        means, stds = self._stacked()
        return ad.getitem(means, k) + ad.getitem(stds, k) * xi

    def draw_components(self, rng, n):
        """Stratified component indices: equal allocation, random remainder."""
        K = self.n_components
        base = np.repeat(np.arange(K), n // K)
        extra = rng.choice(K, size=n - base.size, replace=False) if n % K else np.empty(0, int)
        return np.concatenate([base, extra]).astype(int)

    def sample(self, rng, n):
        k = self.draw_components(rng, n)
        xi = rng.standard_normal((n, self.dim))
        means = np.stack([c.mean.data for c in self.components])
        stds = np.stack([c.std_np() for c in self.components])
        return means[k] + stds[k] * xi, k

    def add_component(self, mean, std=1.0):
        """Append a trainable component; weights become uniform over K + 1."""
        mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
        if mean.shape != (self.dim,):
            raise ad.ShapeError(f"new mean must have shape ({self.dim},)")
        if np.any(np.asarray(std) <= 0):
            raise ValueError("new component std must be positive")
        comp = DiagGaussian(mean, std, trainable=self.trainable,
                            name=f"prior.{self.n_components}")
        self.components.append(comp)
        return comp

    def log_density_np(self, x):
        with ad.no_grad():
            return self.log_density(np.atleast_2d(x)).data

    def score_np(self, x):
        with ad.no_grad():
            return self.score(np.atleast_2d(x)).data

    def state_dict(self):
        return {
            "trainable": self.trainable,
            "components": [{"mean": c.mean.data.tolist(), "raw_scale": c.raw_scale.data.tolist()}
                           for c in self.components],
        }

    @classmethod
    def from_state_dict(cls, state):
        comps = []
        for k, c in enumerate(state["components"]):
            comp = DiagGaussian(np.asarray(c["mean"]), 1.0, state["trainable"], name=f"prior.{k}")
            comp.raw_scale.data = np.asarray(c["raw_scale"], dtype=np.float64)
            comps.append(comp)
        return cls(comps, trainable=state["trainable"])
