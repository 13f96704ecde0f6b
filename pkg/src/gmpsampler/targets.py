"""Unnormalized target densities.

Each target exposes ``log_rho`` and ``score`` on batches of shape
``(batch, dim)``.  Both are written with :mod:`gmpsampler.autodiff` ops so
they can be differentiated with respect to the evaluation point, which the
annealed-Langevin drifts need (the score enters the drift and the drift is
differentiated during training).  Plain numpy input works too; the result is
then a constant :class:`~gmpsampler.autodiff.Tensor`.
"""

import csv
import logging
import math

import numpy as np

from . import autodiff as ad

logger = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)


class DatasetError(ValueError):
    """A CSV dataset could not be ingested."""


def _batch(x, dim):
    x = ad.as_tensor(x)
    if x.ndim == 1:
        x = ad.reshape(x, (1, x.shape[0]))
    if x.ndim != 2 or x.shape[1] != dim:
        raise ad.ShapeError(f"expected points of dimension {dim}, got shape {x.shape}")
    return x


class Target:
    """Base class: ``rho(x) = exp(log_rho(x))`` on R^dim."""

    dim: int
    log_z = None
    mode_centers = None
    name = "target"

    def log_rho(self, x):
        raise NotImplementedError

    def score(self, x):
        raise NotImplementedError

    def sample(self, rng, n):
        raise NotImplementedError(f"{type(self).__name__} has no exact sampler")

    @property
    def has_sampler(self):
        return type(self).sample is not Target.sample

    def log_rho_np(self, x):
        with ad.no_grad():
            return self.log_rho(np.atleast_2d(x)).data

    def score_np(self, x):
        with ad.no_grad():
            return self.score(np.atleast_2d(x)).data


class IsotropicGaussian(Target):
    """Normalized N(mean, variance * I); the closed-form oracle target."""

    name = "gaussian"

    def __init__(self, mean, variance=1.0):
        self.mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
        if variance <= 0:
            raise ValueError("variance must be positive")
        self.variance = float(variance)
        self.dim = self.mean.shape[0]
        self.log_z = 0.0
        self.mode_centers = self.mean[None, :].copy()

    def log_rho(self, x):
        x = _batch(x, self.dim)
        sq = ad.sum(ad.square(x - self.mean), axis=1)
        return sq * (-0.5 / self.variance) - 0.5 * self.dim * (LOG_2PI + math.log(self.variance))

    def score(self, x):
        x = _batch(x, self.dim)
        return (x - self.mean) * (-1.0 / self.variance)

    def sample(self, rng, n):
        return self.mean + math.sqrt(self.variance) * rng.standard_normal((n, self.dim))


class Funnel(Target):
    """Neal's funnel: x1 ~ N(0, 9), x_i | x1 ~ N(0, exp(x1)) for i >= 2."""

    name = "funnel"

    def __init__(self, dim=10, scale_var=9.0):
        if dim < 2:
            raise ValueError("funnel needs dim >= 2")
        self.dim = dim
        self.scale_var = float(scale_var)
        self.log_z = 0.0

    def log_rho(self, x):
        x = _batch(x, self.dim)
        v = x[:, 0]
        rest = ad.sum(ad.square(x[:, 1:]), axis=1)
        k = self.dim - 1
        lp_v = ad.square(v) * (-0.5 / self.scale_var) - 0.5 * (LOG_2PI + math.log(self.scale_var))
        lp_rest = rest * ad.exp(-v) * -0.5 - v * (0.5 * k) - 0.5 * k * LOG_2PI
        return lp_v + lp_rest

    def score(self, x):
        x = _batch(x, self.dim)
        v = x[:, 0:1]
        rest = x[:, 1:]
        inv = ad.exp(-v)
        k = self.dim - 1
        d_v = (v * (-1.0 / self.scale_var) + ad.sum(ad.square(rest), axis=1, keepdims=True) * inv * 0.5
               - 0.5 * k)
        return ad.concat([d_v, -(rest * inv)], axis=1)

    def sample(self, rng, n):
        v = math.sqrt(self.scale_var) * rng.standard_normal(n)
        rest = rng.standard_normal((n, self.dim - 1)) * np.exp(0.5 * v)[:, None]
        return np.column_stack([v, rest])


class GaussianMixtureTarget(Target):
    """Equal-weight mixture of full-covariance Gaussians (normalized)."""

    name = "gmm"

    def __init__(self, means, covs):
        self.means = np.asarray(means, dtype=np.float64)
        self.covs = np.asarray(covs, dtype=np.float64)
        self.n_components, self.dim = self.means.shape
        if self.covs.shape != (self.n_components, self.dim, self.dim):
            raise ValueError("covariances must have shape (K, d, d)")
        self.log_z = 0.0
        self.mode_centers = self.means.copy()
        self.chols = np.linalg.cholesky(self.covs)
        self.precs = np.linalg.inv(self.covs)
        K, d = self.n_components, self.dim
        # x @ prec_stack gives P_k x for all k at once, reshaped to (B, K, d)
        self._prec_stack = np.concatenate(list(self.precs), axis=1)
        self._pm = np.einsum("kij,kj->ki", self.precs, self.means)
        logdet = 2.0 * np.log(np.diagonal(self.chols, axis1=1, axis2=2)).sum(axis=1)
        self._const = (-math.log(K) - 0.5 * logdet - 0.5 * d * LOG_2PI
                       - 0.5 * np.einsum("ki,ki->k", self.means, self._pm))

    def _component_logp(self, x):
        B = x.shape[0]
        px = ad.reshape(x @ self._prec_stack, (B, self.n_components, self.dim))
        quad = ad.sum(px * ad.reshape(x, (B, 1, self.dim)), axis=2)
        lin = x @ self._pm.T
        return quad * -0.5 + lin + self._const, px

    def log_rho(self, x):
        x = _batch(x, self.dim)
        logp, _ = self._component_logp(x)
        return ad.logsumexp(logp, axis=1)

    def score(self, x):
        x = _batch(x, self.dim)
        logp, px = self._component_logp(x)
        resp = ad.exp(logp - ad.logsumexp(logp, axis=1, keepdims=True))
        r = ad.reshape(resp, resp.shape + (1,))
        return ad.sum(r * (self._pm[None] - px), axis=1)

    def sample(self, rng, n):
        k = rng.integers(self.n_components, size=n)
        z = rng.standard_normal((n, self.dim))
        return self.means[k] + np.einsum("nij,nj->ni", self.chols[k], z)


def random_gmm_target(seed=0, n_components=10, dim=2, low=-12.0, high=12.0, scale=None):
    """Random GMM: means uniform in a box, Wishart-distributed covariances.

    Each covariance is a sum of ``dim + 1`` outer products of N(0, s^2 I)
    vectors, with ``s^2 = 1 / (dim + 1)`` by default so that a typical
    component has unit marginal variance.
    """
    rng = np.random.default_rng(seed)
    means = rng.uniform(low, high, size=(n_components, dim))
    dof = dim + 1
    s = math.sqrt(1.0 / dof) if scale is None else float(scale)
    v = s * rng.standard_normal((n_components, dof, dim))
    covs = np.einsum("kji,kjl->kil", v, v) + 1e-6 * np.eye(dim)
    target = GaussianMixtureTarget(means, covs)
    target.name = "gmm2d" if dim == 2 else "gmm"
    return target


class BayesLogReg(Target):
    """Bayesian logistic regression posterior over the weight vector."""

    name = "logreg"

    def __init__(self, X, y, prior_var=100.0):
        self.X = np.asarray(X, dtype=np.float64)
        self.y = np.asarray(y, dtype=np.float64)
        if self.X.ndim != 2 or self.y.shape != (self.X.shape[0],):
            raise ValueError("X must be (n, p) and y must be (n,)")
        if not np.all((self.y == 0) | (self.y == 1)):
            raise ValueError("labels must be 0/1")
        self.dim = self.X.shape[1]
        self.prior_var = float(prior_var)

    def log_rho(self, w):
        w = _batch(w, self.dim)
        z = w @ self.X.T
        # y log s(z) + (1 - y) log(1 - s(z)) = y z - softplus(z)
        ll = ad.sum(z * self.y - ad.softplus(z), axis=1)
        lp = (ad.sum(ad.square(w), axis=1) * (-0.5 / self.prior_var)
              - 0.5 * self.dim * (LOG_2PI + math.log(self.prior_var)))
        return ll + lp

    def score(self, w):
        w = _batch(w, self.dim)
        z = w @ self.X.T
        return (self.y - ad.sigmoid(z)) @ self.X - w * (1.0 / self.prior_var)


def synthetic_logreg(seed=0, n=100, dim=11, prior_var=100.0):
    """Seeded synthetic logistic-regression problem with an intercept column."""
    rng = np.random.default_rng(seed)
    feats = standardize(rng.standard_normal((n, dim - 1)))
    X = np.column_stack([feats, np.ones(n)])
    w_true = rng.standard_normal(dim)
    p = 1.0 / (1.0 + np.exp(-X @ w_true))
    y = (rng.uniform(size=n) < p).astype(np.float64)
    target = BayesLogReg(X, y, prior_var=prior_var)
    target.name = "logreg"
    return target


def standardize(features):
    """Zero-mean, unit-variance columns; constant columns are only centered."""
    features = np.asarray(features, dtype=np.float64)
    mu = features.mean(axis=0)
    sd = features.std(axis=0)
    const = sd < 1e-12
    if np.any(const):
        logger.warning("constant feature columns %s left unscaled", np.flatnonzero(const).tolist())
    sd = np.where(const, 1.0, sd)
    return (features - mu) / sd


def load_csv_dataset(path, label_column):
    """Read a CSV with a header, standardize features, append an intercept.

    Returns ``(X, y)`` where ``X`` has the intercept as its last column.
    """
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise DatasetError(f"cannot read {path}: {exc}") from None
    if len(rows) < 2:
        raise DatasetError("dataset needs a header row and at least one data row")
    header = [h.strip() for h in rows[0]]
    if label_column not in header:
        raise DatasetError(f"label column {label_column!r} not in header {header}")
    li = header.index(label_column)
    try:
        data = np.array([[float(v) for v in row] for row in rows[1:] if row], dtype=np.float64)
    except ValueError as exc:
        raise DatasetError(f"non-numeric entry: {exc}") from None
    if data.ndim != 2 or data.shape[1] != len(header):
        raise DatasetError("ragged rows in dataset")
    y = data[:, li]
    if not np.all((y == 0) | (y == 1)):
        raise DatasetError("labels must be binary 0/1")
    feats = np.delete(data, li, axis=1)
    X = np.column_stack([standardize(feats), np.ones(len(y))])
    return X, y


class Phi4Lattice(Target):
    """Two-dimensional lattice phi^4 theory with periodic boundaries.

    ``U(phi) = -2 kappa sum_x sum_mu phi_x phi_{x+mu} + (1 - 2 lam) sum phi^2
    + lam sum phi^4`` with mu over the two positive lattice directions, and
    ``log rho = -U``.  Configurations are flattened row-major to ``L * L``.
    """

    name = "phi4"

    def __init__(self, L=4, kappa=0.2, lam=0.022):
        self.L = int(L)
        self.kappa = float(kappa)
        self.lam = float(lam)
        self.dim = self.L * self.L
        idx = np.arange(self.dim).reshape(self.L, self.L)
        shift = np.zeros((self.dim, self.dim))
        for axis in (0, 1):
            nb = np.roll(idx, -1, axis=axis).ravel()
            shift[idx.ravel(), nb] += 1.0
        # (phi @ fwd)_x = sum_mu phi_{x+mu}; (phi @ both)_x sums all four neighbours
        self._fwd = shift.T.copy()
        self._both = shift + shift.T
        if self.kappa == 0.0:
            self.log_z = self.dim * self.site_log_z()

    def potential(self, x):
        x = _batch(x, self.dim)
        hop = ad.sum(x * (x @ self._fwd), axis=1)
        x2 = ad.square(x)
        return (hop * (-2.0 * self.kappa) + ad.sum(x2, axis=1) * (1.0 - 2.0 * self.lam)
                + ad.sum(ad.square(x2), axis=1) * self.lam)

    def log_rho(self, x):
        return -self.potential(x)

    def score(self, x):
        x = _batch(x, self.dim)
        cube = ad.square(x) * x
        return ((x @ self._both) * (2.0 * self.kappa) - x * (2.0 * (1.0 - 2.0 * self.lam))
                - cube * (4.0 * self.lam))

    def site_log_z(self):
        """Per-site log partition function of the decoupled (kappa = 0) lattice."""
        from scipy.integrate import quad
        a, b = 1.0 - 2.0 * self.lam, self.lam
        val, _ = quad(lambda t: math.exp(-a * t * t - b * t ** 4), -np.inf, np.inf,
                      epsabs=1e-13, epsrel=1e-13)
        return math.log(val)


def magnetization(phi):
    """Sum of the field over all lattice sites.

    A single field is a 1-D array or a square ``(L, L)`` array and yields a
    float.  Batches are ``(B, L, L)`` or non-square ``(B, L * L)`` arrays and
    yield one value per configuration.
    """
    phi = np.asarray(phi, dtype=np.float64)
    if phi.ndim == 1 or (phi.ndim == 2 and phi.shape[0] == phi.shape[1]):
        return float(phi.sum())
    return phi.reshape(phi.shape[0], -1).sum(axis=1)


class ScaledTarget(Target):
    """``c * rho`` for a wrapped target, i.e. ``log_rho + log_c``."""

    def __init__(self, base, log_c):
        self.base = base
        self.log_c = float(log_c)
        self.dim = base.dim
        self.name = base.name
        self.mode_centers = base.mode_centers
        self.log_z = None if base.log_z is None else base.log_z + self.log_c

    def log_rho(self, x):
        return self.base.log_rho(x) + self.log_c

    def score(self, x):
        return self.base.score(x)

    def sample(self, rng, n):
        return self.base.sample(rng, n)

    @property
    def has_sampler(self):
        return self.base.has_sampler


def make_target(name, **params):
    """Build a bundled target by name."""
    name = name.lower()
    if name in ("gaussian", "isotropic_gaussian"):
        dim = int(params.get("dim", 2))
        mean = params.get("mean", 0.0)
        mean = np.full(dim, float(mean)) if np.isscalar(mean) else np.asarray(mean, float)
        return IsotropicGaussian(mean, float(params.get("variance", 1.0)))
    if name == "funnel":
        return Funnel(dim=int(params.get("dim", 10)), scale_var=float(params.get("scale_var", 9.0)))
    if name in ("gmm", "gmm2d"):
        return random_gmm_target(seed=int(params.get("seed", 0)),
                                 n_components=int(params.get("n_components", 10)),
                                 dim=int(params.get("dim", 2)))
    if name == "logreg":
        if params.get("dataset"):
            X, y = load_csv_dataset(params["dataset"], params.get("label_col", "label"))
            t = BayesLogReg(X, y, prior_var=float(params.get("prior_var", 100.0)))
            return t
        return synthetic_logreg(seed=int(params.get("seed", 0)), n=int(params.get("n", 100)),
                                dim=int(params.get("dim", 11)),
                                prior_var=float(params.get("prior_var", 100.0)))
    if name == "phi4":
        return Phi4Lattice(L=int(params.get("L", 4)), kappa=float(params.get("kappa", 0.2)),
                           lam=float(params.get("lam", 0.022)))
    raise KeyError(f"unknown target {name!r}")


TARGET_NAMES = ("gaussian", "funnel", "gmm2d", "logreg", "phi4")
