"""Euler-Maruyama transition kernels and trajectory simulation.

Conventions used throughout:

* States are indexed ``x_0 .. x_N``; the step from ``x_n`` to ``x_{n+1}``
  uses the step size ``dt_n = a * cos^2(pi/2 * n/N)`` in both directions.
* The forward kernel from ``x_n`` is N(x_n + (f_n + sigma u_n) dt_n, 2 sigma^2 dt_n).
* The backward kernel from ``x_{n+1}`` uses drift and controls evaluated at
  ``(x_{n+1}, n + 1)``; its mean is method specific (see
  :meth:`DiffusionSampler.backward_mean`).
* ``log_w = log rho(x_N) - log p0(x_0) + sum_n [log bwd(x_n | x_{n+1})
  - log fwd(x_{n+1} | x_n)]``, the log of the unnormalized extended
  importance weight.  Its batch mean is the extended ELBO.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .controls import ControlNet
from .priors import inv_softplus

METHODS = ("DIS", "MCD", "CMCD", "DBS", "NONE")

# which control networks a method owns: (forward u, backward v)
_CONTROLS = {
    "DIS": (True, False),
    "MCD": (False, True),
    "CMCD": (True, False),
    "DBS": (True, True),
    "NONE": (False, False),
}


class NumericalAbort(RuntimeError):
    """Too many simulated paths became non-finite."""


@dataclass
class DiffusionConfig:
    method: str = "DIS"
    n_steps: int = 32
    sigma: float = 1.0
    init_amplitude: float = 0.1
    use_score_head: bool = False
    dbs_drift: str = "target"   # "target": f = sigma^2 grad log rho; "zero": f = 0
    hidden: int = 128
    emb_width: int = 32
    max_nonfinite: float = 0.1

    def __post_init__(self):
        self.method = self.method.upper()
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.method == "NONE":
            self.n_steps = 0
        if self.n_steps < 0:
            raise ValueError("n_steps must be >= 0")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.init_amplitude <= 0:
            raise ValueError("init_amplitude must be positive")
        if self.dbs_drift not in ("target", "zero"):
            raise ValueError("dbs_drift must be 'target' or 'zero'")


class StepSchedule:
    """Cosine-square step sizes with a learnable softplus amplitude."""

    def __init__(self, amplitude=0.1):
        if amplitude <= 0:
            raise ValueError("amplitude must be positive")
        self.raw_amplitude = ad.Parameter(inv_softplus(amplitude), name="schedule.raw_amplitude")

    @staticmethod
    def shape(n_steps):
        n = np.arange(n_steps)
        return np.cos(0.5 * math.pi * n / n_steps) ** 2

    def amplitude(self):
        return ad.softplus(self.raw_amplitude)

    def dts(self, n_steps):
        return self.amplitude() * self.shape(n_steps)

    def dts_np(self, n_steps):
        return float(np.logaddexp(0.0, self.raw_amplitude.data)) * self.shape(n_steps)


def annealing_betas(n_steps):
    """beta_n = n / N; beta_0 = 0 (prior) and beta_N = 1 (target)."""
    if n_steps == 0:
        return np.ones(1)
    return np.arange(n_steps + 1) / n_steps


def gaussian_logpdf(y, mean, var):
    """Row-wise log N(y | mean, var * I) for (B, d) batches and a scalar variance."""
    y, mean, var = ad.as_tensor(y), ad.as_tensor(mean), ad.as_tensor(var)
    if np.any(var.data <= 0):
        raise ad.DomainError("kernel variance must be positive (dt <= 0?)")
    d = y.shape[-1]
    sq = ad.sum(ad.square(y - mean), axis=-1)
    return sq * (-0.5) / var - 0.5 * d * (math.log(2.0 * math.pi) + ad.log(var))


@dataclass
class Trajectory:
    """A batch of simulated paths and their log importance weights."""

    states: list                     # N + 1 tensors of shape (B, d)
    log_w: ad.Tensor                 # (B,)
    components: np.ndarray           # (B,) mixture index of x_0
    noise: np.ndarray                # (N, B, d)
    finite: np.ndarray = field(default=None)

    @property
    def x0(self):
        return self.states[0].data

    @property
    def samples(self):
        return self.states[-1].data

    @property
    def log_w_np(self):
        return self.log_w.data

    def states_np(self):
        return np.stack([s.data for s in self.states])


class DiffusionSampler:
    """A diffusion sampler: prior, controls, step schedule and target."""

    def __init__(self, target, prior, config=None, seed=0):
        self.config = config or DiffusionConfig()
        self.target = target
        self.prior = prior
        if prior.dim != target.dim:
            raise ad.ShapeError(f"prior dim {prior.dim} != target dim {target.dim}")
        cfg = self.config
        has_u, has_v = _CONTROLS[cfg.method]
        self.schedule = StepSchedule(cfg.init_amplitude) if cfg.n_steps > 0 else None
        kw = dict(hidden=cfg.hidden, emb_width=cfg.emb_width, zero_final=True,
                  score_head=cfg.use_score_head)
        self.u = ControlNet(target.dim, seed=seed, name="u", **kw) if has_u and cfg.n_steps else None
        self.v = ControlNet(target.dim, seed=seed + 1, name="v", **kw) if has_v and cfg.n_steps else None

    @property
    def method(self):
        return self.config.method

    @property
    def n_steps(self):
        return self.config.n_steps

    @property
    def sigma(self):
        return self.config.sigma

    def prior_parameters(self):
        return self.prior.parameters()

    def network_parameters(self):
        ps = []
        for net in (self.u, self.v):
            if net is not None:
                ps += net.parameters()
        if self.schedule is not None:
            ps.append(self.schedule.raw_amplitude)
        return ps

    def parameters(self):
        return self.prior_parameters() + self.network_parameters()

    # per-state fields

    def _caches(self):
        """Per-trajectory quantities shared by every step: time features and prior tensors."""
        N = self.n_steps
        return (self.u.time_features(N) if self.u is not None else None,
                self.v.time_features(N) if self.v is not None else None,
                self.prior.stacked())

    def drift(self, x, n, prior_stacked=None):
        """f(x, n) for the configured method (without controls)."""
        x = ad.as_tensor(x)
        s2 = self.sigma ** 2
        m = self.method
        if m == "DIS":
            return self.prior.score(x, prior_stacked) * (-s2)
        if m in ("MCD", "CMCD"):
            beta = annealing_betas(self.n_steps)[n]
            if beta == 0.0:
                return self.prior.score(x, prior_stacked) * s2
            if beta == 1.0:
                return self.target.score(x) * s2
            return (self.prior.score(x, prior_stacked) * ((1.0 - beta) * s2)
                    + self.target.score(x) * (beta * s2))
        if m == "DBS":
            if self.config.dbs_drift == "zero":
                return ad.Tensor(np.zeros(x.shape))
            return self.target.score(x) * s2
        raise ValueError("method NONE has no drift")

    def _fields(self, x, n, caches):
        """Drift, forward control and backward control at state index n."""
        N = self.n_steps
        f = self.drift(x, n, caches[2])
        u = self.u.eval(x, n, N, self.target, caches[0]) if self.u is not None else None
        v = self.v.eval(x, n, N, self.target, caches[1]) if self.v is not None else None
        return f, u, v

    def forward_mean(self, x, fields, dt):
        f, u, _ = fields
        drift = f if u is None else f + u * self.sigma
        return x + drift * dt

    def backward_mean(self, x, fields, dt):
        f, u, v = fields
        s = self.sigma
        m = self.method
        if m == "CMCD":
            return x + (f - u * s) * dt
        if v is not None:
            return x - (f - v * s) * dt
        return x - f * dt

    def kernel_var(self, dt):
        return dt * (2.0 * self.sigma ** 2)

    def forward_logpdf(self, x_next, x, n, caches=None):
        """log of the forward transition density from (x, n) to x_next."""
        dt = self.schedule.dts(self.n_steps)[n]
        caches = caches or self._caches()
        mean = self.forward_mean(ad.as_tensor(x), self._fields(x, n, caches), dt)
        return gaussian_logpdf(x_next, mean, self.kernel_var(dt))

    def backward_logpdf(self, x_prev, x, n, caches=None):
        """log of the backward transition density from (x, n) to x_prev (index n - 1)."""
        if not 1 <= n <= self.n_steps:
            raise ValueError("backward kernel index must be in 1..N")
        dt = self.schedule.dts(self.n_steps)[n - 1]
        caches = caches or self._caches()
        mean = self.backward_mean(ad.as_tensor(x), self._fields(x, n, caches), dt)
        return gaussian_logpdf(x_prev, mean, self.kernel_var(dt))

    # simulation

    def _finish(self, states, log_w, comps, noise):
        xs = states[-1].data
        finite = np.isfinite(log_w.data) & np.all(np.isfinite(xs), axis=1)
        bad = 1.0 - finite.mean()
        if bad > self.config.max_nonfinite:
            raise NumericalAbort(f"{bad:.1%} of paths are non-finite")
        return Trajectory(states, log_w, comps, noise, finite)

    def simulate_forward(self, rng, batch, detach=False, comp_rng=None):
        """Sample x_0 from the prior by reparameterization and run the forward chain.

        With ``detach`` the whole simulation runs without graph recording.
        Component indices come from ``comp_rng`` when given, else from ``rng``.
        """
        comps = self.prior.draw_components(comp_rng if comp_rng is not None else rng, batch)
        xi = rng.standard_normal((batch, self.prior.dim))
        noise = rng.standard_normal((self.n_steps, batch, self.prior.dim))
        if detach:
            with ad.no_grad():
                return self._simulate(comps, xi, noise)
        return self._simulate(comps, xi, noise)

    def _simulate(self, comps, xi, noise):
        N = self.n_steps
        caches = self._caches()
        x = self.prior.sample_reparam(xi, comps)
        states = [x]
        log_w = -self.prior.log_density(x, caches[2])
        if N > 0:
            dts = self.schedule.dts(N)
            s = self.sigma
            fields = self._fields(x, 0, caches)
            sq_noise = 0.0
            for n in range(N):
                dt = dts[n]
                var = self.kernel_var(dt)
                x_next = self.forward_mean(x, fields, dt) + ad.sqrt(dt) * (s * math.sqrt(2.0)) * noise[n]
                next_fields = self._fields(x_next, n + 1, caches)
                mb = self.backward_mean(x_next, next_fields, dt)
                # log bwd - log fwd; the normalizers cancel and the forward
                # residual is exactly the injected noise
                log_w = log_w + ad.sum(ad.square(x - mb), axis=1) * (-0.5) / var
                sq_noise = sq_noise + np.sum(noise[n] ** 2, axis=1)
                x, fields = x_next, next_fields
                states.append(x)
            log_w = log_w + 0.5 * sq_noise
        log_w = log_w + self.target.log_rho(x)
        return self._finish(states, log_w, comps, noise)

    def path_log_weights(self, states):
        """log_w of given (constant) paths, differentiable in the parameters.

        ``states`` is an array of shape (N + 1, B, d).
        """
        states = np.asarray(states, dtype=np.float64)
        N = self.n_steps
        if states.shape[0] != N + 1:
            raise ad.ShapeError(f"expected {N + 1} states, got {states.shape[0]}")
        caches = self._caches()
        log_w = -self.prior.log_density(states[0], caches[2])
        if N > 0:
            dts = self.schedule.dts(N)
            fields = self._fields(ad.Tensor(states[0]), 0, caches)
            for n in range(N):
                dt = dts[n]
                var = self.kernel_var(dt)
                x, x_next = states[n], states[n + 1]
                mf = self.forward_mean(ad.Tensor(x), fields, dt)
                next_fields = self._fields(ad.Tensor(x_next), n + 1, caches)
                mb = self.backward_mean(ad.Tensor(x_next), next_fields, dt)
                log_w = log_w + (gaussian_logpdf(x, mb, var) - gaussian_logpdf(x_next, mf, var))
                fields = next_fields
        return log_w + self.target.log_rho(states[-1])

    def simulate_backward_from(self, x_end, rng):
        """Run the backward chain from given end points x_N.

        Returns ``(states, log_w)`` where ``log_w`` is the Eq.-style
        bracketed log-ratio evaluated on each sampled path (no gradients).
        """
        x_end = np.atleast_2d(np.asarray(x_end, dtype=np.float64))
        N = self.n_steps
        with ad.no_grad():
            states = [x_end]
            if N > 0:
                caches = self._caches()
                dts = self.schedule.dts_np(N)
                x = x_end
                for n in range(N - 1, -1, -1):
                    dt = dts[n]
                    fields = self._fields(ad.Tensor(x), n + 1, caches)
                    mb = self.backward_mean(ad.Tensor(x), fields, dt).data
                    x = mb + self.sigma * math.sqrt(2.0 * dt) * rng.standard_normal(x.shape)
                    states.append(x)
            states = np.stack(states[::-1])
            log_w = self.path_log_weights(states).data
        return states, log_w

    def simulate_forward_from(self, x_start, rng):
        """Run the forward chain from given start points x_0 (no gradients)."""
        x_start = np.atleast_2d(np.asarray(x_start, dtype=np.float64))
        N = self.n_steps
        with ad.no_grad():
            states = [x_start]
            if N > 0:
                caches = self._caches()
                dts = self.schedule.dts_np(N)
                x = x_start
                for n in range(N):
                    fields = self._fields(ad.Tensor(x), n, caches)
                    mf = self.forward_mean(ad.Tensor(x), fields, dts[n]).data
                    x = mf + self.sigma * math.sqrt(2.0 * dts[n]) * rng.standard_normal(x.shape)
                    states.append(x)
            states = np.stack(states)
            log_w = self.path_log_weights(states).data
        return states, log_w

    def sample(self, rng, n):
        """Draw ``n`` model samples without gradients; returns the Trajectory."""
        return self.simulate_forward(rng, n, detach=True)

    # serialization

    def state_dict(self):
        out = {"prior": self.prior.state_dict()}
        if self.schedule is not None:
            out["schedule"] = {"raw_amplitude": float(self.schedule.raw_amplitude.data)}
        for key, net in (("u", self.u), ("v", self.v)):
            if net is not None:
                out[key] = net.state_dict()
        return out

    def load_state_dict(self, state):
        from .priors import MixturePrior
        self.prior = MixturePrior.from_state_dict(state["prior"])
        if self.schedule is not None:
            self.schedule.raw_amplitude.data = np.asarray(state["schedule"]["raw_amplitude"],
                                                          dtype=np.float64)
        for key in ("u", "v"):
            net = getattr(self, key)
            if (net is None) != (key not in state):
                raise ValueError(f"checkpoint and model disagree on control {key!r}")
            if net is not None:
                net.load_state_dict(state[key])


def stationarity_check(prior, sigma=1.0, burn_in=5000, steps=100, rng=None, dt=1e-3,
                       n_chains=10000, thin=10, bins=200, init_std=3.0):
    """Total-variation distance between a long EM run and the prior density.

    Simulates ``x <- x + sigma^2 * score(x) * dt + sigma * sqrt(2 dt) * eps``,
    the Euler-Maruyama discretisation of ``dX = -sigma^2 grad log p(X) dt +
    sqrt(2) sigma dB`` integrated in its backward time direction, for
    ``n_chains`` chains.  After ``burn_in`` steps, ``steps`` states per chain
    are recorded every ``thin`` steps and binned (1-D or 2-D); returns the
    TV distance to the exact bin probabilities of ``prior``.
    """
    if steps <= 0:
        raise ValueError("stationarity check needs at least one recorded step")
    rng = rng if rng is not None else np.random.default_rng(0)
    d = prior.dim
    if d not in (1, 2):
        raise ValueError("stationarity check supports 1-D and 2-D priors")
    x = init_std * rng.standard_normal((n_chains, d))
    s2 = sigma ** 2
    noise_scale = sigma * math.sqrt(2.0 * dt)
    kept = []
    total = burn_in + steps * thin
    for i in range(total):
        x = x + s2 * prior.score_np(x) * dt + noise_scale * rng.standard_normal(x.shape)
        if not np.all(np.isfinite(x)):
            raise NumericalAbort("stationarity chain diverged")
        if i >= burn_in and (i - burn_in) % thin == thin - 1:
            kept.append(x.copy())
    samples = np.concatenate(kept)
    return _tv_to_prior(samples, prior, bins)


def _tv_to_prior(samples, prior, bins):
    from scipy.stats import norm
    means = np.stack([c.mean.data for c in prior.components])
    stds = np.stack([c.std_np() for c in prior.components])
    w = prior.weights
    lo = (means - 6 * stds).min(axis=0)
    hi = (means + 6 * stds).max(axis=0)
    edges = [np.linspace(lo[j], hi[j], bins + 1) for j in range(prior.dim)]
    # outer bins absorb the tails
    for e in edges:
        e[0], e[-1] = -np.inf, np.inf
    hist, _ = np.histogramdd(samples, bins=edges)
    hist = hist / samples.shape[0]
    exact = 0.0
    for k in range(prior.n_components):
        per_dim = [np.diff(norm.cdf(e, means[k, j], stds[k, j])) for j, e in enumerate(edges)]
        prob = per_dim[0]
        for p in per_dim[1:]:
            prob = np.multiply.outer(prob, p)
        exact = exact + w[k] * prob
    return 0.5 * float(np.abs(hist - exact).sum())
