"""Iterative model refinement: grow the mixture prior one component at a time.

New component means are chosen among MALA candidates by the expected log
importance weight of backward rollouts started at each candidate, which
favours points of high target density that the current prior covers poorly.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .dynamics import NumericalAbort


@dataclass
class RefinementSchedule:
    interval: int = 500
    k_max: int = 10
    new_std: float = 1.0
    n_chains: int = 256
    mala_steps: int = 64
    init_std: float = 5.0
    step_scale: float = 5.0
    mala_dt: float = 1e-2
    rollouts: int = 4
    heuristic: str = "backward"   # or "forward": score candidates as x_0 under forward rollouts

    def __post_init__(self):
        if self.interval < 1:
            raise ValueError("refinement interval must be >= 1")
        if self.k_max < 1:
            raise ValueError("k_max must be >= 1")
        if self.new_std <= 0 or self.init_std <= 0 or self.step_scale < 0 or self.mala_dt <= 0:
            raise ValueError("refinement scales must be positive")
        if self.rollouts < 1 or self.n_chains < 1 or self.mala_steps < 0:
            raise ValueError("rollouts, chains and steps must be positive")
        if self.heuristic not in ("backward", "forward"):
            raise ValueError("heuristic must be 'backward' or 'forward'")

    def due(self, step, n_components):
        return step > 0 and step % self.interval == 0 and n_components < self.k_max


@dataclass
class CandidateSet:
    x: np.ndarray
    scores: np.ndarray = None
    acceptance: float = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x = np.atleast_2d(np.asarray(self.x, dtype=np.float64))
        if self.x.shape[0] < 1:
            raise ValueError("candidate set is empty")


def langevin_log_q(y, x, score_x, h):
    """log N(y | x + h score(x), 2h I), the Langevin proposal density."""
    d = x.shape[-1]
    r = y - x - h * score_x
    return -np.sum(r * r, axis=-1) / (4.0 * h) - 0.5 * d * math.log(4.0 * math.pi * h)


def mala_log_accept(x, y, log_pi, score, h):
    """log of the Metropolis-Hastings acceptance probability for x -> y."""
    lx, ly = log_pi(x), log_pi(y)
    log_ratio = ly + langevin_log_q(x, y, score(y), h) - lx - langevin_log_q(y, x, score(x), h)
    return np.minimum(0.0, log_ratio)


def mala_candidates(target, rng, init_std=5.0, n_chains=256, n_steps=64, step_scale=5.0, dt=1e-2):
    """Run MALA chains from N(0, init_std^2 I) on the target; final states are candidates.

    Proposal ``y = x + s^2 score(x) dt + s sqrt(2 dt) eps`` with ``s = step_scale``.
    """
    x = init_std * rng.standard_normal((n_chains, target.dim))
    h = step_scale ** 2 * dt
    accepted = 0
    if h > 0:
        lp, sc = target.log_rho_np(x), target.score_np(x)
        for _ in range(n_steps):
            y = x + h * sc + math.sqrt(2.0 * h) * rng.standard_normal(x.shape)
            ly, sy = target.log_rho_np(y), target.score_np(y)
            log_r = (ly + langevin_log_q(x, y, sy, h)) - (lp + langevin_log_q(y, x, sc, h))
            ok = np.isfinite(log_r) & np.all(np.isfinite(y), axis=1) & np.all(np.isfinite(sy), axis=1)
            acc = ok & (np.log(rng.uniform(size=n_chains)) < np.where(ok, log_r, -np.inf))
            x = np.where(acc[:, None], y, x)
            lp = np.where(acc, ly, lp)
            sc = np.where(acc[:, None], sy, sc)
            accepted += int(acc.sum())
    if not np.all(np.isfinite(x)):
        raise NumericalAbort("MALA candidates became non-finite")
    rate = accepted / (n_chains * n_steps) if n_steps and h > 0 else 1.0
    return CandidateSet(x, acceptance=rate,
                        provenance={"init_std": init_std, "n_chains": n_chains, "n_steps": n_steps,
                                    "step_scale": step_scale, "dt": dt})


def score_candidates(sampler, candidates, rng, rollouts=4, heuristic="backward"):
    """Mean log importance weight of ``rollouts`` paths through each candidate.

    With the default heuristic a candidate is the end point x_N and paths run
    backward; with ``"forward"`` it is the start point x_0.  Non-finite scores
    become -inf so the candidate can never win.
    """
    x = candidates.x if isinstance(candidates, CandidateSet) else np.atleast_2d(candidates)
    C = x.shape[0]
    reps = np.repeat(x, rollouts, axis=0)
    if heuristic == "backward":
        _, lw = sampler.simulate_backward_from(reps, rng)
    elif heuristic == "forward":
        _, lw = sampler.simulate_forward_from(reps, rng)
    else:
        raise ValueError(f"unknown heuristic {heuristic!r}")
    scores = lw.reshape(C, rollouts).mean(axis=1)
    scores = np.where(np.isfinite(scores), scores, -np.inf)
    if isinstance(candidates, CandidateSet):
        candidates.scores = scores
    return scores


def refine(sampler, schedule, candidates, scores=None):
    """Add a prior component at the best-scoring candidate.

    Returns the new mean, or None when the prior already has ``k_max``
    components.
    """
    prior = sampler.prior
    if prior.n_components >= schedule.k_max:
        return None
    x = candidates.x if isinstance(candidates, CandidateSet) else np.atleast_2d(candidates)
    if scores is None:
        scores = candidates.scores
    scores = np.asarray(scores, dtype=np.float64)
    if x.shape[0] == 0 or scores.size == 0:
        raise ValueError("empty candidate set")
    if not np.any(np.isfinite(scores)):
        raise ValueError("no candidate has a finite score")
    best = int(np.argmax(np.where(np.isfinite(scores), scores, -np.inf)))
    mean = x[best].copy()
    prior.add_component(mean, schedule.new_std)
    return mean


def refinement_round(sampler, schedule, rng):
    """Generate, score and apply one refinement; returns (mean or None, CandidateSet)."""
    cands = mala_candidates(sampler.target, rng, schedule.init_std, schedule.n_chains,
                            schedule.mala_steps, schedule.step_scale, schedule.mala_dt)
    score_candidates(sampler, cands, rng, schedule.rollouts, schedule.heuristic)
    return refine(sampler, schedule, cands), cands
