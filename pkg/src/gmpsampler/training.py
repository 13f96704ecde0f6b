"""The training loop: simulate, loss, backward, Adam, periodic evaluation and refinement."""

import copy
import csv
import time
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import metrics
from .losses import LOSSES, batch_loss
from .optim import Adam, cosine_factor
from .refinement import refinement_round

HISTORY_COLUMNS = ["step", "loss", "elbo", "log_z_hat", "ess", "delta_log_z", "emc",
                   "elbo_avg", "ess_avg", "n_components", "lr_factor", "skipped", "seconds"]


@dataclass
class TrainConfig:
    steps: int = 3000
    batch: int = 2000
    loss: str = "kl"
    lr_net: float = 8e-3
    lr_prior: float = 1e-2
    clip: float = 1.0
    decay_start: float = 0.4
    eval_every: int = 0          # 0: 100 evaluations over the run
    eval_batch: int = 2000
    window: int = 5
    select: str = "elbo"         # running-average criterion for the best state

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.batch < 1 or self.eval_batch < 1:
            raise ValueError("batch sizes must be >= 1")
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}; expected one of {LOSSES}")
        if min(self.lr_net, self.lr_prior) <= 0:
            raise ValueError("learning rates must be positive")
        if self.loss == "logvar" and self.batch < 2:
            raise ValueError("the log-variance loss needs batch >= 2")
        if self.select not in ("elbo", "ess", "log_z_hat"):
            raise ValueError("select must be elbo, ess or log_z_hat")
        if self.window < 1:
            raise ValueError("window must be >= 1")

    @property
    def eval_interval(self):
        return self.eval_every or max(1, self.steps // 100)


@dataclass
class TrainResult:
    history: list
    best_state: dict
    best_step: int
    best_score: float
    final_state: dict
    skipped_steps: int
    refinements: list = field(default_factory=list)

    @property
    def final(self):
        return self.history[-1] if self.history else {}


def _eval_row(sampler, rng, cfg):
    with ad.no_grad():
        traj = sampler.simulate_forward(rng, cfg.eval_batch, detach=True)
    lw = traj.log_w_np[traj.finite]
    row = {"elbo": metrics.elbo(lw), "log_z_hat": metrics.log_z_hat(lw), "ess": metrics.ess(lw)}
    if sampler.target.log_z is not None:
        row["delta_log_z"] = abs(sampler.target.log_z - row["log_z_hat"])
    if sampler.target.mode_centers is not None:
        row["emc"] = metrics.emc(traj.samples[traj.finite], sampler.target.mode_centers)
    return row


def train(sampler, cfg, streams, refinement=None, log_path=None, callback=None):
    """Optimize ``sampler`` in place.

    ``streams`` maps substream names ("path-noise", "component-draw", "mala",
    "eval") to numpy Generators.  Returns a :class:`TrainResult` whose
    ``best_state`` is the snapshot with the best running average of
    ``cfg.select`` over the last ``cfg.window`` evaluations.
    """
    opt = Adam({"prior": (sampler.prior_parameters(), cfg.lr_prior),
                "net": (sampler.network_parameters(), cfg.lr_net)}, clip=cfg.clip)
    window = {k: deque(maxlen=cfg.window) for k in ("elbo", "ess", "log_z_hat")}
    history, refinements = [], []
    best = (-np.inf, None, -1)
    interval = cfg.eval_interval
    writer = None
    fh = None
    if log_path is not None:
        fh = open(log_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(HISTORY_COLUMNS)
    t0 = time.perf_counter()
    loss_val = float("nan")
    try:
        for step in range(1, cfg.steps + 1):
            if refinement is not None and refinement.due(step - 1, sampler.prior.n_components):
                mean, cands = refinement_round(sampler, refinement, streams["mala"])
                if mean is not None:
                    if sampler.prior.trainable:
                        new = sampler.prior.components[-1]
                        opt.add_params("prior", [new.mean, new.raw_scale])
                    refinements.append({"step": step - 1, "mean": mean.tolist(),
                                        "best_score": float(np.max(cands.scores)),
                                        "acceptance": cands.acceptance,
                                        "candidates": cands.x.tolist(),
                                        "scores": cands.scores.tolist()})
            params = opt.params()
            if params:
                loss, _, _ = batch_loss(sampler, cfg.loss, streams["path-noise"], cfg.batch,
                                        streams["component-draw"])
                loss_val = float(loss.data)
                if loss.requires_grad:
                    grads = ad.backward(loss, params)
                    opt.step(grads, cosine_factor(step - 1, cfg.steps, cfg.decay_start))
            if step % interval == 0 or step == cfg.steps:
                row = _eval_row(sampler, streams["eval"], cfg)
                for k in window:
                    window[k].append(row[k])
                row.update(step=step, loss=loss_val, n_components=sampler.prior.n_components,
                           lr_factor=cosine_factor(step - 1, cfg.steps, cfg.decay_start),
                           skipped=opt.skipped, seconds=time.perf_counter() - t0,
                           elbo_avg=float(np.mean(window["elbo"])),
                           ess_avg=float(np.mean(window["ess"])))
                history.append(row)
                score = float(np.mean(window[cfg.select]))
                if score > best[0]:
                    best = (score, copy.deepcopy(sampler.state_dict()), step)
                if writer is not None:
                    writer.writerow([_fmt(row.get(c)) for c in HISTORY_COLUMNS])
                    fh.flush()
                if callback is not None:
                    callback(step, sampler, row)
    finally:
        if fh is not None:
            fh.close()
    final_state = copy.deepcopy(sampler.state_dict())
    if best[1] is None:
        best = (float("nan"), final_state, cfg.steps)
    return TrainResult(history, best[1], best[2], best[0], final_state, opt.skipped, refinements)


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)
