"""Run orchestration: build a model from a config, train or run SMC, write artifacts."""

import csv
import json
import logging
import os
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from . import checkpoint as ckpt
from . import config as cfgmod
from . import metrics
from .dynamics import DiffusionConfig, DiffusionSampler
from .priors import MixturePrior
from .refinement import RefinementSchedule
from .smc import HMCKernel, smc_run
from .targets import Phi4Lattice, make_target
from .training import HISTORY_COLUMNS, TrainConfig, train

logger = logging.getLogger(__name__)

SPECTRAL_PATHS = 256


@dataclass
class RunArtifact:
    out_dir: str
    config: cfgmod.ExperimentConfig
    report: metrics.MetricsReport
    files: dict = field(default_factory=dict)
    summary: dict = field(default_factory=dict)


def build_target(cfg):
    params = dict(cfg.target.params)
    if cfg.target.dataset:
        params["dataset"] = cfg.target.dataset
        params["label_col"] = cfg.target.label_column or "label"
    return make_target(cfg.target.name, **params)


def build_prior(cfg, dim):
    k = 1 if cfg.refinement.enabled else cfg.K
    means = np.full((k, dim), float(cfg.model.prior_mean))
    return MixturePrior.mixture(means, cfg.model.prior_std, trainable=cfg.prior != "fixed")


def build_sampler(cfg, target=None, streams=None):
    target = target if target is not None else build_target(cfg)
    streams = streams or cfgmod.rng_streams(cfg.seed, cfg.substream_seeds)
    m = cfg.model
    dcfg = DiffusionConfig(method=cfg.method, n_steps=cfg.N, sigma=m.sigma,
                           init_amplitude=m.init_amplitude, use_score_head=cfg.score_head,
                           dbs_drift=m.dbs_drift, hidden=m.hidden, emb_width=m.emb_width)
    net_seed = int(streams["prior-init"].integers(2 ** 31))
    return DiffusionSampler(target, build_prior(cfg, target.dim), dcfg, seed=net_seed)


def train_config(cfg):
    t = cfg.train
    return TrainConfig(steps=t.steps, batch=t.batch, loss=cfg.loss, lr_net=t.lr_net,
                       lr_prior=t.lr_prior, clip=t.clip, decay_start=t.decay_start,
                       eval_every=t.eval_every, eval_batch=t.eval_batch, window=t.window,
                       select=t.select)


def refinement_schedule(cfg):
    if not cfg.refinement.enabled:
        return None
    r = cfg.refinement
    return RefinementSchedule(interval=r.interval, k_max=cfg.K, new_std=r.new_std,
                              n_chains=r.n_chains, mala_steps=r.mala_steps, init_std=r.init_std,
                              step_scale=r.step_scale, mala_dt=r.mala_dt, rollouts=r.rollouts,
                              heuristic=r.heuristic)


def _lattice_size(target):
    return target.L if isinstance(target, Phi4Lattice) else None


def _reference(target, rng, n):
    return target.sample(rng, n) if target.has_sampler else None


def evaluate(sampler, rng, m=2000, spectral=True):
    """MetricsReport and trajectory from ``m`` fresh paths of ``sampler``."""
    target = sampler.target
    traj = sampler.sample(rng, m)
    lw = traj.log_w_np[traj.finite]
    rep = metrics.weight_report(lw, target.log_z, _lattice_size(target))
    x = traj.samples[traj.finite]
    if target.mode_centers is not None:
        rep.emc = metrics.emc(x, target.mode_centers)
    ref = _reference(target, rng, min(m, 1000))
    if ref is not None:
        k = min(len(ref), x.shape[0])
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", metrics.SinkhornWarning)
            rep.sinkhorn = metrics.sinkhorn(x[:k], ref[:k])
    if spectral and sampler.n_steps > 0:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", metrics.PowerIterationWarning)
            sub = traj.states_np()[:, :SPECTRAL_PATHS]
            rep.s_norm = metrics.sampler_spectral_norm(sampler, sub, rng=rng)
    return rep, traj


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _write_samples(path, x, comps=None):
    d = x.shape[1]
    header = [f"x{j}" for j in range(d)] + ["component"]
    comps = np.full(len(x), -1) if comps is None else comps
    _write_csv(path, header, [[repr(float(v)) for v in row] + [int(c)] for row, c in zip(x, comps)])


def _write_histogram(path, samples):
    mass, edges = metrics.magnetization_histogram(samples)
    _write_csv(path, ["bin_left", "bin_right", "mass"],
               [[repr(float(a)), repr(float(b)), repr(float(p))]
                for a, b, p in zip(edges[:-1], edges[1:], mass)])


def run(cfg, quiet=False):
    """Execute a configured experiment and write its artifact directory."""
    out = cfg.out
    os.makedirs(out, exist_ok=True)
    files = {"config": os.path.join(out, "config.toml")}
    cfgmod.save(cfg, files["config"])
    streams = cfgmod.rng_streams(cfg.seed, cfg.substream_seeds)
    target = build_target(cfg)
    lattice = _lattice_size(target)
    if cfg.method == "SMC":
        s = cfg.smc
        res = smc_run(target, streams["path-noise"], s.init_scale, s.n_anneal, s.particles,
                      s.resample_threshold, HMCKernel(s.step_low, s.step_high, s.n_leapfrog))
        rep = metrics.MetricsReport(log_z_hat=res.log_z, ess=metrics.ess(res.log_weights))
        if target.log_z is not None:
            rep.delta_log_z = abs(target.log_z - res.log_z)
        if lattice is not None:
            rep.free_energy_bound = res.log_z / lattice ** 2
        if target.mode_centers is not None:
            rep.emc = metrics.emc(res.particles, target.mode_centers)
        samples, comps = res.particles, None
        summary = {"log_z_hat": res.log_z, "resamples": res.n_resamples,
                   "hmc_acceptance": res.acceptance}
        files["metrics"] = os.path.join(out, "metrics.csv")
        _write_csv(files["metrics"], HISTORY_COLUMNS, [])
    else:
        sampler = build_sampler(cfg, target, streams)
        files["metrics"] = os.path.join(out, "metrics.csv")
        every = cfg.checkpoint_every
        n_evals = [0]

        def on_eval(step, smp, row):
            n_evals[0] += 1
            if every and n_evals[0] % every == 0:
                ckpt.save(os.path.join(out, f"checkpoint_step{step}.json"),
                          ckpt.checkpoint_dict(smp, cfg, step, "periodic"))

        result = train(sampler, train_config(cfg), streams, refinement_schedule(cfg),
                       log_path=files["metrics"], callback=on_eval)
        files["checkpoint_final"] = os.path.join(out, "checkpoint_final.json")
        ckpt.save(files["checkpoint_final"], ckpt.checkpoint_dict(sampler, cfg, cfg.train.steps))
        sampler.load_state_dict(result.best_state)
        files["checkpoint"] = os.path.join(out, "checkpoint.json")
        ckpt.save(files["checkpoint"], ckpt.checkpoint_dict(sampler, cfg, result.best_step, "best"))
        rep, traj = evaluate(sampler, streams["eval"], cfg.eval_samples)
        samples, comps = traj.samples[traj.finite], traj.components[traj.finite]
        final = result.final
        summary = {"best_step": result.best_step, "final_elbo_avg": final.get("elbo_avg"),
                   "final_ess_avg": final.get("ess_avg"), "skipped_steps": result.skipped_steps,
                   "n_components": sampler.prior.n_components}
        files["refinements"] = os.path.join(out, "refinements.json")
        with open(files["refinements"], "w") as fh:
            json.dump(result.refinements, fh)
    files["samples"] = os.path.join(out, "samples.csv")
    _write_samples(files["samples"], samples, comps)
    if lattice is not None:
        files["histogram"] = os.path.join(out, "histogram.csv")
        _write_histogram(files["histogram"], samples)
    files["report"] = os.path.join(out, "report.json")
    with open(files["report"], "w") as fh:
        json.dump({"metrics": json.loads(rep.to_json()), "summary": summary,
                   "provenance": {"package_version": __version__, "seed": cfg.seed}},
                  fh, indent=1, sort_keys=True)
    if not quiet:
        print_summary(cfg, rep, summary)
    return RunArtifact(out, cfg, rep, files, summary)


def print_summary(cfg, rep, summary):
    label = f"{cfg.method}-{cfg.prior}" + (f"(K={cfg.K})" if cfg.K > 1 else "")
    print(f"run: {label} on {cfg.target.name}, seed {cfg.seed}")
    for k, v in list(vars(rep).items()) + list(summary.items()):
        if v is not None:
            print(f"  {k:<18} {v:.6g}" if isinstance(v, float) else f"  {k:<18} {v}")


def load_sampler(path):
    """Rebuild a sampler (with its target) from a checkpoint file."""
    data = ckpt.load(path)
    cfg = cfgmod.ExperimentConfig.from_dict(data["config"])
    target = build_target(cfg)
    if target.dim != data["dim"]:
        raise ValueError(f"checkpoint dim {data['dim']} != target dim {target.dim}")
    sampler = build_sampler(cfg, target)
    sampler.load_state_dict(data["state"])
    return sampler, cfg, data


def eval_checkpoint(path, m=2000, seed=None, target=None, spectral=False):
    """Fresh MetricsReport of a checkpoint from ``m`` paths.

    ``target`` optionally replaces the configured one (dimensions must match).
    """
    sampler, cfg, _ = load_sampler(path)
    if target is not None:
        if target.dim != sampler.target.dim:
            raise ValueError(f"target dim {target.dim} != checkpoint dim {sampler.target.dim}")
        sampler.target = target
    streams = cfgmod.rng_streams(cfg.seed if seed is None else seed, cfg.substream_seeds)
    rep, _ = evaluate(sampler, streams["eval"], m, spectral=spectral)
    return rep


def _read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


# Column order of every exported file, fixed for downstream plotting.
EXPORT_COLUMNS = {
    "elbo_curve.csv": ["step", "elbo", "elbo_avg"],
    "ess_curve.csv": ["step", "ess", "ess_avg"],
    "scatter.csv": None,               # x0..x{d-1}, component
    "magnetization_hist.csv": ["bin_left", "bin_right", "mass"],
    "candidates.csv": ["round", "step", "candidate", "score", "chosen", "coords"],
}


def export_plot_data(run_dir, figures=True):
    """Write plot-ready CSVs (and PNG figures) under ``run_dir/plots``.

    Sections missing from the artifact produce header-only files and a warning.
    """
    plots = os.path.join(run_dir, "plots")
    os.makedirs(plots, exist_ok=True)
    written = {}

    metrics_path = os.path.join(run_dir, "metrics.csv")
    rows = []
    if os.path.exists(metrics_path):
        header, body = _read_csv(metrics_path)
        rows = [dict(zip(header, r)) for r in body]
    else:
        warnings.warn("run has no metrics.csv; curves left empty")
    for name in ("elbo_curve.csv", "ess_curve.csv"):
        cols = EXPORT_COLUMNS[name]
        data = [[r.get(c, "") for c in cols] for r in rows if r.get(cols[1], "") != ""]
        written[name] = os.path.join(plots, name)
        _write_csv(written[name], cols, data)

    samples_path = os.path.join(run_dir, "samples.csv")
    written["scatter.csv"] = os.path.join(plots, "scatter.csv")
    if os.path.exists(samples_path):
        header, body = _read_csv(samples_path)
        _write_csv(written["scatter.csv"], header, body)
    else:
        warnings.warn("run has no samples.csv; scatter left empty")
        _write_csv(written["scatter.csv"], ["x0", "x1", "component"], [])

    hist_path = os.path.join(run_dir, "histogram.csv")
    written["magnetization_hist.csv"] = os.path.join(plots, "magnetization_hist.csv")
    if os.path.exists(hist_path):
        header, body = _read_csv(hist_path)
        _write_csv(written["magnetization_hist.csv"], header, body)
    else:
        warnings.warn("run has no magnetization histogram")
        _write_csv(written["magnetization_hist.csv"], EXPORT_COLUMNS["magnetization_hist.csv"], [])

    ref_path = os.path.join(run_dir, "refinements.json")
    cand_rows = []
    if os.path.exists(ref_path):
        with open(ref_path) as fh:
            rounds = json.load(fh)
        for i, r in enumerate(rounds):
            best = int(np.argmax(r["scores"]))
            for j, (x, s) in enumerate(zip(r["candidates"], r["scores"])):
                cand_rows.append([i, r["step"], j, repr(float(s)), int(j == best),
                                  " ".join(repr(float(v)) for v in x)])
    else:
        warnings.warn("run has no refinement audit")
    written["candidates.csv"] = os.path.join(plots, "candidates.csv")
    _write_csv(written["candidates.csv"], EXPORT_COLUMNS["candidates.csv"], cand_rows)

    if figures:
        from .plotting import render_figures
        written.update(render_figures(plots))
    return written
