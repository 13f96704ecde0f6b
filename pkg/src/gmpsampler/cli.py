"""Command line interface: ``gmpsampler run | eval | export``."""

import argparse
import json
import sys
import warnings

from . import config as cfgmod
from .dynamics import NumericalAbort
from .targets import DatasetError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def _parser():
    p = argparse.ArgumentParser(prog="gmpsampler",
                                description="Diffusion samplers with learnable mixture priors.")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="train a sampler (or run SMC) and write a run directory")
    r.add_argument("--config", help="TOML experiment file; flags override its values")
    r.add_argument("--target", help="gaussian | funnel | gmm2d | logreg | phi4")
    r.add_argument("--target-param", action="append", default=[], metavar="KEY=VALUE",
                   help="target parameter, e.g. kappa=0.5 (repeatable)")
    r.add_argument("--method", help="DIS | MCD | CMCD | DBS | NONE | SMC")
    r.add_argument("--prior", help="fixed | gaussian | gmp")
    r.add_argument("--K", type=int, help="mixture components (final count with --imr)")
    r.add_argument("--N", type=int, help="diffusion steps")
    r.add_argument("--loss", help="kl | logvar")
    r.add_argument("--steps", type=int, help="training steps")
    r.add_argument("--batch", type=int, help="training batch size")
    r.add_argument("--seed", type=int)
    r.add_argument("--out", help="output directory")
    r.add_argument("--dataset", help="CSV file for the logreg target")
    r.add_argument("--label-col", help="label column of --dataset")
    r.add_argument("--imr", action="store_true", default=None,
                   help="grow the prior by iterative model refinement")
    r.add_argument("--score-head", action="store_true", default=None,
                   help="add a learned gate on the target score to the controls")
    r.add_argument("--no-export", action="store_true", help="skip plot data and figures")

    e = sub.add_parser("eval", help="evaluate a checkpoint on fresh samples")
    e.add_argument("checkpoint")
    e.add_argument("--m", type=int, default=2000, help="number of paths")
    e.add_argument("--seed", type=int)
    e.add_argument("--spectral", action="store_true", help="also estimate the control norm S")

    x = sub.add_parser("export", help="write plot CSVs and PNG figures for a run directory")
    x.add_argument("run_dir")
    x.add_argument("--no-figures", action="store_true")
    return p


def _parse_value(text):
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def build_config(args):
    data = cfgmod.load(args.config).to_dict() if args.config else {}
    target = data.setdefault("target", {})
    if args.target:
        target["name"] = args.target
    for item in args.target_param:
        if "=" not in item:
            raise cfgmod.ConfigError(f"--target-param expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        target.setdefault("params", {})[k] = _parse_value(v)
    if args.dataset:
        target["dataset"] = args.dataset
    if args.label_col:
        target["label_column"] = args.label_col
    for key in ("method", "prior", "K", "N", "loss", "seed", "out"):
        val = getattr(args, key)
        if val is not None:
            data[key] = val
    if args.score_head:
        data["score_head"] = True
    if args.steps is not None:
        data.setdefault("train", {})["steps"] = args.steps
    if args.batch is not None:
        data.setdefault("train", {})["batch"] = args.batch
    if args.imr:
        data.setdefault("refinement", {})["enabled"] = True
    return cfgmod.ExperimentConfig.from_dict(data)


def main(argv=None):
    args = _parser().parse_args(argv)
    from . import runner
    try:
        if args.command == "run":
            cfg = build_config(args)
            art = runner.run(cfg)
            if not args.no_export:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", UserWarning)
                    runner.export_plot_data(art.out_dir)
            print(f"artifacts written to {art.out_dir}")
        elif args.command == "eval":
            rep = runner.eval_checkpoint(args.checkpoint, args.m, args.seed, spectral=args.spectral)
            print(rep.to_json())
        else:
            files = runner.export_plot_data(args.run_dir, figures=not args.no_figures)
            print(json.dumps(files, indent=1))
    except (cfgmod.ConfigError, DatasetError, KeyError, FileNotFoundError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
