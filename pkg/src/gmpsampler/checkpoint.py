"""JSON checkpoints with explicit shape metadata.

Floats are written with Python's shortest round-trip repr, so loading a
checkpoint and saving it again reproduces the file byte for byte.
"""

import json

from . import __version__

FORMAT = "gmpsampler-checkpoint"


def checkpoint_dict(sampler, config, step=None, label="final"):
    return {
        "format": FORMAT,
        "version": 1,
        "label": label,
        "step": step,
        "dim": sampler.target.dim,
        "method": sampler.method,
        "n_steps": sampler.n_steps,
        "n_components": sampler.prior.n_components,
        "config": config.to_dict(),
        "state": sampler.state_dict(),
        "provenance": {"package_version": __version__, "seed": config.seed},
    }


def dumps(data):
    return json.dumps(data, indent=1, sort_keys=True) + "\n"


def save(path, data):
    with open(path, "w") as fh:
        fh.write(dumps(data))


def load(path):
    with open(path) as fh:
        data = json.load(fh)
    if data.get("format") != FORMAT:
        raise ValueError(f"{path} is not a {FORMAT} file")
    return data
