"""Experiment configuration: TOML files, flag overrides and seeded RNG substreams."""

import sys
import zlib
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .dynamics import METHODS
from .losses import LOSSES

PRIOR_KINDS = ("fixed", "gaussian", "gmp")
RUN_METHODS = METHODS + ("SMC",)
STREAMS = ("prior-init", "path-noise", "component-draw", "mala", "eval")


class ConfigError(ValueError):
    pass


@dataclass
class TargetSpec:
    name: str = "gaussian"
    params: dict = field(default_factory=dict)
    dataset: str = None
    label_column: str = None


@dataclass
class TrainSpec:
    steps: int = 3000
    batch: int = 2000
    lr_net: float = 8e-3
    lr_prior: float = 1e-2
    clip: float = 1.0
    decay_start: float = 0.4
    eval_every: int = 0
    eval_batch: int = 2000
    window: int = 5
    select: str = "elbo"


@dataclass
class ModelSpec:
    sigma: float = 1.0
    init_amplitude: float = 0.1
    hidden: int = 128
    emb_width: int = 32
    dbs_drift: str = "target"
    prior_mean: float = 0.0
    prior_std: float = 1.0


@dataclass
class RefinementSpec:
    enabled: bool = False
    interval: int = 500
    new_std: float = 1.0
    n_chains: int = 256
    mala_steps: int = 64
    init_std: float = 5.0
    step_scale: float = 5.0
    mala_dt: float = 1e-2
    rollouts: int = 4
    heuristic: str = "backward"


@dataclass
class SMCSpec:
    n_anneal: int = 128
    particles: int = 2000
    init_scale: float = 1.0
    resample_threshold: float = 0.3
    step_low: float = 0.001
    step_high: float = 0.1
    n_leapfrog: int = 5


@dataclass
class ExperimentConfig:
    target: TargetSpec = field(default_factory=TargetSpec)
    method: str = "DIS"
    prior: str = "gaussian"
    K: int = 1
    N: int = 32
    loss: str = "kl"
    score_head: bool = False
    seed: int = 0
    out: str = "runs/default"
    eval_samples: int = 2000
    checkpoint_every: int = 0      # in evaluations; 0 writes only the final checkpoint
    train: TrainSpec = field(default_factory=TrainSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    refinement: RefinementSpec = field(default_factory=RefinementSpec)
    smc: SMCSpec = field(default_factory=SMCSpec)
    substream_seeds: dict = field(default_factory=dict)

    def __post_init__(self):
        self.method = str(self.method).upper()
        self.validate()

    def validate(self):
        if self.method not in RUN_METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {RUN_METHODS}")
        if self.prior not in PRIOR_KINDS:
            raise ConfigError(f"unknown prior {self.prior!r}; expected one of {PRIOR_KINDS}")
        if self.loss not in LOSSES:
            raise ConfigError(f"unknown loss {self.loss!r}; expected one of {LOSSES}")
        if self.K < 1:
            raise ConfigError("K must be >= 1")
        if self.prior in ("fixed", "gaussian") and self.K != 1:
            raise ConfigError(f"prior {self.prior!r} has a single component; use 'gmp' for K > 1")
        if self.refinement.enabled and self.prior != "gmp":
            raise ConfigError("refinement grows a mixture; it needs prior 'gmp'")
        if self.refinement.enabled and self.method in ("SMC",):
            raise ConfigError("refinement applies to trained samplers only")
        if self.method == "NONE":
            self.N = 0
        elif self.method != "SMC" and self.N < 1:
            raise ConfigError("diffusion methods need N >= 1 (use method NONE for N = 0)")
        if self.train.steps < 1:
            raise ConfigError("train.steps must be >= 1")
        if self.eval_samples < 1:
            raise ConfigError("eval_samples must be >= 1")
        unknown = set(self.substream_seeds) - set(STREAMS)
        if unknown:
            raise ConfigError(f"unknown RNG substreams {sorted(unknown)}")

    def to_dict(self):
        return _drop_none(asdict(self))

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        nested = {"target": TargetSpec, "train": TrainSpec, "model": ModelSpec,
                  "refinement": RefinementSpec, "smc": SMCSpec}
        kwargs = {}
        known = {f.name for f in fields(cls)}
        for key, value in data.items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            if key in nested:
                sub = nested[key]
                sub_known = {f.name for f in fields(sub)}
                if not isinstance(value, dict) or set(value) - sub_known:
                    bad = set(value) - sub_known if isinstance(value, dict) else value
                    raise ConfigError(f"invalid [{key}] section: {bad}")
                value = sub(**value)
            kwargs[key] = value
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


def _drop_none(obj):
    if isinstance(obj, dict):
        return {k: _drop_none(v) for k, v in obj.items() if v is not None}
    return obj


def dumps(cfg):
    return tomli_w.dumps(cfg.to_dict())


def loads(text):
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML: {exc}") from None
    return ExperimentConfig.from_dict(data)


def load(path):
    try:
        with open(path, "rb") as fh:
            text = fh.read().decode()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return loads(text)


def save(cfg, path):
    with open(path, "w") as fh:
        fh.write(dumps(cfg))


def rng_streams(seed, overrides=None):
    """Independent named Generators derived from one seed.

    Each stream's key is a hash of its name, so changing one stream's seed via
    ``overrides`` leaves all others untouched.
    """
    overrides = overrides or {}
    out = {}
    for name in STREAMS:
        s = overrides.get(name, seed)
        ss = np.random.SeedSequence(entropy=int(s), spawn_key=(zlib.crc32(name.encode()),))
        out[name] = np.random.default_rng(ss)
    return out
