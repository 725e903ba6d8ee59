"""Flat ``key = value`` run configuration.

One setting per line, ``#`` starts a comment, blank lines are ignored.
Keys are the fields of :class:`RunConfig`; anything else is an error that
names the key and its line. Tuples are comma-separated.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields

from zoaeds.certify import CertifyConfig
from zoaeds.errors import ArgumentError, ConfigError
from zoaeds.optim import OptimizerConfig
from zoaeds.training import TrainConfig, default_config, normalize_method
from zoaeds.zo_grad import EstimatorConfig

TASKS = ("classification", "reconstruction")


@dataclass
class RunConfig:
    # task and data
    task: str = "classification"
    data: str = ""  # training set file; empty selects the bundled toy digits
    test_data: str = ""
    n_train: int = 150
    n_test: int = 50
    seed: int = 0
    # defense training (mirrors TrainConfig)
    method: str = "zo_ae_ds"
    scheme: str = "scratch"
    gamma: float = 1.0
    sigma: float = 0.25
    estimator: str = ""  # empty: rge for zo_ds, cge otherwise
    q: int = 0  # 0: q = d_z (RGE budget matched to one CGE sweep)
    mu: float = 0.005
    optimizer: str = "adam"
    lr: float = 0.0  # 0: per-method default
    drop_factor: float = 0.1
    drop_interval: int = 0
    epochs: int = 20
    batch_size: int = 32
    target_mode: str = "hard"
    trainable: str = "denoiser_encoder"
    pretrain_epochs: int = 10
    finetune_lr: float = 0.0  # 0: per-method default
    # models
    d_z: int = 16
    denoiser_width: int = 0  # 0: 16 for classification, 32 for reconstruction
    base_epochs: int = 30
    ae_epochs: int = 60
    ae_lr: float = 3e-3
    # certification
    n0: int = 50
    n: int = 500
    alpha: float = 0.001
    radii: tuple = (0.0, 0.0625, 0.125, 0.25, 0.5)
    # reconstruction
    measurement_m: int = 48
    epsilons: tuple = (0.0, 0.5, 1.0, 1.5, 2.0)
    attack_steps: int = 40

    def __post_init__(self):
        if self.task not in TASKS:
            raise ArgumentError(f"task must be one of {TASKS}, got {self.task!r}")
        self.method = normalize_method(self.method)
        self.scheme = self.scheme.lower().replace("-", "_")
        if self.estimator not in ("", "rge", "cge"):
            raise ArgumentError(f"estimator must be rge or cge, got {self.estimator!r}")
        if self.q < 0 or self.d_z < 1:
            raise ArgumentError("q must be >= 0 and d_z >= 1")
        self.radii = tuple(float(r) for r in self.radii)
        self.epsilons = tuple(float(e) for e in self.epsilons)
        self.train_config()  # validates the TrainConfig-facing fields

    def estimator_config(self) -> EstimatorConfig:
        kind = self.estimator or ("rge" if self.method == "zo_ds" else "cge")
        return EstimatorConfig(kind, q=self.q or self.d_z, mu=self.mu, seed=self.seed)

    def train_config(self) -> TrainConfig:
        base = default_config(self.method, self.scheme)
        lr = self.lr or base.optimizer.lr
        return dataclasses.replace(
            base,
            gamma=self.gamma,
            sigma=self.sigma,
            estimator=self.estimator_config(),
            optimizer=OptimizerConfig(self.optimizer, lr, self.drop_factor, self.drop_interval),
            epochs=self.epochs,
            batch_size=self.batch_size,
            seed=self.seed,
            target_mode=self.target_mode,
            trainable=self.trainable,
            pretrain_epochs=self.pretrain_epochs,
            finetune_lr=self.finetune_lr or base.finetune_lr,
        )

    @property
    def width(self) -> int:
        return self.denoiser_width or (32 if self.task == "reconstruction" else 16)

    def certify_config(self) -> CertifyConfig:
        return CertifyConfig(sigma=self.sigma, n0=self.n0, n=self.n, alpha=self.alpha, seed=self.seed)

    def to_dict(self) -> dict:
        return {f.name: list(v) if isinstance(v, tuple) else v
                for f in fields(self) for v in [getattr(self, f.name)]}


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _convert(key: str, raw: str):
    default = _FIELDS[key].default
    if isinstance(default, tuple):
        return tuple(float(p) for p in raw.split(",") if p.strip())
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def parse_config(text: str) -> dict:
    """Parse config text into ``{key: typed value}``; only keys present are returned."""
    out, seen = {}, {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {line!r}", line=lineno)
        key, raw = (p.strip() for p in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}", line=lineno)
        if key in seen:
            raise ConfigError(f"duplicate key {key!r} (first set on line {seen[key]})", line=lineno)
        try:
            out[key] = _convert(key, raw)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {exc}", line=lineno) from None
        seen[key] = lineno
    return out


def build_config(values: dict) -> RunConfig:
    try:
        return RunConfig(**values)
    except ArgumentError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path) -> RunConfig:
    with open(path) as fh:
        return build_config(parse_config(fh.read()))


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        lines.append(f"{f.name} = {','.join(repr(x) for x in v) if isinstance(v, tuple) else v}")
    return "\n".join(lines) + "\n"
