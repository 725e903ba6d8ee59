"""Denoised-smoothing objective and the FO/ZO, DS/AE-DS trainers."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from zoaeds.data import Dataset
from zoaeds.errors import ArgumentError, ContractError, TrainingError
from zoaeds.models import DefenseStack, iterate_minibatches
from zoaeds.numerics import autodiff as ad
from zoaeds.numerics.graph import Network
from zoaeds.numerics.rng import RngStream, sample_gaussian
from zoaeds.optim import Optimizer, OptimizerConfig, optimizer_step  # noqa: F401  (re-export)
from zoaeds.oracle import BlackBoxOracle
from zoaeds.zo_grad import (
    EstimatorConfig,
    StabilityGrad,
    query_targets,
    stability_grad_zo_ae,
    stability_grad_zo_ds,
)

log = logging.getLogger(__name__)

METHODS = ("fo_ds", "zo_ds", "fo_ae_ds", "zo_ae_ds")
SCHEMES = ("scratch", "pretrain_finetune")
TRAINABLE = ("denoiser", "denoiser_encoder", "denoiser_ae")


def normalize_method(name: str) -> str:
    m = name.lower().replace("-", "_")
    if m not in METHODS:
        raise ArgumentError(f"method must be one of {METHODS}, got {name!r}")
    return m


@dataclass
class TrainConfig:
    method: str = "zo_ae_ds"
    gamma: float = 1.0
    sigma: float = 0.25
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    scheme: str = "scratch"
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    epochs: int = 60
    batch_size: int = 32
    seed: int = 0
    target_mode: str = "hard"
    trainable: str = "denoiser_encoder"
    pretrain_epochs: int = 30
    finetune_lr: float = 1e-5

    def __post_init__(self):
        self.method = normalize_method(self.method)
        self.scheme = self.scheme.lower().replace("-", "_")
        if self.scheme not in SCHEMES:
            raise ArgumentError(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")
        if self.gamma < 0:
            raise ArgumentError(f"gamma must be >= 0, got {self.gamma}")
        if not self.sigma > 0:
            raise ArgumentError(f"sigma must be > 0, got {self.sigma}")
        if self.trainable not in TRAINABLE:
            raise ArgumentError(f"trainable must be one of {TRAINABLE}, got {self.trainable!r}")
        if self.target_mode not in ("hard", "soft"):
            raise ArgumentError(f"target_mode must be hard or soft, got {self.target_mode!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ArgumentError("epochs must be >= 0 and batch_size >= 1")

    @property
    def is_zo(self) -> bool:
        return self.method.startswith("zo")

    @property
    def uses_ae(self) -> bool:
        return self.method.endswith("ae_ds")


def default_config(method: str, scheme: str = "scratch", **overrides) -> TrainConfig:
    """Per-method learning-rate defaults: ZO-DS runs 10x (scratch) / 10x (finetune) lower."""
    method = normalize_method(method)
    lr, ft = 1e-3, 1e-5
    if method == "zo_ds":
        lr, ft = 1e-4, 1e-6
    est = EstimatorConfig("rge", q=20) if method == "zo_ds" else EstimatorConfig("cge")
    cfg = dict(method=method, scheme=scheme, optimizer=OptimizerConfig("adam", lr), finetune_lr=ft, estimator=est)
    cfg.update(overrides)
    return TrainConfig(**cfg)


@dataclass
class EpochRecord:
    epoch: int
    phase: str
    denoise_loss: float
    stab_loss: float
    total_loss: float
    queries: int  # cumulative oracle rows


@dataclass
class TrainReport:
    config: TrainConfig
    epochs: list = field(default_factory=list)
    target_queries: int = 0
    checksums: dict = field(default_factory=dict)

    @property
    def queries_used(self) -> int:
        return self.epochs[-1].queries if self.epochs else self.target_queries


def _inputs(dataset):
    return dataset.images if isinstance(dataset, Dataset) else np.asarray(dataset, dtype=np.float64)


def _stab_map(output_kind, target_mode):
    if output_kind == "image":
        return "sse"
    return "soft_ce" if target_mode == "soft" else "ce"


def _stab_values(out_node, targets, kind):
    if kind == "sse":
        return ad.squared_error(out_node, targets)
    return ad.cross_entropy(out_node, targets)


def ds_loss(model, x, delta, target, gamma: float, oracle=None, target_mode: str = "hard"):
    """``(total, denoise_part, stab_part)`` averaged over the batch.

    ``model`` is a :class:`DefenseStack` or a bare denoiser network paired
    with ``oracle``. The stability part is measured through the oracle.
    """
    if gamma < 0:
        raise ArgumentError(f"gamma must be >= 0, got {gamma}")
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == len(model.input_shape if isinstance(model, DefenseStack) else model.input_shape)
    if single:
        x, delta, target = x[None], np.asarray(delta)[None], np.asarray(target)[None]
    noisy = x + delta
    if isinstance(model, DefenseStack):
        den, out = model.denoiser, model.query(noisy)
        kind = _stab_map(model.base.output_kind, target_mode)
    else:
        den, out = model, oracle.query(model.predict(noisy))
        kind = _stab_map(oracle.output_kind, target_mode)
    h = den.predict(noisy)
    denoise_part = float(((h - x) ** 2).reshape(len(x), -1).sum(axis=1).mean())
    stab_part = float(_stab_values(ad.Node(out), np.asarray(target), kind).value.mean())
    return denoise_part + gamma * stab_part, denoise_part, stab_part


def denoise_gradients(denoiser: Network, x, noisy):
    """Gradient of the batch-mean ``||D(x + delta) - x||^2`` and its value."""
    h = denoiser.forward(noisy)
    diff = h - x
    b = len(x)
    g = denoiser.backward(2.0 * diff / b)
    g.pop("input")
    return g, float((diff**2).reshape(b, -1).sum(axis=1).mean())


def stability_grad_fo(stack: DefenseStack, x, delta, targets, target_mode="hard") -> StabilityGrad:
    """First-order stability gradient through a white-box copy of the base model."""
    pipe = stack.white_box_pipeline()
    noisy = np.asarray(x, dtype=np.float64) + delta
    out = ad.Node(pipe.forward(noisy))
    vals = _stab_values(out, targets, _stab_map(stack.base.output_kind, target_mode))
    g_out = ad.backward(ad.mean(vals))[id(out)]
    _, grads = pipe.backward(g_out)
    grads.pop("base", None)
    return StabilityGrad(grads, np.zeros((len(noisy), 0)), vals.value, 0)


def stability_gradients(cfg: TrainConfig, stack: DefenseStack, x, delta, targets, rng: RngStream) -> StabilityGrad:
    if cfg.method in ("fo_ds", "fo_ae_ds"):
        return stability_grad_fo(stack, x, delta, targets, cfg.target_mode)
    if cfg.method == "zo_ae_ds":
        return stability_grad_zo_ae(stack, x, delta, cfg.estimator, targets, rng, cfg.target_mode)
    return stability_grad_zo_ds(stack.denoiser, stack.base, x, delta, cfg.estimator, targets, rng, cfg.target_mode)


def _trainable_networks(cfg: TrainConfig, stack: DefenseStack) -> dict:
    nets = {"denoiser": stack.denoiser}
    if cfg.uses_ae and cfg.trainable in ("denoiser_encoder", "denoiser_ae"):
        nets["encoder"] = stack.encoder
    if cfg.uses_ae and cfg.trainable == "denoiser_ae":
        if cfg.is_zo:
            raise ContractError("the decoder is merged into the black box and cannot be trained by a ZO method")
        if stack.decoder.frozen:
            stack.decoder = stack.decoder.copy()
        nets["decoder"] = stack.decoder
    return nets


def expected_queries(cfg: TrainConfig, n: int, d: int, d_z: int | None = None) -> int:
    """Closed-form oracle budget of :func:`train` over ``n`` examples.

    ``n`` target queries once, then one estimate per example per
    stability-bearing epoch.
    """
    stab_epochs = cfg.epochs if (cfg.scheme == "pretrain_finetune" or cfg.gamma > 0) else 0
    if not cfg.is_zo or stab_epochs == 0 or n == 0:
        return 0
    dim = d_z if cfg.uses_ae else d
    return n + stab_epochs * n * cfg.estimator.queries_per_point(dim)


def _snapshot(nets):
    return {name: {k: v.copy() for k, v in net.params.items()} for name, net in nets.items()}


def train(config: TrainConfig, stack: DefenseStack, dataset, rng: RngStream | None = None,
          noise_transform=None) -> TrainReport:
    """Optimise the denoiser (and encoder for AE methods) on the DS objective.

    ``noise_transform`` maps each sampled ``N(0, sigma^2 I)`` batch before it
    is added to the inputs; the reconstruction suite passes the measurement
    operator so that training noise lives where the attacker perturbs.
    """
    cfg = config
    if cfg.uses_ae != stack.uses_ae:
        raise ArgumentError(f"method {cfg.method} {'needs' if cfg.uses_ae else 'must not have'} an autoencoder")
    if cfg.is_zo:
        if not isinstance(stack.base, BlackBoxOracle):
            raise ContractError("ZO training requires the base model as a BlackBoxOracle")
        work = stack.black_box_view()
    else:
        if stack.base_model is None:
            raise ContractError(f"{cfg.method} is first-order and needs a white-box base model")
        work = stack
    rng = rng or RngStream(cfg.seed, ("train",))
    x = _inputs(dataset)
    n = len(x)
    nets = _trainable_networks(cfg, work)
    report = TrainReport(cfg)
    counter = stack.base

    def queries():
        return counter.queries_used if isinstance(counter, BlackBoxOracle) else 0

    phases = []
    if cfg.scheme == "pretrain_finetune":
        phases.append(("pretrain", cfg.pretrain_epochs, cfg.optimizer, 1.0, 0.0))
        ft = OptimizerConfig(cfg.optimizer.kind, cfg.finetune_lr, cfg.optimizer.drop_factor, cfg.optimizer.drop_interval)
        phases.append(("finetune", cfg.epochs, ft, 0.0, 1.0))
    else:
        phases.append(("scratch", cfg.epochs, cfg.optimizer, 1.0, cfg.gamma))

    need_targets = any(w_stab > 0 and e > 0 for _, e, _, _, w_stab in phases)
    start_q = queries()
    targets = None
    if need_targets:
        mode = "output" if stack.base.output_kind == "image" else cfg.target_mode
        if cfg.is_zo:
            targets = query_targets(work.base, x, mode)
        else:
            out = stack.base_model.predict(x)
            targets = out if mode == "output" else (np.argmax(out, 1) if mode == "hard" else ad.softmax_array(out))
    report.target_queries = queries() - start_q

    epoch_no = 0
    for phase, n_epochs, opt_cfg, w_den, w_stab in phases:
        opt = Optimizer(nets if w_stab > 0 else {"denoiser": stack.denoiser}, opt_cfg)
        initial, strikes, last_good = None, 0, _snapshot(nets)
        for epoch in range(n_epochs):
            sums = np.zeros(2)
            for step, idx in enumerate(iterate_minibatches(n, cfg.batch_size, rng.child(phase, "batches", epoch))):
                xb = x[idx]
                delta = sample_gaussian(rng.child(phase, "noise", epoch, step), xb.shape, cfg.sigma)
                if noise_transform is not None:
                    delta = noise_transform(delta)
                grads = {}
                g_den, den_val = denoise_gradients(work.denoiser, xb, xb + delta)
                if w_den > 0:
                    grads["denoiser"] = {k: w_den * v for k, v in g_den.items()}
                stab_val = 0.0
                if w_stab > 0:
                    sg = stability_gradients(cfg, work, xb, delta, targets[idx], rng.child(phase, "dirs", epoch, step))
                    stab_val = float(np.mean(sg.loss))
                    for comp, g in sg.grads.items():
                        if comp not in nets:
                            continue
                        scaled = {k: w_stab * v for k, v in g.items()}
                        if comp in grads:
                            grads[comp] = {k: grads[comp][k] + scaled[k] for k in scaled}
                        else:
                            grads[comp] = scaled
                opt.step(grads, epoch)
                sums += np.array([den_val, stab_val]) * len(idx)
            den_loss, stab_loss = sums / max(n, 1)
            total = w_den * den_loss + w_stab * stab_loss
            report.epochs.append(EpochRecord(epoch_no, phase, den_loss, stab_loss, total, queries() - start_q))
            log.debug("epoch %d (%s): denoise %.4f stab %.4f sigma %.3f", epoch_no, phase, den_loss, stab_loss, cfg.sigma)
            epoch_no += 1
            if initial is None:
                initial = total
            if not np.isfinite(total) or total > 10 * max(initial, 1e-12):
                strikes += 1
                if strikes >= 3 or not np.isfinite(total):
                    for name, params in last_good.items():
                        nets[name].set_params(params)
                    raise TrainingError(f"{cfg.method} diverged in epoch {epoch_no - 1}", last_good=last_good)
            else:
                strikes = 0
                last_good = _snapshot(nets)
    report.checksums = stack.checksums()
    return report
