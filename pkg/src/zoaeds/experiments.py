"""Desk-scale experiment suites: smoothed classification and robust reconstruction.

Both suites are pure functions of their config and seed. The scripts in
``scripts/`` and the acceptance tests call them directly.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from zoaeds.certify import CertifyConfig, certified_accuracy_curve, certify_dataset, standard_accuracy
from zoaeds.data import make_toy_digits
from zoaeds.models import (
    DefenseStack,
    build_base_classifier,
    build_base_reconstructor,
    classifier_arch,
    decoder_arch,
    denoiser_arch,
    encoder_arch,
    pretrain_autoencoder,
    reconstructor_arch,
)
from zoaeds.numerics.graph import Network
from zoaeds.numerics.rng import RngStream
from zoaeds.optim import OptimizerConfig
from zoaeds.oracle import BlackBoxOracle
from zoaeds.robusteval import MeasurementModel, ReconstructionPipeline, attack_table
from zoaeds.training import default_config, train
from zoaeds.zo_grad import EstimatorConfig


@dataclass(frozen=True)
class Variant:
    """One trained defense: method, scheme and an optional estimator override."""

    name: str
    method: str
    scheme: str = "scratch"
    estimator: str | None = None  # None keeps the method default
    q: int | None = None  # None with rge means q = d_z


CLASSIFICATION_VARIANTS = (
    Variant("fo_ds", "fo_ds"),
    Variant("fo_ae_ds", "fo_ae_ds"),
    Variant("zo_ds", "zo_ds", estimator="rge"),
    Variant("zo_ae_ds", "zo_ae_ds", estimator="cge"),
    Variant("zo_ae_ds_pf", "zo_ae_ds", scheme="pretrain_finetune", estimator="cge"),
)

RECONSTRUCTION_VARIANTS = (
    Variant("fo_ds", "fo_ds"),
    Variant("zo_ds", "zo_ds", estimator="rge"),
    Variant("fo_ae_ds", "fo_ae_ds"),
    Variant("zo_ae_ds", "zo_ae_ds", estimator="cge"),
)


@dataclass
class ClassificationSuite:
    n_train: int = 600
    n_test: int = 100
    base_epochs: int = 30
    ae_epochs: int = 60
    ae_lr: float = 3e-3
    d_z: int = 16
    epochs: int = 20
    sigma: float = 0.25
    gamma: float = 1.0
    mu: float = 0.005
    n0: int = 50
    n: int = 500
    alpha: float = 0.001
    radii: tuple = (0.0, 0.0625, 0.125, 0.25)
    variants: tuple = CLASSIFICATION_VARIANTS


@dataclass
class ReconstructionSuite:
    n_train: int = 600
    n_test: int = 100
    m: int = 48
    base_epochs: int = 60
    ae_epochs: int = 60
    ae_lr: float = 3e-3
    d_z: int = 16
    denoiser_width: int = 32
    epochs: int = 20
    sigma: float = 0.25
    gamma: float = 1.0
    mu: float = 0.005
    epsilons: tuple = (0.0, 0.5, 1.0, 1.5, 2.0)
    steps: int = 40
    variants: tuple = RECONSTRUCTION_VARIANTS


@dataclass
class ClassificationResult:
    seed: int
    base_accuracy: float
    curves: dict = field(default_factory=dict)  # variant -> [(r, CA)]
    standard_accuracy: dict = field(default_factory=dict)
    queries: dict = field(default_factory=dict)
    records: dict = field(default_factory=dict)
    train_seconds: float = 0.0
    seconds: float = 0.0

    def ca(self, variant: str, radius: float) -> float:
        return dict(self.curves[variant])[radius]


@dataclass
class ReconstructionResult:
    seed: int
    base_rmse: float
    rows: list = field(default_factory=list)
    queries: dict = field(default_factory=dict)
    seconds: float = 0.0

    def row(self, method: str, epsilon: float):
        for r in self.rows:
            if r.method == method and r.epsilon == epsilon:
                return r
        raise KeyError((method, epsilon))


def _train_config(v: Variant, suite, seed: int, d_z: int):
    kw = dict(epochs=suite.epochs, seed=seed, sigma=suite.sigma, gamma=suite.gamma)
    if v.estimator is not None:
        q = v.q if v.q is not None else d_z
        kw["estimator"] = EstimatorConfig(v.estimator, q=q, mu=suite.mu, seed=seed)
    else:
        kw["estimator"] = EstimatorConfig("cge", mu=suite.mu, seed=seed)
    return default_config(v.method, v.scheme, **kw)


def _pretrained_ae(shape, suite, inputs, seed: int, squash: bool):
    enc = Network(encoder_arch(shape, d_z=suite.d_z), rng=RngStream(seed, ("enc",)))
    dec = Network(decoder_arch(suite.d_z, shape, squash=squash), rng=RngStream(seed, ("dec",)))
    pretrain_autoencoder(enc, dec, inputs, suite.ae_epochs, OptimizerConfig("adam", suite.ae_lr),
                         RngStream(seed, ("ae",)))
    return enc, dec


def _stack(v: Variant, base, kind, ae, seed, width=16):
    shape = base.network.input_shape
    den = Network(denoiser_arch(shape, width=width), rng=RngStream(seed, ("den",)))
    uses_ae = v.method.endswith("ae_ds")
    enc, dec = (ae[0].copy(), ae[1].copy()) if uses_ae else (None, None)
    return DefenseStack(den, BlackBoxOracle.from_network(base.network, kind), enc, dec, base_model=base.network)


def run_classification(suite: ClassificationSuite, seed: int = 0) -> ClassificationResult:
    """Base classifier, AE pre-training, every variant trained and certified."""
    t0 = time.perf_counter()
    tr = make_toy_digits(suite.n_train, seed=seed, split="train")
    te = make_toy_digits(suite.n_test, seed=seed, split="test")
    base = build_base_classifier(classifier_arch(tr.image_shape), tr, te, epochs=suite.base_epochs, seed=seed)
    ae = _pretrained_ae(tr.image_shape, suite, tr, seed, squash=True)
    cc = CertifyConfig(sigma=suite.sigma, n0=suite.n0, n=suite.n, alpha=suite.alpha, seed=seed)
    res = ClassificationResult(seed, base.test_metric)
    for v in suite.variants:
        stack = _stack(v, base, "logits", ae, seed)
        t1 = time.perf_counter()
        report = train(_train_config(v, suite, seed, suite.d_z), stack, tr)
        res.train_seconds += time.perf_counter() - t1
        recs = certify_dataset(stack, te.images, cc)
        res.records[v.name] = recs
        res.curves[v.name] = certified_accuracy_curve(recs, te.labels, suite.radii)
        res.standard_accuracy[v.name] = standard_accuracy(recs, te.labels)
        res.queries[v.name] = report.queries_used
    res.seconds = time.perf_counter() - t0
    return res


def run_reconstruction(suite: ReconstructionSuite, seed: int = 0) -> ReconstructionResult:
    """Base reconstructor, defenses trained on ``A^T A x``, then the PGD attack table.

    Training noise is drawn in the image domain and pushed through the
    measurement operator, the same place the attacker perturbs.
    """
    t0 = time.perf_counter()
    tr = make_toy_digits(suite.n_train, seed=seed, split="train")
    te = make_toy_digits(suite.n_test, seed=seed, split="test")
    meas = MeasurementModel.gaussian_rows(tr.image_shape, suite.m, seed)
    base = build_base_reconstructor(reconstructor_arch(tr.image_shape), tr, meas, te,
                                    epochs=suite.base_epochs, seed=seed)
    u = meas.measure(tr.images)
    # decoder stays linear: A^T A x is not confined to [0, 1]
    ae = _pretrained_ae(tr.image_shape, suite, u, seed, squash=False)
    res = ReconstructionResult(seed, base.test_metric)
    pipes = [ReconstructionPipeline("standard", meas, base.network)]
    for v in suite.variants:
        stack = _stack(v, base, "image", ae, seed, width=suite.denoiser_width)
        report = train(_train_config(v, suite, seed, suite.d_z), stack, u, noise_transform=meas.measure)
        res.queries[v.name] = report.queries_used
        pipes.append(ReconstructionPipeline(v.name, meas, base.network, stack))
    res.rows = attack_table(pipes, te, suite.epsilons, steps=suite.steps)
    res.seconds = time.perf_counter() - t0
    return res


def mean_ca(results, variant: str, radius: float) -> float:
    return float(np.mean([r.ca(variant, radius) for r in results]))


def mean_row(results, method: str, epsilon: float) -> tuple[float, float]:
    rows = [r.row(method, epsilon) for r in results]
    return float(np.mean([x.rmse for x in rows])), float(np.mean([x.ssim for x in rows]))
