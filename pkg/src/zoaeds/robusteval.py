"""Reconstruction-task robustness: measurement model, l2 PGD, RMSE and SSIM."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from zoaeds.errors import ArgumentError, ShapeError
from zoaeds.models import LinearStage, Pipeline
from zoaeds.numerics.rng import RngStream


@dataclass
class MeasurementModel:
    A: np.ndarray  # (m, d)
    image_shape: tuple
    kind: str = "identity"

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=np.float64)
        self.image_shape = tuple(self.image_shape)
        m, d = self.A.shape
        if d != int(np.prod(self.image_shape)):
            raise ShapeError(f"A has {d} columns for images of size {int(np.prod(self.image_shape))}")
        if m > d:
            raise ArgumentError(f"measurement rows m={m} exceed d={d}")
        self.gram = self.A.T @ self.A

    @classmethod
    def identity(cls, image_shape):
        d = int(np.prod(image_shape))
        return cls(np.eye(d), image_shape, "identity")

    @classmethod
    def gaussian_rows(cls, image_shape, m: int, seed: int = 0):
        """Rows with i.i.d. N(0, 1/m) entries, so ``E[A^T A] = I``."""
        d = int(np.prod(image_shape))
        g = RngStream(seed, ("measurement",)).generator.standard_normal((m, d))
        return cls(g / np.sqrt(m), image_shape, "gaussian_rows")

    def measure(self, x) -> np.ndarray:
        """``A^T A x`` for one image or a batch."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape == self.image_shape:
            return (self.gram @ x.ravel()).reshape(self.image_shape)
        if x.shape[1:] != self.image_shape:
            raise ShapeError(f"measure: input {x.shape} does not match image shape {self.image_shape}")
        return (x.reshape(len(x), -1) @ self.gram.T).reshape(x.shape)

    def as_stage(self) -> LinearStage:
        return LinearStage(self.gram, self.image_shape)


def measure(model: MeasurementModel, x) -> np.ndarray:
    return model.measure(x)


@dataclass
class AttackConfig:
    epsilon: float = 1.0
    steps: int = 40
    step_size: float | None = None  # default epsilon / 10
    seed: int = 0

    def __post_init__(self):
        if self.epsilon < 0 or self.steps < 0:
            raise ArgumentError("epsilon and steps must be >= 0")

    @property
    def alpha(self) -> float:
        return self.epsilon / 10 if self.step_size is None else self.step_size


def project_l2(delta, eps):
    """Project each row of ``delta`` onto the l2 ball of radius ``eps``."""
    flat = delta.reshape(len(delta), -1)
    norms = np.linalg.norm(flat, axis=1)
    scale = np.where(norms > eps, eps / np.maximum(norms, 1e-300), 1.0)
    return delta * scale.reshape((-1,) + (1,) * (delta.ndim - 1))


def pgd_l2(loss_fn, x, cfg: AttackConfig, clamp: bool = True) -> np.ndarray:
    """Normalised-gradient ascent projected onto ``||delta||_2 <= epsilon``.

    ``loss_fn(x_adv)`` returns ``(per-example loss, gradient w.r.t. x_adv)``.
    With ``clamp`` the attacked input is ``clip(x + delta, 0, 1)`` and the
    gradient is masked where the clip is active.
    """
    x = np.asarray(x, dtype=np.float64)
    delta = np.zeros_like(x)
    if cfg.epsilon == 0 or cfg.steps == 0:
        return delta
    for _ in range(cfg.steps):
        raw = x + delta
        adv = np.clip(raw, 0.0, 1.0) if clamp else raw
        _, g = loss_fn(adv)
        if clamp:
            g = g * ((raw > 0.0) & (raw < 1.0))
        flat = g.reshape(len(g), -1)
        norms = np.linalg.norm(flat, axis=1)
        step = np.where(norms[:, None] > 0, flat / np.maximum(norms, 1e-300)[:, None], 0.0)
        delta = project_l2(delta + cfg.alpha * step.reshape(x.shape), cfg.epsilon)
    return delta


def rmse(x_true, x_est) -> float:
    x_true, x_est = np.asarray(x_true, dtype=np.float64), np.asarray(x_est, dtype=np.float64)
    if x_true.shape != x_est.shape:
        raise ShapeError(f"rmse: shapes {x_true.shape} and {x_est.shape} differ")
    return float(np.sqrt(np.mean((x_true - x_est) ** 2)))


def gaussian_window(size: int = 8, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2
    g = np.exp(-(ax**2) / (2 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def _ssim_map(a, b, win, data_range):
    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    k = win.shape[0]
    pa = sliding_window_view(a, (k, k), axis=(-2, -1))
    pb = sliding_window_view(b, (k, k), axis=(-2, -1))

    def filt(p):
        return np.tensordot(p, win, axes=([-2, -1], [0, 1]))

    mu_a, mu_b = filt(pa), filt(pb)
    var_a = filt(pa * pa) - mu_a * mu_a
    var_b = filt(pb * pb) - mu_b * mu_b
    cov = filt(pa * pb) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return num / den


def ssim(x_true, x_est, window: int = 8, sigma: float = 1.5, data_range: float = 1.0) -> float:
    """Mean single-scale SSIM over all fully-contained Gaussian windows.

    Accepts (H, W), (C, H, W) or (N, C, H, W); the mean runs over every
    window, channel and image. Windows larger than the image shrink to it.
    """
    x_true, x_est = np.asarray(x_true, dtype=np.float64), np.asarray(x_est, dtype=np.float64)
    if x_true.shape != x_est.shape:
        raise ShapeError(f"ssim: shapes {x_true.shape} and {x_est.shape} differ")
    if x_true.ndim < 2:
        raise ShapeError("ssim needs images with at least two axes")
    k = min(window, x_true.shape[-1], x_true.shape[-2])
    return float(np.mean(_ssim_map(x_true, x_est, gaussian_window(k, sigma), data_range)))


def ssim_per_image(x_true, x_est, **kw) -> np.ndarray:
    return np.array([ssim(a, b, **kw) for a, b in zip(x_true, x_est)])


# -- evaluation pipelines ---------------------------------------------------

class ReconstructionPipeline:
    """``x -> A^T A clip(x) -> [defense] -> reconstructor``, white-box end to end."""

    def __init__(self, name, measurement: MeasurementModel, reconstructor, stack=None):
        self.name = name
        stages = [("measure", measurement.as_stage())]
        if stack is not None:
            stages.append(("denoiser", stack.denoiser))
            if stack.uses_ae:
                stages += [("encoder", stack.encoder), ("decoder", stack.decoder)]
        stages.append(("base", reconstructor))
        self.pipe = Pipeline(stages)

    def reconstruct(self, x):
        return self.pipe.predict(x)

    def loss_and_grad(self, target):
        """Closure for :func:`pgd_l2`: per-example squared reconstruction error vs ``target``."""

        def fn(x_adv):
            out = self.pipe.forward(x_adv)
            diff = out - target
            g, _ = self.pipe.backward(2.0 * diff)
            return (diff**2).reshape(len(diff), -1).sum(axis=1), g

        return fn


@dataclass
class AttackRow:
    method: str
    epsilon: float
    rmse: float
    ssim: float


def attack_table(methods, dataset, epsilons, steps: int = 40, step_fraction: float = 0.1,
                 ssim_window: int = 8) -> list[AttackRow]:
    """RMSE/SSIM of each pipeline on PGD-perturbed inputs, per epsilon (0 = clean)."""
    x = dataset.images if hasattr(dataset, "images") else np.asarray(dataset, dtype=np.float64)
    if len(x) == 0:
        raise ArgumentError("attack_table needs a non-empty dataset")
    rows = []
    for pipe in methods:
        for eps in epsilons:
            cfg = AttackConfig(eps, steps, eps * step_fraction)
            delta = pgd_l2(pipe.loss_and_grad(x), x, cfg)
            rec = pipe.reconstruct(np.clip(x + delta, 0.0, 1.0))
            per_rmse = np.sqrt(((rec - x) ** 2).reshape(len(x), -1).mean(axis=1))
            rows.append(AttackRow(pipe.name, float(eps), float(per_rmse.mean()),
                                  float(ssim_per_image(x, rec, window=ssim_window).mean())))
    return rows


def write_attack_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "epsilon", "rmse", "ssim"])
        for r in rows:
            w.writerow([r.method, repr(r.epsilon), repr(r.rmse), repr(r.ssim)])
