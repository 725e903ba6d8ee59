"""SGD and Adam over dicts of named parameter arrays, plus a step-drop schedule."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from zoaeds.errors import ArgumentError, NumericalError, ShapeError

BETA1, BETA2, EPS = 0.9, 0.999, 1e-8


@dataclass
class OptimizerConfig:
    kind: str = "adam"
    lr: float = 1e-3
    drop_factor: float = 0.1
    drop_interval: int = 0  # epochs between drops; 0 disables

    def __post_init__(self):
        self.kind = self.kind.lower()
        if self.kind not in ("sgd", "adam"):
            raise ArgumentError(f"optimizer must be sgd or adam, got {self.kind!r}")
        if self.lr < 0:
            raise ArgumentError(f"learning rate must be >= 0, got {self.lr}")

    def lr_at(self, epoch: int) -> float:
        if self.drop_interval <= 0:
            return self.lr
        return self.lr * self.drop_factor ** (epoch // self.drop_interval)


def optimizer_step(kind, params, grads, state, lr):
    """One update; returns ``(new_params, new_state)`` without mutating inputs."""
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if np.shape(g) != np.shape(p):
            raise ShapeError(f"gradient for {name} has shape {np.shape(g)}, parameter {np.shape(p)}")
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"nonfinite gradient for parameter {name}")
    state = dict(state or {})
    if kind == "sgd":
        new = {n: (p - lr * grads[n] if n in grads else p) for n, p in params.items()}
        return new, state
    if kind != "adam":
        raise ArgumentError(f"unknown optimizer {kind!r}")
    t = state.get("t", 0) + 1
    m, v = dict(state.get("m", {})), dict(state.get("v", {}))
    new = {}
    for n, p in params.items():
        if n not in grads:
            new[n] = p
            continue
        g = grads[n]
        m[n] = BETA1 * m.get(n, 0.0) + (1 - BETA1) * g
        v[n] = BETA2 * v.get(n, 0.0) + (1 - BETA2) * g * g
        mhat = m[n] / (1 - BETA1**t)
        vhat = v[n] / (1 - BETA2**t)
        new[n] = p - lr * mhat / (np.sqrt(vhat) + EPS)
    return new, {"t": t, "m": m, "v": v}


class Optimizer:
    """Holds per-network state for a set of networks updated together."""

    def __init__(self, networks: dict, cfg: OptimizerConfig):
        self.networks = networks
        self.cfg = cfg
        self.state = {name: {} for name in networks}

    def step(self, grads: dict, epoch: int = 0, lr: float | None = None):
        lr = self.cfg.lr_at(epoch) if lr is None else lr
        for name, g in grads.items():
            net = self.networks.get(name)
            if net is None:
                continue
            new, self.state[name] = optimizer_step(self.cfg.kind, net.params, g, self.state[name], lr)
            net.set_params(new)
