"""Zeroth-order gradient estimates and the two stability-gradient pathways.

Both estimators work on a batch of B independent points ``w`` of shape
(B, d). All probes for the batch, including the shared base value at each
point, go to the oracle as one call, so an RGE estimate costs ``q + 1`` rows
per point and a CGE estimate ``d + 1``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from zoaeds.errors import ArgumentError, NumericalError, ShapeError, StateError
from zoaeds.numerics import autodiff as ad
from zoaeds.numerics.rng import RngStream, sample_unit_sphere

ESTIMATORS = ("rge", "cge")
LOSS_MAPS = ("ce", "soft_ce", "sse")


@dataclass
class EstimatorConfig:
    kind: str = "cge"
    q: int = 20  # ignored by CGE
    mu: float = 0.005
    seed: int = 0

    def __post_init__(self):
        self.kind = self.kind.lower()
        if self.kind not in ESTIMATORS:
            raise ArgumentError(f"estimator kind must be one of {ESTIMATORS}, got {self.kind!r}")
        if not self.mu > 0:
            raise ArgumentError(f"mu must be > 0, got {self.mu}")
        if self.kind == "rge" and self.q < 1:
            raise ArgumentError(f"RGE needs q >= 1, got {self.q}")

    def queries_per_point(self, dim: int) -> int:
        return (self.q if self.kind == "rge" else dim) + 1


class ScalarLossOracle:
    """Black-box output reduced to a scalar by a fixed white-box loss map.

    ``targets`` holds one target per point: integer labels for ``"ce"``,
    probability rows for ``"soft_ce"``, reference outputs for ``"sse"``.
    """

    def __init__(self, base, targets, loss_map: str = "ce"):
        if loss_map not in LOSS_MAPS:
            raise ArgumentError(f"loss_map must be one of {LOSS_MAPS}, got {loss_map!r}")
        self.base = base
        self.targets = np.asarray(targets)
        self.loss_map = loss_map

    @property
    def dim(self) -> int:
        return int(np.prod(self.base.input_shape))

    def _reduce(self, outputs, targets):
        out = ad.Node(np.asarray(outputs, dtype=np.float64))
        if self.loss_map == "sse":
            return ad.squared_error(out, targets).value
        return ad.cross_entropy(out, targets).value

    def __call__(self, probes) -> np.ndarray:
        """Losses for probes shaped (B, P, d); returns (B, P)."""
        probes = np.asarray(probes, dtype=np.float64)
        b, p, d = probes.shape
        if d != self.dim:
            raise ShapeError(f"probe dimension {d} != oracle input dimension {self.dim}")
        if len(self.targets) != b:
            raise ShapeError(f"{len(self.targets)} targets for {b} points")
        outputs = self.base.query(probes.reshape((b * p,) + tuple(self.base.input_shape)))
        targets = np.repeat(self.targets, p, axis=0)
        return self._reduce(outputs, targets).reshape(b, p)

    def value(self, w) -> np.ndarray:
        w = np.atleast_2d(np.asarray(w, dtype=np.float64))
        return self(w[:, None, :])[:, 0]


def _check_finite(losses):
    bad = np.argwhere(~np.isfinite(losses))
    if len(bad):
        b, i = bad[0]
        what = "base point" if i == 0 else f"probe {i}"
        raise NumericalError(f"nonfinite loss {losses[b, i]} at point {b}, {what}")


def _as_points(w):
    w = np.asarray(w, dtype=np.float64)
    if w.ndim == 1:
        return w[None], True
    if w.ndim != 2:
        raise ShapeError(f"variable must be (d,) or (B, d), got {w.shape}")
    return w, False


def rge(loss, w, cfg: EstimatorConfig, rng: RngStream | None = None, directions=None) -> np.ndarray:
    """Randomized gradient estimate from ``q`` unit-sphere directions.

    ``directions`` (shape (q, d) or (B, q, d)) overrides sampling.
    """
    w, single = _as_points(w)
    b, d = w.shape
    if directions is None:
        if rng is None:
            rng = RngStream(cfg.seed, ("rge",))
        u = sample_unit_sphere(rng, d, size=(b, cfg.q))
    else:
        u = np.asarray(directions, dtype=np.float64)
        if u.ndim == 2:
            u = np.broadcast_to(u, (b,) + u.shape)
        if u.shape[0] != b or u.shape[2] != d:
            raise ShapeError(f"directions {u.shape} do not fit points {w.shape}")
    q = u.shape[1]
    probes = np.concatenate([w[:, None, :], w[:, None, :] + cfg.mu * u], axis=1)
    losses = loss(probes)
    _check_finite(losses)
    diffs = losses[:, 1:] - losses[:, :1]
    est = np.einsum("bq,bqd->bd", diffs, u) * (d / (cfg.mu * q))
    return est[0] if single else est


def cge(loss, w, cfg: EstimatorConfig, rng: RngStream | None = None) -> np.ndarray:
    """Coordinatewise forward-difference estimate; ``d + 1`` queries per point."""
    w, single = _as_points(w)
    b, d = w.shape
    probes = np.concatenate([w[:, None, :], w[:, None, :] + cfg.mu * np.eye(d)[None]], axis=1)
    losses = loss(probes)
    _check_finite(losses)
    est = (losses[:, 1:] - losses[:, :1]) / cfg.mu
    return est[0] if single else est


def estimate(loss, w, cfg: EstimatorConfig, rng: RngStream | None = None, directions=None) -> np.ndarray:
    if cfg.kind == "rge":
        return rge(loss, w, cfg, rng, directions)
    return cge(loss, w, cfg, rng)


def estimate_with_value(loss, w, cfg, rng=None, directions=None):
    """Like :func:`estimate` but also returns the loss at each base point.

    The base value is already part of the probe batch, so it costs nothing
    extra.
    """
    seen = {}

    def recording(probes):
        out = loss(probes)
        seen["base"] = out[:, 0].copy()
        return out

    g = estimate(recording, w, cfg, rng, directions)
    return g, seen["base"]


def query_targets(oracle, x, mode: str = "hard") -> np.ndarray:
    """Stability targets from one query per example: argmax labels, softmax rows, or raw outputs."""
    if mode not in ("hard", "soft", "output"):
        raise ArgumentError(f"unknown target mode {mode!r}")
    out = oracle.query(x)
    if mode == "hard":
        return np.argmax(out, axis=-1)
    if mode == "soft":
        return ad.softmax_array(out)
    return out


# -- stability-gradient pathways -------------------------------------------

@dataclass
class StabilityGrad:
    grads: dict  # component name -> {param name -> gradient}
    a: np.ndarray  # ZO gradient estimate at the embedding, (B, dim)
    loss: np.ndarray  # stability loss per example at the current point
    queries: int


def _flat_grads(network, grads):
    return np.concatenate([grads[n].ravel() for n in network.params])


def _unflat(network, vec):
    out, i = {}, 0
    for n, p in network.params.items():
        out[n] = vec[i:i + p.size].reshape(p.shape)
        i += p.size
    return out


def _loss_map_for(oracle, target_mode):
    if oracle.output_kind == "image":
        return "sse"
    return "soft_ce" if target_mode == "soft" else "ce"


def stability_grad_zo_ae(stack, x, delta, cfg: EstimatorConfig, targets, rng=None,
                         target_mode="hard", form="inner", directions=None) -> StabilityGrad:
    """Reduced-dimension pathway: estimate in the encoder's embedding space.

    Returns gradients of the batch-mean stability loss for the denoiser and
    encoder. ``form="inner"`` back-propagates the inner product ``a^T z``;
    ``form="jacobian"`` assembles ``dz/dtheta`` column by column and
    multiplies by ``a`` (slow; for verification).
    """
    composed = stack.composed_oracle()
    x = np.asarray(x, dtype=np.float64)
    noisy = x + np.asarray(delta, dtype=np.float64)
    den, enc = stack.denoiser, stack.encoder
    h = den.forward(noisy)
    z = enc.forward(h)
    b = z.shape[0]
    if z.shape[1] != stack.d_z:
        raise StateError(f"embedding dimension {z.shape[1]} != d_z {stack.d_z}")
    loss = ScalarLossOracle(composed, targets, _loss_map_for(composed, target_mode))
    before = composed.queries_used
    a, base_loss = estimate_with_value(loss, z, cfg, rng, directions)
    used = composed.queries_used - before
    if a.shape != z.shape:
        raise StateError(f"estimate shape {a.shape} != embedding shape {z.shape}")
    if form == "inner":
        g_enc = enc.backward(a / b)
        g_den = den.backward(g_enc.pop("input"))
        g_den.pop("input")
    elif form == "jacobian":
        g_enc, g_den = _jacobian_form(den, enc, noisy, a / b)
    else:
        raise ArgumentError(f"unknown form {form!r}")
    return StabilityGrad({"denoiser": g_den, "encoder": g_enc}, a, base_loss, used)


def _jacobian_form(den, enc, noisy, a_scaled):
    n_den, n_enc = den.num_params(), enc.num_params()
    total = np.zeros(n_den + n_enc)
    b, dz = a_scaled.shape
    for i in range(b):
        enc.forward(den.forward(noisy[i:i + 1]))
        jac = np.empty((n_den + n_enc, dz))
        for j in range(dz):
            e = np.zeros((1, dz))
            e[0, j] = 1.0
            ge = enc.backward(e)
            gd = den.backward(ge.pop("input"))
            gd.pop("input")
            jac[:, j] = np.concatenate([_flat_grads(den, gd), _flat_grads(enc, ge)])
        total += jac @ a_scaled[i]
    return _unflat(enc, total[n_den:]), _unflat(den, total[:n_den])


def stability_grad_zo_ds(denoiser, oracle, x, delta, cfg: EstimatorConfig, targets, rng=None,
                         target_mode="hard", directions=None) -> StabilityGrad:
    """Full-dimension pathway: estimate directly at the denoiser output."""
    x = np.asarray(x, dtype=np.float64)
    noisy = x + np.asarray(delta, dtype=np.float64)
    z = denoiser.forward(noisy)
    b = z.shape[0]
    flat = z.reshape(b, -1)
    loss = ScalarLossOracle(oracle, targets, _loss_map_for(oracle, target_mode))
    before = oracle.queries_used
    a, base_loss = estimate_with_value(loss, flat, cfg, rng, directions)
    used = oracle.queries_used - before
    g_den = denoiser.backward((a / b).reshape(z.shape))
    g_den.pop("input")
    return StabilityGrad({"denoiser": g_den}, a, base_loss, used)
