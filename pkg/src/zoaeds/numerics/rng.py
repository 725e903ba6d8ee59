"""Counter-based random streams keyed by a seed and a path of purposes.

A stream is a pure function of ``(seed, path)``: deriving a child never
consumes draws from the parent, so ``child("noise", epoch, batch)`` yields
the same numbers regardless of what else was sampled before.
"""
from __future__ import annotations

import zlib

import numpy as np

from zoaeds.errors import ArgumentError


def _key(part) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    part = int(part)
    if part < 0:
        raise ArgumentError(f"stream keys must be non-negative, got {part}")
    return part


class RngStream:
    def __init__(self, seed: int, path: tuple = ()):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.path = tuple(_key(p) for p in path)
        self._gen = None

    @property
    def stream_id(self) -> int:
        return zlib.crc32(repr(self.path).encode()) if self.path else 0

    def child(self, *parts) -> "RngStream":
        return RngStream(self.seed, self.path + tuple(_key(p) for p in parts))

    @property
    def generator(self) -> np.random.Generator:
        if self._gen is None:
            ss = np.random.SeedSequence(self.seed, spawn_key=self.path)
            self._gen = np.random.Generator(np.random.Philox(ss))
        return self._gen

    def __repr__(self):
        return f"RngStream(seed={self.seed}, path={self.path})"


def sample_gaussian(rng: RngStream, shape, sigma: float = 1.0) -> np.ndarray:
    """I.i.d. ``N(0, sigma^2)`` draws."""
    if sigma < 0:
        raise ArgumentError(f"sample_gaussian: sigma must be >= 0, got {sigma}")
    draw = rng.generator.standard_normal(shape)
    return draw * sigma


def sample_unit_sphere(rng: RngStream, dim: int, size=None) -> np.ndarray:
    """Uniform direction(s) on the unit sphere in ``R^dim``.

    ``size`` prepends batch axes: ``size=(q,)`` gives a (q, dim) array.
    """
    if dim < 1:
        raise ArgumentError(f"sample_unit_sphere: dim must be >= 1, got {dim}")
    lead = () if size is None else tuple(np.atleast_1d(size))
    g = rng.generator.standard_normal(lead + (dim,))
    norms = np.linalg.norm(g, axis=-1, keepdims=True)
    # a zero Gaussian draw has probability zero; guard anyway
    while np.any(norms == 0):
        bad = (norms == 0)[..., 0]
        g[bad] = rng.generator.standard_normal((int(bad.sum()), dim))
        norms = np.linalg.norm(g, axis=-1, keepdims=True)
    return g / norms
