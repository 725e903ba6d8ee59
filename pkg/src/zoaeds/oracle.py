"""Query-only access to a protected predictor.

The defender never sees the model behind a :class:`BlackBoxOracle`: the
only operation is :meth:`query`, and every submitted row is counted.
"""
from __future__ import annotations

import threading

import numpy as np

from zoaeds.errors import ArgumentError, BlackBoxAccessError, ShapeError

OUTPUT_KINDS = ("logits", "image")


class BlackBoxOracle:
    __slots__ = ("_eval", "_count", "_lock", "input_shape", "output_kind")

    def __init__(self, fn, input_shape, output_kind: str = "logits"):
        if output_kind not in OUTPUT_KINDS:
            raise ArgumentError(f"output_kind must be one of {OUTPUT_KINDS}, got {output_kind!r}")
        self._eval = fn
        self._count = 0
        self._lock = threading.Lock()
        self.input_shape = tuple(input_shape)
        self.output_kind = output_kind

    @classmethod
    def from_network(cls, network, output_kind="logits"):
        """Wrap a white-box network; the wrapper keeps only its predict function."""
        predict = network.predict
        return cls(lambda x: predict(x), network.input_shape, output_kind)

    @property
    def queries_used(self) -> int:
        return self._count

    def _count_rows(self, k: int):
        with self._lock:
            self._count += k

    def query(self, x) -> np.ndarray:
        """Evaluate one input or a batch; a batch of k rows costs k queries."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape == self.input_shape:
            self._count_rows(1)
            return np.asarray(self._eval(x[None]))[0]
        if x.shape[1:] != self.input_shape:
            raise ShapeError(f"query: input shape {x.shape} does not match oracle input {self.input_shape}")
        self._count_rows(x.shape[0])
        if x.shape[0] == 0:
            return np.zeros((0,))
        return np.asarray(self._eval(x))

    __call__ = query

    @property
    def params(self):
        raise BlackBoxAccessError("black-box oracle exposes no parameters")

    parameters = params
    weights = params

    def __repr__(self):
        return f"BlackBoxOracle(input_shape={self.input_shape}, output_kind={self.output_kind!r}, queries_used={self._count})"


class ComposedOracle:
    """``z -> inner(decoder(z))``: a frozen decoder merged into the black box."""

    __slots__ = ("inner", "_decoder")

    def __init__(self, inner: BlackBoxOracle, decoder):
        if tuple(decoder.output_shape) != tuple(inner.input_shape):
            raise ArgumentError(
                f"decoder output {tuple(decoder.output_shape)} does not match oracle input {inner.input_shape}"
            )
        if not decoder.frozen:
            decoder = decoder.copy().freeze()
        self.inner = inner
        self._decoder = decoder

    @property
    def input_shape(self):
        return tuple(self._decoder.input_shape)

    @property
    def output_kind(self):
        return self.inner.output_kind

    @property
    def queries_used(self) -> int:
        return self.inner.queries_used

    @property
    def decoder_checksum(self) -> str:
        return self._decoder.checksum()

    def query(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        if z.shape != self.input_shape and z.shape[1:] != self.input_shape:
            raise ShapeError(f"query: input shape {z.shape} does not match composed input {self.input_shape}")
        return self.inner.query(self._decoder.predict(z))

    __call__ = query

    @property
    def params(self):
        raise BlackBoxAccessError("black-box oracle exposes no parameters")


def query(oracle, x):
    return oracle.query(x)


def compose_with_decoder(oracle: BlackBoxOracle, decoder) -> ComposedOracle:
    return ComposedOracle(oracle, decoder)
