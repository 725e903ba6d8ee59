"""Small feed-forward computation graphs built from an :class:`ArchSpec`.

A :class:`Network` owns named float64 parameters. ``forward`` records the
graph for one call; ``backward`` returns gradients for every parameter and
for the input (key ``"input"``).
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from zoaeds.errors import ArgumentError, ContractError, ShapeError, StateError
from zoaeds.numerics import autodiff as ad
from zoaeds.numerics.rng import RngStream

LAYER_KINDS = ("dense", "conv", "relu", "sigmoid", "flatten", "reshape")


@dataclass(frozen=True)
class Layer:
    kind: str
    size: int = 0  # dense features or conv output channels
    kernel: int = 3
    shape: tuple = ()  # reshape target, batch axis excluded

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ArgumentError(f"unknown layer kind {self.kind!r}")

    def to_dict(self):
        return {"kind": self.kind, "size": self.size, "kernel": self.kernel, "shape": list(self.shape)}

    @classmethod
    def from_dict(cls, d):
        return cls(d["kind"], int(d.get("size", 0)), int(d.get("kernel", 3)), tuple(d.get("shape", ())))


@dataclass
class ArchSpec:
    input_shape: tuple
    layers: list = field(default_factory=list)
    residual: bool = False  # output = input - body(input)
    zero_init_last: bool = False

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        self.layers = list(self.layers)
        self._shapes = self._infer_shapes()
        if self.residual and self._shapes[-1] != self.input_shape:
            raise ShapeError(f"residual arch must map {self.input_shape} to itself, got {self._shapes[-1]}")

    def _infer_shapes(self):
        shapes = [self.input_shape]
        for i, layer in enumerate(self.layers):
            s = shapes[-1]
            if layer.kind == "dense":
                if len(s) != 1:
                    raise ShapeError(f"layer {i} (dense) needs a flat input, got {s}")
                s = (layer.size,)
            elif layer.kind == "conv":
                if len(s) != 3:
                    raise ShapeError(f"layer {i} (conv) needs (C, H, W) input, got {s}")
                if layer.kernel % 2 != 1:
                    raise ShapeError(f"layer {i} (conv): kernel must be odd")
                s = (layer.size, s[1], s[2])
            elif layer.kind == "flatten":
                s = (int(np.prod(s)),)
            elif layer.kind == "reshape":
                if int(np.prod(layer.shape)) != int(np.prod(s)):
                    raise ShapeError(f"layer {i} (reshape): {s} -> {layer.shape} changes size")
                s = tuple(layer.shape)
            shapes.append(s)
        return shapes

    @property
    def output_shape(self):
        return self._shapes[-1]

    def param_shapes(self) -> dict[str, tuple]:
        out = {}
        for i, layer in enumerate(self.layers):
            s = self._shapes[i]
            if layer.kind == "dense":
                out[f"{i}.w"] = (layer.size, s[0])
                out[f"{i}.b"] = (layer.size,)
            elif layer.kind == "conv":
                out[f"{i}.w"] = (layer.size, s[0], layer.kernel, layer.kernel)
                out[f"{i}.b"] = (layer.size,)
        return out

    def to_dict(self):
        return {
            "input_shape": list(self.input_shape),
            "layers": [layer.to_dict() for layer in self.layers],
            "residual": self.residual,
            "zero_init_last": self.zero_init_last,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            tuple(d["input_shape"]),
            [Layer.from_dict(x) for x in d["layers"]],
            bool(d.get("residual", False)),
            bool(d.get("zero_init_last", False)),
        )


def init_params(arch: ArchSpec, rng: RngStream) -> dict[str, np.ndarray]:
    """He-uniform weights, zero biases."""
    params = {}
    shapes = arch.param_shapes()
    weight_names = [n for n in shapes if n.endswith(".w")]
    for name, shape in shapes.items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape)
            continue
        fan_in = int(np.prod(shape[1:]))
        bound = np.sqrt(6.0 / fan_in)
        params[name] = rng.child(name).generator.uniform(-bound, bound, size=shape)
    if arch.zero_init_last and weight_names:
        params[weight_names[-1]][...] = 0.0
    return params


class Network:
    """A parameterised graph over a batch of inputs shaped ``(N, *input_shape)``."""

    def __init__(self, arch: ArchSpec, params=None, rng: RngStream | None = None):
        self.arch = arch
        if params is None:
            params = init_params(arch, rng if rng is not None else RngStream(0))
        expected = arch.param_shapes()
        if set(params) != set(expected):
            raise ShapeError(f"parameter names {sorted(params)} do not match arch {sorted(expected)}")
        for name, shape in expected.items():
            if tuple(np.shape(params[name])) != shape:
                raise ShapeError(f"parameter {name}: shape {np.shape(params[name])} != {shape}")
        self.params = {n: np.array(params[n], dtype=np.float64) for n in expected}
        self.frozen = False
        self._tape = None

    @property
    def input_shape(self):
        return self.arch.input_shape

    @property
    def output_shape(self):
        return self.arch.output_shape

    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def freeze(self):
        self.frozen = True
        for p in self.params.values():
            p.setflags(write=False)
        return self

    def copy(self) -> "Network":
        return Network(self.arch, {n: p.copy() for n, p in self.params.items()})

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name], dtype="<f8").tobytes())
        return h.hexdigest()

    def set_params(self, params):
        if self.frozen:
            raise ContractError("cannot update parameters of a frozen network")
        for name, value in params.items():
            if self.params[name].shape != np.shape(value):
                raise ShapeError(f"parameter {name}: shape {np.shape(value)} != {self.params[name].shape}")
            self.params[name] = np.array(value, dtype=np.float64)

    def _batched(self, x):
        x = np.asarray(x, dtype=np.float64)
        shape = self.arch.input_shape
        if x.shape == shape:
            return x[None], True
        if x.shape[1:] != shape:
            raise ShapeError(f"forward: input shape {x.shape} does not match declared input {shape}")
        return x, False

    def _build(self, x_node, p_nodes):
        h = x_node
        for i, layer in enumerate(self.arch.layers):
            if layer.kind == "dense":
                h = ad.dense(h, p_nodes[f"{i}.w"], p_nodes[f"{i}.b"])
            elif layer.kind == "conv":
                h = ad.conv2d(h, p_nodes[f"{i}.w"], p_nodes[f"{i}.b"])
            elif layer.kind == "relu":
                h = ad.relu(h)
            elif layer.kind == "sigmoid":
                h = ad.sigmoid(h)
            elif layer.kind == "flatten":
                h = ad.flatten(h)
            elif layer.kind == "reshape":
                h = ad.reshape(h, (h.shape[0],) + tuple(layer.shape))
        if self.arch.residual:
            h = ad.sub(x_node, h)
        return h

    def node(self, x: ad.Node, p_nodes=None) -> tuple[ad.Node, dict]:
        """Extend an existing autodiff graph; returns (output node, parameter nodes)."""
        if x.shape[1:] != self.arch.input_shape:
            raise ShapeError(f"forward: input shape {x.shape} does not match declared input {self.arch.input_shape}")
        if p_nodes is None:
            p_nodes = {n: ad.Node(p) for n, p in self.params.items()}
        return self._build(x, p_nodes), p_nodes

    def forward(self, x) -> np.ndarray:
        x, single = self._batched(x)
        x_node = ad.Node(x)
        out, p_nodes = self.node(x_node)
        self._tape = (x_node, p_nodes, out, single)
        return out.value[0] if single else out.value

    __call__ = forward

    def predict(self, x, chunk: int = 4096) -> np.ndarray:
        """Forward without recording; safe to share across threads."""
        x, single = self._batched(x)
        outs = []
        for start in range(0, max(len(x), 1), chunk):
            out, _ = self.node(ad.Node(x[start:start + chunk]))
            outs.append(out.value)
        y = np.concatenate(outs) if outs else np.zeros((0,) + self.output_shape)
        return y[0] if single else y

    def backward(self, output_grad) -> dict[str, np.ndarray]:
        """Gradients of ``<output, output_grad>`` w.r.t. each parameter and the input."""
        if self._tape is None:
            raise StateError("backward called before forward")
        x_node, p_nodes, out, single = self._tape
        g = np.asarray(output_grad, dtype=np.float64)
        if single:
            g = g[None]
        if g.shape != out.value.shape:
            raise ShapeError(f"backward: output_grad shape {g.shape} != output shape {out.value.shape}")
        grads = ad.backward(out, g)
        result = {n: grads.get(id(node), np.zeros_like(node.value)) for n, node in p_nodes.items()}
        gx = grads.get(id(x_node), np.zeros_like(x_node.value))
        result["input"] = gx[0] if single else gx
        return result


def forward(graph: Network, inputs) -> np.ndarray:
    if isinstance(inputs, dict):
        (inputs,) = inputs.values()
    return graph.forward(inputs)


def backward(graph: Network, output_grad) -> dict[str, np.ndarray]:
    return graph.backward(output_grad)
