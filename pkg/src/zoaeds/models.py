"""Desk-scale networks, the composed defense stack, base-model training and checkpoints."""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from zoaeds.data import Dataset
from zoaeds.errors import ArgumentError, ContractError, FormatError, ShapeError, TrainingError
from zoaeds.numerics import autodiff as ad
from zoaeds.numerics.graph import ArchSpec, Layer, Network
from zoaeds.numerics.rng import RngStream
from zoaeds.optim import Optimizer, OptimizerConfig
from zoaeds.oracle import BlackBoxOracle, ComposedOracle


# -- architectures ----------------------------------------------------------

def denoiser_arch(shape=(1, 8, 8), width: int = 16) -> ArchSpec:
    """Three conv layers predicting the noise; output = input - prediction."""
    c = shape[0]
    layers = [Layer("conv", width), Layer("relu"), Layer("conv", width), Layer("relu"), Layer("conv", c)]
    return ArchSpec(shape, layers, residual=True, zero_init_last=True)


def encoder_arch(shape=(1, 8, 8), d_z: int = 16, channels: int = 8) -> ArchSpec:
    layers = [Layer("conv", channels), Layer("relu"), Layer("flatten"), Layer("dense", d_z)]
    return ArchSpec(shape, layers)


def decoder_arch(d_z: int = 16, shape=(1, 8, 8), channels: int = 8, squash: bool = True) -> ArchSpec:
    """Mirror of :func:`encoder_arch`; ``squash`` ends in a sigmoid for [0, 1] pixels."""
    c, h, w = shape
    layers = [
        Layer("dense", channels * h * w),
        Layer("relu"),
        Layer("reshape", shape=(channels, h, w)),
        Layer("conv", c),
    ]
    if squash:
        layers.append(Layer("sigmoid"))
    return ArchSpec((d_z,), layers)


def classifier_arch(shape=(1, 8, 8), num_classes: int = 10, channels: int = 8, hidden: int = 32) -> ArchSpec:
    layers = [
        Layer("conv", channels),
        Layer("relu"),
        Layer("flatten"),
        Layer("dense", hidden),
        Layer("relu"),
        Layer("dense", num_classes),
    ]
    return ArchSpec(shape, layers)


def reconstructor_arch(shape=(1, 8, 8), hidden: int = 128, channels: int = 8) -> ArchSpec:
    d = int(np.prod(shape))
    layers = [
        Layer("flatten"),
        Layer("dense", hidden),
        Layer("relu"),
        Layer("dense", d),
        Layer("reshape", shape=tuple(shape)),
        Layer("conv", channels),
        Layer("relu"),
        Layer("conv", shape[0]),
    ]
    return ArchSpec(shape, layers)


def linear_arch(in_dim: int, out_dim: int) -> ArchSpec:
    return ArchSpec((in_dim,), [Layer("dense", out_dim)])


# -- pipelines --------------------------------------------------------------

class LinearStage:
    """Fixed linear map on flattened inputs; no parameters."""

    def __init__(self, matrix, input_shape, output_shape=None):
        self.matrix = np.asarray(matrix, dtype=np.float64)
        self.input_shape = tuple(input_shape)
        self.output_shape = tuple(output_shape) if output_shape is not None else self.input_shape
        self.params = {}

    def predict(self, x):
        x = np.asarray(x, dtype=np.float64)
        flat = x.reshape(len(x), -1)
        return (flat @ self.matrix.T).reshape((len(x),) + self.output_shape)

    forward = predict

    def backward(self, g):
        g = np.asarray(g, dtype=np.float64)
        flat = g.reshape(len(g), -1)
        return {"input": (flat @ self.matrix).reshape((len(g),) + self.input_shape)}


class Pipeline:
    """Named stages applied in order, with chained backward passes."""

    def __init__(self, stages):
        self.stages = list(stages)

    def forward(self, x):
        for _, stage in self.stages:
            x = stage.forward(x)
        return x

    def predict(self, x):
        for _, stage in self.stages:
            x = stage.predict(x)
        return x

    def backward(self, g):
        grads = {}
        for name, stage in reversed(self.stages):
            sg = stage.backward(g)
            g = sg.pop("input")
            grads[name] = sg
        return g, grads


# -- defense stack ----------------------------------------------------------

@dataclass
class DefenseStack:
    denoiser: Network
    base: BlackBoxOracle
    encoder: Network | None = None
    decoder: Network | None = None
    base_model: Network | None = field(default=None, repr=False)  # white-box handle for FO methods/attacks
    _composed: ComposedOracle | None = field(default=None, init=False, repr=False)

    def __post_init__(self):
        if (self.encoder is None) != (self.decoder is None):
            raise ArgumentError("encoder and decoder must be given together")
        if tuple(self.denoiser.input_shape) != tuple(self.base.input_shape):
            raise ShapeError(f"denoiser input {self.denoiser.input_shape} != base input {self.base.input_shape}")
        if self.uses_ae:
            if self.encoder.output_shape != (self.decoder.input_shape[0],) or len(self.decoder.input_shape) != 1:
                raise ShapeError("encoder output and decoder input must both be (d_z,)")
            if not self.d_z < self.d:
                raise ArgumentError(f"embedding dimension d_z={self.d_z} must be < d={self.d}")
            if not self.decoder.frozen:
                self.decoder.freeze()

    @property
    def uses_ae(self) -> bool:
        return self.encoder is not None

    @property
    def d(self) -> int:
        return int(np.prod(self.denoiser.input_shape))

    @property
    def d_z(self) -> int:
        return int(self.encoder.output_shape[0]) if self.uses_ae else self.d

    @property
    def input_shape(self):
        return tuple(self.denoiser.input_shape)

    def composed_oracle(self) -> ComposedOracle:
        if not self.uses_ae:
            raise ArgumentError("stack has no autoencoder")
        if self._composed is None or not self.decoder.frozen:
            self._composed = ComposedOracle(self.base, self.decoder)
        return self._composed

    def black_box_view(self) -> "DefenseStack":
        """Same stack without the white-box base handle."""
        view = DefenseStack(self.denoiser, self.base, self.encoder, self.decoder)
        view._composed = self._composed
        return view

    def embed(self, x):
        h = self.denoiser.predict(x)
        return self.encoder.predict(h) if self.uses_ae else h

    def query(self, x):
        """Defended prediction through the oracle (counts one query per row)."""
        h = self.embed(x)
        return self.composed_oracle().query(h) if self.uses_ae else self.base.query(h)

    def white_box_pipeline(self) -> Pipeline:
        if self.base_model is None:
            raise ContractError("white-box pipeline requested but no base model handle is attached")
        stages = [("denoiser", self.denoiser)]
        if self.uses_ae:
            stages += [("encoder", self.encoder), ("decoder", self.decoder)]
        stages.append(("base", self.base_model))
        return Pipeline(stages)

    def checksums(self) -> dict:
        out = {"denoiser": self.denoiser.checksum()}
        if self.uses_ae:
            out["encoder"] = self.encoder.checksum()
            out["decoder"] = self.decoder.checksum()
        return out


def denoise(stack: DefenseStack, noisy_x) -> np.ndarray:
    noisy_x = np.asarray(noisy_x, dtype=np.float64)
    shape = stack.input_shape
    if noisy_x.shape != shape and noisy_x.shape[1:] != shape:
        raise ShapeError(f"denoise: input {noisy_x.shape} does not match {shape}")
    return stack.denoiser.predict(noisy_x)


# -- generic supervised fitting ---------------------------------------------

def iterate_minibatches(n: int, batch_size: int, rng: RngStream):
    order = rng.generator.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def _supervised_loss(net, x, y, kind):
    out = ad.Node(net.predict(x))
    if kind == "ce":
        return float(ad.cross_entropy(out, y).value.mean())
    return float(ad.squared_error(out, y).value.mean())


def fit_network(net: Network, x, y, kind: str, epochs: int, opt_cfg: OptimizerConfig,
                rng: RngStream, batch_size: int = 32) -> list[float]:
    """Minimise mean cross-entropy (``kind="ce"``) or mean per-row squared error (``"sse"``)."""
    opt = Optimizer({"net": net}, opt_cfg)
    history = []
    for epoch in range(epochs):
        for step, idx in enumerate(iterate_minibatches(len(x), batch_size, rng.child("batches", epoch))):
            out = ad.Node(net.forward(x[idx]))
            loss = ad.cross_entropy(out, y[idx]) if kind == "ce" else ad.squared_error(out, y[idx])
            g = ad.backward(ad.mean(loss))[id(out)]
            grads = net.backward(g)
            grads.pop("input")
            opt.step({"net": grads}, epoch)
        history.append(_supervised_loss(net, x, y, kind))
    return history


# -- autoencoder pre-training -----------------------------------------------

@dataclass
class AEReport:
    initial_loss: float
    final_loss: float
    history: list


def reconstruction_loss(encoder, decoder, x) -> float:
    rec = decoder.predict(encoder.predict(x))
    return float(((rec - x) ** 2).reshape(len(x), -1).sum(axis=1).mean())


def pretrain_autoencoder(encoder: Network, decoder: Network, dataset, epochs: int,
                         optimizer: OptimizerConfig | None = None, rng: RngStream | None = None,
                         batch_size: int = 32) -> AEReport:
    """White-box reconstruction training; the best epoch's parameters are kept."""
    x = dataset.images if isinstance(dataset, Dataset) else np.asarray(dataset, dtype=np.float64)
    if encoder.output_shape != (decoder.input_shape[0],) or len(decoder.input_shape) != 1:
        raise ShapeError(f"encoder output {encoder.output_shape} != decoder input {decoder.input_shape}")
    optimizer = optimizer or OptimizerConfig("adam", 1e-3)
    rng = rng or RngStream(0, ("ae",))
    opt = Optimizer({"encoder": encoder, "decoder": decoder}, optimizer)
    initial = reconstruction_loss(encoder, decoder, x)
    best = (initial, encoder.copy().params, decoder.copy().params)
    history, strikes = [], 0
    for epoch in range(epochs):
        for idx in iterate_minibatches(len(x), batch_size, rng.child("batches", epoch)):
            xb = x[idx]
            rec = ad.Node(decoder.forward(encoder.forward(xb)))
            g = ad.backward(ad.mean(ad.squared_error(rec, xb)))[id(rec)]
            gd = decoder.backward(g)
            ge = encoder.backward(gd.pop("input"))
            ge.pop("input")
            opt.step({"encoder": ge, "decoder": gd}, epoch)
        loss = reconstruction_loss(encoder, decoder, x)
        history.append(loss)
        if not np.isfinite(loss) or loss > 10 * initial:
            strikes += 1
            if strikes >= 3 or not np.isfinite(loss):
                encoder.set_params(best[1])
                decoder.set_params(best[2])
                raise TrainingError(f"autoencoder diverged at epoch {epoch}: loss {loss}", last_good=best)
        else:
            strikes = 0
        if loss < best[0]:
            best = (loss, encoder.copy().params, decoder.copy().params)
    encoder.set_params(best[1])
    decoder.set_params(best[2])
    return AEReport(initial, best[0], history)


# -- base models ------------------------------------------------------------

@dataclass
class BaseModel:
    """A trained base predictor: the oracle is what a defender receives."""

    network: Network = field(repr=False)
    oracle: BlackBoxOracle
    test_metric: float  # accuracy (classifier) or RMSE (reconstructor)


def accuracy(net_or_oracle, dataset: Dataset) -> float:
    fn = net_or_oracle.predict if isinstance(net_or_oracle, Network) else net_or_oracle.query
    return float(np.mean(np.argmax(fn(dataset.images), axis=1) == dataset.labels))


def build_base_classifier(arch: ArchSpec, dataset: Dataset, test: Dataset | None = None, epochs: int = 40,
                          optimizer: OptimizerConfig | None = None, seed: int = 0,
                          batch_size: int = 32) -> BaseModel:
    if len(dataset) == 0:
        raise ArgumentError("cannot train a classifier on an empty dataset")
    if dataset.labels is None:
        raise ArgumentError("classifier training needs labels")
    net = Network(arch, rng=RngStream(seed, ("base", "init")))
    fit_network(net, dataset.images, dataset.labels, "ce", epochs,
                optimizer or OptimizerConfig("adam", 3e-3), RngStream(seed, ("base", "train")), batch_size)
    net.freeze()
    acc = accuracy(net, test if test is not None and len(test) else dataset)
    return BaseModel(net, BlackBoxOracle.from_network(net, "logits"), acc)


def build_base_reconstructor(arch: ArchSpec, dataset: Dataset, measurement, test: Dataset | None = None,
                             epochs: int = 60, optimizer: OptimizerConfig | None = None, seed: int = 0,
                             batch_size: int = 32) -> BaseModel:
    """Train a network mapping ``A^T A x`` back to ``x``."""
    if len(dataset) == 0:
        raise ArgumentError("cannot train a reconstructor on an empty dataset")
    net = Network(arch, rng=RngStream(seed, ("base", "init")))
    inputs = measurement.measure(dataset.images)
    fit_network(net, inputs, dataset.images, "sse", epochs,
                optimizer or OptimizerConfig("adam", 3e-3), RngStream(seed, ("base", "train")), batch_size)
    net.freeze()
    ev = test if test is not None and len(test) else dataset
    rec = net.predict(measurement.measure(ev.images))
    rmse = float(np.sqrt(np.mean((rec - ev.images) ** 2)))
    return BaseModel(net, BlackBoxOracle.from_network(net, "image"), rmse)


# -- checkpoints ------------------------------------------------------------

CKPT_MAGIC = b"ZODSMODL"
CKPT_VERSION = 1


def network_to_bytes(net: Network) -> bytes:
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<I", CKPT_VERSION))
    arch = json.dumps(net.arch.to_dict(), sort_keys=True).encode()
    buf.write(struct.pack("<I", len(arch)))
    buf.write(arch)
    buf.write(struct.pack("<I", len(net.params)))
    for name, p in net.params.items():
        raw = name.encode()
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", p.ndim))
        buf.write(struct.pack(f"<{p.ndim}I", *p.shape))
        buf.write(np.ascontiguousarray(p, dtype="<f8").tobytes())
    return buf.getvalue()


def network_from_bytes(data: bytes) -> Network:
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(data):
            raise FormatError(f"truncated checkpoint while reading {what}", offset=pos)
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    if take(8, "magic") != CKPT_MAGIC:
        raise FormatError("bad checkpoint magic", offset=0)
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=8)
    (alen,) = struct.unpack("<I", take(4, "arch length"))
    arch = ArchSpec.from_dict(json.loads(take(alen, "arch spec").decode()))
    (count,) = struct.unpack("<I", take(4, "parameter count"))
    params = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4, "name length"))
        name = take(nlen, "name").decode()
        (rank,) = struct.unpack("<I", take(4, "rank"))
        shape = struct.unpack(f"<{rank}I", take(4 * rank, "dims"))
        size = int(np.prod(shape))
        params[name] = np.frombuffer(take(8 * size, f"tensor {name}"), dtype="<f8").reshape(shape).astype(np.float64)
    return Network(arch, params)


def save_network(net: Network, path):
    with open(path, "wb") as fh:
        fh.write(network_to_bytes(net))


def load_network(path) -> Network:
    with open(path, "rb") as fh:
        return network_from_bytes(fh.read())
