"""The three 1-D convolutional networks of the adversarial adaptation scheme.

Generator: maps a source window plus a noise vector to a target-styled
window of the same dimension. Discriminator: scores a window in (-1, 1),
positive meaning "looks like the target subject". Classifier: softmax
activity probabilities.

All convolutions use kernel size 3, stride 1 and length-preserving
padding; there is no pooling, batch norm, dropout or skip connection
anywhere. Hidden activations are relu (leaky relu 0.2 inside the
discriminator); the discriminator head is tanh, the classifier head is
softmax, the generator output is linear.
"""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .rng import RandomSource
from .tensor import ShapeError, Tensor

KERNEL_SIZE = 3
LEAKY_SLOPE = 0.2


@dataclass(frozen=True)
class GeneratorSpec:
    input_dim: int
    blocks: int = 2          # cb: conv blocks of two layers each
    filters: int = 32        # gf: filters per in-block conv layer
    noise_dim: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.input_dim < 1:
            raise ValueError(f"input_dim must be >= 1, got {self.input_dim}")
        if self.blocks < 1:
            raise ValueError(f"blocks must be >= 1, got {self.blocks}")
        if self.filters < 1:
            raise ValueError(f"filters must be >= 1, got {self.filters}")
        if self.noise_dim < 0:
            raise ValueError(f"noise_dim must be >= 0, got {self.noise_dim}")


@dataclass(frozen=True)
class DiscriminatorSpec:
    input_dim: int
    base_filters: int = 8    # df: the five conv layers use 2x, 4x, 8x, 4x, 2x this
    seed: int = 0

    def __post_init__(self):
        if self.input_dim < 1:
            raise ValueError(f"input_dim must be >= 1, got {self.input_dim}")
        if self.base_filters < 1:
            raise ValueError(f"base_filters must be >= 1, got {self.base_filters}")

    @property
    def filter_counts(self) -> tuple[int, ...]:
        df = self.base_filters
        return (2 * df, 4 * df, 8 * df, 4 * df, 2 * df)


@dataclass(frozen=True)
class ClassifierSpec:
    input_dim: int
    num_classes: int
    base_filters: int = 16   # cf: layers use cf, cf/2, cf/4 (floor division)
    seed: int = 0

    def __post_init__(self):
        if self.input_dim < 1:
            raise ValueError(f"input_dim must be >= 1, got {self.input_dim}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.base_filters < 4:
            raise ValueError(f"base_filters must be >= 4 so the third layer keeps >= 1 filter, "
                             f"got {self.base_filters}")

    @property
    def filter_counts(self) -> tuple[int, ...]:
        cf = self.base_filters
        return (cf, cf // 2, cf // 4)


def _init_uniform(rng: RandomSource, shape, limit: float) -> np.ndarray:
    return (rng.uniform(shape) * 2.0 - 1.0) * limit


def _weight_limit(fan_in: int, fan_out: int, activation: str) -> float:
    # fan-in scaling for rectifiers, fan-average for the saturating heads
    if activation in ("relu", "leaky_relu"):
        return float(np.sqrt(6.0 / fan_in))
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def _activate(t: Tensor, kind: str) -> Tensor:
    if kind == "linear":
        return t
    if kind == "relu":
        return T.relu(t)
    if kind == "leaky_relu":
        return T.leaky_relu(t, LEAKY_SLOPE)
    if kind == "tanh":
        return T.tanh(t)
    if kind == "softmax":
        return T.softmax(t)
    raise ValueError(f"unknown activation {kind!r}")


class ConvLayer:
    def __init__(self, name: str, in_channels: int, out_channels: int,
                 activation: str, rng: RandomSource):
        self.name = name
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.activation = activation
        fan_in = in_channels * KERNEL_SIZE
        fan_out = out_channels * KERNEL_SIZE
        limit = _weight_limit(fan_in, fan_out, activation)
        self.kernels = Tensor(_init_uniform(rng, (out_channels, in_channels, KERNEL_SIZE), limit),
                              requires_grad=True)
        self.bias = Tensor(np.zeros(out_channels), requires_grad=True)

    def __call__(self, t: Tensor) -> Tensor:
        return _activate(T.conv1d(t, self.kernels, self.bias, stride=1, padding="same"),
                         self.activation)

    def descriptor(self) -> dict:
        return {"type": "conv1d", "name": self.name, "in_channels": self.in_channels,
                "filters": self.out_channels, "kernel_size": KERNEL_SIZE, "stride": 1,
                "padding": "same", "activation": self.activation}


class DenseLayer:
    def __init__(self, name: str, in_features: int, units: int,
                 activation: str, rng: RandomSource):
        self.name = name
        self.in_features = in_features
        self.units = units
        self.activation = activation
        limit = _weight_limit(in_features, units, activation)
        self.weights = Tensor(_init_uniform(rng, (units, in_features), limit), requires_grad=True)
        self.bias = Tensor(np.zeros(units), requires_grad=True)

    def __call__(self, t: Tensor) -> Tensor:
        return _activate(T.dense(t, self.weights, self.bias), self.activation)

    def descriptor(self) -> dict:
        return {"type": "dense", "name": self.name, "in_features": self.in_features,
                "units": self.units, "activation": self.activation}


def _as_rows(value, dim: int, what: str) -> tuple[Tensor, bool]:
    """Coerce to a 2-D [batch, dim] tensor; remember whether input was a single row."""
    t = T.as_tensor(value)
    if t.ndim == 1:
        if t.shape[0] != dim:
            raise ShapeError(f"{what} has dimension {t.shape[0]}, expected {dim}")
        return T.reshape(t, (1, dim)), True
    if t.ndim == 2:
        if t.shape[1] != dim:
            raise ShapeError(f"{what} has dimension {t.shape[1]}, expected {dim}")
        return t, False
    raise ShapeError(f"{what} must be a vector or a batch of vectors, got shape {t.shape}")


def _collect(layers) -> OrderedDict:
    params: OrderedDict[str, Tensor] = OrderedDict()
    for layer in layers:
        if isinstance(layer, ConvLayer):
            params[f"{layer.name}.kernels"] = layer.kernels
            params[f"{layer.name}.bias"] = layer.bias
        else:
            params[f"{layer.name}.weights"] = layer.weights
            params[f"{layer.name}.bias"] = layer.bias
    return params


class Generator:
    def __init__(self, spec: GeneratorSpec):
        self.spec = spec
        rng = RandomSource(spec.seed, "generator-init")
        in_channels = 2 if spec.noise_dim > 0 else 1
        self.layers: list[ConvLayer] = []
        channels = in_channels
        for b in range(spec.blocks):
            for j in range(2):
                self.layers.append(ConvLayer(f"block{b}.conv{j}", channels, spec.filters,
                                             "relu", rng))
                channels = spec.filters
        self.output_layer = ConvLayer("output", channels, 1, "linear", rng)
        if spec.filters >= 2:
            self._overlay_identity()

    def _overlay_identity(self):
        """Start as the identity map: G(x, z) = x at step zero.

        Filters 0 and 1 of every hidden layer carry relu(x) and relu(-x);
        the output layer reconstructs x as their difference and is
        otherwise zeroed. Translation should begin from the source window
        itself, not from a blank canvas, or the class correspondence
        between domains is left to chance. The remaining filters keep
        their random weights and learn the actual shift.
        """
        first = self.layers[0].kernels.data
        first[0] = 0.0
        first[1] = 0.0
        first[0, 0, 1] = 1.0
        first[1, 0, 1] = -1.0
        for layer in self.layers[1:]:
            k = layer.kernels.data
            k[0] = 0.0
            k[1] = 0.0
            k[0, 0, 1] = 1.0
            k[1, 1, 1] = 1.0
        out = self.output_layer.kernels.data
        out[:] = 0.0
        out[0, 0, 1] = 1.0
        out[0, 1, 1] = -1.0

    def forward(self, x, z=None) -> Tensor:
        xb, single = _as_rows(x, self.spec.input_dim, "generator input")
        n, d = xb.shape
        h = T.reshape(xb, (n, 1, d))
        if self.spec.noise_dim > 0:
            if z is None:
                raise ShapeError("generator requires a noise vector (noise_dim > 0)")
            zb, _ = _as_rows(z, self.spec.noise_dim, "generator noise")
            if zb.shape[0] != n:
                raise ShapeError(f"noise batch {zb.shape[0]} does not match input batch {n}")
            noise_channel = T.repeat_to_length(T.reshape(zb, (n, 1, self.spec.noise_dim)), d)
            h = T.concat([h, noise_channel], axis=1)
        for layer in self.layers:
            h = layer(h)
        out = self.output_layer(h)
        out = T.reshape(out, (n, d))
        return T.reshape(out, (d,)) if single else out

    def parameters(self) -> OrderedDict:
        return _collect([*self.layers, self.output_layer])

    def architecture(self) -> dict:
        return {"kind": "generator", "input_dim": self.spec.input_dim,
                "blocks": self.spec.blocks, "filters": self.spec.filters,
                "noise_dim": self.spec.noise_dim,
                "layers": [l.descriptor() for l in [*self.layers, self.output_layer]]}


class Discriminator:
    def __init__(self, spec: DiscriminatorSpec):
        self.spec = spec
        rng = RandomSource(spec.seed, "discriminator-init")
        self.layers: list[ConvLayer] = []
        channels = 1
        for i, f in enumerate(spec.filter_counts):
            self.layers.append(ConvLayer(f"conv{i}", channels, f, "leaky_relu", rng))
            channels = f
        self.output_layer = DenseLayer("output", channels * spec.input_dim, 1, "tanh", rng)

    def forward(self, x) -> Tensor:
        xb, single = _as_rows(x, self.spec.input_dim, "discriminator input")
        n, d = xb.shape
        h = T.reshape(xb, (n, 1, d))
        for layer in self.layers:
            h = layer(h)
        h = T.reshape(h, (n, self.output_layer.in_features))
        out = T.reshape(self.output_layer(h), (n,))
        return T.reshape(out, ()) if single else out

    def parameters(self) -> OrderedDict:
        return _collect([*self.layers, self.output_layer])

    def architecture(self) -> dict:
        return {"kind": "discriminator", "input_dim": self.spec.input_dim,
                "base_filters": self.spec.base_filters,
                "layers": [l.descriptor() for l in [*self.layers, self.output_layer]]}


class Classifier:
    def __init__(self, spec: ClassifierSpec):
        self.spec = spec
        rng = RandomSource(spec.seed, "classifier-init")
        self.layers: list[ConvLayer] = []
        channels = 1
        for i, f in enumerate(spec.filter_counts):
            self.layers.append(ConvLayer(f"conv{i}", channels, f, "relu", rng))
            channels = f
        self.output_layer = DenseLayer("output", channels * spec.input_dim,
                                       spec.num_classes, "softmax", rng)

    def forward(self, x) -> Tensor:
        xb, single = _as_rows(x, self.spec.input_dim, "classifier input")
        n, d = xb.shape
        h = T.reshape(xb, (n, 1, d))
        for layer in self.layers:
            h = layer(h)
        h = T.reshape(h, (n, self.output_layer.in_features))
        out = self.output_layer(h)
        return T.reshape(out, (self.spec.num_classes,)) if single else out

    def predict(self, windows: np.ndarray) -> np.ndarray:
        """Argmax class ids for a matrix of windows (no recording)."""
        with T.paused():
            probs = self.forward(np.asarray(windows, dtype=np.float64))
        return np.argmax(probs.data, axis=-1)

    def parameters(self) -> OrderedDict:
        return _collect([*self.layers, self.output_layer])

    def architecture(self) -> dict:
        return {"kind": "classifier", "input_dim": self.spec.input_dim,
                "num_classes": self.spec.num_classes,
                "base_filters": self.spec.base_filters,
                "layers": [l.descriptor() for l in [*self.layers, self.output_layer]]}


@dataclass
class ModelBundle:
    generator: Generator
    discriminator: Discriminator
    classifier: Classifier

    def parameters(self) -> OrderedDict:
        params: OrderedDict[str, Tensor] = OrderedDict()
        for prefix, net in (("generator", self.generator),
                            ("discriminator", self.discriminator),
                            ("classifier", self.classifier)):
            for name, p in net.parameters().items():
                params[f"{prefix}.{name}"] = p
        return params


def build_generator(spec: GeneratorSpec) -> Generator:
    return Generator(spec)


def build_discriminator(spec: DiscriminatorSpec) -> Discriminator:
    return Discriminator(spec)


def build_classifier(spec: ClassifierSpec) -> Classifier:
    return Classifier(spec)


def build_bundle(gen_spec: GeneratorSpec, disc_spec: DiscriminatorSpec,
                 cls_spec: ClassifierSpec) -> ModelBundle:
    if len({gen_spec.input_dim, disc_spec.input_dim, cls_spec.input_dim}) != 1:
        raise ValueError("generator, discriminator and classifier must share one input dimension")
    return ModelBundle(Generator(gen_spec), Discriminator(disc_spec), Classifier(cls_spec))


def parameter_count(net) -> int:
    return int(sum(p.data.size for p in net.parameters().values()))
