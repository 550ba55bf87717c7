"""Layer specifications, parameter initialisation, and forward evaluation.

A network is an ordered list of *basic units*; each unit is a short tuple of
:class:`LayerSpec` values (a residual block is a single layer spec and a
single unit).  Specs are plain frozen dataclasses so they round-trip through
the experiment config; parameters live in :class:`Layer` objects built from
them.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError

BN_MOMENTUM = 0.1
BN_EPS = 1e-5


@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int


@dataclass(frozen=True)
class Conv3x3:
    in_channels: int
    out_channels: int
    stride: int = 1
    bias: bool = False


@dataclass(frozen=True)
class BatchNorm:
    channels: int


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class MaxPool2x2:
    pass


@dataclass(frozen=True)
class AvgPoolGlobal:
    pass


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class Dropout:
    p: float = 0.5


@dataclass(frozen=True)
class ResidualBlock:
    in_channels: int
    out_channels: int
    downsample: bool | None = None

    @property
    def projects(self) -> bool:
        return self.out_channels != self.in_channels


LayerSpec = Dense | Conv3x3 | BatchNorm | ReLU | MaxPool2x2 | AvgPoolGlobal | Flatten | Dropout | ResidualBlock
LAYER_KINDS = {cls.__name__: cls for cls in (Dense, Conv3x3, BatchNorm, ReLU, MaxPool2x2, AvgPoolGlobal, Flatten, Dropout, ResidualBlock)}

Unit = tuple  # tuple[LayerSpec, ...]


@dataclass(frozen=True)
class AuxClassifierSpec:
    """Auxiliary head: ``linear`` (pool + one dense) or ``conv`` (3x3 conv + two dense)."""

    kind: str = "linear"
    num_classes: int = 10
    hidden: int = 128

    def __post_init__(self):
        if self.kind not in ("linear", "conv"):
            raise ConfigError(f"classifier kind must be 'linear' or 'conv', got {self.kind!r}")
        if self.num_classes < 1 or self.hidden < 1:
            raise ConfigError("classifier num_classes and hidden must be positive")


@dataclass(frozen=True)
class NetworkSpec:
    input_shape: tuple[int, ...]
    units: tuple[Unit, ...]
    num_classes: int = 10
    name: str = "custom"

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        object.__setattr__(self, "units", tuple(tuple(u) for u in self.units))
        self.unit_shapes()

    def __len__(self) -> int:
        return len(self.units)

    def unit_shapes(self) -> list[tuple[int, ...]]:
        """Per-sample output shape of every unit; validates the whole chain."""
        shapes = []
        shape = self.input_shape
        for i, unit in enumerate(self.units):
            if not unit:
                raise ConfigError(f"unit {i} is empty")
            for layer in unit:
                try:
                    shape = output_shape(layer, shape)
                except ShapeError as exc:
                    raise ShapeError(f"unit {i}: {exc}") from None
            shapes.append(shape)
        return shapes

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "units": [[layer_to_dict(layer) for layer in unit] for unit in self.units],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(
            input_shape=tuple(d["input_shape"]),
            units=tuple(tuple(layer_from_dict(x) for x in unit) for unit in d["units"]),
            num_classes=int(d.get("num_classes", 10)),
            name=d.get("name", "custom"),
        )


def layer_to_dict(layer) -> dict:
    return {"kind": type(layer).__name__, **dataclasses.asdict(layer)}


def layer_from_dict(d: dict):
    d = dict(d)
    kind = d.pop("kind")
    if kind not in LAYER_KINDS:
        raise ConfigError(f"unknown layer kind {kind!r}")
    return LAYER_KINDS[kind](**d)


def output_shape(layer, shape: tuple[int, ...]) -> tuple[int, ...]:
    """Per-sample output shape of ``layer`` applied to ``shape``."""
    if isinstance(layer, Dense):
        if shape != (layer.in_features,):
            raise ShapeError(f"Dense({layer.in_features}, {layer.out_features}) cannot take input {shape}")
        return (layer.out_features,)
    if isinstance(layer, (Conv3x3, ResidualBlock)):
        if len(shape) != 3 or shape[0] != layer.in_channels:
            raise ShapeError(f"{type(layer).__name__}({layer.in_channels}->{layer.out_channels}) cannot take input {shape}")
        if isinstance(layer, ResidualBlock):
            _check_block(layer)
            stride = 2 if layer.projects else 1
        else:
            stride = layer.stride
            if stride not in (1, 2):
                raise ConfigError(f"Conv3x3 stride must be 1 or 2, got {stride}")
        h = ad.conv_output_extent(shape[1], 3, stride, 1)
        w = ad.conv_output_extent(shape[2], 3, stride, 1)
        if h < 1 or w < 1:
            raise ShapeError(f"{type(layer).__name__} on {shape} gives non-positive extent")
        return (layer.out_channels, h, w)
    if isinstance(layer, BatchNorm):
        if shape[0] != layer.channels:
            raise ShapeError(f"BatchNorm({layer.channels}) cannot take input {shape}")
        return shape
    if isinstance(layer, (ReLU, Dropout)):
        if isinstance(layer, Dropout) and not 0.0 <= layer.p < 1.0:
            raise ConfigError(f"Dropout p must lie in [0, 1), got {layer.p}")
        if isinstance(layer, Dropout) and len(shape) != 1:
            raise ConfigError("Dropout is only allowed in fully-connected positions")
        return shape
    if isinstance(layer, MaxPool2x2):
        if len(shape) != 3 or shape[1] < 2 or shape[2] < 2:
            raise ShapeError(f"MaxPool2x2 cannot take input {shape}")
        return (shape[0], shape[1] // 2, shape[2] // 2)
    if isinstance(layer, AvgPoolGlobal):
        if len(shape) != 3:
            raise ShapeError(f"AvgPoolGlobal cannot take input {shape}")
        return (shape[0],)
    if isinstance(layer, Flatten):
        return (int(np.prod(shape)),)
    raise ConfigError(f"unknown layer spec {layer!r}")


def _check_block(spec: ResidualBlock) -> None:
    if spec.out_channels == spec.in_channels:
        if spec.downsample:
            raise ConfigError("ResidualBlock with equal channels cannot down-sample")
    elif spec.out_channels == 2 * spec.in_channels:
        if spec.downsample is False:
            raise ConfigError("ResidualBlock that doubles channels must down-sample")
    else:
        raise ConfigError(
            f"ResidualBlock channels must stay equal or double, got {spec.in_channels}->{spec.out_channels}"
        )


def classifier_layers(spec: AuxClassifierSpec, in_shape: tuple[int, ...]) -> list:
    if spec.kind == "linear":
        if len(in_shape) == 3:
            return [AvgPoolGlobal(), Dense(in_shape[0], spec.num_classes)]
        return [Dense(in_shape[0], spec.num_classes)]
    if len(in_shape) != 3:
        raise ShapeError(f"conv classifier needs (C, H, W) features, got {in_shape}")
    c = in_shape[0]
    # Pooling position is not fixed by the method; global average after the conv.
    return [Conv3x3(c, c, 1, bias=True), ReLU(), AvgPoolGlobal(), Dense(c, spec.hidden), ReLU(), Dense(spec.hidden, spec.num_classes)]


# ---------------------------------------------------------------------------
# Parameter initialisation
# ---------------------------------------------------------------------------

def _he(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(dtype)


def init_params(spec, rng_seed=0, dtype=np.float64) -> dict[str, np.ndarray]:
    """Fan-in scaled normal weights, zero biases, unit BatchNorm scale."""
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    if isinstance(spec, Dense):
        return {
            "weight": _he(rng, (spec.in_features, spec.out_features), spec.in_features, dtype),
            "bias": np.zeros(spec.out_features, dtype=dtype),
        }
    if isinstance(spec, Conv3x3):
        p = {"weight": _he(rng, (spec.out_channels, spec.in_channels, 3, 3), 9 * spec.in_channels, dtype)}
        if spec.bias:
            p["bias"] = np.zeros(spec.out_channels, dtype=dtype)
        return p
    if isinstance(spec, BatchNorm):
        return {"gamma": np.ones(spec.channels, dtype=dtype), "beta": np.zeros(spec.channels, dtype=dtype)}
    if isinstance(spec, ResidualBlock):
        _check_block(spec)
        stride = 2 if spec.projects else 1
        p = {}
        for prefix, sub in (
            ("conv1", Conv3x3(spec.in_channels, spec.out_channels, stride)),
            ("bn1", BatchNorm(spec.out_channels)),
            ("conv2", Conv3x3(spec.out_channels, spec.out_channels, 1)),
            ("bn2", BatchNorm(spec.out_channels)),
        ):
            p.update({f"{prefix}.{k}": v for k, v in init_params(sub, rng, dtype).items()})
        if spec.projects:
            p["proj.weight"] = _he(rng, (spec.out_channels, spec.in_channels, 1, 1), spec.in_channels, dtype)
        return p
    return {}


# ---------------------------------------------------------------------------
# Runtime layers
# ---------------------------------------------------------------------------

@dataclass
class ForwardContext:
    """Per-call settings for a forward pass.

    ``param_scale`` wraps every parameter in :func:`autodiff.scale_grad`, so
    parameter gradients are weighted while errors flowing to the layer input
    are not.  ``update_stats=False`` freezes BatchNorm running statistics
    (duplicated units and finite-difference evaluations).
    """

    train: bool = True
    param_scale: float = 1.0
    update_stats: bool = True
    seed: int = 0
    step: int = 0

    def replace(self, **kw) -> "ForwardContext":
        return dataclasses.replace(self, **kw)

    def view(self, p: Tensor) -> Tensor:
        return p if self.param_scale == 1.0 else ad.scale_grad(p, self.param_scale)


class Layer:
    """A layer spec bound to its parameter tensors and buffers."""

    def __init__(self, spec, params: dict[str, np.ndarray], uid: tuple[int, ...] = (0,), prefix: str = ""):
        self.spec = spec
        self.uid = tuple(uid)
        self.params = {k: Tensor(v, requires_grad=True, name=f"{prefix}{k}") for k, v in params.items()}
        self.buffers: dict[str, np.ndarray] = {}
        if isinstance(spec, BatchNorm):
            dtype = params["gamma"].dtype
            self.buffers = {"running_mean": np.zeros(spec.channels, dtype), "running_var": np.ones(spec.channels, dtype)}
        elif isinstance(spec, ResidualBlock):
            dtype = params["conv1.weight"].dtype
            c = spec.out_channels
            self.buffers = {f"{b}.{k}": v.copy() for b in ("bn1", "bn2") for k, v in
                            (("running_mean", np.zeros(c, dtype)), ("running_var", np.ones(c, dtype)))}

    def __repr__(self) -> str:
        return f"Layer({self.spec})"

    def forward(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        return layer_forward(self, x, ctx)


def _bn(layer: Layer, x: Tensor, ctx: ForwardContext, prefix: str = "") -> Tensor:
    gamma = ctx.view(layer.params[prefix + "gamma"])
    beta = ctx.view(layer.params[prefix + "beta"])
    rm, rv = layer.buffers[prefix + "running_mean"], layer.buffers[prefix + "running_var"]
    if not ctx.train:
        return ad.batch_norm_eval(x, gamma, beta, rm, rv, BN_EPS)
    out, mean, var = ad.batch_norm_train(x, gamma, beta, BN_EPS)
    if ctx.update_stats:
        layer.buffers[prefix + "running_mean"] = ((1 - BN_MOMENTUM) * rm + BN_MOMENTUM * mean).astype(rm.dtype)
        layer.buffers[prefix + "running_var"] = ((1 - BN_MOMENTUM) * rv + BN_MOMENTUM * var).astype(rv.dtype)
    return out


def _conv(x: Tensor, w: Tensor, stride: int, bias: Tensor | None = None) -> Tensor:
    k = w.shape[2]
    out = ad.conv2d(x, w, stride=stride, padding=k // 2)
    if bias is not None:
        out = ad.add(out, ad.reshape(bias, (1, -1, 1, 1)))
    return out


def dropout_mask(shape, p: float, seed: int, step: int, uid: Sequence[int], dtype) -> np.ndarray:
    """Inverted-dropout mask, a pure function of (seed, step, layer uid)."""
    rng = np.random.default_rng([seed, step, *uid])
    return ((rng.random(shape) >= p) / (1.0 - p)).astype(dtype)


def layer_forward(layer: Layer, x: Tensor, ctx: ForwardContext) -> Tensor:
    spec = layer.spec
    expected = output_shape(spec, x.shape[1:])  # validates compatibility
    del expected
    if isinstance(spec, Dense):
        return ad.add(ad.matmul(x, ctx.view(layer.params["weight"])), ctx.view(layer.params["bias"]))
    if isinstance(spec, Conv3x3):
        bias = ctx.view(layer.params["bias"]) if spec.bias else None
        return _conv(x, ctx.view(layer.params["weight"]), spec.stride, bias)
    if isinstance(spec, BatchNorm):
        return _bn(layer, x, ctx)
    if isinstance(spec, ReLU):
        return ad.relu(x)
    if isinstance(spec, MaxPool2x2):
        return ad.max_pool2x2(x)
    if isinstance(spec, AvgPoolGlobal):
        return ad.global_avg_pool(x)
    if isinstance(spec, Flatten):
        return ad.flatten(x)
    if isinstance(spec, Dropout):
        if not ctx.train or spec.p == 0.0:
            return x
        return ad.mul_const(x, dropout_mask(x.shape, spec.p, ctx.seed, ctx.step, layer.uid, x.dtype))
    if isinstance(spec, ResidualBlock):
        return residual_forward(layer, x, ctx)
    raise ConfigError(f"unknown layer spec {spec!r}")


def residual_forward(layer: Layer, x: Tensor, ctx: ForwardContext) -> Tensor:
    """ReLU(BN(conv2(ReLU(BN(conv1(x))))) + shortcut(x))."""
    spec = layer.spec
    _check_block(spec)
    stride = 2 if spec.projects else 1
    p = layer.params
    h = _conv(x, ctx.view(p["conv1.weight"]), stride)
    h = ad.relu(_bn(layer, h, ctx, "bn1."))
    h = _bn(layer, _conv(h, ctx.view(p["conv2.weight"]), 1), ctx, "bn2.")
    shortcut = _conv(x, ctx.view(p["proj.weight"]), 2) if spec.projects else x
    return ad.relu(ad.add(h, shortcut))


class Sequential:
    """A run of layers evaluated in order (one basic unit, or a classifier head)."""

    def __init__(self, layers: list[Layer]):
        self.layers = layers

    def forward(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        for layer in self.layers:
            x = layer.forward(x, ctx)
        return x

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.params.values()]

    def named_parameters(self) -> dict[str, Tensor]:
        return {p.name: p for p in self.parameters()}


def build_sequential(specs: Sequence, seed, dtype, uid: tuple[int, ...], prefix: str) -> Sequential:
    rng = np.random.default_rng([seed, *uid])
    layers = [Layer(s, init_params(s, rng, dtype), uid=(*uid, j), prefix=f"{prefix}.{j}.") for j, s in enumerate(specs)]
    return Sequential(layers)


def build_classifier(spec: AuxClassifierSpec, in_shape: tuple[int, ...], seed, dtype, index: int) -> Sequential:
    return build_sequential(classifier_layers(spec, in_shape), seed, dtype, uid=(1, index), prefix=f"head{index}")


def classifier_forward(head: Sequential, features: Tensor, ctx: ForwardContext) -> Tensor:
    return head.forward(features, ctx)


# ---------------------------------------------------------------------------
# Unit builders and network presets
# ---------------------------------------------------------------------------

def conv_unit(cin: int, cout: int, stride: int = 1, pool: bool = False) -> Unit:
    unit = (Conv3x3(cin, cout, stride), BatchNorm(cout), ReLU())
    return unit + (MaxPool2x2(),) if pool else unit


def dense_unit(fin: int, fout: int, dropout: float = 0.0, flatten: bool = False) -> Unit:
    unit = ((Flatten(),) if flatten else ()) + (Dense(fin, fout), BatchNorm(fout), ReLU())
    return unit + (Dropout(dropout),) if dropout else unit


def tiny_cnn(width: int = 8, input_shape=(3, 8, 8), num_classes: int = 10) -> NetworkSpec:
    """8-unit plain CNN; two max-pools keep the spatial extent small."""
    c = input_shape[0]
    w, w2 = width, 2 * width
    units = [
        conv_unit(c, w), conv_unit(w, w), conv_unit(w, w, pool=True),
        conv_unit(w, w2), conv_unit(w2, w2), conv_unit(w2, w2, pool=True),
        conv_unit(w2, w2), conv_unit(w2, w2),
    ]
    return NetworkSpec(tuple(input_shape), tuple(units), num_classes, name="tiny-cnn")


def resnet(blocks_per_stage: int, widths=(16, 32, 64), input_shape=(3, 32, 32), num_classes: int = 10,
           name: str | None = None) -> NetworkSpec:
    """CIFAR-style ResNet: a 3x3 stem unit then residual blocks, one unit each."""
    units = [conv_unit(input_shape[0], widths[0])]
    cin = widths[0]
    for cout in widths:
        for b in range(blocks_per_stage):
            units.append((ResidualBlock(cin, cout),))
            cin = cout
    return NetworkSpec(tuple(input_shape), tuple(units), num_classes, name=name or f"resnet{6 * blocks_per_stage + 2}")


def tiny_resnet(width: int = 8, input_shape=(3, 8, 8), num_classes: int = 10) -> NetworkSpec:
    """8 units: stem + seven residual blocks with two down-sampling stages."""
    w = width
    units = [conv_unit(input_shape[0], w)]
    for cin, cout in ((w, w), (w, w), (w, 2 * w), (2 * w, 2 * w), (2 * w, 4 * w), (4 * w, 4 * w), (4 * w, 4 * w)):
        units.append((ResidualBlock(cin, cout),))
    return NetworkSpec(tuple(input_shape), tuple(units), num_classes, name="tiny-resnet")


def tiny_mlp(dims=(16, 12, 12, 8), num_classes: int = 4, dropout: float = 0.0) -> NetworkSpec:
    units = [dense_unit(a, b, dropout) for a, b in zip(dims[:-1], dims[1:])]
    return NetworkSpec((dims[0],), tuple(units), num_classes, name="tiny-mlp")


PRESETS = {
    "tiny-cnn": tiny_cnn,
    "tiny-resnet": tiny_resnet,
    "tiny-mlp": tiny_mlp,
    "resnet32": lambda **kw: resnet(5, name="resnet32", **kw),
    "resnet110": lambda **kw: resnet(18, name="resnet110", **kw),
}


def preset(name: str, **kwargs) -> NetworkSpec:
    try:
        return PRESETS[name](**kwargs)
    except KeyError:
        raise ConfigError(f"unknown network preset {name!r}; known: {sorted(PRESETS)}") from None


def random_tiny_network(rng: np.random.Generator, input_shape=(2, 4, 4), num_classes: int = 3,
                        max_width: int = 6) -> NetworkSpec:
    """Random 3-8 unit network mixing conv, residual and dense units."""
    n_units = int(rng.integers(3, 9))
    c, h, w = input_shape
    units = []
    n_spatial = int(rng.integers(1, n_units))  # at least one spatial unit, at least one dense unit
    for i in range(n_spatial):
        kind = rng.choice(["conv", "res"]) if i > 0 else "conv"
        if kind == "conv":
            cout = int(rng.integers(2, max_width + 1))
            units.append(conv_unit(c, cout))
            c = cout
        else:
            double = h >= 2 and w >= 2 and 2 * c <= max_width and rng.random() < 0.4
            cout = 2 * c if double else c
            units.append((ResidualBlock(c, cout),))
            if double:
                h, w = (h + 1) // 2, (w + 1) // 2
            c = cout
    fin = c * h * w
    for i in range(n_units - n_spatial):
        fout = int(rng.integers(2, max_width + 3))
        units.append(dense_unit(fin, fout, flatten=(i == 0)))
        fin = fout
    return NetworkSpec(tuple(input_shape), tuple(units), num_classes, name="random")
