"""The network modules and a feature-extraction backbone built from a layer list."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, NamedTuple

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, ShapeError
from .geometry import ConvGeometry, GridSpec, ReceptiveField, rf_step, select_tap
from .tensor import Tensor

LAYER_KINDS = ("conv", "convblock", "mbconv", "gap", "linear", "activation")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    kernel: int = 1
    stride: int = 1
    padding: str = "SAME"
    channels: int = 0
    activation: str | None = None
    expand: int = 1  # mbconv expansion factor

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigurationError(f"unknown layer kind {self.kind!r}")
        if self.padding not in ("SAME", "VALID"):
            raise ConfigurationError(f"unknown padding {self.padding!r}")


@dataclass(frozen=True)
class BackboneSpec:
    name: str
    base_resolution: int
    in_channels: int
    layers: tuple[LayerSpec, ...]
    tap_layer: int

    @property
    def feature_dim(self) -> int:
        return trace(self)[-1].out_shape[-1]

    @property
    def executable(self) -> bool:
        return all(layer.kind != "mbconv" for layer in self.layers)


class ConvPrim(NamedTuple):
    """One conv/linear primitive: the unit of FLOPs and parameter accounting."""

    name: str
    cin: int
    k: int
    stride: int
    padding: str
    cout: int
    h_out: int
    w_out: int
    depthwise: bool = False
    bias: bool = True


class LayerTrace(NamedTuple):
    index: int
    kind: str
    in_shape: tuple[int, ...]
    out_shape: tuple[int, ...]
    prims: tuple[ConvPrim, ...]
    rf: ReceptiveField | None


def _out(n: int, k: int, s: int, p: str) -> int:
    return T.conv_output_extent(n, k, s, p)


def _expand(layer: LayerSpec, idx: int, h: int, c: int):
    """Primitives, RF geometry and output shape of one backbone layer."""
    k, s, p, C = layer.kernel, layer.stride, layer.padding, layer.channels
    name = f"{idx}.{layer.kind}"
    if layer.kind == "conv":
        ho = _out(h, k, s, p)
        return [ConvPrim(name, c, k, s, p, C, ho, ho)], [ConvGeometry(k, s, p)], (ho, ho, C)
    if layer.kind == "convblock":
        q = C // 4
        ho = _out(h, k, s, p)
        prims = [
            ConvPrim(name + ".a", c, 1, 1, "SAME", q, h, h),
            ConvPrim(name + ".b", q, k, s, p, q, ho, ho),
            ConvPrim(name + ".c", q, 1, 1, "SAME", C, ho, ho),
        ]
        if s > 1 or c != C:
            prims.append(ConvPrim(name + ".skip", c, 1, s, "SAME", C, ho, ho))
        geo = [ConvGeometry(1), ConvGeometry(k, s, p), ConvGeometry(1)]
        return prims, geo, (ho, ho, C)
    if layer.kind == "mbconv":
        e = c * layer.expand
        ho = _out(h, k, s, "SAME")
        se = max(1, int(c * 0.25))
        prims = []
        if layer.expand != 1:
            prims.append(ConvPrim(name + ".expand", c, 1, 1, "SAME", e, h, h, bias=False))
        prims += [
            ConvPrim(name + ".dw", e, k, s, "SAME", e, ho, ho, depthwise=True, bias=False),
            ConvPrim(name + ".se1", e, 1, 1, "SAME", se, 1, 1),
            ConvPrim(name + ".se2", se, 1, 1, "SAME", e, 1, 1),
            ConvPrim(name + ".project", e, 1, 1, "SAME", C, ho, ho, bias=False),
        ]
        geo = ([ConvGeometry(1)] if layer.expand != 1 else []) + [ConvGeometry(k, s, "SAME"), ConvGeometry(1)]
        return prims, geo, (ho, ho, C)
    if layer.kind == "gap":
        return [], [], (c,)
    if layer.kind == "linear":
        return [ConvPrim(name, c, 1, 1, "SAME", C, 1, 1)], [], (C,)
    return [], [], None  # activation: shape unchanged


def trace(spec: BackboneSpec) -> list[LayerTrace]:
    """Static shape, receptive-field and primitive trace of a backbone."""
    shape: tuple[int, ...] = (spec.base_resolution, spec.base_resolution, spec.in_channels)
    rf = ReceptiveField(1, 1, 0.5)
    extent: int | None = spec.base_resolution
    out = []
    for i, layer in enumerate(spec.layers):
        spatial = len(shape) == 3
        if layer.kind in ("conv", "convblock", "mbconv", "gap") and not spatial:
            raise ConfigurationError(f"layer {i} ({layer.kind}) needs a spatial input, got {shape}")
        if layer.kind == "linear" and spatial:
            raise ConfigurationError(f"layer {i} (linear) needs a vector input; add a gap layer first")
        h = shape[0] if spatial else 1
        prims, geo, new_shape = _expand(layer, i, h, shape[-1])
        if spatial and layer.kind in ("conv", "convblock", "mbconv"):
            if layer.padding == "VALID" and layer.kernel > h:
                raise ConfigurationError(f"layer {i}: kernel {layer.kernel} larger than input {h}")
            for g in geo:
                rf, extent = rf_step(rf, g, extent)
        layer_rf = rf if (new_shape is None or len(new_shape) == 3) and spatial else None
        new_shape = shape if new_shape is None else new_shape
        out.append(LayerTrace(i, layer.kind, shape, new_shape, tuple(prims), layer_rf))
        shape = new_shape
    if not 0 <= spec.tap_layer < len(spec.layers):
        raise ConfigurationError(f"tap layer {spec.tap_layer} out of range")
    if len(out[spec.tap_layer].out_shape) != 3:
        raise ConfigurationError("tap layer must produce a spatial feature map")
    if len(shape) != 1:
        raise ConfigurationError(f"backbone must end in a vector, ends in {shape}")
    return out


def layer_receptive_fields(spec: BackboneSpec) -> list[ReceptiveField | None]:
    return [t.rf for t in trace(spec)]


# --------------------------------------------------------------------------
# registry of backbone specs

def _convblocks(k: int, c: int, s: int, p: str = "SAME", count: int = 1) -> list[LayerSpec]:
    first = LayerSpec("convblock", k, s, p, c)
    return [first] + [LayerSpec("convblock", k, 1, "SAME", c) for _ in range(count - 1)]


def _imagenet_spec() -> BackboneSpec:
    layers = [LayerSpec("conv", 3, 1, "VALID", 64, "leaky_relu")]
    layers += [LayerSpec("convblock", 3, 2, "SAME", 256), LayerSpec("convblock", 3, 1, "SAME", 256), LayerSpec("convblock", 1, 1, "SAME", 256)]
    layers += [LayerSpec("convblock", 3, 2, "SAME", 512), LayerSpec("convblock", 3, 1, "SAME", 512)]
    layers += [LayerSpec("convblock", 1, 1, "SAME", 512)] * 2
    layers += [LayerSpec("convblock", 3, 2, "VALID", 1024), LayerSpec("convblock", 3, 1, "SAME", 1024)]
    layers += [LayerSpec("convblock", 1, 1, "SAME", 1024)] * 4
    layers += [LayerSpec("convblock", 3, 1, "VALID", 2048), LayerSpec("convblock", 3, 1, "SAME", 2048), LayerSpec("convblock", 1, 1, "SAME", 2048)]
    layers += [LayerSpec("conv", 1, 1, "SAME", 512, "leaky_relu"), LayerSpec("gap")]
    # tap: output of the 13th ConvBlock (9x9x1024, receptive field 45 px)
    return BackboneSpec("paper-imagenet", 77, 3, tuple(layers), tap_layer=13)


def _fmow_lite_spec() -> BackboneSpec:
    def mb(f, k, c, s):
        return LayerSpec("mbconv", k, s, "SAME", c, expand=f)

    layers = [LayerSpec("conv", 3, 2, "SAME", 32, "silu"), mb(1, 3, 16, 1)]
    layers += [mb(6, 3, 24, 2), mb(6, 3, 24, 1), mb(6, 5, 40, 2), mb(6, 5, 40, 1)]
    layers += [mb(6, 3, 80, 2), mb(6, 3, 80, 1), mb(6, 3, 80, 1)]
    layers += [mb(6, 5, 112, 1)] * 3
    layers += [mb(6, 5, 192, 2)] + [mb(6, 5, 192, 1)] * 3
    layers += [mb(6, 3, 320, 1), LayerSpec("conv", 1, 1, "SAME", 1280, "silu"), LayerSpec("gap")]
    # tap: output of the 8th MBConv block (14x14x80, receptive field 147 px)
    return BackboneSpec("paper-fmow-lite", 224, 3, tuple(layers), tap_layer=8)


def _tiny() -> BackboneSpec:
    layers = (
        LayerSpec("conv", 3, 1, "SAME", 8, "leaky_relu"),
        LayerSpec("conv", 3, 2, "SAME", 16, "leaky_relu"),
        LayerSpec("conv", 3, 2, "SAME", 32, "leaky_relu"),
        LayerSpec("conv", 3, 1, "SAME", 32, "leaky_relu"),
        LayerSpec("gap"),
    )
    return BackboneSpec("tiny", 16, 1, layers, tap_layer=2)


BACKBONES = {
    "paper-imagenet": _imagenet_spec,
    "paper-fmow-lite": _fmow_lite_spec,
    "tiny": _tiny,
}


def get_backbone_spec(name: str) -> BackboneSpec:
    try:
        return BACKBONES[name]()
    except KeyError:
        raise ConfigurationError(f"unknown backbone spec {name!r}; known: {sorted(BACKBONES)}") from None


# --------------------------------------------------------------------------
# parameter containers

class Module:
    """Minimal parameter container with deterministic, insertion-ordered naming."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._children: dict[str, Module] = {}

    def add_param(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(value, requires_grad=True)
        self._params[name] = t
        return t

    def add_child(self, name: str, child: Module) -> Module:
        self._children[name] = child
        return child

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, t in self._params.items():
            yield prefix + name, t
        for name, child in self._children.items():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def num_parameters(self) -> int:
        return sum(t.size for _, t in self.named_parameters())


def xavier_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int, dtype) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Dense(Module):
    """Affine map over the last axis (also serves as a 1x1 convolution)."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator, dtype=np.float64, zero: bool = False):
        super().__init__()
        w = np.zeros((cin, cout), dtype) if zero else xavier_uniform(rng, (cin, cout), cin, cout, dtype)
        self.w = self.add_param("w", w)
        self.b = self.add_param("b", np.zeros(cout, dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.w, self.b)


class Conv(Module):
    def __init__(self, cin: int, cout: int, k: int, stride: int, padding: str, rng, dtype=np.float64):
        super().__init__()
        self.stride, self.padding = stride, padding
        self.w = self.add_param("w", xavier_uniform(rng, (k, k, cin, cout), k * k * cin, k * k * cout, dtype))
        self.b = self.add_param("b", np.zeros(cout, dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.w, self.stride, self.padding, self.b)


class SqueezeExcite(Module):
    """Channel gating from context pooled over ``axes``."""

    def __init__(self, channels: int, hidden: int, rng, dtype=np.float64):
        super().__init__()
        self.reduce = self.add_child("reduce", Dense(channels, max(1, hidden), rng, dtype))
        self.expand = self.add_child("expand", Dense(max(1, hidden), channels, rng, dtype))

    def __call__(self, x: Tensor, axes: tuple[int, ...]) -> Tensor:
        s = T.tmean(x, axis=axes, keepdims=True)
        s = T.sigmoid(self.expand(T.silu(self.reduce(s))))
        return x * s


# --------------------------------------------------------------------------
# feature extraction

class _ConvBlock(Module):
    def __init__(self, cin: int, layer: LayerSpec, rng, dtype):
        super().__init__()
        q = layer.channels // 4
        self.k, self.valid = layer.kernel, layer.padding == "VALID"
        self.a = self.add_child("a", Conv(cin, q, 1, 1, "SAME", rng, dtype))
        self.b = self.add_child("b", Conv(q, q, layer.kernel, layer.stride, layer.padding, rng, dtype))
        self.c = self.add_child("c", Conv(q, layer.channels, 1, 1, "SAME", rng, dtype))
        self.skip = None
        if layer.stride > 1 or cin != layer.channels:
            self.skip = self.add_child("skip", Conv(cin, layer.channels, 1, layer.stride, "SAME", rng, dtype))

    def __call__(self, x: Tensor) -> Tensor:
        h = T.leaky_relu(self.a(x))
        h = T.leaky_relu(self.b(h))
        h = T.leaky_relu(self.c(h))
        r = x
        if self.valid and self.k > 1:
            m = (self.k - 1) // 2
            r = r[..., m : r.shape[-3] - (self.k - 1 - m), m : r.shape[-2] - (self.k - 1 - m), :]
        if self.skip is not None:
            r = self.skip(r)
        return h + r


class Backbone(Module):
    """Executable feature extraction module built from a :class:`BackboneSpec`."""

    def __init__(self, spec: BackboneSpec, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        if not spec.executable:
            raise ConfigurationError(f"backbone {spec.name!r} contains profiler-only layers (mbconv)")
        self.spec = spec
        self.traces = trace(spec)
        self.layers: list[Module | None] = []
        for t, layer in zip(self.traces, spec.layers):
            cin = t.in_shape[-1]
            if layer.kind == "conv":
                mod = Conv(cin, layer.channels, layer.kernel, layer.stride, layer.padding, rng, dtype)
            elif layer.kind == "convblock":
                mod = _ConvBlock(cin, layer, rng, dtype)
            elif layer.kind == "linear":
                mod = Dense(cin, layer.channels, rng, dtype)
            else:
                mod = None
            if mod is not None:
                self.add_child(str(t.index), mod)
            self.layers.append(mod)

    @property
    def feature_dim(self) -> int:
        return self.traces[-1].out_shape[-1]

    @property
    def tap_shape(self) -> tuple[int, int, int]:
        return self.traces[self.spec.tap_layer].out_shape

    @property
    def tap_rf(self) -> ReceptiveField:
        return self.traces[self.spec.tap_layer].rf

    def extract_features(self, images: Tensor, dropout: float = 0.0, rng: np.random.Generator | None = None) -> tuple[Tensor, Tensor]:
        """``[..,base,base,C]`` images to (V ``[..,feature_dim]``, tap map F)."""
        base = self.spec.base_resolution
        if images.shape[-3:] != (base, base, self.spec.in_channels):
            raise ConfigurationError(
                f"backbone {self.spec.name!r} expects inputs of {(base, base, self.spec.in_channels)}, got {images.shape}"
            )
        x = images
        tap = None
        for i, (layer, mod) in enumerate(zip(self.spec.layers, self.layers)):
            if layer.kind == "gap":
                x = T.gap(x)
            elif layer.kind == "activation":
                x = T.activation(layer.activation, x)
            else:
                x = mod(x)
                if layer.kind in ("conv", "linear"):
                    x = T.activation(layer.activation, x)
            if i == self.spec.tap_layer:
                tap = x
        return T.dropout(x, dropout, rng), tap

    __call__ = extract_features


# --------------------------------------------------------------------------
# location module

def coordinate_grid(n: int) -> np.ndarray:
    """``[n,n,2]`` of (x, y) coordinates spaced linearly over [-1, 1]."""
    lin = np.linspace(-1.0, 1.0, n) if n > 1 else np.zeros(1)
    gy, gx = np.meshgrid(lin, lin, indexing="ij")
    return np.stack([gx, gy], axis=-1)


class LocationModule(Module):
    """Shared 1x1 head scoring each of the ``n*n`` candidate cells.

    ``variant="concat"`` tiles the backbone's output vector onto the tap map
    as context; ``variant="se"`` injects context with squeeze-and-excitation.
    Returns L2-normalized logits; the caller applies softmax.
    """

    def __init__(self, in_channels: int, context_dim: int, hidden: int, variant: str, rng, dtype=np.float64):
        super().__init__()
        if variant not in ("concat", "se"):
            raise ConfigurationError(f"unknown location variant {variant!r}")
        self.variant = variant
        self.coord_scale = self.add_param("coord_scale", np.ones(2, dtype))
        self.coord_shift = self.add_param("coord_shift", np.zeros(2, dtype))
        if variant == "concat":
            self.context_dim = context_dim
            self.fuse = self.add_child("fuse", Dense(in_channels + context_dim + 2, hidden, rng, dtype))
            self.out = self.add_child("out", Dense(hidden, 1, rng, dtype))
        else:
            self.context_dim = 0
            self.pre = self.add_child("pre", Dense(in_channels, in_channels, rng, dtype))
            self.se = self.add_child("se", SqueezeExcite(in_channels, in_channels // 2, rng, dtype))
            self.fuse = self.add_child("fuse", Dense(in_channels + 2, hidden, rng, dtype))
            self.out = self.add_child("out", Dense(hidden, 1, rng, dtype))

    def coordinates(self, n: int) -> Tensor:
        base = Tensor(coordinate_grid(n).astype(self.coord_scale.dtype))
        return base * self.coord_scale + self.coord_shift

    def location_logits(self, f_tap: Tensor, context: Tensor | None = None) -> Tensor:
        n = f_tap.shape[-2]
        if f_tap.shape[-3] != n:
            raise ShapeError(f"location module needs a square n x n map, got {f_tap.shape}")
        lead = f_tap.shape[:-3]
        if self.variant == "concat":
            if context is None or context.shape[-1] != self.context_dim:
                raise ShapeError(f"concat location module needs a context vector of {self.context_dim}")
            ctx = T.reshape(context, lead + (1, 1, self.context_dim))
            ctx = ctx + Tensor(np.zeros(lead + (n, n, 1), dtype=f_tap.dtype))
            x = T.concat([f_tap, ctx], axis=-1)
            act = T.leaky_relu
        else:
            x = T.silu(self.pre(f_tap))
            x = self.se(x, axes=(-3, -2))
            act = T.silu
        coords = self.coordinates(n) + Tensor(np.zeros(lead + (n, n, 1), dtype=f_tap.dtype))
        x = T.concat([x, coords], axis=-1)
        logits = self.out(act(self.fuse(x)))
        return T.l2_normalize(T.reshape(logits, lead + (n * n,)), axis=-1)

    __call__ = location_logits


# --------------------------------------------------------------------------
# positional encoding, classification, feature weighting

class PositionalModule(Module):
    """Fuses a feature vector with the code of its region's (x, y, s) triplet."""

    def __init__(self, feature_dim: int, enc_dim: int, mode: str, rng, dtype=np.float64):
        super().__init__()
        if mode == "concat_linear":
            self.proj = self.add_child("proj", Dense(feature_dim + enc_dim, feature_dim, rng, dtype))
        elif mode == "project_add":
            self.proj = self.add_child("proj", Dense(enc_dim, feature_dim, rng, dtype))
        else:
            raise ConfigurationError(f"unknown positional mode {mode!r}")
        self.mode, self.feature_dim, self.enc_dim = mode, feature_dim, enc_dim

    def apply_positional(self, v: Tensor, enc: Tensor) -> Tensor:
        if v.shape[-1] != self.feature_dim or enc.shape[-1] != self.enc_dim:
            raise ConfigurationError(
                f"positional module expects ({self.feature_dim}, {self.enc_dim}), got ({v.shape[-1]}, {enc.shape[-1]})"
            )
        if self.mode == "concat_linear":
            return self.proj(T.concat([v, enc], axis=-1))
        return T.silu(v + self.proj(enc))

    __call__ = apply_positional


class Classifier(Dense):
    def classify(self, v: Tensor) -> Tensor:
        return self(v)


class FeatureWeighting(Module):
    """Convex weights over ``N`` feature vectors (SE context, 1x1 logit, softmax).

    The logit projection starts at zero, so an untrained module reproduces
    plain averaging.
    """

    def __init__(self, feature_dim: int, rng, dtype=np.float64, ratio: float = 0.25):
        super().__init__()
        self.se = self.add_child("se", SqueezeExcite(feature_dim, int(feature_dim * ratio), rng, dtype))
        self.logit = self.add_child("logit", Dense(feature_dim, 1, rng, dtype, zero=True))

    def feature_weights(self, features: Tensor) -> tuple[Tensor, Tensor]:
        n = features.shape[-2]
        x = self.se(features, axes=(-2,))
        logits = T.reshape(self.logit(x), features.shape[:-2] + (n,))
        w = T.softmax(logits, axis=-1)
        agg = T.tsum(features * T.reshape(w, w.shape + (1,)), axis=-2)
        return w, agg

    __call__ = feature_weights


def mean_features(features: Tensor) -> tuple[Tensor, Tensor]:
    """Uniform-weight aggregation: weights ``1/N`` and the plain mean."""
    n = features.shape[-2]
    w = Tensor(np.full(features.shape[:-1], 1.0 / n, dtype=features.dtype))
    return w, T.tmean(features, axis=-2)


# --------------------------------------------------------------------------
# the assembled model

@dataclass
class ModelConfig:
    backbone: str = "tiny"
    num_classes: int = 4
    location_variant: str = "concat"
    location_hidden: int = 32
    encoding_mode: str = "concat_linear"
    encoding_dim: int = 32
    feature_weighting: bool = False
    dropout: float = 0.0
    dtype: str = "float64"


class TNetModel(Module):
    def __init__(self, cfg: ModelConfig, grid_n: int, rng: np.random.Generator, spec: BackboneSpec | None = None):
        super().__init__()
        dtype = np.dtype(cfg.dtype)
        self.cfg = cfg
        self.spec = spec or get_backbone_spec(cfg.backbone)
        self.backbone = self.add_child("backbone", Backbone(self.spec, rng, dtype))
        d = self.backbone.feature_dim
        c = self.backbone.tap_shape[-1]
        h = self.backbone.tap_shape[0]
        if h < grid_n:
            raise ConfigurationError(f"tap map {h}x{h} smaller than the {grid_n}x{grid_n} grid")
        self.grid_n = grid_n
        self.location = self.add_child(
            "location", LocationModule(c, d, cfg.location_hidden, cfg.location_variant, rng, dtype)
        )
        self.positional = self.add_child("positional", PositionalModule(d, cfg.encoding_dim, cfg.encoding_mode, rng, dtype))
        self.classifier = self.add_child("classifier", Classifier(d, cfg.num_classes, rng, dtype))
        self.weighting = None
        if cfg.feature_weighting:
            self.weighting = self.add_child("weighting", FeatureWeighting(d, rng, dtype))
        self.dtype = dtype

    @property
    def feature_dim(self) -> int:
        return self.backbone.feature_dim

    def node_location_logits(self, v: Tensor, f_tap: Tensor, grid: GridSpec) -> Tensor:
        f = select_tap(f_tap, self.backbone.tap_rf, grid)
        ctx = v if self.location.variant == "concat" else None
        return self.location(f, ctx)

    def aggregate(self, features: Tensor) -> tuple[Tensor, Tensor]:
        if self.weighting is None:
            return mean_features(features)
        return self.weighting(features)
