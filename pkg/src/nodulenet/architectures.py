"""The four two-pathway networks and their structural introspection.

Both pathways are identical except that the large (context) pathway starts
with a 2x2x2 max pool, which brings a 100x100x10 crop down to the 50x50x5
grid of the small pathway. Each pathway pools four times with 2x2x1 windows.

* ``basic``: ten conv/BN/ReLU units (32, 32, 64, ..., 512, 512 maps), a pool
  after every second unit; flattened final maps of both pathways feed one
  sigmoid output.
* ``multi_output``: ``basic`` plus an auxiliary sigmoid head after each of the
  four pools (global average pool -> dense). The final classifier sees the
  pooled descriptors of every tapped map plus both flattened final maps.
* ``densenet``: a 16-map stem conv, then dense blocks of 4, 10, 20, 20, 20
  layers with growth 12, 12, 12, 24, 48; a BN/ReLU/1x1-conv (compression 0.5)
  /pool transition between consecutive blocks; BN/ReLU after the last block.
* ``modensenet``: ``densenet`` with heads after each transition pool.
"""

from __future__ import annotations

import json
from fractions import Fraction

import numpy as np

from .errors import ConfigurationError, DimensionError
from .layers import (
    BatchNorm,
    ClassifierHead,
    Conv3D,
    Layer,
    MaxPool3D,
    PointwiseConv3D,
    global_avg_pool,
)
from .tensor import Tensor, concat, flatten, relu

ARCH_KINDS = ("basic", "multi_output", "densenet", "modensenet")
PAPER_SMALL_SHAPE = (50, 50, 5)
PAPER_LARGE_SHAPE = (100, 100, 10)

BASIC_CHANNELS = (32, 32, 64, 64, 128, 128, 256, 256, 512, 512)
DENSE_STEM = 16
DENSE_LAYERS = (4, 10, 20, 20, 20)
DENSE_GROWTH = (12, 12, 12, 24, 48)
POOL_WINDOW = (2, 2, 1)
CONTEXT_POOL = (2, 2, 2)

# reported model sizes, in millions of parameters
PAPER_PARAMETER_MILLIONS = {"basic": 28.0, "multi_output": 29.0, "densenet": 34.6, "modensenet": 34.8}


def parse_width_scale(value) -> Fraction:
    try:
        scale = Fraction(str(value)) if not isinstance(value, Fraction) else value
    except (ValueError, ZeroDivisionError):
        raise ConfigurationError(f"width_scale must be a positive rational, got {value!r}") from None
    if scale <= 0:
        raise ConfigurationError(f"width_scale must be positive, got {value!r}")
    return scale.limit_denominator(10**6)


def scale_channels(channels: int, width_scale) -> int:
    """Round ``channels * width_scale`` half up; fewer than one channel is an error."""
    scaled = int(Fraction(channels) * parse_width_scale(width_scale) + Fraction(1, 2))
    if scaled < 1:
        raise ConfigurationError(
            f"width_scale {width_scale} reduces a {channels}-channel layer to {scaled} channels"
        )
    return scaled


class ConvUnit(Layer):
    """conv -> batch norm -> ReLU."""

    def __init__(self, cin: int, cout: int, rng, dtype):
        self.conv = Conv3D(cin, cout, rng, dtype)
        self.bn = BatchNorm(cout, dtype)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return relu(self.bn(self.conv(x), training))


class DenseLayer(Layer):
    """BN -> ReLU -> 3x3x3 conv producing ``growth`` new maps."""

    def __init__(self, cin: int, growth: int, rng, dtype):
        self.bn = BatchNorm(cin, dtype)
        self.conv = Conv3D(cin, growth, rng, dtype)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return self.conv(relu(self.bn(x, training)))


class DenseBlock(Layer):
    """Each layer sees the concatenation of the block input and all earlier outputs."""

    def __init__(self, cin: int, num_layers: int, growth: int, rng, dtype):
        self.in_channels = cin
        self.num_layers = num_layers
        self.growth = growth
        self.layers = [DenseLayer(cin + i * growth, growth, rng, dtype) for i in range(num_layers)]

    @property
    def out_channels(self) -> int:
        return self.in_channels + self.num_layers * self.growth

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        features = x
        for layer in self.layers:
            features = concat([features, layer(features, training)], axis=1)
        return features


class Transition(Layer):
    """BN -> ReLU -> 1x1x1 conv halving the channels -> 2x2x1 max pool."""

    def __init__(self, cin: int, rng, dtype):
        self.in_channels = cin
        self.out_channels = max(1, cin // 2)
        self.bn = BatchNorm(cin, dtype)
        self.conv = PointwiseConv3D(cin, self.out_channels, rng, dtype)
        self.pool = MaxPool3D(POOL_WINDOW)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return self.pool(self.conv(relu(self.bn(x, training))))


class Pathway:
    """One input branch: an ordered list of named steps.

    A step is ``(name, layer, tap)``; a nonzero ``tap`` is the channel count of
    a pooled map that feeds an intermediate head (multi-output variants only).
    """

    def __init__(self, name: str, steps: list[tuple[str, Layer, int]], out_channels: int):
        self.name = name
        self.steps = steps
        self.out_channels = out_channels

    def __call__(self, x: Tensor, training: bool) -> tuple[Tensor, list[Tensor]]:
        taps = []
        for _, layer, tap in self.steps:
            if isinstance(layer, MaxPool3D):
                x = layer(x)
            else:
                x = layer(x, training)
            if tap:
                taps.append(x)
        return x, taps


def _named_layers(prefix: str, layer: Layer):
    """Yield ``(qualified_name, leaf_layer)`` for a possibly composite layer."""
    if isinstance(layer, ConvUnit):
        yield f"{prefix}/conv", layer.conv
        yield f"{prefix}/bn", layer.bn
    elif isinstance(layer, DenseLayer):
        yield f"{prefix}/bn", layer.bn
        yield f"{prefix}/conv", layer.conv
    elif isinstance(layer, DenseBlock):
        for i, sub in enumerate(layer.layers, start=1):
            yield from _named_layers(f"{prefix}/layer{i:02d}", sub)
    elif isinstance(layer, Transition):
        yield f"{prefix}/bn", layer.bn
        yield f"{prefix}/conv", layer.conv
        yield f"{prefix}/pool", layer.pool
    else:
        yield prefix, layer


class NetworkGraph:
    """A built two-pathway network.

    ``forward`` returns ``(final_prob, intermediate_probs)`` with every
    probability tensor of shape ``[b, 1]``.
    """

    def __init__(
        self,
        arch_kind: str,
        width_scale,
        seed: int = 0,
        dtype=np.float32,
        small_shape=PAPER_SMALL_SHAPE,
        large_shape=PAPER_LARGE_SHAPE,
    ):
        if arch_kind not in ARCH_KINDS:
            raise ConfigurationError(f"unknown architecture {arch_kind!r}; choose from {', '.join(ARCH_KINDS)}")
        self.arch_kind = arch_kind
        self.width_scale = parse_width_scale(width_scale)
        self.seed = int(seed)
        self.dtype = np.dtype(dtype)
        self.small_shape = tuple(int(s) for s in small_shape)
        self.large_shape = tuple(int(s) for s in large_shape)
        pooled = MaxPool3D(CONTEXT_POOL).output_shape(self.large_shape)
        if pooled != self.small_shape:
            raise ConfigurationError(
                f"large patch {self.large_shape} pools to {pooled}, expected the small patch shape {self.small_shape}"
            )
        spatial = self.small_shape
        for _ in range(4):
            if spatial[0] < 2 or spatial[1] < 2:
                raise ConfigurationError(f"patch shape {self.small_shape} is too small for four 2x2x1 pools")
            spatial = (spatial[0] // 2, spatial[1] // 2, spatial[2])
        self.final_spatial = spatial

        rng = np.random.default_rng(self.seed)
        self.multi_output = arch_kind in ("multi_output", "modensenet")
        self.pathways = {name: self._build_pathway(name, rng) for name in ("small", "large")}

        self.heads: list[tuple[str, ClassifierHead]] = []
        if self.multi_output:
            for pname, pathway in self.pathways.items():
                taps = [tap for _, _, tap in pathway.steps if tap]
                for k, channels in enumerate(taps, start=1):
                    self.heads.append((f"{pname}/head{k}", ClassifierHead(channels, rng, self.dtype)))
        voxels = int(np.prod(self.final_spatial))
        self.final_in_features = sum(p.out_channels * voxels for p in self.pathways.values())
        self.final_in_features += sum(h.in_features for _, h in self.heads)
        self.classifier = ClassifierHead(self.final_in_features, rng, self.dtype)

    # -- construction helpers --------------------------------------------
    def _build_pathway(self, name: str, rng) -> Pathway:
        steps: list[tuple[str, Layer, int]] = []
        if name == "large":
            steps.append(("pool0", MaxPool3D(CONTEXT_POOL), 0))
        if self.arch_kind in ("basic", "multi_output"):
            cin = 1
            for i, base in enumerate(BASIC_CHANNELS, start=1):
                cout = scale_channels(base, self.width_scale)
                steps.append((f"conv{i}", ConvUnit(cin, cout, rng, self.dtype), 0))
                cin = cout
                if i % 2 == 0 and i < len(BASIC_CHANNELS):
                    steps.append((f"pool{i // 2}", MaxPool3D(POOL_WINDOW), cout if self.multi_output else 0))
            return Pathway(name, steps, cin)
        cin = scale_channels(DENSE_STEM, self.width_scale)
        steps.append(("stem", _Stem(cin, rng, self.dtype), 0))
        for k, (n_layers, growth) in enumerate(zip(DENSE_LAYERS, DENSE_GROWTH), start=1):
            block = DenseBlock(cin, n_layers, scale_channels(growth, self.width_scale), rng, self.dtype)
            steps.append((f"block{k}", block, 0))
            cin = block.out_channels
            if k < len(DENSE_LAYERS):
                trans = Transition(cin, rng, self.dtype)
                steps.append((f"trans{k}", trans, trans.out_channels if self.multi_output else 0))
                cin = trans.out_channels
        steps.append(("norm_final", _FinalNorm(cin, self.dtype), 0))
        return Pathway(name, steps, cin)

    # -- introspection ----------------------------------------------------
    def named_layers(self) -> list[tuple[str, Layer]]:
        out = []
        for pname, pathway in self.pathways.items():
            for sname, layer, _ in pathway.steps:
                out.extend(_named_layers(f"{pname}/{sname}", layer))
        out.extend(self.heads)
        out.append(("classifier", self.classifier))
        return out

    def named_parameters(self) -> dict[str, Tensor]:
        params = {}
        for lname, layer in self.named_layers():
            for pname, t in layer.parameters().items():
                params[f"{lname}/{pname}"] = t
        return params

    def named_buffers(self) -> dict[str, np.ndarray]:
        bufs = {}
        for lname, layer in self.named_layers():
            for bname, arr in layer.buffers().items():
                bufs[f"{lname}/{bname}"] = arr
        return bufs

    def trainable_parameters(self) -> dict[str, Tensor]:
        return {n: t for n, t in self.named_parameters().items() if t.requires_grad}

    def batch_norm_layers(self) -> list[tuple[str, BatchNorm]]:
        out = []
        for name, layer in self.named_layers():
            if isinstance(layer, BatchNorm):
                out.append((name, layer))
            elif isinstance(layer, _FinalNorm):
                out.append((name, layer.bn))
        return out

    def head_layers(self) -> list[tuple[str, ClassifierHead]]:
        return list(self.heads)

    @property
    def num_intermediate_heads(self) -> int:
        return len(self.heads)

    def descriptor_widths(self) -> dict[str, int]:
        """Width each contributing descriptor adds to the final classifier input."""
        widths = {name: head.in_features for name, head in self.heads}
        voxels = int(np.prod(self.final_spatial))
        for pname, pathway in self.pathways.items():
            widths[f"{pname}/final"] = pathway.out_channels * voxels
        return widths

    def manifest(self) -> dict:
        layers = []
        for lname, layer in self.named_layers():
            desc = {"name": lname}
            desc.update(layer.describe())
            layers.append(desc)
        return {
            "format": "nodulenet-architecture",
            "arch_kind": self.arch_kind,
            "width_scale": str(self.width_scale),
            "seed": self.seed,
            "dtype": self.dtype.name,
            "small_shape": list(self.small_shape),
            "large_shape": list(self.large_shape),
            "intermediate_heads": self.num_intermediate_heads,
            "classifier_in_features": self.final_in_features,
            "layers": layers,
            "parameters": [{"name": n, "shape": list(t.shape)} for n, t in self.named_parameters().items()],
            "buffers": [{"name": n, "shape": list(a.shape)} for n, a in self.named_buffers().items()],
        }

    def manifest_json(self) -> str:
        return json.dumps(self.manifest(), indent=2)

    # -- execution --------------------------------------------------------
    def forward(self, small: Tensor, large: Tensor, training: bool = False) -> tuple[Tensor, list[Tensor]]:
        b = small.shape[0]
        expect_small = (b, 1) + self.small_shape
        expect_large = (b, 1) + self.large_shape
        if small.shape != expect_small or large.shape != expect_large:
            raise DimensionError(
                f"expected inputs {expect_small} and {expect_large}, got {small.shape} and {large.shape}"
            )
        finals, taps = [], {}
        for pname, x in (("small", small), ("large", large)):
            fmap, tmaps = self.pathways[pname](x, training)
            finals.append(flatten(fmap))
            for k, t in enumerate(tmaps, start=1):
                taps[f"{pname}/head{k}"] = global_avg_pool(t)
        intermediate = [head(taps[name]) for name, head in self.heads]
        pieces = [taps[name] for name, _ in self.heads] + finals
        return self.classifier(concat(pieces, axis=1)), intermediate

    __call__ = forward

    def freeze_convolutional(self) -> None:
        freeze_convolutional(self)


class _Stem(Layer):
    def __init__(self, channels: int, rng, dtype):
        self.conv = Conv3D(1, channels, rng, dtype)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return self.conv(x)

    def parameters(self):
        return self.conv.parameters()

    def describe(self):
        return self.conv.describe()


class _FinalNorm(Layer):
    """BN -> ReLU closing a DenseNet pathway."""

    def __init__(self, channels: int, dtype):
        self.bn = BatchNorm(channels, dtype)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return relu(self.bn(x, training))

    def parameters(self):
        return self.bn.parameters()

    def buffers(self):
        return self.bn.buffers()

    def set_frozen(self, frozen: bool) -> None:
        self.bn.frozen = frozen

    def describe(self):
        return {"type": "batchnorm", "channels": self.bn.channels, "activation": "relu"}


def build(arch_kind: str, width_scale=1, seed: int = 0, dtype=np.float32,
          small_shape=PAPER_SMALL_SHAPE, large_shape=PAPER_LARGE_SHAPE) -> NetworkGraph:
    return NetworkGraph(arch_kind, width_scale, seed, dtype, small_shape, large_shape)


def count_parameters(graph: NetworkGraph) -> tuple[int, dict[str, int]]:
    """Trainable-tensor element counts (running statistics excluded)."""
    per_layer: dict[str, int] = {}
    for name, t in graph.named_parameters().items():
        layer = name.rsplit("/", 1)[0]
        per_layer[layer] = per_layer.get(layer, 0) + t.size
    return sum(per_layer.values()), per_layer


def freeze_convolutional(graph: NetworkGraph) -> None:
    """Freeze everything except the final classifier.

    Conv, batch-norm and intermediate-head parameters stop requiring grad and
    batch-norm layers switch to their running statistics. Idempotent.
    """
    for name, layer in graph.named_layers():
        if layer is graph.classifier:
            continue
        for t in layer.parameters().values():
            t.requires_grad = False
            t.grad = None
        if isinstance(layer, BatchNorm):
            layer.frozen = True
        elif isinstance(layer, _FinalNorm):
            layer.set_frozen(True)
