"""Feature extraction, variance cost maps, recurrent regularization and
streaming winner-take-all depth inference.

Each differentiable block has a ``*_forward`` returning its output plus a
cache and a ``*_backward`` that accumulates parameter gradients into a
``dict`` keyed like ``named_parameters``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from . import tensor as T
from .geometry import BilinearSampler, Camera, DepthRange, apply_homography, inverse_depth_samples, plane_sweep_homography
from .tensor import ConvSpec, Tensor, track

FEATURE_STRIDE = 4
FEATURE_CHANNELS = 32
# (kernel, stride, out_channels) per layer; all but the last are followed by affine + ReLU
FEATURE_LAYERS = ((3, 1, 8), (3, 1, 8), (5, 2, 16), (3, 1, 16), (3, 1, 16), (5, 2, 32), (3, 1, 32), (3, 1, 32))
GRU_STATE_CHANNELS = (16, 4, 1)
TRANSITION_CHANNELS = 16
SPATIAL_CHANNELS = 32
MODES = ("gru", "spatial", "wta")
DEFAULT_LOGIT_SCALE = {"gru": 10.0, "spatial": 1.0, "wta": 1.0}

Grads = dict


def glorot_uniform(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    kh, kw, cin, cout = shape
    limit = np.sqrt(6.0 / (kh * kw * cin + kh * kw * cout))
    return rng.uniform(-limit, limit, size=shape)


@dataclass
class ConvLayer:
    kernel: np.ndarray
    bias: np.ndarray | None = None
    scale: np.ndarray | None = None
    shift: np.ndarray | None = None
    stride: int = 1

    @property
    def spec(self) -> ConvSpec:
        return ConvSpec.for_kernel(self.kernel, self.stride)

    def named_parameters(self, prefix: str) -> Iterator[tuple[str, np.ndarray]]:
        for name in ("kernel", "bias", "scale", "shift"):
            value = getattr(self, name)
            if value is not None:
                yield f"{prefix}.{name}", value

    @classmethod
    def init(cls, rng, k: int, cin: int, cout: int, stride: int = 1, affine: bool = False) -> "ConvLayer":
        kernel = glorot_uniform(rng, (k, k, cin, cout))
        if affine:
            return cls(kernel, None, np.ones(cout), np.zeros(cout), stride)
        return cls(kernel, np.zeros(cout), None, None, stride)


@dataclass
class FeatureExtractorWeights:
    layers: list[ConvLayer]

    def __post_init__(self):
        if len(self.layers) != len(FEATURE_LAYERS):
            raise ValueError(f"feature extractor needs {len(FEATURE_LAYERS)} layers")

    @classmethod
    def init(cls, rng: np.random.Generator, in_channels: int = 3) -> "FeatureExtractorWeights":
        layers = []
        cin = in_channels
        for i, (k, s, cout) in enumerate(FEATURE_LAYERS):
            layers.append(ConvLayer.init(rng, k, cin, cout, s, affine=i < len(FEATURE_LAYERS) - 1))
            cin = cout
        return cls(layers)

    def named_parameters(self) -> Iterator[tuple[str, np.ndarray]]:
        for i, layer in enumerate(self.layers):
            yield from layer.named_parameters(f"feature.{i}")


@dataclass
class GruLayerParams:
    w_r: np.ndarray
    w_u: np.ndarray
    w_c: np.ndarray
    b_r: np.ndarray
    b_u: np.ndarray
    b_c: np.ndarray

    def __post_init__(self):
        cs = self.state_channels
        for name in ("w_r", "w_u", "w_c"):
            k = getattr(self, name)
            if k.ndim != 4 or k.shape[3] != cs or k.shape[2] <= cs:
                raise ValueError(f"{name} has shape {k.shape}; expected kh x kw x (in+{cs}) x {cs}")
            if k.shape[2] != self.w_r.shape[2]:
                raise ValueError("gate kernels disagree on input channels")

    @property
    def state_channels(self) -> int:
        return self.w_r.shape[3]

    @property
    def in_channels(self) -> int:
        return self.w_r.shape[2] - self.state_channels

    @classmethod
    def init(cls, rng, in_channels: int, state_channels: int, k: int = 3) -> "GruLayerParams":
        shape = (k, k, in_channels + state_channels, state_channels)
        z = np.zeros(state_channels)
        return cls(glorot_uniform(rng, shape), glorot_uniform(rng, shape), glorot_uniform(rng, shape), z.copy(), z.copy(), z.copy())

    @classmethod
    def zeros(cls, in_channels: int, state_channels: int, k: int = 3) -> "GruLayerParams":
        shape = (k, k, in_channels + state_channels, state_channels)
        z = np.zeros(state_channels)
        return cls(np.zeros(shape), np.zeros(shape), np.zeros(shape), z.copy(), z.copy(), z.copy())

    def named_parameters(self, prefix: str) -> Iterator[tuple[str, np.ndarray]]:
        for name in ("w_r", "w_u", "w_c", "b_r", "b_u", "b_c"):
            yield f"{prefix}.{name}", getattr(self, name)


@dataclass
class RegularizerWeights:
    """Per-depth cost regularizer.

    ``gru``: transition conv 32->16 then three stacked GRU layers (16, 4, 1).
    ``spatial``: three 3x3 convs 32->32->32->1, ReLU between.
    ``wta``: one 3x3 conv 32->1.
    ``logit_scale`` multiplies the single-channel output before the softmax.
    """

    mode: str
    transition: ConvLayer | None = None
    gru_layers: list[GruLayerParams] = field(default_factory=list)
    conv_layers: list[ConvLayer] = field(default_factory=list)
    logit_scale: np.ndarray = field(default_factory=lambda: np.ones(1))

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown regularizer mode {self.mode!r}")
        if self.mode == "gru":
            if self.transition is None or len(self.gru_layers) != 3:
                raise ValueError("gru regularizer needs a transition conv and three GRU layers")
            prev = self.transition.kernel.shape[3]
            for k, layer in enumerate(self.gru_layers):
                if layer.in_channels != prev:
                    raise ValueError(f"GRU layer {k} takes {layer.in_channels} channels, previous layer gives {prev}")
                prev = layer.state_channels
            if prev != 1:
                raise ValueError("last GRU layer must have a single channel")

    @classmethod
    def init(cls, rng: np.random.Generator, mode: str = "gru", in_channels: int = FEATURE_CHANNELS) -> "RegularizerWeights":
        if mode not in MODES:
            raise ValueError(f"unknown regularizer mode {mode!r}")
        scale = np.array([DEFAULT_LOGIT_SCALE[mode]])
        if mode == "gru":
            transition = ConvLayer.init(rng, 3, in_channels, TRANSITION_CHANNELS)
            layers, cin = [], TRANSITION_CHANNELS
            for cs in GRU_STATE_CHANNELS:
                layers.append(GruLayerParams.init(rng, cin, cs))
                cin = cs
            return cls("gru", transition, layers, logit_scale=scale)
        if mode == "spatial":
            convs = [
                ConvLayer.init(rng, 3, in_channels, SPATIAL_CHANNELS),
                ConvLayer.init(rng, 3, SPATIAL_CHANNELS, SPATIAL_CHANNELS),
                ConvLayer.init(rng, 3, SPATIAL_CHANNELS, 1),
            ]
            return cls("spatial", conv_layers=convs, logit_scale=scale)
        if mode == "wta":
            return cls("wta", conv_layers=[ConvLayer.init(rng, 3, in_channels, 1)], logit_scale=scale)
        raise ValueError(f"unknown regularizer mode {mode!r}")

    def named_parameters(self) -> Iterator[tuple[str, np.ndarray]]:
        if self.transition is not None:
            yield from self.transition.named_parameters("reg.transition")
        for k, layer in enumerate(self.gru_layers):
            yield from layer.named_parameters(f"reg.gru{k}")
        for k, layer in enumerate(self.conv_layers):
            yield from layer.named_parameters(f"reg.{self.mode}{k}")
        yield "reg.logit_scale", self.logit_scale


@dataclass
class NetworkWeights:
    features: FeatureExtractorWeights
    regularizer: RegularizerWeights

    @classmethod
    def init(cls, seed: int = 0, mode: str = "gru") -> "NetworkWeights":
        rng = np.random.default_rng(seed)
        return cls(FeatureExtractorWeights.init(rng), RegularizerWeights.init(rng, mode))

    @property
    def mode(self) -> str:
        return self.regularizer.mode

    def named_parameters(self) -> dict[str, np.ndarray]:
        params = dict(self.features.named_parameters())
        params.update(self.regularizer.named_parameters())
        return params

    @classmethod
    def from_named(cls, params: dict[str, np.ndarray]) -> "NetworkWeights":
        """Rebuild from ``named_parameters`` output (e.g. a weights file)."""

        def conv(prefix: str, stride: int = 1) -> ConvLayer:
            return ConvLayer(
                params[f"{prefix}.kernel"],
                params.get(f"{prefix}.bias"),
                params.get(f"{prefix}.scale"),
                params.get(f"{prefix}.shift"),
                stride,
            )

        try:
            feats = FeatureExtractorWeights([conv(f"feature.{i}", s) for i, (_, s, _) in enumerate(FEATURE_LAYERS)])
            scale = params.get("reg.logit_scale", np.ones(1))
            if "reg.transition.kernel" in params:
                grus = [
                    GruLayerParams(*(params[f"reg.gru{k}.{n}"] for n in ("w_r", "w_u", "w_c", "b_r", "b_u", "b_c")))
                    for k in range(len(GRU_STATE_CHANNELS))
                ]
                reg = RegularizerWeights("gru", conv("reg.transition"), grus, logit_scale=scale)
            elif "reg.spatial0.kernel" in params:
                reg = RegularizerWeights("spatial", conv_layers=[conv(f"reg.spatial{k}") for k in range(3)], logit_scale=scale)
            elif "reg.wta0.kernel" in params:
                reg = RegularizerWeights("wta", conv_layers=[conv("reg.wta0")], logit_scale=scale)
            else:
                raise ValueError("weights contain no regularizer")
        except KeyError as exc:
            raise ValueError(f"weights are missing tensor {exc.args[0]!r}") from None
        return cls(feats, reg)

    def copy(self) -> "NetworkWeights":
        return NetworkWeights.from_named({k: v.copy() for k, v in self.named_parameters().items()})


# ---------------------------------------------------------------------------
# feature extraction


def _conv_layer_forward(x: Tensor, layer: ConvLayer, relu: bool) -> tuple[Tensor, tuple]:
    z = T.conv2d_forward(x, layer.kernel, layer.bias, layer.spec)
    a = z * layer.scale + layer.shift if layer.scale is not None else z
    y = np.maximum(a, 0.0) if relu else a
    return y, (x, z, y, relu)


def _conv_layer_backward(dy: Tensor, layer: ConvLayer, cache: tuple, grads: Grads, prefix: str) -> Tensor:
    x, z, y, relu = cache
    da = dy * (y > 0.0) if relu else dy
    if layer.scale is not None:
        _accumulate(grads, f"{prefix}.scale", (da * z).sum(axis=(0, 1)))
        _accumulate(grads, f"{prefix}.shift", da.sum(axis=(0, 1)))
        dz = da * layer.scale
    else:
        dz = da
    dx, dk, db = T.conv2d_backward(dz, x, layer.kernel, layer.spec)
    _accumulate(grads, f"{prefix}.kernel", dk)
    if layer.bias is not None:
        _accumulate(grads, f"{prefix}.bias", db)
    return dx


def _accumulate(grads: Grads, name: str, value: np.ndarray) -> None:
    if name in grads:
        grads[name] += value
    else:
        grads[name] = np.array(value, dtype=np.float64)


def _check_image(image: Tensor) -> None:
    if image.ndim != 3:
        raise ValueError(f"image must be HxWxC, got shape {image.shape}")
    h, w = image.shape[:2]
    if h % FEATURE_STRIDE or w % FEATURE_STRIDE:
        raise ValueError(f"image size {w}x{h} must be a multiple of {FEATURE_STRIDE} in both dimensions")


def extract_features_forward(image: Tensor, w: FeatureExtractorWeights) -> tuple[Tensor, list]:
    _check_image(image)
    caches = []
    x = image
    last = len(w.layers) - 1
    for i, layer in enumerate(w.layers):
        x, cache = _conv_layer_forward(x, layer, relu=i < last)
        caches.append(cache)
    return x, caches


def extract_features(image: Tensor, w: FeatureExtractorWeights) -> Tensor:
    """Image (H x W x 3) to features (H/4 x W/4 x 32)."""
    return extract_features_forward(image, w)[0]


def extract_features_backward(dout: Tensor, w: FeatureExtractorWeights, caches: list, grads: Grads) -> Tensor:
    d = dout
    for i in reversed(range(len(w.layers))):
        d = _conv_layer_backward(d, w.layers[i], caches[i], grads, f"feature.{i}")
    return d


# ---------------------------------------------------------------------------
# cost metric


def variance_cost(warped: Sequence[Tensor]) -> Tensor:
    """Elementwise population variance across the N warped feature maps."""
    if len(warped) == 0:
        raise ValueError("variance of zero feature maps")
    shape = warped[0].shape
    for v in warped:
        if v.shape != shape:
            raise ValueError(f"feature map shapes differ: {v.shape} vs {shape}")
    n = len(warped)
    # two passes over data shifted by the first map: identical maps give exactly 0
    shifted = [v - warped[0] for v in warped]
    mean = sum(shifted) / n
    return sum((s - mean) ** 2 for s in shifted) / n


def variance_cost_backward(dcost: Tensor, warped: Sequence[Tensor]) -> list[Tensor]:
    n = len(warped)
    mean = sum(warped) / n
    return [(2.0 / n) * (v - mean) * dcost for v in warped]


# ---------------------------------------------------------------------------
# GRU


@dataclass
class GruCache:
    x: Tensor
    h: Tensor
    xh: Tensor
    xrh: Tensor
    r: Tensor
    u: Tensor
    c: Tensor


def gru_cell_forward(x: Tensor, h: Tensor, p: GruLayerParams) -> tuple[Tensor, GruCache]:
    if x.shape[2] != p.in_channels or h.shape[2] != p.state_channels or x.shape[:2] != h.shape[:2]:
        raise ValueError(
            f"GRU expects input {p.in_channels} and state {p.state_channels} channels, "
            f"got input {x.shape} and state {h.shape}"
        )
    cs = p.state_channels
    xh = np.concatenate([x, h], axis=2)
    gates = T.conv2d_forward(xh, np.concatenate([p.w_r, p.w_u], axis=3), np.concatenate([p.b_r, p.b_u]))
    gates = T.sigmoid(gates)
    r, u = gates[..., :cs], gates[..., cs:]
    xrh = np.concatenate([x, r * h], axis=2)
    c = T.sigmoid(T.conv2d_forward(xrh, p.w_c, p.b_c))
    out = (1.0 - u) * h + u * c
    if T.is_checked():
        if not (np.all(r > 0) and np.all(r < 1) and np.all(u > 0) and np.all(u < 1)):
            raise FloatingPointError("GRU gate left the open unit interval")
    return out, GruCache(x, h, xh, xrh, r, u, c)


def gru_cell(x: Tensor, h: Tensor, p: GruLayerParams) -> Tensor:
    """One convolutional GRU step: ``(1-U)*h + U*C_u``."""
    return gru_cell_forward(x, h, p)[0]


def gru_cell_backward(dout: Tensor, p: GruLayerParams, cache: GruCache, grads: Grads, prefix: str) -> tuple[Tensor, Tensor]:
    """Returns (d_input, d_prev_state) and accumulates parameter gradients."""
    cin = p.in_channels
    x, h, r, u, c = cache.x, cache.h, cache.r, cache.u, cache.c
    du = dout * (c - h)
    dc = dout * u
    dh = dout * (1.0 - u)
    dc_pre = dc * c * (1.0 - c)
    dxrh, dwc, dbc = T.conv2d_backward(dc_pre, cache.xrh, p.w_c)
    _accumulate(grads, f"{prefix}.w_c", dwc)
    _accumulate(grads, f"{prefix}.b_c", dbc)
    dx = dxrh[..., :cin].copy()
    drh = dxrh[..., cin:]
    dr = drh * h
    dh += drh * r
    dgates = np.concatenate([dr * r * (1.0 - r), du * u * (1.0 - u)], axis=2)
    kernel_ru = np.concatenate([p.w_r, p.w_u], axis=3)
    dxh, dwru, dbru = T.conv2d_backward(dgates, cache.xh, kernel_ru)
    cs = p.state_channels
    _accumulate(grads, f"{prefix}.w_r", dwru[..., :cs])
    _accumulate(grads, f"{prefix}.w_u", dwru[..., cs:])
    _accumulate(grads, f"{prefix}.b_r", dbru[:cs])
    _accumulate(grads, f"{prefix}.b_u", dbru[cs:])
    dx += dxh[..., :cin]
    dh += dxh[..., cin:]
    return dx, dh


# ---------------------------------------------------------------------------
# regularizer steps (one depth at a time)


def initial_state(w: RegularizerWeights, height: int, width: int) -> tuple[Tensor, ...]:
    if w.mode != "gru":
        return ()
    return tuple(track(np.zeros((height, width, layer.state_channels))) for layer in w.gru_layers)


def regularize_step_forward(cost: Tensor, state: tuple[Tensor, ...], w: RegularizerWeights) -> tuple[Tensor, tuple[Tensor, ...], tuple]:
    """Regularize one cost map; returns (single-channel output, new state, cache)."""
    if w.mode == "gru":
        x, tcache = _conv_layer_forward(cost, w.transition, relu=False)
        track(x)
        new_state, caches = [], []
        for layer, h in zip(w.gru_layers, state):
            x, cache = gru_cell_forward(x, h, layer)
            track(x)
            new_state.append(x)
            caches.append(cache)
        return x, tuple(new_state), (tcache, caches)
    caches = []
    x = cost
    last = len(w.conv_layers) - 1
    for k, layer in enumerate(w.conv_layers):
        x, cache = _conv_layer_forward(x, layer, relu=k < last)
        track(x)
        caches.append(cache)
    return x, (), caches


def regularize_step_backward(
    dout: Tensor, dstate: tuple[Tensor, ...] | None, w: RegularizerWeights, cache: tuple, grads: Grads
) -> tuple[Tensor, tuple[Tensor, ...]]:
    """Backward of one step; ``dstate`` is the gradient flowing in from step t+1."""
    if w.mode == "gru":
        tcache, caches = cache
        n = len(w.gru_layers)
        dstate = list(dstate) if dstate is not None else [None] * n
        dprev = [None] * n
        d = dout
        for k in reversed(range(n)):
            if dstate[k] is not None:
                d = d + dstate[k]
            d, dprev[k] = gru_cell_backward(d, w.gru_layers[k], caches[k], grads, f"reg.gru{k}")
        dcost = _conv_layer_backward(d, w.transition, tcache, grads, "reg.transition")
        return dcost, tuple(dprev)
    d = dout
    for k in reversed(range(len(w.conv_layers))):
        d = _conv_layer_backward(d, w.conv_layers[k], cache[k], grads, f"reg.{w.mode}{k}")
    return d, ()


class CostMapStream:
    """Produces the D cost maps one at a time, on demand.

    ``produce(t)`` builds cost map ``t`` (0-based depth index). Only the
    map currently being consumed is held.
    """

    def __init__(self, count: int, produce: Callable[[int], Tensor]):
        if count < 1:
            raise ValueError("cost map stream must be non-empty")
        self.count = count
        self._produce = produce

    def __len__(self) -> int:
        return self.count

    def order(self, direction: str = "forward") -> range:
        if direction == "forward":
            return range(self.count)
        if direction == "backward":
            return range(self.count - 1, -1, -1)
        raise ValueError(f"direction must be 'forward' or 'backward', got {direction!r}")

    def iterate(self, direction: str = "forward") -> Iterator[tuple[int, Tensor]]:
        for t in self.order(direction):
            yield t, track(self._produce(t))

    @classmethod
    def from_volume(cls, volume: Sequence[Tensor]) -> "CostMapStream":
        return cls(len(volume), lambda t: volume[t])


def regularize_stream(stream: CostMapStream, w: RegularizerWeights, direction: str = "forward") -> Iterator[Tensor]:
    """Yield the D regularized single-channel maps in sweep order.

    Only the recurrent state and the current step's maps stay resident.
    """
    state = None
    for _, cost in stream.iterate(direction):
        if state is None:
            state = initial_state(w, cost.shape[0], cost.shape[1])
        out, state, _ = regularize_step_forward(cost, state, w)
        del cost
        yield out


def regularize_volume(volume: Sequence[Tensor], w: RegularizerWeights, direction: str = "forward") -> list[Tensor]:
    """Materialized reference for ``regularize_stream``: outputs in sweep order."""
    order = range(len(volume)) if direction == "forward" else range(len(volume) - 1, -1, -1)
    state = initial_state(w, volume[0].shape[0], volume[0].shape[1])
    outs = []
    for t in order:
        out, state, _ = regularize_step_forward(volume[t], state, w)
        outs.append(out)
    return outs


# ---------------------------------------------------------------------------
# inference


class OnlineWinnerTakeAll:
    """Running argmax and log-sum-exp over a stream of logit maps."""

    def __init__(self):
        self.best = None
        self.index = None
        self.max = None
        self.sum = None

    def update(self, t: int, logit: Tensor) -> None:
        if self.best is None:
            self.best = logit.copy()
            self.index = np.full(logit.shape, t, dtype=np.int64)
            self.max = logit.copy()
            self.sum = np.ones_like(logit)
            return
        better = (logit > self.best) | ((logit == self.best) & (t < self.index))
        self.best = np.where(better, logit, self.best)
        self.index = np.where(better, t, self.index)
        new_max = np.maximum(self.max, logit)
        self.sum = self.sum * np.exp(self.max - new_max) + np.exp(logit - new_max)
        self.max = new_max

    def probability(self) -> Tensor:
        return np.exp(self.best - self.max) / self.sum


def scaled_camera(cam: Camera, stride: int = FEATURE_STRIDE) -> Camera:
    return cam.scaled(stride)


def depth_samplers(ref: Camera, srcs: Sequence[Camera], depth: float, height: int, width: int) -> list[BilinearSampler]:
    """Bilinear samplers that warp each source feature map onto the plane at ``depth``."""
    grid = np.stack(np.meshgrid(np.arange(width, dtype=np.float64), np.arange(height, dtype=np.float64)), axis=-1)
    out = []
    for src in srcs:
        H = plane_sweep_homography(ref, src, depth)
        out.append(BilinearSampler.from_coords(apply_homography(H, grid), height, width))
    return out


def cost_map_stream(ref_feat: Tensor, src_feats: Sequence[Tensor], ref: Camera, srcs: Sequence[Camera], depths: np.ndarray) -> CostMapStream:
    """Cost maps at each sampled depth; cameras are at feature resolution."""
    h, w = ref_feat.shape[:2]

    def produce(t: int) -> Tensor:
        samplers = depth_samplers(ref, srcs, float(depths[t]), h, w)
        warped = [ref_feat] + [s.apply(f) for s, f in zip(samplers, src_feats)]
        return variance_cost(warped)

    return CostMapStream(len(depths), produce)


@dataclass
class InferenceResult:
    depth: np.ndarray
    probability: np.ndarray
    index: np.ndarray


def _validate_views(ref_image: Tensor, src_images: Sequence[Tensor], cameras: Sequence[Camera]) -> None:
    if len(src_images) < 1:
        raise ValueError("at least one source image is required")
    if len(cameras) != len(src_images) + 1:
        raise ValueError(f"need {len(src_images) + 1} cameras, got {len(cameras)}")
    for img, cam in zip([ref_image, *src_images], cameras):
        if img.shape[:2] != (cam.height, cam.width):
            raise ValueError(f"image {img.shape[1]}x{img.shape[0]} does not match camera {cam.width}x{cam.height}")
    ref = cameras[0]
    for k, cam in enumerate(cameras[1:], start=1):
        if np.linalg.norm(cam.center - ref.center) < 1e-12:
            raise ValueError(f"camera {k} has zero baseline to the reference")


def infer_depth(
    ref_image: Tensor,
    src_images: Sequence[Tensor],
    cameras: Sequence[Camera],
    depth_range: DepthRange,
    w: NetworkWeights,
    direction: str = "forward",
) -> InferenceResult:
    """Streaming depth inference for one reference view.

    ``cameras[0]`` belongs to the reference image. Depth hypotheses are
    processed one at a time; memory does not grow with the sample count.
    """
    _validate_views(ref_image, src_images, cameras)
    depths = inverse_depth_samples(depth_range)
    feats = [extract_features(img, w.features) for img in [ref_image, *src_images]]
    fcams = [scaled_camera(c) for c in cameras]
    stream = cost_map_stream(feats[0], feats[1:], fcams[0], fcams[1:], depths)
    wta = OnlineWinnerTakeAll()
    scale = float(w.regularizer.logit_scale[0])
    for t, out in zip(stream.order(direction), regularize_stream(stream, w.regularizer, direction)):
        wta.update(t, scale * out[..., 0])
    return InferenceResult(depths[wta.index], wta.probability(), wta.index)


def infer_depth_full_volume(
    ref_image: Tensor,
    src_images: Sequence[Tensor],
    cameras: Sequence[Camera],
    depth_range: DepthRange,
    w: NetworkWeights,
    direction: str = "forward",
) -> InferenceResult:
    """Reference path: materialize the probability volume, then argmax."""
    _validate_views(ref_image, src_images, cameras)
    depths = inverse_depth_samples(depth_range)
    feats = [extract_features(img, w.features) for img in [ref_image, *src_images]]
    fcams = [scaled_camera(c) for c in cameras]
    stream = cost_map_stream(feats[0], feats[1:], fcams[0], fcams[1:], depths)
    volume = [stream._produce(t) for t in range(len(depths))]
    outs = regularize_volume(volume, w.regularizer, direction)
    order = list(stream.order(direction))
    logits = np.empty((len(depths),) + outs[0].shape[:2])
    for t, out in zip(order, outs):
        logits[t] = w.regularizer.logit_scale[0] * out[..., 0]
    prob = T.softmax(logits, axis=0)
    index = np.argmax(prob, axis=0)
    return InferenceResult(depths[index], np.take_along_axis(prob, index[None], 0)[0], index)
