"""Dense array kernels with hand-written backward passes.

Maps are laid out height x width x channels; convolution kernels are
kh x kw x in_channels x out_channels. Arrays are plain ``numpy.ndarray``;
``as_tensor`` adds the optional finiteness check.
"""

from __future__ import annotations

import contextlib
import math
import os
import weakref
from contextvars import ContextVar
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

Tensor = np.ndarray

_checked = ContextVar("sweepnet_checked", default=os.environ.get("SWEEPNET_CHECKED", "") not in ("", "0"))


def is_checked() -> bool:
    return _checked.get()


@contextlib.contextmanager
def checked_mode(enabled: bool = True) -> Iterator[None]:
    """Enable finiteness and range assertions inside the block."""
    token = _checked.set(enabled)
    try:
        yield
    finally:
        _checked.reset(token)


def as_tensor(x, dtype=np.float64) -> Tensor:
    arr = np.asarray(x, dtype=dtype)
    if _checked.get() and not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains NaN or Inf")
    return arr


class ResidentTracker:
    """Counts arrays registered via ``track`` that are still alive.

    Arrays are released through weak-reference finalizers, so the count
    reflects what the caller actually keeps referenced.
    """

    def __init__(self) -> None:
        self.live = 0
        self.live_bytes = 0
        self.peak = 0
        self.peak_bytes = 0
        self.total = 0

    def add(self, arr: np.ndarray) -> None:
        nbytes = int(arr.nbytes)
        self.live += 1
        self.live_bytes += nbytes
        self.total += 1
        self.peak = max(self.peak, self.live)
        self.peak_bytes = max(self.peak_bytes, self.live_bytes)
        weakref.finalize(arr, self._release, nbytes)

    def _release(self, nbytes: int) -> None:
        self.live -= 1
        self.live_bytes -= nbytes


_tracker: ContextVar[ResidentTracker | None] = ContextVar("sweepnet_tracker", default=None)


def track(arr: np.ndarray) -> np.ndarray:
    tracker = _tracker.get()
    if tracker is not None:
        tracker.add(arr)
    return arr


@contextlib.contextmanager
def tracking() -> Iterator[ResidentTracker]:
    """Record every array passed to ``track`` while the block runs."""
    tracker = ResidentTracker()
    token = _tracker.set(tracker)
    try:
        yield tracker
    finally:
        _tracker.reset(token)


@dataclass(frozen=True)
class ConvSpec:
    kernel_height: int
    kernel_width: int
    in_channels: int
    out_channels: int
    stride: int = 1

    def __post_init__(self):
        for name in ("kernel_height", "kernel_width", "in_channels", "out_channels", "stride"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"ConvSpec.{name} must be a positive integer")

    @classmethod
    def for_kernel(cls, kernel: Tensor, stride: int = 1) -> "ConvSpec":
        kh, kw, cin, cout = kernel.shape
        return cls(kh, kw, cin, cout, stride)

    def output_size(self, height: int, width: int) -> tuple[int, int]:
        return math.ceil(height / self.stride), math.ceil(width / self.stride)

    def padding(self, height: int, width: int) -> tuple[tuple[int, int], tuple[int, int]]:
        """Same-padding split, the extra row/column going to the bottom/right."""
        pads = []
        for size, k in ((height, self.kernel_height), (width, self.kernel_width)):
            out = math.ceil(size / self.stride)
            total = max((out - 1) * self.stride + k - size, 0)
            pads.append((total // 2, total - total // 2))
        return pads[0], pads[1]


def _check_conv_shapes(x: Tensor, kernel: Tensor, bias: Tensor | None, spec: ConvSpec) -> None:
    if x.ndim != 3:
        raise ValueError(f"conv input must be HxWxC, got shape {x.shape}")
    if kernel.shape != (spec.kernel_height, spec.kernel_width, spec.in_channels, spec.out_channels):
        raise ValueError(
            f"kernel shape {kernel.shape} does not match spec "
            f"{(spec.kernel_height, spec.kernel_width, spec.in_channels, spec.out_channels)}"
        )
    if x.shape[2] != spec.in_channels:
        raise ValueError(f"input channel axis is {x.shape[2]}, kernel expects {spec.in_channels}")
    if bias is not None and bias.shape != (spec.out_channels,):
        raise ValueError(f"bias axis is {bias.shape}, expected ({spec.out_channels},)")


def _im2col(x: Tensor, spec: ConvSpec) -> tuple[Tensor, tuple[int, int]]:
    h, w, c = x.shape
    (pt, pb), (pl, pr) = spec.padding(h, w)
    oh, ow = spec.output_size(h, w)
    xp = np.pad(x, ((pt, pb), (pl, pr), (0, 0)))
    windows = sliding_window_view(xp, (spec.kernel_height, spec.kernel_width), axis=(0, 1))
    windows = windows[:: spec.stride, :: spec.stride][:oh, :ow]
    # (oh, ow, c, kh, kw) -> rows ordered (kh, kw, c) to match the kernel layout
    cols = windows.transpose(0, 1, 3, 4, 2).reshape(oh * ow, spec.kernel_height * spec.kernel_width * c)
    return cols, (oh, ow)


def conv2d_forward(x: Tensor, kernel: Tensor, bias: Tensor | None = None, spec: ConvSpec | None = None) -> Tensor:
    """Strided cross-correlation with zero same-padding."""
    spec = spec or ConvSpec.for_kernel(kernel)
    _check_conv_shapes(x, kernel, bias, spec)
    cols, (oh, ow) = _im2col(x, spec)
    out = cols @ kernel.reshape(-1, spec.out_channels)
    if bias is not None:
        out += bias
    return out.reshape(oh, ow, spec.out_channels)


def conv2d_backward(
    upstream: Tensor, x: Tensor, kernel: Tensor, spec: ConvSpec | None = None
) -> tuple[Tensor, Tensor, Tensor]:
    """Gradients of ``sum(upstream * conv2d_forward(x, kernel, bias))``.

    Returns ``(grad_input, grad_kernel, grad_bias)``.
    """
    spec = spec or ConvSpec.for_kernel(kernel)
    _check_conv_shapes(x, kernel, None, spec)
    h, w, c = x.shape
    oh, ow = spec.output_size(h, w)
    if upstream.shape != (oh, ow, spec.out_channels):
        raise ValueError(f"upstream shape {upstream.shape} != forward output {(oh, ow, spec.out_channels)}")
    kh, kw, s = spec.kernel_height, spec.kernel_width, spec.stride
    cols, _ = _im2col(x, spec)
    up2d = upstream.reshape(oh * ow, spec.out_channels)
    grad_kernel = (cols.T @ up2d).reshape(kernel.shape)
    grad_bias = up2d.sum(axis=0)
    dcols = (up2d @ kernel.reshape(-1, spec.out_channels).T).reshape(oh, ow, kh, kw, c)
    (pt, pb), (pl, pr) = spec.padding(h, w)
    dxp = np.zeros((h + pt + pb, w + pl + pr, c), dtype=np.result_type(x, upstream))
    for i in range(kh):
        for j in range(kw):
            dxp[i : i + s * (oh - 1) + 1 : s, j : j + s * (ow - 1) + 1 : s] += dcols[:, :, i, j]
    grad_input = dxp[pt : pt + h, pl : pl + w]
    return grad_input, grad_kernel, grad_bias


ACTIVATIONS = ("sigmoid", "tanh", "relu")


def sigmoid(x: Tensor) -> Tensor:
    return np.exp(-np.logaddexp(0.0, -x))


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "tanh":
        return np.tanh(x)
    if kind == "relu":
        return np.maximum(x, 0.0)
    raise ValueError(f"unknown activation {kind!r}")


def activation_backward(upstream: Tensor, out: Tensor, kind: str) -> Tensor:
    """Backward pass expressed through the forward output ``out``."""
    if kind == "sigmoid":
        return upstream * out * (1.0 - out)
    if kind == "tanh":
        return upstream * (1.0 - out * out)
    if kind == "relu":
        return upstream * (out > 0.0)
    raise ValueError(f"unknown activation {kind!r}")


def softmax(volume: Tensor, axis: int = -1) -> Tensor:
    shifted = volume - volume.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_over_depth(values: Sequence[Tensor]) -> list[Tensor]:
    """Per-pixel softmax across a sequence of D single-channel maps."""
    if len(values) == 0:
        raise ValueError("softmax over an empty depth sequence")
    shape = values[0].shape
    for v in values:
        if v.shape != shape:
            raise ValueError(f"depth maps differ in shape: {v.shape} vs {shape}")
    prob = softmax(np.stack(values, axis=0), axis=0)
    return list(prob)


def softmax_backward(upstream: Tensor, prob: Tensor, axis: int = -1) -> Tensor:
    return prob * (upstream - (upstream * prob).sum(axis=axis, keepdims=True))
