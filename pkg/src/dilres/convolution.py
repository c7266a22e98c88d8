"""Normal and dilated 2-D convolution plus closed-form layer geometry.

Convolution follows the cross-correlation convention (no kernel flip)::

    out[n, co, t, u] = bias[co] + sum_{ci, i, j} x[n, ci, t*s + l*i - p, u*s + l*j - p] * k[co, ci, i, j]

with zeros outside the input. ``l`` is the dilation factor; ``l == 1`` is
ordinary convolution.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import kernels
from .tensor import ShapeError


@dataclass(frozen=True)
class ConvSpec:
    kernel_h: int
    kernel_w: int
    stride_h: int = 1
    stride_w: int = 1
    pad_h: int = 0
    pad_w: int = 0
    dilation: int = 1

    def __post_init__(self):
        if min(self.kernel_h, self.kernel_w, self.stride_h, self.stride_w) < 1:
            raise ValueError(f"kernel and stride extents must be positive: {self}")
        if min(self.pad_h, self.pad_w) < 0:
            raise ValueError(f"padding must be nonnegative: {self}")
        if self.dilation < 1:
            raise ValueError(f"dilation must be >= 1, got {self.dilation}")

    @classmethod
    def square(cls, k, stride=1, pad=0, dilation=1):
        return cls(k, k, stride, stride, pad, pad, dilation)

    @property
    def effective_kernel(self) -> tuple[int, int]:
        l = self.dilation
        return (self.kernel_h + (self.kernel_h - 1) * (l - 1),
                self.kernel_w + (self.kernel_w - 1) * (l - 1))

    @property
    def stride(self):
        return self.stride_h, self.stride_w

    @property
    def padding(self):
        return self.pad_h, self.pad_w


@dataclass(frozen=True)
class PoolSpec:
    """Max-pool layer, for geometry purposes only."""
    window: int
    stride: int
    pad: int = 0

    @property
    def effective_kernel(self):
        return self.window, self.window


@dataclass(frozen=True)
class LayerGeometry:
    output_h: int
    output_w: int
    effective_kernel: tuple[int, int]
    receptive_field: tuple[int, int]
    jump: tuple[int, int]


def output_extents(h, w, spec: ConvSpec) -> tuple[int, int]:
    kh, kw = spec.effective_kernel
    oh = (h + 2 * spec.pad_h - kh) // spec.stride_h + 1
    ow = (w + 2 * spec.pad_w - kw) // spec.stride_w + 1
    return oh, ow


def _check_conv(x, kernel, spec):
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects rank-4 input and kernel, got {x.shape} and {kernel.shape}")
    if kernel.shape[1] != x.shape[1]:
        raise ShapeError(f"kernel expects {kernel.shape[1]} input channels, input has {x.shape[1]}")
    if kernel.shape[2:] != (spec.kernel_h, spec.kernel_w):
        raise ShapeError(f"kernel extents {kernel.shape[2:]} disagree with spec {spec.kernel_h}x{spec.kernel_w}")
    kh, kw = spec.effective_kernel
    H, W = x.shape[2], x.shape[3]
    if kh > H + 2 * spec.pad_h or kw > W + 2 * spec.pad_w:
        raise ShapeError(f"effective kernel {kh}x{kw} exceeds padded input "
                         f"{H + 2 * spec.pad_h}x{W + 2 * spec.pad_w}")


def conv2d(x, kernel, bias=None, spec: ConvSpec | None = None, backend=None):
    """Dilated 2-D convolution of ``x`` (N, Cin, H, W) with ``kernel`` (Cout, Cin, kh, kw)."""
    if spec is None:
        spec = ConvSpec(kernel.shape[2], kernel.shape[3])
    _check_conv(x, kernel, spec)
    if bias is not None and bias.shape != (kernel.shape[0],):
        raise ShapeError(f"bias must have shape ({kernel.shape[0]},), got {bias.shape}")
    out_hw = output_extents(x.shape[2], x.shape[3], spec)
    out = kernels.conv_forward(x, kernel, bias, spec.stride, spec.padding, spec.dilation, out_hw, backend)
    return out.astype(np.result_type(x.dtype, kernel.dtype), copy=False)


def conv2d_grad(x, kernel, spec: ConvSpec, upstream, backend=None, need_input=True):
    """Gradients of ``sum(upstream * conv2d(x, kernel, bias, spec))``.

    Returns ``(input_grad, kernel_grad, bias_grad)``. ``input_grad`` is None
    when ``need_input`` is false.
    """
    _check_conv(x, kernel, spec)
    expected = (x.shape[0], kernel.shape[0]) + output_extents(x.shape[2], x.shape[3], spec)
    if upstream.shape != expected:
        raise ShapeError(f"upstream gradient shape {upstream.shape} != conv output shape {expected}")
    gi = None
    if need_input:
        gi = kernels.conv_input_grad(upstream, kernel, spec.stride, spec.padding, spec.dilation,
                                     x.shape, backend).astype(x.dtype, copy=False)
    gk, gb = kernels.conv_weight_grad(x, upstream, spec.stride, spec.padding, spec.dilation,
                                      kernel.shape, backend)
    return gi, gk.astype(kernel.dtype, copy=False), gb.astype(kernel.dtype, copy=False)


def spread_kernel(kernel, dilation):
    """Insert ``dilation - 1`` zero rows/columns between taps."""
    co, ci, kh, kw = kernel.shape
    l = dilation
    out = np.zeros((co, ci, kh + (kh - 1) * (l - 1), kw + (kw - 1) * (l - 1)), dtype=kernel.dtype)
    out[:, :, ::l, ::l] = kernel
    return out


def conv_param_count(in_channels, out_channels, spec: ConvSpec, bias=False):
    n = out_channels * in_channels * spec.kernel_h * spec.kernel_w
    return n + (out_channels if bias else 0)


# -- geometry ----------------------------------------------------------------

def layer_geometry(input_extents, spec, rf=(1, 1), jump=(1, 1)) -> LayerGeometry:
    """Output size, effective kernel, receptive field and jump after one layer.

    ``rf`` and ``jump`` describe the incoming feature map (1 and 1 for raw
    pixels). Works for ConvSpec and PoolSpec.
    """
    h, w = input_extents
    if isinstance(spec, PoolSpec):
        kh = kw = spec.window
        sh = sw = spec.stride
        ph = pw = spec.pad
    else:
        kh, kw = spec.effective_kernel
        sh, sw = spec.stride
        ph, pw = spec.padding
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (w + 2 * pw - kw) // sw + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"layer {spec} on {h}x{w} input has non-positive output {oh}x{ow}")
    return LayerGeometry(
        output_h=oh,
        output_w=ow,
        effective_kernel=(kh, kw),
        receptive_field=(rf[0] + (kh - 1) * jump[0], rf[1] + (kw - 1) * jump[1]),
        jump=(jump[0] * sh, jump[1] * sw),
    )


def receptive_field_of_network(layers: Sequence, input_extents=None) -> list[LayerGeometry]:
    """Compose layer geometries along a chain of ConvSpec/PoolSpec layers.

    Without ``input_extents`` only the receptive field and jump are
    meaningful; output extents are reported for a notional input large
    enough for every layer.
    """
    if not layers:
        raise ValueError("need at least one layer")
    if input_extents is None:
        # smallest input that leaves a 1x1 map after the last layer
        big = 1
        for spec in reversed(layers):
            s = spec.stride if isinstance(spec, PoolSpec) else max(spec.stride)
            big = (big - 1) * s + max(spec.effective_kernel)
        input_extents = (big, big)
    rf, jump, hw = (1, 1), (1, 1), tuple(input_extents)
    out = []
    for spec in layers:
        g = layer_geometry(hw, spec, rf, jump)
        out.append(g)
        rf, jump, hw = g.receptive_field, g.jump, (g.output_h, g.output_w)
    return out
