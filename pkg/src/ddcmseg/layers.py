"""Parameterized neural layers over Tensor4 values.

Dilated 2-D convolution, batch normalization, PReLU/ReLU, max pooling,
bilinear upsampling and channel log-softmax, each with a hand-derived
backward rule registered on the active tape.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .tensor import DTYPE, Tensor4, record_op


@dataclass(frozen=True)
class Conv2dSpec:
    """Static description of a (possibly dilated) square convolution.

    A kernel of size k with dilation r spans an effective window of
    k + (k-1)(r-1) pixels: taps are read at offsets that are multiples of r
    from the window origin.  With stride 1 and padding (effective-1)/2 the
    spatial size is preserved ("same" padding).  r=1 reduces exactly to a
    standard convolution.
    """

    in_channels: int
    out_channels: int
    kernel: int
    dilation: int = 1
    stride: int = 1
    padding: int = 0
    bias: bool = False

    def __post_init__(self):
        for field in ("in_channels", "out_channels", "kernel", "dilation", "stride"):
            if getattr(self, field) < 1:
                raise ShapeError(f"Conv2dSpec.{field} must be >= 1, got {getattr(self, field)}")
        if self.padding < 0:
            raise ShapeError(f"Conv2dSpec.padding must be >= 0, got {self.padding}")

    @property
    def effective_kernel(self) -> int:
        return self.kernel + (self.kernel - 1) * (self.dilation - 1)

    @classmethod
    def same(cls, in_channels: int, out_channels: int, kernel: int,
             dilation: int = 1, bias: bool = False) -> "Conv2dSpec":
        """Stride-1 spec whose padding preserves the input resolution."""
        effective = kernel + (kernel - 1) * (dilation - 1)
        if effective % 2 == 0:
            raise ShapeError(f"same padding needs an odd effective kernel, got {effective}")
        return cls(in_channels, out_channels, kernel, dilation, 1, (effective - 1) // 2, bias)

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        e = self.effective_kernel
        oh = (h + 2 * self.padding - e) // self.stride + 1
        ow = (w + 2 * self.padding - e) // self.stride + 1
        if oh < 1 or ow < 1:
            raise ShapeError(
                f"conv output is empty for input {h}x{w} with effective kernel {e}, "
                f"padding {self.padding}, stride {self.stride}"
            )
        return oh, ow

    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels, self.kernel, self.kernel)


def he_init_conv(spec: Conv2dSpec, rng: np.random.Generator) -> np.ndarray:
    fan_in = spec.in_channels * spec.kernel * spec.kernel
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=spec.weight_shape()).astype(DTYPE)


def _pad_zeros(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    n, c, h, w = x.shape
    out = np.zeros((n, c, h + 2 * p, w + 2 * p), x.dtype)
    out[:, :, p:p + h, p:p + w] = x
    return out


def _tap_slices(k: int, r: int, stride: int, oh: int, ow: int):
    """Index slices of the padded input read by each (ky, kx) kernel tap."""
    for ky in range(k):
        ys = slice(ky * r, ky * r + (oh - 1) * stride + 1, stride)
        for kx in range(k):
            xs = slice(kx * r, kx * r + (ow - 1) * stride + 1, stride)
            yield ky, kx, ys, xs


def _dilated_columns(padded: np.ndarray, k: int, r: int, stride: int,
                     oh: int, ow: int) -> np.ndarray:
    """Gather conv taps into a contiguous (n, c*k*k, oh*ow) matrix.

    Copying tap by tap keeps each copy a simple strided 4-D slice, which is
    far faster than materializing the 6-D as_strided view in one shot.
    """
    n, c = padded.shape[:2]
    cols = np.empty((n, c, k, k, oh, ow), padded.dtype)
    for ky, kx, ys, xs in _tap_slices(k, r, stride, oh, ow):
        cols[:, :, ky, kx] = padded[:, :, ys, xs]
    return cols.reshape(n, c * k * k, oh * ow)


def conv2d(x: Tensor4, spec: Conv2dSpec, weight: Tensor4,
           bias: Tensor4 | None = None) -> Tensor4:
    """Dilated 2-D convolution with zero padding.

    ``weight`` is (out_c, in_c, k, k); ``bias`` an optional (1, out_c, 1, 1)
    channel vector.  Gradients flow to the input, the weights and the bias.
    """
    if x.c != spec.in_channels:
        raise ShapeError(
            f"conv2d: channel axis mismatch: input has {x.c}, spec expects {spec.in_channels}"
        )
    if weight.shape != spec.weight_shape():
        raise ShapeError(
            f"conv2d: weight shape {weight.shape} does not match spec {spec.weight_shape()}"
        )
    if spec.bias != (bias is not None):
        raise ShapeError("conv2d: bias tensor presence disagrees with spec.bias")
    if bias is not None and bias.shape != (1, spec.out_channels, 1, 1):
        raise ShapeError(f"conv2d: bias must be (1, {spec.out_channels}, 1, 1), got {bias.shape}")

    n, c, h, w = x.shape
    k, r, stride, p = spec.kernel, spec.dilation, spec.stride, spec.padding
    oh, ow = spec.output_hw(h, w)
    oc = spec.out_channels
    pointwise = k == 1 and stride == 1 and p == 0

    if pointwise:
        cols = x.data.reshape(n, c, h * w)
    else:
        padded = _pad_zeros(x.data, p)
        cols = _dilated_columns(padded, k, r, stride, oh, ow)
    wmat = weight.data.reshape(oc, c * k * k)
    out_data = np.matmul(wmat, cols).reshape(n, oc, oh, ow)
    if bias is not None:
        out_data = out_data + bias.data

    inputs = (x, weight) if bias is None else (x, weight, bias)

    def _backward(g: np.ndarray) -> None:
        gm = g.reshape(n, oc, oh * ow)
        if weight.requires_grad:
            dw = np.matmul(gm, cols.transpose(0, 2, 1)).sum(axis=0)
            weight.accumulate_grad(dw.reshape(spec.weight_shape()))
        if bias is not None and bias.requires_grad:
            bias.accumulate_grad(g.sum(axis=(0, 2, 3), keepdims=True, dtype=DTYPE))
        if x.requires_grad:
            dcols = np.matmul(wmat.T, gm)
            if pointwise:
                x.accumulate_grad(dcols.reshape(n, c, h, w))
                return
            dcols = dcols.reshape(n, c, k, k, oh, ow)
            dpad = np.zeros((n, c, h + 2 * p, w + 2 * p), DTYPE)
            for ky, kx, ys, xs in _tap_slices(k, r, stride, oh, ow):
                dpad[:, :, ys, xs] += dcols[:, :, ky, kx]
            x.accumulate_grad(dpad[:, :, p:p + h, p:p + w] if p else dpad)

    return record_op(out_data, inputs, _backward)


@dataclass
class BatchNormState:
    """Per-channel batch normalization parameters and running statistics.

    Train mode standardizes over (n, h, w) with the biased batch variance and
    folds the batch statistics into the running buffers as
    (1 - momentum) * old + momentum * batch.  Eval mode uses the running
    statistics only.
    """

    gamma: Tensor4
    beta: Tensor4
    running_mean: Tensor4
    running_var: Tensor4
    momentum: float = 0.1
    eps: float = 1e-5
    mode: str = "train"

    @classmethod
    def create(cls, channels: int, momentum: float = 0.1, eps: float = 1e-5,
               name: str = "bn") -> "BatchNormState":
        shape = (1, channels, 1, 1)
        return cls(
            gamma=Tensor4(np.ones(shape, DTYPE), requires_grad=True, name=f"{name}.gamma"),
            beta=Tensor4(np.zeros(shape, DTYPE), requires_grad=True, name=f"{name}.beta"),
            running_mean=Tensor4(np.zeros(shape, DTYPE), name=f"{name}.running_mean"),
            running_var=Tensor4(np.ones(shape, DTYPE), name=f"{name}.running_var"),
            momentum=momentum,
            eps=eps,
        )

    @property
    def channels(self) -> int:
        return self.gamma.c


def batch_norm(x: Tensor4, state: BatchNormState) -> Tensor4:
    if x.c != state.channels:
        raise ShapeError(
            f"batch_norm: channel axis mismatch: input has {x.c}, state has {state.channels}"
        )
    gamma, beta = state.gamma, state.beta
    eps = DTYPE(state.eps)

    if state.mode == "train":
        m = x.n * x.h * x.w
        if m == 1:
            raise ShapeError("batch_norm: train mode needs n*h*w > 1 (variance undefined)")
        mean = x.data.mean(axis=(0, 2, 3), keepdims=True, dtype=DTYPE)
        var = x.data.var(axis=(0, 2, 3), keepdims=True, dtype=DTYPE)
        mom = DTYPE(state.momentum)
        state.running_mean.data *= (1 - mom)
        state.running_mean.data += mom * mean
        state.running_var.data *= (1 - mom)
        state.running_var.data += mom * var
        inv = DTYPE(1.0) / np.sqrt(var + eps)
        xhat = (x.data - mean) * inv
        out_data = gamma.data * xhat + beta.data

        def _backward(g: np.ndarray) -> None:
            if gamma.requires_grad:
                gamma.accumulate_grad((g * xhat).sum(axis=(0, 2, 3), keepdims=True, dtype=DTYPE))
            if beta.requires_grad:
                beta.accumulate_grad(g.sum(axis=(0, 2, 3), keepdims=True, dtype=DTYPE))
            if x.requires_grad:
                gx = g * gamma.data
                sum_gx = gx.sum(axis=(0, 2, 3), keepdims=True, dtype=DTYPE)
                sum_gx_xhat = (gx * xhat).sum(axis=(0, 2, 3), keepdims=True, dtype=DTYPE)
                x.accumulate_grad((inv / DTYPE(m)) * (DTYPE(m) * gx - sum_gx - xhat * sum_gx_xhat))

    elif state.mode == "eval":
        inv = DTYPE(1.0) / np.sqrt(state.running_var.data + eps)
        xhat = (x.data - state.running_mean.data) * inv
        out_data = gamma.data * xhat + beta.data

        def _backward(g: np.ndarray) -> None:
            if gamma.requires_grad:
                gamma.accumulate_grad((g * xhat).sum(axis=(0, 2, 3), keepdims=True, dtype=DTYPE))
            if beta.requires_grad:
                beta.accumulate_grad(g.sum(axis=(0, 2, 3), keepdims=True, dtype=DTYPE))
            if x.requires_grad:
                x.accumulate_grad(g * gamma.data * inv)

    else:
        raise ValueError(f"batch_norm: unknown mode {state.mode!r}")

    return record_op(out_data, (x, gamma, beta), _backward)


@dataclass
class PReluState:
    """Learnable per-channel negative slope; default init 0.25."""

    slope: Tensor4

    @classmethod
    def create(cls, channels: int, init: float = 0.25, name: str = "prelu") -> "PReluState":
        arr = np.full((1, channels, 1, 1), init, DTYPE)
        return cls(slope=Tensor4(arr, requires_grad=True, name=f"{name}.slope"))

    @property
    def channels(self) -> int:
        return self.slope.c


def prelu(x: Tensor4, state: PReluState) -> Tensor4:
    if x.c != state.channels:
        raise ShapeError(
            f"prelu: channel axis mismatch: input has {x.c}, state has {state.channels}"
        )
    slope = state.slope
    neg = x.data < 0
    out_data = np.where(neg, slope.data * x.data, x.data)

    def _backward(g: np.ndarray) -> None:
        if x.requires_grad:
            x.accumulate_grad(np.where(neg, g * slope.data, g))
        if slope.requires_grad:
            ds = np.where(neg, g * x.data, DTYPE(0.0))
            slope.accumulate_grad(ds.sum(axis=(0, 2, 3), keepdims=True, dtype=DTYPE))

    return record_op(out_data, (x, slope), _backward)


def relu(x: Tensor4) -> Tensor4:
    pos = x.data > 0
    out_data = np.where(pos, x.data, DTYPE(0.0))

    def _backward(g: np.ndarray) -> None:
        if x.requires_grad:
            x.accumulate_grad(np.where(pos, g, DTYPE(0.0)))

    return record_op(out_data, (x,), _backward)


def max_pool(x: Tensor4, kernel: int, stride: int | None = None, padding: int = 0) -> Tensor4:
    """Max pooling; gradient routes to the first-found argmax tap per window."""
    if stride is None:
        stride = kernel
    if kernel < 1 or stride < 1 or padding < 0:
        raise ShapeError(f"max_pool: invalid kernel/stride/padding ({kernel}, {stride}, {padding})")
    n, c, h, w = x.shape
    hp, wp = h + 2 * padding, w + 2 * padding
    if kernel > hp or kernel > wp:
        raise ShapeError(f"max_pool: window {kernel} larger than input {h}x{w} (padding {padding})")
    oh = (hp - kernel) // stride + 1
    ow = (wp - kernel) // stride + 1

    if padding:
        padded = np.full((n, c, hp, wp), -np.inf, x.data.dtype)
        padded[:, :, padding:padding + h, padding:padding + w] = x.data
    else:
        padded = x.data
    windows = np.empty((n, c, oh, ow, kernel * kernel), padded.dtype)
    for ky, kx, ys, xs in _tap_slices(kernel, 1, stride, oh, ow):
        windows[..., ky * kernel + kx] = padded[:, :, ys, xs]
    arg = windows.argmax(axis=-1)
    out_data = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]

    def _backward(g: np.ndarray) -> None:
        if not x.requires_grad:
            return
        dpad = np.zeros((n, c, hp, wp), DTYPE)
        oy, ox = np.meshgrid(np.arange(oh), np.arange(ow), indexing="ij")
        py = oy[None, None] * stride + arg // kernel
        px = ox[None, None] * stride + arg % kernel
        nn = np.arange(n)[:, None, None, None]
        cc = np.arange(c)[None, :, None, None]
        np.add.at(dpad, (nn, cc, py, px), g)
        x.accumulate_grad(dpad[:, :, padding:padding + h, padding:padding + w] if padding else dpad)

    return record_op(out_data, (x,), _backward)


def _bilinear_axis(size: int, factor: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Source indices (lo, hi) and hi-side weight for one upsampled axis."""
    src = (np.arange(size * factor, dtype=np.float64) + 0.5) / factor - 0.5
    src = np.clip(src, 0.0, size - 1)
    lo = np.floor(src).astype(np.int64)
    frac = (src - lo).astype(DTYPE)
    hi = np.minimum(lo + 1, size - 1)
    return lo, hi, frac


def upsample_bilinear(x: Tensor4, factor: int) -> Tensor4:
    """Bilinear upsampling by an integer factor (half-pixel-centered sampling)."""
    if factor < 1:
        raise ShapeError(f"upsample_bilinear: factor must be >= 1, got {factor}")
    n, c, h, w = x.shape
    y0, y1, ty = _bilinear_axis(h, factor)
    x0, x1, tx = _bilinear_axis(w, factor)
    wy0, wy1 = (1 - ty)[:, None], ty[:, None]
    wx0, wx1 = (1 - tx)[None, :], tx[None, :]

    d = x.data
    out_data = (
        wy0 * (wx0 * d[:, :, y0[:, None], x0[None, :]] + wx1 * d[:, :, y0[:, None], x1[None, :]])
        + wy1 * (wx0 * d[:, :, y1[:, None], x0[None, :]] + wx1 * d[:, :, y1[:, None], x1[None, :]])
    ).astype(DTYPE, copy=False)

    def _backward(g: np.ndarray) -> None:
        if not x.requires_grad:
            return
        dx = np.zeros(x.shape, DTYPE)
        nn = np.arange(n)[:, None, None, None]
        cc = np.arange(c)[None, :, None, None]
        for yy, wy in ((y0, wy0), (y1, wy1)):
            for xx, wx in ((x0, wx0), (x1, wx1)):
                np.add.at(dx, (nn, cc, yy[:, None], xx[None, :]), g * (wy * wx))
        x.accumulate_grad(dx)

    return record_op(out_data, (x,), _backward)


def log_softmax_channels(x: Tensor4) -> Tensor4:
    """Numerically stable log-softmax over the channel axis."""
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True, dtype=DTYPE))
    out_data = shifted - lse

    def _backward(g: np.ndarray) -> None:
        if x.requires_grad:
            x.accumulate_grad(g - np.exp(out_data) * g.sum(axis=1, keepdims=True, dtype=DTYPE))

    return record_op(out_data, (x,), _backward)
