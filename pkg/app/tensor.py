"""Dense feature-map substrate.

Feature maps are rank-4 ``(batch, channel, height, width)`` float32 arrays. Every
operation here is a pure function; inputs are never mutated and results are
read-only. Kernels compute in float64 and store float32.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from app.errors import ConfigError, NumericalError


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class FeatureMap:
    data: np.ndarray

    def __post_init__(self) -> None:
        arr = np.ascontiguousarray(self.data, dtype=np.float32)
        if arr.ndim != 4:
            raise ConfigError(f"feature map must be rank 4, got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise ConfigError(f"feature map dims must all be >= 1, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise NumericalError(f"feature map of shape {arr.shape} holds non-finite values")
        if arr is self.data:
            arr = arr.copy()
        object.__setattr__(self, "data", _frozen(arr))

    @classmethod
    def zeros(cls, batch: int, channels: int, height: int, width: int) -> FeatureMap:
        return cls(np.zeros((batch, channels, height, width), dtype=np.float32))

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return tuple(self.data.shape)  # type: ignore[return-value]

    @property
    def batch(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[2]

    @property
    def width(self) -> int:
        return self.data.shape[3]

    def numpy(self, dtype: type = np.float64) -> np.ndarray:
        return self.data.astype(dtype)

    def flat(self) -> np.ndarray:
        return self.data.reshape(-1)


class OffsetField(FeatureMap):
    """Per-cell (du, dv) displacement in cell units; channel 0 = du, channel 1 = dv."""

    def __post_init__(self) -> None:
        super().__post_init__()
        if self.channels != 2:
            raise ConfigError(f"offset field needs 2 channels, got {self.channels}")

    @property
    def du(self) -> np.ndarray:
        return self.data[:, 0]

    @property
    def dv(self) -> np.ndarray:
        return self.data[:, 1]


@dataclass(frozen=True, eq=False)
class CbrBlock:
    weight: np.ndarray
    bias: np.ndarray
    stride: int = 1
    padding: int = 0
    gamma: np.ndarray | None = None
    beta: np.ndarray | None = None
    running_mean: np.ndarray | None = None
    running_var: np.ndarray | None = None
    eps: float = 1e-5
    _bn: tuple[np.ndarray, np.ndarray] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        weight = np.asarray(self.weight, dtype=np.float64)
        if weight.ndim != 4:
            raise ConfigError(f"conv weight must be (out, in, kh, kw), got {weight.shape}")
        out_ch = weight.shape[0]
        bias = np.asarray(self.bias, dtype=np.float64).reshape(-1)
        if bias.shape != (out_ch,):
            raise ConfigError(f"conv bias must have {out_ch} entries, got {bias.shape}")
        if self.stride < 1 or self.padding < 0:
            raise ConfigError(f"invalid stride/padding {self.stride}/{self.padding}")
        if self.eps <= 0:
            raise ConfigError("batch-norm epsilon must be > 0")

        def _vec(value: np.ndarray | None, default: float, name: str) -> np.ndarray:
            if value is None:
                return np.full(out_ch, default, dtype=np.float64)
            vec = np.asarray(value, dtype=np.float64).reshape(-1)
            if vec.shape != (out_ch,):
                raise ConfigError(f"batch-norm {name} must have {out_ch} entries, got {vec.shape}")
            return vec

        gamma = _vec(self.gamma, 1.0, "gamma")
        beta = _vec(self.beta, 0.0, "beta")
        mean = _vec(self.running_mean, 0.0, "running_mean")
        var = _vec(self.running_var, 1.0, "running_var")
        if np.any(var <= 0):
            raise ConfigError("batch-norm running variance must be > 0")
        for name, value in (
            ("weight", weight),
            ("bias", bias),
            ("gamma", gamma),
            ("beta", beta),
            ("running_mean", mean),
            ("running_var", var),
        ):
            object.__setattr__(self, name, _frozen(value))
        scale = gamma / np.sqrt(var + self.eps)
        object.__setattr__(self, "_bn", (_frozen(scale), _frozen(beta - mean * scale)))

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def kernel_size(self) -> tuple[int, int]:
        return self.weight.shape[2], self.weight.shape[3]

    def output_size(self, height: int, width: int) -> tuple[int, int]:
        kh, kw = self.kernel_size
        oh = (height + 2 * self.padding - kh) // self.stride + 1
        ow = (width + 2 * self.padding - kw) // self.stride + 1
        return oh, ow


def seeded_cbr_block(
    in_channels: int,
    out_channels: int,
    *,
    kernel: int = 3,
    stride: int = 1,
    padding: int | None = None,
    seed: int = 0,
) -> CbrBlock:
    """He-scaled Gaussian conv weights, zero bias, identity batch-norm statistics."""
    rng = np.random.default_rng(seed)
    fan_in = in_channels * kernel * kernel
    weight = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(out_channels, in_channels, kernel, kernel))
    return CbrBlock(
        weight=weight,
        bias=np.zeros(out_channels),
        stride=stride,
        padding=kernel // 2 if padding is None else padding,
    )


def _check_conv(shape: tuple[int, ...], block: CbrBlock) -> tuple[int, int]:
    if shape[1] != block.in_channels:
        raise ConfigError(f"conv expects {block.in_channels} input channels, got {shape[1]}")
    oh, ow = block.output_size(shape[2], shape[3])
    if oh < 1 or ow < 1:
        raise ConfigError(f"conv produces empty output for input {shape} and kernel {block.kernel_size}")
    return oh, ow


def conv2d_array(x: np.ndarray, block: CbrBlock) -> np.ndarray:
    oh, ow = _check_conv(x.shape, block)
    kh, kw = block.kernel_size
    p, s = block.padding, block.stride
    xp = np.pad(x.astype(np.float64, copy=False), ((0, 0), (0, 0), (p, p), (p, p)))
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s][:, :, :oh, :ow]
    out = np.tensordot(windows, block.weight, axes=([1, 4, 5], [1, 2, 3]))
    return out.transpose(0, 3, 1, 2) + block.bias[None, :, None, None]


def conv2d_grad_input(upstream: np.ndarray, block: CbrBlock, input_shape: tuple[int, ...]) -> np.ndarray:
    """Gradient of conv2d w.r.t. its input (transposed convolution of ``upstream``)."""
    b, _, h, w = input_shape
    oh, ow = _check_conv(input_shape, block)
    if upstream.shape != (b, block.out_channels, oh, ow):
        raise ConfigError(f"upstream gradient shape {upstream.shape} does not match conv output")
    kh, kw = block.kernel_size
    p, s = block.padding, block.stride
    grad = np.zeros((b, block.in_channels, h + 2 * p, w + 2 * p), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            contrib = np.tensordot(upstream, block.weight[:, :, i, j], axes=([1], [0]))
            grad[:, :, i : i + s * (oh - 1) + 1 : s, j : j + s * (ow - 1) + 1 : s] += contrib.transpose(0, 3, 1, 2)
    return grad[:, :, p : p + h, p : p + w]


def batch_norm_array(x: np.ndarray, block: CbrBlock) -> np.ndarray:
    scale, shift = block._bn
    return x * scale[None, :, None, None] + shift[None, :, None, None]


def cbr_array(x: np.ndarray, block: CbrBlock) -> np.ndarray:
    return np.maximum(batch_norm_array(conv2d_array(x, block), block), 0.0)


def cbr_backward(x: np.ndarray, block: CbrBlock, upstream: np.ndarray) -> np.ndarray:
    """Gradient of ``cbr(x)`` w.r.t. ``x`` for fixed block parameters."""
    pre = batch_norm_array(conv2d_array(x, block), block)
    scale, _ = block._bn
    grad_conv = upstream * (pre > 0.0) * scale[None, :, None, None]
    return conv2d_grad_input(grad_conv, block, x.shape)


def conv2d(feature: FeatureMap, block: CbrBlock) -> FeatureMap:
    return FeatureMap(conv2d_array(feature.data, block))


def batch_norm_inference(feature: FeatureMap, block: CbrBlock) -> FeatureMap:
    if feature.channels != block.out_channels:
        raise ConfigError(f"batch-norm expects {block.out_channels} channels, got {feature.channels}")
    return FeatureMap(batch_norm_array(feature.numpy(), block))


def relu(feature: FeatureMap) -> FeatureMap:
    return FeatureMap(np.maximum(feature.data, 0.0))


def cbr(feature: FeatureMap, block: CbrBlock) -> FeatureMap:
    return FeatureMap(cbr_array(feature.data, block))


def softmax_array(x: np.ndarray) -> np.ndarray:
    x = x.astype(np.float64, copy=False)
    shifted = np.exp(x - x.max(axis=1, keepdims=True))
    return shifted / shifted.sum(axis=1, keepdims=True)


def softmax_channels(feature: FeatureMap) -> FeatureMap:
    return FeatureMap(softmax_array(feature.data))


def concat_channels(*features: FeatureMap) -> FeatureMap:
    first = features[0]
    for other in features[1:]:
        if (other.batch, other.height, other.width) != (first.batch, first.height, first.width):
            raise ConfigError(f"cannot concatenate {first.shape} with {other.shape}")
    return FeatureMap(np.concatenate([f.data for f in features], axis=1))


def split_channels(feature: FeatureMap, first: int) -> tuple[FeatureMap, FeatureMap]:
    if not 0 < first < feature.channels:
        raise ConfigError(f"cannot split {feature.channels} channels at {first}")
    return FeatureMap(feature.data[:, :first]), FeatureMap(feature.data[:, first:])


# Bilinear sampling. A sample at continuous (sx, sy) interpolates the cell whose
# lower corner is (ceil(s) - 1); on-grid samples therefore sit on the upper edge
# of the lower-index cell, which fixes the one-sided derivative at cell borders.


def _check_sampling(shape: tuple[int, ...], offsets_shape: tuple[int, ...]) -> None:
    if len(offsets_shape) != 4 or offsets_shape[1] != 2:
        raise ConfigError(f"offsets must be (B, 2, H, W), got {offsets_shape}")
    if offsets_shape[0] != shape[0] or offsets_shape[2:] != shape[2:]:
        raise ConfigError(f"offsets {offsets_shape} do not match input {shape}")


def _gather(flat: np.ndarray, yi: np.ndarray, xi: np.ndarray, height: int, width: int) -> np.ndarray:
    b, c, _ = flat.shape
    valid = (yi >= 0) & (yi < height) & (xi >= 0) & (xi < width)
    idx = np.clip(yi, 0, height - 1) * width + np.clip(xi, 0, width - 1)
    idx = np.broadcast_to(idx.reshape(b, 1, -1), (b, c, idx[0].size))
    vals = np.take_along_axis(flat, idx, axis=2).reshape(b, c, height, width)
    return vals * valid[:, None]


def _corners(x: np.ndarray, offsets: np.ndarray):
    b, _, h, w = x.shape
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    sx = xs[None] + offsets[:, 0]
    sy = ys[None] + offsets[:, 1]
    x0 = np.ceil(sx).astype(np.int64) - 1
    y0 = np.ceil(sy).astype(np.int64) - 1
    wx = (sx - x0)[:, None]
    wy = (sy - y0)[:, None]
    flat = x.astype(np.float64, copy=False).reshape(b, x.shape[1], h * w)
    v00 = _gather(flat, y0, x0, h, w)
    v01 = _gather(flat, y0, x0 + 1, h, w)
    v10 = _gather(flat, y0 + 1, x0, h, w)
    v11 = _gather(flat, y0 + 1, x0 + 1, h, w)
    return wx, wy, v00, v01, v10, v11


def grid_sample_array(x: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    _check_sampling(x.shape, offsets.shape)
    wx, wy, v00, v01, v10, v11 = _corners(x, offsets.astype(np.float64, copy=False))
    return (1.0 - wy) * ((1.0 - wx) * v00 + wx * v01) + wy * ((1.0 - wx) * v10 + wx * v11)


def grid_sample_grad_offsets_array(x: np.ndarray, offsets: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    _check_sampling(x.shape, offsets.shape)
    if upstream.shape != x.shape:
        raise ConfigError(f"upstream {upstream.shape} does not match sampled output {x.shape}")
    wx, wy, v00, v01, v10, v11 = _corners(x, offsets.astype(np.float64, copy=False))
    d_sx = (1.0 - wy) * (v01 - v00) + wy * (v11 - v10)
    d_sy = (1.0 - wx) * (v10 - v00) + wx * (v11 - v01)
    grad = np.empty(offsets.shape, dtype=np.float64)
    grad[:, 0] = np.sum(upstream * d_sx, axis=1)
    grad[:, 1] = np.sum(upstream * d_sy, axis=1)
    return grad


def grid_sample_bilinear(feature: FeatureMap, offsets: OffsetField) -> FeatureMap:
    """Sample ``feature`` at (x + du, y + dv) with zero padding outside the grid."""
    return FeatureMap(grid_sample_array(feature.data, offsets.data))


def grid_sample_grad_offsets(feature: FeatureMap, offsets: OffsetField, upstream: FeatureMap) -> OffsetField:
    return OffsetField(grid_sample_grad_offsets_array(feature.data, offsets.data, upstream.data))


def mse_loss_array(
    a: np.ndarray, b: np.ndarray, normalization: Literal["spatial", "elements"] = "spatial"
) -> tuple[float, np.ndarray]:
    if a.shape != b.shape:
        raise ConfigError(f"loss operands differ in shape: {a.shape} vs {b.shape}")
    diff = a.astype(np.float64) - b.astype(np.float64)
    n = a.shape[0] * a.shape[2] * a.shape[3]
    if normalization == "elements":
        n *= a.shape[1]
    loss = float(np.sum(diff * diff) / n)
    if not np.isfinite(loss):
        raise NumericalError("alignment loss is not finite")
    return loss, 2.0 * diff / n


def mse_loss(
    a: FeatureMap, b: FeatureMap, normalization: Literal["spatial", "elements"] = "spatial"
) -> tuple[float, FeatureMap]:
    """Alignment loss summed over channels and averaged over batch x space.

    ``normalization="elements"`` divides by every element instead (the alternative
    reading of the per-element mean).
    """
    loss, grad = mse_loss_array(a.data, b.data, normalization)
    return loss, FeatureMap(grad)
