"""Global LiDAR/camera BEV alignment.

The camera block of the fused BEV carries an integer translation; an offset field
is fit by descending the alignment loss through grid sampling of the LiDAR BEV.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Literal

import numpy as np
from scipy.ndimage import gaussian_filter

from app.errors import ConfigError, NumericalError
from app.local_align import BevGrid
from app.models import GlobalAlignSettings, NoiseSpec, OptimizerSettings
from app.tensor import (
    CbrBlock,
    FeatureMap,
    OffsetField,
    cbr_array,
    cbr_backward,
    grid_sample_array,
    grid_sample_grad_offsets_array,
    mse_loss_array,
)

logger = logging.getLogger(__name__)

BLUR_KERNEL = np.array([[1.0, 2.0, 1.0], [2.0, 4.0, 2.0], [1.0, 2.0, 1.0]]) / 16.0


@dataclass(frozen=True, eq=False)
class FusedBev:
    concat: FeatureMap
    target: FeatureMap
    lidar_channels: int

    @property
    def camera_channels(self) -> int:
        return self.concat.channels - self.lidar_channels


@dataclass(frozen=True, eq=False)
class OptimizationResult:
    offsets: OffsetField
    losses: list[float]
    log: list[dict[str, Any]]
    iterations: int
    stalled: bool
    converged: bool

    @property
    def initial_loss(self) -> float:
        return self.losses[0]

    @property
    def final_loss(self) -> float:
        return self.losses[-1]


@dataclass(frozen=True, eq=False)
class TrialResult:
    seed: int
    shift: tuple[int, int]
    recovered: tuple[float, float]
    result: OptimizationResult
    unaligned_loss: float
    meta: dict[str, Any] = field(default_factory=dict)

    @property
    def error(self) -> tuple[float, float]:
        return abs(self.recovered[0] - self.shift[0]), abs(self.recovered[1] - self.shift[1])


def flatten_lidar_bev(voxels: np.ndarray, bev: BevGrid | None = None) -> FeatureMap:
    """Sum a (B, C, Z, H_B, W_B) voxel feature over Z."""
    voxels = np.asarray(voxels)
    if voxels.ndim != 5:
        raise ConfigError(f"voxel feature must be (B, C, Z, H, W), got {voxels.shape}")
    if bev is not None and voxels.shape[3:] != (bev.height, bev.width):
        raise ConfigError(f"voxel grid {voxels.shape[3:]} does not match BEV grid {(bev.height, bev.width)}")
    return FeatureMap(voxels.astype(np.float64).sum(axis=2))


def fuse_bev(f_l: FeatureMap, f_c: FeatureMap, fuse_block: CbrBlock) -> FusedBev:
    if (f_l.batch, f_l.height, f_l.width) != (f_c.batch, f_c.height, f_c.width):
        raise ConfigError(f"LiDAR BEV {f_l.shape} and camera BEV {f_c.shape} disagree")
    if fuse_block.out_channels != f_l.channels:
        raise ConfigError(f"fuse block emits {fuse_block.out_channels} channels, LiDAR BEV has {f_l.channels}")
    concat = np.concatenate([f_l.data, f_c.data], axis=1)
    return FusedBev(concat=FeatureMap(concat), target=FeatureMap(cbr_array(concat, fuse_block)), lidar_channels=f_l.channels)


def translate_bev(arr: np.ndarray, shift: tuple[int, int]) -> np.ndarray:
    """Move the cell at (y, x) to (y + s_v, x + s_u); exposed cells become zero."""
    s_u, s_v = int(shift[0]), int(shift[1])
    out = np.zeros_like(arr)
    h, w = arr.shape[-2:]
    if abs(s_u) >= w or abs(s_v) >= h:
        return out
    src_y = slice(max(0, -s_v), h - max(0, s_v))
    dst_y = slice(max(0, s_v), h - max(0, -s_v))
    src_x = slice(max(0, -s_u), w - max(0, s_u))
    dst_x = slice(max(0, s_u), w - max(0, -s_u))
    out[..., dst_y, dst_x] = arr[..., src_y, src_x]
    return out


def inject_bev_noise(
    fused: FusedBev,
    noise: NoiseSpec,
    seed: int,
    shift: tuple[int, int] | None = None,
) -> tuple[FeatureMap, tuple[int, int]]:
    """Translate the camera block of F_B^MM by a seeded integer shift.

    Returns the noisy concat and the shift (s_u, s_v) actually applied.
    """
    if shift is None:
        m = noise.bev_shift_max
        drawn = np.random.default_rng(seed).integers(-m, m + 1, size=2) if m > 0 else np.zeros(2, dtype=np.int64)
        shift = (int(drawn[0]), int(drawn[1]))
    data = fused.concat.data.copy()
    c_l = fused.lidar_channels
    data[:, c_l:] = translate_bev(data[:, c_l:], shift)
    logger.debug("injected camera BEV shift=%s seed=%s", shift, seed)
    return FeatureMap(data), shift


def mm_align_forward(f_n: FeatureMap, f_l: FeatureMap, offsets: OffsetField, block: CbrBlock) -> FeatureMap:
    """Deform BEV: cbr(grid_sample(f_l, offsets) * f_l).

    ``f_n`` only feeds the offset head; it is checked for grid agreement here.
    """
    _check_alignment_shapes(f_n, f_l, offsets, block)
    weights = grid_sample_array(f_l.data, offsets.data)
    return FeatureMap(cbr_array(weights * f_l.numpy(), block))


def _check_alignment_shapes(f_n: FeatureMap, f_l: FeatureMap, offsets: OffsetField, block: CbrBlock) -> None:
    grid = (f_l.batch, f_l.height, f_l.width)
    if (f_n.batch, f_n.height, f_n.width) != grid:
        raise ConfigError(f"noisy BEV {f_n.shape} and LiDAR BEV {f_l.shape} disagree")
    if (offsets.batch, offsets.height, offsets.width) != grid:
        raise ConfigError(f"offset field {offsets.shape} does not cover LiDAR BEV {f_l.shape}")
    if block.in_channels != f_l.channels:
        raise ConfigError(f"align block expects {block.in_channels} channels, LiDAR BEV has {f_l.channels}")


def alignment_loss_and_grad(
    offsets: np.ndarray,
    f_l: np.ndarray,
    target: np.ndarray,
    block: CbrBlock,
    normalization: Literal["spatial", "elements"] = "spatial",
) -> tuple[float, np.ndarray]:
    """Alignment loss of the Deform BEV against ``target`` and its gradient w.r.t. offsets."""
    f_l64 = f_l.astype(np.float64, copy=False)
    sampled = grid_sample_array(f_l64, offsets)
    adjusted = sampled * f_l64
    out = cbr_array(adjusted, block)
    loss, grad_out = mse_loss_array(out, target, normalization)
    grad_adjusted = cbr_backward(adjusted, block, grad_out)
    return loss, grid_sample_grad_offsets_array(f_l64, offsets, grad_adjusted * f_l64)


def _descent_direction(grad: np.ndarray, smoothing: float) -> np.ndarray:
    if smoothing > 0:
        grad = gaussian_filter(grad, sigma=(0, 0, smoothing, smoothing))
    peak = np.max(np.abs(grad))
    return grad / peak if peak > 0 else grad


def _log_row(iteration: int, loss: float, offsets: np.ndarray) -> dict[str, Any]:
    return {
        "iter": iteration,
        "loss": loss,
        "mean_abs_du": float(np.mean(np.abs(offsets[:, 0]))),
        "mean_abs_dv": float(np.mean(np.abs(offsets[:, 1]))),
    }


def optimize_offsets(
    f_n: FeatureMap,
    f_l: FeatureMap,
    target: FeatureMap,
    block: CbrBlock,
    config: OptimizerSettings | None = None,
    *,
    initial: OffsetField | None = None,
    normalization: Literal["spatial", "elements"] = "spatial",
) -> OptimizationResult:
    """Descend the alignment loss over a raw per-cell offset field.

    A step is accepted only when it lowers the loss; otherwise it is halved up to
    ``max_halvings`` times. The loss curve is therefore non-increasing.
    """
    config = config or OptimizerSettings()
    offsets = (initial.numpy() if initial is not None else np.zeros((f_l.batch, 2, f_l.height, f_l.width)))
    _check_alignment_shapes(f_n, f_l, OffsetField(offsets), block)
    if target.shape != (f_l.batch, block.out_channels, f_l.height, f_l.width):
        raise ConfigError(f"target {target.shape} does not match the Deform BEV shape")
    offsets = np.clip(offsets, -config.clamp, config.clamp)
    f_l_arr, target_arr = f_l.numpy(), target.numpy()

    def evaluate(field: np.ndarray) -> tuple[float, np.ndarray]:
        loss, grad = alignment_loss_and_grad(field, f_l_arr, target_arr, block, normalization)
        if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
            raise NumericalError(f"alignment loss diverged (loss={loss}) at mean |offset| {np.mean(np.abs(field)):.4f}")
        return loss, grad

    loss, grad = evaluate(offsets)
    losses = [loss]
    log = [_log_row(0, loss, offsets)]
    stall = 0
    stalled = converged = False
    iteration = 0

    for iteration in range(1, config.iterations + 1):
        if loss <= config.loss_tolerance or np.max(np.abs(grad)) <= config.grad_tolerance:
            converged = True
            iteration -= 1
            break
        direction = _descent_direction(grad, config.gradient_smoothing)
        step = config.learning_rate
        accepted = None
        for _ in range(config.max_halvings + 1):
            candidate = np.clip(offsets - step * direction, -config.clamp, config.clamp)
            cand_loss, cand_grad = evaluate(candidate)
            if cand_loss < loss:
                accepted = (candidate, cand_loss, cand_grad)
                break
            step *= 0.5

        if accepted is None:
            # A rejected step leaves the state unchanged, so every later iteration would repeat it.
            stalled = True
            iteration -= 1
            logger.warning("offset descent stalled at iter=%s loss=%.6g", iteration, loss)
            break
        gain = loss - accepted[1]
        offsets, loss, grad = accepted
        stall = stall + 1 if gain <= 1e-12 * max(loss, 1.0) else 0
        losses.append(loss)
        log.append(_log_row(iteration, loss, offsets))
        logger.debug("offset descent iter=%s loss=%.6g step=%.4g gain=%.3g", iteration, loss, step, gain)
        if stall >= config.stall_patience:
            stalled = True
            logger.warning("offset descent made no progress for %s iterations", stall)
            break

    logger.info(
        "offset descent iters=%s initial_loss=%.6g final_loss=%.6g stalled=%s converged=%s",
        iteration,
        losses[0],
        losses[-1],
        stalled,
        converged,
    )
    return OptimizationResult(
        offsets=OffsetField(offsets),
        losses=losses,
        log=log,
        iterations=iteration,
        stalled=stalled,
        converged=converged,
    )


def offset_noise_schedule(epoch_fraction: float, *, noise: NoiseSpec, training: bool = True) -> NoiseSpec:
    """Training-time noise verbatim; evaluation adds none."""
    if not 0.0 <= epoch_fraction <= 1.0:
        raise ConfigError(f"epoch fraction must lie in [0, 1], got {epoch_fraction}")
    return noise if training else NoiseSpec.zero()


def smooth_random_features(
    shape: tuple[int, int, int, int], *, sigma: float, amplitude: float, seed: int
) -> FeatureMap:
    """1 + amplitude * g with g seeded Gaussian-smoothed noise scaled to max |g| = 1."""
    rng = np.random.default_rng(seed)
    g = gaussian_filter(rng.normal(size=shape), sigma=(0, 0, sigma, sigma), mode="wrap")
    return FeatureMap(1.0 + amplitude * _unit_peak(g))


def density_features(
    density: np.ndarray, channels: int, *, sigma: float, amplitude: float
) -> FeatureMap:
    """Feature stack from a (B, 1, H, W) BEV density; channel c uses a wider blur than c - 1."""
    density = np.asarray(density, dtype=np.float64)
    layers = [
        gaussian_filter(density[:, 0], sigma=(0, sigma * (1.0 + c / channels), sigma * (1.0 + c / channels)))
        for c in range(channels)
    ]
    g = np.stack(layers, axis=1)
    g = g - g.mean(axis=(2, 3), keepdims=True)
    return FeatureMap(1.0 + amplitude * _unit_peak(g))


def _unit_peak(g: np.ndarray) -> np.ndarray:
    peak = np.max(np.abs(g))
    return g / peak if peak > 0 else g


def paired_alignment_blocks(channels: int, seed: int) -> tuple[CbrBlock, CbrBlock]:
    """Align and fuse blocks sharing one orthogonally mixed 3x3 blur.

    The fuse block sees [LiDAR, camera] and applies the align weights to both halves,
    so an aligned camera block reproduces the Deform BEV exactly. Bias keeps every
    pre-activation positive for inputs in [0, 2].
    """
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.normal(size=(channels, channels)))
    q = q * np.sign(np.diag(r))[None, :]
    weight = q[:, :, None, None] * BLUR_KERNEL[None, None]
    bias = 2.5 * np.abs(q).sum(axis=1)
    align = CbrBlock(weight=weight, bias=bias, stride=1, padding=1)
    fuse = CbrBlock(weight=np.concatenate([weight, weight], axis=1), bias=bias, stride=1, padding=1)
    return align, fuse


def seeded_offset_head(in_channels: int, seed: int) -> CbrBlock:
    rng = np.random.default_rng(seed)
    weight = rng.normal(0.0, 0.01, size=(4, in_channels, 3, 3))
    return CbrBlock(weight=weight, bias=np.zeros(4), stride=1, padding=1)


def offset_head(f_n: FeatureMap, block: CbrBlock, clamp: float = 8.0) -> OffsetField:
    """CBR over F_N^MM with four outputs; offsets are the difference of the two ReLU pairs."""
    if block.out_channels != 4:
        raise ConfigError(f"offset head must emit 4 channels, got {block.out_channels}")
    out = cbr_array(f_n.data, block)
    if out.shape[2:] != (f_n.height, f_n.width):
        raise ConfigError("offset head must preserve the BEV grid")
    return OffsetField(np.clip(out[:, 0:2] - out[:, 2:4], -clamp, clamp))


def recovered_shift(offsets: OffsetField, margin: int = 8) -> tuple[float, float]:
    """Camera shift implied by the mean interior offset (offsets compensate, so the sign flips)."""
    h, w = offsets.height, offsets.width
    if 2 * margin >= min(h, w):
        raise ConfigError(f"margin {margin} leaves no interior in a {h}x{w} field")
    interior = offsets.numpy()[:, :, margin : h - margin, margin : w - margin]
    return -float(interior[:, 0].mean()), -float(interior[:, 1].mean())


def run_recovery_trial(
    f_l: FeatureMap,
    settings: GlobalAlignSettings,
    noise: NoiseSpec,
    seed: int,
    *,
    shift: tuple[int, int] | None = None,
) -> TrialResult:
    """Inject a camera BEV shift against ``f_l`` and fit offsets that undo it."""
    channels = f_l.channels
    align_block, fuse_block = paired_alignment_blocks(channels, seed)
    f_l64 = f_l.numpy()
    f_c = FeatureMap(f_l64 * f_l64 - f_l64)
    clean = fuse_bev(f_l, f_c, fuse_block)
    noisy, applied = inject_bev_noise(clean, noise, seed, shift=shift or settings.shift)
    # Supervision is the fused view of the noisy concat, so the descent target carries the shift.
    target = FeatureMap(cbr_array(noisy.data, fuse_block))

    initial = None
    if settings.use_offset_head:
        initial = offset_head(noisy, seeded_offset_head(noisy.channels, seed), settings.optimizer.clamp)
    zero = OffsetField(np.zeros((f_l.batch, 2, f_l.height, f_l.width)))
    unaligned, _ = alignment_loss_and_grad(zero.data, f_l.data, target.data, align_block)

    result = optimize_offsets(noisy, f_l, target, align_block, settings.optimizer, initial=initial)
    recovered = recovered_shift(result.offsets, settings.margin)
    logger.info("trial seed=%s injected=%s recovered=(%.3f, %.3f)", seed, applied, *recovered)
    return TrialResult(
        seed=seed,
        shift=applied,
        recovered=recovered,
        result=result,
        unaligned_loss=unaligned,
        meta={"clean_target_loss": float(mse_loss_array(clean.target.data, target.data)[0])},
    )
