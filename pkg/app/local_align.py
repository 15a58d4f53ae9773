"""Neighbor-aware camera-to-BEV view transformation.

Sparse projected depth -> KD-tree neighbor depths -> Dual Transform -> DepthNet ->
softmax depth x context -> BEV pooling.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.spatial import cKDTree

from app.errors import ConfigError
from app.geometry import CameraModel, PixelProjection, PointCloud, project_points
from app.models import DepthErrorReport, GeometrySettings
from app.tensor import CbrBlock, FeatureMap, cbr_array, seeded_cbr_block, softmax_array

logger = logging.getLogger(__name__)

FEATURE_STRIDE = 8
# Extra candidates fetched per KD-tree query so that distance ties at the k-th
# neighbor are usually resolved without a fallback radius query.
TIE_SLACK = 8
# Candidate pairs materialized per brute-force chunk.
BRUTE_FORCE_CHUNK = 1 << 21


@dataclass(frozen=True, eq=False)
class SparseDepth:
    depth: FeatureMap
    coords: tuple[np.ndarray, ...]
    values: tuple[np.ndarray, ...]

    @property
    def num_cameras(self) -> int:
        return self.depth.batch

    @property
    def image_size(self) -> tuple[int, int]:
        return self.depth.height, self.depth.width


@dataclass(frozen=True, eq=False)
class NeighborTable:
    k: int
    neighbor_index: tuple[np.ndarray, ...]
    neighbor_coords: tuple[np.ndarray, ...]
    neighbor_depth: FeatureMap | None = None

    def to_json(self) -> dict:
        return {
            "k": self.k,
            "cameras": [
                {"neighbor_coords": coords.tolist(), "neighbor_index": idx.tolist()}
                for coords, idx in zip(self.neighbor_coords, self.neighbor_index)
            ],
        }


@dataclass(frozen=True, eq=False)
class FrustumGrid:
    depth_bins: np.ndarray
    image_size: tuple[int, int]
    feature_size: tuple[int, int]

    @classmethod
    def build(
        cls,
        image_size: tuple[int, int] = (256, 704),
        depth_bound: tuple[float, float, float] = (1.0, 60.0, 0.5),
        stride: int = FEATURE_STRIDE,
    ) -> FrustumGrid:
        height, width = image_size
        if height % stride or width % stride:
            raise ConfigError(f"image size {image_size} not divisible by {stride}")
        lo, hi, step = depth_bound
        count = int(np.floor((hi - lo) / step + 1e-9))
        if count < 1:
            raise ConfigError(f"depth bound {depth_bound} yields no bins")
        bins = lo + step * np.arange(count, dtype=np.float64)
        return cls(depth_bins=bins, image_size=(height, width), feature_size=(height // stride, width // stride))

    @property
    def num_bins(self) -> int:
        return len(self.depth_bins)

    def ego_points(self, cam: CameraModel) -> np.ndarray:
        """(D, fH, fW, 3) LiDAR-frame coordinates of every frustum cell."""
        height, width = self.image_size
        fh, fw = self.feature_size
        vs, us = np.meshgrid(np.linspace(0, height - 1, fh), np.linspace(0, width - 1, fw), indexing="ij")
        rays = cam.pixel_rays(us, vs)
        q = self.depth_bins[:, None, None, None] * rays[None]
        return (q - cam.T) @ cam.R


@dataclass(frozen=True)
class BevGrid:
    x_bound: tuple[float, float, float] = (-54.0, 54.0, 0.3)
    y_bound: tuple[float, float, float] = (-54.0, 54.0, 0.3)
    z_bound: tuple[float, float] = (-10.0, 10.0)
    voxel_size: tuple[float, float, float] = (0.075, 0.075, 0.2)
    point_cloud_range: tuple[float, ...] = (-54.0, -54.0, -5.0, 54.0, 54.0, 3.0)

    def __post_init__(self) -> None:
        for name, (lo, hi, cell) in (("x", self.x_bound), ("y", self.y_bound)):
            cells = (hi - lo) / cell
            if cell <= 0 or hi <= lo or abs(cells - round(cells)) > 1e-6:
                raise ConfigError(f"BEV {name} extent {(lo, hi)} is not a whole number of {cell} m cells")

    @classmethod
    def from_settings(cls, geometry: GeometrySettings) -> BevGrid:
        return cls(
            x_bound=geometry.x_bound,
            y_bound=geometry.y_bound,
            z_bound=geometry.z_bound,
            voxel_size=geometry.voxel_size,
            point_cloud_range=geometry.point_cloud_range,
        )

    @property
    def width(self) -> int:
        return int(round((self.x_bound[1] - self.x_bound[0]) / self.x_bound[2]))

    @property
    def height(self) -> int:
        return int(round((self.y_bound[1] - self.y_bound[0]) / self.y_bound[2]))

    def cell_ranks(self, points: np.ndarray) -> np.ndarray:
        """Flat row-major BEV cell per point (row = y, column = x); -1 when out of range."""
        ix = np.floor((points[..., 0] - self.x_bound[0]) / self.x_bound[2]).astype(np.int64)
        iy = np.floor((points[..., 1] - self.y_bound[0]) / self.y_bound[2]).astype(np.int64)
        z = points[..., 2]
        inside = (
            (ix >= 0)
            & (ix < self.width)
            & (iy >= 0)
            & (iy < self.height)
            & (z >= self.z_bound[0])
            & (z < self.z_bound[1])
        )
        return np.where(inside, iy * self.width + ix, -1)


def build_sparse_depth(
    projections: PixelProjection | Sequence[PixelProjection],
    image_size: tuple[int, int] | None = None,
) -> SparseDepth:
    """Scatter valid projections to integer pixels, keeping the nearest depth per pixel."""
    if isinstance(projections, PixelProjection):
        projections = [projections]
    if not projections:
        raise ConfigError("build_sparse_depth needs at least one projection")
    size = image_size or projections[0].image_size
    height, width = size
    depth = np.zeros((len(projections), 1, height, width), dtype=np.float32)
    coords, values = [], []
    for cam_idx, proj in enumerate(projections):
        if tuple(proj.image_size) != tuple(size):
            raise ConfigError(f"projection image size {proj.image_size} differs from {size}")
        sel = np.flatnonzero(proj.valid)
        u = proj.pixel_u[sel]
        v = proj.pixel_v[sel]
        z = proj.z[sel]
        flat = v * width + u
        order = np.lexsort((z, flat))
        flat, z = flat[order], z[order]
        uniq, first = np.unique(flat, return_index=True)
        vals = z[first].astype(np.float32)
        cam_coords = np.stack([uniq % width, uniq // width], axis=1).astype(np.int64)
        depth[cam_idx, 0, cam_coords[:, 1], cam_coords[:, 0]] = vals
        coords.append(cam_coords)
        values.append(vals)
        if len(uniq) == 0:
            logger.warning("camera=%s has no valid projected points", cam_idx)
    return SparseDepth(depth=FeatureMap(depth), coords=tuple(coords), values=tuple(values))


def _order_keys(
    coords: np.ndarray, candidates: np.ndarray, rows: np.ndarray | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Sort key (squared distance, v, u) packed into one int64 per candidate."""
    span_u = int(coords[:, 0].max()) + 1
    span = (int(coords[:, 1].max()) + 1) * span_u
    origin = coords if rows is None else coords[rows]
    delta = coords[candidates] - origin[:, None, :]
    d2 = np.sum(delta * delta, axis=-1)
    pixel_key = coords[candidates, 1] * span_u + coords[candidates, 0]
    return d2 * span + pixel_key, d2


def _pad_rows(idx: np.ndarray, k: int, rows: np.ndarray) -> np.ndarray:
    """Repeat the farthest neighbor up to k columns; a lone point lists itself."""
    if idx.shape[1] >= k:
        return idx[:, :k]
    if idx.shape[1] == 0:
        return np.repeat(rows[:, None], k, axis=1)
    pad = np.repeat(idx[:, -1:], k - idx.shape[1], axis=1)
    return np.concatenate([idx, pad], axis=1)


def brute_force_neighbors(coords: np.ndarray, k: int, rows: np.ndarray | None = None) -> np.ndarray:
    """Exhaustive neighbor oracle with the same ordering and padding rules.

    ``rows`` restricts the queries to a subset of the points (all by default).
    """
    coords = np.asarray(coords, dtype=np.int64)
    n = len(coords)
    rows = np.arange(n) if rows is None else np.asarray(rows, dtype=np.int64)
    if n == 0 or len(rows) == 0:
        return np.zeros((len(rows), k), dtype=np.int64)
    avail = min(k, n - 1)
    chunk = max(1, BRUTE_FORCE_CHUNK // n)
    parts = []
    for start in range(0, len(rows), chunk):
        block = rows[start : start + chunk]
        key, _ = _order_keys(coords, np.broadcast_to(np.arange(n), (len(block), n)), rows=block)
        key[np.arange(len(block)), block] = np.iinfo(np.int64).max
        parts.append(np.argsort(key, axis=1, kind="stable")[:, :avail])
    return _pad_rows(np.concatenate(parts), k, rows)


class PixelKnnIndex:
    """KD-tree over integer pixel coordinates answering exact, tie-ordered k-NN queries."""

    def __init__(self, coords: np.ndarray) -> None:
        self.coords = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
        self.tree = cKDTree(self.coords) if len(self.coords) else None

    def __len__(self) -> int:
        return len(self.coords)

    def query(self, k: int, rows: np.ndarray | None = None) -> np.ndarray:
        coords = self.coords
        n = len(coords)
        rows = np.arange(n) if rows is None else np.asarray(rows, dtype=np.int64)
        if n == 0 or len(rows) == 0:
            return np.zeros((len(rows), k), dtype=np.int64)
        avail = min(k, n - 1)
        if avail == 0:
            return _pad_rows(np.zeros((len(rows), 0), dtype=np.int64), k, rows)

        m = min(n, avail + 1 + TIE_SLACK)
        _, cand = self.tree.query(coords[rows], k=m)
        cand = np.asarray(cand, dtype=np.int64).reshape(len(rows), m)
        key, d2 = _order_keys(coords, cand, rows=rows)
        key[cand == rows[:, None]] = np.iinfo(np.int64).max
        order = np.argsort(key, axis=1, kind="stable")[:, :avail]
        result = np.take_along_axis(cand, order, axis=1)

        if m < n:
            kth = np.take_along_axis(d2, order[:, -1:], axis=1)[:, 0]
            # Rows whose farthest fetched candidate ties the k-th distance may be missing tied points.
            unresolved = np.flatnonzero(d2.max(axis=1) <= kth)
            if len(unresolved):
                balls = self.tree.query_ball_point(coords[rows[unresolved]], r=np.sqrt(kth[unresolved]) + 1e-6)
                for pos, ball in zip(unresolved, balls):
                    ball = np.asarray(ball, dtype=np.int64)
                    rk, _ = _order_keys(coords, ball[None, :], rows=rows[pos : pos + 1])
                    rk = rk[0]
                    rk[ball == rows[pos]] = np.iinfo(np.int64).max
                    result[pos] = ball[np.argsort(rk, kind="stable")[:avail]]
        return _pad_rows(result, k, rows)


def knn_neighbors(sparse: SparseDepth, k: int) -> NeighborTable:
    """K nearest occupied pixels per occupied pixel, via a KD-tree per camera."""
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    indices, neighbor_coords = [], []
    for cam_idx, coords in enumerate(sparse.coords):
        if 0 < len(coords) <= k:
            logger.warning("camera=%s has %s occupied pixels for k=%s; padding neighbor rows", cam_idx, len(coords), k)
        idx = PixelKnnIndex(coords).query(k)
        indices.append(idx)
        neighbor_coords.append(coords[idx] if len(coords) else np.zeros((0, k, 2), dtype=np.int64))
    table = NeighborTable(k=k, neighbor_index=tuple(indices), neighbor_coords=tuple(neighbor_coords))
    return NeighborTable(
        k=k,
        neighbor_index=table.neighbor_index,
        neighbor_coords=table.neighbor_coords,
        neighbor_depth=gather_neighbor_depth(sparse, table),
    )


def gather_neighbor_depth(sparse: SparseDepth, table: NeighborTable) -> FeatureMap:
    """D_K: channel j at an occupied pixel holds the depth at its j-th neighbor."""
    n_cam = sparse.num_cameras
    height, width = sparse.image_size
    if len(table.neighbor_coords) != n_cam:
        raise ConfigError(f"neighbor table covers {len(table.neighbor_coords)} cameras, sparse depth {n_cam}")
    out = np.zeros((n_cam, table.k, height, width), dtype=np.float32)
    for cam_idx, (coords, ncoords) in enumerate(zip(sparse.coords, table.neighbor_coords)):
        if len(coords) == 0:
            continue
        looked_up = sparse.depth.data[cam_idx, 0, ncoords[..., 1], ncoords[..., 0]]
        out[cam_idx][:, coords[:, 1], coords[:, 0]] = looked_up.T
    return FeatureMap(out)


def _run_branch(x: np.ndarray, blocks: Sequence[CbrBlock]) -> np.ndarray:
    for block in blocks:
        x = cbr_array(x, block)
    return x


def _total_stride(blocks: Sequence[CbrBlock]) -> int:
    return int(np.prod([b.stride for b in blocks])) if blocks else 1


def dual_transform(
    d_s: FeatureMap,
    d_k: FeatureMap,
    s_blocks: Sequence[CbrBlock],
    k_blocks: Sequence[CbrBlock],
) -> FeatureMap:
    """Encode D_S and D_K through separate CBR stacks (total stride 8) and concatenate."""
    if d_s.channels != 1:
        raise ConfigError(f"D_S must have one channel, got {d_s.channels}")
    if (d_s.batch, d_s.height, d_s.width) != (d_k.batch, d_k.height, d_k.width):
        raise ConfigError(f"D_S {d_s.shape} and D_K {d_k.shape} disagree")
    if d_s.height % FEATURE_STRIDE or d_s.width % FEATURE_STRIDE:
        raise ConfigError(f"depth maps {d_s.height}x{d_s.width} not divisible by {FEATURE_STRIDE}")
    for name, blocks in (("D_S", s_blocks), ("D_K", k_blocks)):
        if _total_stride(blocks) != FEATURE_STRIDE:
            raise ConfigError(f"{name} branch has total stride {_total_stride(blocks)}, expected {FEATURE_STRIDE}")
    s_feat = _run_branch(d_s.data, s_blocks)
    k_feat = _run_branch(d_k.data, k_blocks)
    expected = (d_s.height // FEATURE_STRIDE, d_s.width // FEATURE_STRIDE)
    if s_feat.shape[2:] != expected or k_feat.shape[2:] != expected:
        raise ConfigError(f"Dual Transform output {s_feat.shape[2:]}/{k_feat.shape[2:]} is not {expected}")
    return FeatureMap(np.concatenate([s_feat, k_feat], axis=1))


def depthnet(
    f_cam: FeatureMap,
    d_sk: FeatureMap,
    blocks: Sequence[CbrBlock],
    split: tuple[int, int],
) -> tuple[FeatureMap, FeatureMap]:
    """Fuse camera features with D_SK; return (depth logits, context)."""
    if len(blocks) != 3:
        raise ConfigError(f"DepthNet uses three CBR sets, got {len(blocks)}")
    if (f_cam.batch, f_cam.height, f_cam.width) != (d_sk.batch, d_sk.height, d_sk.width):
        raise ConfigError(f"camera features {f_cam.shape} and D_SK {d_sk.shape} disagree")
    c_depth, c_ctx = split
    f_dc = _run_branch(np.concatenate([f_cam.data, d_sk.data], axis=1), blocks)
    if c_depth < 1 or c_ctx < 1 or c_depth + c_ctx != f_dc.shape[1]:
        raise ConfigError(f"split {split} does not partition {f_dc.shape[1]} DepthNet channels")
    return FeatureMap(f_dc[:, :c_depth]), FeatureMap(f_dc[:, c_depth:])


def depth_context_product(depth_logits: FeatureMap, context: FeatureMap) -> FeatureMap:
    """Outer product of the softmax depth distribution with context, context-major channels."""
    if (depth_logits.batch, depth_logits.height, depth_logits.width) != (
        context.batch,
        context.height,
        context.width,
    ):
        raise ConfigError(f"depth logits {depth_logits.shape} and context {context.shape} disagree")
    prob = softmax_array(depth_logits.data).astype(np.float32)
    ctx = context.data
    b, c_ctx, h, w = ctx.shape
    out = ctx[:, :, None] * prob[:, None]
    return FeatureMap(out.reshape(b, c_ctx * prob.shape[1], h, w))


def bev_pool(
    f_dc: FeatureMap,
    frustum: FrustumGrid,
    cams: CameraModel | Sequence[CameraModel],
    bev: BevGrid,
) -> FeatureMap:
    """Scatter-sum lifted frustum features into BEV cells.

    ``f_dc`` folds cameras into the batch (B_S * N_C); the N_C cameras of a sample
    are summed into one map. Contributions are summed in ascending cell order, ties
    in (camera, bin, row, column) order.
    """
    if isinstance(cams, CameraModel):
        cams = [cams]
    n_cam = len(cams)
    d = frustum.num_bins
    fh, fw = frustum.feature_size
    if f_dc.channels % d:
        raise ConfigError(f"{f_dc.channels} channels are not a multiple of {d} depth bins")
    if (f_dc.height, f_dc.width) != (fh, fw):
        raise ConfigError(f"feature plane {f_dc.height}x{f_dc.width} differs from frustum {fh}x{fw}")
    if f_dc.batch % n_cam:
        raise ConfigError(f"batch {f_dc.batch} is not a multiple of {n_cam} cameras")
    batch = f_dc.batch // n_cam
    c_ctx = f_dc.channels // d

    ranks = np.concatenate([bev.cell_ranks(frustum.ego_points(cam)).reshape(-1) for cam in cams])
    kept = np.flatnonzero(ranks >= 0)
    order = kept[np.argsort(ranks[kept], kind="stable")]
    sorted_ranks = ranks[order]
    out = np.zeros((batch, c_ctx, bev.height * bev.width), dtype=np.float64)
    if len(order):
        starts = np.flatnonzero(np.r_[True, sorted_ranks[1:] != sorted_ranks[:-1]])
        cells = sorted_ranks[starts]
        x = f_dc.data.reshape(batch, n_cam, c_ctx, d * fh * fw).transpose(0, 2, 1, 3)
        x = x.reshape(batch, c_ctx, n_cam * d * fh * fw)
        out[:, :, cells] = np.add.reduceat(x[:, :, order], starts, axis=2, dtype=np.float64)
    return FeatureMap(out.reshape(batch, c_ctx, bev.height, bev.width))


def depth_errors(
    sparse: SparseDepth,
    table: NeighborTable,
    truth: FeatureMap,
    k: int | None = None,
    cameras: Sequence[int] | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Per occupied pixel with truth > 0: (|D_S - truth|, best over self and first k neighbors)."""
    k = table.k if k is None else k
    if not 0 <= k <= table.k:
        raise ConfigError(f"k={k} exceeds neighbor table width {table.k}")
    if truth.shape != (sparse.num_cameras, 1, *sparse.image_size):
        raise ConfigError(f"truth depth {truth.shape} does not match sparse depth {sparse.depth.shape}")
    e_self, e_best = [], []
    selected = range(sparse.num_cameras) if cameras is None else cameras
    for cam_idx in selected:
        coords, vals, idx = sparse.coords[cam_idx], sparse.values[cam_idx], table.neighbor_index[cam_idx]
        if len(coords) == 0:
            continue
        t = truth.data[cam_idx, 0, coords[:, 1], coords[:, 0]].astype(np.float64)
        seen = t > 0
        own = np.abs(vals.astype(np.float64) - t)
        cand = np.abs(vals[idx[:, :k]].astype(np.float64) - t[:, None])
        best = np.minimum(own, cand.min(axis=1)) if k else own
        e_self.append(own[seen])
        e_best.append(best[seen])
    if not e_self:
        return np.zeros(0), np.zeros(0)
    return np.concatenate(e_self), np.concatenate(e_best)


def depth_error_report(
    sparse: SparseDepth,
    table: NeighborTable,
    truth: FeatureMap,
    k: int | None = None,
    cameras: Sequence[int] | None = None,
) -> DepthErrorReport:
    e_self, e_best = depth_errors(sparse, table, truth, k, cameras)
    if len(e_self) == 0:
        return DepthErrorReport(count=0)
    return DepthErrorReport(
        count=int(len(e_self)),
        median_self=float(np.median(e_self)),
        mean_self=float(np.mean(e_self)),
        median_best=float(np.median(e_best)),
        mean_best=float(np.mean(e_best)),
        win_fraction=float(np.mean(e_best < e_self)),
    )


def synthetic_camera_features(
    batch: int,
    channels: int,
    feature_size: tuple[int, int],
    seed: int,
    truth: FeatureMap | None = None,
) -> FeatureMap:
    """Seeded smooth random camera features; channel 0 carries pooled true depth if given."""
    rng = np.random.default_rng(seed)
    fh, fw = feature_size
    feats = gaussian_filter(rng.normal(size=(batch, channels, fh, fw)), sigma=(0, 0, 1.0, 1.0))
    if truth is not None:
        sh, sw = truth.height // fh, truth.width // fw
        pooled = truth.numpy()[:, 0, : fh * sh, : fw * sw].reshape(batch, fh, sh, fw, sw).mean(axis=(2, 4))
        feats[:, 0] = pooled / 60.0
    return FeatureMap(feats)


@dataclass(frozen=True, eq=False)
class LocalAlignNetwork:
    s_blocks: tuple[CbrBlock, ...]
    k_blocks: tuple[CbrBlock, ...]
    depthnet_blocks: tuple[CbrBlock, ...]
    c_depth: int
    c_ctx: int

    @classmethod
    def seeded(
        cls,
        *,
        k_graph: int,
        c_cam: int,
        c_sk: int,
        c_ctx: int,
        c_depth: int,
        hidden: int = 64,
        seed: int = 0,
    ) -> LocalAlignNetwork:
        half = c_sk // 2

        def branch(in_ch: int, offset: int) -> tuple[CbrBlock, ...]:
            widths = [in_ch, 8, 16, half]
            return tuple(
                seeded_cbr_block(widths[i], widths[i + 1], kernel=3, stride=2, seed=seed + offset + i)
                for i in range(3)
            )

        dn_widths = [c_cam + c_sk, hidden, hidden, c_depth + c_ctx]
        depthnet_blocks = tuple(
            seeded_cbr_block(dn_widths[i], dn_widths[i + 1], kernel=3, stride=1, seed=seed + 20 + i)
            for i in range(3)
        )
        return cls(
            s_blocks=branch(1, 0),
            k_blocks=branch(k_graph, 10),
            depthnet_blocks=depthnet_blocks,
            c_depth=c_depth,
            c_ctx=c_ctx,
        )


@dataclass(frozen=True, eq=False)
class LocalAlignOutput:
    sparse: SparseDepth
    table: NeighborTable
    d_sk: FeatureMap
    depth_logits: FeatureMap
    context: FeatureMap
    camera_bev: FeatureMap


def run_local_align(
    cloud: PointCloud,
    projection_rig: Sequence[CameraModel],
    pooling_rig: Sequence[CameraModel],
    network: LocalAlignNetwork,
    frustum: FrustumGrid,
    bev: BevGrid,
    *,
    k_graph: int,
    f_cam: FeatureMap | None = None,
    seed: int = 0,
) -> LocalAlignOutput:
    """Full LocalAlign forward for one sample of a rig (cameras folded into the batch)."""
    if network.c_depth != frustum.num_bins:
        raise ConfigError(f"DepthNet predicts {network.c_depth} bins, frustum has {frustum.num_bins}")
    sparse = build_sparse_depth([project_points(cloud, cam) for cam in projection_rig], frustum.image_size)
    table = knn_neighbors(sparse, k_graph)
    d_sk = dual_transform(sparse.depth, table.neighbor_depth, network.s_blocks, network.k_blocks)
    if f_cam is None:
        c_cam = network.depthnet_blocks[0].in_channels - d_sk.channels
        f_cam = synthetic_camera_features(sparse.num_cameras, c_cam, frustum.feature_size, seed)
    logits, context = depthnet(f_cam, d_sk, network.depthnet_blocks, (network.c_depth, network.c_ctx))
    f_dc = depth_context_product(logits, context)
    camera_bev = bev_pool(f_dc, frustum, pooling_rig, bev)
    logger.info(
        "LocalAlign forward cameras=%s points=%s occupied=%s bev=%s",
        sparse.num_cameras,
        len(cloud),
        sum(len(c) for c in sparse.coords),
        camera_bev.shape,
    )
    return LocalAlignOutput(sparse, table, d_sk, logits, context, camera_bev)
