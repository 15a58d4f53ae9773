"""Synthetic world: a ground plane, yawed boxes, a camera rig and a spinning LiDAR.

All geometry is analytic so that LiDAR hits and per-pixel depth renders are exact
oracles for the projection pipeline.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from app.errors import ConfigError
from app.geometry import CameraModel, PointCloud, default_rig, rig_from_json, rig_to_json
from app.tensor import FeatureMap

logger = logging.getLogger(__name__)

ELEVATION_BANDS = 32
ELEVATION_RANGE_DEG = (-30.0, 10.0)
RANGE_XY = 54.0
RANGE_Z = (-5.0, 3.0)


@dataclass(frozen=True)
class Box:
    center: tuple[float, float, float]
    size: tuple[float, float, float]
    yaw: float = 0.0

    def __post_init__(self) -> None:
        if len(self.center) != 3 or len(self.size) != 3:
            raise ConfigError("box center and size need three components")
        if min(self.size) <= 0:
            raise ConfigError(f"box sizes must be > 0, got {self.size}")

    def to_local(self, points: np.ndarray) -> np.ndarray:
        c, s = np.cos(self.yaw), np.sin(self.yaw)
        d = np.asarray(points, dtype=np.float64) - np.asarray(self.center)
        return np.stack([c * d[..., 0] + s * d[..., 1], -s * d[..., 0] + c * d[..., 1], d[..., 2]], axis=-1)

    def rotate_to_local(self, dirs: np.ndarray) -> np.ndarray:
        c, s = np.cos(self.yaw), np.sin(self.yaw)
        return np.stack([c * dirs[..., 0] + s * dirs[..., 1], -s * dirs[..., 0] + c * dirs[..., 1], dirs[..., 2]], axis=-1)

    def contains(self, points: np.ndarray, tol: float = 0.0) -> np.ndarray:
        local = np.abs(self.to_local(points))
        half = np.asarray(self.size) / 2.0 + tol
        return np.all(local <= half, axis=-1)

    def surface_distance(self, points: np.ndarray) -> np.ndarray:
        """Unsigned distance to the box surface (for on-face checks)."""
        q = np.abs(self.to_local(points)) - np.asarray(self.size) / 2.0
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(np.max(q, axis=-1), 0.0)
        return np.abs(outside + inside)


@dataclass(frozen=True)
class Scene:
    boxes: tuple[Box, ...] = ()
    rig: tuple[CameraModel, ...] = field(default_factory=default_rig)
    ground: bool = True
    seed: int = 0
    lidar_height: float = 1.8

    def __post_init__(self) -> None:
        if len(self.rig) < 1:
            raise ConfigError("scene rig needs at least one camera")

    @property
    def lidar_origin(self) -> np.ndarray:
        return np.array([0.0, 0.0, self.lidar_height])

    def to_dict(self) -> dict[str, Any]:
        return {
            "seed": self.seed,
            "ground": self.ground,
            "lidar_height": self.lidar_height,
            "boxes": [
                {"center": [float(x) for x in b.center], "size": [float(x) for x in b.size], "yaw": float(b.yaw)}
                for b in self.boxes
            ],
            "rig": rig_to_json(self.rig),
        }

    @classmethod
    def from_dict(cls, payload: dict[str, Any], rig: Sequence[CameraModel] | None = None) -> Scene:
        try:
            boxes = tuple(
                Box(center=tuple(map(float, b["center"])), size=tuple(map(float, b["size"])), yaw=float(b.get("yaw", 0.0)))
                for b in payload.get("boxes", [])
            )
            if rig is None:
                rig = rig_from_json(payload["rig"]) if "rig" in payload else default_rig()
            return cls(
                boxes=boxes,
                rig=tuple(rig),
                ground=bool(payload.get("ground", True)),
                seed=int(payload.get("seed", 0)),
                lidar_height=float(payload.get("lidar_height", 1.8)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"malformed scene description: {exc}") from exc


def random_scene(
    seed: int,
    *,
    num_boxes: int = 8,
    rig: Sequence[CameraModel] | None = None,
    ground: bool = True,
    lidar_height: float = 1.8,
) -> Scene:
    """Car-sized boxes scattered in a 6-40 m annulus around the ego vehicle."""
    rng = np.random.default_rng(seed)
    boxes = []
    for _ in range(num_boxes):
        radius = rng.uniform(6.0, 40.0)
        azimuth = rng.uniform(0.0, 2.0 * np.pi)
        size = (rng.uniform(3.5, 5.0), rng.uniform(1.7, 2.2), rng.uniform(1.4, 2.0))
        center = (radius * np.cos(azimuth), radius * np.sin(azimuth), size[2] / 2.0)
        boxes.append(Box(center=center, size=size, yaw=float(rng.uniform(-np.pi, np.pi))))
    return Scene(
        boxes=tuple(boxes),
        rig=tuple(rig) if rig is not None else default_rig(),
        ground=ground,
        seed=seed,
        lidar_height=lidar_height,
    )


def intersect_rays(scene: Scene, origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """Distance along each ray (in units of ``dirs``) to the first surface; inf on a miss."""
    origins = np.broadcast_to(np.asarray(origins, dtype=np.float64), dirs.shape)
    t_best = np.full(dirs.shape[:-1], np.inf)
    eps = 1e-9

    if scene.ground:
        dz = dirs[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(dz < 0, -origins[..., 2] / dz, np.inf)
        t_best = np.where((t > eps) & (t < t_best), t, t_best)

    for box in scene.boxes:
        o = box.to_local(origins)
        d = box.rotate_to_local(dirs)
        d = np.where(np.abs(d) < 1e-12, 1e-12, d)
        half = np.asarray(box.size) / 2.0
        t1 = (-half - o) / d
        t2 = (half - o) / d
        t_near = np.max(np.minimum(t1, t2), axis=-1)
        t_far = np.min(np.maximum(t1, t2), axis=-1)
        hit = t_far >= np.maximum(t_near, eps)
        t = np.where(t_near > eps, t_near, t_far)
        t_best = np.where(hit & (t < t_best), t, t_best)
    return t_best


def sample_lidar(scene: Scene, rays: int) -> PointCloud:
    """Spin a 32-band LiDAR at ``scene.lidar_origin``; deterministic in ``scene.seed``."""
    if rays < 1:
        raise ConfigError("rays must be >= 1")
    rng = np.random.default_rng(scene.seed)
    idx = np.arange(rays)
    n_az = -(-rays // ELEVATION_BANDS)
    band = idx % ELEVATION_BANDS
    az = 2.0 * np.pi * ((idx // ELEVATION_BANDS) + rng.uniform(0.0, 1.0, size=rays)) / n_az
    elevations = np.radians(np.linspace(*ELEVATION_RANGE_DEG, ELEVATION_BANDS))
    el = elevations[band]
    dirs = np.stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)], axis=-1)

    origin = scene.lidar_origin
    t = intersect_rays(scene, origin, dirs)
    hit = np.isfinite(t)
    points = origin + t[hit, None] * dirs[hit]
    keep = (
        (np.abs(points[:, 0]) <= RANGE_XY)
        & (np.abs(points[:, 1]) <= RANGE_XY)
        & (points[:, 2] >= RANGE_Z[0])
        & (points[:, 2] <= RANGE_Z[1])
    )
    logger.debug("LiDAR sweep seed=%s rays=%s hits=%s kept=%s", scene.seed, rays, int(hit.sum()), int(keep.sum()))
    return PointCloud(points[keep])


def render_true_depth(scene: Scene, cam: CameraModel) -> FeatureMap:
    """Exact per-pixel camera-frame depth z_c; 0 where the pixel sees no surface."""
    vs, us = np.meshgrid(np.arange(cam.height, dtype=np.float64), np.arange(cam.width, dtype=np.float64), indexing="ij")
    rays_cam = cam.pixel_rays(us, vs)
    dirs = rays_cam @ cam.R
    t = intersect_rays(scene, cam.center, dirs)
    depth = np.where(np.isfinite(t), t, 0.0)
    return FeatureMap(depth[None, None])


def render_rig_depth(scene: Scene, rig: Sequence[CameraModel] | None = None) -> FeatureMap:
    cams = scene.rig if rig is None else rig
    return FeatureMap(np.concatenate([render_true_depth(scene, cam).data for cam in cams], axis=0))


def voxelize_points(
    cloud: PointCloud,
    *,
    x_bound: tuple[float, float, float],
    y_bound: tuple[float, float, float],
    z_range: tuple[float, float],
    z_cell: float,
) -> np.ndarray:
    """Occupancy grid (1, 1, Z, H_B, W_B) of LiDAR points; rows follow y, columns x."""
    nx = int(round((x_bound[1] - x_bound[0]) / x_bound[2]))
    ny = int(round((y_bound[1] - y_bound[0]) / y_bound[2]))
    nz = max(1, int(round((z_range[1] - z_range[0]) / z_cell)))
    grid = np.zeros((1, 1, nz, ny, nx), dtype=np.float32)
    if len(cloud) == 0:
        return grid
    p = cloud.points
    ix = np.floor((p[:, 0] - x_bound[0]) / x_bound[2]).astype(np.int64)
    iy = np.floor((p[:, 1] - y_bound[0]) / y_bound[2]).astype(np.int64)
    iz = np.floor((p[:, 2] - z_range[0]) / z_cell).astype(np.int64)
    ok = (ix >= 0) & (ix < nx) & (iy >= 0) & (iy < ny) & (iz >= 0) & (iz < nz)
    grid[0, 0, iz[ok], iy[ok], ix[ok]] = 1.0
    return grid


def voxelize_boxes(
    boxes: Sequence[Box],
    *,
    x_bound: tuple[float, float, float],
    y_bound: tuple[float, float, float],
    z_range: tuple[float, float],
    z_cell: float,
) -> np.ndarray:
    """Occupancy of voxel centres inside any box, same layout as voxelize_points."""
    nx = int(round((x_bound[1] - x_bound[0]) / x_bound[2]))
    ny = int(round((y_bound[1] - y_bound[0]) / y_bound[2]))
    nz = max(1, int(round((z_range[1] - z_range[0]) / z_cell)))
    zc = z_range[0] + (np.arange(nz) + 0.5) * z_cell
    yc = y_bound[0] + (np.arange(ny) + 0.5) * y_bound[2]
    xc = x_bound[0] + (np.arange(nx) + 0.5) * x_bound[2]
    centers = np.stack(np.meshgrid(zc, yc, xc, indexing="ij"), axis=-1)[..., ::-1]
    grid = np.zeros((1, 1, nz, ny, nx), dtype=np.float32)
    for box in boxes:
        grid[0, 0][box.contains(centers)] = 1.0
    return grid
