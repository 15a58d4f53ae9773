from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Any, Sequence

import numpy as np
from scipy.spatial.transform import Rotation

from app.errors import ConfigError
from app.models import NoiseSpec

logger = logging.getLogger(__name__)


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class CameraModel:
    """Pinhole camera; R, T map LiDAR-frame points into the camera frame."""

    K: np.ndarray
    R: np.ndarray
    T: np.ndarray
    h: float = 1.0
    height: int = 256
    width: int = 704
    name: str = "cam"
    _K_inv: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        K = np.asarray(self.K, dtype=np.float64).reshape(3, 3)
        R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        T = np.asarray(self.T, dtype=np.float64).reshape(3)
        if K[0, 0] <= 0 or K[1, 1] <= 0:
            raise ConfigError(f"camera {self.name}: focal lengths must be positive")
        if K[1, 0] != 0 or K[2, 0] != 0 or K[2, 1] != 0 or K[2, 2] != 1 or K[0, 1] != 0:
            raise ConfigError(f"camera {self.name}: K must be upper-triangular, zero-skew, K[2][2]=1")
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-6) or abs(np.linalg.det(R) - 1.0) > 1e-6:
            raise ConfigError(f"camera {self.name}: R is not a proper rotation")
        if not np.all(np.isfinite(T)):
            raise ConfigError(f"camera {self.name}: translation must be finite")
        if self.h <= 0:
            raise ConfigError(f"camera {self.name}: downsample factor must be > 0")
        if self.height < 1 or self.width < 1:
            raise ConfigError(f"camera {self.name}: image size must be positive")
        object.__setattr__(self, "K", _frozen(K))
        object.__setattr__(self, "R", _frozen(R))
        object.__setattr__(self, "T", _frozen(T))
        object.__setattr__(self, "_K_inv", _frozen(np.linalg.inv(K)))

    @property
    def image_size(self) -> tuple[int, int]:
        return self.height, self.width

    @property
    def center(self) -> np.ndarray:
        """Optical centre in the LiDAR frame."""
        return -self.R.T @ self.T

    def pixel_rays(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Camera-frame ray directions with unit depth (z = 1) for pixels (u, v)."""
        pix = np.stack([np.asarray(u, float) / self.h, np.asarray(v, float) / self.h, np.ones(np.shape(u))], axis=-1)
        return pix @ self._K_inv.T

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "K": [float(x) for x in self.K.reshape(-1)],
            "R": [float(x) for x in self.R.reshape(-1)],
            "T": [float(x) for x in self.T],
            "h": float(self.h),
            "H": int(self.height),
            "W": int(self.width),
        }

    @classmethod
    def from_dict(cls, payload: dict[str, Any]) -> CameraModel:
        try:
            return cls(
                K=np.asarray(payload["K"], dtype=np.float64).reshape(3, 3),
                R=np.asarray(payload["R"], dtype=np.float64).reshape(3, 3),
                T=np.asarray(payload["T"], dtype=np.float64),
                h=float(payload.get("h", 1.0)),
                height=int(payload["H"]),
                width=int(payload["W"]),
                name=str(payload.get("name", "cam")),
            )
        except (KeyError, ValueError, TypeError) as exc:
            raise ConfigError(f"malformed camera entry: {exc}") from exc


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray

    def __post_init__(self) -> None:
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise ConfigError("point cloud holds non-finite coordinates")
        object.__setattr__(self, "points", _frozen(pts))

    def __len__(self) -> int:
        return self.points.shape[0]

    def as_tensor(self) -> np.ndarray:
        """(1, 3, 1, N) layout used by the GBEV artifact."""
        return self.points.T.reshape(1, 3, 1, -1).astype(np.float32)

    @classmethod
    def from_tensor(cls, arr: np.ndarray) -> PointCloud:
        if arr.ndim != 4 or arr.shape[:3] != (1, 3, 1):
            raise ConfigError(f"point cloud tensor must be (1, 3, 1, N), got {arr.shape}")
        return cls(arr.reshape(3, -1).T.astype(np.float64))


@dataclass(frozen=True, eq=False)
class PixelProjection:
    u: np.ndarray
    v: np.ndarray
    z: np.ndarray
    valid: np.ndarray
    image_size: tuple[int, int]

    @property
    def pixel_u(self) -> np.ndarray:
        return round_half_away(self.u)

    @property
    def pixel_v(self) -> np.ndarray:
        return round_half_away(self.v)


def round_half_away(x: np.ndarray) -> np.ndarray:
    x = np.nan_to_num(np.asarray(x, dtype=np.float64), nan=-1.0, posinf=-1.0, neginf=-1.0)
    return (np.sign(x) * np.floor(np.abs(x) + 0.5)).astype(np.int64)


def project_points(cloud: PointCloud, cam: CameraModel) -> PixelProjection:
    q = cloud.points @ cam.R.T + cam.T
    z = q[:, 2]
    front = z > 0
    safe_z = np.where(front, z, 1.0)
    fx, fy, cx, cy = cam.K[0, 0], cam.K[1, 1], cam.K[0, 2], cam.K[1, 2]
    u = cam.h * (fx * q[:, 0] / safe_z + cx)
    v = cam.h * (fy * q[:, 1] / safe_z + cy)
    ru, rv = round_half_away(u), round_half_away(v)
    valid = front & (ru >= 0) & (ru < cam.width) & (rv >= 0) & (rv < cam.height)
    return PixelProjection(u=u, v=v, z=z, valid=valid, image_size=cam.image_size)


def back_project(u: np.ndarray, v: np.ndarray, z: np.ndarray, cam: CameraModel) -> np.ndarray:
    """Inverse of project_points for the continuous (u, v, z_c) triple."""
    q = cam.pixel_rays(u, v) * np.asarray(z, dtype=np.float64)[..., None]
    return (q - cam.T) @ cam.R


def rotation_angle_deg(R_a: np.ndarray, R_b: np.ndarray) -> float:
    return float(np.degrees(Rotation.from_matrix(R_a.T @ R_b).magnitude()))


def _orthonormalize(R: np.ndarray) -> np.ndarray:
    U, _, Vt = np.linalg.svd(R)
    out = U @ Vt
    if np.linalg.det(out) < 0:
        U[:, -1] *= -1
        out = U @ Vt
    return out


def perturb_extrinsics(cam: CameraModel, noise: NoiseSpec, seed: int) -> CameraModel:
    """Compose R with a random small rotation and jitter T; deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.normal(0.0, np.radians(noise.sigma_rot_deg)) if noise.sigma_rot_deg > 0 else 0.0
    shift = rng.normal(0.0, noise.sigma_trans_m, size=3) if noise.sigma_trans_m > 0 else np.zeros(3)

    R = cam.R
    if angle != 0.0:
        R = _orthonormalize(Rotation.from_rotvec(axis * angle).as_matrix() @ cam.R)
    return replace(cam, R=R, T=cam.T + shift)


def look_at_camera(
    heading_rad: float,
    *,
    position: Sequence[float],
    focal: float,
    height: int,
    width: int,
    h: float = 1.0,
    name: str = "cam",
) -> CameraModel:
    """Horizontal camera looking along ``heading_rad`` (x forward, y left, z up frame)."""
    c, s = np.cos(heading_rad), np.sin(heading_rad)
    R = np.array(
        [
            [s, -c, 0.0],
            [0.0, 0.0, -1.0],
            [c, s, 0.0],
        ]
    )
    center = np.asarray(position, dtype=np.float64)
    K = np.array([[focal, 0.0, width / 2.0], [0.0, focal, height / 2.0], [0.0, 0.0, 1.0]])
    return CameraModel(K=K, R=R, T=-R @ center, h=h, height=height, width=width, name=name)


def default_rig(
    *,
    height: int = 256,
    width: int = 704,
    focal: float = 500.0,
    h: float = 1.0,
    mount_height: float = 1.5,
    mount_radius: float = 0.5,
    num_cameras: int = 6,
) -> tuple[CameraModel, ...]:
    """Surround rig with cameras at evenly spaced headings (60 degrees for six)."""
    if num_cameras < 1:
        raise ConfigError("a rig needs at least one camera")
    cams = []
    for i in range(num_cameras):
        heading = 2.0 * np.pi * i / num_cameras
        pos = (mount_radius * np.cos(heading), mount_radius * np.sin(heading), mount_height)
        cams.append(
            look_at_camera(heading, position=pos, focal=focal, height=height, width=width, h=h, name=f"cam{i}")
        )
    return tuple(cams)


def rig_to_json(rig: Sequence[CameraModel]) -> dict[str, Any]:
    return {"cameras": [cam.to_dict() for cam in rig]}


def rig_from_json(payload: dict[str, Any]) -> tuple[CameraModel, ...]:
    cams = payload.get("cameras") if isinstance(payload, dict) else None
    if not cams:
        raise ConfigError("camera rig must contain a non-empty 'cameras' list")
    return tuple(CameraModel.from_dict(c) for c in cams)
