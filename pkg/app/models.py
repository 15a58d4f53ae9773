from __future__ import annotations

from pathlib import Path
from typing import Any, Literal

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class NoiseSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    sigma_rot_deg: float = Field(default=1.0, ge=0.0)
    sigma_trans_m: float = Field(default=0.1, ge=0.0)
    bev_shift_max: int = Field(default=4, ge=0)

    @classmethod
    def zero(cls) -> NoiseSpec:
        return cls(sigma_rot_deg=0.0, sigma_trans_m=0.0, bev_shift_max=0)


class SceneSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    seed: int = Field(default=0, ge=0)
    num_boxes: int = Field(default=8, ge=0, le=256)
    rays: int = Field(default=32 * 1024, ge=1)
    ground: bool = True
    lidar_height: float = Field(default=1.8, gt=0.0)
    rig_file: str | None = None
    scene_file: str | None = None

    @field_validator("rig_file", "scene_file")
    @classmethod
    def _must_exist(cls, value: str | None) -> str | None:
        if value is not None and not Path(value).is_file():
            raise ValueError(f"referenced file does not exist: {value}")
        return value


class GeometrySettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    image_height: int = Field(default=256, ge=8)
    image_width: int = Field(default=704, ge=8)
    downsample: float = Field(default=1.0, gt=0.0)
    focal_length: float = Field(default=500.0, gt=0.0)
    feature_stride: int = Field(default=8, ge=1)
    depth_bound: tuple[float, float, float] = (1.0, 60.0, 0.5)
    x_bound: tuple[float, float, float] = (-54.0, 54.0, 0.3)
    y_bound: tuple[float, float, float] = (-54.0, 54.0, 0.3)
    z_bound: tuple[float, float] = (-10.0, 10.0)
    voxel_size: tuple[float, float, float] = (0.075, 0.075, 0.2)
    point_cloud_range: tuple[float, float, float, float, float, float] = (-54.0, -54.0, -5.0, 54.0, 54.0, 3.0)

    @model_validator(mode="after")
    def _check_consistency(self) -> GeometrySettings:
        stride = self.feature_stride
        if self.image_height % stride or self.image_width % stride:
            raise ValueError(f"image size {self.image_height}x{self.image_width} not divisible by {stride}")
        lo, hi, step = self.depth_bound
        if not (0 < lo < hi) or step <= 0:
            raise ValueError(f"invalid depth bound {self.depth_bound}")
        for name, (lo, hi, cell) in (("x_bound", self.x_bound), ("y_bound", self.y_bound)):
            cells = (hi - lo) / cell
            if cell <= 0 or hi <= lo or abs(cells - round(cells)) > 1e-6:
                raise ValueError(f"{name} extent is not an integer number of cells: {(lo, hi, cell)}")
        if self.z_bound[1] <= self.z_bound[0]:
            raise ValueError(f"invalid z bound {self.z_bound}")
        return self


class ChannelSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    c_cam: int = Field(default=64, ge=1)
    c_sk: int = Field(default=32, ge=2)
    c_ctx: int = Field(default=80, ge=1)
    c_lidar: int = Field(default=8, ge=1)

    @field_validator("c_sk")
    @classmethod
    def _even(cls, value: int) -> int:
        if value % 2:
            raise ValueError("c_sk must be even (split across the two Dual Transform branches)")
        return value


class LocalAlignSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    k_graph: int = Field(default=8, ge=1)
    sweep: bool = False
    sweep_k: list[int] = Field(default_factory=lambda: [5, 8, 12, 16, 25])

    @field_validator("sweep_k")
    @classmethod
    def _positive_sorted(cls, value: list[int]) -> list[int]:
        if not value or any(k < 1 for k in value):
            raise ValueError("sweep_k must be a non-empty list of positive integers")
        return sorted(set(value))


class OptimizerSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    learning_rate: float = Field(default=0.1, gt=0.0)
    iterations: int = Field(default=300, ge=1)
    clamp: float = Field(default=8.0, gt=0.0)
    stall_patience: int = Field(default=50, ge=1)
    max_halvings: int = Field(default=10, ge=0)
    gradient_smoothing: float = Field(default=6.0, ge=0.0)
    grad_tolerance: float = Field(default=1e-10, ge=0.0)
    loss_tolerance: float = Field(default=1e-10, ge=0.0)


class GlobalAlignSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    optimizer: OptimizerSettings = Field(default_factory=OptimizerSettings)
    features: Literal["synthetic", "scene", "localalign"] = "synthetic"
    window: int = Field(default=64, ge=16)
    feature_sigma: float = Field(default=4.0, gt=0.0)
    feature_amplitude: float = Field(default=0.4, gt=0.0, le=0.5)
    margin: int = Field(default=8, ge=0)
    trials: int = Field(default=1, ge=1)
    shift: tuple[int, int] | None = None
    use_offset_head: bool = False
    training: bool = True


class BenchSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    repetitions: int = Field(default=5, ge=5)
    cameras: int = Field(default=1, ge=1)
    knn_sizes: list[int] = Field(default_factory=lambda: [1_000, 10_000, 100_000])
    knn_queries: int = Field(default=256, ge=1)
    knn_extent: int = Field(default=2048, ge=64)


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    scene: SceneSettings = Field(default_factory=SceneSettings)
    noise: NoiseSpec = Field(default_factory=NoiseSpec)
    geometry: GeometrySettings = Field(default_factory=GeometrySettings)
    channels: ChannelSettings = Field(default_factory=ChannelSettings)
    local_align: LocalAlignSettings = Field(default_factory=LocalAlignSettings)
    global_align: GlobalAlignSettings = Field(default_factory=GlobalAlignSettings)
    bench: BenchSettings = Field(default_factory=BenchSettings)
    output_dir: str = "tmp_runtime/runs/default"


class DepthErrorReport(BaseModel):
    count: int
    median_self: float | None = None
    mean_self: float | None = None
    median_best: float | None = None
    mean_best: float | None = None
    win_fraction: float | None = None


class RecoveryReport(BaseModel):
    seed: int
    injected_u: int
    injected_v: int
    recovered_u: float
    recovered_v: float
    initial_loss: float
    final_loss: float
    iters: int
    stalled: bool
    converged: bool = False
    loss_log: str | None = None


class WorkflowRequest(BaseModel):
    config: dict[str, Any] = Field(default_factory=dict)
    seed: int | None = Field(default=None, ge=0)
    out: str | None = Field(default=None, min_length=1, max_length=500)
    sweep_k: bool = False
    k_graph: int | None = Field(default=None, ge=1)
    noise_rot_deg: float | None = Field(default=None, ge=0.0)
    noise_trans_m: float | None = Field(default=None, ge=0.0)
    bev_shift_max: int | None = Field(default=None, ge=0)


class RunResponse(BaseModel):
    run_id: str
    command: str
    summary: dict[str, Any]


class JobStartResponse(BaseModel):
    job_id: str
    status: str
    message: str


class JobStatusResponse(BaseModel):
    job_id: str
    status: str
    message: str | None = None
    result: dict[str, Any] | None = None
    error: str | None = None


class RunRecord(BaseModel):
    run_id: str
    command: str
    output_dir: str
    config: dict[str, Any]
    summary: dict[str, Any]
    updated_at: str


class RunListResponse(BaseModel):
    total: int
    items: list[RunRecord] = Field(default_factory=list)
