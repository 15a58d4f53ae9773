"""End-to-end commands: simulate, localalign-eval, globalalign-recover, bench.

Each command takes a validated ``RunConfig``, writes its artifacts under
``config.output_dir`` and returns the summary dict that is also written to disk.
"""

from __future__ import annotations

import logging
import time
import uuid
from pathlib import Path
from statistics import median
from typing import Any, Callable

import numpy as np
from pydantic import ValidationError

from app.artifacts import (
    ensure_dir,
    read_feature_map,
    read_json,
    read_tensor,
    write_csv,
    write_json,
    write_jsonl,
    write_tensor,
)
from app.errors import ArtifactIOError, ConfigError
from app.geometry import (
    CameraModel,
    PointCloud,
    default_rig,
    perturb_extrinsics,
    project_points,
    rig_from_json,
    rig_to_json,
    rotation_angle_deg,
)
from app.global_align import (
    TrialResult,
    density_features,
    flatten_lidar_bev,
    offset_noise_schedule,
    run_recovery_trial,
    smooth_random_features,
)
from app.local_align import (
    BevGrid,
    FrustumGrid,
    LocalAlignNetwork,
    PixelKnnIndex,
    brute_force_neighbors,
    bev_pool,
    build_sparse_depth,
    depth_context_product,
    depth_error_report,
    depthnet,
    dual_transform,
    knn_neighbors,
    run_local_align,
    synthetic_camera_features,
)
from app.models import RecoveryReport, RunConfig
from app.scene import Scene, random_scene, render_rig_depth, sample_lidar, voxelize_points
from app.storage import RunStore
from app.tensor import FeatureMap

logger = logging.getLogger(__name__)

SCENE_FILE = "scene.json"
RIG_FILE = "rig.json"
CLOUD_FILE = "cloud.gbev"
LIDAR_BEV_FILE = "lidar_bev.gbev"
CAMERA_BEV_FILE = "camera_bev.gbev"


def _depth_file(idx: int) -> str:
    return f"depth_cam{idx}.gbev"


def _merge(base: dict[str, Any], extra: dict[str, Any]) -> dict[str, Any]:
    out = dict(base)
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def load_run_config(
    path: str | Path | None = None,
    *,
    overrides: dict[str, Any] | None = None,
    seed: int | None = None,
    out: str | None = None,
    k_graph: int | None = None,
    sweep_k: bool = False,
    noise_rot_deg: float | None = None,
    noise_trans_m: float | None = None,
    bev_shift_max: int | None = None,
) -> RunConfig:
    """JSON config file, then ``overrides``, then individual flags (last wins)."""
    payload: dict[str, Any] = {}
    if path is not None:
        if not Path(path).is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            payload = read_json(path)
        except ArtifactIOError as exc:
            raise ConfigError(str(exc)) from exc
        if not isinstance(payload, dict):
            raise ConfigError(f"config file must hold a JSON object: {path}")
    if overrides:
        payload = _merge(payload, overrides)

    flags: dict[str, Any] = {}
    if seed is not None:
        flags.setdefault("scene", {})["seed"] = seed
    if out is not None:
        flags["output_dir"] = out
    if k_graph is not None:
        flags.setdefault("local_align", {})["k_graph"] = k_graph
    if sweep_k:
        flags.setdefault("local_align", {})["sweep"] = True
    noise = {
        key: value
        for key, value in (
            ("sigma_rot_deg", noise_rot_deg),
            ("sigma_trans_m", noise_trans_m),
            ("bev_shift_max", bev_shift_max),
        )
        if value is not None
    }
    if noise:
        flags["noise"] = noise
    payload = _merge(payload, flags)

    try:
        return RunConfig.model_validate(payload)
    except ValidationError as exc:
        raise ConfigError(f"invalid run config: {exc}") from exc


def _rig(config: RunConfig) -> tuple[CameraModel, ...]:
    if config.scene.rig_file:
        return rig_from_json(read_json(config.scene.rig_file))
    geo = config.geometry
    return default_rig(height=geo.image_height, width=geo.image_width, focal=geo.focal_length, h=geo.downsample)


def _scene(config: RunConfig) -> Scene:
    rig = _rig(config)
    if config.scene.scene_file:
        return Scene.from_dict(read_json(config.scene.scene_file), rig=rig if config.scene.rig_file else None)
    return random_scene(
        config.scene.seed,
        num_boxes=config.scene.num_boxes,
        rig=rig,
        ground=config.scene.ground,
        lidar_height=config.scene.lidar_height,
    )


def _lidar_bev(cloud: PointCloud, config: RunConfig) -> FeatureMap:
    geo = config.geometry
    pcr = geo.point_cloud_range
    voxels = voxelize_points(
        cloud, x_bound=geo.x_bound, y_bound=geo.y_bound, z_range=(pcr[2], pcr[5]), z_cell=geo.voxel_size[2]
    )
    return flatten_lidar_bev(voxels, BevGrid.from_settings(geo))


def _camera_seed(seed: int, idx: int) -> int:
    return seed * 1009 + idx


def cmd_simulate(config: RunConfig) -> dict[str, Any]:
    out = ensure_dir(config.output_dir)
    scene = _scene(config)
    cloud = sample_lidar(scene, config.scene.rays)
    depth = render_rig_depth(scene)

    write_json(out / SCENE_FILE, scene.to_dict())
    write_json(out / RIG_FILE, rig_to_json(scene.rig))
    write_tensor(out / CLOUD_FILE, cloud.as_tensor())
    for idx in range(depth.batch):
        write_tensor(out / _depth_file(idx), depth.data[idx : idx + 1])
    lidar_bev = _lidar_bev(cloud, config)
    write_tensor(out / LIDAR_BEV_FILE, lidar_bev)

    summary = {
        "command": "simulate",
        "seed": config.scene.seed,
        "num_points": len(cloud),
        "num_cameras": depth.batch,
        "num_boxes": len(scene.boxes),
        "depth_nonzero_fraction": [float(np.mean(depth.data[i] > 0)) for i in range(depth.batch)],
        "lidar_bev_occupied_cells": int(np.count_nonzero(lidar_bev.data)),
        "artifacts": sorted(
            [SCENE_FILE, RIG_FILE, CLOUD_FILE, LIDAR_BEV_FILE] + [_depth_file(i) for i in range(depth.batch)]
        ),
    }
    write_json(out / "simulate.json", summary)
    logger.info("simulate seed=%s points=%s cameras=%s out=%s", config.scene.seed, len(cloud), depth.batch, out)
    return summary


def _require(path: Path) -> Path:
    if not path.is_file():
        raise ArtifactIOError("missing artifact, run `simulate` with the same --out first", str(path))
    return path


def _load_simulation(out: Path) -> tuple[tuple[CameraModel, ...], PointCloud, FeatureMap]:
    rig = rig_from_json(read_json(_require(out / RIG_FILE)))
    _require(out / SCENE_FILE)
    cloud = PointCloud.from_tensor(read_tensor(_require(out / CLOUD_FILE)))
    truth = np.concatenate([read_feature_map(_require(out / _depth_file(i))).data for i in range(len(rig))], axis=0)
    return rig, cloud, FeatureMap(truth)


def _camera_bev(
    config: RunConfig,
    cloud: PointCloud,
    rig: tuple[CameraModel, ...],
    perturbed: list[CameraModel],
    truth: FeatureMap,
) -> FeatureMap:
    """Camera BEV from the full LocalAlign forward: miscalibrated projection, nominal pooling."""
    geo, ch = config.geometry, config.channels
    frustum = FrustumGrid.build(rig[0].image_size, geo.depth_bound, geo.feature_stride)
    k = config.local_align.k_graph
    seed = config.scene.seed
    network = LocalAlignNetwork.seeded(
        k_graph=k, c_cam=ch.c_cam, c_sk=ch.c_sk, c_ctx=ch.c_ctx, c_depth=frustum.num_bins, seed=seed
    )
    f_cam = synthetic_camera_features(len(rig), ch.c_cam, frustum.feature_size, seed, truth=truth)
    output = run_local_align(
        cloud, perturbed, rig, network, frustum, BevGrid.from_settings(geo), k_graph=k, f_cam=f_cam, seed=seed
    )
    return output.camera_bev


def _report_row(k: int, report: dict[str, Any]) -> list[Any]:
    return [k] + [report.get(key) for key in ("count", "median_self", "median_best", "mean_self", "mean_best", "win_fraction")]


def cmd_localalign_eval(config: RunConfig) -> dict[str, Any]:
    out = Path(config.output_dir)
    rig, cloud, truth = _load_simulation(out)
    seed = config.scene.seed

    perturbed = [perturb_extrinsics(cam, config.noise, _camera_seed(seed, i)) for i, cam in enumerate(rig)]
    sparse = build_sparse_depth([project_points(cloud, cam) for cam in perturbed], rig[0].image_size)
    ks = config.local_align.sweep_k if config.local_align.sweep else [config.local_align.k_graph]
    table = knn_neighbors(sparse, max(ks + [config.local_align.k_graph]))

    sweep = []
    for k in ks:
        overall = depth_error_report(sparse, table, truth, k)
        per_camera = [depth_error_report(sparse, table, truth, k, cameras=[i]).model_dump() for i in range(len(rig))]
        sweep.append({"k": k, "overall": overall.model_dump(), "per_camera": per_camera})
        logger.info("localalign k=%s median_self=%s median_best=%s", k, overall.median_self, overall.median_best)

    summary = {
        "command": "localalign-eval",
        "seed": seed,
        "noise": config.noise.model_dump(),
        "k_graph": config.local_align.k_graph,
        "perturbation": [
            {
                "camera": cam.name,
                "rot_deg": rotation_angle_deg(cam.R, p.R),
                "trans_m": float(np.linalg.norm(p.T - cam.T)),
            }
            for cam, p in zip(rig, perturbed)
        ],
        "occupied_pixels": [int(len(c)) for c in sparse.coords],
        "self_only": depth_error_report(sparse, table, truth, 0).model_dump(),
        "sweep": sweep,
    }
    camera_bev = _camera_bev(config, cloud, rig, perturbed, truth)
    write_tensor(out / CAMERA_BEV_FILE, camera_bev)
    summary["camera_bev"] = {
        "shape": list(camera_bev.shape),
        "occupied_cells": int(np.count_nonzero(camera_bev.data.sum(axis=1))),
        "total": float(camera_bev.numpy().sum()),
    }
    write_json(out / "neighbors.json", table.to_json())
    write_csv(
        out / "localalign_sweep.csv",
        ["k", "count", "median_self", "median_best", "mean_self", "mean_best", "win_fraction"],
        [_report_row(entry["k"], entry["overall"]) for entry in sweep],
    )
    write_json(out / "localalign_metrics.json", summary)
    return summary


def _alignment_features(config: RunConfig, seed: int, features: str | None = None) -> FeatureMap:
    """LiDAR-side features for a recovery trial: synthetic, or a window of a simulated BEV."""
    ga = config.global_align
    window, channels = ga.window, config.channels.c_lidar
    kind = features or ga.features
    if kind == "synthetic":
        return smooth_random_features(
            (1, channels, window, window), sigma=ga.feature_sigma, amplitude=ga.feature_amplitude, seed=seed
        )
    source = CAMERA_BEV_FILE if kind == "localalign" else LIDAR_BEV_FILE
    bev = read_feature_map(_require(Path(config.output_dir) / source))
    if bev.height < window or bev.width < window:
        raise ConfigError(f"window {window} exceeds the {source} grid {bev.height}x{bev.width}")
    top, left = (bev.height - window) // 2, (bev.width - window) // 2
    crop = bev.numpy()[:, :, top : top + window, left : left + window].sum(axis=1, keepdims=True)
    return density_features(crop, channels, sigma=ga.feature_sigma, amplitude=ga.feature_amplitude)


def _trial_report(trial: TrialResult, loss_log: str) -> RecoveryReport:
    return RecoveryReport(
        seed=trial.seed,
        injected_u=trial.shift[0],
        injected_v=trial.shift[1],
        recovered_u=trial.recovered[0],
        recovered_v=trial.recovered[1],
        initial_loss=trial.result.initial_loss,
        final_loss=trial.result.final_loss,
        iters=trial.result.iterations,
        stalled=trial.result.stalled,
        converged=trial.result.converged,
        loss_log=loss_log,
    )


def cmd_globalalign_recover(config: RunConfig) -> dict[str, Any]:
    out = ensure_dir(config.output_dir)
    ga = config.global_align
    noise = offset_noise_schedule(1.0, noise=config.noise, training=ga.training)

    reports: list[RecoveryReport] = []
    unaligned: list[float] = []
    for t in range(ga.trials):
        trial_seed = config.scene.seed + t
        trial = run_recovery_trial(_alignment_features(config, trial_seed), ga, noise, trial_seed)
        log_name = f"globalalign_loss_trial{t}.jsonl"
        write_jsonl(out / log_name, trial.result.log)
        write_tensor(out / f"offsets_trial{t}.gbev", trial.result.offsets)
        reports.append(_trial_report(trial, log_name))
        unaligned.append(trial.unaligned_loss)

    first = reports[0]
    err_u = [abs(r.recovered_u - r.injected_u) for r in reports]
    err_v = [abs(r.recovered_v - r.injected_v) for r in reports]
    summary = {
        "command": "globalalign-recover",
        "seed": config.scene.seed,
        "injected_u": first.injected_u,
        "injected_v": first.injected_v,
        "recovered_u": first.recovered_u,
        "recovered_v": first.recovered_v,
        "final_loss": first.final_loss,
        "iters": first.iters,
        "stalled": first.stalled,
        "converged": first.converged,
        "loss_log": first.loss_log,
        "unaligned_loss": unaligned[0],
        "aligned_loss": first.final_loss,
        "median_error_u": float(median(err_u)),
        "median_error_v": float(median(err_v)),
        "within_half_cell": float(np.mean([eu <= 0.5 and ev <= 0.5 for eu, ev in zip(err_u, err_v)])),
        "trials": [r.model_dump() for r in reports],
    }
    write_csv(
        out / "globalalign_trials.csv",
        ["seed", "injected_u", "injected_v", "recovered_u", "recovered_v", "initial_loss", "final_loss", "iters"],
        [
            [r.seed, r.injected_u, r.injected_v, r.recovered_u, r.recovered_v, r.initial_loss, r.final_loss, r.iters]
            for r in reports
        ],
    )
    write_json(out / "globalalign_metrics.json", summary)
    return summary


def _time_stage(fn: Callable[[], Any], repetitions: int) -> tuple[dict[str, Any], Any]:
    result = fn()
    runs = []
    for _ in range(repetitions):
        start = time.perf_counter()
        result = fn()
        runs.append(time.perf_counter() - start)
    return {"median_s": float(median(runs)), "runs_s": runs}, result


def knn_scaling(config: RunConfig) -> list[dict[str, Any]]:
    """Time KD-tree build and query against the brute-force oracle at each configured size."""
    bench = config.bench
    rng = np.random.default_rng(config.scene.seed)
    k = config.local_align.k_graph
    rows_out = []
    for n in bench.knn_sizes:
        flat = rng.choice(bench.knn_extent * bench.knn_extent, size=n, replace=False)
        coords = np.stack([flat % bench.knn_extent, flat // bench.knn_extent], axis=1).astype(np.int64)
        rows = rng.choice(n, size=min(bench.knn_queries, n), replace=False)
        build, index = _time_stage(lambda: PixelKnnIndex(coords), bench.repetitions)
        query, _ = _time_stage(lambda: index.query(k, rows), bench.repetitions)
        brute, _ = _time_stage(lambda: brute_force_neighbors(coords, k, rows), bench.repetitions)
        rows_out.append(
            {
                "n": int(n),
                "queries": int(len(rows)),
                "build_s": build["median_s"],
                "query_s": query["median_s"],
                "brute_s": brute["median_s"],
                "ratio": query["median_s"] / brute["median_s"] if brute["median_s"] > 0 else None,
            }
        )
    return rows_out


def cmd_bench(config: RunConfig) -> dict[str, Any]:
    out = ensure_dir(config.output_dir)
    reps = config.bench.repetitions
    geo, ch = config.geometry, config.channels
    k = config.local_align.k_graph
    seed = config.scene.seed

    scene = _scene(config)
    rig = scene.rig[: config.bench.cameras]
    cloud = sample_lidar(scene, config.scene.rays)
    perturbed = [perturb_extrinsics(cam, config.noise, _camera_seed(seed, i)) for i, cam in enumerate(rig)]
    frustum = FrustumGrid.build(rig[0].image_size, geo.depth_bound, geo.feature_stride)
    bev = BevGrid.from_settings(geo)
    network = LocalAlignNetwork.seeded(
        k_graph=k, c_cam=ch.c_cam, c_sk=ch.c_sk, c_ctx=ch.c_ctx, c_depth=frustum.num_bins, seed=seed
    )
    f_cam = synthetic_camera_features(len(rig), ch.c_cam, frustum.feature_size, seed)

    stages: dict[str, Any] = {}
    stages["projection"], sparse = _time_stage(
        lambda: build_sparse_depth([project_points(cloud, cam) for cam in perturbed], frustum.image_size), reps
    )
    stages["knn"], table = _time_stage(lambda: knn_neighbors(sparse, k), reps)

    def lift() -> FeatureMap:
        d_sk = dual_transform(sparse.depth, table.neighbor_depth, network.s_blocks, network.k_blocks)
        logits, context = depthnet(f_cam, d_sk, network.depthnet_blocks, (network.c_depth, network.c_ctx))
        return depth_context_product(logits, context)

    stages["dual_depthnet"], f_dc = _time_stage(lift, reps)
    stages["bev_pool"], _ = _time_stage(lambda: bev_pool(f_dc, frustum, rig, bev), reps)
    f_l = _alignment_features(config, seed, features="synthetic")
    stages["optimize"], _ = _time_stage(lambda: run_recovery_trial(f_l, config.global_align, config.noise, seed), reps)

    scaling = knn_scaling(config)
    summary = {
        "command": "bench",
        "seed": seed,
        "repetitions": reps,
        "cameras": len(rig),
        "stages": stages,
        "knn_scaling": scaling,
    }
    write_json(out / "bench.json", summary)
    logger.info("bench %s", {name: round(s["median_s"], 4) for name, s in stages.items()})
    return summary


COMMANDS: dict[str, Callable[[RunConfig], dict[str, Any]]] = {
    "simulate": cmd_simulate,
    "localalign-eval": cmd_localalign_eval,
    "globalalign-recover": cmd_globalalign_recover,
    "bench": cmd_bench,
}


def run_command(command: str, config: RunConfig, store: RunStore | None = None) -> tuple[str, dict[str, Any]]:
    """Dispatch ``command`` and record the run when a store is given."""
    if command not in COMMANDS:
        raise ConfigError(f"unknown command: {command}")
    run_id = f"{command}-{uuid.uuid4().hex[:12]}"
    summary = COMMANDS[command](config)
    if store is not None:
        store.record(run_id, command, config, summary)
    return run_id, summary
