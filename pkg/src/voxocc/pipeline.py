"""End-to-end pipeline: load -> lift -> fuse -> instances -> voxelize -> refine -> write."""

from __future__ import annotations

import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ingest, instances, lift, metrics, refine, taxonomy as tx, voxelize
from .config import PipelineConfig

log = logging.getLogger(__name__)

WORKERS_ENV = "VOXOCC_WORKERS"


class PipelineError(RuntimeError):
    def __init__(self, stage: str, sample, cause: Exception):
        super().__init__(f"sample {sample}, stage {stage}: {cause}")
        self.stage = stage
        self.sample = sample
        self.cause = cause


def resolve_workers(workers=None) -> int:
    if workers is not None:
        return max(1, int(workers))
    env = os.environ.get(WORKERS_ENV)
    return max(1, int(env)) if env else 1


def resolve_taxonomy(config: PipelineConfig, dataset_root=None):
    """Config path wins; else the dataset's taxonomy.yaml; else the built-in default."""
    if config.taxonomy_path:
        return tx.load_taxonomy(config.taxonomy_path)
    if dataset_root is not None:
        candidate = Path(dataset_root) / "taxonomy.yaml"
        if candidate.is_file():
            return tx.load_taxonomy(candidate)
    taxonomy = tx.default_taxonomy()
    return taxonomy, tx.default_rules(taxonomy)


@dataclass
class SampleStats:
    t: int
    points_lifted: int = 0
    points_skipped: int = 0
    window: tuple = ()
    candidates: int = 0
    boxes: int = 0
    occupied_voxels: int = 0
    seconds: float = 0.0


def _lift_frame(root, t, taxonomy, rules, config, manifest, pool):
    """Load one frame and lift all views into a single world-frame cloud."""
    ego, views = ingest.load_sample(root, t, taxonomy, rules, manifest)

    def one(item):
        cam_index, sv = item
        c_tilde = lift.stabilize_confidence(sv.geom.C)
        omega = lift.reliability_filter(
            sv.geom.D, c_tilde, config.lift.tau_c, config.lift.d_min, config.lift.d_max
        )
        return lift.lift_view(sv.view, sv.priors, sv.geom, ego, omega, taxonomy, t, cam_index)

    results = list(pool.map(one, enumerate(views)))  # pool.map preserves order
    cloud = lift.LabeledPointCloud.concatenate(r[0] for r in results)
    skipped = sum(r[1] for r in results)
    return ego, cloud, skipped


def process_sample(t, frame_cache, window, config: PipelineConfig, taxonomy, intervals,
                   stage_cb=None, raw_grid_cb=None):
    """Run the per-sample pipeline on cached world-frame clouds.

    Returns (grid, boxes, stats). raw_grid_cb observes the unrefined grid,
    stage_cb each refinement stage output.
    """
    stats = SampleStats(t=t, window=tuple(window.indices))
    fused_world = lift.fuse_window({k: v[1] for k, v in frame_cache.items()}, window, t)
    ego_t = frame_cache[t][0]
    to_ego = np.linalg.inv(ego_t.T_ego)
    fused = fused_world.transformed(to_ego)
    stats.points_lifted = len(fused)
    stats.points_skipped = sum(frame_cache[k][2] for k in window.indices)

    current = fused.select(fused.t == t)
    cands = instances.build_candidates(current, taxonomy,
                                       min_points=config.instances.refine.min_points)
    stats.candidates = len(cands)
    boxes = instances.identify_instances(
        current, taxonomy, intervals, config.instances.refine, config.instances.tau_ov
    )
    stats.boxes = len(boxes)
    fused = instances.reassign_points(fused, boxes, config.instances.d_nn, taxonomy)

    grid = voxelize.voxelize(
        fused, config.grid, taxonomy,
        alpha=config.voxelize.alpha, lam=config.voxelize.lam, n_min=config.voxelize.n_min,
    )
    if raw_grid_cb:
        raw_grid_cb(grid)
    warmup = config.window == "causal" and len(window.indices) < config.warmup_frames
    grid = refine.refine_all(grid, taxonomy, config.refine, warmup=warmup, stage_cb=stage_cb)
    stats.occupied_voxels = int(grid.occupied_mask(taxonomy).sum())
    return grid, boxes, stats


def run_pipeline(dataset_root, config: PipelineConfig, out_dir, workers=None,
                 sample_cb=None, dump_stage: int | None = None, dump_clouds: bool = False):
    """Process every manifest sample and write one grid file per timestamp.

    Causal mode only ever loads frames <= the sample being produced. Outputs
    are byte-identical across runs and worker counts. sample_cb(stats) fires
    after each sample's grid is written.
    """
    dataset_root = Path(dataset_root)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    taxonomy, rules = resolve_taxonomy(config, dataset_root)
    intervals = config.size_intervals(taxonomy)
    manifest = ingest.load_manifest(dataset_root)
    samples = sorted(manifest.samples)
    workers = resolve_workers(workers)

    frame_cache: dict[int, tuple] = {}
    written = []
    with ThreadPoolExecutor(max_workers=workers) as pool:
        for t in samples:
            t0 = time.perf_counter()
            if config.window == "causal":
                idx = tuple(s for s in samples if s <= t)
            else:
                idx = tuple(samples)
            window = lift.WindowSpec(config.window, idx)
            try:
                for s in idx:
                    if s not in frame_cache:
                        frame_cache[s] = _lift_frame(
                            dataset_root, s, taxonomy, rules, config, manifest, pool
                        )
            except Exception as e:
                raise PipelineError("load", t, e) from e

            stage = "pipeline"
            try:
                stage_cb = raw_cb = None
                if dump_stage is not None:
                    def stage_cb(num, g, _t=t):
                        if num <= dump_stage:
                            voxelize.save_grid(out_dir / f"{_t:06d}.stage{num}.grid", g)

                    def raw_cb(g, _t=t):
                        voxelize.save_grid(out_dir / f"{_t:06d}.stage0.grid", g)

                grid, boxes, stats = process_sample(
                    t, frame_cache, window, config, taxonomy, intervals,
                    stage_cb=stage_cb, raw_grid_cb=raw_cb,
                )
                stage = "write"
                voxelize.save_grid(out_dir / f"{t:06d}.grid", grid)
                if dump_clouds:
                    cloud = lift.fuse_window(
                        {k: v[1] for k, v in frame_cache.items()}, window, t
                    ).transformed(np.linalg.inv(frame_cache[t][0].T_ego))
                    lift.save_cloud(out_dir / f"{t:06d}.cloud", cloud)
            except PipelineError:
                raise
            except Exception as e:
                raise PipelineError(stage, t, e) from e

            stats.seconds = time.perf_counter() - t0
            log.info(
                "sample %d: %d pts (%d skipped), %d candidates -> %d boxes, "
                "%d occupied voxels, %.2fs",
                t, stats.points_lifted, stats.points_skipped, stats.candidates,
                stats.boxes, stats.occupied_voxels, stats.seconds,
            )
            written.append(out_dir / f"{t:06d}.grid")
            if sample_cb:
                sample_cb(stats)
    return written


def evaluate_dirs(pred_dir, gt_dir, config: PipelineConfig):
    """Aggregate all metrics over paired grid files (matched by filename).

    Returns (summary dict, missing list). Missing predictions are skipped but
    reported so the caller can exit nonzero.
    """
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    taxonomy, _ = resolve_taxonomy(config)
    rays = metrics.default_rayset(
        origin=config.rays.origin,
        azimuth_step_deg=config.rays.azimuth_step_deg,
        elevation_rows=config.rays.elevation_rows,
        elevation_min_deg=config.rays.elevation_min_deg,
        elevation_max_deg=config.rays.elevation_max_deg,
    )
    vox_acc = metrics.MiouAccumulator(taxonomy)
    ray_acc = metrics.RayIouAccumulator(taxonomy, config.rays.thresholds)
    pq_acc = metrics.RayPqAccumulator(taxonomy, config.rays.thresholds)

    gt_files = sorted(gt_dir.glob("*.grid"))
    if not gt_files:
        raise FileNotFoundError(f"no .grid files in {gt_dir}")
    missing, compared = [], []
    for gt_path in gt_files:
        pred_path = pred_dir / gt_path.name
        if not pred_path.is_file():
            missing.append(pred_path)
            continue
        pred = voxelize.load_grid(pred_path)
        gt = voxelize.load_grid(gt_path)
        vox_acc.add(pred, gt)
        hp = metrics.cast_rays(pred, taxonomy, rays)
        hg = metrics.cast_rays(gt, taxonomy, rays)
        ray_acc.add_hits(hp, hg)
        pq_acc.add_hits(hp, hg)
        compared.append(gt_path.name)

    summary = {
        "samples": compared,
        "miou": vox_acc.miou(),
        "iou_occ": vox_acc.iou_occ(),
        "per_class_iou": {
            taxonomy.id_to_name[c]: v for c, v in vox_acc.per_class().items()
        },
        "rayiou": ray_acc.result(),
        "raypq": pq_acc.result(),
        "class_names": {c: taxonomy.id_to_name[c] for c in range(taxonomy.num_classes)},
        "eval_excluded": sorted(taxonomy.id_to_name[c] for c in taxonomy.eval_excluded),
    }
    return summary, missing
