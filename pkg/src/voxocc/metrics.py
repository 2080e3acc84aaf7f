"""Voxel- and ray-based occupancy metrics.

Ray metrics compare the first non-free voxel hit along shared rays: a ray
contributes a per-class true positive when the classes match and the hit-depth
difference is within the threshold. Panoptic quality groups rays into (class,
instance) segments and matches segments at strictly more than 50% ray IoU.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .taxonomy import Taxonomy
from .voxelize import GridSpec, OccupancyGrid

_EPS_DIR = 1e-12


@dataclass
class RaySet:
    origin: np.ndarray  # (3,) ego-frame meters
    directions: np.ndarray  # (R, 3) unit vectors

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        self.directions = np.asarray(self.directions, dtype=np.float64).reshape(-1, 3)
        norms = np.linalg.norm(self.directions, axis=1)
        if len(norms) and (np.abs(norms - 1.0) > 1e-9).any():
            raise ValueError("ray directions must be unit vectors")


@dataclass
class RayHit:
    voxel: tuple | None
    class_id: int | None
    instance_id: int | None
    depth: float | None

    @property
    def miss(self) -> bool:
        return self.voxel is None


def default_rayset(origin=(0.0, 0.0, 0.0), azimuth_step_deg=1.0, elevation_rows=32,
                   elevation_min_deg=-30.0, elevation_max_deg=10.0) -> RaySet:
    """Spherical scan pattern: one ray per (azimuth, elevation) cell from the origin."""
    az = np.deg2rad(np.arange(0.0, 360.0, azimuth_step_deg))
    el = np.deg2rad(np.linspace(elevation_min_deg, elevation_max_deg, elevation_rows))
    azg, elg = np.meshgrid(az, el, indexing="ij")
    dirs = np.stack(
        [np.cos(elg) * np.cos(azg), np.cos(elg) * np.sin(azg), np.sin(elg)], axis=-1
    ).reshape(-1, 3)
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return RaySet(np.asarray(origin, dtype=np.float64), dirs)


def cast_rays(grid: OccupancyGrid, taxonomy: Taxonomy, rays: RaySet):
    """Batched amortized-one-voxel-per-step traversal to the first non-free voxel.

    Returns (hit mask, ijk (R,3), class (R,), instance (R,), depth (R,)); rows of
    missing rays are zero/-1 filled. Origins outside the grid are clipped to the
    entry face and walked from there.
    """
    spec = grid.spec
    dims = np.asarray(spec.dims, dtype=np.int64)
    lo = spec.origin
    hi = lo + dims * spec.voxel_size
    o = rays.origin
    d = rays.directions.copy()
    r = len(d)

    hit = np.zeros(r, dtype=bool)
    out_ijk = np.full((r, 3), -1, dtype=np.int64)
    out_cls = np.zeros(r, dtype=np.int64)
    out_inst = np.zeros(r, dtype=np.int64)
    out_depth = np.zeros(r, dtype=np.float64)
    if r == 0:
        return hit, out_ijk, out_cls, out_inst, out_depth

    # slab clip; degenerate direction components get a harmless epsilon
    small = np.abs(d) < _EPS_DIR
    d[small] = np.where(np.signbit(d[small]), -_EPS_DIR, _EPS_DIR)
    inv = 1.0 / d
    t0 = (lo[None, :] - o[None, :]) * inv
    t1 = (hi[None, :] - o[None, :]) * inv
    t_near = np.minimum(t0, t1).max(axis=1)
    t_far = np.maximum(t0, t1).min(axis=1)
    t_entry = np.maximum(t_near, 0.0)
    alive = (t_far > t_entry) & np.isfinite(t_entry)

    sem_flat = grid.sem.reshape(-1)
    inst_flat = grid.inst.reshape(-1)
    free_id = taxonomy.free_id

    idx = np.flatnonzero(alive)
    if len(idx) == 0:
        return hit, out_ijk, out_cls, out_inst, out_depth

    p = o[None, :] + d[idx] * t_entry[idx, None]
    ijk = np.floor((p - lo[None, :]) / spec.voxel_size).astype(np.int64)
    ijk = np.clip(ijk, 0, dims[None, :] - 1)  # entry-face rounding safety
    step = np.where(d[idx] > 0, 1, -1).astype(np.int64)
    next_corner = lo[None, :] + (ijk + (step > 0)) * spec.voxel_size
    t_max = (next_corner - o[None, :]) / d[idx]
    t_delta = spec.voxel_size / np.abs(d[idx])
    t_cur = t_entry[idx].copy()

    max_steps = int(dims.sum()) * 2 + 4
    for _ in range(max_steps):
        if len(idx) == 0:
            break
        lin = (ijk[:, 0] * dims[1] + ijk[:, 1]) * dims[2] + ijk[:, 2]
        sem_here = sem_flat[lin]
        found = sem_here != free_id
        if found.any():
            rows = idx[found]
            hit[rows] = True
            out_ijk[rows] = ijk[found]
            out_cls[rows] = sem_here[found]
            out_inst[rows] = inst_flat[lin[found]]
            out_depth[rows] = t_cur[found]
        cont = ~found
        idx, ijk, step, t_max, t_delta, t_cur = (
            idx[cont], ijk[cont], step[cont], t_max[cont], t_delta[cont], t_cur[cont]
        )
        if len(idx) == 0:
            break
        axis = np.argmin(t_max, axis=1)
        rows = np.arange(len(idx))
        t_cur = t_max[rows, axis]
        ijk[rows, axis] += step[rows, axis]
        t_max[rows, axis] += t_delta[rows, axis]
        inb = ((ijk >= 0) & (ijk < dims[None, :])).all(axis=1)
        idx, ijk, step, t_max, t_delta, t_cur = (
            idx[inb], ijk[inb], step[inb], t_max[inb], t_delta[inb], t_cur[inb]
        )
    return hit, out_ijk, out_cls, out_inst, out_depth


def cast_ray(grid: OccupancyGrid, taxonomy: Taxonomy, origin, direction) -> RayHit:
    """Single-ray convenience wrapper around cast_rays."""
    direction = np.asarray(direction, dtype=np.float64)
    rays = RaySet(np.asarray(origin, dtype=np.float64), direction.reshape(1, 3))
    hit, ijk, cls, inst, depth = cast_rays(grid, taxonomy, rays)
    if not hit[0]:
        return RayHit(None, None, None, None)
    return RayHit(tuple(int(v) for v in ijk[0]), int(cls[0]), int(inst[0]), float(depth[0]))


def _check_specs(pred: OccupancyGrid, gt: OccupancyGrid):
    if pred.spec != gt.spec:
        raise ValueError("prediction and ground-truth grids have different specs")


class MiouAccumulator:
    """Per-class intersection/union counts over non-free voxels, accumulable across samples."""

    def __init__(self, taxonomy: Taxonomy):
        self.taxonomy = taxonomy
        k = taxonomy.num_classes
        self.intersection = np.zeros(k, dtype=np.int64)
        self.union = np.zeros(k, dtype=np.int64)
        self.occ_intersection = 0
        self.occ_union = 0

    def add(self, pred: OccupancyGrid, gt: OccupancyGrid):
        _check_specs(pred, gt)
        for cid in range(self.taxonomy.num_classes):
            p = pred.sem == cid
            g = gt.sem == cid
            self.intersection[cid] += int((p & g).sum())
            self.union[cid] += int((p | g).sum())
        po = pred.sem != self.taxonomy.free_id
        go = gt.sem != self.taxonomy.free_id
        self.occ_intersection += int((po & go).sum())
        self.occ_union += int((po | go).sum())

    def per_class(self) -> dict[int, float]:
        out = {}
        for cid in range(self.taxonomy.num_classes):
            if self.union[cid] > 0:
                out[cid] = self.intersection[cid] / self.union[cid]
        return out

    def miou(self) -> float:
        vals = [
            iou for cid, iou in self.per_class().items()
            if cid not in self.taxonomy.eval_excluded
        ]
        return float(np.mean(vals)) if vals else 0.0

    def iou_occ(self) -> float:
        return self.occ_intersection / self.occ_union if self.occ_union else 0.0


def miou(pred: OccupancyGrid, gt: OccupancyGrid, taxonomy: Taxonomy):
    """Per-class voxel IoU and its mean over non-excluded classes present in either grid."""
    acc = MiouAccumulator(taxonomy)
    acc.add(pred, gt)
    return acc.miou(), acc.per_class()


def iou_occ(pred: OccupancyGrid, gt: OccupancyGrid, taxonomy: Taxonomy) -> float:
    """Binary occupancy IoU of the non-free masks."""
    acc = MiouAccumulator(taxonomy)
    acc.add(pred, gt)
    return acc.iou_occ()


class RayIouAccumulator:
    def __init__(self, taxonomy: Taxonomy, thresholds=(1.0, 2.0, 4.0)):
        self.taxonomy = taxonomy
        self.thresholds = tuple(float(t) for t in thresholds)
        k = taxonomy.num_classes
        self.tp = np.zeros((len(self.thresholds), k), dtype=np.int64)
        self.pred_n = np.zeros((len(self.thresholds), k), dtype=np.int64)
        self.gt_n = np.zeros((len(self.thresholds), k), dtype=np.int64)

    def add(self, pred: OccupancyGrid, gt: OccupancyGrid, rays: RaySet):
        _check_specs(pred, gt)
        hp = cast_rays(pred, self.taxonomy, rays)
        hg = cast_rays(gt, self.taxonomy, rays)
        self.add_hits(hp, hg)

    def add_hits(self, hp, hg):
        keep = _kept_rays(hg, self.taxonomy)
        p_hit, p_cls, p_depth = hp[0][keep], hp[2][keep], hp[4][keep]
        g_hit, g_cls, g_depth = hg[0][keep], hg[2][keep], hg[4][keep]
        k = self.taxonomy.num_classes
        both = p_hit & g_hit
        agree = both & (p_cls == g_cls)
        for ti, tau in enumerate(self.thresholds):
            ok = agree & (np.abs(p_depth - g_depth) <= tau)
            self.tp[ti] += np.bincount(p_cls[ok], minlength=k)[:k]
            self.pred_n[ti] += np.bincount(p_cls[p_hit], minlength=k)[:k]
            self.gt_n[ti] += np.bincount(g_cls[g_hit], minlength=k)[:k]

    def result(self):
        per_threshold = []
        means = []
        for ti in range(len(self.thresholds)):
            per_class = {}
            for cid in range(self.taxonomy.num_classes):
                denom = self.pred_n[ti, cid] + self.gt_n[ti, cid] - self.tp[ti, cid]
                if self.pred_n[ti, cid] + self.gt_n[ti, cid] > 0:
                    per_class[cid] = self.tp[ti, cid] / denom if denom else 0.0
            vals = [
                v for cid, v in per_class.items() if cid not in self.taxonomy.eval_excluded
            ]
            per_threshold.append(per_class)
            means.append(float(np.mean(vals)) if vals else 0.0)
        return {
            "thresholds": self.thresholds,
            "per_class": per_threshold,
            "per_threshold": means,
            "mean": float(np.mean(means)) if means else 0.0,
        }


def rayiou(pred: OccupancyGrid, gt: OccupancyGrid, rays: RaySet, taxonomy: Taxonomy,
           thresholds=(1.0, 2.0, 4.0)):
    """Ray-level per-class IoU at each depth threshold, plus the threshold mean.

    Rays whose ground-truth first hit lands in an excluded class are dropped.
    """
    acc = RayIouAccumulator(taxonomy, thresholds)
    acc.add(pred, gt, rays)
    return acc.result()


def _kept_rays(hg, taxonomy: Taxonomy) -> np.ndarray:
    """Drop rays whose GT first hit is an excluded class (mirrors the mIoU exclusion)."""
    g_hit, g_cls = hg[0], hg[2]
    keep = np.ones(len(g_hit), dtype=bool)
    for cid in taxonomy.eval_excluded:
        keep &= ~(g_hit & (g_cls == cid))
    return keep


def _segments(cls, inst, hit):
    """Map rays to segment keys (class, instance); -1 where the grid missed."""
    key = np.where(hit, cls.astype(np.int64) * np.int64(2**32) + inst.astype(np.int64), -1)
    return key


class RayPqAccumulator:
    def __init__(self, taxonomy: Taxonomy, thresholds=(1.0, 2.0, 4.0)):
        self.taxonomy = taxonomy
        self.thresholds = tuple(float(t) for t in thresholds)
        k = taxonomy.num_classes
        self.iou_sum = np.zeros((len(self.thresholds), k), dtype=np.float64)
        self.tp = np.zeros((len(self.thresholds), k), dtype=np.int64)
        self.fp = np.zeros((len(self.thresholds), k), dtype=np.int64)
        self.fn = np.zeros((len(self.thresholds), k), dtype=np.int64)

    def add(self, pred: OccupancyGrid, gt: OccupancyGrid, rays: RaySet):
        _check_specs(pred, gt)
        hp = cast_rays(pred, self.taxonomy, rays)
        hg = cast_rays(gt, self.taxonomy, rays)
        self.add_hits(hp, hg)

    def add_hits(self, hp, hg):
        keep = _kept_rays(hg, self.taxonomy)
        p_hit, p_cls, p_inst, p_depth = hp[0][keep], hp[2][keep], hp[3][keep], hp[4][keep]
        g_hit, g_cls, g_inst, g_depth = hg[0][keep], hg[2][keep], hg[3][keep], hg[4][keep]

        p_key = _segments(p_cls, p_inst, p_hit)
        g_key = _segments(g_cls, g_inst, g_hit)
        p_ids, p_sizes = np.unique(p_key[p_key >= 0], return_counts=True)
        g_ids, g_sizes = np.unique(g_key[g_key >= 0], return_counts=True)
        p_size = dict(zip(p_ids.tolist(), p_sizes.tolist()))
        g_size = dict(zip(g_ids.tolist(), g_sizes.tolist()))

        both = p_hit & g_hit
        for ti, tau in enumerate(self.thresholds):
            valid = both & (np.abs(p_depth - g_depth) <= tau)
            inter: dict[tuple[int, int], int] = {}
            if valid.any():
                pair = np.stack([p_key[valid], g_key[valid]], axis=1)
                uniq, counts = np.unique(pair, axis=0, return_counts=True)
                inter = {(int(a), int(b)): int(c) for (a, b), c in zip(uniq, counts)}

            matched_p, matched_g = set(), set()
            for (pk, gk), n_int in inter.items():
                if (pk >> 32) != (gk >> 32):
                    continue  # class mismatch
                union = p_size[pk] + g_size[gk] - n_int
                iou = n_int / union if union else 0.0
                if iou > 0.5:
                    cid = int(pk >> 32)
                    self.iou_sum[ti, cid] += iou
                    self.tp[ti, cid] += 1
                    matched_p.add(pk)
                    matched_g.add(gk)
            for pk in p_size:
                if pk not in matched_p:
                    self.fp[ti, int(pk >> 32)] += 1
            for gk in g_size:
                if gk not in matched_g:
                    self.fn[ti, int(gk >> 32)] += 1

    def result(self):
        per_threshold = []
        means = []
        for ti in range(len(self.thresholds)):
            per_class = {}
            for cid in range(self.taxonomy.num_classes):
                total = self.tp[ti, cid] + self.fp[ti, cid] + self.fn[ti, cid]
                if total == 0:
                    continue
                denom = self.tp[ti, cid] + 0.5 * self.fp[ti, cid] + 0.5 * self.fn[ti, cid]
                per_class[cid] = self.iou_sum[ti, cid] / denom
            vals = [
                v for cid, v in per_class.items() if cid not in self.taxonomy.eval_excluded
            ]
            per_threshold.append(per_class)
            means.append(float(np.mean(vals)) if vals else 0.0)
        return {
            "thresholds": self.thresholds,
            "per_class": per_threshold,
            "per_threshold": means,
            "mean": float(np.mean(means)) if means else 0.0,
        }


def raypq(pred: OccupancyGrid, gt: OccupancyGrid, rays: RaySet, taxonomy: Taxonomy,
          thresholds=(1.0, 2.0, 4.0)):
    """Panoptic quality over ray segments at each depth threshold.

    Segments are the first-hit (class, instance) groups; a prediction matches a
    ground-truth segment only with the same class and ray IoU strictly above
    0.5, with the intersection restricted to depth-valid rays. Depends only on
    the instance partition, not on id values.
    """
    acc = RayPqAccumulator(taxonomy, thresholds)
    acc.add(pred, gt, rays)
    return acc.result()
