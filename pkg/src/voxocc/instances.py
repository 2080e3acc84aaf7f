"""Thing-instance recovery: yaw-box fitting, robust candidate filtering, conservative merging.

Instance priors come from single 2D masks and are noisy across cameras (overlap
duplicates, projection bleeding). Candidates are regularized from current-sample
points only, merged by intersection-over-smaller-volume, and the fused cloud is
re-labeled against the surviving boxes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .lift import LabeledPointCloud
from .taxonomy import Taxonomy, stuff_instance_id

_MIN_EXTENT = 1e-3  # meters; degenerate clusters still yield a valid box
_MAD_SCALE = 1.4826  # robust sigma from median absolute deviation


@dataclass
class YawBox:
    center: np.ndarray  # (3,) meters
    yaw: float  # radians in [-pi/2, pi/2)
    extents: np.ndarray  # (l, w, h) meters, strictly positive
    class_id: int = 0
    instance_id: int = 0
    support: int = 0

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.extents = np.asarray(self.extents, dtype=np.float64).reshape(3)

    @property
    def volume(self) -> float:
        return float(np.prod(self.extents))

    def corners_xy(self) -> np.ndarray:
        """Footprint corners in counter-clockwise order."""
        l, w = self.extents[0] / 2.0, self.extents[1] / 2.0
        local = np.array([[l, w], [-l, w], [-l, -w], [l, -w]])
        c, s = np.cos(self.yaw), np.sin(self.yaw)
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + self.center[:2]

    def z_range(self) -> tuple[float, float]:
        h = self.extents[2] / 2.0
        return self.center[2] - h, self.center[2] + h


@dataclass
class SizeInterval:
    class_id: int
    max_lwh: np.ndarray  # (3,) meters
    min_lwh: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.max_lwh = np.asarray(self.max_lwh, dtype=np.float64).reshape(3)
        self.min_lwh = np.asarray(self.min_lwh, dtype=np.float64).reshape(3)
        if (self.min_lwh > self.max_lwh).any() or (self.max_lwh <= 0).any():
            raise ValueError(f"invalid size interval for class {self.class_id}")

    def plausible(self, extents) -> bool:
        lw = np.sort(np.asarray(extents[:2]))[::-1]  # longest horizontal extent first
        dims = np.array([lw[0], lw[1], extents[2]])
        return bool((dims <= self.max_lwh).all() and (dims >= self.min_lwh).all())


@dataclass
class RefineParams:
    iqr_factor: float = 1.5
    mad_k: float = 3.0
    tighten: float = 0.8  # multiplicative schedule applied to both thresholds per pass
    max_passes: int = 4
    min_points: int = 5


@dataclass
class Candidate:
    """One instance-prior cluster from the current sample, with provenance."""

    class_id: int
    prior_id: int
    xyz: np.ndarray  # (N, 3)
    depth: np.ndarray  # (N,) source-pixel depth, for the per-camera outlier rule
    cam: np.ndarray  # (N,)
    index: np.ndarray  # (N,) positions in the source cloud


def _normalize_yaw(yaw: float) -> float:
    return float((yaw + np.pi / 2.0) % np.pi - np.pi / 2.0)


def fit_yaw_box(xyz: np.ndarray) -> YawBox:
    """Fit a yaw-oriented box: horizontal PCA orientation, tight extents.

    Yaw is the direction of the first principal component of the xy covariance,
    normalized modulo pi. Degenerate (coincident-xy) inputs fall back to yaw 0.
    """
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    if len(xyz) == 0:
        raise ValueError("cannot fit a box to zero points")
    xy = xyz[:, :2]
    centered = xy - xy.mean(axis=0)
    cov = centered.T @ centered / len(xy)
    if np.abs(cov).max() < 1e-12:
        yaw = 0.0
    else:
        evals, evecs = np.linalg.eigh(cov)
        major = evecs[:, np.argmax(evals)]
        yaw = _normalize_yaw(np.arctan2(major[1], major[0]))

    c, s = np.cos(-yaw), np.sin(-yaw)
    u = c * xy[:, 0] - s * xy[:, 1]
    v = s * xy[:, 0] + c * xy[:, 1]
    z = xyz[:, 2]
    lo = np.array([u.min(), v.min(), z.min()])
    hi = np.array([u.max(), v.max(), z.max()])
    extents = np.maximum(hi - lo, _MIN_EXTENT)
    mid = (lo + hi) / 2.0
    cr, sr = np.cos(yaw), np.sin(yaw)
    center = np.array([cr * mid[0] - sr * mid[1], sr * mid[0] + cr * mid[1], mid[2]])
    return YawBox(center, yaw, extents, support=len(xyz))


def _iqr_keep(depth: np.ndarray, cam: np.ndarray, factor: float) -> np.ndarray:
    """Per-camera interquartile depth gate. Groups of <4 points are kept as-is."""
    keep = np.ones(len(depth), dtype=bool)
    for c in np.unique(cam):
        sel = cam == c
        if sel.sum() < 4:
            continue
        d = depth[sel]
        q1, q3 = np.percentile(d, [25.0, 75.0])
        iqr = q3 - q1
        keep[sel] = (d >= q1 - factor * iqr) & (d <= q3 + factor * iqr)
    return keep


def _mad_keep(xyz: np.ndarray, k: float) -> np.ndarray:
    """Robust deviation gate in the principal (yaw-aligned) frame, per axis."""
    box = fit_yaw_box(xyz)
    c, s = np.cos(-box.yaw), np.sin(-box.yaw)
    coords = np.column_stack(
        [c * xyz[:, 0] - s * xyz[:, 1], s * xyz[:, 0] + c * xyz[:, 1], xyz[:, 2]]
    )
    keep = np.ones(len(xyz), dtype=bool)
    for axis in range(3):
        col = coords[:, axis]
        med = np.median(col)
        sigma = _MAD_SCALE * np.median(np.abs(col - med))
        if sigma <= 0:
            continue  # axis collapsed; nothing meaningful to prune
        keep &= np.abs(col - med) <= k * sigma
    return keep


def refine_candidate(candidate: Candidate, interval: SizeInterval, params: RefineParams):
    """Outlier-robust candidate refinement against the class size interval.

    Each pass drops per-camera depth outliers (IQR rule), prunes robust
    deviations in the principal frame (median/MAD), and refits. If the box is
    still larger than plausible, both thresholds tighten multiplicatively and
    the surviving points are filtered again, up to max_passes. Returns
    (kept indices into the candidate, box) or None when rejected.
    """
    keep = np.arange(len(candidate.xyz))
    factor, k = params.iqr_factor, params.mad_k
    box = None
    for _ in range(params.max_passes):
        if len(keep) < params.min_points:
            return None
        xyz = candidate.xyz[keep]
        sel = _iqr_keep(candidate.depth[keep], candidate.cam[keep], factor)
        keep = keep[sel]
        if len(keep) < params.min_points:
            return None
        sel = _mad_keep(candidate.xyz[keep], k)
        keep = keep[sel]
        if len(keep) < params.min_points:
            return None
        box = fit_yaw_box(candidate.xyz[keep])
        if interval.plausible(box.extents):
            box.class_id = candidate.class_id
            return keep, box
        factor *= params.tighten
        k *= params.tighten
    return None


def _clip_polygon(poly: np.ndarray, half_planes) -> np.ndarray:
    """Sutherland-Hodgman clip of a convex polygon by a list of (normal, offset)."""
    for n, d in half_planes:
        if len(poly) == 0:
            break
        inside = poly @ n <= d
        out = []
        m = len(poly)
        for i in range(m):
            j = (i + 1) % m
            p, q = poly[i], poly[j]
            if inside[i]:
                out.append(p)
            if inside[i] != inside[j]:
                denom = (q - p) @ n
                t = (d - p @ n) / denom
                out.append(p + t * (q - p))
        poly = np.asarray(out) if out else np.zeros((0, 2))
    return poly


def _polygon_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def iosv(a: YawBox, b: YawBox) -> float:
    """3D intersection volume over the smaller box volume, in [0, 1]."""
    va, vb = a.volume, b.volume
    if va <= 0 or vb <= 0:
        return 0.0
    za, zb = a.z_range(), b.z_range()
    dz = min(za[1], zb[1]) - max(za[0], zb[0])
    if dz <= 0:
        return 0.0
    pb = b.corners_xy()
    planes = []
    for i in range(4):
        edge = pb[(i + 1) % 4] - pb[i]
        normal = np.array([edge[1], -edge[0]])  # outward for a CCW polygon
        planes.append((normal, normal @ pb[i]))
    inter = _polygon_area(_clip_polygon(a.corners_xy(), planes))
    return min(1.0, inter * dz / min(va, vb))


def _dedupe_points(xyz_a, xyz_b):
    """Union of two point index sets is handled by the caller; coordinates just concatenate."""
    return np.concatenate([xyz_a, xyz_b])


def merge_boxes(accepted, tau_ov: float, intervals, params: RefineParams):
    """Greedy same-class agglomeration of accepted candidates by IoSV.

    Repeatedly merges the qualifying pair with the highest overlap (ties break
    by larger combined support, then input order), unioning point sets and
    refitting through refine_candidate. Pairs whose union refit is rejected are
    left unmerged. Surviving boxes receive fresh 1-based instance ids.

    `accepted` is a list of (Candidate, kept_index, YawBox) triples.
    """
    items = [
        {
            "candidate": Candidate(
                cand.class_id, cand.prior_id,
                cand.xyz[kept], cand.depth[kept], cand.cam[kept], cand.index[kept],
            ),
            "box": box,
        }
        for cand, kept, box in accepted
    ]
    blocked: set[tuple[int, int]] = set()
    serial = len(items)  # stable identity for the blocked-pair bookkeeping
    tags = list(range(len(items)))

    while True:
        best = None
        for i in range(len(items)):
            for j in range(i + 1, len(items)):
                a, b = items[i], items[j]
                if a["candidate"].class_id != b["candidate"].class_id:
                    continue
                if (min(tags[i], tags[j]), max(tags[i], tags[j])) in blocked:
                    continue
                ov = iosv(a["box"], b["box"])
                if ov < tau_ov:
                    continue
                support = len(a["candidate"].xyz) + len(b["candidate"].xyz)
                key = (ov, support, -i, -j)
                if best is None or key > best[0]:
                    best = (key, i, j)
        if best is None:
            break
        _, i, j = best
        a, b = items[i]["candidate"], items[j]["candidate"]
        union = Candidate(
            a.class_id, a.prior_id,
            np.concatenate([a.xyz, b.xyz]), np.concatenate([a.depth, b.depth]),
            np.concatenate([a.cam, b.cam]), np.concatenate([a.index, b.index]),
        )
        result = refine_candidate(union, intervals[a.class_id], params)
        if result is None:
            blocked.add((min(tags[i], tags[j]), max(tags[i], tags[j])))
            continue
        kept, box = result
        merged = {
            "candidate": Candidate(
                union.class_id, union.prior_id,
                union.xyz[kept], union.depth[kept], union.cam[kept], union.index[kept],
            ),
            "box": box,
        }
        for idx in sorted((i, j), reverse=True):
            del items[idx]
            del tags[idx]
        items.append(merged)
        tags.append(serial)
        serial += 1

    boxes = []
    for final_id, item in enumerate(items, start=1):
        box = item["box"]
        box.instance_id = final_id
        box.class_id = item["candidate"].class_id
        box.support = len(item["candidate"].xyz)
        boxes.append(box)
    return boxes


def build_candidates(cloud: LabeledPointCloud, taxonomy: Taxonomy, min_points: int = 1):
    """Group current-sample thing points by instance prior id into candidates."""
    thing = np.isin(cloud.sem, list(taxonomy.thing_ids)) & (cloud.inst > 0)
    idx = np.flatnonzero(thing)
    candidates = []
    for prior in np.unique(cloud.inst[idx]):
        sel = idx[cloud.inst[idx] == prior]
        if len(sel) < min_points:
            continue
        class_ids, counts = np.unique(cloud.sem[sel], return_counts=True)
        class_id = int(class_ids[np.argmax(counts)])  # priors are single-mask, ties are noise
        candidates.append(
            Candidate(class_id, int(prior), cloud.xyz[sel], cloud.depth[sel].astype(np.float64),
                      cloud.cam[sel], sel)
        )
    return candidates


def identify_instances(current: LabeledPointCloud, taxonomy: Taxonomy, intervals,
                       params: RefineParams, tau_ov: float):
    """Full current-sample instance recovery: candidates -> refine -> merge."""
    accepted = []
    for cand in build_candidates(current, taxonomy, min_points=params.min_points):
        interval = intervals.get(cand.class_id)
        if interval is None:
            raise KeyError(f"no size interval for thing class {cand.class_id}")
        result = refine_candidate(cand, interval, params)
        if result is not None:
            accepted.append((cand, result[0], result[1]))
    return merge_boxes(accepted, tau_ov, intervals, params)


def _box_distances(xyz: np.ndarray, box: YawBox):
    """(is_inside, Euclidean distance to the solid box) for each point."""
    c, s = np.cos(-box.yaw), np.sin(-box.yaw)
    dx = xyz[:, 0] - box.center[0]
    dy = xyz[:, 1] - box.center[1]
    local = np.column_stack([c * dx - s * dy, s * dx + c * dy, xyz[:, 2] - box.center[2]])
    half = box.extents / 2.0
    excess = np.abs(local) - half
    inside = (excess <= 0).all(axis=1)
    dist = np.linalg.norm(np.maximum(excess, 0.0), axis=1)
    return inside, dist


def reassign_points(cloud: LabeledPointCloud, boxes, d_nn: float, taxonomy: Taxonomy) -> LabeledPointCloud:
    """Re-label the fused cloud against final boxes.

    Thing points inside a box take its id and class (ties by nearest center);
    uncovered thing points adopt the nearest same-class box within d_nn meters;
    the rest are relabeled ignore. Stuff/flat points receive canonical
    class-level ids. Returns a new cloud.
    """
    sem = cloud.sem.copy()
    inst = cloud.inst.copy()

    thing = np.isin(cloud.sem, list(taxonomy.thing_ids))
    tidx = np.flatnonzero(thing)
    if len(tidx):
        xyz = cloud.xyz[tidx]
        n = len(tidx)
        best_center = np.full(n, np.inf)
        contain_id = np.zeros(n, dtype=np.int64)
        contain_cls = np.zeros(n, dtype=np.uint16)
        best_nn = np.full(n, np.inf)
        nn_id = np.zeros(n, dtype=np.int64)
        for box in boxes:
            inside, dist = _box_distances(xyz, box)
            center_d = np.linalg.norm(xyz - box.center, axis=1)
            take = inside & (center_d < best_center)
            contain_id[take] = box.instance_id
            contain_cls[take] = box.class_id
            best_center[take] = center_d[take]
            # nearest-box fallback stays within the point's own class
            same = cloud.sem[tidx] == box.class_id
            closer = same & (dist < best_nn)
            nn_id[closer] = box.instance_id
            best_nn[closer] = dist[closer]

        contained = contain_id > 0
        near = ~contained & (best_nn < d_nn) & (nn_id > 0)
        lost = ~contained & ~near

        sem[tidx[contained]] = contain_cls[contained]
        inst[tidx[contained]] = contain_id[contained]
        inst[tidx[near]] = nn_id[near]
        sem[tidx[lost]] = taxonomy.ignore_id
        inst[tidx[lost]] = 0

    stuff = ~np.isin(sem, list(taxonomy.thing_ids)) & (sem != taxonomy.ignore_id) \
        & (sem != taxonomy.free_id)
    ids = np.zeros(taxonomy.num_classes, dtype=np.int64)
    for cid in range(taxonomy.num_classes):
        ids[cid] = stuff_instance_id(cid)
    inst[stuff] = ids[sem[stuff]]
    inst[sem == taxonomy.ignore_id] = 0
    return LabeledPointCloud(cloud.xyz, sem, inst, cloud.conf, cloud.t, cloud.cam, cloud.depth)
