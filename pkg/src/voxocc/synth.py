"""Synthetic ground-truth scenes: analytic geometry, camera-rig rendering, dataset export.

Scenes are parametric (ground plane with class patches, yaw boxes, spherical
blobs) so both the voxel ground truth and the per-view rasters come from the
same closed-form geometry. All randomness is drawn from counter-based Philox
streams keyed by (seed, frame, camera, purpose), so identical specs reproduce
identical fixtures everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml
from scipy import ndimage

from .ingest import (
    CameraView,
    EgoPose,
    Manifest,
    MaskCandidate,
    SampleView,
    ViewPriors,
    fuse_masks,
    write_manifest,
    write_sample,
)
from .lift import GeometryMaps
from .taxonomy import RuleSet, Taxonomy, identity_rules, save_taxonomy, stuff_instance_id
from .voxelize import GridSpec, OccupancyGrid

_EPS_T = 1e-6
_MISS_CONF = 1e-8

# purpose tags for the per-(frame, camera) random streams
_STREAM_DEPTH = 1
_STREAM_DROPOUT = 2
_STREAM_FLIP = 3
_STREAM_SCORE = 4


def _rng(seed: int, t: int = 0, cam: int = 0, purpose: int = 0) -> np.random.Generator:
    mix = (np.uint64(t) * np.uint64(1_000_003) + np.uint64(cam) * np.uint64(1009)
           + np.uint64(purpose))
    return np.random.Generator(np.random.Philox(key=np.array([seed, mix], dtype=np.uint64)))


@dataclass
class SceneBox:
    class_name: str
    center: np.ndarray  # (3,) world meters
    yaw: float  # radians
    size: np.ndarray  # (l, w, h)

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.size = np.asarray(self.size, dtype=np.float64).reshape(3)


@dataclass
class SceneBlob:
    class_name: str
    center: np.ndarray
    radius: float

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)


@dataclass
class GroundPatch:
    class_name: str
    rect: tuple  # (x0, x1, y0, y1) world


@dataclass
class NoiseSpec:
    depth_sigma: float = 0.0  # meters, Gaussian along the ray
    label_flip: float = 0.0  # i.i.d. per-pixel rate
    dropout: float = 0.0  # per-pixel rate; dropped pixels get NaN depth, tiny confidence
    conf_base: float = 100.0
    conf_decay: float = 2.0  # stabilized confidence decreases with |depth error|

    def __post_init__(self):
        for rate in (self.label_flip, self.dropout):
            if not 0.0 <= rate <= 1.0:
                raise ValueError("noise rates must lie in [0, 1]")
        if self.depth_sigma < 0:
            raise ValueError("depth_sigma must be non-negative")


@dataclass
class RigCamera:
    camera_id: str
    width: int
    height: int
    fov_deg: float
    position: np.ndarray  # (3,) in the ego frame
    yaw_deg: float = 0.0
    pitch_deg: float = 0.0  # positive pitches the view down

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)

    def intrinsics(self) -> np.ndarray:
        f = (self.width / 2.0) / np.tan(np.deg2rad(self.fov_deg) / 2.0)
        return np.array([[f, 0, self.width / 2.0], [0, f, self.height / 2.0], [0, 0, 1.0]])

    def extrinsics(self) -> np.ndarray:
        """Camera-to-ego transform; camera frame is x-right, y-down, z-forward."""
        cy, sy = np.cos(np.deg2rad(self.yaw_deg)), np.sin(np.deg2rad(self.yaw_deg))
        cp, sp = np.cos(np.deg2rad(self.pitch_deg)), np.sin(np.deg2rad(self.pitch_deg))
        forward = np.array([cp * cy, cp * sy, -sp])
        right = np.array([sy, -cy, 0.0])
        down = np.cross(forward, right)
        T = np.eye(4)
        T[:3, 0], T[:3, 1], T[:3, 2] = right, down, forward
        T[:3, 3] = self.position
        return T

    def to_view(self) -> CameraView:
        return CameraView(self.camera_id, self.width, self.height,
                          self.intrinsics(), self.extrinsics())


@dataclass
class TrajectoryPose:
    t: int
    position: np.ndarray
    yaw_deg: float = 0.0

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)

    def to_ego(self) -> EgoPose:
        c, s = np.cos(np.deg2rad(self.yaw_deg)), np.sin(np.deg2rad(self.yaw_deg))
        T = np.eye(4)
        T[:2, :2] = [[c, -s], [s, c]]
        T[:3, 3] = self.position
        return EgoPose(self.t, T)


@dataclass
class SceneSpec:
    seed: int
    extents: tuple  # (x0, x1, y0, y1) world rectangle containing all geometry
    grid: GridSpec
    rig: list
    trajectory: list
    ground_z: float = 0.0
    ground_class: str = "driveable_surface"
    patches: list = field(default_factory=list)
    boxes: list = field(default_factory=list)
    blobs: list = field(default_factory=list)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    emit: str = "priors"  # "priors" | "candidates"

    def __post_init__(self):
        if self.emit not in ("priors", "candidates"):
            raise ValueError(f"unknown emit mode {self.emit!r}")
        x0, x1, y0, y1 = self.extents
        for box in self.boxes:
            if not (x0 <= box.center[0] <= x1 and y0 <= box.center[1] <= y1):
                raise ValueError(f"box {box.class_name!r} at {box.center[:2]} is outside extents")
        for blob in self.blobs:
            if not (x0 <= blob.center[0] <= x1 and y0 <= blob.center[1] <= y1):
                raise ValueError(f"blob {blob.class_name!r} at {blob.center[:2]} is outside extents")

    @property
    def timestamps(self):
        return tuple(p.t for p in self.trajectory)

    def ego(self, t: int) -> EgoPose:
        for p in self.trajectory:
            if p.t == t:
                return p.to_ego()
        raise KeyError(f"no trajectory pose for t={t}")


# --- analytic entities ---------------------------------------------------------

def _entities(spec: SceneSpec, taxonomy: Taxonomy):
    """Flat entity table: ground first, then patches, blobs, boxes.

    Each row: (kind, index, class_id, per-view prior id). Prior ids are only
    assigned to thing boxes (roster order), everything else carries 0.
    """
    rows = []
    rows.append(("ground", -1, taxonomy.name_to_id[spec.ground_class], 0))
    for i, patch in enumerate(spec.patches):
        rows.append(("patch", i, taxonomy.name_to_id[patch.class_name], 0))
    for i, blob in enumerate(spec.blobs):
        rows.append(("blob", i, taxonomy.name_to_id[blob.class_name], 0))
    thing_count = 0
    for i, box in enumerate(spec.boxes):
        cid = taxonomy.name_to_id[box.class_name]
        prior = 0
        if cid in taxonomy.thing_ids:
            thing_count += 1
            prior = thing_count
        rows.append(("box", i, cid, prior))
    return rows


def thing_instance_ids(spec: SceneSpec, taxonomy: Taxonomy) -> dict[int, int]:
    """Ground-truth instance id per thing-box roster index (1-based, roster order)."""
    out = {}
    nid = 0
    for i, box in enumerate(spec.boxes):
        if taxonomy.name_to_id[box.class_name] in taxonomy.thing_ids:
            nid += 1
            out[i] = nid
    return out


def _box_local(box: SceneBox, pts: np.ndarray) -> np.ndarray:
    c, s = np.cos(-box.yaw), np.sin(-box.yaw)
    dx = pts[:, 0] - box.center[0]
    dy = pts[:, 1] - box.center[1]
    return np.column_stack([c * dx - s * dy, s * dx + c * dy, pts[:, 2] - box.center[2]])


def _in_box(box: SceneBox, pts: np.ndarray) -> np.ndarray:
    local = _box_local(box, pts)
    return (np.abs(local) <= box.size / 2.0).all(axis=1)


def _box_overlaps_voxels(box: SceneBox, centers: np.ndarray, half: float) -> np.ndarray:
    """Exact cube-vs-yaw-box overlap (separating axes in xy, interval in z).

    `centers` are axis-aligned voxel centers in the same frame as the box.
    """
    zlo, zhi = box.center[2] - box.size[2] / 2.0, box.center[2] + box.size[2] / 2.0
    ok = (centers[:, 2] + half >= zlo) & (centers[:, 2] - half <= zhi)
    d = centers[:, :2] - box.center[:2]
    c, s = np.cos(box.yaw), np.sin(box.yaw)
    u = np.array([c, s])
    v = np.array([-s, c])
    hl, hw = box.size[0] / 2.0, box.size[1] / 2.0
    axes = (
        (np.array([1.0, 0.0]), hl * abs(u[0]) + hw * abs(v[0])),
        (np.array([0.0, 1.0]), hl * abs(u[1]) + hw * abs(v[1])),
        (u, hl),
        (v, hw),
    )
    for axis, r_box in axes:
        r_vox = half * (abs(axis[0]) + abs(axis[1]))
        ok &= np.abs(d @ axis) <= r_box + r_vox
    return ok


def _blob_overlaps_voxels(blob: SceneBlob, centers: np.ndarray, half: float) -> np.ndarray:
    """Cube-vs-sphere overlap: distance from the sphere center to the cube."""
    nearest = np.maximum(np.abs(centers - blob.center) - half, 0.0)
    return np.einsum("ij,ij->i", nearest, nearest) <= blob.radius**2


def _to_ego_frame_box(box: SceneBox, ego_T: np.ndarray) -> SceneBox:
    """Express a world-frame box in the ego frame (poses are yaw + translation)."""
    R, tr = ego_T[:3, :3], ego_T[:3, 3]
    center = R.T @ (box.center - tr)
    ego_yaw = np.arctan2(R[1, 0], R[0, 0])
    return SceneBox(box.class_name, center, box.yaw - ego_yaw, box.size)


def _patch_class(spec: SceneSpec, taxonomy: Taxonomy, xy: np.ndarray) -> np.ndarray:
    cls = np.full(len(xy), taxonomy.name_to_id[spec.ground_class], dtype=np.int64)
    for patch in spec.patches:  # later patches paint over earlier ones
        x0, x1, y0, y1 = patch.rect
        inside = (xy[:, 0] >= x0) & (xy[:, 0] <= x1) & (xy[:, 1] >= y0) & (xy[:, 1] <= y1)
        cls[inside] = taxonomy.name_to_id[patch.class_name]
    return cls


def _rasterize_frame(spec: SceneSpec, taxonomy: Taxonomy, t: int):
    """Analytic ground truth (sem, inst) for one frame's ego lattice.

    A voxel is occupied by a primitive when its volume intersects it (exact
    overlap tests); boxes take priority in roster order, then blobs, then the
    one voxel layer containing the ground plane.
    """
    ids = thing_instance_ids(spec, taxonomy)
    gs = spec.grid
    half = gs.voxel_size / 2.0
    cx = gs.voxel_centers_axis(0)
    cy = gs.voxel_centers_axis(1)
    cz = gs.voxel_centers_axis(2)
    centers_ego = np.stack(np.meshgrid(cx, cy, cz, indexing="ij"), axis=-1).reshape(-1, 3)

    T = spec.ego(t).T_ego
    centers_world = centers_ego @ T[:3, :3].T + T[:3, 3]
    sem = np.full(len(centers_ego), taxonomy.free_id, dtype=np.uint16)
    inst = np.zeros(len(centers_ego), dtype=np.uint32)
    unset = np.ones(len(centers_ego), dtype=bool)

    # overlap tests run in the ego frame, where voxels are axis-aligned
    for i, box in enumerate(spec.boxes):
        sel = unset & _box_overlaps_voxels(_to_ego_frame_box(box, T), centers_ego, half)
        if not sel.any():
            continue
        cid = taxonomy.name_to_id[box.class_name]
        sem[sel] = cid
        inst[sel] = ids.get(i, stuff_instance_id(cid))
        unset &= ~sel
    for blob in spec.blobs:
        ego_blob = SceneBlob(
            blob.class_name, T[:3, :3].T @ (blob.center - T[:3, 3]), blob.radius
        )
        sel = unset & _blob_overlaps_voxels(ego_blob, centers_ego, half)
        cid = taxonomy.name_to_id[blob.class_name]
        sem[sel] = cid
        inst[sel] = stuff_instance_id(cid)
        unset &= ~sel

    # ground: the voxel layer containing the plane (poses never tilt or lift)
    x0, x1, y0, y1 = spec.extents
    ground_z_ego = spec.ground_z - T[2, 3]
    on_ground = (
        unset
        & (centers_ego[:, 2] - half <= ground_z_ego)
        & (ground_z_ego < centers_ego[:, 2] + half)
        & (centers_world[:, 0] >= x0) & (centers_world[:, 0] <= x1)
        & (centers_world[:, 1] >= y0) & (centers_world[:, 1] <= y1)
    )
    gcls = _patch_class(spec, taxonomy, centers_world[on_ground][:, :2])
    sem[on_ground] = gcls.astype(np.uint16)
    ginst = np.array([stuff_instance_id(c) for c in range(taxonomy.num_classes)],
                     dtype=np.uint32)
    inst[on_ground] = ginst[gcls]
    return sem.reshape(gs.dims), inst.reshape(gs.dims)


def generate_scene(spec: SceneSpec, taxonomy: Taxonomy):
    """Analytic voxel ground truth per timestamp. Deterministic in the spec.

    Returns ({t: OccupancyGrid}, {roster index: instance id}); thing boxes
    carry instance ids 1..n, stuff carries canonical class-level ids.
    """
    ids = thing_instance_ids(spec, taxonomy)
    grids = {}
    for t in spec.timestamps:
        sem, inst = _rasterize_frame(spec, taxonomy, t)
        grid = OccupancyGrid.empty(spec.grid, taxonomy.free_id)
        grid.sem = sem
        grid.inst = inst
        occupied = grid.sem != taxonomy.free_id
        grid.n = occupied.astype(np.uint32)
        grid.conf = occupied.astype(np.float32)
        grid.p_occ = occupied.astype(np.float32) * np.float32(0.99)
        grids[t] = grid
    return grids, ids


# --- per-view analytic raycast -------------------------------------------------

def _raycast(spec: SceneSpec, taxonomy: Taxonomy, origins: np.ndarray, dirs: np.ndarray):
    """Nearest-hit query against the analytic scene for unit world-frame rays.

    Returns (t_hit with +inf misses, class id raster values, entity row index).
    """
    entities = _entities(spec, taxonomy)
    n = len(dirs)
    t_best = np.full(n, np.inf)
    cls = np.full(n, -1, dtype=np.int64)
    ent = np.full(n, -1, dtype=np.int64)

    def consider(t_hit, valid, class_values, row):
        closer = valid & (t_hit < t_best)
        t_best[closer] = t_hit[closer]
        if np.isscalar(class_values):
            cls[closer] = class_values
        else:
            cls[closer] = class_values[closer]
        ent[closer] = row

    # ground plane (with patches resolved afterwards)
    dz = dirs[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        t_g = (spec.ground_z - origins[:, 2]) / dz
    hit_xy = origins[:, :2] + dirs[:, :2] * t_g[:, None]
    x0, x1, y0, y1 = spec.extents
    valid = (
        (np.abs(dz) > _EPS_T) & (t_g > _EPS_T)
        & (hit_xy[:, 0] >= x0) & (hit_xy[:, 0] <= x1)
        & (hit_xy[:, 1] >= y0) & (hit_xy[:, 1] <= y1)
    )
    gcls = np.full(n, taxonomy.name_to_id[spec.ground_class], dtype=np.int64)
    if valid.any():
        gcls[valid] = _patch_class(spec, taxonomy, hit_xy[valid])
    consider(np.where(valid, t_g, np.inf), valid, gcls, 0)

    # patches share the ground-plane hit; re-tag them with their own entity rows
    # so candidate generation separates per patch
    if valid.any() and spec.patches:
        base = taxonomy.name_to_id[spec.ground_class]
        for i, patch in enumerate(spec.patches):
            pcid = taxonomy.name_to_id[patch.class_name]
            if pcid == base:
                continue
            ent[(ent == 0) & (cls == pcid)] = 1 + i

    row = 1 + len(spec.patches)
    for blob in spec.blobs:
        oc = origins - blob.center
        b = np.einsum("ij,ij->i", oc, dirs)
        c = np.einsum("ij,ij->i", oc, oc) - blob.radius**2
        disc = b * b - c
        ok = disc >= 0
        sq = np.sqrt(np.where(ok, disc, 0.0))
        t_near = -b - sq
        t_far = -b + sq
        t_hit = np.where(t_near > _EPS_T, t_near, t_far)
        valid = ok & (t_hit > _EPS_T)
        consider(np.where(valid, t_hit, np.inf), valid,
                 taxonomy.name_to_id[blob.class_name], row)
        row += 1

    for box in spec.boxes:
        c, s = np.cos(-box.yaw), np.sin(-box.yaw)
        o = _box_local(box, origins)
        d = np.column_stack([
            c * dirs[:, 0] - s * dirs[:, 1],
            s * dirs[:, 0] + c * dirs[:, 1],
            dirs[:, 2],
        ])
        half = box.size / 2.0
        d_safe = np.where(np.abs(d) < _EPS_T, _EPS_T, d)
        t0 = (-half[None, :] - o) / d_safe
        t1 = (half[None, :] - o) / d_safe
        t_near = np.minimum(t0, t1).max(axis=1)
        t_far = np.maximum(t0, t1).min(axis=1)
        t_hit = np.where(t_near > _EPS_T, t_near, t_far)
        valid = (t_near <= t_far) & (t_hit > _EPS_T)
        consider(np.where(valid, t_hit, np.inf), valid,
                 taxonomy.name_to_id[box.class_name], row)
        row += 1

    return t_best, cls, ent


def _pixel_dirs(view: CameraView) -> np.ndarray:
    """Unit camera-frame ray directions through pixel centers, row-major."""
    u, v = np.meshgrid(
        np.arange(view.width) + 0.5, np.arange(view.height) + 0.5, indexing="xy"
    )
    pix = np.stack([u, v, np.ones_like(u)], axis=-1).reshape(-1, 3)
    dirs = pix @ np.linalg.inv(view.K).T
    return dirs / np.linalg.norm(dirs, axis=1, keepdims=True)


def render_views(spec: SceneSpec, taxonomy: Taxonomy, t: int, noiseless: bool = False):
    """Render all rig cameras at timestamp t against the analytic scene.

    Returns a list of dicts per camera: view, geometry maps, semantic/instance
    rasters (pre-noise entity identity), and the entity row raster used for
    candidate generation. Noise follows the scene spec unless noiseless=True.
    """
    ego = spec.ego(t).T_ego
    noise = NoiseSpec() if noiseless else spec.noise
    entities = _entities(spec, taxonomy)
    out = []
    for cam_index, rig_cam in enumerate(spec.rig):
        view = rig_cam.to_view()
        T_wc = ego @ view.T
        dirs_cam = _pixel_dirs(view)
        dirs_world = dirs_cam @ T_wc[:3, :3].T
        origins = np.broadcast_to(T_wc[:3, 3], dirs_world.shape).copy()
        t_hit, cls, ent = _raycast(spec, taxonomy, origins, dirs_world)
        h, w = view.height, view.width
        hit = np.isfinite(t_hit)

        rng = _rng(spec.seed, t, cam_index, _STREAM_DEPTH)
        err = rng.normal(0.0, noise.depth_sigma, size=len(t_hit)) if noise.depth_sigma > 0 \
            else np.zeros(len(t_hit))
        s_noisy = np.where(hit, np.maximum(t_hit + err, 0.01), np.nan)
        p_cam = dirs_cam * s_noisy[:, None]
        conf = np.where(hit, noise.conf_base * np.exp(-noise.conf_decay * np.abs(err)),
                        _MISS_CONF)

        if noise.dropout > 0:
            drop = _rng(spec.seed, t, cam_index, _STREAM_DROPOUT).random(len(t_hit)) < noise.dropout
            p_cam[drop] = np.nan
            s_noisy = np.where(drop, np.nan, s_noisy)
            conf = np.where(drop, _MISS_CONF, conf)

        sem = np.where(hit, cls, taxonomy.ignore_id).astype(np.uint16)
        if noise.label_flip > 0:
            frng = _rng(spec.seed, t, cam_index, _STREAM_FLIP)
            flip = (frng.random(len(sem)) < noise.label_flip) & hit
            offs = frng.integers(1, taxonomy.num_classes, size=len(sem))
            sem = np.where(flip, (sem + offs) % taxonomy.num_classes, sem).astype(np.uint16)

        prior = np.asarray([row[3] for row in entities], dtype=np.uint16)
        inst = np.zeros(len(sem), dtype=np.uint16)
        inst[hit] = prior[ent[hit]]
        inst[sem == taxonomy.ignore_id] = 0

        geom = GeometryMaps(
            p_cam.reshape(h, w, 3).astype(np.float32),
            p_cam[:, 2].reshape(h, w).astype(np.float32),
            conf.reshape(h, w).astype(np.float32),
        )
        out.append({
            "view": view,
            "geom": geom,
            "sem": sem.reshape(h, w),
            "inst": inst.reshape(h, w),
            "ent": np.where(hit, ent, -1).reshape(h, w),
            "cam_index": cam_index,
        })
    return out


def _make_candidates(rendered, spec: SceneSpec, taxonomy: Taxonomy, rules: RuleSet,
                     t: int, min_pixels: int = 12):
    """Two overlapping candidates per visible entity: exact mask and a dilated copy.

    Scores are drawn so the exact mask usually, but not always, dominates the
    dilated one; the dilated ring exercises mask-bleed handling downstream.
    """
    entities = _entities(spec, taxonomy)
    rng = _rng(spec.seed, t, rendered["cam_index"], _STREAM_SCORE)
    candidates = []
    next_id = 0
    for row, (kind, idx, cid, _prior) in enumerate(entities):
        mask = rendered["ent"] == row
        if mask.sum() < min_pixels:
            continue
        prompt_id = rules.prompt_index[taxonomy.id_to_name[cid]]
        hi = 0.70 + 0.25 * rng.random()
        lo = 0.45 + 0.30 * rng.random()
        dilated = ndimage.binary_dilation(mask, iterations=2)
        candidates.append(MaskCandidate(prompt_id, next_id, float(hi), mask))
        candidates.append(MaskCandidate(prompt_id, next_id + 1, float(lo), dilated))
        next_id += 2
    return candidates


def render_sample(spec: SceneSpec, taxonomy: Taxonomy, rules: RuleSet, t: int):
    """Full ingest-format sample at t: (ego, [SampleView...], candidates per camera)."""
    rendered = render_views(spec, taxonomy, t)
    views = []
    candidates_by_cam = {}
    for r in rendered:
        if spec.emit == "candidates":
            cands = _make_candidates(r, spec, taxonomy, rules, t)
            priors = fuse_masks(cands, rules, taxonomy, shape=r["sem"].shape)
            candidates_by_cam[r["view"].camera_id] = cands
        else:
            score = np.where(r["sem"] != taxonomy.ignore_id, 1.0, 0.0).astype(np.float32)
            priors = ViewPriors(r["sem"].astype(np.uint16), r["inst"], score)
        views.append(SampleView(r["view"], priors, r["geom"]))
    return spec.ego(t), views, candidates_by_cam


def write_dataset(spec: SceneSpec, out_root, taxonomy: Taxonomy, rules: RuleSet | None = None,
                  write_gt: bool = True):
    """Write the scene as an ingest-format dataset plus ground-truth grids under gt/."""
    from .voxelize import save_grid  # local import keeps module load light

    out_root = Path(out_root)
    out_root.mkdir(parents=True, exist_ok=True)
    rules = rules or identity_rules(taxonomy)
    first = spec.rig[0]
    manifest = Manifest(first.width, first.height,
                        tuple(c.camera_id for c in spec.rig), spec.timestamps)
    write_manifest(out_root, manifest)
    save_taxonomy(out_root / "taxonomy.yaml", taxonomy, rules)
    for t in spec.timestamps:
        ego, views, cands = render_sample(spec, taxonomy, rules, t)
        write_sample(out_root, t, ego, views, cands if spec.emit == "candidates" else None)
    if write_gt:
        gt_dir = out_root / "gt"
        gt_dir.mkdir(exist_ok=True)
        grids, _ = generate_scene(spec, taxonomy)
        for t, grid in grids.items():
            save_grid(gt_dir / f"{t:06d}.grid", grid)
    return manifest


def observed_mask(spec: SceneSpec, taxonomy: Taxonomy, t: int, max_range: float = 60.0):
    """Voxels measured by at least one pixel ray at t (noiseless render).

    An occupied ground-truth voxel is observed only when some camera ray
    terminates in it (its surface was actually sampled); a free voxel is
    observed when any ray traverses it. With finite resolution, surface voxels
    between ray samples stay unobserved, as do grazing partial-volume cells a
    ray crosses without seeing their surface.
    """
    gs = spec.grid
    ego = spec.ego(t).T_ego
    to_ego_R = ego[:3, :3].T
    to_ego_t = -to_ego_R @ ego[:3, 3]
    gt_sem, _ = _rasterize_frame(spec, taxonomy, t)
    gt_free = (gt_sem == taxonomy.free_id).reshape(-1)

    traversed = np.zeros(int(np.prod(gs.dims)), dtype=bool)
    terminal = np.zeros_like(traversed)
    nx, ny, nz = gs.dims
    step = gs.voxel_size / 3.0

    def linear(points):
        ijk = np.floor((points - gs.origin) / gs.voxel_size).astype(np.int64)
        ok = (
            (ijk[:, 0] >= 0) & (ijk[:, 0] < nx)
            & (ijk[:, 1] >= 0) & (ijk[:, 1] < ny)
            & (ijk[:, 2] >= 0) & (ijk[:, 2] < nz)
        )
        return (ijk[ok, 0] * ny + ijk[ok, 1]) * nz + ijk[ok, 2]

    for r in render_views(spec, taxonomy, t, noiseless=True):
        view = r["view"]
        T_wc = ego @ view.T
        dirs_world = _pixel_dirs(view) @ T_wc[:3, :3].T
        origin_world = T_wc[:3, 3]
        origins = np.broadcast_to(origin_world, dirs_world.shape).copy()
        t_hit, _, _ = _raycast(spec, taxonomy, origins, dirs_world)
        t_stop = np.where(np.isfinite(t_hit), t_hit, max_range)
        o_ego = to_ego_R @ origin_world + to_ego_t
        d_ego = dirs_world @ to_ego_R.T

        hits = np.isfinite(t_hit)
        terminal[linear(o_ego + d_ego[hits] * t_hit[hits, None])] = True
        n_steps = int(np.ceil(min(float(t_stop.max()), max_range) / step))
        for k in range(n_steps + 1):
            active = k * step < t_stop
            if not active.any():
                break
            traversed[linear(o_ego + d_ego[active] * (k * step))] = True
    observed = terminal | (traversed & gt_free)
    return observed.reshape(gs.dims)


# --- scene spec file -----------------------------------------------------------

_SCENE_KEYS = {"seed", "extents", "ground_z", "ground_class", "patches", "boxes", "blobs",
               "noise", "rig", "trajectory", "grid", "emit"}


def _reject_unknown(doc, allowed, where):
    unknown = set(doc) - allowed
    if unknown:
        raise ValueError(f"unknown keys {sorted(unknown)} in {where}")


def load_scene_spec(path) -> SceneSpec:
    with open(path, "r", encoding="utf-8") as f:
        doc = yaml.safe_load(f)
    _reject_unknown(doc, _SCENE_KEYS, str(path))
    grid_doc = doc["grid"]
    _reject_unknown(grid_doc, {"bounds", "voxel_size", "z_offset"}, "grid")
    grid = GridSpec(
        tuple(tuple(b) for b in grid_doc["bounds"]),
        voxel_size=float(grid_doc.get("voxel_size", 0.4)),
        z_offset=float(grid_doc.get("z_offset", -1.0)),
    )
    patches = []
    for p in doc.get("patches", []):
        _reject_unknown(p, {"class", "rect"}, "patch")
        patches.append(GroundPatch(p["class"], tuple(float(v) for v in p["rect"])))
    boxes = []
    for b in doc.get("boxes", []):
        _reject_unknown(b, {"class", "center", "yaw_deg", "size"}, "box")
        boxes.append(SceneBox(b["class"], b["center"],
                              np.deg2rad(float(b.get("yaw_deg", 0.0))), b["size"]))
    blobs = []
    for b in doc.get("blobs", []):
        _reject_unknown(b, {"class", "center", "radius"}, "blob")
        blobs.append(SceneBlob(b["class"], b["center"], float(b["radius"])))
    rig = []
    for c in doc["rig"]:
        _reject_unknown(c, {"id", "width", "height", "fov_deg", "position", "yaw_deg",
                            "pitch_deg"}, "rig camera")
        rig.append(RigCamera(str(c["id"]), int(c["width"]), int(c["height"]),
                             float(c["fov_deg"]), c["position"],
                             float(c.get("yaw_deg", 0.0)), float(c.get("pitch_deg", 0.0))))
    trajectory = []
    for p in doc["trajectory"]:
        _reject_unknown(p, {"t", "position", "yaw_deg"}, "trajectory pose")
        trajectory.append(TrajectoryPose(int(p["t"]), p["position"],
                                         float(p.get("yaw_deg", 0.0))))
    noise_doc = doc.get("noise", {})
    _reject_unknown(noise_doc, {"depth_sigma", "label_flip", "dropout", "conf_base",
                                "conf_decay"}, "noise")
    return SceneSpec(
        seed=int(doc["seed"]),
        extents=tuple(float(v) for v in doc["extents"]),
        grid=grid,
        rig=rig,
        trajectory=trajectory,
        ground_z=float(doc.get("ground_z", 0.0)),
        ground_class=str(doc.get("ground_class", "driveable_surface")),
        patches=patches,
        boxes=boxes,
        blobs=blobs,
        noise=NoiseSpec(**{k: float(v) for k, v in noise_doc.items()}),
        emit=str(doc.get("emit", "priors")),
    )


def desk_scene(seed: int = 7, frames: int = 5, noise: NoiseSpec | None = None,
               emit: str = "priors", width: int = 160, height: int = 120) -> SceneSpec:
    """Compact multi-class scene used by the CLI preset and the test suite."""
    rig = [
        RigCamera("cam_front", width, height, 90.0, (0.3, 0.0, 1.6), 0.0, 12.0),
        RigCamera("cam_left", width, height, 90.0, (0.0, 0.3, 1.6), 90.0, 12.0),
        RigCamera("cam_back", width, height, 90.0, (-0.3, 0.0, 1.6), 180.0, 12.0),
        RigCamera("cam_right", width, height, 90.0, (0.0, -0.3, 1.6), -90.0, 12.0),
    ]
    trajectory = [
        TrajectoryPose(t, (-3.0 + 1.1 * (t - 1), 0.25 * (t - 1), 0.0), 3.0 * (t - 1))
        for t in range(1, frames + 1)
    ]
    return SceneSpec(
        seed=seed,
        extents=(-16.0, 16.0, -16.0, 16.0),
        grid=GridSpec(((-12.8, 12.8), (-12.8, 12.8), (-2.0, 4.4)),
                      voxel_size=0.4, z_offset=-0.2),
        rig=rig,
        trajectory=trajectory,
        ground_z=0.0,
        ground_class="driveable_surface",
        patches=[
            GroundPatch("sidewalk", (2.0, 11.0, -11.0, -3.5)),
            GroundPatch("terrain", (-11.0, -2.0, 3.5, 11.0)),
        ],
        boxes=[
            SceneBox("car", (4.3, 2.1, 0.8), 0.40, (4.2, 1.9, 1.6)),
            SceneBox("car", (-3.7, -3.3, 0.8), -0.90, (4.4, 1.8, 1.6)),
            SceneBox("manmade", (4.6, 8.3, 1.5), 0.05, (12.0, 0.6, 3.0)),
        ],
        blobs=[SceneBlob("vegetation", (-6.2, -6.3, 1.2), 1.8)],
        noise=noise or NoiseSpec(),
        emit=emit,
    )
