"""On-disk sample format: multi-camera frames, raw mask candidates, per-view priors.

Dataset layout::

    <root>/manifest                 width/height, camera ids, sample indices (YAML)
    <root>/<t>/ego.txt              ego-to-world transform, 16 floats row-major
    <root>/<t>/<camera_id>/
        camera.txt                  K (9 floats) then T camera-to-ego (16 floats)
        depth.f32                   H*W float32 LE, meters
        conf.f32                    H*W float32 LE, raw model confidence
        points.f32                  H*W*3 float32 LE, camera frame, meters
        sem.u16 / inst.u16          H*W uint16 LE
        candidates/                 optional raw candidates: NNNN.mask.u8 + NNNN.meta.txt

All rasters are row-major little-endian with no header; the manifest is the
authority for dimensions.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .lift import GeometryMaps
from .taxonomy import RuleSet, Taxonomy

log = logging.getLogger(__name__)


class LoadError(ValueError):
    pass


@dataclass
class CameraView:
    camera_id: str
    width: int
    height: int
    K: np.ndarray  # (3, 3) intrinsics, pixels
    T: np.ndarray  # (4, 4) camera-to-ego, meters

    def __post_init__(self):
        self.K = np.asarray(self.K, dtype=np.float64).reshape(3, 3)
        self.T = np.asarray(self.T, dtype=np.float64).reshape(4, 4)
        if self.K[0, 0] <= 0 or self.K[1, 1] <= 0:
            raise LoadError(f"camera {self.camera_id}: non-positive focal length")
        _check_rigid(self.T, f"camera {self.camera_id} extrinsics")


@dataclass
class EgoPose:
    t: int
    T_ego: np.ndarray  # (4, 4) ego-to-world

    def __post_init__(self):
        self.T_ego = np.asarray(self.T_ego, dtype=np.float64).reshape(4, 4)
        _check_rigid(self.T_ego, f"ego pose t={self.t}")


def _check_rigid(T, what):
    if not np.allclose(T[3], (0, 0, 0, 1), atol=1e-9):
        raise LoadError(f"{what}: bottom row is not (0,0,0,1)")
    R = T[:3, :3]
    if not np.allclose(R @ R.T, np.eye(3), atol=1e-6):
        raise LoadError(f"{what}: rotation block is not orthonormal")


@dataclass
class MaskCandidate:
    prompt_id: int
    candidate_id: int
    score: float
    mask: np.ndarray  # (H, W) bool

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if not np.isfinite(self.score):
            raise LoadError(f"candidate ({self.prompt_id},{self.candidate_id}): non-finite score")


@dataclass
class ViewPriors:
    """Per-view fused semantic/instance priors plus the winning candidate score."""

    sem: np.ndarray  # (H, W) uint16 class ids (or ignore)
    inst: np.ndarray  # (H, W) uint16 per-view prior ids, 0 = none
    score: np.ndarray  # (H, W) float32


@dataclass
class SampleView:
    view: CameraView
    priors: ViewPriors
    geom: GeometryMaps


@dataclass
class Manifest:
    width: int
    height: int
    cameras: tuple[str, ...]
    samples: tuple[int, ...]


def fuse_masks(candidates, rules: RuleSet, taxonomy: Taxonomy, shape=None) -> ViewPriors:
    """Fuse raw mask candidates into per-view semantic and instance priors.

    Per pixel the highest-scoring covering candidate wins, unless a declared
    over/under precedence relation between prompts overrides the score order.
    Score ties break by lower prompt_id, then lower candidate_id, so the result
    is invariant to the candidate list order. Per-view instance prior ids are
    the 1-based rank of the winning candidate under (prompt_id, candidate_id).
    """
    candidates = list(candidates)
    if not candidates and shape is None:
        raise ValueError("empty candidate list needs an explicit raster shape")
    shape = shape or candidates[0].mask.shape
    sem = np.full(shape, taxonomy.ignore_id, dtype=np.uint16)
    inst = np.zeros(shape, dtype=np.uint16)
    score = np.zeros(shape, dtype=np.float32)
    if not candidates:
        return ViewPriors(sem, inst, score)

    keys = [(c.prompt_id, c.candidate_id) for c in candidates]
    if len(set(keys)) != len(keys):
        raise LoadError("duplicate (prompt_id, candidate_id) among candidates")
    for c in candidates:
        if c.mask.shape != shape:
            raise LoadError(
                f"candidate ({c.prompt_id},{c.candidate_id}) mask shape {c.mask.shape} != {shape}"
            )
        if not 0 <= c.prompt_id < len(rules):
            raise LoadError(f"candidate prompt_id {c.prompt_id} outside the rule set")

    # Content-derived per-view ids keep the output permutation-invariant.
    canonical = sorted(range(len(candidates)), key=lambda i: keys[i])
    view_id = np.zeros(len(candidates), dtype=np.uint16)
    for rank, i in enumerate(canonical):
        view_id[i] = rank + 1

    # Score pass: paint in ascending priority so the last write wins.
    by_priority = sorted(
        range(len(candidates)),
        key=lambda i: (-candidates[i].score, candidates[i].prompt_id, candidates[i].candidate_id),
    )
    winner = np.full(shape, -1, dtype=np.int32)
    for i in reversed(by_priority):
        winner[candidates[i].mask] = i

    # Precedence pass: climb the (acyclic) over-relation until a fixpoint.
    prompt_of = np.asarray([c.prompt_id for c in candidates], dtype=np.int32)
    covered = winner >= 0
    for _ in range(len(rules)):
        cur_prompt = np.where(covered, prompt_of[np.where(covered, winner, 0)], -1)
        override = np.full(shape, -1, dtype=np.int32)
        for i in reversed(by_priority):
            eligible = candidates[i].mask & covered
            if not eligible.any():
                continue
            beats = np.zeros(shape, dtype=bool)
            beats[eligible] = rules.over[prompt_of[i], cur_prompt[eligible]]
            override[beats] = i
        if (override < 0).all():
            break
        winner = np.where(override >= 0, override, winner)

    idx = np.where(covered, winner, 0)
    targets = rules.target_ids[prompt_of[idx]]
    scores = np.asarray([c.score for c in candidates], dtype=np.float32)[idx]
    sem[covered] = targets[covered]
    inst[covered] = view_id[idx][covered]
    score[covered] = scores[covered]
    return ViewPriors(sem, inst, score)


# --- raw binary helpers -------------------------------------------------------

def _read_array(path: Path, dtype, count: int) -> np.ndarray:
    """Single seam for raster reads; tests trace file access through it."""
    if not path.is_file():
        raise LoadError(f"missing file {path}")
    data = np.fromfile(path, dtype=dtype)
    if data.size != count:
        raise LoadError(f"{path}: expected {count} values of {np.dtype(dtype)}, found {data.size}")
    return data


def _read_floats(path: Path, count: int) -> np.ndarray:
    if not path.is_file():
        raise LoadError(f"missing file {path}")
    try:
        vals = np.loadtxt(path, dtype=np.float64).ravel()
    except ValueError as e:
        raise LoadError(f"{path}: malformed numeric file ({e})") from e
    if vals.size != count:
        raise LoadError(f"{path}: expected {count} floats, found {vals.size}")
    return vals


def load_manifest(root) -> Manifest:
    path = Path(root) / "manifest"
    if not path.is_file():
        raise LoadError(f"missing manifest {path}")
    with open(path, "r", encoding="utf-8") as f:
        doc = yaml.safe_load(f)
    unknown = set(doc) - {"width", "height", "cameras", "samples"}
    if unknown:
        raise LoadError(f"{path}: unknown manifest keys {sorted(unknown)}")
    try:
        return Manifest(
            width=int(doc["width"]),
            height=int(doc["height"]),
            cameras=tuple(str(c) for c in doc["cameras"]),
            samples=tuple(int(s) for s in doc["samples"]),
        )
    except KeyError as e:
        raise LoadError(f"{path}: missing manifest key {e}") from e


def write_manifest(root, manifest: Manifest) -> None:
    doc = {
        "width": manifest.width,
        "height": manifest.height,
        "cameras": list(manifest.cameras),
        "samples": list(manifest.samples),
    }
    with open(Path(root) / "manifest", "w", encoding="utf-8") as f:
        yaml.safe_dump(doc, f, sort_keys=False)


def _load_camera(path: Path, camera_id: str, width: int, height: int) -> CameraView:
    vals = _read_floats(path, 25)
    return CameraView(camera_id, width, height, vals[:9].reshape(3, 3), vals[9:].reshape(4, 4))


def _load_candidates(cand_dir: Path, h: int, w: int):
    metas = sorted(cand_dir.glob("*.meta.txt"))
    candidates = []
    for meta_path in metas:
        stem = meta_path.name[: -len(".meta.txt")]
        fields = {}
        with open(meta_path, "r", encoding="utf-8") as f:
            for line in f:
                if line.strip():
                    key, value = line.split(maxsplit=1)
                    fields[key] = value.strip()
        try:
            prompt_id = int(fields["prompt_id"])
            score = float(fields["score"])
        except (KeyError, ValueError) as e:
            raise LoadError(f"{meta_path}: malformed candidate metadata ({e})") from e
        mask = _read_array(cand_dir / f"{stem}.mask.u8", np.uint8, h * w).reshape(h, w)
        candidates.append(MaskCandidate(prompt_id, int(stem), score, mask > 0))
    return candidates


def load_sample(root, t: int, taxonomy: Taxonomy, rules: RuleSet, manifest: Manifest | None = None):
    """Load all camera views of sample t.

    Returns (ego_pose, [SampleView, ...]) in manifest camera order. When a view
    ships raw candidates they are fused on the fly; otherwise the pre-fused
    sem/inst rasters are used. Unknown semantic values map to ignore with a
    logged warning.
    """
    root = Path(root)
    manifest = manifest or load_manifest(root)
    if t not in manifest.samples:
        raise LoadError(f"sample {t} not listed in {root / 'manifest'}")
    h, w = manifest.height, manifest.width
    sample_dir = root / str(t)
    ego = EgoPose(t, _read_floats(sample_dir / "ego.txt", 16).reshape(4, 4))

    views = []
    for camera_id in manifest.cameras:
        cam_dir = sample_dir / camera_id
        view = _load_camera(cam_dir / "camera.txt", camera_id, w, h)
        depth = _read_array(cam_dir / "depth.f32", "<f4", h * w).reshape(h, w)
        conf = _read_array(cam_dir / "conf.f32", "<f4", h * w).reshape(h, w)
        points = _read_array(cam_dir / "points.f32", "<f4", h * w * 3).reshape(h, w, 3)
        both = np.isfinite(depth) & np.isfinite(points[..., 2])
        if both.any():
            err = np.abs(depth[both] - points[both][:, 2])
            if err.max() > 1e-4:
                raise LoadError(
                    f"{cam_dir / 'depth.f32'} disagrees with {cam_dir / 'points.f32'}: "
                    f"max |D - P_z| = {err.max():.2e} m"
                )
        geom = GeometryMaps(points, depth, conf)

        cand_dir = cam_dir / "candidates"
        if cand_dir.is_dir():
            candidates = _load_candidates(cand_dir, h, w)
            priors = fuse_masks(candidates, rules, taxonomy, shape=(h, w))
        else:
            sem = _read_array(cam_dir / "sem.u16", "<u2", h * w).reshape(h, w)
            inst = _read_array(cam_dir / "inst.u16", "<u2", h * w).reshape(h, w)
            known = taxonomy.semantic_value_mask(sem) | (sem == taxonomy.ignore_id)
            if not known.all():
                bad = np.unique(sem[~known])
                log.warning(
                    "%s: %d pixels with unknown labels %s mapped to ignore",
                    cam_dir / "sem.u16", int((~known).sum()), bad.tolist(),
                )
                sem = np.where(known, sem, taxonomy.ignore_id).astype(np.uint16)
            inst = np.where(sem == taxonomy.ignore_id, 0, inst).astype(np.uint16)
            priors = ViewPriors(sem, inst, np.where(sem == taxonomy.ignore_id, 0, 1).astype(np.float32))
        views.append(SampleView(view, priors, geom))
    return ego, views


def write_sample(root, t: int, ego: EgoPose, views, candidates_by_cam=None) -> None:
    """Write one sample in the dataset layout. Inverse of load_sample for rasters."""
    sample_dir = Path(root) / str(t)
    sample_dir.mkdir(parents=True, exist_ok=True)
    np.savetxt(sample_dir / "ego.txt", ego.T_ego.reshape(-1), fmt="%.17g")
    for sv in views:
        cam_dir = sample_dir / sv.view.camera_id
        cam_dir.mkdir(parents=True, exist_ok=True)
        np.savetxt(
            cam_dir / "camera.txt",
            np.concatenate([sv.view.K.reshape(-1), sv.view.T.reshape(-1)]),
            fmt="%.17g",
        )
        sv.geom.D.astype("<f4").tofile(cam_dir / "depth.f32")
        sv.geom.C.astype("<f4").tofile(cam_dir / "conf.f32")
        sv.geom.P.astype("<f4").tofile(cam_dir / "points.f32")
        sv.priors.sem.astype("<u2").tofile(cam_dir / "sem.u16")
        sv.priors.inst.astype("<u2").tofile(cam_dir / "inst.u16")
        if candidates_by_cam and sv.view.camera_id in candidates_by_cam:
            cand_dir = cam_dir / "candidates"
            cand_dir.mkdir(exist_ok=True)
            for c in candidates_by_cam[sv.view.camera_id]:
                stem = f"{c.candidate_id:04d}"
                c.mask.astype(np.uint8).tofile(cand_dir / f"{stem}.mask.u8")
                with open(cand_dir / f"{stem}.meta.txt", "w", encoding="utf-8") as f:
                    f.write(f"prompt_id {c.prompt_id}\nscore {c.score!r}\n")
