"""Confidence stabilization, reliability filtering, and lifting pixels to labeled world points."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# On-disk record layout for fused clouds (packed little-endian).
POINT_DTYPE = np.dtype(
    [
        ("xyz", "<f4", 3),
        ("sem", "<u2"),
        ("inst", "<u4"),
        ("conf", "<f4"),
        ("t", "<u2"),
        ("cam", "u1"),
        ("depth", "<f4"),
    ]
)


def pack_prior_id(t: int, cam_index: int, per_view_id) -> np.ndarray:
    """Injective global id for a per-view instance prior; 0 stays 0 (no prior).

    Requires t < 2**16, cam_index < 2**8, per_view_id < 2**16.
    """
    m = np.asarray(per_view_id, dtype=np.int64)
    packed = ((np.int64(t) * 256 + np.int64(cam_index)) * 65536) + m
    return np.where(m == 0, np.int64(0), packed)


@dataclass
class GeometryMaps:
    """Per-view geometry rasters: camera-frame points P, depth D, raw confidence C."""

    P: np.ndarray  # (H, W, 3) float32, meters
    D: np.ndarray  # (H, W) float32, meters
    C: np.ndarray  # (H, W) float32

    def __post_init__(self):
        if self.P.shape[:2] != self.D.shape or self.D.shape != self.C.shape:
            raise ValueError("geometry raster shapes disagree")


@dataclass
class WindowSpec:
    """Frame indices contributing 3D evidence to one target timestamp."""

    mode: str  # "causal" | "non_causal"
    indices: tuple[int, ...]

    def __post_init__(self):
        if self.mode not in ("causal", "non_causal"):
            raise ValueError(f"unknown window mode {self.mode!r}")
        self.indices = tuple(sorted(self.indices))


class LabeledPointCloud:
    """World-frame points with semantic label, instance prior, confidence, and provenance."""

    __slots__ = ("xyz", "sem", "inst", "conf", "t", "cam", "depth")

    def __init__(self, xyz, sem, inst, conf, t, cam, depth):
        n = len(xyz)
        self.xyz = np.asarray(xyz, dtype=np.float64).reshape(n, 3)
        self.sem = np.asarray(sem, dtype=np.uint16)
        self.inst = np.asarray(inst, dtype=np.int64)
        self.conf = np.asarray(conf, dtype=np.float32)
        self.t = np.asarray(t, dtype=np.uint16)
        self.cam = np.asarray(cam, dtype=np.uint8)
        self.depth = np.asarray(depth, dtype=np.float32)
        for name in ("sem", "inst", "conf", "t", "cam", "depth"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"field {name} length != {n}")

    def __len__(self):
        return len(self.xyz)

    @classmethod
    def empty(cls):
        return cls(
            np.zeros((0, 3)), np.zeros(0, np.uint16), np.zeros(0, np.int64),
            np.zeros(0, np.float32), np.zeros(0, np.uint16), np.zeros(0, np.uint8),
            np.zeros(0, np.float32),
        )

    @classmethod
    def concatenate(cls, clouds):
        clouds = list(clouds)
        if not clouds:
            return cls.empty()
        return cls(
            np.concatenate([c.xyz for c in clouds]),
            np.concatenate([c.sem for c in clouds]),
            np.concatenate([c.inst for c in clouds]),
            np.concatenate([c.conf for c in clouds]),
            np.concatenate([c.t for c in clouds]),
            np.concatenate([c.cam for c in clouds]),
            np.concatenate([c.depth for c in clouds]),
        )

    def select(self, index) -> "LabeledPointCloud":
        return LabeledPointCloud(
            self.xyz[index], self.sem[index], self.inst[index], self.conf[index],
            self.t[index], self.cam[index], self.depth[index],
        )

    def transformed(self, T: np.ndarray) -> "LabeledPointCloud":
        """Apply a 4x4 rigid transform to coordinates; labels unchanged."""
        xyz = self.xyz @ np.asarray(T)[:3, :3].T + np.asarray(T)[:3, 3]
        return LabeledPointCloud(xyz, self.sem, self.inst, self.conf, self.t, self.cam, self.depth)

    def to_records(self) -> np.ndarray:
        if len(self) and (self.inst.min() < 0 or self.inst.max() >= 2**32):
            raise ValueError("instance ids do not fit the u32 record field")
        rec = np.empty(len(self), dtype=POINT_DTYPE)
        rec["xyz"] = self.xyz
        rec["sem"] = self.sem
        rec["inst"] = self.inst.astype(np.uint32)
        rec["conf"] = self.conf
        rec["t"] = self.t
        rec["cam"] = self.cam
        rec["depth"] = self.depth
        return rec


def save_cloud(path, cloud: LabeledPointCloud) -> None:
    cloud.to_records().tofile(path)


def load_cloud(path) -> LabeledPointCloud:
    rec = np.fromfile(path, dtype=POINT_DTYPE)
    return LabeledPointCloud(
        rec["xyz"], rec["sem"], rec["inst"].astype(np.int64), rec["conf"],
        rec["t"], rec["cam"], rec["depth"],
    )


def stabilize_confidence(c: np.ndarray) -> np.ndarray:
    """Log-scale raw confidence; non-finite and non-positive values map to 1."""
    c = np.asarray(c, dtype=np.float64)
    out = np.ones_like(c)
    pos = np.isfinite(c) & (c > 0)
    out[pos] = np.log10(c[pos]) + 1.0
    return out


def reliability_filter(d, c_tilde, tau_c=1e-5, d_min=1.0, d_max=50.0) -> np.ndarray:
    """Pixel mask of reliable points: stabilized confidence and depth both in range.

    Closed depth interval; NaN depth always fails the comparison.
    """
    d = np.asarray(d)
    c_tilde = np.asarray(c_tilde)
    with np.errstate(invalid="ignore"):
        return (c_tilde >= tau_c) & (d >= d_min) & (d <= d_max)


def lift_view(view, priors, geom: GeometryMaps, ego, omega, taxonomy, t: int, cam_index: int):
    """Lift reliable pixels of one view into labeled world-frame points.

    Returns (cloud, n_skipped) where n_skipped counts pixels in omega whose
    camera-frame point was non-finite. Ignore-labeled pixels are lifted (they
    still carry geometry evidence) but never carry an instance prior.
    """
    omega = np.asarray(omega, dtype=bool)
    if omega.shape != geom.D.shape:
        raise ValueError("omega shape does not match the view rasters")
    flat = np.flatnonzero(omega.ravel())  # row-major scan order, deterministic
    p = geom.P.reshape(-1, 3)[flat].astype(np.float64)
    finite = np.isfinite(p).all(axis=1)
    n_skipped = int((~finite).sum())
    flat = flat[finite]
    p = p[finite]

    T = np.asarray(ego.T_ego, dtype=np.float64) @ np.asarray(view.T, dtype=np.float64)
    xyz = p @ T[:3, :3].T + T[:3, 3]

    sem = priors.sem.ravel()[flat].astype(np.uint16)
    inst_view = priors.inst.ravel()[flat].astype(np.int64)
    inst = pack_prior_id(t, cam_index, inst_view)
    inst[sem == taxonomy.ignore_id] = 0
    conf = stabilize_confidence(geom.C.ravel()[flat]).astype(np.float32)
    depth = geom.D.ravel()[flat].astype(np.float32)
    cloud = LabeledPointCloud(
        xyz, sem, inst, conf,
        np.full(len(flat), t, np.uint16), np.full(len(flat), cam_index, np.uint8), depth,
    )
    return cloud, n_skipped


def fuse_window(frames, spec: WindowSpec, target_t: int) -> LabeledPointCloud:
    """Concatenate per-frame clouds over the window, in ascending frame order.

    No deduplication: every frame contributes all its points.
    """
    if spec.mode == "causal":
        late = [i for i in spec.indices if i > target_t]
        if late:
            raise ValueError(f"causal window for t={target_t} contains future frames {late}")
    missing = [i for i in spec.indices if i not in frames]
    if missing:
        raise KeyError(f"window frames not loaded: {missing}")
    return LabeledPointCloud.concatenate(frames[i] for i in spec.indices)
