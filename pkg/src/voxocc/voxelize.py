"""Dense voxel grids from labeled clouds: majority voting, vote confidence, support."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .lift import LabeledPointCloud
from .taxonomy import Taxonomy

_GRID_MAGIC = b"VOXGRID0"
_GRID_VERSION = 1


@dataclass
class GridSpec:
    """Ego-centric lattice geometry. dims are derived from bounds and voxel size."""

    bounds: tuple  # ((xmin, xmax), (ymin, ymax), (zmin, zmax)) meters
    voxel_size: float = 0.4
    z_offset: float = -1.0
    dims: tuple = field(init=False)

    def __post_init__(self):
        b = tuple((float(lo), float(hi)) for lo, hi in self.bounds)
        if self.voxel_size <= 0:
            raise ValueError("voxel_size must be positive")
        dims = []
        for lo, hi in b:
            if hi <= lo:
                raise ValueError(f"empty bounds ({lo}, {hi})")
            dims.append(int(round((hi - lo) / self.voxel_size)))
        if any(d <= 0 for d in dims):
            raise ValueError("grid has a zero-sized axis")
        self.bounds = b
        self.dims = tuple(dims)

    @property
    def origin(self) -> np.ndarray:
        """World coordinates of the (0,0,0) voxel corner (z already carries z_offset)."""
        return np.array(
            [self.bounds[0][0], self.bounds[1][0], self.bounds[2][0] + self.z_offset]
        )

    def voxel_centers_axis(self, axis: int) -> np.ndarray:
        lo = self.origin[axis]
        return lo + (np.arange(self.dims[axis]) + 0.5) * self.voxel_size

    def __eq__(self, other):
        return (
            isinstance(other, GridSpec)
            and self.bounds == other.bounds
            and self.voxel_size == other.voxel_size
            and self.z_offset == other.z_offset
        )


def voxel_indices(spec: GridSpec, xyz: np.ndarray):
    """Vectorized point-to-voxel mapping. Returns (ijk int array, in-bounds mask).

    Half-open voxels: a coordinate exactly at the upper bound is out of bounds.
    """
    xyz = np.atleast_2d(np.asarray(xyz, dtype=np.float64))
    rel = (xyz - spec.origin) / spec.voxel_size
    with np.errstate(invalid="ignore"):
        ijk = np.floor(rel).astype(np.int64)
        ok = np.isfinite(rel).all(axis=1)
    for axis in range(3):
        ok &= (ijk[:, axis] >= 0) & (ijk[:, axis] < spec.dims[axis])
    return ijk, ok


def voxel_index(spec: GridSpec, xyz):
    """Single-point variant: (i, j, k) or None when out of bounds."""
    ijk, ok = voxel_indices(spec, np.asarray(xyz, dtype=np.float64).reshape(1, 3))
    if not ok[0]:
        return None
    return tuple(int(v) for v in ijk[0])


class OccupancyGrid:
    """Dense voxel lattice: semantic label, instance id, support n, vote confidence, reliability."""

    __slots__ = ("spec", "sem", "inst", "n", "conf", "p_occ")

    def __init__(self, spec, sem, inst, n, conf, p_occ):
        self.spec = spec
        self.sem = np.asarray(sem, dtype=np.uint16)
        self.inst = np.asarray(inst, dtype=np.uint32)
        self.n = np.asarray(n, dtype=np.uint32)
        self.conf = np.asarray(conf, dtype=np.float32)
        self.p_occ = np.asarray(p_occ, dtype=np.float32)
        for name in ("sem", "inst", "n", "conf", "p_occ"):
            if getattr(self, name).shape != spec.dims:
                raise ValueError(f"grid field {name} shape != {spec.dims}")

    @classmethod
    def empty(cls, spec: GridSpec, free_id: int):
        dims = spec.dims
        return cls(
            spec,
            np.full(dims, free_id, dtype=np.uint16),
            np.zeros(dims, dtype=np.uint32),
            np.zeros(dims, dtype=np.uint32),
            np.zeros(dims, dtype=np.float32),
            np.zeros(dims, dtype=np.float32),
        )

    def copy(self) -> "OccupancyGrid":
        return OccupancyGrid(
            self.spec, self.sem.copy(), self.inst.copy(), self.n.copy(),
            self.conf.copy(), self.p_occ.copy(),
        )

    def occupied_mask(self, taxonomy: Taxonomy) -> np.ndarray:
        return (self.sem != taxonomy.free_id) & (self.sem != taxonomy.ignore_id)

    def equals(self, other: "OccupancyGrid") -> bool:
        return (
            self.spec == other.spec
            and np.array_equal(self.sem, other.sem)
            and np.array_equal(self.inst, other.inst)
            and np.array_equal(self.n, other.n)
            and np.array_equal(self.conf, other.conf)
            and np.array_equal(self.p_occ, other.p_occ)
        )


def vote_confidence(n_win, n_votes, num_classes: int, alpha: float = 0.5):
    """Dirichlet-smoothed confidence of the winning class: (n_win + a) / (n + a*K)."""
    return (np.asarray(n_win, dtype=np.float64) + alpha) / (
        np.asarray(n_votes, dtype=np.float64) + alpha * num_classes
    )


def support_reliability(n, lam: float = 0.35):
    """Saturating reliability from point support: 1 - exp(-lam * n)."""
    return 1.0 - np.exp(-lam * np.asarray(n, dtype=np.float64))


def _group_argmax(group: np.ndarray, value: np.ndarray, count: np.ndarray):
    """First index per group after sorting by (group, -count, value): the winner row."""
    order = np.lexsort((value, -count, group))
    g_sorted = group[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = g_sorted[1:] != g_sorted[:-1]
    return order[first]


def voxelize(cloud: LabeledPointCloud, spec: GridSpec, taxonomy: Taxonomy,
             alpha: float = 0.5, lam: float = 0.35, n_min: int = 1) -> OccupancyGrid:
    """Vote-based voxelization of a labeled cloud.

    Per voxel: the winning class maximizes the non-ignore vote count (ties to
    the smaller class id); conf = (n_win + alpha) / (n_votes + alpha*K) with K
    the number of semantic classes; p_occ = 1 - exp(-lam * n) saturates with
    total point support n (ignore-labeled points included). Voxels with no
    non-ignore votes stay free. The instance id is the majority id among
    winning-class points (ties to the smaller id).
    """
    grid = OccupancyGrid.empty(spec, taxonomy.free_id)
    if len(cloud) == 0:
        return grid
    ijk, ok = voxel_indices(spec, cloud.xyz)
    if not ok.any():
        return grid
    nx, ny, nz = spec.dims
    lin = (ijk[ok, 0] * ny + ijk[ok, 1]) * nz + ijk[ok, 2]
    sem = cloud.sem[ok]
    inst = cloud.inst[ok]

    # total point support, ignore votes included
    occ_lin, occ_n = np.unique(lin, return_counts=True)
    grid.n.reshape(-1)[occ_lin] = occ_n
    grid.p_occ.reshape(-1)[occ_lin] = support_reliability(occ_n, lam).astype(np.float32)

    votes = sem != taxonomy.ignore_id
    if not votes.any():
        return grid
    vlin = lin[votes]
    vsem = sem[votes].astype(np.int64)
    vinst = inst[votes]

    k = taxonomy.num_classes
    pair, pair_n = np.unique(vlin * k + vsem, return_counts=True)
    pv, pc = pair // k, pair % k
    win_rows = _group_argmax(pv, pc, pair_n)
    win_lin = pv[win_rows]  # ascending: one row per voted voxel
    win_cls = pc[win_rows]
    win_cnt = pair_n[win_rows]
    # pair rows are sorted by (voxel, class); sum counts per voxel
    _, start = np.unique(pv, return_index=True)
    votes_per_voxel = np.add.reduceat(pair_n, start)

    keep = votes_per_voxel >= n_min
    win_lin, win_cls, win_cnt, votes_per_voxel = (
        win_lin[keep], win_cls[keep], win_cnt[keep], votes_per_voxel[keep]
    )
    if len(win_lin) == 0:
        return grid

    conf = vote_confidence(win_cnt, votes_per_voxel, k, alpha)
    grid.sem.reshape(-1)[win_lin] = win_cls.astype(np.uint16)
    grid.conf.reshape(-1)[win_lin] = conf.astype(np.float32)

    # majority instance among winning-class points
    winner_arr = np.full(nx * ny * nz, -1, dtype=np.int64)
    winner_arr[win_lin] = win_cls
    onwin = winner_arr[vlin] == vsem
    wlin = vlin[onwin]
    winst = vinst[onwin]
    if len(wlin):
        if winst.min() < 0 or winst.max() >= 2**32:
            raise ValueError("instance ids do not fit the grid's u32 field")
        key, counts = np.unique(wlin * np.int64(2**32) + winst, return_counts=True)
        klin, kinst = key >> np.int64(32), key & np.int64(2**32 - 1)
        rows = _group_argmax(klin, kinst, counts)
        grid.inst.reshape(-1)[klin[rows]] = kinst[rows].astype(np.uint32)
    return grid


def save_grid(path, grid: OccupancyGrid) -> None:
    """Write the grid file: fixed header then dense x-major arrays, little-endian."""
    spec = grid.spec
    header = struct.pack(
        "<8sI6ddd3I",
        _GRID_MAGIC,
        _GRID_VERSION,
        *(v for pair in spec.bounds for v in pair),
        spec.voxel_size,
        spec.z_offset,
        *spec.dims,
    )
    with open(path, "wb") as f:
        f.write(header)
        f.write(grid.sem.astype("<u2").tobytes(order="C"))
        f.write(grid.inst.astype("<u4").tobytes(order="C"))
        f.write(grid.n.astype("<u4").tobytes(order="C"))
        f.write(grid.conf.astype("<f4").tobytes(order="C"))
        f.write(grid.p_occ.astype("<f4").tobytes(order="C"))


def load_grid(path) -> OccupancyGrid:
    head_fmt = "<8sI6ddd3I"
    head_size = struct.calcsize(head_fmt)
    with open(path, "rb") as f:
        head = f.read(head_size)
        if len(head) != head_size:
            raise ValueError(f"{path}: truncated grid header")
        fields = struct.unpack(head_fmt, head)
        if fields[0] != _GRID_MAGIC:
            raise ValueError(f"{path}: not a grid file")
        if fields[1] != _GRID_VERSION:
            raise ValueError(f"{path}: unsupported grid version {fields[1]}")
        bounds = ((fields[2], fields[3]), (fields[4], fields[5]), (fields[6], fields[7]))
        spec = GridSpec(bounds, voxel_size=fields[8], z_offset=fields[9])
        dims = tuple(fields[10:13])
        if spec.dims != dims:
            raise ValueError(f"{path}: header dims {dims} disagree with derived {spec.dims}")
        count = int(np.prod(dims))
        sem = np.frombuffer(f.read(count * 2), dtype="<u2").reshape(dims)
        inst = np.frombuffer(f.read(count * 4), dtype="<u4").reshape(dims)
        n = np.frombuffer(f.read(count * 4), dtype="<u4").reshape(dims)
        conf = np.frombuffer(f.read(count * 4), dtype="<f4").reshape(dims)
        p_occ = np.frombuffer(f.read(count * 4), dtype="<f4").reshape(dims)
    return OccupancyGrid(spec, sem.copy(), inst.copy(), n.copy(), conf.copy(), p_occ.copy())
