import math
from collections import Counter, defaultdict

import numpy as np
import pytest

from voxocc.lift import LabeledPointCloud
from voxocc.voxelize import GridSpec, OccupancyGrid, load_grid, save_grid, voxel_index, \
    voxel_indices, voxelize


def test_grid_spec_dims_derived():
    spec = GridSpec(((-40.0, 40.0), (-40.0, 40.0), (-10.0, 10.0)), 0.4, -1.0)
    assert spec.dims == (200, 200, 50)
    with pytest.raises(ValueError):
        GridSpec(((0.0, 0.0), (0.0, 1.0), (0.0, 1.0)), 0.4)
    with pytest.raises(ValueError):
        GridSpec(((0.0, 1.0), (0.0, 1.0), (0.0, 1.0)), -0.1)


def test_voxel_index_examples():
    spec = GridSpec(((-40.0, 40.0), (-40.0, 40.0), (-10.0, 10.0)), 0.4, z_offset=0.0)
    assert voxel_index(spec, (-40.0, -40.0, -10.0)) == (0, 0, 0)
    assert voxel_index(spec, (40.0, 0.0, 0.0)) is None  # exact max is out of bounds
    assert voxel_index(spec, (np.nan, 0.0, 0.0)) is None
    # boundary floors up: exactly-representable voxel size avoids float artifacts
    spec2 = GridSpec(((-40.0, 40.0), (-40.0, 40.0), (-10.0, 10.0)), 0.5, z_offset=0.0)
    assert voxel_index(spec2, (-39.5, -40.0, -10.0))[0] == 1


def test_voxel_index_applies_z_offset():
    spec = GridSpec(((0.0, 4.0), (0.0, 4.0), (0.0, 4.0)), 1.0, z_offset=-1.0)
    # z is shifted by the offset before indexing: index floor(z - z_offset)
    assert voxel_index(spec, (0.0, 0.0, -0.5)) == (0, 0, 0)
    assert voxel_index(spec, (0.0, 0.0, 2.5)) == (0, 0, 3)
    assert voxel_index(spec, (0.0, 0.0, 3.5)) is None


def _cloud(xyz, sem, inst):
    n = len(xyz)
    return LabeledPointCloud(
        np.asarray(xyz, float), np.asarray(sem, np.uint16), np.asarray(inst, np.int64),
        np.ones(n, np.float32), np.ones(n, np.uint16), np.zeros(n, np.uint8),
        np.ones(n, np.float32),
    )


def test_conf_formula_example(taxonomy):
    spec = GridSpec(((0.0, 1.0), (0.0, 1.0), (0.0, 1.0)), 1.0, 0.0)
    cloud = _cloud([[0.5, 0.5, 0.5]] * 10, [4] * 10, [1] * 10)
    grid = voxelize(cloud, spec, taxonomy, alpha=0.5, lam=0.35)
    assert taxonomy.num_classes == 17
    assert grid.conf[0, 0, 0] == pytest.approx(10.5 / 18.5, rel=1e-9)
    assert grid.p_occ[0, 0, 0] == pytest.approx(1 - math.exp(-0.35 * 10), rel=1e-6)
    assert grid.n[0, 0, 0] == 10
    assert grid.sem[0, 0, 0] == 4


def test_p_occ_single_point(taxonomy):
    spec = GridSpec(((0.0, 1.0), (0.0, 1.0), (0.0, 1.0)), 1.0, 0.0)
    grid = voxelize(_cloud([[0.5] * 3], [4], [1]), spec, taxonomy)
    assert grid.p_occ[0, 0, 0] == pytest.approx(1 - math.exp(-0.35), rel=1e-6)


def test_only_ignore_votes_stay_free(taxonomy):
    spec = GridSpec(((0.0, 1.0), (0.0, 1.0), (0.0, 1.0)), 1.0, 0.0)
    cloud = _cloud([[0.5] * 3] * 4, [taxonomy.ignore_id] * 4, [0] * 4)
    grid = voxelize(cloud, spec, taxonomy)
    assert grid.sem[0, 0, 0] == taxonomy.free_id
    assert grid.n[0, 0, 0] == 4  # geometry evidence still counted
    assert grid.p_occ[0, 0, 0] > 0
    assert grid.conf[0, 0, 0] == 0.0


def test_ignore_votes_excluded_from_conf_denominator(taxonomy):
    spec = GridSpec(((0.0, 1.0), (0.0, 1.0), (0.0, 1.0)), 1.0, 0.0)
    sem = [4, 4, 4, taxonomy.ignore_id, taxonomy.ignore_id]
    cloud = _cloud([[0.5] * 3] * 5, sem, [1, 1, 1, 0, 0])
    grid = voxelize(cloud, spec, taxonomy, alpha=0.5)
    # conf uses non-ignore votes only; n counts everything
    assert grid.conf[0, 0, 0] == pytest.approx((3 + 0.5) / (3 + 0.5 * 17), rel=1e-9)
    assert grid.n[0, 0, 0] == 5


def test_out_of_bounds_points_cropped(taxonomy):
    spec = GridSpec(((0.0, 1.0), (0.0, 1.0), (0.0, 1.0)), 1.0, 0.0)
    cloud = _cloud([[0.5] * 3, [5.0] * 3, [1.0, 0.5, 0.5]], [4, 4, 4], [1, 1, 1])
    grid = voxelize(cloud, spec, taxonomy)
    assert grid.n.sum() == 1


def _brute_force_voxelize(cloud, spec, taxonomy, alpha=0.5, lam=0.35, n_min=1):
    """Independent per-voxel histogram oracle: plain python floors and dicts."""
    grid = OccupancyGrid.empty(spec, taxonomy.free_id)
    support = defaultdict(int)
    votes = defaultdict(Counter)
    inst_votes = defaultdict(Counter)
    (x0, _), (y0, _), (z0, _) = spec.bounds
    sv = spec.voxel_size
    nx, ny, nz = spec.dims
    for (px, py, pz), s, i in zip(cloud.xyz.tolist(), cloud.sem.tolist(), cloud.inst.tolist()):
        ix = math.floor((px - x0) / sv)
        iy = math.floor((py - y0) / sv)
        iz = math.floor(((pz - spec.z_offset) - z0) / sv)
        if not (0 <= ix < nx and 0 <= iy < ny and 0 <= iz < nz):
            continue
        idx = (ix, iy, iz)
        support[idx] += 1
        if s != taxonomy.ignore_id:
            votes[idx][int(s)] += 1
            inst_votes[(idx, int(s))][int(i)] += 1
    for idx, n in support.items():
        grid.n[idx] = n
        grid.p_occ[idx] = np.float32(1.0 - math.exp(-lam * n))
    for idx, counter in votes.items():
        total = sum(counter.values())
        if total < n_min:
            continue
        win, count = min(counter.items(), key=lambda kv: (-kv[1], kv[0]))
        grid.sem[idx] = win
        grid.conf[idx] = np.float32((count + alpha) / (total + alpha * taxonomy.num_classes))
        iwin, _ = min(inst_votes[(idx, win)].items(), key=lambda kv: (-kv[1], kv[0]))
        grid.inst[idx] = iwin
    return grid


def _random_cloud(rng, n, taxonomy):
    xyz = rng.uniform(-0.5, 13.0, size=(n, 3))  # partially out of bounds
    sem = rng.integers(0, taxonomy.num_classes + 1, size=n).astype(np.uint16)
    sem[sem == taxonomy.num_classes] = taxonomy.ignore_id
    inst = rng.integers(0, 6, size=n).astype(np.int64)
    return _cloud(xyz, sem, inst)


def test_voxelize_matches_brute_force(taxonomy):
    spec = GridSpec(((0.0, 12.8), (0.0, 12.8), (0.0, 12.8)), 0.4, 0.0)
    rng = np.random.default_rng(99)
    for trial in range(10):
        cloud = _random_cloud(rng, int(rng.integers(50, 3000)), taxonomy)
        got = voxelize(cloud, spec, taxonomy)
        want = _brute_force_voxelize(cloud, spec, taxonomy)
        assert got.equals(want), f"trial {trial}"


def test_voxelize_permutation_invariant(taxonomy):
    spec = GridSpec(((0.0, 6.4), (0.0, 6.4), (0.0, 6.4)), 0.4, 0.0)
    rng = np.random.default_rng(17)
    cloud = _random_cloud(rng, 800, taxonomy)
    base = voxelize(cloud, spec, taxonomy)
    perm = rng.permutation(len(cloud))
    shuffled = voxelize(cloud.select(perm), spec, taxonomy)
    assert base.equals(shuffled)


def test_voxelize_monotone_in_points(taxonomy):
    spec = GridSpec(((0.0, 6.4), (0.0, 6.4), (0.0, 6.4)), 0.4, 0.0)
    rng = np.random.default_rng(18)
    cloud = _random_cloud(rng, 400, taxonomy)
    g1 = voxelize(cloud, spec, taxonomy)
    extra = _random_cloud(rng, 100, taxonomy)
    g2 = voxelize(LabeledPointCloud.concatenate([cloud, extra]), spec, taxonomy)
    assert (g2.n >= g1.n).all()
    assert (g2.p_occ >= g1.p_occ - 1e-7).all()


def test_grid_file_roundtrip(tmp_path, taxonomy):
    spec = GridSpec(((0.0, 6.4), (0.0, 6.4), (0.0, 3.2)), 0.4, -0.5)
    rng = np.random.default_rng(19)
    grid = voxelize(_random_cloud(rng, 500, taxonomy), spec, taxonomy)
    path = tmp_path / "g.grid"
    save_grid(path, grid)
    back = load_grid(path)
    assert back.equals(grid)
    # byte-determinism: saving the reloaded grid reproduces the file exactly
    path2 = tmp_path / "g2.grid"
    save_grid(path2, back)
    assert path.read_bytes() == path2.read_bytes()


def test_grid_file_rejects_garbage(tmp_path):
    path = tmp_path / "bad.grid"
    path.write_bytes(b"NOTAGRID" + b"\x00" * 100)
    with pytest.raises(ValueError, match="not a grid file"):
        load_grid(path)
