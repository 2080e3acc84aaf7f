"""Deterministic four-stage occupancy refinement.

Stage 1 closes pinholes and fills dense cavities, stage 2 optionally completes
the near-ego blind region with driveable surface in early causal frames,
stage 3 is a single conservative coherence pass over occupied voxels, and
stage 4 cleans residual ignore voxels and dilates instance ids inside thing
regions. Every stage reads a snapshot of its input and writes a fresh grid, so
results do not depend on voxel iteration order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .taxonomy import Taxonomy, stuff_instance_id
from .voxelize import OccupancyGrid

_N26 = np.ones((3, 3, 3), dtype=np.int32)
_N26[1, 1, 1] = 0


@dataclass
class NeighborhoodStats:
    modal_class: int | None  # most frequent occupied class among the 26 neighbors
    modal_support: int
    n_occ: int  # occupied (non-free, non-ignore) neighbor count


@dataclass
class RefineConfig:
    stage1_pinholes: bool = True
    stage2_ego: bool = True
    stage3_coherence: bool = True
    stage4_cleanup: bool = True
    fill_support: int = 4
    cavity_fill: bool = True  # stage-1 sub-rule; densifies seams on sparse real data
    cavity_n_occ: int = 10
    cavity_support: int = 5
    freeze_conf: float = 0.75
    freeze_p_occ: float = 0.85
    coherence_support: int = 5
    coherence_frac: float = 0.6
    cleanup_support: int = 2
    dilation_radius: int = 2  # voxels, Euclidean
    ego_radius: float = 10.0  # meters
    ego_layers: int = 3  # near-ground band: layers above the z offset
    ego_planar_dilation: int = 2  # voxels, Euclidean, xy only
    ego_object_dilation: int = 1  # voxels, Chebyshev, 3D
    driveable_class: str = "driveable_surface"
    thin_classes: tuple[str, ...] = ("barrier", "traffic_cone")


def _neighbor_count(mask: np.ndarray) -> np.ndarray:
    return ndimage.correlate(mask.astype(np.int32), _N26, mode="constant", cval=0)


def _modal_fields(sem: np.ndarray, taxonomy: Taxonomy):
    """Per-voxel modal occupied class over the truncated 26-neighborhood.

    Returns (modal class, -1 where no occupied neighbor; modal support; n_occ).
    Count ties resolve to the smaller class id.
    """
    occupied = (sem != taxonomy.free_id) & (sem != taxonomy.ignore_id)
    n_occ = _neighbor_count(occupied)
    modal = np.full(sem.shape, -1, dtype=np.int32)
    best = np.zeros(sem.shape, dtype=np.int32)
    for cid in range(taxonomy.num_classes):
        cnt = _neighbor_count(sem == cid)
        better = cnt > best
        modal[better] = cid
        best[better] = cnt[better]
    return modal, best, n_occ


def neighborhood_stats(grid: OccupancyGrid, v, taxonomy: Taxonomy) -> NeighborhoodStats:
    """Stats of the 3x3x3 neighborhood around v (v excluded, borders truncated)."""
    i, j, k = v
    sl = tuple(slice(max(c - 1, 0), c + 2) for c in (i, j, k))
    block = grid.sem[sl]
    center = (i - sl[0].start, j - sl[1].start, k - sl[2].start)
    mask = np.ones(block.shape, dtype=bool)
    mask[center] = False
    labels = block[mask]
    occ = (labels != taxonomy.free_id) & (labels != taxonomy.ignore_id)
    n_occ = int(occ.sum())
    if n_occ == 0:
        return NeighborhoodStats(None, 0, 0)
    vals, counts = np.unique(labels[occ], return_counts=True)
    best = np.argmax(counts)  # unique() sorts values, so ties go to the smaller id
    return NeighborhoodStats(int(vals[best]), int(counts[best]), n_occ)


def _closing(occupied: np.ndarray) -> np.ndarray:
    """3D morphological closing with a 3x3x3 element; outside the grid counts as free."""
    box = np.ones((3, 3, 3), dtype=bool)
    padded = np.pad(occupied, 2, constant_values=False)
    closed = ndimage.binary_erosion(
        ndimage.binary_dilation(padded, structure=box), structure=box, border_value=0
    )
    return closed[2:-2, 2:-2, 2:-2]


def _stuff_or_zero(taxonomy: Taxonomy) -> np.ndarray:
    """Lookup: class id -> canonical stuff instance id, 0 for thing classes."""
    out = np.zeros(taxonomy.num_classes, dtype=np.uint32)
    for cid in range(taxonomy.num_classes):
        if cid not in taxonomy.thing_ids:
            out[cid] = stuff_instance_id(cid)
    return out


def _apply_fill(grid: OccupancyGrid, mask, modal, support, n_occ, taxonomy: Taxonomy):
    """Fill voxels with the modal class. Filled voxels stay non-frozen: n=0, p_occ=0."""
    if not mask.any():
        return
    new_sem = modal[mask].astype(np.uint16)
    grid.sem[mask] = new_sem
    frac = support[mask] / np.maximum(n_occ[mask], 1)
    grid.conf[mask] = frac.astype(np.float32)
    grid.n[mask] = 0
    grid.p_occ[mask] = 0.0
    grid.inst[mask] = _stuff_or_zero(taxonomy)[new_sem]


def fill_pinholes_and_cavities(grid: OccupancyGrid, taxonomy: Taxonomy,
                               cfg: RefineConfig) -> OccupancyGrid:
    """Stage 1: close pinholes via morphological closing, then fill dense cavities.

    Closed voxels that were free/ignore adopt the modal class at modal support
    >= fill_support. Remaining free/ignore voxels fill under the stricter
    cavity rule: n_occ >= cavity_n_occ and modal support >= cavity_support.
    The cavity sub-pass reads the snapshot left by the closing sub-pass.
    """
    out = grid.copy()
    occ = grid.occupied_mask(taxonomy)
    modal, support, n_occ = _modal_fields(grid.sem, taxonomy)
    fill = ~occ & _closing(occ) & (support >= cfg.fill_support) & (modal >= 0)
    _apply_fill(out, fill, modal, support, n_occ, taxonomy)

    if cfg.cavity_fill:
        modal, support, n_occ = _modal_fields(out.sem, taxonomy)
        fillable = ~out.occupied_mask(taxonomy)
        cavity = (
            fillable & (n_occ >= cfg.cavity_n_occ) & (support >= cfg.cavity_support)
            & (modal >= 0)
        )
        _apply_fill(out, cavity, modal, support, n_occ, taxonomy)
    return out


def _disk_offsets(radius: float):
    r = int(np.floor(radius))
    offs = [
        (dx, dy)
        for dx in range(-r, r + 1)
        for dy in range(-r, r + 1)
        if dx * dx + dy * dy <= radius * radius
    ]
    return offs


def warmup_ego_completion(grid: OccupancyGrid, taxonomy: Taxonomy,
                          cfg: RefineConfig) -> OccupancyGrid:
    """Stage 2: fill unknown near-ground voxels around the ego as driveable surface.

    Only voxels within the horizontal ego radius and the near-ground band are
    candidates, and only when they sit inside a small planar dilation of
    existing driveable evidence and outside a small 3D dilation of thing voxels.
    """
    drive_id = taxonomy.name_to_id.get(cfg.driveable_class)
    if drive_id is None:
        return grid.copy()
    out = grid.copy()
    spec = grid.spec

    cx = spec.voxel_centers_axis(0)
    cy = spec.voxel_centers_axis(1)
    horiz = (cx[:, None] ** 2 + cy[None, :] ** 2) <= cfg.ego_radius**2

    # band: ego_layers voxel layers starting at the layer containing world z == z_offset
    k0 = int(np.floor((0.0 - spec.bounds[2][0]) / spec.voxel_size))
    band = np.zeros(spec.dims[2], dtype=bool)
    band[max(k0, 0): max(k0 + cfg.ego_layers, 0)] = True

    drive2d = (grid.sem == drive_id).any(axis=2)
    near_drive = np.zeros_like(drive2d)
    for dx, dy in _disk_offsets(cfg.ego_planar_dilation):
        near_drive |= _shift2d(drive2d, dx, dy)
    # only truly blind columns: near driveable evidence but with no surface of
    # their own anywhere in the near-ground band

    thing = np.isin(grid.sem, list(taxonomy.thing_ids))
    size = 2 * cfg.ego_object_dilation + 1
    near_thing = ndimage.binary_dilation(thing, structure=np.ones((size, size, size), bool))

    occupied = grid.occupied_mask(taxonomy)
    blind = near_drive & ~(occupied & band[None, None, :]).any(axis=2)
    candidates = (
        ~occupied
        & horiz[:, :, None]
        & band[None, None, :]
        & blind[:, :, None]
        & ~near_thing
    )
    # complete a surface, not a slab: only the lowest candidate layer per column
    lowest = np.full(candidates.shape[:2], -1, dtype=np.int64)
    for k in range(candidates.shape[2] - 1, -1, -1):
        lowest[candidates[:, :, k]] = k
    fill = np.zeros_like(candidates)
    cols = lowest >= 0
    fill[cols[:, :, None] & (np.arange(candidates.shape[2])[None, None, :] == lowest[:, :, None])] = True
    fill &= candidates
    if fill.any():
        out.sem[fill] = drive_id
        out.conf[fill] = 0.0
        out.n[fill] = 0
        out.p_occ[fill] = 0.0
        out.inst[fill] = stuff_instance_id(drive_id)
    return out


def coherence_pass(grid: OccupancyGrid, taxonomy: Taxonomy, cfg: RefineConfig) -> OccupancyGrid:
    """Stage 3: single conservative relabeling pass over occupied voxels.

    Voxels frozen by evidence (conf or p_occ) or belonging to protected
    (thing/thin) classes never change. The rest switch to the modal class only
    when agreement is strong (>= coherence_support) and dominant
    (>= coherence_frac * n_occ). Free voxels are untouched.
    """
    out = grid.copy()
    modal, support, n_occ = _modal_fields(grid.sem, taxonomy)
    occ = grid.occupied_mask(taxonomy)

    protected_ids = set(taxonomy.thing_ids)
    for name in cfg.thin_classes:
        if name in taxonomy.name_to_id:
            protected_ids.add(taxonomy.name_to_id[name])
    frozen = (
        (grid.conf >= cfg.freeze_conf)
        | (grid.p_occ >= cfg.freeze_p_occ)
        | np.isin(grid.sem, list(protected_ids))
    )
    flip = (
        occ
        & ~frozen
        & (modal >= 0)
        & (support >= cfg.coherence_support)
        & (support >= cfg.coherence_frac * n_occ)
        & (modal != grid.sem)
    )
    if flip.any():
        new_sem = modal[flip].astype(np.uint16)
        out.sem[flip] = new_sem
        out.inst[flip] = _stuff_or_zero(taxonomy)[new_sem]
    return out


def _shift2d(arr, dx, dy):
    out = np.zeros_like(arr)
    xs = slice(max(dx, 0), arr.shape[0] + min(dx, 0))
    ys = slice(max(dy, 0), arr.shape[1] + min(dy, 0))
    xs_src = slice(max(-dx, 0), arr.shape[0] + min(-dx, 0))
    ys_src = slice(max(-dy, 0), arr.shape[1] + min(-dy, 0))
    out[xs, ys] = arr[xs_src, ys_src]
    return out


def _shift3d(arr, off, fill=0):
    out = np.full_like(arr, fill)
    src = []
    dst = []
    for axis, d in enumerate(off):
        n = arr.shape[axis]
        dst.append(slice(max(d, 0), n + min(d, 0)))
        src.append(slice(max(-d, 0), n + min(-d, 0)))
    out[tuple(dst)] = arr[tuple(src)]
    return out


def _distance_rings(radius: float):
    """Integer offsets with 0 < |off| <= radius, grouped by distance ascending."""
    r = int(np.floor(radius))
    by_dist: dict[float, list] = {}
    for dx in range(-r, r + 1):
        for dy in range(-r, r + 1):
            for dz in range(-r, r + 1):
                d2 = dx * dx + dy * dy + dz * dz
                if d2 == 0 or d2 > radius * radius:
                    continue
                by_dist.setdefault(d2, []).append((dx, dy, dz))
    return [by_dist[d2] for d2 in sorted(by_dist)]


def cleanup_and_instance_dilation(grid: OccupancyGrid, taxonomy: Taxonomy,
                                  cfg: RefineConfig) -> OccupancyGrid:
    """Stage 4: resolve residual ignore voxels, then dilate instance ids.

    Ignore voxels adopt the modal class at modal support >= cleanup_support;
    the rest become free. Within each thing-class region, id-less voxels
    inherit the nearest instance id within dilation_radius voxels (Euclidean,
    distance ties to the smaller id). Stuff voxels get canonical class ids.
    """
    out = grid.copy()
    ign = grid.sem == taxonomy.ignore_id
    if ign.any():
        modal, support, n_occ = _modal_fields(grid.sem, taxonomy)
        adopt = ign & (support >= cfg.cleanup_support) & (modal >= 0)
        _apply_fill(out, adopt, modal, support, n_occ, taxonomy)
        drop = ign & ~adopt
        out.sem[drop] = taxonomy.free_id
        out.conf[drop] = 0.0
        out.inst[drop] = 0

    rings = _distance_rings(cfg.dilation_radius)
    big = np.uint32(0xFFFFFFFF)
    for cid in sorted(taxonomy.thing_ids):
        region = out.sem == cid
        if not region.any():
            continue
        src_inst = np.where(region & (out.inst > 0), out.inst, 0).astype(np.uint32)
        remaining = region & (out.inst == 0)
        if not remaining.any() or not (src_inst > 0).any():
            continue
        for ring in rings:
            if not remaining.any():
                break
            best = np.full(out.inst.shape, big, dtype=np.uint32)
            for off in ring:
                shifted = _shift3d(src_inst, off)
                np.minimum(best, np.where(shifted > 0, shifted, big), out=best)
            hit = remaining & (best != big)
            out.inst[hit] = best[hit]
            remaining &= ~hit

    occ = out.occupied_mask(taxonomy)
    stuff = occ & ~np.isin(out.sem, list(taxonomy.thing_ids))
    out.inst[stuff] = _stuff_or_zero(taxonomy)[out.sem[stuff]]
    return out


def refine_all(grid: OccupancyGrid, taxonomy: Taxonomy, cfg: RefineConfig,
               warmup: bool = False, stage_cb=None) -> OccupancyGrid:
    """Apply the enabled refinement stages in order. Fully deterministic.

    Stage 2 additionally requires warmup=True (the caller gates it on early
    causal frames). stage_cb(stage_number, grid) observes intermediate grids.
    """
    out = grid
    if cfg.stage1_pinholes:
        out = fill_pinholes_and_cavities(out, taxonomy, cfg)
        if stage_cb:
            stage_cb(1, out)
    if cfg.stage2_ego and warmup:
        out = warmup_ego_completion(out, taxonomy, cfg)
        if stage_cb:
            stage_cb(2, out)
    if cfg.stage3_coherence:
        out = coherence_pass(out, taxonomy, cfg)
        if stage_cb:
            stage_cb(3, out)
    if cfg.stage4_cleanup:
        out = cleanup_and_instance_dilation(out, taxonomy, cfg)
        if stage_cb:
            stage_cb(4, out)
    if out is grid:
        out = grid.copy()
    return out
