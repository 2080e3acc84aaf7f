"""Command-line interface: run, evaluate, synth, export, inspect.

Exit codes: 0 success, 1 validation/config error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import report, synth, voxelize
from .config import ConfigError, load_config
from .ingest import LoadError
from .pipeline import PipelineError, evaluate_dirs, resolve_taxonomy, run_pipeline
from .taxonomy import TaxonomyError

log = logging.getLogger("voxocc")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="voxocc",
        description="Semantic and panoptic voxel occupancy from labeled multi-view geometry.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run the pipeline over a dataset")
    p_run.add_argument("--data", required=True, help="dataset root (ingest layout)")
    p_run.add_argument("--out", required=True, help="output directory for grid files")
    p_run.add_argument("--config", default=None, help="pipeline config YAML")
    p_run.add_argument("--taxonomy", default=None, help="taxonomy/rules YAML override")
    p_run.add_argument("--window", choices=["causal", "non-causal"], default=None)
    p_run.add_argument("--workers", type=int, default=None,
                       help="worker threads (default: $VOXOCC_WORKERS or 1)")
    p_run.add_argument("--dump-stage", type=int, default=None, metavar="N",
                       help="also write grids after refinement stages <= N")
    p_run.add_argument("--dump-clouds", action="store_true",
                       help="also write the fused ego-frame cloud per sample")

    p_eval = sub.add_parser("evaluate", help="compare prediction grids against ground truth")
    p_eval.add_argument("--pred", required=True)
    p_eval.add_argument("--gt", required=True)
    p_eval.add_argument("--config", default=None)
    p_eval.add_argument("--taxonomy", default=None)
    p_eval.add_argument("--out", default=None,
                        help="report directory (report.txt, summary.csv, figures/)")

    p_synth = sub.add_parser("synth", help="generate a synthetic dataset with ground truth")
    p_synth.add_argument("--out", required=True)
    p_synth.add_argument("--scene", default=None, help="scene spec YAML (default: desk preset)")
    p_synth.add_argument("--seed", type=int, default=None, help="override the scene seed")
    p_synth.add_argument("--frames", type=int, default=5, help="preset only: frame count")
    p_synth.add_argument("--emit", choices=["priors", "candidates"], default=None)

    p_export = sub.add_parser("export", help="export a grid as a point-list text file")
    p_export.add_argument("--grid", required=True)
    p_export.add_argument("--out", required=True)
    p_export.add_argument("--taxonomy", default=None)

    p_inspect = sub.add_parser("inspect", help="print grid statistics")
    p_inspect.add_argument("--grid", required=True)
    p_inspect.add_argument("--taxonomy", default=None)
    return parser


def _load_cfg(args):
    overrides = {}
    if getattr(args, "taxonomy", None):
        overrides["taxonomy_path"] = args.taxonomy
    if getattr(args, "window", None):
        overrides["window"] = args.window
    return load_config(args.config if getattr(args, "config", None) else None, overrides)


def _cmd_run(args) -> int:
    cfg = _load_cfg(args)
    written = run_pipeline(
        args.data, cfg, args.out, workers=args.workers,
        dump_stage=args.dump_stage, dump_clouds=args.dump_clouds,
    )
    print(f"wrote {len(written)} grids to {args.out}")
    return 0


def _cmd_evaluate(args) -> int:
    cfg = _load_cfg(args)
    summary, missing = evaluate_dirs(args.pred, args.gt, cfg)
    text = report.render_text(summary)
    print(text, end="")
    if args.out:
        paths = report.write_report(summary, args.out)
        print(f"report written to {paths['text']}, {paths['csv']}, "
              f"{len(paths['figures'])} figures")
    if missing:
        print(f"missing predictions ({len(missing)}):", file=sys.stderr)
        for p in missing:
            print(f"  {p}", file=sys.stderr)
        return 1
    return 0


def _cmd_synth(args) -> int:
    from .taxonomy import default_taxonomy, identity_rules

    if args.scene:
        spec = synth.load_scene_spec(args.scene)
        if args.emit:
            spec.emit = args.emit
    else:
        spec = synth.desk_scene(emit=args.emit or "priors", frames=args.frames)
    if args.seed is not None:
        spec.seed = args.seed
    taxonomy = default_taxonomy()
    synth.write_dataset(spec, args.out, taxonomy, identity_rules(taxonomy))
    print(f"dataset with {len(spec.timestamps)} samples written to {args.out}")
    return 0


def _cmd_export(args) -> int:
    cfg = _load_cfg(args)
    taxonomy, _ = resolve_taxonomy(cfg)
    grid = voxelize.load_grid(args.grid)
    occ = grid.occupied_mask(taxonomy)
    idx = np.argwhere(occ)
    centers = grid.spec.origin + (idx + 0.5) * grid.spec.voxel_size
    with open(args.out, "w", encoding="utf-8") as f:
        f.write("x,y,z,class,instance,n,conf,p_occ\n")
        for (i, j, k), (x, y, z) in zip(idx, centers):
            name = taxonomy.id_to_name.get(int(grid.sem[i, j, k]), "?")
            f.write(
                f"{x:.3f},{y:.3f},{z:.3f},{name},{int(grid.inst[i, j, k])},"
                f"{int(grid.n[i, j, k])},{grid.conf[i, j, k]:.4f},{grid.p_occ[i, j, k]:.4f}\n"
            )
    print(f"exported {len(idx)} occupied voxels to {args.out}")
    return 0


def _cmd_inspect(args) -> int:
    cfg = _load_cfg(args)
    taxonomy, _ = resolve_taxonomy(cfg)
    grid = voxelize.load_grid(args.grid)
    occ = grid.occupied_mask(taxonomy)
    print(f"grid {args.grid}")
    print(f"  dims {grid.spec.dims}, voxel {grid.spec.voxel_size} m, "
          f"bounds {grid.spec.bounds}, z offset {grid.spec.z_offset}")
    print(f"  occupied {int(occ.sum())} / {occ.size} voxels")
    if occ.any():
        print(f"  mean conf {grid.conf[occ].mean():.4f}, mean p_occ {grid.p_occ[occ].mean():.4f}")
    for cid, count in zip(*np.unique(grid.sem[occ], return_counts=True)):
        name = taxonomy.id_to_name.get(int(cid), f"id{cid}")
        print(f"    {name:<22s} {int(count)}")
    things = occ & np.isin(grid.sem, list(taxonomy.thing_ids))
    ids = np.unique(grid.inst[things & (grid.inst > 0)])
    print(f"  thing instances: {len(ids)}")
    return 0


_COMMANDS = {
    "run": _cmd_run,
    "evaluate": _cmd_evaluate,
    "synth": _cmd_synth,
    "export": _cmd_export,
    "inspect": _cmd_inspect,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, TaxonomyError, LoadError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except PipelineError as e:
        print(f"pipeline failed: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - last-resort runtime failure
        print(f"unexpected failure: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
