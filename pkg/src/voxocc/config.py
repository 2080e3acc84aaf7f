"""Pipeline configuration: every numeric knob in one validated tree."""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .instances import RefineParams, SizeInterval
from .refine import RefineConfig
from .taxonomy import Taxonomy
from .voxelize import GridSpec


class ConfigError(ValueError):
    pass


# Plausible size maxima (length, width, height) per thing class. These live in
# config, not code: override per taxonomy as needed.
DEFAULT_SIZE_MAXIMA = {
    "car": (6.0, 2.5, 2.5),
    "truck": (14.0, 3.2, 4.5),
    "bus": (15.0, 3.2, 4.5),
    "trailer": (18.0, 3.5, 4.5),
    "construction_vehicle": (12.0, 4.0, 5.0),
    "motorcycle": (3.0, 1.2, 2.0),
    "bicycle": (3.0, 1.2, 2.0),
    "pedestrian": (1.2, 1.2, 2.2),
    "traffic_cone": (0.8, 0.8, 1.2),
    "barrier": (20.0, 1.0, 2.0),
}


@dataclass
class LiftConfig:
    tau_c: float = 1e-5
    d_min: float = 1.0
    d_max: float = 50.0


@dataclass
class InstanceConfig:
    tau_ov: float = 0.45
    d_nn: float = 2.0
    refine: RefineParams = field(default_factory=RefineParams)
    size_maxima: dict = field(default_factory=lambda: dict(DEFAULT_SIZE_MAXIMA))


@dataclass
class VoxelizeConfig:
    alpha: float = 0.5
    lam: float = 0.35
    n_min: int = 1


@dataclass
class RayConfig:
    azimuth_step_deg: float = 1.0
    elevation_rows: int = 32
    elevation_min_deg: float = -30.0
    elevation_max_deg: float = 10.0
    thresholds: tuple = (1.0, 2.0, 4.0)
    origin: tuple = (0.0, 0.0, 0.0)


@dataclass
class PipelineConfig:
    taxonomy_path: str | None = None
    window: str = "causal"
    warmup_frames: int = 5
    lift: LiftConfig = field(default_factory=LiftConfig)
    instances: InstanceConfig = field(default_factory=InstanceConfig)
    grid: GridSpec = field(
        default_factory=lambda: GridSpec(((-40.0, 40.0), (-40.0, 40.0), (-10.0, 10.0)),
                                         voxel_size=0.4, z_offset=-1.0)
    )
    voxelize: VoxelizeConfig = field(default_factory=VoxelizeConfig)
    refine: RefineConfig = field(default_factory=RefineConfig)
    rays: RayConfig = field(default_factory=RayConfig)

    def validate(self):
        if self.window not in ("causal", "non_causal"):
            raise ConfigError(f"window must be causal or non_causal, got {self.window!r}")
        if self.warmup_frames < 0:
            raise ConfigError("warmup_frames must be >= 0")
        if self.lift.d_min >= self.lift.d_max:
            raise ConfigError("lift.d_min must be < lift.d_max")
        if self.lift.d_min < 0:
            raise ConfigError("lift.d_min must be >= 0")
        if not 0.0 <= self.instances.tau_ov <= 1.0:
            raise ConfigError(f"instances.tau_ov must be in [0, 1], got {self.instances.tau_ov}")
        if self.instances.d_nn < 0:
            raise ConfigError("instances.d_nn must be >= 0")
        rp = self.instances.refine
        if rp.iqr_factor <= 0 or rp.mad_k <= 0:
            raise ConfigError("refine thresholds must be positive")
        if not 0.0 < rp.tighten <= 1.0:
            raise ConfigError("instances.refine.tighten must be in (0, 1]")
        if rp.max_passes < 1:
            raise ConfigError("instances.refine.max_passes must be >= 1")
        if rp.min_points < 1:
            raise ConfigError("instances.refine.min_points must be >= 1")
        if self.voxelize.alpha <= 0:
            raise ConfigError("voxelize.alpha must be > 0")
        if self.voxelize.lam <= 0:
            raise ConfigError("voxelize.lam must be > 0")
        if self.voxelize.n_min < 1:
            raise ConfigError("voxelize.n_min must be >= 1")
        rc = self.refine
        for name in ("fill_support", "cavity_n_occ", "cavity_support", "coherence_support",
                     "cleanup_support"):
            if getattr(rc, name) < 0:
                raise ConfigError(f"refine.{name} must be >= 0")
        if not 0.0 <= rc.coherence_frac <= 1.0:
            raise ConfigError("refine.coherence_frac must be in [0, 1]")
        if rc.dilation_radius < 0:
            raise ConfigError("refine.dilation_radius must be >= 0")
        if not 0.0 <= rc.freeze_conf <= 1.0 or not 0.0 <= rc.freeze_p_occ <= 1.0:
            raise ConfigError("freeze thresholds must be in [0, 1]")
        if self.rays.azimuth_step_deg <= 0 or self.rays.elevation_rows < 1:
            raise ConfigError("invalid ray pattern parameters")
        if list(self.rays.thresholds) != sorted(self.rays.thresholds) or \
                any(t <= 0 for t in self.rays.thresholds):
            raise ConfigError("rays.thresholds must be ascending and positive")
        return self

    def size_intervals(self, taxonomy: Taxonomy) -> dict[int, SizeInterval]:
        """Per-class-id intervals; every thing class must have an entry."""
        out = {}
        for name, dims in self.instances.size_maxima.items():
            if name in taxonomy.name_to_id:
                cid = taxonomy.name_to_id[name]
                out[cid] = SizeInterval(cid, dims)
        missing = [taxonomy.id_to_name[c] for c in sorted(taxonomy.thing_ids) if c not in out]
        if missing:
            raise ConfigError(f"no size interval for thing classes {missing}")
        return out


def _build(cls, doc, where):
    allowed = {f.name for f in fields(cls)}
    unknown = set(doc) - allowed
    if unknown:
        raise ConfigError(f"unknown keys {sorted(unknown)} in {where}")
    return cls(**doc)


def load_config(path=None, overrides=None) -> PipelineConfig:
    """Build a PipelineConfig from a YAML file (all keys optional) and overrides."""
    doc = {}
    if path is not None:
        with open(path, "r", encoding="utf-8") as f:
            doc = yaml.safe_load(f) or {}
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: config must be a mapping")
    doc.update(overrides or {})

    top = {"taxonomy_path", "window", "warmup_frames", "lift", "instances", "grid",
           "voxelize", "refine", "rays"}
    unknown = set(doc) - top
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")

    cfg = PipelineConfig()
    if "taxonomy_path" in doc and doc["taxonomy_path"] is not None:
        cfg.taxonomy_path = str(doc["taxonomy_path"])
    if "window" in doc:
        cfg.window = str(doc["window"]).replace("-", "_")
    if "warmup_frames" in doc:
        cfg.warmup_frames = int(doc["warmup_frames"])
    if "lift" in doc:
        cfg.lift = _build(LiftConfig, doc["lift"], "lift")
    if "instances" in doc:
        sub = dict(doc["instances"])
        refine_doc = sub.pop("refine", None)
        maxima = sub.pop("size_maxima", None)
        cfg.instances = _build(InstanceConfig, sub, "instances")
        if refine_doc is not None:
            cfg.instances.refine = _build(RefineParams, refine_doc, "instances.refine")
        if maxima is not None:
            cfg.instances.size_maxima = {
                str(k): tuple(float(x) for x in v) for k, v in maxima.items()
            }
    if "grid" in doc:
        sub = dict(doc["grid"])
        unknown = set(sub) - {"bounds", "voxel_size", "z_offset"}
        if unknown:
            raise ConfigError(f"unknown keys {sorted(unknown)} in grid")
        cfg.grid = GridSpec(
            tuple(tuple(float(v) for v in b) for b in sub["bounds"]),
            voxel_size=float(sub.get("voxel_size", 0.4)),
            z_offset=float(sub.get("z_offset", -1.0)),
        )
    if "voxelize" in doc:
        cfg.voxelize = _build(VoxelizeConfig, doc["voxelize"], "voxelize")
    if "refine" in doc:
        sub = dict(doc["refine"])
        if "thin_classes" in sub:
            sub["thin_classes"] = tuple(sub["thin_classes"])
        cfg.refine = _build(RefineConfig, sub, "refine")
    if "rays" in doc:
        sub = dict(doc["rays"])
        if "thresholds" in sub:
            sub["thresholds"] = tuple(float(t) for t in sub["thresholds"])
        if "origin" in sub:
            sub["origin"] = tuple(float(v) for v in sub["origin"])
        cfg.rays = _build(RayConfig, sub, "rays")
    return cfg.validate()
