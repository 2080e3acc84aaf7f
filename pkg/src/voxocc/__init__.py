"""voxocc: semantic and panoptic voxel occupancy from labeled multi-view geometry."""

from .config import PipelineConfig, load_config
from .ingest import CameraView, EgoPose, MaskCandidate, ViewPriors, fuse_masks, load_sample
from .instances import YawBox, fit_yaw_box, iosv, merge_boxes, reassign_points, refine_candidate
from .lift import (
    GeometryMaps,
    LabeledPointCloud,
    WindowSpec,
    fuse_window,
    lift_view,
    reliability_filter,
    stabilize_confidence,
)
from .metrics import RaySet, cast_ray, cast_rays, default_rayset, iou_occ, miou, rayiou, raypq
from .pipeline import evaluate_dirs, run_pipeline
from .refine import (
    NeighborhoodStats,
    RefineConfig,
    cleanup_and_instance_dilation,
    coherence_pass,
    fill_pinholes_and_cavities,
    neighborhood_stats,
    refine_all,
    warmup_ego_completion,
)
from .taxonomy import PromptRule, RuleSet, Taxonomy, default_rules, default_taxonomy, load_taxonomy

# NOTE: the voxelize *function* stays in voxocc.voxelize to keep the submodule
# importable as voxocc.voxelize; only the types are re-exported here.
from .voxelize import GridSpec, OccupancyGrid, load_grid, save_grid, voxel_index

__version__ = "0.1.0"
