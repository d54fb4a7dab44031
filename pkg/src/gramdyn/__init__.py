"""gramdyn: training-free dynamic-object mask mining from multi-view
transformer attention statistics, with projection-gradient refinement
and trajectory/segmentation/reconstruction evaluation."""

from .errors import (
    ContractViolation,
    DegenerateAttention,
    DegenerateRefinement,
    FormatError,
    GramdynError,
    IoError,
    NotFound,
    NumericalError,
    SchemaError,
    ValidationError,
)
from .frameset import FrameSet, PointCloud, export_ply, read_frameset, write_frameset
from .geometry import CameraParams, depth_gradient, project, residual_gradient, unproject
from .gramstats import GramStatMaps, LayerGroup, WindowSpec, aggregate_stats, gram_similarity, window_indices
from .intervene import KeySuppression, build_key_suppression, masked_attention_reference
from .masking import ClusterAssignment, DynamicMask, binarize, kmeans_tokens, otsu_threshold
from .metrics import SegReport, Trajectory, align_umeyama, boundary_f, iou, recon_metrics, seg_report, traj_metrics
from .pipeline import PipelineConfig, run_pipeline
from .refine import RefineConfig, agg_photo, agg_proj, cluster_points, refine_masks, sor_filter
from .saliency import SaliencyConfig, SaliencyMap, compute_band, compute_dyn, mine_saliency, normalize_map
from .synth import SceneSpec, default_fixture_spec, gen_scene

__version__ = "0.1.0"
