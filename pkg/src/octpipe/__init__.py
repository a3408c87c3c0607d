"""Post-processing for OCT retinal B-scan stacks."""

# set before the submodule imports, which read it
__version__ = "0.1.0"

from .core import Stack, enface, group_average, histogram_stats, load_stack, save_stack
from .layers import (
    BoundaryMap, compare_reference, compute_thickness, interpolate_gaps, segment_boundaries,
    trace_boundaries,
)
from .phantom import GroundTruth, PhantomSpec, generate_phantom
from .pipeline import PipelineConfig, run_pipeline
from .shadow import (
    AlphaSearch, ShadowRegion, detect_shadow_columns, flank_matched_alpha, import_coco_regions,
    optimize_alpha, suppress_shadows,
)
