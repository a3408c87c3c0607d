"""Eye-motion registration: ILM height adjustment, keypoint homographies, optical flow."""

from .flow import FlowField, optical_flow, warp_flow
from .homography import (
    apply_homography,
    dlt,
    estimate_homography_ransac,
    homography_from_quad,
    warp_perspective,
)
from .ilm import IlmTrace, estimate_slab_quad, trace_ilm
from .keypoints import Features, Keypoint, detect_keypoints, fast_corners, fast_segment_test
from .matching import match_descriptors
from .stack import (
    Alignment,
    RegistrationPlan,
    RegistrationReport,
    height_adjust_register,
    load_slab_quads,
    register_stack,
    select_reference_frames,
)
