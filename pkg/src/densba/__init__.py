"""Joint test-time refinement of depth, pose, intrinsics, and optical flow.

Given a short monocular snippet and initial estimates of its dense outputs
(depth maps, relative camera motions, flow fields, focal lengths), the
package descends a photometric-plus-geometric objective to make the outputs
mutually consistent, in the spirit of dense bundle adjustment.
"""

from .formats import (
    RunConfig,
    load_config,
    parse_config,
    read_calibration,
    read_depth,
    read_flo,
    read_image,
    read_state,
    write_calibration,
    write_depth,
    write_flo,
    write_image,
    write_state,
)
from .geometry import Intrinsics, PixelCoord, Point3, RigidMotion
from .losses import (
    Branch,
    LossWeights,
    adaptive_photometric,
    epipolar_loss,
    forward_backward_flow,
    multiview_structure,
    smoothness,
    total_loss,
)
from .metrics import (
    DepthMetrics,
    FlowMetrics,
    PoseMetrics,
    accumulate_motions,
    ate,
    depth_metrics,
    flow_epe,
    trajectory_positions,
)
from .refine import (
    OutputRefiner,
    RefineConfig,
    VariableMask,
    adam_step,
    oft_refine,
    select_variables,
)
from .state import OutputState, ProximalPrior, ProxWeights
from .synth import (
    NoiseSpec,
    SceneSpec,
    default_scene,
    moving_box_scene,
    perturb,
    random_scene,
    render_snippet,
)
from .validation import (
    BehindCameraError,
    EmptySupportError,
    FormatError,
    InvalidPriorError,
    NumericalError,
)

__version__ = "0.1.0"

__all__ = [
    "Branch",
    "DepthMetrics",
    "FlowMetrics",
    "Intrinsics",
    "LossWeights",
    "NoiseSpec",
    "OutputRefiner",
    "OutputState",
    "PixelCoord",
    "Point3",
    "PoseMetrics",
    "ProximalPrior",
    "ProxWeights",
    "RefineConfig",
    "RigidMotion",
    "RunConfig",
    "SceneSpec",
    "VariableMask",
    "BehindCameraError",
    "EmptySupportError",
    "FormatError",
    "InvalidPriorError",
    "NumericalError",
    "accumulate_motions",
    "adam_step",
    "adaptive_photometric",
    "ate",
    "default_scene",
    "depth_metrics",
    "epipolar_loss",
    "flow_epe",
    "forward_backward_flow",
    "load_config",
    "moving_box_scene",
    "multiview_structure",
    "oft_refine",
    "parse_config",
    "perturb",
    "random_scene",
    "read_calibration",
    "read_depth",
    "read_flo",
    "read_image",
    "read_state",
    "render_snippet",
    "select_variables",
    "smoothness",
    "total_loss",
    "trajectory_positions",
    "write_calibration",
    "write_depth",
    "write_flo",
    "write_image",
    "write_state",
    "__version__",
]
