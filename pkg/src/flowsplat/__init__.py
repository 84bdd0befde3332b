"""SfM-free 3D Gaussian splatting with flow-guided pose estimation."""

__version__ = "0.1.0"

from .config import RunConfig
from .errors import (
    DegenerateBaseline,
    DepthBehindCamera,
    DimensionMismatch,
    EmptyInit,
    EmptyScene,
    FlowSplatError,
    FormatError,
    InsufficientValidPixels,
    InvalidDepth,
    LengthMismatch,
    PipelineError,
    StaleRenderState,
)
from .flow import (
    FlowField,
    Mask,
    combine_mask,
    compose_flow,
    load_depth,
    load_flow,
    projection_flow,
    rigid_mask,
)
from .geometry import (
    CameraIntrinsics,
    FundamentalMatrix,
    PoseSE3,
    fundamental_from_poses,
    project,
    relative_pose,
    sampson_distance,
    unproject,
)
from .losses import (
    LossWeights,
    depth_loss,
    flow_loss,
    photometric_loss,
    pose_objective,
    scene_objective,
)
from .optimizer import (
    AdamState,
    PoseParams,
    adam_step,
    estimate_pose,
    optimize_scene_step,
    predict_pose_const_velocity,
)
from .pipeline import (
    FrameRecord,
    ReconstructionResult,
    TrajectoryMetrics,
    evaluate_nvs,
    evaluate_trajectory,
    load_dataset,
    psnr,
    reconstruct,
)
from .rasterizer import (
    RasterSettings,
    RenderOutput,
    SceneGradients,
    naive_render,
    project_gaussian,
    render,
    render_backward,
    visibility_map,
)
from .scene import (
    GaussianCloud,
    build_covariance,
    densify_and_prune,
    eval_sh,
    init_from_depth,
)
from .synthetic import SyntheticDataset, SyntheticSpec, generate_synthetic, write_dataset
