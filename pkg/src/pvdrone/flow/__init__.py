from .estimator import FlowConfig, estimate_flow, upsample_flow
from .field import FlowField, flow_to_rgb, read_flo, write_flo
from .losses import (
    EmptyMask,
    lambda_schedule,
    occlusion_mask,
    photometric_loss,
    self_supervision_loss,
    smoothness_loss,
    total_loss,
)
from .matching import (
    CostVolume,
    ResidualEstimator,
    consensus_offsets,
    correlation_volume,
    estimate_residual,
    offset_warp,
    warp,
)
from .metrics import flow_metrics
from .pyramid import Pyramid, TooSmall, build_pyramid
