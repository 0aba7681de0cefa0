from .evaluation import (
    IOU_THRESHOLDS,
    Detection,
    evaluate_map,
    fold_ipc,
    read_detections,
    write_detections,
)
from .gating import (
    DetectConfig,
    DomainError,
    EmptyBox,
    FlowStats,
    InsufficientBackground,
    box_footprint,
    classify_box,
    classify_frame,
    ego_flow_estimate,
    flow_stats,
    focal_loss,
    propose_boxes,
)
