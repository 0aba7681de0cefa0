from .config import PipelineConfig
from .mapview import plot_topdown, render_topdown, write_boxes_csv, write_topdown_ppm
from .run import (
    MATCH_RADIUS,
    SCENARIO_KINDS,
    FrameDetection,
    GracePeriodNotElapsed,
    PvdReport,
    StageError,
    benchmark_scenarios,
    detect_frame,
    detect_sequence,
    evaluate_pvd,
    f1_score,
    pipeline_flow,
    run_benchmark,
    run_investigation,
    run_scene,
    run_suspicion,
    sequence_flows,
)
from .sequence import Sequence, SequenceFrame
