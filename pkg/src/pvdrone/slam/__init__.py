from .association import associate_boxes, association_counts, reidentify
from .bundle import BundleResult, local_bundle_adjust, reprojection_rms
from .features import (
    CorrespondenceSet,
    Keypoint,
    extract_keypoints,
    harris_response,
    match_descriptors,
    patch_descriptors,
)
from .geometry import (
    Degenerate,
    DegenerateBaseline,
    Diverged,
    NegativeDepth,
    PnPResult,
    ReprojectionTooLarge,
    huber_cost,
    pose_jacobian,
    reprojection_residuals,
    solve_pnp,
    triangulate,
    triangulate_many,
)
from .map import Keyframe, MapPoint, SlamConfig, WorldMap
from .relocalization import Relocalization, RelocalizationFailed, relocalize
from .tracker import FrameInput, FrameLog, Investigator, Mapper, TrackingLost
