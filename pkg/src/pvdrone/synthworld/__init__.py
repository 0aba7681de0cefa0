from .render import FrameTruth, Track, render_frame, render_image, render_view
from .scene import (
    BASE_INTRINSICS,
    Car,
    InfeasiblePlacement,
    SceneModel,
    SceneParams,
    TimeOutOfRange,
    generate_scene,
    spot_overlap,
)
from .texture import fractal_noise, value_noise
