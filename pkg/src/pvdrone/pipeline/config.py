"""Pipeline configuration, round-tripped through JSON with the same field names."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, fields

from ..detect.gating import DetectConfig
from ..flow.estimator import FlowConfig
from ..slam.map import SlamConfig
from ..synthworld.scene import SceneParams


def _scene_default() -> SceneParams:
    return SceneParams(image_scale=0.5)


@dataclass
class PipelineConfig:
    grace_period_s: float = 300.0
    seed: int = 0
    flow: FlowConfig = field(default_factory=FlowConfig)
    detect: DetectConfig = field(default_factory=DetectConfig)
    slam: SlamConfig = field(default_factory=SlamConfig)
    scene: SceneParams = field(default_factory=_scene_default)
    flow_downsample: int = 1      # 2x halvings before flow estimation

    def __post_init__(self):
        if not self.grace_period_s > 0:
            raise ValueError("grace_period_s must be positive")
        if self.flow_downsample < 0:
            raise ValueError("flow_downsample must be >= 0")
        # the simulated grace period follows the pipeline's
        self.scene.grace_period_s = float(self.grace_period_s)

    def to_dict(self) -> dict:
        return {
            "grace_period_s": self.grace_period_s,
            "seed": self.seed,
            "flow": self.flow.to_dict(),
            "detect": self.detect.to_dict(),
            "slam": self.slam.to_dict(),
            "scene": self.scene.to_dict(),
            "flow_downsample": self.flow_downsample,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        kw = {k: d[k] for k in ("grace_period_s", "seed", "flow_downsample") if k in d}
        if "flow" in d:
            kw["flow"] = FlowConfig.from_dict(d["flow"])
        if "detect" in d:
            kw["detect"] = DetectConfig.from_dict(d["detect"])
        if "slam" in d:
            kw["slam"] = SlamConfig.from_dict(d["slam"])
        if "scene" in d:
            base = _scene_default().to_dict()
            base.update(d["scene"])
            kw["scene"] = SceneParams(**{k: v for k, v in base.items() if k in SceneParams.__dataclass_fields__})
        return cls(**kw)

    @classmethod
    def from_json(cls, text: str) -> "PipelineConfig":
        return cls.from_dict(json.loads(text))
