"""Pipeline configuration with the shipped defaults.

Defaults: 512 track tokens, cycle threshold eps_p = 3 px, confidence
threshold tau = 0.3, 2-px NMS radius, groups of one source plus four
targets, 672x672 base resolution, stride pyramid {8, 4, 2, 1} with
multi-view fusion at levels {4, 1}.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields


@dataclass
class PipelineConfig:
    # track construction
    track_tokens: int = 512
    matcher_samples: int = 2000
    matcher_noise_sigma: float = 0.5
    matcher_outlier_rate: float = 0.05
    normalize_track_coords: bool = False

    # matcher
    base_resolution: int = 672
    targets_per_group: int = 4
    strides: tuple[int, ...] = (8, 4, 2, 1)
    mvfuse_levels: tuple[int, ...] = (4, 1)
    mvfuse_iters: int = 2
    mvfuse_alignment: str = "forward"
    feature_dim: int = 32
    hidden_dim: int = 48
    sigma: float = 1.0
    global_temperature: float = 0.002
    softargmax_temperature: float = 0.05
    residual_gain: float = 0.0
    upsample_factor: int = 1

    # post-processing
    eps_p: float = 3.0
    tau: float = 0.3
    nms_radius: int = 2
    max_keypoints: int = 0  # 0 = unlimited

    # group sampling
    beta: float = 0.75
    group_tau: float = 0.3
    group_tau_conf: float = 0.3
    alpha_src: float = 1.0
    alpha_tgt: float = 0.25
    lam: float = 1.0

    # evaluation
    homography_thresholds: tuple[float, ...] = (1.0, 3.0, 5.0)
    triangulation_thresholds: tuple[float, ...] = (0.01, 0.02, 0.05)
    eval_max_matches: int = 5000
    ransac_threshold: float = 3.0
    ransac_iters: int = 2000

    def to_json(self) -> str:
        payload = asdict(self)
        for key, value in payload.items():
            if isinstance(value, tuple):
                payload[key] = list(value)
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"


_TUPLE_FIELDS = {"strides", "mvfuse_levels", "homography_thresholds",
                 "triangulation_thresholds"}


def save_config(path, config: PipelineConfig) -> None:
    with open(path, "w") as f:
        f.write(config.to_json())


def load_config(path) -> PipelineConfig:
    with open(path) as f:
        payload = json.load(f)
    known = {f.name for f in fields(PipelineConfig)}
    unknown = set(payload) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    for key in _TUPLE_FIELDS & set(payload):
        payload[key] = tuple(payload[key])
    return PipelineConfig(**payload)
