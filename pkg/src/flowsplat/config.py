"""Run configuration: one declarative file, strict keys, CLI overrides."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import yaml


@dataclass
class RunConfig:
    """Every tunable of the pipeline; unknown keys are rejected on load."""

    seed: int = 0
    threads: int = 1

    # scene model
    sh_degree: int = 1
    init_stride: int = 2
    init_iters: int = 300

    # rasterizer guards
    z_near: float = 1e-4
    dilation: float = 0.3
    alpha_clamp: float = 0.99
    stop_transmittance: float = 1e-4
    footprint_sigma: float = 3.0

    # masking thresholds
    gamma: float = 0.9  # visibility threshold on accumulated opacity
    beta: float = 0.5  # rigid-mask Sampson threshold, px^2
    consistency_check: bool = True  # disable to ablate the rigid mask

    # loss weights
    lambda_dssim: float = 0.2
    lambda_rgb: float = 1.0
    lambda_flow: float = 0.1
    lambda_depth: float = 0.05

    # optimization
    pose_lr: float = 4e-3
    iters_pose: int = 30
    iters_scene: int = 30
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    # adaptive density control
    densify_interval: int = 100
    densify_grad_threshold: float = 2e-4
    opacity_floor: float = 0.005
    percent_dense: float = 0.01
    split_factor: float = 1.6
    max_gaussians: int = 200_000

    # evaluation
    test_every: int = 8  # every 8th frame held out; 0 trains on everything

    def weights(self):
        from .losses import LossWeights

        return LossWeights(
            lambda_dssim=self.lambda_dssim,
            lambda_rgb=self.lambda_rgb,
            lambda_flow=self.lambda_flow,
            lambda_depth=self.lambda_depth,
        )

    def raster_settings(self):
        from .rasterizer import RasterSettings

        return RasterSettings(
            z_near=self.z_near,
            dilation=self.dilation,
            alpha_clamp=self.alpha_clamp,
            stop_transmittance=self.stop_transmittance,
            footprint_sigma=self.footprint_sigma,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def field_names(cls):
        return [f.name for f in dataclasses.fields(cls)]

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = set(cls.field_names())
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        cfg = cls(**data)
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        path = Path(path)
        text = path.read_text()
        if path.suffix.lower() == ".json":
            data = json.loads(text)
        else:
            data = yaml.safe_load(text)
        if data is None:
            data = {}
        if not isinstance(data, dict):
            raise ValueError(f"{path}: config root must be a mapping")
        return cls.from_dict(data)

    def apply_overrides(self, overrides: dict) -> "RunConfig":
        data = self.to_dict()
        known = set(self.field_names())
        unknown = sorted(set(overrides) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        data.update(overrides)
        return RunConfig.from_dict(data)

    def validate(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if self.beta <= 0.0:
            raise ValueError("beta must be positive")
        if self.init_stride < 1:
            raise ValueError("init_stride must be >= 1")
        if self.sh_degree not in (0, 1, 2, 3):
            raise ValueError("sh_degree must be 0..3")
        if self.iters_pose < 0 or self.iters_scene < 0 or self.init_iters < 0:
            raise ValueError("iteration counts must be nonnegative")
        if self.test_every < 0:
            raise ValueError("test_every must be nonnegative")
