"""Flat dotted-key configuration with documented defaults. Unknown keys are
rejected so typos fail loudly. Files are JSON, either nested or already
flattened to dotted keys."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Union

from .core import ValidationError
from .losses import LossWeights
from .rasterizer import RasterSettings
from .trainer import LearningRates, Schedule, TrainConfig

DEFAULTS: dict[str, Any] = {
    "camera_init.tau": 15.0,

    "loss.lambda_dssim": 0.2,
    "loss.lambda_mk": 0.001,
    "loss.lambda_reg": 0.0001,
    "loss.use_mse": False,
    "loss.reg_symmetric": False,

    "train.iterations": 40000,
    "train.warmup_end": 5000,
    "train.inject_iteration": 2000,
    "train.inject_count": 60000,
    "train.scale": 1.0,
    "train.seed": 0,
    "train.coc_z_grad": False,
    "train.detail_enhance": True,
    "train.prune_threshold": 0.005,
    "train.lr_center": 5e-4,
    "train.lr_center_final": 5e-6,
    "train.lr_scale": 1e-2,
    "train.lr_rotation": 1e-3,
    "train.lr_opacity": 5e-2,
    "train.lr_color": 2.5e-3,
    "train.lr_focal": 5e-2,
    "train.lr_aperture": 1e-2,
    "train.lr_iln": 5e-4,

    "raster.tile_size": 16,
    "raster.near": 0.01,
    "raster.lowpass": 0.3,
    "raster.background": [0.0, 0.0, 0.0],
    "raster.workers": 0,

    "serve.workers": 4,

    # data sources: either a scene container + pose JSON + image files, or a
    # synthetic spec rendered on the fly
    "data.scene": None,
    "data.poses": None,
    "data.images": None,
    "data.synthetic.layout": "planes",
    "data.synthetic.plane_depths": [2.0, 6.0],
    "data.synthetic.count": 220,
    "data.synthetic.width": 64,
    "data.synthetic.height": 64,
    "data.synthetic.focal_px": 64.0,
    "data.synthetic.n_views": 4,
    "data.synthetic.ring_radius": 0.06,
    "data.synthetic.f_star": 2.0,
    "data.synthetic.q_star": 30.0,
    "data.synthetic.opacity": 0.85,
    "data.synthetic.seed": 0,

    "out.checkpoint": "checkpoint.npz",
    "out.metrics": "metrics.csv",
}


def _flatten(prefix: str, obj: Any, out: dict[str, Any]) -> None:
    if isinstance(obj, dict):
        for k, v in obj.items():
            _flatten(f"{prefix}.{k}" if prefix else k, v, out)
    else:
        out[prefix] = obj


class Config:
    """Immutable view over DEFAULTS with overrides."""

    def __init__(self, overrides: dict[str, Any] | None = None):
        overrides = dict(overrides or {})
        unknown = sorted(set(overrides) - set(DEFAULTS))
        if unknown:
            raise ValidationError(f"unknown config keys: {', '.join(unknown)}")
        self._values = {**DEFAULTS, **overrides}

    def __getitem__(self, key: str) -> Any:
        if key not in self._values:
            raise KeyError(key)
        return self._values[key]

    def get(self, key: str, default: Any = None) -> Any:
        return self._values.get(key, default)

    def to_dict(self) -> dict[str, Any]:
        return dict(self._values)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Config":
        doc = json.loads(Path(path).read_text())
        flat: dict[str, Any] = {}
        for key, value in doc.items():
            if isinstance(value, dict) and "." not in key:
                _flatten(key, value, flat)
            else:
                flat[key] = value
        return cls(flat)

    # typed sub-configs ------------------------------------------------------

    def loss_weights(self) -> LossWeights:
        return LossWeights(lambda_dssim=self["loss.lambda_dssim"],
                           lambda_mk=self["loss.lambda_mk"],
                           lambda_reg=self["loss.lambda_reg"])

    def schedule(self) -> Schedule:
        return Schedule(total=self["train.iterations"],
                        warmup_end=self["train.warmup_end"],
                        inject_iteration=self["train.inject_iteration"],
                        inject_count=self["train.inject_count"],
                        scale=self["train.scale"])

    def raster_settings(self) -> RasterSettings:
        return RasterSettings(tile_size=self["raster.tile_size"],
                              near=self["raster.near"],
                              lowpass=self["raster.lowpass"],
                              background=tuple(self["raster.background"]),
                              coc_z_grad=self["train.coc_z_grad"],
                              workers=self["raster.workers"])

    def train_config(self) -> TrainConfig:
        lrs = LearningRates(center=self["train.lr_center"],
                            center_final=self["train.lr_center_final"],
                            scale=self["train.lr_scale"],
                            rotation=self["train.lr_rotation"],
                            opacity=self["train.lr_opacity"],
                            color=self["train.lr_color"],
                            focal=self["train.lr_focal"],
                            aperture=self["train.lr_aperture"],
                            iln=self["train.lr_iln"])
        return TrainConfig(lrs=lrs,
                           weights=self.loss_weights(),
                           raster=self.raster_settings(),
                           seed=self["train.seed"],
                           use_mse=self["loss.use_mse"],
                           reg_symmetric=self["loss.reg_symmetric"],
                           detail_enhance=self["train.detail_enhance"],
                           prune_threshold=self["train.prune_threshold"],
                           tau=self["camera_init.tau"])
