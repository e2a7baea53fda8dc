"""Experiment configuration: one flat, JSON-round-trippable record.

The flat fields map onto the nested model/encoder configs; keeping them
flat makes the CLI overrides and the ablation matrix trivial.  Round
trips are exact: `ExperimentConfig.from_json(cfg.to_json()) == cfg`.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace

from .encoders import EncoderConfig
from .losses import DEFAULT_WEIGHTS
from .model import ModelConfig
from .vocab import MAX_LEN, build_vocabulary


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    # data
    train_count: int = 2000
    val_count: int = 400
    grid: int = 3
    image_size: int = 64
    # schedule
    epochs: int = 10
    batch_size: int = 32
    lr: float = 1.5e-3
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    # encoders
    image_dims: tuple[int, ...] = (32, 64, 128, 256)
    lang_width: int = 64
    lang_layers_per_stage: int = 1
    heads: int = 4
    # fusion
    cam: bool = True
    cam_scales: tuple[int, ...] = (1, 2, 3, 6)
    # grounding
    grounding: bool = True
    mask_rate: float = 0.15
    mask_input: str = "center"
    predictor_depth: int = 8
    # decoder + alignment loss
    decoder_dim: int = 32
    decoder_scale: int = 4
    cal: str = "both"
    cal_form: str = "log"
    tau1: float = 0.1
    tau2: float = 0.1
    loss_weights: tuple[float, float, float, float] = DEFAULT_WEIGHTS
    # output
    out_dir: str = "runs/default"

    def __post_init__(self):
        for name in ("image_dims", "cam_scales", "loss_weights"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.train_count < 1 or self.val_count < 1:
            raise ValueError("train_count and val_count must be >= 1")

    # -- conversions --------------------------------------------------------

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            image_dims=self.image_dims,
            lang_width=self.lang_width,
            lang_layers_per_stage=self.lang_layers_per_stage,
            heads=self.heads,
            vocab_size=len(build_vocabulary()),
            max_len=MAX_LEN,
        )

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            image_size=self.image_size,
            encoder=self.encoder_config(),
            cam_enabled=self.cam,
            cam_scales=self.cam_scales,
            cam_heads=self.heads,
            grounding_enabled=self.grounding,
            mask_rate=self.mask_rate,
            mask_input=self.mask_input,
            predictor_depth=self.predictor_depth,
            predictor_heads=self.heads,
            decoder_dim=self.decoder_dim,
            decoder_scale=self.decoder_scale,
            cal_mode=self.cal,
            cal_form=self.cal_form,
            tau1=self.tau1,
            tau2=self.tau2,
            loss_weights=self.loss_weights,
        )

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "ExperimentConfig":
        return ExperimentConfig.from_dict(json.loads(text))

    @staticmethod
    def from_dict(data: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(ExperimentConfig)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return ExperimentConfig(**data)

    def with_overrides(self, **kw) -> "ExperimentConfig":
        return replace(self, **kw)
