"""Run configuration: a flat JSON document plus command-line overrides."""

from __future__ import annotations

import json
from dataclasses import dataclass, fields, replace

from .attention import TransformerConfig
from .data import SceneConfig
from .errors import ConfigError


@dataclass(frozen=True)
class RunConfig:
    """Every hyperparameter of a run; defaults mirror the best published settings."""

    # model structure
    patch_size: int = 7
    pca_components: int = 20
    token_dim: int = 256
    blocks: int = 2
    heads: int = 8
    # pretraining objective
    loss_weight: float = 2.0
    spatial_ratio: float = 0.5
    spectral_ratio: float = 0.5
    # budgets
    pretrain_samples: int = 1000
    batch_size: int = 32
    pretrain_steps: int = 200
    train_steps: int = 300
    lr_pretrain: float = 1e-3
    lr_train: float = 5e-4
    seed: int = 0
    per_class_train: int = 20
    pca_sample_cap: int = 0  # 0 = fit on every labeled pixel
    # dataset profile
    height: int = 64
    width: int = 64
    num_classes: int = 5
    hsi_bands: int = 48
    aux_bands: int = 1
    noise_sigma: float = 0.1
    region_scale: float = 8.0

    def validate(self) -> "RunConfig":
        checks = [
            ("patch_size", self.patch_size >= 1 and self.patch_size % 2 == 1, "must be odd and positive"),
            ("pca_components", 1 <= self.pca_components <= self.hsi_bands, "must lie in [1, hsi_bands]"),
            ("token_dim", self.token_dim >= 4 and self.token_dim % 4 == 0, "must be a positive multiple of 4"),
            ("token_dim", self.token_dim % max(self.heads, 1) == 0, "must be divisible by heads"),
            ("blocks", self.blocks >= 0, "must be nonnegative"),
            ("heads", self.heads >= 1, "must be positive"),
            ("loss_weight", self.loss_weight >= 0, "must be nonnegative"),
            ("spatial_ratio", 0 < self.spatial_ratio <= 1, "must lie in (0, 1]"),
            ("spectral_ratio", 0 < self.spectral_ratio <= 1, "must lie in (0, 1]"),
            ("pretrain_samples", self.pretrain_samples >= 1, "must be positive"),
            ("batch_size", self.batch_size >= 1, "must be positive"),
            ("pretrain_steps", self.pretrain_steps >= 1, "must be positive"),
            ("train_steps", self.train_steps >= 1, "must be positive"),
            ("lr_pretrain", self.lr_pretrain >= 0, "must be nonnegative"),
            ("lr_train", self.lr_train >= 0, "must be nonnegative"),
            ("per_class_train", self.per_class_train >= 0, "must be nonnegative"),
            ("pca_sample_cap", self.pca_sample_cap >= 0, "must be nonnegative"),
            ("height", self.height >= 2, "must be at least 2"),
            ("width", self.width >= 2, "must be at least 2"),
            ("num_classes", self.num_classes >= 2, "must be at least 2"),
            ("hsi_bands", self.hsi_bands >= 1, "must be positive"),
            ("aux_bands", self.aux_bands >= 1, "must be positive"),
            ("noise_sigma", self.noise_sigma >= 0, "must be nonnegative"),
            ("region_scale", self.region_scale > 0, "must be positive"),
        ]
        for field_name, ok, why in checks:
            if not ok:
                raise ConfigError(f"{field_name}: {why} (got {getattr(self, field_name)!r})")
        return self

    def scene_config(self) -> SceneConfig:
        return SceneConfig(
            height=self.height,
            width=self.width,
            num_classes=self.num_classes,
            hsi_bands=self.hsi_bands,
            aux_bands=self.aux_bands,
            noise_sigma=self.noise_sigma,
            region_scale=self.region_scale,
        )

    def transformer_config(self) -> TransformerConfig:
        return TransformerConfig(
            channels=self.pca_components + self.aux_bands,
            blocks=self.blocks,
            token_dim=self.token_dim,
            heads=self.heads,
            patch_size=self.patch_size,
        )


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then JSON values, then explicit overrides (flags win)."""
    known = {f.name: f.type for f in fields(RunConfig)}
    cfg = RunConfig()
    if path is not None:
        with open(path) as fh:
            document = json.load(fh)
        if not isinstance(document, dict):
            raise ConfigError("config: document must be a flat JSON object")
        unknown = sorted(set(document) - set(known))
        if unknown:
            raise ConfigError(f"config: unknown fields {unknown}")
        cfg = replace(cfg, **document)
    if overrides:
        cfg = replace(cfg, **{k: v for k, v in overrides.items() if v is not None})
    return cfg.validate()
