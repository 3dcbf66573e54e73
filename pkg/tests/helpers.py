"""Small shared builders for the test suite."""
from __future__ import annotations

import torch

from vcpseg.backbone import BackboneConfig, init_random
from vcpseg.config import ModelConfig
from vcpseg.engine import VCPModel

TINY = dict(
    text_layers=2, text_width=32, text_heads=4,
    image_layers=2, image_width=32, image_heads=4,
    joint_dim=32, patch_size=16, tap_layers=(1, 2), image_size=(64, 64),
)


def tiny_config(**kw) -> BackboneConfig:
    return BackboneConfig(**{**TINY, **kw})


def tiny_backbone(seed: int = 0, dtype=torch.float64, **kw):
    return init_random(tiny_config(**kw), seed=seed, dtype=dtype)


def tiny_model(seed: int = 0, dtype=torch.float64, backbone=None, **model_kw) -> VCPModel:
    bb = backbone if backbone is not None else tiny_backbone(dtype=dtype)
    cfg = ModelConfig(tap_layers=list(bb.config.tap_layers), image_size=bb.config.image_size[0], heads=4, **model_kw)
    return VCPModel(bb, cfg, seed=seed)


def random_images(n: int, size: int = 64, seed: int = 0, dtype=torch.float64) -> torch.Tensor:
    gen = torch.Generator().manual_seed(seed)
    return torch.randn(n, 3, size, size, generator=gen, dtype=dtype)
