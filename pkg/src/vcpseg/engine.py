"""Model assembly, training loop, fused inference and trainable-only checkpoints."""
from __future__ import annotations

import json
import logging
import math
import os
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from torch import nn

from . import archive
from .backbone import Backbone, BackboneConfig, init_random, load_weights
from .config import LossConfig, ModelConfig, RunConfig, TrainConfig, from_dict
from .data import PreprocessSpec, Sample, load_batch
from .errors import CheckpointError, ConfigError, DataError, DivergedError
from .heads import ABNORMAL, AnomalyHeads, combine_layers, fuse
from .loss import total_loss
from .prompt import PromptLearner, PromptTemplate
from .tokenizer import BPETokenizer

log = logging.getLogger(__name__)

DTYPES = {"float32": torch.float32, "float64": torch.float64}
BPE_FILENAME = "bpe_simple_vocab_16e6.txt.gz"


@dataclass
class ModelOutput:
    m1: list[torch.Tensor]
    m2: list[torch.Tensor]
    text: torch.Tensor
    updated_text: list[torch.Tensor]
    attention: list[torch.Tensor]


@dataclass
class AnomalyResult:
    anomaly_map: torch.Tensor  # (B, h, w)
    m1: torch.Tensor  # (B, 2, h, w) layer-combined baseline branch
    m2: torch.Tensor | None
    image_score: torch.Tensor  # (B,)
    updated_text: list[torch.Tensor] = field(default_factory=list)
    attention: list[torch.Tensor] = field(default_factory=list)


class VCPModel(nn.Module):
    """Frozen backbone plus the trainable prompt learner and anomaly heads."""

    def __init__(self, backbone: Backbone, cfg: ModelConfig = ModelConfig(), seed: int = 0):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.backbone = backbone.freeze()
        bc = backbone.config
        if tuple(cfg.tap_layers) != bc.tap_layers:
            raise ConfigError(f"model.tap_layers {cfg.tap_layers} differ from backbone taps {list(bc.tap_layers)}")
        template = PromptTemplate(cfg.template, tuple(cfg.state_pair), cfg.r)
        self.prompt = PromptLearner(
            backbone, template, cfg.n, cfg.dtp_placement, cfg.pre_vcp, cfg.adapter, seed=seed
        )
        self.heads = AnomalyHeads(
            bc.image_width, bc.joint_dim, len(bc.tap_layers), cfg.heads, cfg.share_heads, cfg.attention_scaling, seed=seed
        )
        self.to(backbone.tok_embed.dtype)

    @property
    def image_size(self) -> tuple[int, int]:
        return self.backbone.config.image_size

    def trainable_tensors(self) -> dict[str, torch.Tensor]:
        return {**self.prompt.named_tensors(), **self.heads.named_tensors()}

    def trainable_parameters(self) -> list[nn.Parameter]:
        return list(self.trainable_tensors().values())

    def forward(self, images: torch.Tensor) -> ModelOutput:
        with torch.no_grad():
            vis = self.backbone.encode_image(images)
        text = self.prompt(self.backbone, vis.global_embedding if self.cfg.pre_vcp else None)
        m1, m2, outs, attn = self.heads(vis.patch_maps, text, self.image_size, self.cfg.post_vcp)
        return ModelOutput(m1, m2, text, outs, attn)

    def state_hash(self) -> str:
        return archive.content_hash(self.trainable_tensors())


def build_backbone(cfg: RunConfig) -> Backbone:
    size = (cfg.model.image_size, cfg.model.image_size)
    dtype = DTYPES[cfg.train.dtype]
    if cfg.backbone == "toy":
        t = cfg.toy
        bc = BackboneConfig(
            text_layers=t.text_layers, text_width=t.text_width, text_heads=t.text_heads,
            image_layers=t.image_layers, image_width=t.image_width, image_heads=t.image_heads,
            joint_dim=t.joint_dim, patch_size=t.patch_size, mlp_ratio=t.mlp_ratio,
            tap_layers=tuple(cfg.model.tap_layers), image_size=size,
        )
        bb = init_random(bc, seed=t.seed, dtype=dtype)
        if t.zero_visual_pos:
            with torch.no_grad():
                bb.visual_pos.zero_()
        bb.name = f"toy:seed={t.seed}"
        return bb
    path = cfg.backbone.split(":", 1)[1]
    vocab = cfg.bpe_vocab or str(Path(path).with_name(BPE_FILENAME))
    if not os.path.isfile(vocab):
        raise ConfigError(f"bpe_vocab: BPE vocabulary not found at {vocab}")
    bb = load_weights(path, BPETokenizer(vocab), tap_layers=tuple(cfg.model.tap_layers), image_size=size, dtype=dtype)
    bb.name = f"pretrained:{Path(path).name}"
    return bb


def build_model(cfg: RunConfig, backbone: Backbone | None = None) -> VCPModel:
    backbone = backbone if backbone is not None else build_backbone(cfg)
    model = VCPModel(backbone, cfg.model, seed=cfg.seed)
    return model.to(cfg.train.device)


# -- inference ---------------------------------------------------------------

@torch.no_grad()
def infer(model: VCPModel, images: torch.Tensor, alpha: float | None = None) -> AnomalyResult:
    """Fused anomaly maps for a batch of preprocessed images; image score is the map maximum."""
    alpha = model.cfg.alpha if alpha is None else alpha
    was_training = model.training
    model.eval()
    try:
        out = model(images.to(next(model.parameters()).device))
    finally:
        model.train(was_training)
    m1 = combine_layers(out.m1)
    m2 = combine_layers(out.m2) if out.m2 else None
    if m2 is None:
        amap = m1[:, ABNORMAL].clone()
    else:
        amap = fuse(m1, m2, alpha)
    score = amap.flatten(1).max(dim=1).values
    return AnomalyResult(amap, m1, m2, score, out.updated_text, out.attention)


# -- checkpoints -------------------------------------------------------------

def _meta_path(path) -> Path:
    return Path(f"{os.fspath(path)}.meta.json")


def checkpoint_meta(model: VCPModel, run_cfg: RunConfig | None = None, **extra) -> dict:
    meta = {
        "format": 1,
        "model": asdict(model.cfg),
        "backbone": {
            "name": model.backbone.name,
            "hash": model.backbone.content_hash(),
            "config": model.backbone.config.to_dict(),
        },
    }
    if run_cfg is not None:
        # the output directory is where the checkpoint lives, not part of the run identity
        cfg = run_cfg.to_dict()
        cfg.pop("output_dir", None)
        meta["config"] = cfg
        meta["seed"] = run_cfg.seed
    meta.update(extra)
    return meta


def save_checkpoint(model: VCPModel, path, meta: dict | None = None) -> None:
    meta = dict(meta) if meta is not None else checkpoint_meta(model)
    archive.save(path, model.trainable_tensors())
    _meta_path(path).write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def read_meta(path) -> dict:
    try:
        return json.loads(_meta_path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(str(_meta_path(path)), f"unreadable sidecar ({exc})") from None


def load_trainable(model: VCPModel, tensors: dict[str, np.ndarray]) -> None:
    own = model.trainable_tensors()
    for name in tensors:
        if name not in own:
            raise CheckpointError(name, "unexpected tensor in checkpoint")
    with torch.no_grad():
        for name, prm in own.items():
            arr = archive.require(tensors, name, tuple(prm.shape))
            prm.copy_(torch.as_tensor(arr, dtype=prm.dtype))


def load_checkpoint(path, backbone: Backbone, seed: int = 0) -> VCPModel:
    """Rebuild a :class:`VCPModel` on ``backbone`` from an archive and its sidecar."""
    meta = read_meta(path)
    cfg = from_dict(ModelConfig, meta.get("model", {}))
    expected = meta.get("backbone", {}).get("hash")
    if expected and expected != backbone.content_hash():
        warnings.warn(
            f"checkpoint was trained on backbone {meta['backbone'].get('name')} with a different content hash",
            stacklevel=2,
        )
    try:
        model = VCPModel(backbone, cfg, seed=seed)
    except ConfigError as exc:
        raise CheckpointError("<model>", str(exc)) from None
    tensors, _ = archive.load(path)
    load_trainable(model, tensors)
    return model


# -- training ----------------------------------------------------------------

@dataclass
class TrainResult:
    history: list[dict]
    steps: int

    def epoch_means(self) -> list[float]:
        by_epoch: dict[int, list[float]] = {}
        for rec in self.history:
            by_epoch.setdefault(rec["epoch"], []).append(rec["loss_total"])
        return [float(np.mean(v)) for _, v in sorted(by_epoch.items())]


def _snapshot(model: VCPModel) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().copy() for k, v in model.trainable_tensors().items()}


def train(
    model: VCPModel,
    samples: list[Sample],
    cfg: TrainConfig = TrainConfig(),
    loss_cfg: LossConfig = LossConfig(),
    seed: int = 0,
    log_fn: Callable[[dict], None] | None = None,
    cache: bool | None = None,
) -> TrainResult:
    """Adam over prompt and head parameters only; the backbone is checked to stay bit-identical."""
    cfg.validate()
    if not samples:
        raise DataError("training set is empty")
    spec = PreprocessSpec(size=model.image_size)
    device = next(model.parameters()).device
    backbone_hash = model.backbone.content_hash()
    params = model.trainable_parameters()
    for prm in params:
        prm.requires_grad_(True)
    opt = torch.optim.Adam(params, lr=cfg.learning_rate, betas=(0.9, 0.999), eps=1e-8, weight_decay=cfg.weight_decay)
    n = len(samples)
    per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = cfg.epochs * per_epoch
    if cfg.max_steps is not None:
        total_steps = min(total_steps, cfg.max_steps)
    sched = None
    if cfg.lr_schedule == "cosine" and total_steps:
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=total_steps)
    gen = torch.Generator().manual_seed(int(seed))
    use_cache = n <= 256 if cache is None else cache
    loaded: dict[int, tuple[torch.Tensor, torch.Tensor]] = {}

    def batch(idx: list[int]):
        missing = [i for i in idx if i not in loaded]
        if missing:
            imgs, masks = load_batch([samples[i] for i in missing], spec)
            fetched = dict(zip(missing, zip(imgs, masks)))
            if use_cache:
                loaded.update(fetched)
        else:
            fetched = {}
        pick = [loaded[i] if i in loaded else fetched[i] for i in idx]
        return torch.stack([p[0] for p in pick]).to(device), torch.stack([p[1] for p in pick]).to(device)

    history: list[dict] = []
    step = 0
    model.train()
    for epoch in range(1, cfg.epochs + 1):
        order = torch.randperm(n, generator=gen).tolist()
        for b in range(per_epoch):
            if step >= total_steps:
                break
            images, masks = batch(order[b * cfg.batch_size : (b + 1) * cfg.batch_size])
            out = model(images)
            loss, terms = total_loss(out.m1, out.m2, masks, loss_cfg.focal_gamma, loss_cfg.dice_smooth, with_terms=True)
            if not torch.isfinite(loss):
                raise DivergedError(f"non-finite loss at step {step + 1}", state=_snapshot(model), step=step + 1)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            # parameters are still the last finite ones until opt.step()
            if not all(torch.isfinite(p.grad).all() for p in params if p.grad is not None):
                raise DivergedError(f"non-finite gradient at step {step + 1}", state=_snapshot(model), step=step + 1)
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
            opt.step()
            if sched is not None:
                sched.step()
            step += 1
            rec = {"step": step, "epoch": epoch, **{k: float(v.detach()) for k, v in terms.items()}, "loss_total": float(loss.detach())}
            history.append(rec)
            if log_fn is not None:
                log_fn(rec)
        log.info("epoch %d done, %d steps", epoch, step)
    model.eval()
    if model.backbone.content_hash() != backbone_hash:
        raise RuntimeError("backbone parameters changed during training")
    return TrainResult(history, step)
