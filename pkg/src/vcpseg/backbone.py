"""Frozen dual encoder: causal text transformer plus a ViT with intermediate taps.

The module mirrors the CLIP layout (pre-norm residual blocks, QuickGELU MLPs,
class token, ``ln_post`` + projection for the global image embedding) but keeps
every text layer individually callable so deep prompts can be written between
layers.
"""
from __future__ import annotations

import math
import re
from dataclasses import asdict, dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import archive
from .errors import CheckpointError, ConfigError, InvalidLayer, OverlongPrompt, ShapeMismatch
from .tokenizer import CONTEXT_LENGTH, TOY_VOCAB, TokenSequence, WhitespaceTokenizer, tokenize


@dataclass
class BackboneConfig:
    text_layers: int = 4
    text_width: int = 64
    text_heads: int = 4
    context_length: int = CONTEXT_LENGTH
    vocab_size: int = len(TOY_VOCAB)
    image_layers: int = 4
    image_width: int = 64
    image_heads: int = 4
    joint_dim: int = 64
    patch_size: int = 16
    tap_layers: tuple[int, ...] = (1, 2, 3, 4)
    image_size: tuple[int, int] = (64, 64)
    mlp_ratio: int = 4

    def __post_init__(self):
        self.tap_layers = tuple(int(t) for t in self.tap_layers)
        if isinstance(self.image_size, int):
            self.image_size = (self.image_size, self.image_size)
        self.image_size = tuple(int(s) for s in self.image_size)
        self.validate()

    def validate(self) -> None:
        for name in ("text_layers", "text_width", "text_heads", "vocab_size", "image_layers",
                     "image_width", "image_heads", "joint_dim", "patch_size", "mlp_ratio"):
            if int(getattr(self, name)) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.context_length != CONTEXT_LENGTH:
            raise ConfigError(f"context_length must be {CONTEXT_LENGTH}")
        if self.text_width % self.text_heads or self.image_width % self.image_heads:
            raise ConfigError("widths must be divisible by their head counts")
        taps = self.tap_layers
        if not taps:
            raise ConfigError("tap_layers must not be empty")
        if any(b <= a for a, b in zip(taps, taps[1:])):
            raise ConfigError(f"tap_layers must be strictly increasing, got {list(taps)}")
        if taps[0] < 1 or taps[-1] > self.image_layers:
            raise ConfigError(f"tap_layers must lie in [1, {self.image_layers}], got {list(taps)}")
        h, w = self.image_size
        if h <= 0 or w <= 0 or h % self.patch_size or w % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")

    @property
    def grid(self) -> tuple[int, int]:
        return self.image_size[0] // self.patch_size, self.image_size[1] // self.patch_size

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tap_layers"] = list(self.tap_layers)
        d["image_size"] = list(self.image_size)
        return d


@dataclass
class EmbeddingSequence:
    """A 77-row word-embedding matrix with its index map.

    ``rows`` may carry leading batch dimensions; the index map is shared.
    Positional embeddings are not included (see :meth:`Backbone.text_input`).
    """

    rows: torch.Tensor
    sos_index: int
    eos_index: int
    deep_prompt_span: range
    category_span: range
    pad_span: range
    token_span: range = field(default_factory=lambda: range(0))

    def with_rows(self, rows: torch.Tensor) -> "EmbeddingSequence":
        return replace(self, rows=rows)


@dataclass
class VisualOutput:
    global_embedding: torch.Tensor  # (B, d_joint)
    patch_maps: list[torch.Tensor]  # B_taps entries of (B, H, W, d_I)
    tap_layers: tuple[int, ...]


def quick_gelu(x: torch.Tensor) -> torch.Tensor:
    return x * torch.sigmoid(1.702 * x)


class ResidualBlock(nn.Module):
    """Pre-norm transformer block with packed attention/MLP parameters.

    ``attn_w`` stacks the q/k/v input projection (3C x C) over the output
    projection (C x C); ``mlp_w`` stacks the expansion weight over the
    transposed contraction weight.
    """

    def __init__(self, width: int, heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.width, self.heads = width, heads
        hidden = width * mlp_ratio
        self.ln1_w = nn.Parameter(torch.ones(width))
        self.ln1_b = nn.Parameter(torch.zeros(width))
        self.ln2_w = nn.Parameter(torch.ones(width))
        self.ln2_b = nn.Parameter(torch.zeros(width))
        self.attn_w = nn.Parameter(torch.zeros(4 * width, width))
        self.attn_b = nn.Parameter(torch.zeros(4 * width))
        self.mlp_w = nn.Parameter(torch.zeros(2, hidden, width))
        self.mlp_b = nn.Parameter(torch.zeros(hidden + width))

    def attention(self, x: torch.Tensor, mask: torch.Tensor | None) -> torch.Tensor:
        c, h = self.width, self.heads
        qkv = F.linear(x, self.attn_w[: 3 * c], self.attn_b[: 3 * c])
        q, k, v = qkv.split(c, dim=-1)
        shape = x.shape[:-1] + (h, c // h)
        q, k, v = (t.reshape(shape).transpose(-3, -2) for t in (q, k, v))
        scores = (q @ k.transpose(-1, -2)) * (c // h) ** -0.5
        if mask is not None:
            scores = scores + mask
        out = scores.softmax(dim=-1) @ v
        out = out.transpose(-3, -2).reshape(x.shape)
        return F.linear(out, self.attn_w[3 * c :], self.attn_b[3 * c :])

    def mlp(self, x: torch.Tensor) -> torch.Tensor:
        hidden = self.mlp_w.shape[1]
        y = quick_gelu(F.linear(x, self.mlp_w[0], self.mlp_b[:hidden]))
        return F.linear(y, self.mlp_w[1].t(), self.mlp_b[hidden:])

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        x = x + self.attention(F.layer_norm(x, (self.width,), self.ln1_w, self.ln1_b), mask)
        return x + self.mlp(F.layer_norm(x, (self.width,), self.ln2_w, self.ln2_b))


def _causal_mask(n: int, dtype, device) -> torch.Tensor:
    return torch.full((n, n), float("-inf"), dtype=dtype, device=device).triu(1)


class Backbone(nn.Module):
    """Frozen CLIP-style encoder pair. Build with :func:`init_random` or :func:`load_weights`."""

    def __init__(self, config: BackboneConfig, tokenizer=None, name: str = "toy"):
        super().__init__()
        self.config = config
        self.name = name
        self.tokenizer = tokenizer if tokenizer is not None else WhitespaceTokenizer()
        if self.tokenizer.vocab_size != config.vocab_size:
            raise ConfigError(
                f"tokenizer vocabulary ({self.tokenizer.vocab_size}) does not match vocab_size ({config.vocab_size})"
            )
        c, d = config.text_width, config.image_width
        gh, gw = config.grid
        p = config.patch_size
        self.tok_embed = nn.Parameter(torch.zeros(config.vocab_size, c))
        self.text_pos = nn.Parameter(torch.zeros(config.context_length, c))
        self.text_blocks = nn.ModuleList(
            ResidualBlock(c, config.text_heads, config.mlp_ratio) for _ in range(config.text_layers)
        )
        self.ln_final_w = nn.Parameter(torch.ones(c))
        self.ln_final_b = nn.Parameter(torch.zeros(c))
        self.text_proj = nn.Parameter(torch.zeros(c, config.joint_dim))

        self.patch_embed = nn.Parameter(torch.zeros(d, 3, p, p))
        self.cls_embed = nn.Parameter(torch.zeros(d))
        self.visual_pos = nn.Parameter(torch.zeros(gh * gw + 1, d))
        self.ln_pre_w = nn.Parameter(torch.ones(d))
        self.ln_pre_b = nn.Parameter(torch.zeros(d))
        self.visual_blocks = nn.ModuleList(
            ResidualBlock(d, config.image_heads, config.mlp_ratio) for _ in range(config.image_layers)
        )
        self.ln_post_w = nn.Parameter(torch.ones(d))
        self.ln_post_b = nn.Parameter(torch.zeros(d))
        self.visual_proj = nn.Parameter(torch.zeros(d, config.joint_dim))

    def freeze(self) -> "Backbone":
        for prm in self.parameters():
            prm.requires_grad_(False)
        return self.eval()

    # -- text side -----------------------------------------------------------

    def tokenize(self, text: str) -> TokenSequence:
        return tokenize(self.tokenizer, text, self.config.context_length)

    def word_embeddings(self, ids) -> torch.Tensor:
        return self.tok_embed[torch.as_tensor(list(ids), dtype=torch.long, device=self.tok_embed.device)]

    def embed_tokens(
        self,
        tokens: TokenSequence,
        deep_prompt_width: int = 0,
        *,
        category_width: int = 0,
        placement: str = "pre",
    ) -> EmbeddingSequence:
        """Lay out ``[s, P, tokens, category, e, J]`` (or P just before ``e`` for post placement).

        Deep-prompt, category and pad rows are zero; the total length stays 77.
        """
        n, r, t = int(deep_prompt_width), int(category_width), len(tokens)
        if n < 0 or r < 0:
            raise ConfigError("span widths must be non-negative")
        if placement not in ("pre", "post"):
            raise ConfigError(f"unknown deep prompt placement {placement!r}")
        L = self.config.context_length
        eos = 1 + n + t + r
        if eos + 1 > L:
            raise OverlongPrompt(f"layout needs {eos + 1} rows, context holds {L}")
        if placement == "pre":
            dp = range(1, 1 + n)
            tok = range(1 + n, 1 + n + t)
        else:
            tok = range(1, 1 + t)
            dp = range(1 + t + r, 1 + t + r + n)
        cat = range(tok.stop, tok.stop + r)
        rows = self.tok_embed.new_zeros(L, self.config.text_width)
        ends = self.word_embeddings([self.tokenizer.sos_id, self.tokenizer.eos_id])
        rows[0] = ends[0]
        rows[eos] = ends[1]
        if t:
            rows[tok.start : tok.stop] = self.word_embeddings(tokens.ids)
        return EmbeddingSequence(rows, 0, eos, dp, cat, range(eos + 1, L), tok)

    def text_input(self, rows: torch.Tensor) -> torch.Tensor:
        """Add positional embeddings; the result feeds text layer 1."""
        return rows + self.text_pos

    def text_layer(self, i: int, x: torch.Tensor) -> torch.Tensor:
        if not 1 <= i <= self.config.text_layers:
            raise InvalidLayer(f"text layer {i} outside [1, {self.config.text_layers}]")
        mask = _causal_mask(x.shape[-2], x.dtype, x.device)
        return self.text_blocks[i - 1](x, mask)

    def text_layer_forward(self, i: int, seq: EmbeddingSequence) -> EmbeddingSequence:
        return seq.with_rows(self.text_layer(i, seq.rows))

    def text_head_rows(self, x: torch.Tensor, eos_index: int) -> torch.Tensor:
        e = x[..., eos_index, :]
        e = F.layer_norm(e, (self.config.text_width,), self.ln_final_w, self.ln_final_b)
        return e @ self.text_proj

    def text_head(self, seq: EmbeddingSequence) -> torch.Tensor:
        return self.text_head_rows(seq.rows, seq.eos_index)

    def encode_text(self, seq: EmbeddingSequence) -> torch.Tensor:
        """Plain encoding with no deep-prompt injection."""
        x = self.text_input(seq.rows)
        for i in range(1, self.config.text_layers + 1):
            x = self.text_layer(i, x)
        return self.text_head_rows(x, seq.eos_index)

    # -- image side ----------------------------------------------------------

    def encode_image(self, image: torch.Tensor, taps: Sequence[int] | None = None) -> VisualOutput:
        """Encode ``(B, 3, h, w)`` (or ``(3, h, w)``) standardized images."""
        cfg = self.config
        taps = tuple(cfg.tap_layers if taps is None else taps)
        if any(not 1 <= t <= cfg.image_layers for t in taps):
            raise InvalidLayer(f"tap layers {list(taps)} outside [1, {cfg.image_layers}]")
        if image.dim() == 3:
            image = image.unsqueeze(0)
        if image.dim() != 4 or image.shape[1] != 3 or tuple(image.shape[-2:]) != cfg.image_size:
            raise ShapeMismatch(
                f"expected (B, 3, {cfg.image_size[0]}, {cfg.image_size[1]}), got {tuple(image.shape)}"
            )
        image = image.to(self.patch_embed.dtype)
        gh, gw = cfg.grid
        d = cfg.image_width
        x = F.conv2d(image, self.patch_embed, stride=cfg.patch_size)  # (B, d, gh, gw)
        x = x.flatten(2).transpose(1, 2)
        cls = self.cls_embed.expand(x.shape[0], 1, d)
        x = torch.cat([cls, x], dim=1) + self.visual_pos
        x = F.layer_norm(x, (d,), self.ln_pre_w, self.ln_pre_b)
        maps = {}
        for i, block in enumerate(self.visual_blocks, start=1):
            x = block(x)
            if i in taps:
                maps[i] = x[:, 1:].reshape(x.shape[0], gh, gw, d)
        g = F.layer_norm(x[:, 0], (d,), self.ln_post_w, self.ln_post_b) @ self.visual_proj
        return VisualOutput(g, [maps[t] for t in taps], taps)

    # -- named tensors -------------------------------------------------------

    def named_tensors(self) -> dict[str, torch.Tensor]:
        out = {
            "text.embed.tok": self.tok_embed,
            "text.embed.pos": self.text_pos,
            "text.ln_final.w": self.ln_final_w,
            "text.ln_final.b": self.ln_final_b,
            "text.proj": self.text_proj,
            "visual.embed.patch": self.patch_embed,
            "visual.embed.cls": self.cls_embed,
            "visual.embed.pos": self.visual_pos,
            "visual.ln_pre.w": self.ln_pre_w,
            "visual.ln_pre.b": self.ln_pre_b,
            "visual.ln_post.w": self.ln_post_w,
            "visual.ln_post.b": self.ln_post_b,
            "visual.proj": self.visual_proj,
        }
        for side, blocks in (("text", self.text_blocks), ("visual", self.visual_blocks)):
            for i, blk in enumerate(blocks):
                pre = f"{side}.layer.{i}"
                out.update({
                    f"{pre}.attn.w": blk.attn_w, f"{pre}.attn.b": blk.attn_b,
                    f"{pre}.mlp.w": blk.mlp_w, f"{pre}.mlp.b": blk.mlp_b,
                    f"{pre}.ln1.w": blk.ln1_w, f"{pre}.ln1.b": blk.ln1_b,
                    f"{pre}.ln2.w": blk.ln2_w, f"{pre}.ln2.b": blk.ln2_b,
                })
        return out

    def load_named_tensors(self, tensors: Mapping[str, np.ndarray]) -> None:
        own = self.named_tensors()
        with torch.no_grad():
            for name, prm in own.items():
                arr = archive.require(tensors, name)
                if name == "visual.embed.pos" and tuple(arr.shape) != tuple(prm.shape):
                    arr = resize_pos_embed(np.asarray(arr), self.config.grid)
                archive.require({name: arr}, name, tuple(prm.shape))
                prm.copy_(torch.as_tensor(np.asarray(arr), dtype=prm.dtype))

    def content_hash(self) -> str:
        return archive.content_hash(self.named_tensors())

    def save_weights(self, path) -> None:
        meta = {"config": self.config.to_dict(), "name": self.name}
        archive.save(path, self.named_tensors(), meta)


def resize_pos_embed(pos: np.ndarray, grid: tuple[int, int]) -> np.ndarray:
    """Bicubically resample a ``(1 + g*g, d)`` positional table to a new patch grid."""
    n, d = pos.shape
    g = int(round(math.sqrt(n - 1)))
    if g * g != n - 1:
        raise CheckpointError("visual.embed.pos", f"cannot infer a square grid from {n - 1} patch rows")
    cls, grid_rows = pos[:1], pos[1:]
    t = torch.as_tensor(grid_rows, dtype=torch.float64).reshape(1, g, g, d).permute(0, 3, 1, 2)
    t = F.interpolate(t, size=grid, mode="bicubic", align_corners=False)
    t = t.permute(0, 2, 3, 1).reshape(grid[0] * grid[1], d).numpy().astype(pos.dtype)
    return np.concatenate([cls, t], axis=0)


def init_random(config: BackboneConfig, seed: int = 0, dtype=torch.float32) -> Backbone:
    """Deterministic CLIP-style random initialization (toy backbones)."""
    model = Backbone(config)
    gen = torch.Generator().manual_seed(int(seed))

    def normal_(t, std):
        with torch.no_grad():
            t.copy_(torch.randn(t.shape, generator=gen, dtype=torch.float64) * std)

    c, d = config.text_width, config.image_width
    normal_(model.tok_embed, 0.02)
    normal_(model.text_pos, 0.01)
    for width, blocks in ((c, model.text_blocks), (d, model.visual_blocks)):
        depth = len(blocks)
        for blk in blocks:
            normal_(blk.attn_w[: 3 * width], width ** -0.5)
            normal_(blk.attn_w[3 * width :], width ** -0.5 * (2 * depth) ** -0.5)
            normal_(blk.mlp_w[0], (2 * width) ** -0.5)
            normal_(blk.mlp_w[1], width ** -0.5 * (2 * depth) ** -0.5)
    normal_(model.text_proj, c ** -0.5)
    p = config.patch_size
    normal_(model.patch_embed, (3 * p * p) ** -0.5)
    normal_(model.cls_embed, d ** -0.5)
    normal_(model.visual_pos, d ** -0.5)
    normal_(model.visual_proj, d ** -0.5)
    return model.to(dtype).freeze()


_LAYER_RE = re.compile(r"^(text|visual)\.layer\.(\d+)\.")


def config_from_tensors(tensors: Mapping[str, np.ndarray], meta: Mapping | None = None, **overrides) -> BackboneConfig:
    """Infer architecture sizes from tensor shapes (head counts from metadata, else width/64)."""
    meta = dict(meta or {})
    stored = dict(meta.get("config", {}))
    tok = archive.require(tensors, "text.embed.tok")
    pos = archive.require(tensors, "text.embed.pos")
    cls = archive.require(tensors, "visual.embed.cls")
    patch = archive.require(tensors, "visual.embed.patch")
    vpos = archive.require(tensors, "visual.embed.pos")
    proj = archive.require(tensors, "visual.proj")
    counts = {"text": 0, "visual": 0}
    for name in tensors:
        m = _LAYER_RE.match(name)
        if m:
            counts[m.group(1)] = max(counts[m.group(1)], int(m.group(2)) + 1)
    c, d = int(tok.shape[1]), int(cls.shape[0])
    p = int(patch.shape[-1])
    g = int(round(math.sqrt(vpos.shape[0] - 1)))
    mlp = tensors.get("text.layer.0.mlp.w")
    kw = dict(
        text_layers=counts["text"],
        text_width=c,
        text_heads=int(stored.get("text_heads", max(1, c // 64))),
        context_length=int(pos.shape[0]),
        vocab_size=int(tok.shape[0]),
        image_layers=counts["visual"],
        image_width=d,
        image_heads=int(stored.get("image_heads", max(1, d // 64))),
        joint_dim=int(proj.shape[1]),
        patch_size=p,
        tap_layers=tuple(stored.get("tap_layers", (counts["visual"],))),
        image_size=tuple(stored.get("image_size", (g * p, g * p))),
        mlp_ratio=int(mlp.shape[1] // c) if mlp is not None else 4,
    )
    kw.update({k: v for k, v in overrides.items() if v is not None})
    return BackboneConfig(**kw)


def load_weights(path, tokenizer=None, *, tap_layers=None, image_size=None, dtype=torch.float32) -> Backbone:
    """Load a named-tensor archive into a frozen :class:`Backbone`."""
    tensors, meta = archive.load(path)
    config = config_from_tensors(tensors, meta, tap_layers=tap_layers, image_size=image_size)
    if tokenizer is None and config.vocab_size == len(TOY_VOCAB):
        tokenizer = WhitespaceTokenizer()
    if tokenizer is None:
        raise ConfigError("a BPE tokenizer is required for a pretrained-vocabulary backbone")
    model = Backbone(config, tokenizer, name=str(meta.get("name", "pretrained")))
    model = model.to(dtype)
    model.load_named_tensors(tensors)
    return model.freeze()


# -- OpenAI checkpoint conversion ---------------------------------------------

def _np(t) -> np.ndarray:
    if isinstance(t, torch.Tensor):
        return t.detach().to(torch.float32).cpu().numpy()
    return np.asarray(t, dtype=np.float32)


def _convert_block(sd, src: str, dst: str, out: dict) -> None:
    out[f"{dst}.attn.w"] = np.concatenate([_np(sd[f"{src}.attn.in_proj_weight"]), _np(sd[f"{src}.attn.out_proj.weight"])])
    out[f"{dst}.attn.b"] = np.concatenate([_np(sd[f"{src}.attn.in_proj_bias"]), _np(sd[f"{src}.attn.out_proj.bias"])])
    out[f"{dst}.mlp.w"] = np.stack([_np(sd[f"{src}.mlp.c_fc.weight"]), _np(sd[f"{src}.mlp.c_proj.weight"]).T])
    out[f"{dst}.mlp.b"] = np.concatenate([_np(sd[f"{src}.mlp.c_fc.bias"]), _np(sd[f"{src}.mlp.c_proj.bias"])])
    for a, b in (("ln_1", "ln1"), ("ln_2", "ln2")):
        out[f"{dst}.{b}.w"] = _np(sd[f"{src}.{a}.weight"])
        out[f"{dst}.{b}.b"] = _np(sd[f"{src}.{a}.bias"])


def openai_to_named(state_dict: Mapping[str, torch.Tensor]) -> dict[str, np.ndarray]:
    """Map an OpenAI CLIP ``state_dict`` onto the archive naming scheme."""
    sd = state_dict
    try:
        out = {
            "text.embed.tok": _np(sd["token_embedding.weight"]),
            "text.embed.pos": _np(sd["positional_embedding"]),
            "text.ln_final.w": _np(sd["ln_final.weight"]),
            "text.ln_final.b": _np(sd["ln_final.bias"]),
            "text.proj": _np(sd["text_projection"]),
            "visual.embed.patch": _np(sd["visual.conv1.weight"]),
            "visual.embed.cls": _np(sd["visual.class_embedding"]),
            "visual.embed.pos": _np(sd["visual.positional_embedding"]),
            "visual.ln_pre.w": _np(sd["visual.ln_pre.weight"]),
            "visual.ln_pre.b": _np(sd["visual.ln_pre.bias"]),
            "visual.ln_post.w": _np(sd["visual.ln_post.weight"]),
            "visual.ln_post.b": _np(sd["visual.ln_post.bias"]),
            "visual.proj": _np(sd["visual.proj"]),
        }
        for prefix, dst in (("transformer.resblocks", "text.layer"), ("visual.transformer.resblocks", "visual.layer")):
            idx = sorted({int(k[len(prefix) + 1 :].split(".")[0]) for k in sd if k.startswith(prefix + ".")})
            for i in idx:
                _convert_block(sd, f"{prefix}.{i}", f"{dst}.{i}", out)
    except KeyError as exc:
        raise CheckpointError(str(exc.args[0]), "missing in source checkpoint") from None
    return out


def openai_config(state_dict: Mapping[str, torch.Tensor], **overrides) -> BackboneConfig:
    """Architecture of an OpenAI CLIP checkpoint, read from tensor shapes only."""
    sd = state_dict
    c = sd["token_embedding.weight"].shape[1]
    d = sd["visual.conv1.weight"].shape[0]
    p = sd["visual.conv1.weight"].shape[-1]
    g = int(round(math.sqrt(sd["visual.positional_embedding"].shape[0] - 1)))
    n_t = len({k.split(".")[2] for k in sd if k.startswith("transformer.resblocks.")})
    n_v = len({k.split(".")[3] for k in sd if k.startswith("visual.transformer.resblocks.")})
    kw = dict(
        text_layers=n_t, text_width=c, text_heads=max(1, c // 64),
        context_length=sd["positional_embedding"].shape[0], vocab_size=sd["token_embedding.weight"].shape[0],
        image_layers=n_v, image_width=d, image_heads=max(1, d // 64),
        joint_dim=sd["text_projection"].shape[1], patch_size=p,
        tap_layers=(n_v,), image_size=(g * p, g * p),
        mlp_ratio=sd["transformer.resblocks.0.mlp.c_fc.weight"].shape[0] // c,
    )
    kw.update({k: v for k, v in overrides.items() if v is not None})
    return BackboneConfig(**kw)


def convert_openai_checkpoint(src, dst) -> BackboneConfig:
    """Convert an OpenAI ``.pt`` (TorchScript or plain state dict) to a named-tensor archive."""
    try:
        sd = torch.jit.load(src, map_location="cpu").state_dict()
    except RuntimeError:
        sd = torch.load(src, map_location="cpu", weights_only=False)
        if hasattr(sd, "state_dict"):
            sd = sd.state_dict()
    config = openai_config(sd)
    meta = {"config": config.to_dict(), "name": f"openai:{getattr(src, 'name', str(src)).split('/')[-1]}"}
    archive.save(dst, openai_to_named(sd), meta)
    return config
