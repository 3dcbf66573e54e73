"""Learnable text prompts: category vectors, image-conditioned mini-net, deep prompts.

Normal and abnormal prompts follow ``a photo of a [state] [z_1] ... [z_r]`` where
``z_i = v_i + x_i``; ``v_i`` are learned and ``x_i`` come from the global image
embedding through a single 1-D convolution (the mini-net). Deep prompts are
written into a reserved span before each text layer and whatever the layer
produced there is thrown away.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .backbone import Backbone, EmbeddingSequence
from .errors import ConfigError, ShapeMismatch


@dataclass(frozen=True)
class PromptTemplate:
    prefix: str = "a photo of a"
    state_pair: tuple[str, str] = ("good", "damaged")
    category_width: int = 2

    def __post_init__(self):
        if self.category_width < 1:
            raise ConfigError("category_width (r) must be >= 1")
        if len(self.state_pair) != 2:
            raise ConfigError("state_pair needs exactly two words")

    def texts(self) -> tuple[str, str]:
        return tuple(f"{self.prefix} {s}".strip() for s in self.state_pair)


def mini_net_forward(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    """Map ``(..., C)`` global embeddings to ``(..., r, C)`` with r width-3 kernels.

    ``x`` is treated as a single-channel signal of length C; zero padding keeps
    the length.
    """
    lead = x.shape[:-1]
    y = F.conv1d(x.reshape(-1, 1, x.shape[-1]), weight, bias, padding=1)
    return y.reshape(*lead, weight.shape[0], x.shape[-1])


def fuse_visual_context(v: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    if v.shape[-2:] != x.shape[-2:]:
        raise ShapeMismatch(f"context {tuple(v.shape)} vs mapped image features {tuple(x.shape)}")
    return x + v


def _splice(rows: torch.Tensor, span: range, values: torch.Tensor) -> torch.Tensor:
    """Return ``rows`` with ``rows[..., span, :]`` replaced, keeping autograd intact."""
    lead = torch.broadcast_shapes(rows.shape[:-2], values.shape[:-2])
    rows = rows.expand(*lead, *rows.shape[-2:])
    values = values.expand(*lead, *values.shape[-2:])
    return torch.cat([rows[..., : span.start, :], values, rows[..., span.stop :, :]], dim=-2)


def build_prompt_pair(
    backbone: Backbone,
    template: PromptTemplate,
    category_rows: torch.Tensor,
    deep_prompt_width: int = 0,
    placement: str = "pre",
) -> tuple[EmbeddingSequence, EmbeddingSequence]:
    """Normal and abnormal word-embedding sequences with the category span filled.

    ``category_rows`` is ``(r, C)`` or batched ``(B, r, C)``.
    """
    r = category_rows.shape[-2]
    if r != template.category_width:
        raise ShapeMismatch(f"template expects {template.category_width} category rows, got {r}")
    out = []
    for text in template.texts():
        seq = backbone.embed_tokens(
            backbone.tokenize(text), deep_prompt_width, category_width=r, placement=placement
        )
        rows = seq.rows.to(category_rows.dtype)
        out.append(seq.with_rows(_splice(rows, seq.category_span, category_rows)))
    return out[0], out[1]


def encode_prompts(
    pair: tuple[EmbeddingSequence, EmbeddingSequence],
    bank: list[torch.Tensor] | nn.ParameterList,
    backbone: Backbone,
) -> torch.Tensor:
    """Run both prompts through the text encoder with deep prompts; returns ``(..., 2, d_joint)``."""
    outs = []
    n_layers = backbone.config.text_layers
    for seq in pair:
        width = len(seq.deep_prompt_span)
        if width and len(bank) != n_layers:
            raise ConfigError(f"deep prompt bank has {len(bank)} entries, text encoder has {n_layers} layers")
        if width and any(p.shape[-2] != width for p in bank):
            raise ConfigError(f"deep prompt width does not match the reserved span of {width} rows")
        if not width and len(bank) and bank[0].shape[-2] != 0:
            raise ConfigError("sequence has no deep prompt span but the bank is non-empty")
        x = backbone.text_input(seq.rows)
        for i in range(1, n_layers + 1):
            if width:
                x = _splice(x, seq.deep_prompt_span, bank[i - 1].to(x.dtype))
            x = backbone.text_layer(i, x)
        outs.append(backbone.text_head_rows(x, seq.eos_index))
    return torch.stack(outs, dim=-2)


class PromptLearner(nn.Module):
    """Trainable prompt state: ``V``, deep prompts ``P_i`` and the mini-net."""

    def __init__(
        self,
        backbone: Backbone,
        template: PromptTemplate = PromptTemplate(),
        deep_prompt_width: int = 1,
        placement: str = "pre",
        pre_vcp: bool = True,
        adapter: bool = False,
        seed: int = 0,
    ):
        super().__init__()
        cfg = backbone.config
        c, r, n = cfg.text_width, template.category_width, int(deep_prompt_width)
        if n < 0:
            raise ConfigError("deep prompt width (n) must be >= 0")
        if placement not in ("pre", "post"):
            raise ConfigError(f"dtp_placement must be 'pre' or 'post', got {placement!r}")
        if pre_vcp and cfg.joint_dim != c and not adapter:
            raise ConfigError(
                f"mini-net needs joint_dim == text_width ({cfg.joint_dim} != {c}); enable the adapter"
            )
        self.template = template
        self.placement = placement
        self.pre_vcp = pre_vcp
        self.deep_prompt_width = n

        gen = torch.Generator().manual_seed(int(seed))

        def gauss(*shape):
            return torch.randn(*shape, generator=gen, dtype=torch.float64).to(torch.float32) * 0.02

        self.V = nn.Parameter(gauss(r, c))
        self.P = nn.ParameterList(nn.Parameter(gauss(n, c)) for _ in range(cfg.text_layers)) if n else nn.ParameterList()
        self.mininet_w = nn.Parameter(gauss(r, 1, 3))
        self.mininet_b = nn.Parameter(torch.zeros(r))
        self.adapter = nn.Linear(cfg.joint_dim, c) if (adapter and cfg.joint_dim != c) else None
        if self.adapter is not None:
            with torch.no_grad():
                self.adapter.weight.copy_(gauss(c, cfg.joint_dim))
                self.adapter.bias.zero_()

    def category_rows(self, global_embedding: torch.Tensor | None) -> torch.Tensor:
        if not self.pre_vcp or global_embedding is None:
            return self.V
        x = global_embedding.to(self.V.dtype)
        if self.adapter is not None:
            x = self.adapter(x)
        return fuse_visual_context(self.V, mini_net_forward(x, self.mininet_w, self.mininet_b))

    def forward(self, backbone: Backbone, global_embedding: torch.Tensor | None = None) -> torch.Tensor:
        """Text features ``F_t``: ``(B, 2, d_joint)`` with Pre-VCP, else ``(2, d_joint)``."""
        pair = build_prompt_pair(
            backbone, self.template, self.category_rows(global_embedding), self.deep_prompt_width, self.placement
        )
        return encode_prompts(pair, list(self.P), backbone)

    def named_tensors(self) -> dict[str, torch.Tensor]:
        out = {"prompt.V": self.V, "prompt.mininet.w": self.mininet_w, "prompt.mininet.b": self.mininet_b}
        out.update({f"prompt.P.{i}": p for i, p in enumerate(self.P)})
        if self.adapter is not None:
            out["prompt.adapter.w"] = self.adapter.weight
            out["prompt.adapter.b"] = self.adapter.bias
        return out
