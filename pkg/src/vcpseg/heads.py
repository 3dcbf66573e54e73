"""Anomaly-map heads.

Two branches per tapped image layer:

* baseline: patch tokens go through a linear map into the joint space and are
  cosine-compared with the normal/abnormal text features;
* Post-VCP: the text features query the patch tokens through multi-head
  cross-attention, are projected back to the image width, and are then
  cosine-compared with the raw patch tokens.

Both branches upsample the two-class logits to image size before the
temperature softmax. Maps are laid out ``(B, 2, h, w)``; channel 0 is normal,
channel 1 abnormal.
"""
from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, DegenerateEmbedding, InvalidTemperature, ShapeMismatch

NORMAL, ABNORMAL = 0, 1
TAU_MIN, TAU_MAX = 0.01, 1.0
TAU_INIT = 0.07


def _check_tau(tau) -> None:
    bad = (tau <= 0).any().item() if isinstance(tau, torch.Tensor) else tau <= 0
    if bad:
        raise InvalidTemperature(f"temperature must be positive, got {tau}")


def _l2(x: torch.Tensor) -> torch.Tensor:
    return F.normalize(x, dim=-1, eps=1e-12)


def cosine_logits(patches: torch.Tensor, text: torch.Tensor) -> torch.Tensor:
    """``(B, HW, D)`` x ``(B, 2, D)`` -> ``(B, HW, 2)`` cosine similarities."""
    return _l2(patches) @ _l2(text).transpose(-1, -2)


def logits_to_map(logits: torch.Tensor, grid: tuple[int, int], tau, out_size: tuple[int, int]) -> torch.Tensor:
    """Reshape to the patch grid, bilinearly upsample, then softmax(logits / tau) over the pair."""
    _check_tau(tau)
    b = logits.shape[0]
    m = logits.transpose(1, 2).reshape(b, 2, *grid)
    m = F.interpolate(m, size=tuple(out_size), mode="bilinear", align_corners=False)
    return (m / tau).softmax(dim=1)


def _flatten(z: torch.Tensor) -> tuple[torch.Tensor, tuple[int, int]]:
    if z.dim() != 4:
        raise ShapeMismatch(f"patch map must be (B, H, W, D), got {tuple(z.shape)}")
    b, h, w, d = z.shape
    return z.reshape(b, h * w, d), (h, w)


def _batched_text(text: torch.Tensor, b: int) -> torch.Tensor:
    if text.dim() == 2:
        text = text.unsqueeze(0)
    return text.expand(b, *text.shape[-2:])


def baseline_logits(z: torch.Tensor, text: torch.Tensor, proj: nn.Linear) -> torch.Tensor:
    flat, _ = _flatten(z)
    return cosine_logits(proj(flat), _batched_text(text, flat.shape[0]))


def baseline_map(z, text, proj: nn.Linear, tau, out_size) -> torch.Tensor:
    _check_tau(tau)
    return logits_to_map(baseline_logits(z, text, proj), z.shape[1:3], tau, out_size)


def post_vcp_update(text, z, wq, wk, wv, wo, heads: int, scaled: bool = False):
    """Cross-attention text update.

    Returns ``(O_t, A)`` with ``O_t`` of shape ``(B, 2, d_I)`` and attention
    ``A`` of shape ``(B, heads, 2, HW)``. No ``1/sqrt(d)`` factor unless
    ``scaled`` is set.
    """
    flat, _ = _flatten(z)
    b, hw, _ = flat.shape
    c = wq.shape[1]
    if c % heads:
        raise ConfigError(f"head count {heads} does not divide width {c}")
    text = _batched_text(text, b)
    q = (text @ wq).reshape(b, 2, heads, c // heads).transpose(1, 2)
    k = (flat @ wk).reshape(b, hw, heads, c // heads).transpose(1, 2)
    v = (flat @ wv).reshape(b, hw, heads, c // heads).transpose(1, 2)
    scores = q @ k.transpose(-1, -2)
    if scaled:
        scores = scores / math.sqrt(c // heads)
    attn = scores.softmax(dim=-1)
    o = (attn @ v).transpose(1, 2).reshape(b, 2, c)
    return o @ wo, attn


def post_vcp_logits(z: torch.Tensor, o_t: torch.Tensor) -> torch.Tensor:
    flat, _ = _flatten(z)
    return cosine_logits(flat, _batched_text(o_t, flat.shape[0]))


def post_vcp_map(z, o_t, tau, out_size) -> torch.Tensor:
    _check_tau(tau)
    return logits_to_map(post_vcp_logits(z, o_t), z.shape[1:3], tau, out_size)


def combine_layers(maps) -> torch.Tensor:
    """Mean over layers (the layer sum rescaled by 1/B, so rankings are unchanged)."""
    maps = list(maps)
    if not maps:
        raise ConfigError("no layer maps to combine")
    shape = maps[0].shape
    if any(m.shape != shape for m in maps):
        raise ShapeMismatch("layer maps differ in shape")
    return torch.stack(maps).mean(dim=0)


def fuse(m1: torch.Tensor, m2: torch.Tensor, alpha: float) -> torch.Tensor:
    """Convex blend of the abnormal channels: ``(1 - alpha) * M1 + alpha * M2``."""
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")
    if alpha == 0.0:
        return m1[:, ABNORMAL].clone()
    if alpha == 1.0:
        return m2[:, ABNORMAL].clone()
    return (1.0 - alpha) * m1[:, ABNORMAL] + alpha * m2[:, ABNORMAL]


def classification_weights(text: torch.Tensor) -> torch.Tensor:
    """Normalized normal row minus normalized abnormal row: a hyperplane for patch features."""
    if text.shape[-2] != 2:
        raise ShapeMismatch(f"need (…, 2, D) text features, got {tuple(text.shape)}")
    norms = text.norm(dim=-1)
    if (norms == 0).any():
        raise DegenerateEmbedding("zero-norm text embedding")
    t = text / norms.unsqueeze(-1)
    return t[..., NORMAL, :] - t[..., ABNORMAL, :]


class PostVCP(nn.Module):
    def __init__(self, text_dim: int, image_dim: int, heads: int, scaled: bool = False, generator=None):
        super().__init__()
        if text_dim % heads:
            raise ConfigError(f"head count {heads} does not divide width {text_dim}")
        self.heads, self.scaled = heads, scaled

        def init(rows, cols):
            return nn.Parameter(
                (torch.randn(rows, cols, generator=generator, dtype=torch.float64) * rows ** -0.5).to(torch.float32)
            )

        self.wq = init(text_dim, text_dim)
        self.wk = init(image_dim, text_dim)
        self.wv = init(image_dim, text_dim)
        self.wo = init(text_dim, image_dim)

    def forward(self, text, z):
        return post_vcp_update(text, z, self.wq, self.wk, self.wv, self.wo, self.heads, self.scaled)


class AnomalyHeads(nn.Module):
    """Per-tap joint projections, Post-VCP modules and the two learnable temperatures."""

    def __init__(
        self,
        image_dim: int,
        text_dim: int,
        n_taps: int,
        heads: int = 8,
        share: bool = False,
        scaled_attention: bool = False,
        seed: int = 0,
    ):
        super().__init__()
        gen = torch.Generator().manual_seed(int(seed) + 1)
        count = 1 if share else n_taps
        self.share = share
        self.n_taps = n_taps
        self.joint = nn.ModuleList()
        for _ in range(count):
            lin = nn.Linear(image_dim, text_dim)
            with torch.no_grad():
                w = torch.randn(text_dim, image_dim, generator=gen, dtype=torch.float64) * image_dim ** -0.5
                lin.weight.copy_(w.to(torch.float32))
                lin.bias.zero_()
            self.joint.append(lin)
        self.postvcp = nn.ModuleList(
            PostVCP(text_dim, image_dim, heads, scaled_attention, generator=gen) for _ in range(count)
        )
        self.log_tau1 = nn.Parameter(torch.tensor(math.log(TAU_INIT)))
        self.log_tau2 = nn.Parameter(torch.tensor(math.log(TAU_INIT)))

    @property
    def tau1(self) -> torch.Tensor:
        return self.log_tau1.exp().clamp(TAU_MIN, TAU_MAX)

    @property
    def tau2(self) -> torch.Tensor:
        return self.log_tau2.exp().clamp(TAU_MIN, TAU_MAX)

    def _idx(self, k: int) -> int:
        return 0 if self.share else k

    def forward(self, patch_maps, text, out_size, post_vcp: bool = True):
        """Return ``(M1, M2, O_t, A)``, each a list over tapped layers (M2/O_t/A empty if disabled)."""
        if len(patch_maps) != self.n_taps:
            raise ShapeMismatch(f"expected {self.n_taps} patch maps, got {len(patch_maps)}")
        m1, m2, outs, attns = [], [], [], []
        for k, z in enumerate(patch_maps):
            z = z.to(self.log_tau1.dtype)
            i = self._idx(k)
            m1.append(baseline_map(z, text, self.joint[i], self.tau1, out_size))
            if post_vcp:
                o_t, a = self.postvcp[i](text, z)
                m2.append(post_vcp_map(z, o_t, self.tau2, out_size))
                outs.append(o_t)
                attns.append(a)
        return m1, m2, outs, attns

    def named_tensors(self) -> dict[str, torch.Tensor]:
        out = {"head.tau1": self.log_tau1, "head.tau2": self.log_tau2}
        for i, (lin, pv) in enumerate(zip(self.joint, self.postvcp)):
            key = "shared" if self.share else f"l{i}"
            out[f"head.{key}.joint.w"] = lin.weight
            out[f"head.{key}.joint.b"] = lin.bias
            for nm in ("wq", "wk", "wv", "wo"):
                out[f"head.{key}.postvcp.{nm}"] = getattr(pv, nm)
        return out
