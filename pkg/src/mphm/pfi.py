"""Priors Fusion Injection block.

Per-decoder-stage injection of the visual prior (feature queries over
prior keys/values) and the text prior (prior queries distilled into a
channel-wise affine modulation), followed by global self-attention and a
gated depthwise feedforward. Every residual branch ends in a
zero-initialized projection, so a freshly built block is the identity map
and prior injection starts as a no-op.
"""

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeError
from .ops import (
    ChannelLayerNorm,
    DWConv,
    MultiHeadAttention,
    bilinear_resize,
    to_map,
    to_tokens,
)

PFI_FUSION_SCHEMES = ("hierarchical", "addition", "concat", "joint_cross_attention")


@dataclass
class PfiConfig:
    channels: int
    heads: int = 4
    inject_visual: bool = True
    inject_text: bool = True
    fusion_scheme: str = "hierarchical"
    text_as_queries: bool = True
    gdfn_expansion: float = 2.0
    attn_max_tokens: int = 4096

    def __post_init__(self):
        if self.channels % self.heads != 0:
            raise ConfigError(
                f"heads ({self.heads}) must divide channels ({self.channels})"
            )
        if self.fusion_scheme not in PFI_FUSION_SCHEMES:
            raise ConfigError(
                f"unknown fusion_scheme '{self.fusion_scheme}', "
                f"expected one of {PFI_FUSION_SCHEMES}"
            )


def _guard_hw(hw, max_tokens):
    h, w = hw
    if h * w <= max_tokens:
        return hw
    ratio = (max_tokens / (h * w)) ** 0.5
    return (max(1, int(h * ratio)), max(1, int(w * ratio)))


class VisualInjection(nn.Module):
    """Cross attention: feature tokens query the visual-prior tokens.

    Shares the self-attention token budget: above attn_max_tokens both
    sides are attended at reduced resolution and the residual delta is
    resized back, keeping the quadratic term bounded.
    """

    def __init__(self, cfg: PfiConfig):
        super().__init__()
        self.max_tokens = cfg.attn_max_tokens
        self.attn = MultiHeadAttention(cfg.channels, cfg.heads, zero_init_out=True)

    def delta(self, x: torch.Tensor, p_v: torch.Tensor) -> torch.Tensor:
        if p_v.shape[1] != x.shape[1]:
            raise ShapeError(
                f"visual prior channels {p_v.shape[1]} do not match feature channels {x.shape[1]}"
            )
        if p_v.shape[0] != x.shape[0]:
            raise ShapeError("visual prior batch size does not match features")
        hw = x.shape[-2:]
        q_hw = _guard_hw(hw, self.max_tokens)
        kv_hw = _guard_hw(p_v.shape[-2:], self.max_tokens)
        q = bilinear_resize(x, q_hw)
        kv = bilinear_resize(p_v, kv_hw)
        out = to_map(self.attn(to_tokens(q), context=to_tokens(kv)), q_hw)
        return bilinear_resize(out, hw)

    def forward(self, x: torch.Tensor, p_v: torch.Tensor) -> torch.Tensor:
        return x + self.delta(x, p_v)


class TextInjection(nn.Module):
    """Text tokens query the feature map; the pooled answer modulates channels.

    The pooled descriptor goes through a zero-initialized head producing a
    per-channel (scale, shift), applied uniformly over space. With
    text_as_queries=False the roles flip: feature tokens attend over the
    text tokens and the result is added directly.
    """

    def __init__(self, cfg: PfiConfig):
        super().__init__()
        c = cfg.channels
        self.text_as_queries = cfg.text_as_queries
        if cfg.text_as_queries:
            self.attn = MultiHeadAttention(c, cfg.heads)
            self.mod_head = nn.Linear(c, 2 * c)
            nn.init.zeros_(self.mod_head.weight)
            nn.init.zeros_(self.mod_head.bias)
        else:
            self.attn = MultiHeadAttention(c, cfg.heads, zero_init_out=True)

    def delta(self, x: torch.Tensor, p_t: torch.Tensor) -> torch.Tensor:
        if p_t.shape[-1] != x.shape[1]:
            raise ShapeError(
                f"text prior channels {p_t.shape[-1]} do not match feature channels {x.shape[1]}"
            )
        if p_t.shape[0] != x.shape[0]:
            raise ShapeError("text prior batch size does not match features")
        if self.text_as_queries:
            descriptor = self.attn(p_t, context=to_tokens(x)).mean(dim=1)  # (B, C)
            scale, shift = self.mod_head(descriptor).chunk(2, dim=-1)
            return x * scale[:, :, None, None] + shift[:, :, None, None]
        out = self.attn(to_tokens(x), context=p_t)
        return to_map(out, x.shape[-2:])

    def forward(self, x: torch.Tensor, p_t: torch.Tensor) -> torch.Tensor:
        return x + self.delta(x, p_t)


class GDFN(nn.Module):
    """Gated depthwise feedforward: two parallel 1x1+depthwise paths,
    GELU-gated product, 1x1 projection, residual."""

    def __init__(self, channels: int, expansion: float = 2.0):
        super().__init__()
        hidden = max(1, int(round(channels * expansion)))
        self.pw_gate = nn.Conv2d(channels, hidden, 1)
        self.dw_gate = DWConv(hidden, 3)
        self.pw_lin = nn.Conv2d(channels, hidden, 1)
        self.dw_lin = DWConv(hidden, 3)
        self.project = nn.Conv2d(hidden, channels, 1)
        nn.init.zeros_(self.project.weight)
        nn.init.zeros_(self.project.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        gate = F.gelu(self.dw_gate(self.pw_gate(x)))
        lin = self.dw_lin(self.pw_lin(x))
        return x + self.project(gate * lin)


class SelfAttention(nn.Module):
    """Global spatial self-attention with a downsampling guard.

    Above attn_max_tokens the normalized map is attended at reduced
    resolution and the result is resized back, keeping cost bounded.
    """

    def __init__(self, cfg: PfiConfig):
        super().__init__()
        self.max_tokens = cfg.attn_max_tokens
        self.norm = ChannelLayerNorm(cfg.channels)
        self.attn = MultiHeadAttention(cfg.channels, cfg.heads, zero_init_out=True)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h, w = x.shape[-2:]
        y = self.norm(x)
        if h * w > self.max_tokens:
            ratio = (self.max_tokens / (h * w)) ** 0.5
            small_hw = (max(1, int(h * ratio)), max(1, int(w * ratio)))
            y = bilinear_resize(y, small_hw)
            out = to_map(self.attn(to_tokens(y)), small_hw)
            return x + bilinear_resize(out, (h, w))
        return x + to_map(self.attn(to_tokens(y)), (h, w))


class PFIBlock(nn.Module):
    """Full injection block: priors, then self-attention, then GDFN."""

    def __init__(self, cfg: PfiConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.channels
        if cfg.inject_visual:
            self.visual = VisualInjection(cfg)
        if cfg.inject_text:
            self.text = TextInjection(cfg)
        if cfg.fusion_scheme == "concat" and cfg.inject_visual and cfg.inject_text:
            self.fuse = nn.Conv2d(2 * c, c, 1)
            nn.init.zeros_(self.fuse.weight)
            nn.init.zeros_(self.fuse.bias)
        if cfg.fusion_scheme == "joint_cross_attention":
            self.joint_attn = MultiHeadAttention(c, cfg.heads, zero_init_out=True)
        self.self_attn = SelfAttention(cfg)
        self.gdfn = GDFN(c, cfg.gdfn_expansion)

    def _check_priors(self, p_v, p_t):
        if self.cfg.inject_visual and p_v is None:
            raise ConfigError("inject_visual is on but no visual prior was given")
        if self.cfg.inject_text and p_t is None:
            raise ConfigError("inject_text is on but no text prior was given")

    def _inject(self, x, p_v, p_t):
        cfg = self.cfg
        use_v = cfg.inject_visual
        use_t = cfg.inject_text
        if not use_v and not use_t:
            return x
        if cfg.fusion_scheme == "hierarchical":
            if use_v:
                x = self.visual(x, p_v)
            if use_t:
                x = self.text(x, p_t)
            return x
        if cfg.fusion_scheme == "addition":
            out = x
            if use_v:
                out = out + self.visual.delta(x, p_v)
            if use_t:
                out = out + self.text.delta(x, p_t)
            return out
        if cfg.fusion_scheme == "concat":
            if use_v and use_t:
                both = torch.cat([self.visual.delta(x, p_v), self.text.delta(x, p_t)], dim=1)
                return x + self.fuse(both)
            return x + (self.visual.delta(x, p_v) if use_v else self.text.delta(x, p_t))
        # joint_cross_attention: one pass over the pooled prior token set,
        # under the same token budget as the other attention paths
        hw = x.shape[-2:]
        q_hw = _guard_hw(hw, cfg.attn_max_tokens)
        ctx = []
        if use_v:
            kv_hw = _guard_hw(p_v.shape[-2:], cfg.attn_max_tokens)
            ctx.append(to_tokens(bilinear_resize(p_v, kv_hw)))
        if use_t:
            ctx.append(p_t)
        out = self.joint_attn(to_tokens(bilinear_resize(x, q_hw)), context=torch.cat(ctx, dim=1))
        return x + bilinear_resize(to_map(out, q_hw), hw)

    def forward(self, x, p_v=None, p_t=None):
        self._check_priors(p_v, p_t)
        x = self._inject(x, p_v, p_t)
        x = self.self_attn(x)
        return self.gdfn(x)
