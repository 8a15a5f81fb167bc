"""Hierarchical Mamba block: parallel spatial and frequency branches.

The spatial branch splits channels four ways and builds a global/local
hierarchy out of selective-scan blocks and depthwise convs. The frequency
branch mixes the spectrum pointwise and refines the result with multi-scale
depthwise convs. Branch outputs are fused and added back to the input.
"""

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, NumericError
from .ops import (
    DWConv,
    MultiHeadAttention,
    VSSMBlock,
    to_map,
    to_tokens,
)

FUSION_SCHEMES = ("concat_conv", "addition", "cross_attention")


@dataclass
class HmmConfig:
    channels: int
    dw_kernel: int = 3
    ffcm_enabled: bool = True
    dw_enabled: bool = True
    vssm_enabled: bool = True
    fusion_scheme: str = "concat_conv"
    d_state: int = 8
    vssm_expand: int = 1
    ffcm_hidden_factor: float = 3.6
    attn_heads: int = 4

    def __post_init__(self):
        if self.channels % 4 != 0:
            raise ConfigError(f"channels must be divisible by 4, got {self.channels}")
        if self.dw_kernel % 2 == 0:
            raise ConfigError(f"dw_kernel must be odd, got {self.dw_kernel}")
        if self.fusion_scheme not in FUSION_SCHEMES:
            raise ConfigError(
                f"unknown fusion_scheme '{self.fusion_scheme}', expected one of {FUSION_SCHEMES}"
            )


class SpatialBranch(nn.Module):
    """Four-way split with a two-level global/local hierarchy.

    f1, f3 take the selective-scan (global) path, f2, f4 the depthwise
    (local) path; the pairs are re-joined, processed once more at half
    width, and compressed back to the input width.
    """

    def __init__(self, cfg: HmmConfig):
        super().__init__()
        c = cfg.channels
        q, h = c // 4, c // 2
        self.dw_enabled = cfg.dw_enabled
        self.vssm_enabled = cfg.vssm_enabled
        if cfg.vssm_enabled:
            self.vssm1 = VSSMBlock(q, cfg.d_state, cfg.vssm_expand)
            self.vssm3 = VSSMBlock(q, cfg.d_state, cfg.vssm_expand)
            self.vssm_gl = VSSMBlock(h, cfg.d_state, cfg.vssm_expand)
        self.pw1 = nn.Conv2d(q, q, 1)
        self.pw3 = nn.Conv2d(q, q, 1)
        self.pw_gl = nn.Conv2d(h, h, 1)
        if cfg.dw_enabled:
            self.dw2 = DWConv(q, cfg.dw_kernel)
            self.dw4 = DWConv(q, cfg.dw_kernel)
            self.dw_gl = DWConv(h, cfg.dw_kernel)
        self.pw_out = nn.Conv2d(c, c, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        f1, f2, f3, f4 = x.chunk(4, dim=1)
        if self.vssm_enabled:
            f1 = self.vssm1(f1)
            f3 = self.vssm3(f3)
        f1 = self.pw1(f1)
        f3 = self.pw3(f3)
        if self.dw_enabled:
            f2 = self.dw2(f2)
            f4 = self.dw4(f4)
        gl1 = torch.cat([f1, f2], dim=1)
        gl2 = torch.cat([f3, f4], dim=1)
        if self.vssm_enabled:
            gl1 = self.vssm_gl(gl1)
        gl1 = self.pw_gl(gl1)
        if self.dw_enabled:
            gl2 = self.dw_gl(gl2)
        return self.pw_out(torch.cat([gl1, gl2], dim=1))


class FFCM(nn.Module):
    """Frequency branch: spectral pointwise mixing plus multi-scale local refinement.

    Features go through a real 2D FFT (the input is real, so only the
    non-redundant half spectrum is kept), the real and imaginary planes are
    stacked as channels and mixed by a residual two-layer pointwise stack;
    back in the spatial domain, parallel depthwise convs at kernels 3 and 5
    feed a pointwise merge that is added residually, so zeroing the merge
    leaves the FFT roundtrip intact.
    """

    def __init__(self, channels: int, hidden_factor: float = 3.6):
        super().__init__()
        hidden = max(1, int(round(2 * channels * hidden_factor)))
        self.pw_in = nn.Conv2d(channels, channels, 1)
        self.mix1 = nn.Conv2d(2 * channels, hidden, 1)
        self.mix2 = nn.Conv2d(hidden, 2 * channels, 1)
        self.dw3 = DWConv(channels, 3)
        self.dw5 = DWConv(channels, 5)
        self.pw_merge = nn.Conv2d(2 * channels, channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        c = x.shape[1]
        h, w = x.shape[-2:]
        spec = torch.fft.rfft2(self.pw_in(x), norm="backward")
        if not torch.isfinite(spec.real).all() or not torch.isfinite(spec.imag).all():
            raise NumericError("non-finite spectrum in frequency branch")
        s = torch.cat([spec.real, spec.imag], dim=1)
        s = s + self.mix2(F.gelu(self.mix1(s)))
        mixed = torch.complex(s[:, :c], s[:, c:])
        y = torch.fft.irfft2(mixed, s=(h, w), norm="backward")
        return y + self.pw_merge(torch.cat([self.dw3(y), self.dw5(y)], dim=1))


class HMMBlock(nn.Module):
    """One full hierarchical Mamba block with residual branch fusion."""

    def __init__(self, cfg: HmmConfig):
        super().__init__()
        self.cfg = cfg
        self.spatial = SpatialBranch(cfg)
        self.ffcm = FFCM(cfg.channels, cfg.ffcm_hidden_factor) if cfg.ffcm_enabled else None
        c = cfg.channels
        n_branches = 2 if cfg.ffcm_enabled else 1
        if cfg.fusion_scheme == "concat_conv":
            self.fuse = nn.Conv2d(n_branches * c, c, 1)
        elif cfg.fusion_scheme == "cross_attention":
            self.fuse = MultiHeadAttention(c, cfg.attn_heads)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        spa = self.spatial(x)
        fre = self.ffcm(x) if self.ffcm is not None else None
        scheme = self.cfg.fusion_scheme
        if scheme == "addition":
            fused = spa if fre is None else spa + fre
        elif scheme == "concat_conv":
            fused = self.fuse(spa if fre is None else torch.cat([spa, fre], dim=1))
        else:  # cross_attention: spatial queries attend over frequency tokens
            kv = to_tokens(spa if fre is None else fre)
            fused = to_map(self.fuse(to_tokens(spa), context=kv), x.shape[-2:])
        return x + fused
