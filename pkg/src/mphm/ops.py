"""Framework-level numerical primitives.

2D FFT helpers, the four-direction cross scan/merge, the discretized
selective state-space recurrence, depthwise convolution, the attention
primitive, and resolution utilities. Everything here is a pure function of
its inputs and parameters and preserves the batch dimension.

Conventions (declared once, relied on everywhere):
  - FFT: unnormalized forward, 1/(H*W)-normalized inverse.
  - Bilinear resize: align_corners=False.
  - Spatial convolutions (k > 1) use reflect padding.
"""

import math
from typing import NamedTuple, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange

from .errors import ConfigError, NumericError, ShapeError

SCAN_DIRECTIONS = ("row", "row_rev", "col", "col_rev")


def fft2(x: torch.Tensor) -> torch.Tensor:
    """Unnormalized 2D DFT over the last two (spatial) dims."""
    return torch.fft.fft2(x, norm="backward")


def ifft2(x: torch.Tensor) -> torch.Tensor:
    """Inverse of :func:`fft2`; carries the 1/(H*W) factor."""
    return torch.fft.ifft2(x, norm="backward")


class ScanSequence(NamedTuple):
    """A flattened spatial traversal: data (B, L, C) plus the direction tag."""

    data: torch.Tensor
    direction: str


def to_tokens(x: torch.Tensor) -> torch.Tensor:
    """(B, C, H, W) -> (B, H*W, C), row-major."""
    return rearrange(x, "b c h w -> b (h w) c")


def to_map(x: torch.Tensor, hw: Tuple[int, int]) -> torch.Tensor:
    """(B, H*W, C) -> (B, C, H, W), row-major."""
    return rearrange(x, "b (h w) c -> b c h w", h=hw[0], w=hw[1])


def cross_scan(x: torch.Tensor) -> Tuple[ScanSequence, ...]:
    """Flatten (B, C, H, W) into the four axis-aligned traversal orders.

    Returns sequences tagged row, row_rev, col, col_rev; each is a
    permutation of the input's spatial positions.
    """
    row = to_tokens(x)
    col = rearrange(x, "b c h w -> b (w h) c")
    return (
        ScanSequence(row, "row"),
        ScanSequence(torch.flip(row, dims=[1]), "row_rev"),
        ScanSequence(col, "col"),
        ScanSequence(torch.flip(col, dims=[1]), "col_rev"),
    )


def cross_merge(seqs: Sequence[ScanSequence], hw: Tuple[int, int]) -> torch.Tensor:
    """Inverse-permute each sequence back to (B, C, H, W) and sum the four maps."""
    h, w = hw
    if len(seqs) != 4:
        raise ShapeError(f"cross_merge expects 4 sequences, got {len(seqs)}")
    tags = [s.direction for s in seqs]
    if sorted(tags) != sorted(SCAN_DIRECTIONS):
        raise ShapeError(f"cross_merge needs one sequence per direction, got tags {tags}")
    out = None
    for seq in seqs:
        data = seq.data
        if data.shape[1] != h * w:
            raise ShapeError(
                f"sequence '{seq.direction}' has length {data.shape[1]}, expected {h * w}"
            )
        if seq.direction.endswith("_rev"):
            data = torch.flip(data, dims=[1])
        if seq.direction.startswith("row"):
            m = to_map(data, (h, w))
        else:
            m = rearrange(data, "b (w h) c -> b c h w", h=h, w=w)
        out = m if out is None else out + m
    return out


def _linear_scan(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Inclusive scan of h_t = a_t * h_{t-1} + b_t along dim 1, with h_0 = 0.

    Hillis-Steele doubling: log2(L) passes of elementwise multiply-adds.
    Stable because the decay coefficients a lie in (0, 1].
    """
    length = a.shape[1]
    shift = 1
    while shift < length:
        a_tail = a[:, shift:]
        b = torch.cat([b[:, :shift], b[:, shift:] + a_tail * b[:, :-shift]], dim=1)
        a = torch.cat([a[:, :shift], a_tail * a[:, :-shift]], dim=1)
        shift *= 2
    return b


def ssm_recurrence(
    x: torch.Tensor,
    delta: torch.Tensor,
    A: torch.Tensor,
    Bs: torch.Tensor,
    Cs: torch.Tensor,
    D: torch.Tensor,
) -> torch.Tensor:
    """Discretized selective state-space recurrence on explicit tensors.

        h_t = exp(delta_t * A) . h_{t-1} + delta_t * B_t * x_t
        y_t = C_t . h_t + D * x_t          (h_0 = 0)

    Shapes: x, delta (B, L, C); A (C, N); Bs, Cs (B, L, N); D (C).
    Zero-order hold discretization for A, Euler for B. Raises NumericError
    with the first offending step index if the output goes non-finite.
    """
    decay = torch.exp(delta.unsqueeze(-1) * A)  # (B, L, C, N), in (0, 1] for A <= 0
    drive = (delta * x).unsqueeze(-1) * Bs.unsqueeze(2)  # (B, L, C, N)
    h = _linear_scan(decay, drive)
    y = (h * Cs.unsqueeze(2)).sum(-1) + D * x
    if not torch.isfinite(y).all():
        bad = (~torch.isfinite(y)).any(dim=0).any(dim=-1)
        step = int(torch.nonzero(bad)[0])
        raise NumericError(f"selective scan produced a non-finite value at step {step}")
    return y


class SSMParams(nn.Module):
    """Input-dependent parameters of one selective-scan direction.

    A is kept negative through -exp(A_log) so the discrete decay lies in
    (0, 1]; the step size comes out of a softplus so it is always positive
    and is produced through a low-rank projection (rank ~ channels/16).
    """

    def __init__(self, channels: int, d_state: int = 8, dt_rank: Optional[int] = None):
        super().__init__()
        self.channels = channels
        self.d_state = d_state
        self.dt_rank = dt_rank if dt_rank is not None else max(1, math.ceil(channels / 16))
        self.b_proj = nn.Linear(channels, d_state, bias=False)
        self.c_proj = nn.Linear(channels, d_state, bias=False)
        self.dt_low = nn.Linear(channels, self.dt_rank, bias=False)
        self.dt_proj = nn.Linear(self.dt_rank, channels, bias=True)
        # S4D-style decay init: rates 1..N per channel
        A = torch.arange(1, d_state + 1, dtype=torch.float32).repeat(channels, 1)
        self.A_log = nn.Parameter(torch.log(A))
        self.D = nn.Parameter(torch.ones(channels))
        self._init_dt()

    def _init_dt(self, dt_min: float = 1e-3, dt_max: float = 0.1):
        std = self.dt_rank**-0.5
        nn.init.uniform_(self.dt_proj.weight, -std, std)
        dt = torch.exp(
            torch.rand(self.channels) * (math.log(dt_max) - math.log(dt_min)) + math.log(dt_min)
        )
        # inverse softplus so softplus(bias) lands in [dt_min, dt_max]
        with torch.no_grad():
            self.dt_proj.bias.copy_(dt + torch.log(-torch.expm1(-dt)))

    def _delta(self, x: torch.Tensor) -> torch.Tensor:
        return F.softplus(self.dt_proj(self.dt_low(x)))

    def prepare(self, x: torch.Tensor):
        """Per-step tensors (decay, drive, Cs) for a sequence x of shape (B, L, C)."""
        delta = self._delta(x)
        A = -torch.exp(self.A_log.float())
        decay = torch.exp(delta.unsqueeze(-1) * A)
        drive = (delta * x).unsqueeze(-1) * self.b_proj(x).unsqueeze(2)
        return decay, drive, self.c_proj(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        delta = self._delta(x)
        A = -torch.exp(self.A_log.float())
        return ssm_recurrence(x, delta, A, self.b_proj(x), self.c_proj(x), self.D)


def selective_scan(x: torch.Tensor, params: SSMParams) -> torch.Tensor:
    """Run the selective state-space recurrence on a (B, L, C) sequence."""
    return params(x)


class ChannelLayerNorm(nn.Module):
    """Layer normalization over the channel dim of a (B, C, H, W) map."""

    def __init__(self, channels: int):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = rearrange(x, "b c h w -> b h w c")
        y = F.layer_norm(y, (x.shape[1],), self.weight, self.bias)
        return rearrange(y, "b h w c -> b c h w")


class VSSMBlock(nn.Module):
    """Four-direction selective-scan block for global context.

    norm -> input projection -> cross scan -> per-direction selective scan
    -> cross merge -> gate -> output projection, added residually. The scan
    runs on an expanded inner width; the gate half of the input projection
    modulates the merged scan output.
    """

    def __init__(self, channels: int, d_state: int = 8, expand: int = 2):
        super().__init__()
        self.channels = channels
        self.d_inner = expand * channels
        self.norm = ChannelLayerNorm(channels)
        self.in_proj = nn.Linear(channels, 2 * self.d_inner)
        self.scan_params = nn.ModuleList(
            SSMParams(self.d_inner, d_state) for _ in SCAN_DIRECTIONS
        )
        self.out_norm = nn.LayerNorm(self.d_inner)
        self.out_proj = nn.Linear(self.d_inner, channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        hw = x.shape[-2:]
        u, z = self.in_proj(to_tokens(self.norm(x))).chunk(2, dim=-1)
        seqs = cross_scan(to_map(u, hw))
        # One scan call for all four directions: stack along batch.
        prepped = [p.prepare(s.data) for s, p in zip(seqs, self.scan_params)]
        h = _linear_scan(
            torch.cat([d for d, _, _ in prepped]),
            torch.cat([d for _, d, _ in prepped]),
        ).chunk(4)
        outs = []
        for (_, _, cs), hd, seq, p in zip(prepped, h, seqs, self.scan_params):
            y = (hd * cs.unsqueeze(2)).sum(-1) + p.D * seq.data
            outs.append(ScanSequence(y, seq.direction))
        merged = cross_merge(outs, hw)
        if not torch.isfinite(merged.sum()):
            raise NumericError("selective scan produced non-finite values")
        g = self.out_norm(to_tokens(merged)) * F.silu(z)
        return x + to_map(self.out_proj(g), hw)


def depthwise_conv2d(
    x: torch.Tensor, weight: torch.Tensor, bias: Optional[torch.Tensor] = None
) -> torch.Tensor:
    """Per-channel spatial convolution with reflect padding; odd kernels only."""
    k = weight.shape[-1]
    if k % 2 == 0:
        raise ConfigError(f"depthwise kernel size must be odd, got {k}")
    pad = k // 2
    y = F.pad(x, (pad, pad, pad, pad), mode="reflect")
    return F.conv2d(y, weight, bias, groups=x.shape[1])


class DWConv(nn.Module):
    """Learnable depthwise convolution, shape preserving."""

    def __init__(self, channels: int, kernel_size: int = 3, bias: bool = True):
        super().__init__()
        if kernel_size % 2 == 0:
            raise ConfigError(f"depthwise kernel size must be odd, got {kernel_size}")
        self.conv = nn.Conv2d(
            channels, channels, kernel_size, groups=channels, padding=0, bias=bias
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return depthwise_conv2d(x, self.conv.weight, self.conv.bias)


def attention(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    heads: int,
    return_weights: bool = False,
):
    """Scaled dot-product attention on token tensors (B, N, C).

    Heads are split from the channel dim, attended independently, and
    concatenated back; no learned projections live here.
    """
    dim = q.shape[-1]
    if dim % heads != 0:
        raise ConfigError(f"head count {heads} must divide channel dim {dim}")
    if k.shape[1] != v.shape[1]:
        raise ShapeError(f"keys ({k.shape[1]}) and values ({v.shape[1]}) differ in token count")
    qh = rearrange(q, "b n (h d) -> b h n d", h=heads)
    kh = rearrange(k, "b n (h d) -> b h n d", h=heads)
    vh = rearrange(v, "b n (h d) -> b h n d", h=heads)
    scores = qh @ kh.transpose(-1, -2) / math.sqrt(dim // heads)
    weights = scores.softmax(dim=-1)
    out = rearrange(weights @ vh, "b h n d -> b n (h d)")
    if return_weights:
        return out, weights
    return out


class MultiHeadAttention(nn.Module):
    """Attention with learned q/k/v and output projections.

    `context` supplies keys/values for cross attention; defaults to self
    attention. zero_init_out makes the block start as a no-op inside
    residual branches.
    """

    def __init__(
        self,
        dim: int,
        heads: int,
        context_dim: Optional[int] = None,
        zero_init_out: bool = False,
    ):
        super().__init__()
        if dim % heads != 0:
            raise ConfigError(f"head count {heads} must divide channel dim {dim}")
        ctx = context_dim if context_dim is not None else dim
        self.heads = heads
        self.to_q = nn.Linear(dim, dim, bias=False)
        self.to_k = nn.Linear(ctx, dim, bias=False)
        self.to_v = nn.Linear(ctx, dim, bias=False)
        self.to_out = nn.Linear(dim, dim)
        if zero_init_out:
            nn.init.zeros_(self.to_out.weight)
            nn.init.zeros_(self.to_out.bias)

    def forward(self, x: torch.Tensor, context: Optional[torch.Tensor] = None) -> torch.Tensor:
        ctx = x if context is None else context
        out = attention(self.to_q(x), self.to_k(ctx), self.to_v(ctx), self.heads)
        return self.to_out(out)


def pixel_unshuffle(x: torch.Tensor, r: int) -> torch.Tensor:
    """Space-to-channel rearrangement: (C, H, W) -> (C*r*r, H/r, W/r), lossless."""
    h, w = x.shape[-2:]
    if h % r or w % r:
        raise ShapeError(f"spatial dims ({h}, {w}) not divisible by factor {r}")
    return F.pixel_unshuffle(x, r)


def pixel_shuffle(x: torch.Tensor, r: int) -> torch.Tensor:
    """Inverse of :func:`pixel_unshuffle`."""
    if x.shape[1] % (r * r):
        raise ShapeError(f"channel dim {x.shape[1]} not divisible by {r * r}")
    return F.pixel_shuffle(x, r)


def bilinear_resize(x: torch.Tensor, target_hw: Tuple[int, int]) -> torch.Tensor:
    """Bilinear interpolation to target (H, W), align_corners=False."""
    if tuple(x.shape[-2:]) == tuple(target_hw):
        return x
    return F.interpolate(x, size=tuple(target_hw), mode="bilinear", align_corners=False)
