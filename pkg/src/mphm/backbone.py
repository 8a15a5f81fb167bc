"""The U-shaped deraining network.

Shallow conv embed, HMM encoder stages with strided-conv downsampling, an
HMM bottleneck, and HMM decoder stages with pixel-shuffle upsampling and
skip fusion. Priors are injected once per decoder stage (bottleneck
included) after that stage's HMM stack. The network predicts a rain
residual R and reconstructs I_pred = I_rain - R, clamped to [0, 1] at
inference.

Also holds checkpoint I/O (atomic, config-hash-guarded) and the analytic
parameter/MAC counter used for complexity reporting.
"""

import hashlib
import json
import math
import os
import tempfile
from dataclasses import asdict, dataclass, replace
from typing import List, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import CheckpointError, ConfigError, NumericError
from .hmm import HMMBlock, HmmConfig
from .pfi import PFIBlock, PfiConfig
from .priors import (
    DEFAULT_PROMPT,
    ClipAdapter,
    DinoV2Adapter,
    build_prior_bundle,
    provider_registry,
)
from .ops import pixel_shuffle

CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    base_channels: int = 32
    stage_depths: Tuple[int, ...] = (4, 6, 8, 6, 4)
    channel_plan: Optional[Tuple[int, ...]] = None
    stage_heads: Optional[Tuple[int, ...]] = None
    hmm: Optional[HmmConfig] = None
    pfi: Optional[PfiConfig] = None
    prior_provider: str = "mock"
    prior_seed: int = 0
    prior_file: Optional[str] = None
    prompt: str = DEFAULT_PROMPT

    def __post_init__(self):
        n = len(self.stage_depths)
        if n % 2 == 0 or n < 1:
            raise ConfigError(f"stage_depths length must be odd, got {n}")
        if any(d < 1 for d in self.stage_depths):
            raise ConfigError(f"stage depths must be >= 1, got {self.stage_depths}")
        if self.channel_plan is None:
            # mirrored doubling toward the bottleneck: [C, 2C, ..., 2C, C]
            self.channel_plan = tuple(
                self.base_channels * 2 ** min(i, n - 1 - i) for i in range(n)
            )
        self.channel_plan = tuple(self.channel_plan)
        if len(self.channel_plan) != n:
            raise ConfigError(
                f"channel_plan length {len(self.channel_plan)} != stage count {n}"
            )
        if tuple(reversed(self.channel_plan)) != self.channel_plan:
            raise ConfigError(f"channel_plan must be symmetric, got {self.channel_plan}")
        if self.hmm is None:
            self.hmm = HmmConfig(channels=self.channel_plan[0])
        if self.pfi is None:
            self.pfi = PfiConfig(channels=self.channel_plan[0], heads=4)
        if self.stage_heads is None:
            self.stage_heads = tuple(self.pfi.heads for _ in range(n))
        self.stage_heads = tuple(self.stage_heads)
        if len(self.stage_heads) != n:
            raise ConfigError(
                f"stage_heads length {len(self.stage_heads)} != stage count {n}"
            )
        for c, h in zip(self.channel_plan, self.stage_heads):
            if c % 4 != 0:
                raise ConfigError(f"stage channels must be divisible by 4, got {c}")
            if c % h != 0:
                raise ConfigError(f"heads ({h}) must divide stage channels ({c})")

    @property
    def n_down(self) -> int:
        return len(self.stage_depths) // 2

    @property
    def n_injection_sites(self) -> int:
        return self.n_down + 1

    def injection_site_channels(self) -> List[int]:
        """Channels at each injection site, finest resolution first."""
        n = len(self.channel_plan)
        return [self.channel_plan[n - 1 - i] for i in range(self.n_injection_sites)]

    def injection_site_heads(self) -> List[int]:
        n = len(self.stage_heads)
        return [self.stage_heads[n - 1 - i] for i in range(self.n_injection_sites)]

    def padded_hw(self, h: int, w: int) -> Tuple[int, int]:
        m = 2**self.n_down
        return (math.ceil(h / m) * m, math.ceil(w / m) * m)

    def injection_site_shapes(self, h: int, w: int) -> List[Tuple[int, int, int]]:
        """(C, H, W) per injection site for a padded input of h x w, finest first."""
        ph, pw = self.padded_hw(h, w)
        if (ph, pw) != (h, w):
            raise ConfigError(f"site shapes need padded dims, got {h}x{w}")
        return [
            (c, h // 2**i, w // 2**i)
            for i, c in enumerate(self.injection_site_channels())
        ]

    def uses_priors(self) -> bool:
        return self.pfi.inject_visual or self.pfi.inject_text


class _Down(nn.Module):
    """Factor-2 strided conv downsampling to the next stage width."""

    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, 3, stride=2, padding=1, padding_mode="reflect")

    def forward(self, x):
        return self.conv(x)


class _Up(nn.Module):
    """Factor-2 pixel-shuffle upsampling to the next stage width."""

    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.conv = nn.Conv2d(c_in, 4 * c_out, 1)

    def forward(self, x):
        return pixel_shuffle(self.conv(x), 2)


def _check_finite(x: torch.Tensor, stage: int, what: str):
    if not torch.isfinite(x).all():
        raise NumericError(f"non-finite activations after stage {stage} ({what})")


class MPHMNet(nn.Module):
    """Encoder/bottleneck/decoder over the symmetric channel plan."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        plan = cfg.channel_plan
        nd = cfg.n_down
        self.embed = nn.Conv2d(3, plan[0], 3, padding=1, padding_mode="reflect")
        self.stages = nn.ModuleList(
            nn.ModuleList(
                HMMBlock(replace(cfg.hmm, channels=c)) for _ in range(depth)
            )
            for c, depth in zip(plan, cfg.stage_depths)
        )
        self.downs = nn.ModuleList(_Down(plan[i], plan[i + 1]) for i in range(nd))
        self.ups = nn.ModuleList(
            _Up(plan[nd + i], plan[nd + i + 1]) for i in range(nd)
        )
        # decoder stage nd+1+i fuses the skip from encoder stage nd-1-i
        self.skip_fuse = nn.ModuleList(
            nn.Conv2d(plan[nd + 1 + i] + plan[nd - 1 - i], plan[nd + 1 + i], 1)
            for i in range(nd)
        )
        # injection sites in consumption order: bottleneck, then each decoder stage
        site_channels = list(reversed(cfg.injection_site_channels()))
        site_heads = list(reversed(cfg.injection_site_heads()))
        self.pfis = nn.ModuleList(
            PFIBlock(replace(cfg.pfi, channels=c, heads=h))
            for c, h in zip(site_channels, site_heads)
        )
        self.out_conv = nn.Conv2d(plan[-1], 3, 3, padding=1, padding_mode="reflect")

    def _site_priors(self, bundle, site_idx_finest_first):
        if bundle is None:
            return None, None
        p_v = bundle.P_v_stages[site_idx_finest_first] if self.cfg.pfi.inject_visual else None
        p_t = bundle.P_t_stages[site_idx_finest_first] if self.cfg.pfi.inject_text else None
        return p_v, p_t

    def forward(self, x: torch.Tensor, bundle=None, clamp: bool = True) -> torch.Tensor:
        h, w = x.shape[-2:]
        ph, pw = self.cfg.padded_hw(h, w)
        xp = F.pad(x, (0, pw - w, 0, ph - h), mode="reflect") if (ph, pw) != (h, w) else x
        if bundle is not None:
            bundle.validate(self.cfg.injection_site_shapes(ph, pw))
        nd = self.cfg.n_down
        n_sites = self.cfg.n_injection_sites

        feats = self.embed(xp)
        skips = []
        for i in range(nd):
            for blk in self.stages[i]:
                feats = blk(feats)
            _check_finite(feats, i, "encoder")
            skips.append(feats)
            feats = self.downs[i](feats)

        for blk in self.stages[nd]:
            feats = blk(feats)
        _check_finite(feats, nd, "bottleneck")
        p_v, p_t = self._site_priors(bundle, n_sites - 1)
        feats = self.pfis[0](feats, p_v, p_t)

        for i in range(nd):
            stage = nd + 1 + i
            feats = self.ups[i](feats)
            feats = self.skip_fuse[i](torch.cat([feats, skips[nd - 1 - i]], dim=1))
            for blk in self.stages[stage]:
                feats = blk(feats)
            _check_finite(feats, stage, "decoder")
            p_v, p_t = self._site_priors(bundle, n_sites - 2 - i)
            feats = self.pfis[1 + i](feats, p_v, p_t)

        residual = self.out_conv(feats)
        pred = xp - residual
        pred = pred[..., :h, :w]
        return pred.clamp(0.0, 1.0) if clamp else pred


class MPHM(nn.Module):
    """Network plus prior machinery: builds the bundle, runs the backbone.

    Inference clamps the reconstruction to [0, 1]; training leaves the
    residual unclamped so gradients pass the boundary values.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.net = MPHMNet(cfg)
        if cfg.uses_priors():
            kwargs = {"seed": cfg.prior_seed}
            if cfg.prior_provider == "external":
                kwargs = {"path": cfg.prior_file}
            self.provider = provider_registry(cfg.prior_provider, **kwargs)
            site_channels = cfg.injection_site_channels()
            self.visual_adapter = DinoV2Adapter(site_channels)
            self.text_adapter = ClipAdapter(site_channels)
        else:
            self.provider = None
            self.visual_adapter = None
            self.text_adapter = None

    def build_bundle(self, x: torch.Tensor):
        if self.provider is None:
            return None
        h, w = x.shape[-2:]
        ph, pw = self.cfg.padded_hw(h, w)
        xp = F.pad(x, (0, pw - w, 0, ph - h), mode="reflect") if (ph, pw) != (h, w) else x
        return build_prior_bundle(
            xp,
            self.provider,
            self.visual_adapter,
            self.text_adapter,
            self.cfg.injection_site_shapes(ph, pw),
            self.cfg.prompt,
        )

    def forward(self, x: torch.Tensor, clamp: Optional[bool] = None) -> torch.Tensor:
        if clamp is None:
            clamp = not self.training
        return self.net(x, self.build_bundle(x), clamp=clamp)


def config_to_dict(cfg: ModelConfig) -> dict:
    return asdict(cfg)


def config_from_dict(d: dict) -> ModelConfig:
    d = dict(d)
    if d.get("hmm") is not None:
        d["hmm"] = HmmConfig(**d["hmm"])
    if d.get("pfi") is not None:
        d["pfi"] = PfiConfig(**d["pfi"])
    for key in ("stage_depths", "channel_plan", "stage_heads"):
        if d.get(key) is not None:
            d[key] = tuple(d[key])
    return ModelConfig(**d)


def config_hash(cfg: ModelConfig) -> str:
    return hashlib.sha256(
        json.dumps(config_to_dict(cfg), sort_keys=True).encode()
    ).hexdigest()


def checkpoint_save(
    path,
    model: nn.Module,
    cfg: ModelConfig,
    optimizer: Optional[torch.optim.Optimizer] = None,
    step: int = 0,
    extra: Optional[dict] = None,
):
    """Write a checkpoint atomically (temp file + rename)."""
    payload = {
        "version": CHECKPOINT_VERSION,
        "config_json": json.dumps(config_to_dict(cfg), sort_keys=True),
        "config_hash": config_hash(cfg),
        "model": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "step": step,
        "extra": extra or {},
    }
    path = os.fspath(path)
    dirname = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=dirname, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            torch.save(payload, f)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def checkpoint_load(path, expected_cfg: Optional[ModelConfig] = None) -> dict:
    """Load a checkpoint; validates format version and config hash."""
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}")
    except Exception as e:
        raise CheckpointError(f"corrupt or unreadable checkpoint {path}: {e}") from e
    if not isinstance(payload, dict) or "config_json" not in payload:
        raise CheckpointError(f"checkpoint {path} has unrecognized layout")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version {payload.get('version')} unsupported, "
            f"expected {CHECKPOINT_VERSION}"
        )
    stored = json.loads(payload["config_json"])
    if expected_cfg is not None:
        expected = config_to_dict(expected_cfg)
        if config_hash(expected_cfg) != payload["config_hash"]:
            diffs = _dict_diff(expected, stored)
            raise CheckpointError(
                "checkpoint config does not match: differing fields " + ", ".join(diffs)
            )
    payload["config"] = config_from_dict(stored)
    return payload


def _dict_diff(a: dict, b: dict, prefix: str = "") -> List[str]:
    out = []
    for key in sorted(set(a) | set(b)):
        pa, pb = a.get(key), b.get(key)
        name = f"{prefix}{key}"
        if isinstance(pa, dict) and isinstance(pb, dict):
            out.extend(_dict_diff(pa, pb, prefix=name + "."))
        elif _norm(pa) != _norm(pb):
            out.append(name)
    return out


def _norm(v):
    return list(v) if isinstance(v, tuple) else v


# ---------------------------------------------------------------------------
# Complexity accounting. MAC counts follow the usual conventions: convs and
# linears count multiply-accumulates; the selective-scan recurrence is
# charged 9*L*D*N per direction; one FFT costs C*H*W*log2(H*W).


def _conv_macs(c_in, c_out, k, h, w, groups=1):
    return (c_in // groups) * c_out * k * k * h * w


def _vssm_macs(c, h, w, d_state, expand):
    L = h * w
    di = expand * c
    rank = max(1, math.ceil(di / 16))
    macs = 2 * L * c  # channel norm
    macs += L * c * 2 * di  # input projection
    per_dir = 2 * L * di * rank + 2 * L * di * d_state + 9 * L * di * d_state
    macs += 4 * per_dir
    macs += 2 * L * di  # out norm
    macs += L * di  # gate product
    macs += L * di * c  # output projection
    return macs


def _fft_macs(c, h, w):
    # real-input transform: half the butterfly cost of a full complex FFT
    return int(c * h * w * math.log2(max(2, h * w)) / 2)


def _attention_macs(c, n_q, n_kv):
    # q/k/v/out projections plus the two score/value matmuls
    return n_q * c * c * 2 + n_kv * c * c * 2 + 2 * n_q * n_kv * c


def _guarded(n_tokens, max_tokens):
    return min(n_tokens, max_tokens)


def _spatial_branch_macs(cfg: HmmConfig, h, w):
    c = cfg.channels
    q, half = c // 4, c // 2
    L = h * w
    macs = 0
    if cfg.vssm_enabled:
        macs += 2 * _vssm_macs(q, h, w, cfg.d_state, cfg.vssm_expand)
        macs += _vssm_macs(half, h, w, cfg.d_state, cfg.vssm_expand)
    macs += 2 * _conv_macs(q, q, 1, h, w) + _conv_macs(half, half, 1, h, w)
    if cfg.dw_enabled:
        k = cfg.dw_kernel
        macs += 2 * _conv_macs(q, q, k, h, w, groups=q)
        macs += _conv_macs(half, half, k, h, w, groups=half)
    macs += _conv_macs(c, c, 1, h, w)
    return macs


def _ffcm_macs(cfg: HmmConfig, h, w):
    c = cfg.channels
    hidden = max(1, int(round(2 * c * cfg.ffcm_hidden_factor)))
    w_spec = w // 2 + 1  # real FFT keeps the non-redundant half spectrum
    macs = _conv_macs(c, c, 1, h, w)
    macs += 2 * _fft_macs(c, h, w)
    macs += _conv_macs(2 * c, hidden, 1, h, w_spec) + _conv_macs(hidden, 2 * c, 1, h, w_spec)
    macs += _conv_macs(c, c, 3, h, w, groups=c) + _conv_macs(c, c, 5, h, w, groups=c)
    macs += _conv_macs(2 * c, c, 1, h, w)
    return macs


def _hmm_macs(cfg: HmmConfig, h, w):
    c = cfg.channels
    macs = _spatial_branch_macs(cfg, h, w)
    n_branches = 1
    if cfg.ffcm_enabled:
        macs += _ffcm_macs(cfg, h, w)
        n_branches = 2
    if cfg.fusion_scheme == "concat_conv":
        macs += _conv_macs(n_branches * c, c, 1, h, w)
    elif cfg.fusion_scheme == "cross_attention":
        macs += _attention_macs(c, h * w, h * w)
    return macs


def _pfi_macs(cfg: PfiConfig, c, h, w, n_text_tokens=1):
    L = h * w
    Ls = _guarded(L, cfg.attn_max_tokens)  # token budget shared by all attention paths
    macs = 0
    if cfg.inject_visual:
        macs += _attention_macs(c, Ls, Ls)
    if cfg.inject_text:
        if cfg.text_as_queries:
            macs += _attention_macs(c, n_text_tokens, L) + c * 2 * c + 2 * L * c
        else:
            macs += _attention_macs(c, L, n_text_tokens)
    if cfg.fusion_scheme == "concat" and cfg.inject_visual and cfg.inject_text:
        macs += _conv_macs(2 * c, c, 1, h, w)
    macs += 2 * L * c + _attention_macs(c, Ls, Ls)  # norm + self-attention
    hidden = max(1, int(round(c * cfg.gdfn_expansion)))
    macs += 2 * _conv_macs(c, hidden, 1, h, w)
    macs += 2 * _conv_macs(hidden, hidden, 3, h, w, groups=hidden)
    macs += _conv_macs(hidden, c, 1, h, w)
    return macs


def count_params_flops(cfg: ModelConfig, input_hw: Tuple[int, int] = (256, 256)):
    """Exact parameter count and analytic MACs for one forward at input_hw."""
    model = MPHM(cfg)
    params = sum(p.numel() for p in model.parameters())

    h, w = cfg.padded_hw(*input_hw)
    plan = cfg.channel_plan
    nd = cfg.n_down
    macs = _conv_macs(3, plan[0], 3, h, w)  # embed
    hw = [(h // 2**min(i, len(plan) - 1 - i), w // 2**min(i, len(plan) - 1 - i)) for i in range(len(plan))]
    for i, (c, depth) in enumerate(zip(plan, cfg.stage_depths)):
        sh, sw = hw[i]
        macs += depth * _hmm_macs(replace(cfg.hmm, channels=c), sh, sw)
    for i in range(nd):
        sh, sw = hw[i + 1]
        macs += _conv_macs(plan[i], plan[i + 1], 3, sh, sw)  # strided down
    for i in range(nd):
        sh, sw = hw[nd + i]
        macs += _conv_macs(plan[nd + i], 4 * plan[nd + i + 1], 1, sh, sw)  # up
        th, tw = hw[nd + i + 1]
        macs += _conv_macs(2 * plan[nd + i + 1], plan[nd + i + 1], 1, th, tw)  # skip fuse
    site_channels = cfg.injection_site_channels()
    site_heads = cfg.injection_site_heads()
    for i, (c, heads) in enumerate(zip(site_channels, site_heads)):
        sh, sw = h // 2**i, w // 2**i
        macs += _pfi_macs(replace(cfg.pfi, channels=c, heads=heads), c, sh, sw)
    macs += _conv_macs(plan[-1], 3, 3, h, w)  # residual head

    if cfg.uses_priors():
        gh, gw = max(1, h // 16), max(1, w // 16)
        macs += _conv_macs(384, site_channels[0], 1, gh, gw)  # token reduce
        ah, aw = h, w  # adapter chain runs finest site -> coarsest
        for c_prev, c_next in zip(site_channels, site_channels[1:]):
            macs += _conv_macs(c_prev, c_prev, 3, ah, aw, groups=c_prev)
            ah, aw = ah // 2, aw // 2
            macs += _conv_macs(4 * c_prev, c_next, 1, ah, aw)
        macs += 512 * 128 + sum(128 * c for c in site_channels)  # text adapter
    return params, macs
