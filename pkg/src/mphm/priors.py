"""Prior generation and adaptation.

Encoder providers produce raw visual/text features; the two adapters map
them onto the backbone's decoder-stage shapes. The default providers are
deterministic mocks sized like the common small ViT variants (d_v=384,
patch 16, d_t=512), so precomputed real features drop in through the
external-file provider without code changes. Providers are frozen by
construction: they hold no trainable parameters and run under no_grad.
"""

import hashlib
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn

from .errors import ConfigError, DataError, ShapeError
from .ops import DWConv, bilinear_resize, pixel_unshuffle

PATCH_SIZE = 16
D_VISUAL = 384
D_TEXT = 512
DEFAULT_PROMPT = "No rain"
PRIOR_FILE_VERSION = 1


@dataclass
class RawVisualPrior:
    """Patch-feature grid from a visual encoder provider."""

    tokens: torch.Tensor  # (N_patches, d_v)
    grid_hw: Tuple[int, int]
    source_id: str = "mock"

    def __post_init__(self):
        gh, gw = self.grid_hw
        if self.tokens.shape[0] != gh * gw:
            raise ShapeError(
                f"token count {self.tokens.shape[0]} does not match grid {gh}x{gw}"
            )
        if not torch.isfinite(self.tokens).all():
            raise DataError("visual prior tokens contain non-finite values")

    def as_grid(self) -> torch.Tensor:
        gh, gw = self.grid_hw
        return self.tokens.view(gh, gw, -1)


@dataclass
class RawTextPrior:
    """Token matrix from a text encoder provider."""

    tokens: torch.Tensor  # (N_t, d_t)
    prompt: str = DEFAULT_PROMPT

    def __post_init__(self):
        if self.tokens.ndim != 2 or self.tokens.shape[0] < 1:
            raise ShapeError(f"text prior needs at least one token, got {tuple(self.tokens.shape)}")


@dataclass
class PriorBundle:
    """Stage-aligned priors ready for injection into the decoder."""

    P_v_stages: List[torch.Tensor] = field(default_factory=list)  # (B, C_i, H_i, W_i)
    P_t_stages: List[torch.Tensor] = field(default_factory=list)  # (B, N_t, C_i)

    def validate(self, stage_shapes: Sequence[Tuple[int, int, int]]):
        if len(self.P_v_stages) != len(stage_shapes):
            raise ShapeError(
                f"bundle has {len(self.P_v_stages)} visual stages, expected {len(stage_shapes)}"
            )
        for i, (pv, (c, h, w)) in enumerate(zip(self.P_v_stages, stage_shapes)):
            if tuple(pv.shape[1:]) != (c, h, w):
                raise ShapeError(
                    f"visual prior stage {i} has shape {tuple(pv.shape[1:])}, expected {(c, h, w)}"
                )
        for i, (pt, (c, _, _)) in enumerate(zip(self.P_t_stages, stage_shapes)):
            if pt.shape[-1] != c:
                raise ShapeError(
                    f"text prior stage {i} has channel dim {pt.shape[-1]}, expected {c}"
                )


def _seeded_generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(seed)
    return g


class MockEncoderProvider:
    """Deterministic stand-in for frozen foundation-model encoders.

    Visual: non-overlapping 16x16 patches projected by one fixed
    seed-derived matrix, so two images differing in a single patch differ
    in exactly that token. Text: the prompt string is hashed to a seed
    and expanded to a unit-norm vector.
    """

    name = "mock"

    def __init__(self, seed: int = 0):
        self.seed = seed
        g = _seeded_generator(seed)
        self._proj = torch.randn(3 * PATCH_SIZE * PATCH_SIZE, D_VISUAL, generator=g)
        self._proj /= self._proj.shape[0] ** 0.5

    @torch.no_grad()
    def encode_visual(self, img: torch.Tensor, key: Optional[str] = None) -> RawVisualPrior:
        if img.ndim != 3 or img.shape[0] != 3:
            raise ShapeError(f"expected a (3, H, W) image, got {tuple(img.shape)}")
        h, w = img.shape[-2:]
        if h < PATCH_SIZE or w < PATCH_SIZE:
            raise ShapeError(f"image {h}x{w} smaller than one {PATCH_SIZE}x{PATCH_SIZE} patch")
        gh, gw = h // PATCH_SIZE, w // PATCH_SIZE
        crop = img[:, : gh * PATCH_SIZE, : gw * PATCH_SIZE]
        patches = (
            crop.unfold(1, PATCH_SIZE, PATCH_SIZE)
            .unfold(2, PATCH_SIZE, PATCH_SIZE)
            .permute(1, 2, 0, 3, 4)
            .reshape(gh * gw, -1)
        )
        proj = self._proj.to(dtype=img.dtype, device=img.device)
        return RawVisualPrior(patches @ proj, (gh, gw), source_id=self.name)

    @torch.no_grad()
    def encode_text(self, prompt: str, key: Optional[str] = None) -> RawTextPrior:
        if not prompt:
            raise ConfigError("text prompt must be non-empty")
        digest = hashlib.sha256(f"{self.seed}:{prompt}".encode()).digest()
        g = _seeded_generator(int.from_bytes(digest[:8], "little"))
        vec = torch.randn(1, D_TEXT, generator=g)
        return RawTextPrior(vec / vec.norm(dim=-1, keepdim=True), prompt=prompt)


def save_prior_file(path, visual_tokens: np.ndarray, text_tokens: np.ndarray):
    """Write a precomputed-feature file (versioned npz archive)."""
    if visual_tokens.ndim != 3:
        raise DataError(f"visual_tokens must be (grid_h, grid_w, d_v), got {visual_tokens.shape}")
    if text_tokens.ndim != 2:
        raise DataError(f"text_tokens must be (N_t, d_t), got {text_tokens.shape}")
    np.savez(
        path,
        version=np.array(PRIOR_FILE_VERSION),
        visual_tokens=visual_tokens.astype(np.float32),
        text_tokens=text_tokens.astype(np.float32),
    )


class ExternalFeatureProvider:
    """Loads precomputed encoder features from a versioned npz file.

    The file must contain "visual_tokens" (grid_h, grid_w, d_v) and
    "text_tokens" (N_t, d_t); dims are validated against the declared
    encoder widths so adapter weights stay compatible.
    """

    name = "external"

    def __init__(self, path, d_v: int = D_VISUAL, d_t: int = D_TEXT):
        try:
            archive = np.load(path)
        except (OSError, ValueError) as e:
            raise DataError(f"cannot read prior feature file {path}: {e}") from e
        for key in ("version", "visual_tokens", "text_tokens"):
            if key not in archive:
                raise DataError(f"prior feature file {path} missing array '{key}'")
        version = int(archive["version"])
        if version != PRIOR_FILE_VERSION:
            raise DataError(
                f"prior feature file version {version} unsupported, expected {PRIOR_FILE_VERSION}"
            )
        vis = archive["visual_tokens"]
        txt = archive["text_tokens"]
        if vis.ndim != 3 or vis.shape[-1] != d_v:
            raise DataError(
                f"visual_tokens have dims {vis.shape}, expected (grid_h, grid_w, {d_v})"
            )
        if txt.ndim != 2 or txt.shape[-1] != d_t:
            raise DataError(f"text_tokens have dims {txt.shape}, expected (N_t, {d_t})")
        self._visual = torch.from_numpy(vis).float()
        self._text = torch.from_numpy(txt).float()

    @torch.no_grad()
    def encode_visual(self, img: torch.Tensor, key: Optional[str] = None) -> RawVisualPrior:
        gh, gw, _ = self._visual.shape
        return RawVisualPrior(self._visual.reshape(gh * gw, -1), (gh, gw), source_id=self.name)

    @torch.no_grad()
    def encode_text(self, prompt: str, key: Optional[str] = None) -> RawTextPrior:
        return RawTextPrior(self._text, prompt=prompt)


def provider_registry(name: str, **kwargs):
    """Build an encoder provider by name: mock (default) or external."""
    if name == "mock":
        return MockEncoderProvider(**kwargs)
    if name == "external":
        return ExternalFeatureProvider(**kwargs)
    raise ConfigError(f"unknown prior provider '{name}', expected 'mock' or 'external'")


class _StageDown(nn.Module):
    """One adapter downsampling step: conv, PixelUnshuffle, channel restore."""

    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.conv = DWConv(c_in, 3)
        self.restore = nn.Conv2d(4 * c_in, c_out, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.restore(pixel_unshuffle(self.conv(x), 2))


class DinoV2Adapter(nn.Module):
    """Adapts a patch-token grid to the decoder's stage shapes.

    1x1 channel reduction, bilinear resize to the finest stage, then a
    conv + PixelUnshuffle + 1x1 chain emitting each coarser stage. Channel
    widths are fixed at construction; spatial targets arrive per call as
    stage_shapes (C, H, W), finest first, spatially halving.
    """

    def __init__(self, stage_channels: Sequence[int], d_v: int = D_VISUAL):
        super().__init__()
        if not stage_channels:
            raise ConfigError("stage_channels must be nonempty")
        self.stage_channels = list(stage_channels)
        self.reduce = nn.Conv2d(d_v, stage_channels[0], 1)
        self.downs = nn.ModuleList(
            _StageDown(c_prev, c_next)
            for c_prev, c_next in zip(stage_channels, stage_channels[1:])
        )

    def forward(
        self, tokens_grid: torch.Tensor, stage_shapes: Sequence[Tuple[int, int, int]]
    ) -> List[torch.Tensor]:
        """tokens_grid: (B, grid_h, grid_w, d_v) -> one map per stage, finest first."""
        if len(stage_shapes) != len(self.stage_channels):
            raise ConfigError(
                f"adapter built for {len(self.stage_channels)} stages, got {len(stage_shapes)}"
            )
        for c_decl, (c, _, _) in zip(self.stage_channels, stage_shapes):
            if c != c_decl:
                raise ConfigError(
                    f"stage channel {c} does not match adapter width {c_decl}"
                )
        for (_, h0, w0), (_, h1, w1) in zip(stage_shapes, stage_shapes[1:]):
            if h0 != 2 * h1 or w0 != 2 * w1:
                raise ConfigError(
                    f"stage shapes must halve spatially: ({h0},{w0}) -> ({h1},{w1})"
                )
        x = tokens_grid.permute(0, 3, 1, 2)
        x = self.reduce(x)
        x = bilinear_resize(x, stage_shapes[0][1:])
        out = [x]
        for down in self.downs:
            x = down(x)
            out.append(x)
        for y, (c, h, w) in zip(out, stage_shapes):
            if tuple(y.shape[1:]) != (c, h, w):
                raise ShapeError(f"adapter emitted {tuple(y.shape[1:])}, expected {(c, h, w)}")
        return out


class ClipAdapter(nn.Module):
    """Bottleneck adapter from text-encoder width to per-stage channel dims."""

    def __init__(self, stage_channels: Sequence[int], d_t: int = D_TEXT, bottleneck: int = 128):
        super().__init__()
        if not stage_channels:
            raise ConfigError("stage_channels must be nonempty")
        self.down = nn.Linear(d_t, bottleneck)
        self.act = nn.GELU()
        self.heads = nn.ModuleList(nn.Linear(bottleneck, c) for c in stage_channels)

    def forward(self, tokens: torch.Tensor) -> List[torch.Tensor]:
        """tokens: (B, N_t, d_t) -> one (B, N_t, C_i) matrix per stage."""
        z = self.act(self.down(tokens))
        return [head(z) for head in self.heads]


def build_prior_bundle(
    images: torch.Tensor,
    provider,
    visual_adapter: DinoV2Adapter,
    text_adapter: ClipAdapter,
    stage_shapes: Sequence[Tuple[int, int, int]],
    prompt: str = DEFAULT_PROMPT,
) -> PriorBundle:
    """Encode a batch of images plus the prompt and adapt to stage shapes."""
    grids = []
    for img in images:
        raw = provider.encode_visual(img)
        grids.append(raw.as_grid())
    # providers may hand back cached float32 features; match the model dtype
    tokens_grid = torch.stack(grids).to(dtype=images.dtype, device=images.device)
    raw_text = provider.encode_text(prompt)
    text = raw_text.tokens.unsqueeze(0).expand(images.shape[0], -1, -1)
    text = text.to(dtype=images.dtype, device=images.device)
    bundle = PriorBundle(
        P_v_stages=visual_adapter(tokens_grid, stage_shapes),
        P_t_stages=text_adapter(text),
    )
    bundle.validate(stage_shapes)
    return bundle
