"""Paired dataset handling and synthetic rain generation.

The generator makes hermetic train/eval data: a thresholded uniform noise
field is smeared along an oriented motion-blur kernel and added onto the
clean image, which is how classic streak benchmarks are synthesized. Real
datasets drop in through the same rain/ + norain/ directory layout.
"""

import math
import os
from dataclasses import dataclass
from typing import Iterator, List, Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image as PILImage

from .errors import ConfigError, DataError

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp")


@dataclass
class RainParams:
    streak_density: float = 0.02
    angle_degrees: float = 15.0
    streak_length_px: int = 15
    streak_width_px: int = 1
    intensity: float = 0.6
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.streak_density <= 1.0:
            raise ConfigError(f"streak_density must be in [0,1], got {self.streak_density}")
        if not -60.0 <= self.angle_degrees <= 60.0:
            raise ConfigError(f"angle_degrees must be in [-60,60], got {self.angle_degrees}")
        if self.streak_length_px < 1:
            raise ConfigError(f"streak_length_px must be >= 1, got {self.streak_length_px}")
        if self.streak_width_px < 1:
            raise ConfigError(f"streak_width_px must be >= 1, got {self.streak_width_px}")
        if not 0.0 <= self.intensity <= 1.0:
            raise ConfigError(f"intensity must be in [0,1], got {self.intensity}")


def motion_blur_kernel(length: int, angle_degrees: float, width: int) -> torch.Tensor:
    """Normalized oriented line kernel; angle 0 is a vertical streak."""
    size = max(3, length + (length + 1) % 2)
    k = torch.zeros(size, size)
    theta = math.radians(angle_degrees)
    dy, dx = math.cos(theta), math.sin(theta)
    center = (size - 1) / 2
    steps = max(2, 4 * size)
    for i in range(steps):
        t = (i / (steps - 1) - 0.5) * (length - 1)
        y = int(round(center + t * dy))
        x = int(round(center + t * dx))
        if 0 <= y < size and 0 <= x < size:
            k[y, x] = 1.0
    if width > 1:
        box = torch.ones(1, 1, width, width)
        k = F.conv2d(k[None, None], box, padding=width // 2)[0, 0]
        k = k[:size, :size]
    return k / k.sum()


def synth_rain(clean: torch.Tensor, p: RainParams) -> torch.Tensor:
    """Add seeded synthetic rain streaks; density or intensity 0 returns clean as is."""
    if clean.ndim != 3:
        raise DataError(f"expected a (C, H, W) image, got {tuple(clean.shape)}")
    if p.streak_density == 0.0 or p.intensity == 0.0:
        return clean.clone()
    h, w = clean.shape[-2:]
    g = torch.Generator().manual_seed(p.seed)
    noise = torch.rand(1, 1, h, w, generator=g)
    mask = (noise < p.streak_density).float()
    kernel = motion_blur_kernel(p.streak_length_px, p.angle_degrees, p.streak_width_px)
    pad = kernel.shape[0] // 2
    streaks = F.conv2d(mask, kernel[None, None], padding=pad)[0]
    # kernel is mean-normalized; rescale so streak cores reach full strength
    streaks = streaks / max(streaks.max().item(), 1e-8)
    layer = p.intensity * streaks
    return (clean + layer).clamp(0.0, 1.0)


def load_image(path) -> torch.Tensor:
    """Read an image file into a (3, H, W) float tensor in [0, 1]."""
    try:
        with PILImage.open(path) as img:
            arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    except (OSError, ValueError) as e:
        raise DataError(f"cannot read image {path}: {e}") from e
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def save_image(x: torch.Tensor, path):
    """Write a (3, H, W) or (1, H, W) [0, 1] tensor as an 8-bit PNG, round half up."""
    if x.ndim != 3 or x.shape[0] not in (1, 3):
        raise DataError(f"expected a (1|3, H, W) image, got {tuple(x.shape)}")
    arr = x.detach().clamp(0, 1).permute(1, 2, 0).cpu().numpy()
    if arr.shape[-1] == 1:
        arr = arr[..., 0]
    quantized = np.floor(arr * 255.0 + 0.5).clip(0, 255).astype(np.uint8)
    # explicit format so file-like targets work
    PILImage.fromarray(quantized).save(path, format="PNG")


@dataclass
class PairedSample:
    rainy: torch.Tensor
    clean: torch.Tensor
    id: str

    def __post_init__(self):
        if self.rainy.shape != self.clean.shape:
            raise DataError(
                f"pair '{self.id}' has mismatched dims: "
                f"{tuple(self.rainy.shape)} vs {tuple(self.clean.shape)}"
            )


class PairedDataset:
    """Lazily loaded rainy/clean pairs, enumerated in sorted filename order."""

    def __init__(self, entries: List[Tuple[str, str, str]]):
        self._entries = entries  # (id, rain_path, clean_path)

    def __len__(self) -> int:
        return len(self._entries)

    def ids(self) -> List[str]:
        return [e[0] for e in self._entries]

    def __getitem__(self, i: int) -> PairedSample:
        sample_id, rain_path, clean_path = self._entries[i]
        return PairedSample(
            rainy=load_image(rain_path), clean=load_image(clean_path), id=sample_id
        )


def _list_images(directory) -> dict:
    if not os.path.isdir(directory):
        raise DataError(f"not a directory: {directory}")
    out = {}
    for name in sorted(os.listdir(directory)):
        stem, ext = os.path.splitext(name)
        if ext.lower() in IMAGE_EXTENSIONS:
            out[name] = os.path.join(directory, name)
    return out


def load_paired_dir(rain_dir, clean_dir) -> PairedDataset:
    """Pair images by filename across the two directories; orphans are an error."""
    rain = _list_images(rain_dir)
    clean = _list_images(clean_dir)
    orphans = sorted(set(rain) ^ set(clean))
    if orphans:
        raise DataError(
            "unpaired files between "
            f"{rain_dir} and {clean_dir}: {', '.join(orphans)}"
        )
    entries = [(name, rain[name], clean[name]) for name in sorted(rain)]
    return PairedDataset(entries)


def _crop_pair(rainy, clean, crop: int, top: int, left: int):
    return (
        rainy[..., top : top + crop, left : left + crop],
        clean[..., top : top + crop, left : left + crop],
    )


def batch_iter(
    dataset: PairedDataset,
    crop: Optional[int],
    batch: int,
    augment: bool,
    seed: int = 0,
) -> Iterator[Tuple[torch.Tensor, torch.Tensor, List[str]]]:
    """One pass over the dataset in batches.

    Training mode (augment=True) shuffles, random-crops, and horizontally
    flips with the identical transform applied to both images of a pair;
    eval mode center-crops in sorted order with no randomness. crop=None
    keeps full images, which requires equal dims within a batch.
    """
    if batch < 1:
        raise ConfigError(f"batch size must be >= 1, got {batch}")
    if crop is not None and crop < 1:
        raise ConfigError(f"crop must be >= 1, got {crop}")
    g = torch.Generator().manual_seed(seed)
    order = torch.randperm(len(dataset), generator=g).tolist() if augment else list(range(len(dataset)))
    for start in range(0, len(order), batch):
        rains, cleans, ids = [], [], []
        for i in order[start : start + batch]:
            sample = dataset[i]
            rainy, clean = sample.rainy, sample.clean
            h, w = rainy.shape[-2:]
            if crop is not None:
                if crop > min(h, w):
                    raise ConfigError(
                        f"crop {crop} exceeds image '{sample.id}' dims {h}x{w}"
                    )
                if augment:
                    top = int(torch.randint(0, h - crop + 1, (1,), generator=g))
                    left = int(torch.randint(0, w - crop + 1, (1,), generator=g))
                else:
                    top, left = (h - crop) // 2, (w - crop) // 2
                rainy, clean = _crop_pair(rainy, clean, crop, top, left)
            if augment and bool(torch.rand((), generator=g) < 0.5):
                rainy = torch.flip(rainy, dims=[-1])
                clean = torch.flip(clean, dims=[-1])
            rains.append(rainy)
            cleans.append(clean)
            ids.append(sample.id)
        if len({tuple(r.shape) for r in rains}) != 1:
            raise DataError(
                "cannot batch images of differing dims without a crop: "
                + ", ".join(ids)
            )
        yield torch.stack(rains), torch.stack(cleans), ids


def synth_clean_image(size: int, seed: int) -> torch.Tensor:
    """Procedural clean image: smooth color field plus mild texture."""
    g = torch.Generator().manual_seed(seed)
    coarse = torch.rand(1, 3, 4, 4, generator=g)
    base = F.interpolate(coarse, size=(size, size), mode="bilinear", align_corners=False)
    texture = 0.1 * torch.rand(1, 3, size, size, generator=g)
    return (0.8 * base + texture).clamp(0.0, 1.0)[0]


def generate_dataset(root, count: int, size: int = 128, seed: int = 0,
                     params: Optional[RainParams] = None) -> List[str]:
    """Write count synthetic pairs under root/rain and root/norain."""
    if count < 1:
        raise ConfigError(f"count must be >= 1, got {count}")
    base = params or RainParams()
    rain_dir = os.path.join(root, "rain")
    clean_dir = os.path.join(root, "norain")
    os.makedirs(rain_dir, exist_ok=True)
    os.makedirs(clean_dir, exist_ok=True)
    names = []
    for i in range(count):
        clean = synth_clean_image(size, seed + i)
        g = torch.Generator().manual_seed(seed * 100003 + i)
        p = RainParams(
            streak_density=float(0.01 + 0.03 * torch.rand((), generator=g)),
            angle_degrees=float(-45 + 90 * torch.rand((), generator=g)),
            streak_length_px=int(9 + 12 * torch.rand((), generator=g)),
            streak_width_px=base.streak_width_px,
            intensity=float(0.3 + 0.5 * torch.rand((), generator=g)),
            seed=seed + 1000 + i,
        )
        rainy = synth_rain(clean, p)
        name = f"{i:04d}.png"
        save_image(clean, os.path.join(clean_dir, name))
        save_image(rainy, os.path.join(rain_dir, name))
        names.append(name)
    return names
