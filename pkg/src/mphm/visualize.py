"""Diagnostic renderings: residual heatmaps and PCA projections of features.

Both renderers return (3, H, W) float tensors in [0, 1] matching the input's
spatial size, so they can be written with the regular image saver.
"""

from typing import Dict

import torch
import torch.nn.functional as F
from matplotlib import colormaps

from .backbone import MPHM
from .data import load_image, save_image
from .errors import ConfigError, ShapeError

HEATMAP_CMAP = "inferno"


def render_residual_heatmap(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Absolute error summed over channels, mapped through a colormap."""
    if pred.shape != gt.shape:
        raise ShapeError(f"pred {tuple(pred.shape)} vs gt {tuple(gt.shape)}")
    diff = (pred - gt).abs().sum(dim=-3)
    if diff.dim() != 2:
        raise ShapeError(f"expected (C, H, W) images, got {tuple(pred.shape)}")
    peak = diff.max()
    norm = diff / peak if peak > 1e-12 else torch.zeros_like(diff)
    rgba = colormaps[HEATMAP_CMAP](norm.detach().cpu().numpy())
    return torch.from_numpy(rgba[..., :3]).permute(2, 0, 1).to(torch.float32)


def feature_hooks(model: MPHM) -> Dict[str, torch.nn.Module]:
    """Named modules whose outputs the PCA renderer can tap."""
    net = model.net
    hooks = {"embed": net.embed, "out": net.out_conv}
    for i, stage in enumerate(net.stages):
        hooks[f"stage{i}"] = stage[-1]
    for i, pfi in enumerate(net.pfis):
        hooks[f"pfi{i}"] = pfi
    return hooks


def _minmax(component: torch.Tensor) -> torch.Tensor:
    lo, hi = component.min(), component.max()
    if hi - lo < 1e-12:  # degenerate direction, render flat gray
        return torch.full_like(component, 0.5)
    return (component - lo) / (hi - lo)


def pca_project(feats: torch.Tensor) -> torch.Tensor:
    """Map a (C, H, W) feature tensor to its top-3 principal components.

    Each spatial position is one C-dimensional sample. Components are
    min-max normalized independently; directions with no variance render
    as flat gray rather than amplified noise.
    """
    feats = feats.to(torch.float64)
    c, fh, fw = feats.shape
    tokens = feats.reshape(c, fh * fw).T
    centered = tokens - tokens.mean(dim=0, keepdim=True)
    cov = centered.T @ centered / max(1, centered.shape[0] - 1)
    values, vectors = torch.linalg.eigh(cov)  # ascending eigenvalues
    # rank-deficient maps leave roundoff in the null space; min-max would
    # blow that up, so gate on the eigenvalue itself
    floor = max(1e-12, 1e-9 * float(values[-1]))
    gray = torch.full((fh, fw), 0.5, dtype=torch.float64)
    channels = []
    for k in range(3):
        if k < c and float(values[-1 - k]) > floor:
            proj = (centered @ vectors[:, -1 - k]).reshape(fh, fw)
            channels.append(_minmax(proj))
        else:
            channels.append(gray)
    return torch.stack(channels).to(torch.float32)


def render_pca_features(model: MPHM, image: torch.Tensor, layer: str) -> torch.Tensor:
    """Top-3 principal components of one layer's channel vectors as RGB."""
    hooks = feature_hooks(model)
    if layer not in hooks:
        raise ConfigError(
            f"unknown layer '{layer}', valid hooks: {', '.join(sorted(hooks))}"
        )
    captured = {}

    def grab(_module, _inputs, output):
        captured["feats"] = output.detach()

    handle = hooks[layer].register_forward_hook(grab)
    try:
        with torch.no_grad():
            model(image.unsqueeze(0))
    finally:
        handle.remove()

    rgb = pca_project(captured["feats"][0])
    h, w = image.shape[-2:]
    if rgb.shape[-2:] != (h, w):
        rgb = F.interpolate(rgb.unsqueeze(0), size=(h, w), mode="nearest")[0]
    return rgb.clamp(0.0, 1.0)


def residual_heatmap_file(pred_path, gt_path, out_path) -> torch.Tensor:
    heat = render_residual_heatmap(load_image(pred_path), load_image(gt_path))
    save_image(heat, out_path)
    return heat


def pca_features_file(checkpoint_path, image_path, layer, out_path) -> torch.Tensor:
    from .train import load_model

    rgb = render_pca_features(load_model(checkpoint_path), load_image(image_path), layer)
    save_image(rgb, out_path)
    return rgb
