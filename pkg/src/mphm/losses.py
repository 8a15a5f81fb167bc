"""Training objectives: spatial reconstruction plus frequency contrast.

The reconstruction term is a plain mean L1. The contrastive term pulls the
predicted spectrum toward the ground truth while pushing it away from the
spectra of other rainy images, expressed as a ratio per negative so the
push strength adapts to how close each negative already is.
"""

from dataclasses import dataclass
from typing import List, Optional, Sequence

import torch

from .errors import ConfigError, ShapeError
from .ops import fft2


@dataclass
class LossConfig:
    lambda_fcr: float = 0.1
    n_negatives: int = 2
    epsilon: float = 1e-7

    def __post_init__(self):
        if self.lambda_fcr < 0:
            raise ConfigError(f"lambda_fcr must be >= 0, got {self.lambda_fcr}")
        if self.n_negatives < 1:
            raise ConfigError(f"n_negatives must be >= 1, got {self.n_negatives}")
        if self.epsilon <= 0:
            raise ConfigError(f"epsilon must be > 0, got {self.epsilon}")


@dataclass
class LossTerms:
    """One training step's loss components; total is what gets backpropped."""

    rec: torch.Tensor
    fcr: torch.Tensor
    total: torch.Tensor


def _check_same_shape(a: torch.Tensor, b: torch.Tensor):
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def l_rec(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Mean absolute error over all elements."""
    _check_same_shape(pred, gt)
    return (pred - gt).abs().mean()


def _spectral_l1(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    # modulus of the complex spectral difference, so the distance is
    # unchanged when every input shifts by the same circular offset
    return (fft2(a) - fft2(b)).abs().mean()


def l_fcr(
    pred: torch.Tensor,
    gt: torch.Tensor,
    negatives: Sequence[torch.Tensor],
    cfg: Optional[LossConfig] = None,
) -> torch.Tensor:
    """Spectral contrast: distance-to-gt over distance-to-each-negative."""
    cfg = cfg or LossConfig()
    _check_same_shape(pred, gt)
    if len(negatives) != cfg.n_negatives:
        raise ConfigError(
            f"expected {cfg.n_negatives} negatives, got {len(negatives)}"
        )
    num = _spectral_l1(gt, pred)
    total = pred.new_zeros(())
    for neg in negatives:
        _check_same_shape(neg, pred)
        total = total + num / (_spectral_l1(neg, pred) + cfg.epsilon)
    return total / len(negatives)


def combine_losses(rec, fcr, lambda_fcr: float):
    return rec + lambda_fcr * fcr


def total_loss(
    pred: torch.Tensor,
    gt: torch.Tensor,
    negatives: Sequence[torch.Tensor],
    cfg: Optional[LossConfig] = None,
) -> LossTerms:
    cfg = cfg or LossConfig()
    rec = l_rec(pred, gt)
    fcr = l_fcr(pred, gt, negatives, cfg)
    return LossTerms(rec=rec, fcr=fcr, total=combine_losses(rec, fcr, cfg.lambda_fcr))


def negatives_from_batch(
    rain: torch.Tensor,
    n: int,
    generator: Optional[torch.Generator] = None,
) -> List[torch.Tensor]:
    """Draw n negative rainy images per batch item from the rest of the batch.

    Each item samples distinct other images uniformly; when the batch has
    fewer than n others, the item's own rainy image fills the remainder,
    so tiny batches still produce a full negative set.
    """
    if rain.ndim != 4:
        raise ShapeError(f"expected a (B, C, H, W) batch, got {tuple(rain.shape)}")
    if n < 1:
        raise ConfigError(f"need at least one negative, got {n}")
    b_size = rain.shape[0]
    index = torch.empty(n, b_size, dtype=torch.long)
    for b in range(b_size):
        others = [j for j in range(b_size) if j != b]
        k = min(n, len(others))
        if k > 0:
            perm = torch.randperm(len(others), generator=generator)[:k]
            picks = [others[int(p)] for p in perm]
        else:
            picks = []
        picks.extend([b] * (n - k))
        index[:, b] = torch.tensor(picks)
    return [rain[index[k]] for k in range(n)]
