"""Training, evaluation, inference, and ablation harness.

All entry points are plain functions over RunConfig and file paths so the
CLI stays a thin shell. Training is fully seeded: model init, batch order,
crops, flips, and negative sampling all derive from the configured seed.
"""

import csv
import math
import os
import time
from dataclasses import replace
from typing import Dict, List, Optional

import torch

from .backbone import (
    MPHM,
    ModelConfig,
    checkpoint_load,
    checkpoint_save,
    config_to_dict,
    count_params_flops,
    _dict_diff,
)
from .config import RunConfig, run_config_to_text
from .data import batch_iter, load_image, load_paired_dir, save_image
from .errors import ConfigError, DataError, NumericError
from .losses import negatives_from_batch, total_loss
from .metrics import psnr, ssim

CHECKPOINT_NAME = "checkpoint.pt"
LOSS_LOG_NAME = "losses.csv"


def cosine_lr(step: int, total_steps: int, lr_initial: float, lr_final: float) -> float:
    """Cosine annealing from lr_initial at step 0 to lr_final at the last step."""
    if total_steps <= 1:
        return lr_initial
    t = min(max(step, 0), total_steps - 1) / (total_steps - 1)
    return lr_final + 0.5 * (lr_initial - lr_final) * (1.0 + math.cos(math.pi * t))


class MetricsLog:
    """Append-only CSV with strictly increasing step indices."""

    def __init__(self, path, columns: List[str]):
        self.path = os.fspath(path)
        self.columns = ["step"] + columns
        self._last_step = None
        with open(self.path, "w", newline="") as f:
            csv.writer(f).writerow(self.columns)

    def append(self, step: int, values: Dict[str, float]):
        if self._last_step is not None and step <= self._last_step:
            raise ConfigError(
                f"log steps must increase: {step} after {self._last_step}"
            )
        self._last_step = step
        row = [step] + [values[c] for c in self.columns[1:]]
        with open(self.path, "a", newline="") as f:
            csv.writer(f).writerow(row)


def _epoch_stream(dataset, cfg: RunConfig):
    epoch = 0
    while True:
        yield from batch_iter(
            dataset,
            crop=cfg.crop,
            batch=cfg.batch,
            augment=cfg.augment,
            seed=cfg.seed + epoch,
        )
        epoch += 1


def train(cfg: RunConfig) -> Dict:
    """Optimize the model on the paired dataset under cfg; returns a summary."""
    rain_dir = os.path.join(cfg.data_dir, "rain")
    clean_dir = os.path.join(cfg.data_dir, "norain")
    dataset = load_paired_dir(rain_dir, clean_dir)
    if len(dataset) == 0:
        raise DataError(f"no image pairs found under {cfg.data_dir}")

    os.makedirs(cfg.out_dir, exist_ok=True)
    with open(os.path.join(cfg.out_dir, "run_config.txt"), "w") as f:
        f.write(run_config_to_text(cfg))

    torch.manual_seed(cfg.seed)
    model = MPHM(cfg.model)
    model.train()
    optimizer = torch.optim.Adam(
        model.parameters(), lr=cfg.lr_initial, betas=(cfg.beta1, cfg.beta2)
    )
    neg_gen = torch.Generator().manual_seed(cfg.seed + 7777)
    log = MetricsLog(
        os.path.join(cfg.out_dir, LOSS_LOG_NAME),
        ["lr", "loss_rec", "loss_fcr", "loss_total", "wall_clock"],
    )
    ckpt_path = os.path.join(cfg.out_dir, CHECKPOINT_NAME)
    t0 = time.monotonic()
    stream = _epoch_stream(dataset, cfg)
    last_total = math.nan

    for step in range(cfg.steps):
        rain, clean, _ = next(stream)
        lr = cosine_lr(step, cfg.steps, cfg.lr_initial, cfg.lr_final)
        for group in optimizer.param_groups:
            group["lr"] = lr

        pred = model(rain)  # train mode leaves the residual unclamped
        negatives = negatives_from_batch(rain, cfg.loss.n_negatives, generator=neg_gen)
        terms = total_loss(pred, clean, negatives, cfg.loss)
        if not torch.isfinite(terms.total):
            # leave the last periodic checkpoint in place and bail
            raise NumericError(f"non-finite loss at step {step}")

        optimizer.zero_grad()
        terms.total.backward()
        if cfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
        optimizer.step()
        last_total = terms.total.item()

        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            log.append(
                step,
                {
                    "lr": lr,
                    "loss_rec": terms.rec.item(),
                    "loss_fcr": terms.fcr.item(),
                    "loss_total": last_total,
                    "wall_clock": time.monotonic() - t0,
                },
            )
        if (step + 1) % cfg.checkpoint_every == 0:
            checkpoint_save(ckpt_path, model, cfg.model, optimizer, step=step + 1)

    checkpoint_save(ckpt_path, model, cfg.model, optimizer, step=cfg.steps)
    return {
        "checkpoint": ckpt_path,
        "log": log.path,
        "steps": cfg.steps,
        "final_loss": last_total,
        "seconds": time.monotonic() - t0,
    }


def load_model(checkpoint_path, expected_cfg: Optional[ModelConfig] = None) -> MPHM:
    payload = checkpoint_load(checkpoint_path, expected_cfg=expected_cfg)
    model = MPHM(payload["config"])
    model.load_state_dict(payload["model"])
    model.eval()
    return model


def evaluate(
    checkpoint_path,
    data_dir,
    out_csv,
    crop: Optional[int] = None,
    batch: int = 1,
    expected_cfg: Optional[ModelConfig] = None,
) -> List[Dict]:
    """Per-image PSNR/SSIM plus a mean row, written as CSV."""
    dataset = load_paired_dir(
        os.path.join(data_dir, "rain"), os.path.join(data_dir, "norain")
    )
    if len(dataset) == 0:
        raise DataError(f"cannot evaluate an empty dataset under {data_dir}")
    model = load_model(checkpoint_path, expected_cfg)
    rows = []
    with torch.no_grad():
        for rain, clean, ids in batch_iter(
            dataset, crop=crop, batch=batch, augment=False
        ):
            pred = model(rain)
            for i, image_id in enumerate(ids):
                rows.append(
                    {
                        "image_id": image_id,
                        "psnr": psnr(pred[i], clean[i]),
                        "ssim": ssim(pred[i], clean[i]),
                    }
                )
    mean_row = {
        "image_id": "mean",
        "psnr": sum(r["psnr"] for r in rows) / len(rows),
        "ssim": sum(r["ssim"] for r in rows) / len(rows),
    }
    rows.append(mean_row)
    if out_csv is not None:
        os.makedirs(os.path.dirname(os.fspath(out_csv)) or ".", exist_ok=True)
        with open(out_csv, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=["image_id", "psnr", "ssim"])
            writer.writeheader()
            writer.writerows(rows)
    return rows


def run_inference(checkpoint_path, image_path, out_path) -> torch.Tensor:
    """Derain one image file; arbitrary sizes are padded and cropped back."""
    model = load_model(checkpoint_path)
    image = load_image(image_path)
    with torch.no_grad():
        pred = model(image.unsqueeze(0))[0]
    save_image(pred, out_path)
    return pred


ABLATION_AXES = ("hmm_branches", "branch_fusion", "prior_injection", "priors_fusion")


def _axis_variants(axis: str, model: ModelConfig) -> List:
    hmm, pfi = model.hmm, model.pfi
    if axis == "hmm_branches":
        return [
            ("full", model),
            ("no_ffcm", replace(model, hmm=replace(hmm, ffcm_enabled=False))),
            ("no_dw", replace(model, hmm=replace(hmm, dw_enabled=False))),
            ("no_vssm", replace(model, hmm=replace(hmm, vssm_enabled=False))),
        ]
    if axis == "branch_fusion":
        return [
            (name, replace(model, hmm=replace(hmm, fusion_scheme=name)))
            for name in ("addition", "cross_attention", "concat_conv")
        ]
    if axis == "prior_injection":
        combos = [
            ("none", False, False),
            ("visual_only", True, False),
            ("text_only", False, True),
            ("both", True, True),
        ]
        return [
            (name, replace(model, pfi=replace(pfi, inject_visual=v, inject_text=t)))
            for name, v, t in combos
        ]
    if axis == "priors_fusion":
        return [
            (name, replace(model, pfi=replace(pfi, fusion_scheme=name)))
            for name in ("hierarchical", "addition", "concat", "joint_cross_attention")
        ]
    raise ConfigError(f"unknown ablation axis '{axis}', expected one of {ABLATION_AXES}")


_AXIS_ALLOWED_FIELDS = {
    "hmm_branches": {"hmm.ffcm_enabled", "hmm.dw_enabled", "hmm.vssm_enabled"},
    "branch_fusion": {"hmm.fusion_scheme"},
    "prior_injection": {"pfi.inject_visual", "pfi.inject_text"},
    "priors_fusion": {"pfi.fusion_scheme"},
}


def ablate(cfg: RunConfig, axis: str, out_dir) -> List[Dict]:
    """Train and evaluate each variant along one axis under a shared budget."""
    variants = _axis_variants(axis, cfg.model)
    allowed = _AXIS_ALLOWED_FIELDS[axis]
    base_dict = config_to_dict(cfg.model)
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for name, model_cfg in variants:
        diff = set(_dict_diff(base_dict, config_to_dict(model_cfg)))
        if not diff <= allowed:
            raise ConfigError(
                f"variant '{name}' changed fields outside axis {axis}: {sorted(diff - allowed)}"
            )
        run_cfg = replace(cfg, model=model_cfg, out_dir=os.path.join(out_dir, name))
        summary = train(run_cfg)
        eval_rows = evaluate(
            summary["checkpoint"],
            cfg.data_dir,
            os.path.join(out_dir, name, "eval.csv"),
            crop=None,
            batch=1,
        )
        mean = eval_rows[-1]
        params, flops = count_params_flops(model_cfg)
        rows.append(
            {
                "variant": name,
                "seed": cfg.seed,
                "psnr": mean["psnr"],
                "ssim": mean["ssim"],
                "params_m": params / 1e6,
                "flops_g": flops / 1e9,
            }
        )
    table = os.path.join(out_dir, f"ablate_{axis}.csv")
    with open(table, "w", newline="") as f:
        writer = csv.DictWriter(
            f, fieldnames=["variant", "seed", "psnr", "ssim", "params_m", "flops_g"]
        )
        writer.writeheader()
        writer.writerows(rows)
    return rows
