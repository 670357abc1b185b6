"""Stage 1: masked motion prediction."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .data import DataConfig, SkeletonSequence, segment, training_view
from .masking import plan_mask
from .model import StarsModel, save_checkpoint
from .training import EpochLog, check_finite, epoch_batches, sample_rng, warmup_cosine


@dataclass
class Stage1Config:
    epochs: int = 200
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.95)
    mask_ratio: float = 0.9
    tau1: float = 0.1
    motion_stride: int | None = None  # defaults to the segment length
    warmup_frac: float = 0.05
    standardize_targets: bool = False
    uniform_masking: bool = False
    seed: int = 0

    def validate(self) -> None:
        if self.epochs < 0:
            raise ValueError("stage1.epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("stage1.batch_size must be >= 1")
        if self.lr < 0 or self.weight_decay < 0:
            raise ValueError("stage1.lr and stage1.weight_decay must be non-negative")
        if not 0 < self.mask_ratio < 1:
            raise ValueError(f"stage1.mask_ratio must lie in (0, 1), got {self.mask_ratio}")
        if not self.tau1 > 0:
            raise ValueError("stage1.tau1 must be positive")
        if not all(0 <= b < 1 for b in self.betas):
            raise ValueError("stage1.betas must lie in [0, 1)")
        if self.motion_stride is not None and self.motion_stride < 1:
            raise ValueError("stage1.motion_stride must be >= 1")


@dataclass
class Stage1Batch:
    tokens: torch.Tensor    # (B, T_e, V, l*C)
    keep_idx: torch.Tensor  # (B, G - K)
    mask_idx: torch.Tensor  # (B, K), ascending per sample
    targets: torch.Tensor   # (B, K, l*C), aligned with mask_idx


def mamp_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Squared L2 error per masked cell, averaged over masked cells (and the batch)."""
    if pred.shape != target.shape:
        raise ValueError(f"prediction shape {tuple(pred.shape)} != target shape {tuple(target.shape)}")
    if pred.numel() == 0 or pred.shape[-2] == 0:
        raise ValueError("mamp_loss needs at least one masked cell")
    return (pred - target).pow(2).sum(dim=-1).mean()


def _standardize(motion: np.ndarray) -> np.ndarray:
    mean = motion.mean(axis=(0, 1), keepdims=True)
    std = motion.std(axis=(0, 1), keepdims=True)
    return (motion - mean) / (std + 1e-6)


def build_stage1_batch(
    sequences: Sequence[SkeletonSequence],
    data_cfg: DataConfig,
    cfg: Stage1Config,
    segment_length: int,
    rngs: Sequence[np.random.Generator],
) -> Stage1Batch:
    """Crop, segment and motion-mask each sequence with its own RNG stream."""
    tokens, keeps, masks, targets = [], [], [], []
    for seq, rng in zip(sequences, rngs, strict=True):
        view = training_view(seq, data_cfg, rng)
        seg = segment(view, segment_length)
        plan, field = plan_mask(view, segment_length, cfg.mask_ratio, cfg.tau1, rng,
                                stride=cfg.motion_stride, uniform=cfg.uniform_masking)
        motion = field.motion
        if cfg.standardize_targets:
            motion = _standardize(motion)
        t_e, v = plan.intensity.shape
        cells = motion.reshape(t_e, segment_length, v, -1).transpose(0, 2, 1, 3).reshape(t_e * v, -1)
        keep = np.setdiff1d(np.arange(t_e * v), plan.masked_indices, assume_unique=True)
        tokens.append(seg.tokens)
        keeps.append(keep)
        masks.append(plan.masked_indices)
        targets.append(cells[plan.masked_indices])
    return Stage1Batch(
        tokens=torch.from_numpy(np.stack(tokens).astype(np.float32)),
        keep_idx=torch.from_numpy(np.stack(keeps)).long(),
        mask_idx=torch.from_numpy(np.stack(masks)).long(),
        targets=torch.from_numpy(np.stack(targets).astype(np.float32)),
    )


def make_optimizer(groups, lr: float, cfg) -> torch.optim.AdamW:
    return torch.optim.AdamW(groups, lr=lr, betas=tuple(cfg.betas), weight_decay=cfg.weight_decay)


def run_stage1(
    sequences: Sequence[SkeletonSequence],
    cfg: Stage1Config,
    model: StarsModel,
    data_cfg: DataConfig,
    out_dir: str | Path | None = None,
) -> tuple[StarsModel, list[dict]]:
    """Train ``model`` in place; writes final and best checkpoints when ``out_dir`` is set."""
    cfg.validate()
    data_cfg.validate(model.cfg.segment_length)
    if not sequences:
        raise ValueError("stage 1 needs a nonempty dataset")
    log = EpochLog(Path(out_dir) / "train_log.jsonl" if out_dir else None)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = make_optimizer(params, cfg.lr, cfg)
    steps_per_epoch = len(epoch_batches(len(sequences), cfg.batch_size, cfg.seed, 0))
    total = cfg.epochs * steps_per_epoch
    step, best = 0, float("inf")
    l = model.cfg.segment_length
    model.train()
    for epoch in range(cfg.epochs):
        log.start_epoch()
        losses = []
        for bi, idx in enumerate(epoch_batches(len(sequences), cfg.batch_size, cfg.seed, epoch)):
            batch = build_stage1_batch([sequences[i] for i in idx], data_cfg, cfg, l,
                                       [sample_rng(cfg.seed, epoch, int(i)) for i in idx])
            lr = cfg.lr * warmup_cosine(step, total, cfg.warmup_frac)
            for g in opt.param_groups:
                g["lr"] = lr
            pred = model.mamp_forward(batch.tokens, batch.keep_idx, batch.mask_idx)
            loss = mamp_loss(pred, batch.targets)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            check_finite(loss, bi, epoch, lr, params)
            opt.step()
            losses.append(loss.item())
            step += 1
        mean_loss = float(np.mean(losses))
        log.write(epoch=epoch + 1, mean_loss=mean_loss, lr=lr)
        if out_dir is not None and mean_loss < best:
            best = mean_loss
            save_checkpoint(Path(out_dir) / "best", model, "mamp", cfg.seed, epoch + 1)
    if out_dir is not None:
        save_checkpoint(out_dir, model, "mamp", cfg.seed, cfg.epochs)
    return model, log.records
