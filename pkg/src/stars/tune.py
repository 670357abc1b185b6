"""Stage 2: nearest-neighbour contrastive tuning of the upper encoder layers."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .data import DataConfig, SkeletonSequence, preprocess, segment, training_view
from .model import StarsModel, save_checkpoint
from .pretrain import make_optimizer
from .training import EpochLog, check_finite, epoch_batches, logger, sample_rng, warmup_cosine

MODES = ("two_stage", "three_stage")
NORM_TOL = 1e-3


@dataclass
class TuneSchedule:
    base_lr: float
    decay: float
    num_layers: int
    frozen: list[int]
    layer_lrs: list[float]  # index i-1 holds the LR of encoder layer i

    @property
    def head_lr(self) -> float:
        return self.base_lr

    def lr_for(self, tag: int | str) -> float:
        """LR for a layer tag from ``StarsModel.layer_of``; the embedding shares layer 1's LR."""
        if tag == "head":
            return self.base_lr
        if tag == "decoder":
            return 0.0
        return self.layer_lrs[max(int(tag), 1) - 1]


def build_tune_schedule(base_lr: float, decay: float, num_layers: int, freeze_lower_half: bool = True) -> TuneSchedule:
    """LR_i = base * decay**(N - i) for tuned layers, exactly 0 for layers 1..N//2 when freezing.

    Evaluated in rational arithmetic from the decimal repr of the inputs so
    e.g. 0.001 * 0.2**3 comes out as the float nearest 8e-6.
    """
    if not base_lr > 0:
        raise ValueError("base_lr must be positive")
    if not 0 <= decay <= 1:
        raise ValueError("decay must lie in [0, 1]")
    if num_layers < 2:
        raise ValueError("need at least 2 layers")
    base, alpha = Fraction(repr(base_lr)), Fraction(repr(decay))
    frozen = list(range(0, num_layers // 2 + 1)) if freeze_lower_half else []
    lrs = []
    for i in range(1, num_layers + 1):
        lrs.append(0.0 if i in frozen else float(base * alpha ** (num_layers - i)))
    return TuneSchedule(base_lr, decay, num_layers, frozen, lrs)


@dataclass
class Stage2Config:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-3
    layer_decay: float = 0.2
    tau2: float = 0.07
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.95)
    queue_size: int = 8192
    mode: str = "two_stage"
    head_epochs: int = 0
    freeze_lower_half: bool = True
    random_crop: bool = True
    warmup_frac: float = 0.05
    seed: int = 0

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"stage2.mode must be one of {MODES}, got {self.mode!r}")
        if self.epochs < 0 or self.head_epochs < 0:
            raise ValueError("stage2 epoch counts must be >= 0")
        if self.batch_size < 2:
            raise ValueError("stage2.batch_size must be >= 2")
        if not self.tau2 > 0:
            raise ValueError("stage2.tau2 must be positive")
        if self.queue_size < self.batch_size:
            raise ValueError("stage2.queue_size must hold at least one batch")
        if not 0 <= self.layer_decay <= 1:
            raise ValueError("stage2.layer_decay must lie in [0, 1]")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ValueError("stage2.lr must be positive and weight_decay non-negative")


class SupportQueue:
    """Fixed-capacity FIFO ring buffer of unit-norm embeddings."""

    def __init__(self, capacity: int, dim: int):
        if capacity < 1:
            raise ValueError("queue capacity must be >= 1")
        self.capacity = capacity
        self.storage = torch.zeros(capacity, dim)
        self.fill = 0
        self.cursor = 0

    def __len__(self) -> int:
        return self.fill

    def push(self, z: torch.Tensor) -> None:
        z = z.detach().to(self.storage.dtype)
        norms = z.norm(dim=1)
        if z.numel() and not torch.allclose(norms, torch.ones_like(norms), atol=NORM_TOL):
            raise ValueError("queue entries must be L2-normalised")
        for row in z:
            self.storage[self.cursor] = row
            self.cursor = (self.cursor + 1) % self.capacity
            self.fill = min(self.fill + 1, self.capacity)

    def vectors(self) -> torch.Tensor:
        """Stored vectors, oldest first."""
        if self.fill < self.capacity:
            return self.storage[:self.fill].clone()
        return torch.cat([self.storage[self.cursor:], self.storage[:self.cursor]])

    def nearest(self, z: torch.Tensor) -> torch.Tensor:
        return nearest_neighbor(z, self)


def nearest_neighbor(z: torch.Tensor, queue: SupportQueue) -> torch.Tensor:
    """Stored vector with the largest dot product (lowest storage index on ties), detached.

    On unit vectors this is the L2 nearest neighbour since |z - q|^2 = 2 - 2<z, q>.
    """
    if queue.fill == 0:
        raise ValueError("nearest_neighbor on an empty queue")
    single = z.ndim == 1
    z = z.detach().reshape(-1, z.shape[-1]).to(queue.storage.dtype)
    bank = queue.storage[:queue.fill]
    idx = torch.argmax(z @ bank.T, dim=1)
    out = bank[idx].clone()
    return out[0] if single else out


def nnclr_loss(neighbors: torch.Tensor, predictions: torch.Tensor, tau: float) -> torch.Tensor:
    """Cross-entropy of ``neighbors @ predictions.T / tau`` against the diagonal."""
    if neighbors.shape != predictions.shape or neighbors.ndim != 2:
        raise ValueError("neighbors and predictions must both be (n, d)")
    n = neighbors.shape[0]
    if n < 1:
        raise ValueError("nnclr_loss needs n >= 1")
    for name, x in (("neighbors", neighbors), ("predictions", predictions)):
        norms = x.detach().norm(dim=1)
        if not torch.allclose(norms, torch.ones_like(norms), atol=NORM_TOL):
            raise ValueError(f"{name} must be L2-normalised")
    logits = neighbors.detach() @ predictions.T / tau
    return F.cross_entropy(logits, torch.arange(n))


def _param_groups(model: StarsModel, schedule: TuneSchedule | None, heads_only: bool):
    """(groups, frozen names). Zero-LR tensors get requires_grad=False and stay out of the optimizer."""
    groups, frozen = {}, []
    for name, p in model.named_parameters():
        tag = model.layer_of(name)
        if heads_only:
            lr = schedule.base_lr if tag == "head" else 0.0
        else:
            lr = schedule.lr_for(tag)
        p.requires_grad_(lr > 0)
        if lr > 0:
            groups.setdefault(lr, []).append(p)
        else:
            frozen.append(name)
    return [{"params": ps, "lr": lr, "base_lr": lr} for lr, ps in sorted(groups.items())], frozen


def tune_views(sequences, idx, data_cfg: DataConfig, cfg: Stage2Config, epoch: int, segment_length: int) -> torch.Tensor:
    """One view per sequence: random crop when ``cfg.random_crop``, else the fixed test crop."""
    out = []
    for i in idx:
        if cfg.random_crop:
            view = training_view(sequences[i], data_cfg, sample_rng(cfg.seed, epoch, int(i)))
        else:
            view = preprocess(sequences[i], data_cfg)
        out.append(segment(view, segment_length).tokens)
    return torch.from_numpy(np.stack(out).astype(np.float32))


def _run_phase(phase, epochs, epoch0, sequences, model, data_cfg, cfg, schedule, heads_only, queue, log):
    groups, frozen = _param_groups(model, schedule, heads_only)
    params = [p for g in groups for p in g["params"]]
    if epochs == 0 or not params:
        return
    opt = make_optimizer(groups, cfg.lr, cfg)
    nb = len(epoch_batches(len(sequences), cfg.batch_size, cfg.seed, 0, min_size=2))
    total, step = epochs * nb, 0
    l = model.cfg.segment_length
    model.train()
    for e in range(epochs):
        epoch = epoch0 + e
        log.start_epoch()
        losses = []
        mult = 0.0
        for bi, idx in enumerate(epoch_batches(len(sequences), cfg.batch_size, cfg.seed, epoch, min_size=2)):
            tokens = tune_views(sequences, idx, data_cfg, cfg, epoch, l)
            z = F.normalize(model.project(model.features(tokens)), dim=1)
            p = F.normalize(model.predict(z), dim=1)
            if queue.fill >= len(idx):
                mult = warmup_cosine(step, total, cfg.warmup_frac)
                for g in opt.param_groups:
                    g["lr"] = g["base_lr"] * mult
                loss = nnclr_loss(queue.nearest(z), p, cfg.tau2)
                opt.zero_grad(set_to_none=True)
                loss.backward()
                check_finite(loss, bi, epoch, cfg.lr * mult, params)
                opt.step()
                losses.append(loss.item())
                step += 1
            queue.push(z.detach())
        log.write(epoch=epoch + 1, phase=phase, mean_loss=float(np.mean(losses)) if losses else None,
                  lr=cfg.lr * mult)


def run_stage2(
    sequences: Sequence[SkeletonSequence],
    cfg: Stage2Config,
    model: StarsModel,
    data_cfg: DataConfig,
    out_dir: str | Path | None = None,
) -> tuple[StarsModel, list[dict]]:
    """Contrastive tuning of a stage-1 model, in place.

    In three-stage mode the projector and predictor are first trained for
    ``cfg.head_epochs`` with the whole encoder frozen.
    """
    cfg.validate()
    data_cfg.validate(model.cfg.segment_length)
    if len(sequences) < 2:
        raise ValueError("stage 2 needs at least 2 sequences")
    schedule = build_tune_schedule(cfg.lr, cfg.layer_decay, model.cfg.encoder_layers, cfg.freeze_lower_half)
    log = EpochLog(Path(out_dir) / "train_log.jsonl" if out_dir else None)
    queue = SupportQueue(cfg.queue_size, model.cfg.embed_dim)
    epoch0 = 0
    if cfg.mode == "three_stage":
        logger.info("head initialisation: %d epoch(s), encoder frozen", cfg.head_epochs)
        _run_phase("head_init", cfg.head_epochs, 0, sequences, model, data_cfg, cfg, schedule, True, queue, log)
        epoch0 = cfg.head_epochs
    logger.info("contrastive tuning: %d epoch(s), layer LRs %s", cfg.epochs, schedule.layer_lrs)
    _run_phase("tune", cfg.epochs, epoch0, sequences, model, data_cfg, cfg, schedule, False, queue, log)
    for p in model.parameters():
        p.requires_grad_(True)
    if out_dir is not None:
        save_checkpoint(out_dir, model, "stars", cfg.seed, epoch0 + cfg.epochs,
                        extra={"mode": cfg.mode, "schedule": asdict(schedule), "queue_size": cfg.queue_size})
    return model, log.records
