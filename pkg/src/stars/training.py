"""Pieces shared by both training loops: schedules, RNG streams, logging, abort diagnostics."""

from __future__ import annotations

import json
import logging
import math
import time
from pathlib import Path
from typing import Any

import numpy as np
import torch

logger = logging.getLogger("stars")


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, diagnostic: dict[str, Any]):
        super().__init__(message)
        self.diagnostic = diagnostic


def warmup_cosine(step: int, total: int, warmup_frac: float = 0.05) -> float:
    """LR multiplier: linear warmup over ``warmup_frac`` of the steps, then cosine to zero."""
    if total <= 0:
        return 1.0
    warmup = int(math.ceil(warmup_frac * total))
    if step < warmup:
        return (step + 1) / warmup
    progress = (step - warmup) / max(1, total - warmup)
    return 0.5 * (1.0 + math.cos(math.pi * min(1.0, progress)))


def sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Per-sample stream, independent of batch composition and worker count."""
    return np.random.default_rng([seed, epoch, index])


def epoch_batches(n: int, batch_size: int, seed: int, epoch: int, min_size: int = 1) -> list[np.ndarray]:
    order = np.random.default_rng([seed, epoch, 2**31 - 1]).permutation(n)
    batches = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    return [b for b in batches if len(b) >= min_size]


def grad_norm(params) -> float:
    sq = [p.grad.detach().double().pow(2).sum() for p in params if p.grad is not None]
    return float(torch.stack(sq).sum().sqrt()) if sq else 0.0


def check_finite(loss: torch.Tensor, batch: int, epoch: int, lr: float, params) -> None:
    if not torch.isfinite(loss):
        diag = {"error": "non-finite loss", "epoch": epoch, "batch": batch, "lr": lr,
                "grad_norm": grad_norm(params)}
        raise TrainingAborted(f"non-finite loss at epoch {epoch}, batch {batch}", diag)


class EpochLog:
    """Appends one JSON record per epoch to ``path`` (if given) and keeps them in memory."""

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self.records: list[dict[str, Any]] = []
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")
        self._t0 = time.perf_counter()

    def start_epoch(self) -> None:
        self._t0 = time.perf_counter()

    def write(self, **record: Any) -> dict[str, Any]:
        record["wall_ms"] = round(1000 * (time.perf_counter() - self._t0), 3)
        self.records.append(record)
        line = json.dumps(record, sort_keys=True)
        logger.info(line)
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(line + "\n")
        return record


def read_log(path: str | Path) -> list[dict[str, Any]]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
