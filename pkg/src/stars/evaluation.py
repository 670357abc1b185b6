"""Frozen-feature evaluation: KNN, n-shot and linear probe, plus the FTS1 feature file format."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .data import PreprocessConfig, SkeletonSequence, preprocess, segment
from .model import StarsModel

FTS_MAGIC = b"FTS1"


@dataclass
class FeatureSet:
    features: np.ndarray  # (rows, dim) float32
    labels: np.ndarray    # (rows,) int64
    ids: list[str] = field(default_factory=list)
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ValueError("features must be a 2-D matrix")
        if len(self.labels) != len(self.features):
            raise ValueError(f"{len(self.features)} feature rows but {len(self.labels)} labels")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features contain non-finite values")
        if len(self.labels) and self.labels.min() < 0:
            raise ValueError("labels must be non-negative")
        if not self.ids:
            self.ids = [str(i) for i in range(len(self.labels))]

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]


def write_features(path: str | Path, fs: FeatureSet) -> None:
    path = Path(path)
    rows, dim = fs.features.shape
    with open(path, "wb") as fh:
        fh.write(FTS_MAGIC + struct.pack("<II", rows, dim))
        fh.write(np.ascontiguousarray(fs.features, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(fs.labels, dtype="<u4").tobytes())
    sidecar = {"ids": list(fs.ids), "meta": fs.meta}
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=1, sort_keys=True) + "\n")


def read_features(path: str | Path) -> FeatureSet:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != FTS_MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:4]!r}, expected {FTS_MAGIC!r}")
    rows, dim = struct.unpack_from("<II", raw, 4)
    need = 12 + 4 * rows * dim + 4 * rows
    if len(raw) != need:
        raise ValueError(f"{path}: expected {need} bytes for {rows}x{dim}, got {len(raw)}")
    feats = np.frombuffer(raw, dtype="<f4", count=rows * dim, offset=12).reshape(rows, dim)
    labels = np.frombuffer(raw, dtype="<u4", count=rows, offset=12 + 4 * rows * dim)
    sidecar = Path(str(path) + ".json")
    ids, meta = [], {}
    if sidecar.exists():
        side = json.loads(sidecar.read_text())
        ids, meta = side.get("ids", []), side.get("meta", {})
    return FeatureSet(feats.copy(), labels.astype(np.int64), ids, meta)


@torch.no_grad()
def extract_features(
    model: StarsModel,
    sequences: Sequence[SkeletonSequence],
    labels: Sequence[int],
    data_cfg: PreprocessConfig,
    ids: Sequence[str] | None = None,
    batch_size: int = 64,
    meta: dict[str, Any] | None = None,
) -> FeatureSet:
    """Mean-pooled encoder output on the full token grid with the fixed test-mode crop."""
    was_training = model.training
    model.eval()
    l = model.cfg.segment_length
    rows = []
    for start in range(0, len(sequences), batch_size):
        chunk = sequences[start:start + batch_size]
        tokens = np.stack([segment(preprocess(s, data_cfg), l).tokens for s in chunk])
        rows.append(model.features(torch.from_numpy(tokens.astype(np.float32))).numpy())
    model.train(was_training)
    feats = np.concatenate(rows) if rows else np.zeros((0, model.cfg.embed_dim), np.float32)
    info = {"test_trim": data_cfg.test_trim, "target_length": data_cfg.target_length, "crop": "center"}
    info.update(meta or {})
    return FeatureSet(feats, np.asarray(labels), list(ids) if ids is not None else [], info)


def _unit_rows(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.maximum(norms, 1e-12)


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return _unit_rows(a) @ _unit_rows(b).T


def vote(labels: np.ndarray, sims: np.ndarray) -> int:
    """Majority label; ties go to the larger summed similarity, then the lower label id."""
    best = None
    for lab in np.unique(labels):
        sel = labels == lab
        key = (int(sel.sum()), float(sims[sel].sum()), -int(lab))
        if best is None or key > best[0]:
            best = (key, int(lab))
    return best[1]


def knn_predict(train: FeatureSet, test: FeatureSet, k: int) -> np.ndarray:
    """Top-k by cosine similarity (ties: lower train row), then :func:`vote`."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(train) == 0:
        raise ValueError("empty training set")
    if k > len(train):
        raise ValueError(f"k={k} exceeds training set size {len(train)}")
    if train.dim != test.dim:
        raise ValueError(f"feature dims differ: train {train.dim}, test {test.dim}")
    sims = cosine_similarity(test.features, train.features)
    rows = np.arange(len(train))
    preds = np.empty(len(test), dtype=np.int64)
    for i, s in enumerate(sims):
        top = np.lexsort((rows, -s))[:k]
        preds[i] = vote(train.labels[top], s[top])
    return preds


def knn_eval(train: FeatureSet, test: FeatureSet, k: int = 1) -> float:
    if len(test) == 0:
        raise ValueError("empty test set")
    return float(np.mean(knn_predict(train, test, k) == test.labels))


def few_shot_eval(exemplars: FeatureSet, test: FeatureSet, n: int) -> float:
    """n-shot accuracy: vote over the n nearest exemplars (exactly n per class required)."""
    classes, counts = np.unique(exemplars.labels, return_counts=True)
    if len(classes) == 0 or np.any(counts != n):
        raise ValueError(f"few-shot needs exactly {n} exemplars per class, got {dict(zip(classes.tolist(), counts.tolist()))}")
    return knn_eval(exemplars, test, n)


def select_exemplars(fs: FeatureSet, n: int) -> FeatureSet:
    """First ``n`` rows of each class in file order."""
    keep = []
    for lab in np.unique(fs.labels):
        rows = np.flatnonzero(fs.labels == lab)
        if len(rows) < n:
            raise ValueError(f"class {lab} has only {len(rows)} rows, need {n}")
        keep.extend(rows[:n].tolist())
    keep.sort()
    return FeatureSet(fs.features[keep], fs.labels[keep], [fs.ids[i] for i in keep], dict(fs.meta))


@dataclass
class ProbeConfig:
    epochs: int = 100
    batch_size: int = 256
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("probe epochs/batch_size must be >= 1 and lr positive")


def linear_probe(train: FeatureSet, test: FeatureSet, cfg: ProbeConfig | None = None) -> tuple[float, list[dict]]:
    """Train one linear layer on frozen features; returns test accuracy and per-epoch history."""
    cfg = cfg or ProbeConfig()
    cfg.validate()
    if len(np.unique(train.labels)) < 2:
        raise ValueError("linear probe needs at least two classes in the training set")
    if train.dim != test.dim:
        raise ValueError(f"feature dims differ: train {train.dim}, test {test.dim}")
    gen = torch.Generator().manual_seed(cfg.seed)
    num_classes = int(max(train.labels.max(), test.labels.max() if len(test) else 0)) + 1
    head = torch.nn.Linear(train.dim, num_classes)
    with torch.no_grad():
        bound = 1.0 / math.sqrt(train.dim)
        head.weight.uniform_(-bound, bound, generator=gen)
        head.bias.zero_()
    opt = torch.optim.SGD(head.parameters(), lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=cfg.epochs, eta_min=0.0)
    x = torch.from_numpy(train.features)
    y = torch.from_numpy(train.labels)
    xt = torch.from_numpy(test.features)
    yt = torch.from_numpy(test.labels)
    history = []
    for epoch in range(cfg.epochs):
        order = torch.randperm(len(x), generator=gen)
        total = 0.0
        for start in range(0, len(x), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss = F.cross_entropy(head(x[idx]), y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        sched.step()
        with torch.no_grad():
            train_acc = float((head(x).argmax(1) == y).float().mean())
            test_acc = float((head(xt).argmax(1) == yt).float().mean()) if len(xt) else float("nan")
        history.append({"epoch": epoch + 1, "loss": total / len(x), "train_accuracy": train_acc,
                        "test_accuracy": test_acc})
    return history[-1]["test_accuracy"], history


def result_record(protocol: str, k_or_n: int | None, accuracy: float, train_size: int, test_size: int) -> dict:
    return {"protocol": protocol, "k_or_n": k_or_n, "accuracy": accuracy,
            "train_size": train_size, "test_size": test_size}
