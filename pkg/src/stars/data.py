"""Skeleton sequence I/O, preprocessing, augmentation and a synthetic action generator."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

SKL_MAGIC = b"SKL1"
_SKL_HEADER = struct.Struct("<4sIII")

AUGMENTATIONS = ("spatial_flip", "rotation", "shear", "axis_mask")


class SequenceFormatError(ValueError):
    """Raised when an SKL1 file cannot be parsed."""


class HeaderError(SequenceFormatError):
    pass


class PayloadSizeError(SequenceFormatError):
    pass


class NonFiniteError(SequenceFormatError):
    pass


@dataclass
class SkeletonSequence:
    """Raw joint trajectories, shape (frames, joints, channels)."""

    frames: np.ndarray

    def __post_init__(self) -> None:
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 3:
            raise ValueError(f"frames must be 3-D (T, V, C), got shape {self.frames.shape}")
        if min(self.frames.shape) < 1:
            raise ValueError(f"empty axis in frames shape {self.frames.shape}")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError("frames contain non-finite values")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def num_joints(self) -> int:
        return self.frames.shape[1]

    @property
    def num_channels(self) -> int:
        return self.frames.shape[2]


@dataclass
class SegmentedSequence:
    tokens: np.ndarray  # (T_e, V, l*C)
    segment_length: int

    @property
    def num_segments(self) -> int:
        return self.tokens.shape[0]


@dataclass
class PreprocessConfig:
    trim_min: float = 0.5
    trim_max: float = 1.0
    test_trim: float = 0.9
    target_length: int = 120

    def validate(self, segment_length: int | None = None) -> None:
        if not 0 < self.trim_min <= self.trim_max <= 1:
            raise ValueError(
                f"need 0 < trim_min <= trim_max <= 1, got {self.trim_min}, {self.trim_max}"
            )
        if not 0 < self.test_trim <= 1:
            raise ValueError(f"test_trim must lie in (0, 1], got {self.test_trim}")
        if self.target_length < 2:
            raise ValueError("target_length must be at least 2")
        if segment_length is not None and self.target_length % segment_length:
            raise ValueError(
                f"target_length {self.target_length} is not divisible by segment length {segment_length}"
            )


# ---------------------------------------------------------------------------
# SKL1 files


def write_sequence(path: str | Path, seq: SkeletonSequence) -> None:
    frames = np.ascontiguousarray(seq.frames, dtype="<f4")
    t, v, c = frames.shape
    with open(path, "wb") as fh:
        fh.write(_SKL_HEADER.pack(SKL_MAGIC, t, v, c))
        fh.write(frames.tobytes(order="C"))


def load_sequence(path: str | Path) -> SkeletonSequence:
    raw = Path(path).read_bytes()
    if len(raw) < _SKL_HEADER.size:
        raise HeaderError(f"{path}: header truncated ({len(raw)} bytes)")
    magic, t, v, c = _SKL_HEADER.unpack_from(raw)
    if magic != SKL_MAGIC:
        raise HeaderError(f"{path}: bad magic {magic!r}, expected {SKL_MAGIC!r}")
    for name, val in (("T", t), ("V", v), ("C", c)):
        if val < 1:
            raise HeaderError(f"{path}: header field {name} must be >= 1, got {val}")
    payload = raw[_SKL_HEADER.size:]
    expected = t * v * c * 4
    if len(payload) != expected:
        raise PayloadSizeError(
            f"{path}: payload is {len(payload)} bytes but header (T={t}, V={v}, C={c}) needs {expected}"
        )
    frames = np.frombuffer(payload, dtype="<f4").reshape(t, v, c).astype(np.float32)
    if not np.all(np.isfinite(frames)):
        raise NonFiniteError(f"{path}: payload contains non-finite values")
    return SkeletonSequence(frames)


# ---------------------------------------------------------------------------
# Manifest


@dataclass
class ManifestEntry:
    id: str
    file: str
    label: int
    subject: int
    view: int


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    splits: dict[str, dict[str, str]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        ids = [e.id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError("manifest ids are not unique")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def labels(self) -> np.ndarray:
        return np.array([e.label for e in self.entries], dtype=np.int64)

    def subset(self, protocol: str, part: str) -> "DatasetManifest":
        """Entries assigned to ``part`` ('train' or 'test') under a named split protocol."""
        if protocol == "all":
            return DatasetManifest(list(self.entries))
        if protocol not in self.splits:
            raise KeyError(f"unknown split protocol {protocol!r}; have {sorted(self.splits)}")
        assign = self.splits[protocol]
        return DatasetManifest([e for e in self.entries if assign.get(e.id) == part])

    def write(self, root: str | Path) -> None:
        root = Path(root)
        with open(root / "manifest.jsonl", "w") as fh:
            for e in self.entries:
                fh.write(json.dumps(e.__dict__, sort_keys=True) + "\n")
        with open(root / "splits.json", "w") as fh:
            json.dump(self.splits, fh, sort_keys=True, indent=1)

    @classmethod
    def read(cls, root: str | Path, check_files: bool = True) -> "DatasetManifest":
        root = Path(root)
        entries = []
        with open(root / "manifest.jsonl") as fh:
            for line in fh:
                if line.strip():
                    rec = json.loads(line)
                    entries.append(ManifestEntry(
                        id=str(rec["id"]), file=str(rec["file"]), label=int(rec["label"]),
                        subject=int(rec["subject"]), view=int(rec["view"]),
                    ))
        splits = {}
        if (root / "splits.json").exists():
            splits = json.loads((root / "splits.json").read_text())
        manifest = cls(entries, splits)
        if check_files:
            for e in entries:
                if not (root / e.file).exists():
                    raise FileNotFoundError(f"manifest entry {e.id}: missing file {e.file}")
        return manifest


def subject_split(manifest: DatasetManifest, train_subjects: Sequence[int]) -> dict[str, str]:
    """Cross-subject assignment: listed subjects train, the rest test."""
    train = set(train_subjects)
    return {e.id: "train" if e.subject in train else "test" for e in manifest.entries}


def view_split(manifest: DatasetManifest, train_views: Sequence[int]) -> dict[str, str]:
    train = set(train_views)
    return {e.id: "train" if e.view in train else "test" for e in manifest.entries}


def load_dataset(root: str | Path, manifest: DatasetManifest | None = None) -> tuple[list[SkeletonSequence], DatasetManifest]:
    root = Path(root)
    if manifest is None:
        manifest = DatasetManifest.read(root)
    return [load_sequence(root / e.file) for e in manifest.entries], manifest


# ---------------------------------------------------------------------------
# Preprocessing


def trim_and_resize(
    seq: SkeletonSequence,
    proportion: float,
    target_length: int,
    rng: np.random.Generator | None = None,
) -> SkeletonSequence:
    """Crop a contiguous ``proportion`` of the frames and resample it to ``target_length``.

    With ``rng`` the crop start is uniform over valid offsets; without it the
    crop is centered (test mode). Resampling is linear in time with both
    endpoints aligned.
    """
    if not 0 < proportion <= 1:
        raise ValueError(f"proportion must lie in (0, 1], got {proportion}")
    if target_length < 2:
        raise ValueError("target_length must be at least 2")
    total = seq.num_frames
    n = int(round(proportion * total))
    if n < 2:
        raise ValueError(f"trimmed segment has {n} frame(s); need at least 2")
    slack = total - n
    start = int(rng.integers(0, slack + 1)) if rng is not None else slack // 2
    clip = seq.frames[start:start + n].astype(np.float64)
    if n == target_length:
        return SkeletonSequence(clip)
    pos = np.linspace(0.0, n - 1, target_length)
    lo = np.minimum(np.floor(pos).astype(np.int64), n - 2)
    w = (pos - lo)[:, None, None]
    out = (1.0 - w) * clip[lo] + w * clip[lo + 1]
    return SkeletonSequence(out)


def preprocess(
    seq: SkeletonSequence,
    cfg: PreprocessConfig,
    rng: np.random.Generator | None = None,
) -> SkeletonSequence:
    """Training crop (random proportion and offset) when ``rng`` is given, else the fixed test crop."""
    if rng is None:
        return trim_and_resize(seq, cfg.test_trim, cfg.target_length)
    p = float(rng.uniform(cfg.trim_min, cfg.trim_max))
    return trim_and_resize(seq, p, cfg.target_length, rng)


def segment(seq: SkeletonSequence | np.ndarray, l: int) -> SegmentedSequence:
    frames = seq.frames if isinstance(seq, SkeletonSequence) else np.asarray(seq)
    t, v, c = frames.shape
    if l < 1 or t % l:
        raise ValueError(
            f"sequence length {t} is not divisible by segment length {l}; resize it first"
        )
    tokens = frames.reshape(t // l, l, v, c).transpose(0, 2, 1, 3).reshape(t // l, v, l * c)
    return SegmentedSequence(np.ascontiguousarray(tokens), l)


def unsegment(seg: SegmentedSequence, channels: int = 3) -> SkeletonSequence:
    te, v, lc = seg.tokens.shape
    l = seg.segment_length
    if lc != l * channels:
        raise ValueError(f"token width {lc} does not match l={l} x C={channels}")
    frames = seg.tokens.reshape(te, v, l, channels).transpose(0, 2, 1, 3).reshape(te * l, v, channels)
    return SkeletonSequence(frames)


# ---------------------------------------------------------------------------
# Augmentations (off by default)


@dataclass
class AugmentConfig:
    rotation_deg: float = 30.0
    shear: float = 0.3
    lateral_axis: int = 0
    flip_pairs: list[tuple[int, int]] | None = None


def rotation_matrix(ax: float, ay: float, az: float) -> np.ndarray:
    cx, sx = np.cos(ax), np.sin(ax)
    cy, sy = np.cos(ay), np.sin(ay)
    cz, sz = np.cos(az), np.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rz @ ry @ rx


def augment(
    seq: SkeletonSequence,
    kind: str,
    rng: np.random.Generator,
    cfg: AugmentConfig | None = None,
) -> SkeletonSequence:
    cfg = cfg or AugmentConfig()
    x = seq.frames.astype(np.float64)
    if kind == "spatial_flip":
        if not cfg.flip_pairs:
            raise ValueError("spatial_flip needs a left/right joint pair table (AugmentConfig.flip_pairs)")
        perm = np.arange(x.shape[1])
        for a, b in cfg.flip_pairs:
            perm[a], perm[b] = b, a
        x = x[:, perm].copy()
        x[..., cfg.lateral_axis] *= -1
    elif kind == "rotation":
        bound = np.deg2rad(cfg.rotation_deg)
        angles = rng.uniform(-bound, bound, size=3) if bound > 0 else np.zeros(3)
        x = x @ rotation_matrix(*angles).T
    elif kind == "shear":
        s = np.eye(3)
        off = ~np.eye(3, dtype=bool)
        s[off] = rng.uniform(-cfg.shear, cfg.shear, size=6)
        x = x @ s.T
    elif kind == "axis_mask":
        x = x.copy()
        x[..., int(rng.integers(0, x.shape[2]))] = 0.0
    else:
        raise ValueError(f"unknown augmentation {kind!r}; choose from {AUGMENTATIONS}")
    return SkeletonSequence(x)


# ---------------------------------------------------------------------------
# Synthetic actions


@dataclass
class SyntheticConfig:
    noise: float = 0.03
    scale_jitter: float = 0.15
    rotation_deg: float = 45.0
    phase_jitter: float = float(np.pi)
    speed_jitter: float = 0.3
    amplitude: float = 0.3
    subjects: int = 8
    views: int = 3


def generate_synthetic(
    classes: int,
    per_class: int,
    frames: int,
    joints: int,
    seed: int,
    cfg: SyntheticConfig | None = None,
    test_per_class: int = 0,
) -> tuple[list[SkeletonSequence], DatasetManifest]:
    """Procedural action dataset: each class is a family of per-joint sinusoids.

    A shared rest pose is animated by class-specific amplitudes, frequencies
    and phases. Each sample perturbs subject scale, rotation about the
    vertical axis, global phase and speed and adds Gaussian noise. The last
    ``test_per_class`` samples of every class form the "holdout" test split.
    """
    if classes < 2 or per_class < 2:
        raise ValueError("need classes >= 2 and per_class >= 2")
    if frames < 2 or joints < 1:
        raise ValueError("need frames >= 2 and joints >= 1")
    if not 0 <= test_per_class < per_class:
        raise ValueError("test_per_class must be in [0, per_class)")
    cfg = cfg or SyntheticConfig()
    root = np.random.default_rng(seed)
    rest = root.normal(0.0, 0.5, size=(joints, 3))
    families = []
    for _ in range(classes):
        active = root.random(joints) < 0.5
        active[root.integers(0, joints)] = True
        families.append(dict(
            amp=cfg.amplitude * root.uniform(0.3, 1.0, size=(joints, 3)) * active[:, None],
            freq=root.uniform(0.5, 3.0, size=(1, 3)) * root.choice([1.0, 2.0], size=(joints, 1)),
            phase=root.uniform(0, 2 * np.pi, size=(joints, 3)),
            drift=root.normal(0.0, 0.2, size=3),
        ))

    t = np.linspace(0.0, 1.0, frames)[:, None, None]
    sequences, entries = [], []
    holdout = {}
    for c, fam in enumerate(families):
        for i in range(per_class):
            rng = np.random.default_rng([seed, c, i])
            scale = 1.0 + cfg.scale_jitter * rng.uniform(-1, 1)
            theta = np.deg2rad(cfg.rotation_deg) * rng.uniform(-1, 1)
            shift = cfg.phase_jitter * rng.uniform(-1, 1)
            speed = 1.0 + cfg.speed_jitter * rng.uniform(-1, 1)
            motion = fam["amp"] * np.sin(2 * np.pi * fam["freq"] * speed * t + fam["phase"] + shift)
            pose = scale * (rest[None] + motion + fam["drift"] * t)
            pose = pose @ rotation_matrix(0.0, theta, 0.0).T
            pose = pose + cfg.noise * rng.standard_normal(pose.shape)
            sid = f"c{c:03d}_s{i:04d}"
            sequences.append(SkeletonSequence(pose))
            entries.append(ManifestEntry(
                id=sid, file=f"{sid}.skl", label=c,
                subject=i % cfg.subjects, view=i % cfg.views,
            ))
            holdout[sid] = "test" if i >= per_class - test_per_class else "train"
    manifest = DatasetManifest(entries)
    manifest.splits["holdout"] = holdout
    manifest.splits["xsub"] = subject_split(manifest, range(0, cfg.subjects, 2))
    manifest.splits["xview"] = view_split(manifest, range(1, cfg.views))
    return sequences, manifest


@dataclass
class DataConfig(PreprocessConfig):
    """Preprocessing plus the optional training-time augmentations (none by default)."""

    augmentations: list[str] = field(default_factory=list)
    rotation_deg: float = 30.0
    shear: float = 0.3
    flip_pairs: list[tuple[int, int]] | None = None

    def validate(self, segment_length: int | None = None) -> None:
        super().validate(segment_length)
        for kind in self.augmentations:
            if kind not in AUGMENTATIONS:
                raise ValueError(f"unknown augmentation {kind!r}; choose from {AUGMENTATIONS}")
        if "spatial_flip" in self.augmentations and not self.flip_pairs:
            raise ValueError("spatial_flip augmentation needs data.flip_pairs")

    @property
    def augment_config(self) -> AugmentConfig:
        pairs = [tuple(p) for p in self.flip_pairs] if self.flip_pairs else None
        return AugmentConfig(rotation_deg=self.rotation_deg, shear=self.shear, flip_pairs=pairs)


def training_view(seq: SkeletonSequence, cfg: DataConfig, rng: np.random.Generator) -> SkeletonSequence:
    """Random crop/resize followed by any configured augmentations."""
    out = preprocess(seq, cfg, rng)
    for kind in cfg.augmentations:
        out = augment(out, kind, rng, cfg.augment_config)
    return out


def write_dataset(root: str | Path, sequences: Sequence[SkeletonSequence], manifest: DatasetManifest) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for seq, entry in zip(sequences, manifest.entries):
        write_sequence(root / entry.file, seq)
    manifest.write(root)
