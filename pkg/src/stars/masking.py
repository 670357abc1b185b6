"""Motion-aware masking: temporal differences, intensities and Gumbel-Max top-K selection."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import SkeletonSequence

EPS_CLAMP = 1e-12


@dataclass
class MotionField:
    motion: np.ndarray  # (T_s, V, C)
    stride: int
    segment_length: int

    @property
    def reshaped(self) -> np.ndarray:
        """Motion as (T_e, V, l, C)."""
        t, v, c = self.motion.shape
        l = self.segment_length
        if t % l:
            raise ValueError(f"motion length {t} not divisible by segment length {l}")
        return self.motion.reshape(t // l, l, v, c).transpose(0, 2, 1, 3)


@dataclass
class MaskPlan:
    intensity: np.ndarray
    probabilities: np.ndarray
    temperature: float
    mask_count: int
    masked_indices: np.ndarray  # flat indices into the (T_e, V) grid, ascending
    uniforms: np.ndarray
    gumbel: np.ndarray


def extract_motion(seq: SkeletonSequence | np.ndarray, stride: int, segment_length: int | None = None) -> MotionField:
    """Temporal difference ``x[i] - x[i - stride]``; the first ``stride`` frames repeat ``motion[stride]``."""
    frames = seq.frames if isinstance(seq, SkeletonSequence) else np.asarray(seq)
    total = frames.shape[0]
    if not 1 <= stride < total:
        raise ValueError(f"motion stride must satisfy 1 <= m < T_s={total}, got {stride}")
    x = frames.astype(np.float64)
    motion = np.empty_like(x)
    motion[stride:] = x[stride:] - x[:-stride]
    motion[:stride] = motion[stride]
    return MotionField(motion, stride, segment_length if segment_length is not None else stride)


def motion_intensity(field: MotionField) -> np.ndarray:
    return np.abs(field.reshaped).sum(axis=(2, 3))


def mask_probabilities(intensity: np.ndarray, temperature: float) -> np.ndarray:
    """Softmax of ``intensity / temperature`` over the whole grid."""
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    logits = np.asarray(intensity, dtype=np.float64) / temperature
    logits = logits - logits.max()
    w = np.exp(logits)
    return w / w.sum()


def mask_count(ratio: float, cells: int) -> int:
    """round(ratio * cells), kept inside [1, cells - 1] so both sides are nonempty."""
    k = int(np.floor(ratio * cells + 0.5))
    return max(1, min(cells - 1, k)) if cells > 1 else 1


def gumbel_scores(probabilities: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    p = np.asarray(probabilities, dtype=np.float64)
    eps = np.clip(rng.random(p.shape), EPS_CLAMP, 1.0 - EPS_CLAMP)
    g = -np.log(-np.log(eps))
    with np.errstate(divide="ignore"):
        scores = np.log(p) + g
    return scores, eps, g


def sample_mask(probabilities: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """K distinct flat indices: the top-K of log(pi) + Gumbel noise, returned ascending."""
    return _sample(probabilities, k, rng)[0]


def _sample(probabilities, k, rng):
    cells = np.asarray(probabilities).size
    if not 1 <= k <= cells:
        raise ValueError(f"mask count K must satisfy 1 <= K <= {cells}, got {k}")
    scores, eps, g = gumbel_scores(probabilities, rng)
    order = np.argsort(-scores.ravel(), kind="stable")
    return np.sort(order[:k]), eps, g


def plan_mask(
    seq: SkeletonSequence | np.ndarray,
    segment_length: int,
    ratio: float,
    temperature: float,
    rng: np.random.Generator,
    stride: int | None = None,
    uniform: bool = False,
) -> tuple[MaskPlan, MotionField]:
    """Full masking pipeline for one preprocessed sequence.

    ``uniform=True`` replaces the motion-driven probabilities by a flat
    distribution (random-masking baseline).
    """
    field = extract_motion(seq, stride or segment_length, segment_length)
    intensity = motion_intensity(field)
    if uniform:
        probs = np.full(intensity.shape, 1.0 / intensity.size)
    else:
        probs = mask_probabilities(intensity, temperature)
    k = mask_count(ratio, intensity.size)
    idx, eps, g = _sample(probs, k, rng)
    plan = MaskPlan(intensity, probs, temperature, k, idx, eps.reshape(probs.shape), g.reshape(probs.shape))
    return plan, field
