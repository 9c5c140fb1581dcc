"""Front-end feature processing: derivative appending and per-speaker CMVN."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np

VARIANCE_FLOOR = 1e-10


@dataclass
class FeatureMatrix:
    """One utterance worth of features, frames along axis 0."""

    utterance_id: str
    frames: np.ndarray

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1 or self.frames.shape[1] < 1:
            raise ValueError(
                f"utterance {self.utterance_id}: features must be a nonempty "
                f"[T x D] matrix, got shape {self.frames.shape}")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


@dataclass
class SpeakerStats:
    """Per-dimension population mean and floored variance for one speaker."""

    speaker_id: str
    mean: np.ndarray
    variance: np.ndarray


def _delta(frames: np.ndarray, window: int) -> np.ndarray:
    # Regression deltas with edge frames clamped (repeat first/last frame).
    t = frames.shape[0]
    denom = 2.0 * sum(n * n for n in range(1, window + 1))
    out = np.zeros_like(frames)
    idx = np.arange(t)
    for n in range(1, window + 1):
        ahead = frames[np.minimum(idx + n, t - 1)]
        behind = frames[np.maximum(idx - n, 0)]
        out += n * (ahead - behind)
    return out / denom


def add_deltas(feat: FeatureMatrix, order: int = 2, window: int = 2) -> FeatureMatrix:
    """Append derivative features up to ``order``, widening D to D*(order+1)."""
    if order not in (0, 1, 2):
        raise ValueError(f"delta order must be 0, 1 or 2, got {order}")
    if window < 1:
        raise ValueError(f"delta window must be >= 1, got {window}")
    if not np.all(np.isfinite(feat.frames)):
        raise ValueError(f"utterance {feat.utterance_id}: non-finite feature values")
    blocks = [feat.frames]
    for _ in range(order):
        blocks.append(_delta(blocks[-1], window))
    return FeatureMatrix(feat.utterance_id, np.hstack(blocks))


def estimate_speaker_stats(feats: Iterable[FeatureMatrix],
                           speaker_map: Mapping[str, str]) -> dict[str, SpeakerStats]:
    """Exact population mean/variance per speaker over all of its frames."""
    sums: dict[str, np.ndarray] = {}
    sqsums: dict[str, np.ndarray] = {}
    counts: dict[str, int] = {}
    for feat in feats:
        if feat.utterance_id not in speaker_map:
            raise ValueError(f"utterance {feat.utterance_id} missing from speaker map")
        spk = speaker_map[feat.utterance_id]
        if spk not in sums:
            sums[spk] = np.zeros(feat.dim)
            sqsums[spk] = np.zeros(feat.dim)
            counts[spk] = 0
        sums[spk] += feat.frames.sum(axis=0)
        sqsums[spk] += (feat.frames ** 2).sum(axis=0)
        counts[spk] += feat.num_frames
    stats = {}
    for spk, n in counts.items():
        mean = sums[spk] / n
        var = np.maximum(sqsums[spk] / n - mean ** 2, VARIANCE_FLOOR)
        stats[spk] = SpeakerStats(spk, mean, var)
    return stats


def apply_cmvn(feat: FeatureMatrix, stats: SpeakerStats) -> FeatureMatrix:
    """Mean-subtract and variance-normalize with the given speaker stats."""
    if stats.mean.shape[0] != feat.dim:
        raise ValueError(
            f"utterance {feat.utterance_id}: feature dim {feat.dim} does not "
            f"match stats dim {stats.mean.shape[0]} of speaker {stats.speaker_id}")
    normed = (feat.frames - stats.mean) / np.sqrt(stats.variance)
    return FeatureMatrix(feat.utterance_id, normed)
