"""CTC objective: blank-augmented targets, log-space forward-backward,
output-layer gradients, greedy collapsing and label priors.

Blank is always label 0.  The trellis runs over the augmented sequence
(blanks interleaved around and between the target labels).  Convention:
``log_alpha[t, u]`` includes the emission at frame t while
``log_beta[t, u]`` is the probability of completing from position u
*after* frame t, so that ``logsumexp(log_alpha[t] + log_beta[t])``
equals the log-likelihood at every frame with no correction term.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

BLANK = 0
PRIOR_FLOOR_COUNT = 0.5

log = logging.getLogger(__name__)


class UnrealizableSequenceError(ValueError):
    """Target needs more frames than the utterance has; skip, don't crash."""


@dataclass
class LabelSequence:
    """Reference labels for one utterance, each in 1..K (0 is the blank)."""

    utterance_id: str
    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.ndim != 1 or self.labels.size < 1:
            raise ValueError(
                f"utterance {self.utterance_id}: labels must be a nonempty vector")
        if np.any(self.labels < 1):
            raise ValueError(
                f"utterance {self.utterance_id}: labels must be >= 1 "
                "(0 is reserved for the blank)")

    def __len__(self) -> int:
        return self.labels.size


@dataclass
class CtcTrellis:
    log_alpha: np.ndarray
    log_beta: np.ndarray
    log_likelihood: float


@dataclass
class LabelPriors:
    """Log prior over the K+1 labels (blank first); exp sums to one."""

    log_prior: np.ndarray


def augment(z: LabelSequence | np.ndarray) -> np.ndarray:
    """Interleave blanks: z_1..z_U becomes 0 z_1 0 z_2 0 ... z_U 0."""
    labels = z.labels if isinstance(z, LabelSequence) else np.asarray(z, dtype=np.int64)
    out = np.zeros(2 * labels.size + 1, dtype=np.int64)
    out[1::2] = labels
    return out


def min_frames(z: LabelSequence | np.ndarray) -> int:
    """Frames needed to realize z: one per label plus one blank per repeat."""
    labels = z.labels if isinstance(z, LabelSequence) else np.asarray(z)
    return labels.size + int(np.sum(labels[1:] == labels[:-1]))


def _probs(y) -> np.ndarray:
    probs = getattr(y, "probs", y)
    return np.asarray(probs, dtype=np.float64)


def ctc_forward_backward(y, z: LabelSequence) -> CtcTrellis:
    """Log-space alpha/beta recursions over the augmented label sequence.

    Skip transitions are allowed between distinct non-blank labels, which
    is exactly the move set under which every frame-level path collapses
    to its blank/repetition-free label sequence.
    """
    probs = _probs(y)
    frames = probs.shape[0]
    if frames < min_frames(z):
        raise UnrealizableSequenceError(
            f"utterance {z.utterance_id}: {len(z)} labels need at least "
            f"{min_frames(z)} frames but only {frames} are available")
    aug = augment(z)
    n = aug.size
    with np.errstate(divide="ignore"):
        log_y = np.log(probs)
    emit = log_y[:, aug]

    skip_ok = np.zeros(n, dtype=bool)
    skip_ok[2:] = (aug[2:] != BLANK) & (aug[2:] != aug[:-2])

    neg_inf = -np.inf
    log_alpha = np.full((frames, n), neg_inf)
    log_alpha[0, 0] = emit[0, 0]
    if n > 1:
        log_alpha[0, 1] = emit[0, 1]
    for t in range(1, frames):
        prev = log_alpha[t - 1]
        acc = prev.copy()
        acc[1:] = np.logaddexp(acc[1:], prev[:-1])
        acc[skip_ok] = np.logaddexp(acc[skip_ok], prev[:-2][skip_ok[2:]])
        log_alpha[t] = acc + emit[t]

    log_beta = np.full((frames, n), neg_inf)
    log_beta[frames - 1, n - 1] = 0.0
    if n > 1:
        log_beta[frames - 1, n - 2] = 0.0
    for t in range(frames - 2, -1, -1):
        term = log_beta[t + 1] + emit[t + 1]
        acc = term.copy()
        acc[:-1] = np.logaddexp(acc[:-1], term[1:])
        acc[:-2][skip_ok[2:]] = np.logaddexp(acc[:-2][skip_ok[2:]], term[2:][skip_ok[2:]])
        log_beta[t] = acc

    tail = log_alpha[frames - 1, n - 1]
    if n > 1:
        tail = np.logaddexp(tail, log_alpha[frames - 1, n - 2])
    return CtcTrellis(log_alpha, log_beta, float(tail))


def occupancies(trellis: CtcTrellis, z: LabelSequence, num_labels: int) -> np.ndarray:
    """Per-frame posterior mass of each label under the trellis alignment.

    Rows sum to one; this is the soft target distribution whose difference
    from the network posteriors is the pre-softmax training error.
    """
    aug = augment(z)
    joint = trellis.log_alpha + trellis.log_beta
    frames = joint.shape[0]
    gamma = np.zeros((frames, num_labels))
    for k in np.unique(aug):
        cols = joint[:, aug == k]
        gamma[:, k] = np.exp(logsumexp(cols, axis=1) - trellis.log_likelihood)
    return gamma


def ctc_gradient(y, trellis: CtcTrellis, z: LabelSequence) -> np.ndarray:
    """Derivative of the log-likelihood w.r.t. each posterior entry."""
    probs = _probs(y)
    aug = augment(z)
    if trellis.log_alpha.shape != (probs.shape[0], aug.size):
        raise ValueError("trellis does not match the given posteriors and labels")
    gamma = occupancies(trellis, z, probs.shape[1])
    return np.where(gamma > 0.0, gamma / np.maximum(probs, 1e-300), 0.0)


def greedy_collapse(y) -> np.ndarray:
    """Frame argmaxes with repetitions merged, then blanks removed."""
    best = np.argmax(_probs(y), axis=1)
    keep = np.ones(best.size, dtype=bool)
    keep[1:] = best[1:] != best[:-1]
    collapsed = best[keep]
    return collapsed[collapsed != BLANK]


def edit_distance(hyp: Sequence, ref: Sequence) -> int:
    """Levenshtein distance with unit costs."""
    hyp, ref = list(hyp), list(ref)
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, start=1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[len(hyp)]


def label_error_rate(hyp, ref) -> float:
    """Edit distance normalized by reference length (can exceed 1)."""
    hyp_labels = hyp.labels if isinstance(hyp, LabelSequence) else np.asarray(hyp)
    ref_labels = ref.labels if isinstance(ref, LabelSequence) else np.asarray(ref)
    if ref_labels.size == 0:
        raise ValueError("label error rate is undefined for an empty reference")
    return edit_distance(hyp_labels.tolist(), ref_labels.tolist()) / ref_labels.size


def estimate_priors(seqs: Sequence[LabelSequence], num_labels: int) -> LabelPriors:
    """Count labels over the blank-augmented training targets.

    The blank contributes U+1 counts per utterance; labels never observed
    are floored at half a count so log-priors stay finite.
    """
    if not seqs:
        raise ValueError("cannot estimate priors from an empty corpus")
    counts = np.zeros(num_labels)
    for z in seqs:
        if z.labels.max() >= num_labels:
            raise ValueError(
                f"utterance {z.utterance_id}: label {z.labels.max()} out of "
                f"range for a {num_labels}-label inventory")
        counts[BLANK] += len(z) + 1
        np.add.at(counts, z.labels, 1.0)
    counts = np.where(counts == 0.0, PRIOR_FLOOR_COUNT, counts)
    return LabelPriors(np.log(counts / counts.sum()))
