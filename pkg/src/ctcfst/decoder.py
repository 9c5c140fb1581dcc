"""Frame-synchronous Viterbi beam search over a compiled search graph,
prior-normalized acoustic scoring, and word-error-rate scoring.

Scores are tropical costs (lower is better): graph arc weights plus the
negated, scaled, prior-normalized frame log-posteriors of every consumed
label.  One token survives per graph state per frame.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .ctc import LabelPriors
from .wfst import EPSILON, Wfst

POSTERIOR_FLOOR = 1e-30
DEFAULT_ACOUSTIC_SCALE = 0.7

log = logging.getLogger(__name__)


def normalize_posteriors(y, priors: LabelPriors, scale: float) -> np.ndarray:
    """Per-frame log scores scale * (ln y - log prior), floored before ln."""
    probs = np.asarray(getattr(y, "probs", y), dtype=np.float64)
    if probs.shape[1] != priors.log_prior.shape[0]:
        raise ValueError(
            f"posterior dim {probs.shape[1]} does not match prior dim "
            f"{priors.log_prior.shape[0]}")
    if scale <= 0.0:
        raise ValueError(f"acoustic scale must be positive, got {scale}")
    return scale * (np.log(np.maximum(probs, POSTERIOR_FLOOR)) - priors.log_prior)


@dataclass
class AcousticScorer:
    """Prior-normalized scaled acoustic scores for one utterance."""

    posteriors: object
    priors: LabelPriors
    scale: float = DEFAULT_ACOUSTIC_SCALE
    scores: np.ndarray = field(init=False)

    def __post_init__(self):
        self.scores = normalize_posteriors(self.posteriors, self.priors, self.scale)

    @property
    def num_frames(self) -> int:
        return self.scores.shape[0]

    def cost(self, frame: int, ctc_label: int) -> float:
        return -self.scores[frame, ctc_label]


@dataclass(frozen=True)
class TracedArc:
    """One traversed graph arc; ``frame`` is None on epsilon-input arcs."""

    ilabel: int
    olabel: int
    weight: float
    frame: int | None


@dataclass
class _Trace:
    arc: TracedArc
    prev: "_Trace | None"


@dataclass
class _Token:
    cost: float
    trace: _Trace | None


def _relax_epsilons(graph: Wfst, tokens: dict[int, _Token]) -> dict[int, _Token]:
    """Push tokens across input-epsilon arcs to a fixed point.

    Bounded by one full sweep per graph state (the Bellman-Ford bound);
    exceeding it means an improving epsilon cycle, which a well-formed
    search graph cannot contain.
    """
    for _ in range(graph.num_states):
        changed = False
        for state in list(tokens):
            tok = tokens[state]
            for arc in graph.arcs(state):
                if arc.ilabel != EPSILON:
                    continue
                cost = tok.cost + arc.weight
                cur = tokens.get(arc.nextstate)
                if cur is None or cost < cur.cost:
                    trace = _Trace(TracedArc(arc.ilabel, arc.olabel,
                                             arc.weight, None), tok.trace)
                    tokens[arc.nextstate] = _Token(cost, trace)
                    changed = True
        if not changed:
            return tokens
    raise RuntimeError("epsilon expansion failed to settle; improving epsilon cycle")


def _prune(tokens: dict[int, _Token], beam: float, max_active: int) -> dict[int, _Token]:
    if not tokens:
        return tokens
    best = min(tok.cost for tok in tokens.values())
    kept = {s: t for s, t in tokens.items() if t.cost <= best + beam}
    if len(kept) > max_active:
        ranked = sorted(kept.items(), key=lambda item: item[1].cost)
        kept = dict(ranked[:max_active])
    return kept


@dataclass
class DecodeResult:
    words: list[str]
    score: float
    path: list[TracedArc]
    final_weight: float


def decode_full(graph: Wfst, scorer: AcousticScorer,
                beam: float = math.inf,
                max_active: float = math.inf) -> DecodeResult:
    """Token-passing Viterbi search returning the full traced best path.

    The score of a result always equals the sum of its traced arc
    weights, the acoustic costs of its consuming arcs, and the final
    weight (replay self-consistency).
    """
    empty = DecodeResult([], math.inf, [], math.inf)
    if graph.start is None:
        log.warning("empty search graph; returning empty hypothesis")
        return empty
    max_active = int(max_active) if max_active != math.inf else math.inf

    tokens = _relax_epsilons(graph, {graph.start: _Token(0.0, None)})
    for t in range(scorer.num_frames):
        nxt: dict[int, _Token] = {}
        for state, tok in tokens.items():
            for arc in graph.arcs(state):
                if arc.ilabel == EPSILON:
                    continue
                cost = tok.cost + arc.weight + scorer.cost(t, arc.ilabel - 1)
                cur = nxt.get(arc.nextstate)
                if cur is None or cost < cur.cost:
                    trace = _Trace(TracedArc(arc.ilabel, arc.olabel,
                                             arc.weight, t), tok.trace)
                    nxt[arc.nextstate] = _Token(cost, trace)
        tokens = _relax_epsilons(graph, nxt)
        if max_active != math.inf or beam != math.inf:
            tokens = _prune(tokens, beam, max_active)
        if not tokens:
            log.warning("no active tokens at frame %d; empty hypothesis", t)
            return empty

    best_cost = math.inf
    best_trace: _Trace | None = None
    best_final = math.inf
    found = False
    for state, tok in tokens.items():
        final = graph.final_weight(state)
        if final == math.inf:
            continue
        cost = tok.cost + final
        if cost < best_cost:
            best_cost, best_trace, best_final, found = cost, tok.trace, final, True
    if not found:
        log.warning("no surviving token reached a final state; empty hypothesis")
        return empty
    path: list[TracedArc] = []
    node = best_trace
    while node is not None:
        path.append(node.arc)
        node = node.prev
    path.reverse()
    words = [graph.osyms.symbol_of(a.olabel) for a in path if a.olabel != EPSILON]
    return DecodeResult(words, best_cost, path, best_final)


def decode_utterance(graph: Wfst, scorer: AcousticScorer,
                     beam: float = math.inf,
                     max_active: float = math.inf) -> tuple[list[str], float]:
    """Best word sequence and its total cost over paths consuming exactly
    one graph input label per frame (epsilon arcs cost no frames).

    With infinite beam and max_active the result is the exact Viterbi
    path.  If no token survives to a final state, an empty hypothesis is
    returned with a warning.
    """
    result = decode_full(graph, scorer, beam, max_active)
    return result.words, result.score


# ---------------------------------------------------------------------
# Scoring
# ---------------------------------------------------------------------

@dataclass
class UtteranceAlignment:
    utterance_id: str
    ref_len: int
    substitutions: int
    insertions: int
    deletions: int

    @property
    def errors(self) -> int:
        return self.substitutions + self.insertions + self.deletions


@dataclass
class WerSummary:
    per_utterance: list[UtteranceAlignment]

    @property
    def total_ref_words(self) -> int:
        return sum(a.ref_len for a in self.per_utterance)

    @property
    def substitutions(self) -> int:
        return sum(a.substitutions for a in self.per_utterance)

    @property
    def insertions(self) -> int:
        return sum(a.insertions for a in self.per_utterance)

    @property
    def deletions(self) -> int:
        return sum(a.deletions for a in self.per_utterance)

    @property
    def total_errors(self) -> int:
        return self.substitutions + self.insertions + self.deletions

    @property
    def wer(self) -> float:
        if self.total_ref_words == 0:
            raise ValueError("WER is undefined with zero reference words")
        return self.total_errors / self.total_ref_words


def align(ref: Sequence[str], hyp: Sequence[str]) -> tuple[int, int, int]:
    """Levenshtein alignment counts (substitutions, insertions, deletions)."""
    rows, cols = len(ref) + 1, len(hyp) + 1
    dist = np.zeros((rows, cols), dtype=np.int64)
    dist[:, 0] = np.arange(rows)
    dist[0, :] = np.arange(cols)
    for i in range(1, rows):
        for j in range(1, cols):
            dist[i, j] = min(dist[i - 1, j] + 1,
                             dist[i, j - 1] + 1,
                             dist[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]))
    subs = ins = dels = 0
    i, j = len(ref), len(hyp)
    while i > 0 or j > 0:
        if i > 0 and j > 0 and dist[i, j] == dist[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            subs += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif j > 0 and dist[i, j] == dist[i, j - 1] + 1:
            ins += 1
            j -= 1
        else:
            dels += 1
            i -= 1
    return subs, ins, dels


def word_error_rate(hyps: Mapping[str, Sequence[str]],
                    refs: Mapping[str, Sequence[str]]) -> WerSummary:
    """Corpus WER: total edit distance over total reference words.

    A missing hypothesis counts as all deletions (with a warning); extra
    hypotheses without references are an error.
    """
    extra = set(hyps) - set(refs)
    if extra:
        raise ValueError(f"hypotheses without references: {sorted(extra)[:5]}")
    per_utt = []
    for utt in sorted(refs):
        ref = list(refs[utt])
        if utt not in hyps:
            log.warning("no hypothesis for %s; scoring as deletions", utt)
            per_utt.append(UtteranceAlignment(utt, len(ref), 0, 0, len(ref)))
            continue
        subs, ins, dels = align(ref, list(hyps[utt]))
        per_utt.append(UtteranceAlignment(utt, len(ref), subs, ins, dels))
    return WerSummary(per_utt)
