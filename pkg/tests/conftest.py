"""Shared test oracles: brute-force CTC path sums, path-relation
extraction, random machine generators, and an independent backoff LM
scorer.  These stay deliberately naive so they validate the optimized
implementations rather than mirroring them.
"""

from __future__ import annotations

import itertools
import math

import numpy as np

from ctcfst import wfst
from ctcfst.graphs import ArpaLm
from ctcfst.wfst import SymbolTable, Wfst


def collapse_path(path):
    """Merge consecutive repeats, then delete blanks (label 0)."""
    merged = []
    for p in path:
        if not merged or merged[-1] != p:
            merged.append(p)
    return [p for p in merged if p != 0]


def brute_force_ctc(y: np.ndarray, labels: list[int]) -> float:
    """Probability of the label sequence as an explicit sum over all
    (K+1)^T frame-level paths that collapse to it."""
    frames, width = y.shape
    total = 0.0
    for path in itertools.product(range(width), repeat=frames):
        if collapse_path(path) == list(labels):
            prob = 1.0
            for t, p in enumerate(path):
                prob *= y[t, p]
            total += prob
    return total


def rel_err(a: float, b: float, floor: float = 1e-6) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


# ---------------------------------------------------------------------
# WFST helpers
# ---------------------------------------------------------------------

def relation(fst: Wfst, max_len: int = 6) -> dict[tuple[str, str], float]:
    return {(i, o): w for i, o, w in wfst.enumerate_paths(fst, max_len)}


def relations_equal(r1, r2, tol: float = 1e-9) -> bool:
    if set(r1) != set(r2):
        return False
    return all(abs(r1[k] - r2[k]) <= tol for k in r1)


def random_acyclic_fst(rng: np.random.Generator, isyms: SymbolTable,
                       osyms: SymbolTable, n_states: int = 8,
                       acceptor: bool = False, eps_prob: float = 0.2,
                       semiring=wfst.TROPICAL) -> Wfst:
    """Random acyclic machine (arcs only move to higher state ids), so
    bounded path enumeration is a sound oracle."""
    f = Wfst(semiring, isyms, osyms)
    f.add_states(n_states)
    f.set_start(0)
    for q in range(n_states - 1):
        for _ in range(rng.integers(1, 4)):
            dst = int(rng.integers(q + 1, n_states))
            if acceptor:
                lab = 0 if rng.random() < eps_prob else int(
                    rng.integers(1, len(isyms)))
                il = ol = lab
            else:
                il = 0 if rng.random() < eps_prob else int(
                    rng.integers(1, len(isyms)))
                ol = 0 if rng.random() < eps_prob else int(
                    rng.integers(1, len(osyms)))
            w = float(np.round(rng.random() * 4.0, 3))
            f.add_arc(q, il, ol, w, dst)
        if rng.random() < 0.25:
            f.set_final(q, float(np.round(rng.random(), 3)))
    f.set_final(n_states - 1, 0.0)
    return f


def identity_acceptor(syms: SymbolTable, semiring=wfst.TROPICAL) -> Wfst:
    f = Wfst(semiring, syms, syms)
    s = f.add_state()
    f.set_start(s)
    f.set_final(s, semiring.one)
    for _, i in syms:
        if i != 0:
            f.add_arc(s, i, i, semiring.one, s)
    return f


# ---------------------------------------------------------------------
# Independent backoff LM scorer
# ---------------------------------------------------------------------

ARPA_SENTINEL = -98.99


def backoff_log10_prob(lm: ArpaLm, history: tuple[str, ...], word: str) -> float:
    """Standard recursive backoff lookup: explicit n-gram if present,
    otherwise the context's backoff weight (log10(1) when unlisted) plus
    the shorter-history estimate; -inf once no order remains."""
    gram = history + (word,)
    entry = lm.ngrams.get(len(gram), {}).get(gram)
    if entry is not None and entry[0] > ARPA_SENTINEL:
        return entry[0]
    if not history:
        return -math.inf
    ctx = lm.ngrams.get(len(history), {}).get(history)
    backoff = ctx[1] if ctx is not None and ctx[1] is not None else 0.0
    return backoff + backoff_log10_prob(lm, history[1:], word)


def arpa_sentence_cost(lm: ArpaLm, sentence: list[str]) -> float:
    """Negative natural log probability of <s> sentence </s> under the
    backoff recursion, with histories capped at order-1 words."""
    order = lm.order
    cost = 0.0
    history: tuple[str, ...] = ("<s>",)
    for word in [*sentence, "</s>"]:
        lp = backoff_log10_prob(lm, history, word)
        cost += -math.log(10.0) * lp
        history = (history + (word,))[-(order - 1):] if order > 1 else ()
    return cost
