"""Decoding-graph construction: token, lexicon and grammar transducers,
and their fusion into the search graph compose(T, min(det(compose(L, G)))).

Symbol conventions
------------------
CTC label k maps to FST input label k+1 on the token machine's input tape
(<eps> occupies id 0, so <blank> sits at id 1).  Lexicon entries that
collide (homophones, or pronunciations that prefix other pronunciations)
get auxiliary "#n" symbols appended so that determinization of L o G
terminates; grammar backoff arcs consume the dedicated "#0" symbol for
the same reason.  All auxiliary symbols are replaced by epsilon after
determinization/minimization, before composing with the token machine.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

from . import wfst
from .wfst import EPSILON, SymbolTable, Wfst

BLANK_SYMBOL = "<blank>"
SPACE_SYMBOL = "<space>"
SENTENCE_BEGIN = "<s>"
SENTENCE_END = "</s>"
BACKOFF_SYMBOL = "#0"

# ARPA writes log10(p) = -99 for events that cannot occur (classically the
# <s> unigram); such entries contribute no arcs or final weights.
ARPA_SENTINEL = -98.99

LOG10 = math.log(10.0)

log = logging.getLogger(__name__)


class GraphError(Exception):
    pass


class UnitTable:
    """Ordered CTC label inventory; blank is always index 0."""

    def __init__(self, units: Sequence[str]):
        units = list(units)
        if not units or units[0] != BLANK_SYMBOL:
            raise GraphError(f"unit table must start with {BLANK_SYMBOL}")
        if len(set(units)) != len(units):
            raise GraphError("unit table contains duplicate symbols")
        self.units = units
        self._ids = {sym: i for i, sym in enumerate(units)}

    @classmethod
    def from_units(cls, non_blank_units: Iterable[str]) -> "UnitTable":
        return cls([BLANK_SYMBOL, *non_blank_units])

    def id_of(self, sym: str) -> int:
        try:
            return self._ids[sym]
        except KeyError:
            raise GraphError(f"unit {sym!r} not in unit table") from None

    def symbol_of(self, label: int) -> str:
        return self.units[label]

    def __contains__(self, sym: str) -> bool:
        return sym in self._ids

    def __len__(self) -> int:
        return len(self.units)

    @property
    def num_non_blank(self) -> int:
        return len(self.units) - 1


@dataclass
class LexiconEntry:
    word: str
    units: tuple[str, ...]
    prob: float = 1.0


@dataclass
class Lexicon:
    entries: list[LexiconEntry]

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[str, Sequence[str]]]) -> "Lexicon":
        return cls([LexiconEntry(word, tuple(units)) for word, units in pairs])

    def words(self) -> list[str]:
        seen = []
        have = set()
        for e in self.entries:
            if e.word not in have:
                have.add(e.word)
                seen.append(e.word)
        return seen


def first_pronunciations(lex: Lexicon) -> Lexicon:
    """Keep only the first pronunciation of every word (CTC training
    cannot disambiguate alternatives without alignments)."""
    kept: list[LexiconEntry] = []
    seen: set[str] = set()
    for entry in lex.entries:
        if entry.word in seen:
            continue
        seen.add(entry.word)
        kept.append(entry)
    return Lexicon(kept)


@dataclass
class ArpaLm:
    """Backoff n-gram tables: ngrams[n] maps a word tuple to
    (log10 probability, log10 backoff or None)."""

    ngrams: dict[int, dict[tuple[str, ...], tuple[float, float | None]]]

    @property
    def order(self) -> int:
        return max(self.ngrams) if self.ngrams else 0

    def vocabulary(self) -> list[str]:
        words = []
        seen = set()
        for gram in sorted(self.ngrams.get(1, {})):
            w = gram[0]
            if w not in (SENTENCE_BEGIN, SENTENCE_END) and w not in seen:
                seen.add(w)
                words.append(w)
        return words

    def validate(self) -> None:
        for n in sorted(self.ngrams):
            if n == 1:
                continue
            for gram in self.ngrams[n]:
                context = gram[:-1]
                if context not in self.ngrams.get(len(context), {}):
                    raise GraphError(
                        f"{n}-gram {' '.join(gram)} has no {len(context)}-gram "
                        f"backoff context {' '.join(context)}")


# ---------------------------------------------------------------------
# Symbol tables shared by the component machines
# ---------------------------------------------------------------------

@dataclass
class GraphSymbols:
    token_in: SymbolTable
    units_out: SymbolTable
    words: SymbolTable
    disambig_ids: set[int]

    def ctc_label_of(self, ilabel: int) -> int:
        # Token-machine input id k+1 carries CTC label k (<eps> shifts by one).
        return ilabel - 1


def make_graph_symbols(units: UnitTable, num_disambig: int,
                       words: Iterable[str]) -> GraphSymbols:
    token_in = SymbolTable(units.units)
    units_out = SymbolTable(units.units[1:])
    disambig_ids = set()
    for k in range(num_disambig + 1):
        disambig_ids.add(units_out.add_symbol(f"#{k}"))
    word_table = SymbolTable(sorted(set(words)))
    word_table.add_symbol(BACKOFF_SYMBOL)
    return GraphSymbols(token_in, units_out, word_table, disambig_ids)


def symbols_for(units: UnitTable, lex: Lexicon,
                lm: ArpaLm | None = None) -> GraphSymbols:
    """Shared symbol tables sized for the given lexicon and grammar."""
    _, max_disambig = add_disambiguation(lex)
    words = set(lex.words())
    if lm is not None:
        words |= set(lm.vocabulary())
    return make_graph_symbols(units, max_disambig, sorted(words))


# ---------------------------------------------------------------------
# Token machine
# ---------------------------------------------------------------------

def build_token_fst(units: UnitTable, symbols: GraphSymbols) -> Wfst:
    """Collapse frame-level label strings to unit strings.

    State 0 absorbs blanks; one state per unit absorbs its repetitions.
    Every state is final, and entering a unit state (from the blank state
    or from a different unit's state) emits the unit once.  The machine
    is input-deterministic, so each frame string maps to exactly the
    string its blanks/repetitions collapse to.
    """
    t = Wfst(wfst.TROPICAL, symbols.token_in, symbols.units_out)
    one = t.semiring.one
    blank_in = symbols.token_in.id_of(BLANK_SYMBOL)
    t.add_state()
    t.set_start(0)
    t.set_final(0)
    t.add_arc(0, blank_in, EPSILON, one, 0)
    unit_state = {}
    for k in range(1, len(units)):
        s = t.add_state()
        unit_state[k] = s
        t.set_final(s)
    for k, s in unit_state.items():
        sym = units.symbol_of(k)
        in_id = symbols.token_in.id_of(sym)
        out_id = symbols.units_out.id_of(sym)
        t.add_arc(0, in_id, out_id, one, s)
        t.add_arc(s, in_id, EPSILON, one, s)
        t.add_arc(s, blank_in, EPSILON, one, 0)
        for k2, s2 in unit_state.items():
            if k2 == k:
                continue
            sym2 = units.symbol_of(k2)
            t.add_arc(s, symbols.token_in.id_of(sym2),
                      symbols.units_out.id_of(sym2), one, s2)
    return t


# ---------------------------------------------------------------------
# Lexicon machines
# ---------------------------------------------------------------------

def add_disambiguation(lex: Lexicon) -> tuple[list[tuple[LexiconEntry, str | None]], int]:
    """Attach "#n" suffixes to colliding pronunciations.

    A pronunciation needs a suffix when several words share it, or when
    it is a proper prefix of another pronunciation; otherwise a unit
    stream could decompose into words in more than one way and
    determinization of L o G would not terminate.
    """
    by_pron: dict[tuple[str, ...], list[LexiconEntry]] = {}
    for entry in lex.entries:
        by_pron.setdefault(entry.units, []).append(entry)
    prefixes: set[tuple[str, ...]] = set()
    for pron in by_pron:
        for cut in range(1, len(pron)):
            prefixes.add(pron[:cut])
    max_disambig = 0
    result: list[tuple[LexiconEntry, str | None]] = []
    for entry in lex.entries:
        group = by_pron[entry.units]
        needs = len(group) > 1 or entry.units in prefixes
        if not needs:
            result.append((entry, None))
            continue
        index = group.index(entry) + 1
        max_disambig = max(max_disambig, index)
        result.append((entry, f"#{index}"))
    return result, max_disambig


def _lexicon_shell(symbols: GraphSymbols) -> Wfst:
    lx = Wfst(wfst.TROPICAL, symbols.units_out, symbols.words)
    start = lx.add_state()
    lx.set_start(start)
    lx.set_final(start)
    backoff_in = symbols.units_out.id_of(BACKOFF_SYMBOL)
    backoff_out = symbols.words.id_of(BACKOFF_SYMBOL)
    lx.add_arc(start, backoff_in, backoff_out, lx.semiring.one, start)
    return lx


def _entry_units(entry: LexiconEntry, disambig: str | None) -> list[str]:
    units = list(entry.units)
    if disambig is not None:
        units.append(disambig)
    return units


def build_lexicon_fst_phoneme(lex: Lexicon, symbols: GraphSymbols) -> Wfst:
    """Pronunciation-to-word machine, closed over word sequences.

    The word is emitted on the first unit's arc; remaining units emit
    epsilon and the last arc returns to the start state.
    """
    if not lex.entries:
        raise GraphError("lexicon is empty")
    entries, _ = add_disambiguation(lex)
    lx = _lexicon_shell(symbols)
    one = lx.semiring.one
    start = lx.start
    for entry, disambig in entries:
        units = _entry_units(entry, disambig)
        for sym in entry.units:
            if sym not in symbols.units_out:
                raise GraphError(f"word {entry.word!r} uses unknown unit {sym!r}")
        weight = -math.log(entry.prob) if entry.prob != 1.0 else one
        word_id = symbols.words.id_of(entry.word)
        src = start
        for i, sym in enumerate(units):
            dst = start if i == len(units) - 1 else lx.add_state()
            lx.add_arc(src, symbols.units_out.id_of(sym),
                       word_id if i == 0 else EPSILON,
                       weight if i == 0 else one, dst)
            src = dst
    return lx


def build_lexicon_fst_spelling(lex: Lexicon, symbols: GraphSymbols,
                               space_unit: str = SPACE_SYMBOL) -> Wfst:
    """Spelling-to-word machine where each word may optionally start and
    end with the space unit."""
    if not lex.entries:
        raise GraphError("lexicon is empty")
    if space_unit not in symbols.units_out:
        raise GraphError(f"space unit {space_unit!r} missing from unit table")
    entries, _ = add_disambiguation(lex)
    lx = _lexicon_shell(symbols)
    one = lx.semiring.one
    start = lx.start
    space_id = symbols.units_out.id_of(space_unit)
    for entry, disambig in entries:
        units = _entry_units(entry, disambig)
        for sym in entry.units:
            if sym not in symbols.units_out:
                raise GraphError(
                    f"word {entry.word!r} spelling uses unknown character {sym!r}")
        word_id = symbols.words.id_of(entry.word)
        for leading_space in (False, True):
            src = start
            if leading_space:
                src = lx.add_state()
                lx.add_arc(start, space_id, word_id, one, src)
            for i, sym in enumerate(units):
                dst = lx.add_state()
                olabel = word_id if (i == 0 and not leading_space) else EPSILON
                lx.add_arc(src, symbols.units_out.id_of(sym), olabel, one, dst)
                src = dst
            # End of word: return directly, or consume one trailing space.
            lx.add_arc(src, EPSILON, EPSILON, one, start)
            lx.add_arc(src, space_id, EPSILON, one, start)
    return lx


# ---------------------------------------------------------------------
# Grammar machine
# ---------------------------------------------------------------------

def _to_cost(log10_prob: float) -> float:
    return -LOG10 * log10_prob


def build_grammar_fst(lm: ArpaLm, symbols: GraphSymbols) -> Wfst:
    """Backoff n-gram acceptor over words.

    States are n-gram histories.  Word arcs carry -ln(10^log10p); backoff
    arcs consume the auxiliary "#0" symbol (emitting nothing) and carry
    the backoff cost, which keeps determinization of L o G well-founded.
    Sentence begin/end are structural: <s> is the start history and </s>
    becomes final weights.  Entries at the -99 sentinel are unreachable
    events and produce no arcs.
    """
    lm.validate()
    g = Wfst(wfst.TROPICAL, symbols.words, symbols.words)
    order = lm.order
    if order == 0:
        raise GraphError("language model has no n-gram entries")
    backoff_id = symbols.words.id_of(BACKOFF_SYMBOL)

    states: dict[tuple[str, ...], int] = {}

    def state_of(hist: tuple[str, ...]) -> int:
        if hist not in states:
            states[hist] = g.add_state()
        return states[hist]

    # Histories: the empty (unigram) context plus every lower-order gram.
    contexts = {()}
    for n in range(1, order):
        contexts.update(lm.ngrams.get(n, {}))
    for hist in contexts:
        state_of(hist)
    start_hist = (SENTENCE_BEGIN,) if (SENTENCE_BEGIN,) in states else ()
    g.set_start(state_of(start_hist))

    def destination(hist: tuple[str, ...], word: str) -> int:
        nxt = hist + (word,)
        while nxt and (len(nxt) >= order or nxt not in states):
            nxt = nxt[1:]
        return state_of(nxt)

    for n in sorted(lm.ngrams):
        for gram, (log10p, backoff) in lm.ngrams[n].items():
            hist, word = gram[:-1], gram[-1]
            src = state_of(hist)
            if word == SENTENCE_BEGIN:
                pass  # structural: never emitted
            elif word == SENTENCE_END:
                if log10p > ARPA_SENTINEL:
                    g.set_final(src, _to_cost(log10p))
            else:
                if log10p > ARPA_SENTINEL:
                    if word not in symbols.words:
                        raise GraphError(f"LM word {word!r} missing from word table")
                    wid = symbols.words.id_of(word)
                    g.add_arc(src, wid, wid, _to_cost(log10p), destination(hist, word))
    # Every nonempty context can fall back to its suffix context; a
    # missing backoff weight means log10(1) = 0 per the ARPA convention.
    for hist in states:
        if hist == ():
            continue
        entry = lm.ngrams.get(len(hist), {}).get(hist)
        backoff = entry[1] if entry is not None and entry[1] is not None else 0.0
        g.add_arc(state_of(hist), backoff_id, EPSILON,
                  _to_cost(backoff), state_of(hist[1:]))
    return wfst.connect(g)


def build_word_loop_grammar(words: Iterable[str], symbols: GraphSymbols) -> Wfst:
    """Unweighted any-word-sequence acceptor for lexicon-only decoding."""
    g = Wfst(wfst.TROPICAL, symbols.words, symbols.words)
    s = g.add_state()
    g.set_start(s)
    g.set_final(s)
    for word in words:
        wid = symbols.words.id_of(word)
        g.add_arc(s, wid, wid, g.semiring.one, s)
    return g


# ---------------------------------------------------------------------
# Search graph
# ---------------------------------------------------------------------

def remove_disambig(lg: Wfst, symbols: GraphSymbols) -> Wfst:
    return wfst.relabel_input_to_epsilon(lg, symbols.disambig_ids)


def compile_search_graph(token: Wfst, lexicon: Wfst, grammar: Wfst,
                         symbols: GraphSymbols,
                         determinize_budget: int | None = None) -> Wfst:
    """S = compose(T, min(det(compose(L, G)))), with the auxiliary
    symbols erased after det/min and before the token composition."""
    lg = wfst.compose(lexicon, grammar)
    lg = wfst.determinize(lg, max_states=determinize_budget)
    lg = wfst.minimize(lg)
    lg = remove_disambig(lg, symbols)
    s = wfst.compose(token, lg)
    return wfst.arc_sort(wfst.connect(s), "input")
