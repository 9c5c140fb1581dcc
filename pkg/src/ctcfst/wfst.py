"""Semiring-parametric weighted finite-state transducers.

States are dense integer ids.  Arcs carry an input label, an output label
(symbol-table ids, 0 reserved for epsilon) and a semiring weight.  Machines
are built by mutation and treated as immutable afterwards: every algorithm
in this module returns a new Wfst and never touches its operands.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

EPSILON = 0

INFINITY = math.inf


class FstError(Exception):
    """Structural or algorithmic failure on a transducer."""


class DeterminizationError(FstError):
    """Determinization exceeded its state budget (likely missing twins)."""


class Semiring:
    """Abstract (plus, times) weight algebra over floats.

    ``zero`` annihilates paths, ``one`` is the neutral path weight and
    ``divide`` is the inverse of ``times`` used for residual weights.
    """

    name = "abstract"

    def plus(self, a: float, b: float) -> float:
        raise NotImplementedError

    def times(self, a: float, b: float) -> float:
        if a == INFINITY or b == INFINITY:
            return INFINITY
        return a + b

    def divide(self, a: float, b: float) -> float:
        if a == INFINITY:
            return INFINITY
        return a - b

    zero = INFINITY
    one = 0.0

    def approx_equal(self, a: float, b: float, tol: float) -> bool:
        if a == b:
            return True
        if math.isinf(a) or math.isinf(b):
            return False
        return abs(a - b) <= tol


class TropicalSemiring(Semiring):
    """(min, +) over reals with +inf as zero."""

    name = "tropical"

    def plus(self, a: float, b: float) -> float:
        return a if a <= b else b


class LogSemiring(Semiring):
    """(-log(e^-a + e^-b), +) over reals; exact path-sum bookkeeping."""

    name = "log"

    def plus(self, a: float, b: float) -> float:
        if a == INFINITY:
            return b
        if b == INFINITY:
            return a
        lo, hi = (a, b) if a <= b else (b, a)
        return lo - math.log1p(math.exp(lo - hi))


TROPICAL = TropicalSemiring()
LOG = LogSemiring()

_SEMIRINGS = {"tropical": TROPICAL, "log": LOG}


def semiring_by_name(name: str) -> Semiring:
    try:
        return _SEMIRINGS[name]
    except KeyError:
        raise FstError(f"unknown semiring {name!r}") from None


class SymbolTable:
    """Bidirectional symbol/id map with id 0 fixed to ``<eps>``."""

    def __init__(self, symbols: Iterable[str] = ()):
        self._symbols: list[str] = ["<eps>"]
        self._ids: dict[str, int] = {"<eps>": 0}
        for sym in symbols:
            self.add_symbol(sym)

    def add_symbol(self, sym: str) -> int:
        if not sym or any(ch.isspace() for ch in sym):
            raise FstError(f"symbol {sym!r} is empty or contains whitespace")
        if sym in self._ids:
            return self._ids[sym]
        self._ids[sym] = len(self._symbols)
        self._symbols.append(sym)
        return self._ids[sym]

    def id_of(self, sym: str) -> int:
        try:
            return self._ids[sym]
        except KeyError:
            raise FstError(f"symbol {sym!r} not in table") from None

    def symbol_of(self, label: int) -> str:
        try:
            return self._symbols[label]
        except IndexError:
            raise FstError(f"label id {label} not in table") from None

    def __contains__(self, sym: str) -> bool:
        return sym in self._ids

    def __len__(self) -> int:
        return len(self._symbols)

    def __iter__(self) -> Iterator[tuple[str, int]]:
        return iter(self._ids.items())

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SymbolTable):
            return NotImplemented
        return self._symbols == other._symbols

    def symbols(self) -> list[str]:
        return list(self._symbols)


@dataclass(frozen=True)
class Arc:
    ilabel: int
    olabel: int
    weight: float
    nextstate: int


class Wfst:
    def __init__(self, semiring: Semiring = TROPICAL,
                 isyms: SymbolTable | None = None,
                 osyms: SymbolTable | None = None):
        self.semiring = semiring
        self.isyms = isyms if isyms is not None else SymbolTable()
        self.osyms = osyms if osyms is not None else SymbolTable()
        self._arcs: list[list[Arc]] = []
        self.start: int | None = None
        self.finals: dict[int, float] = {}

    # -- construction -------------------------------------------------

    def add_state(self) -> int:
        self._arcs.append([])
        return len(self._arcs) - 1

    def add_states(self, n: int) -> None:
        for _ in range(n):
            self.add_state()

    def add_arc(self, src: int, ilabel: int, olabel: int, weight: float,
                nextstate: int) -> None:
        if not (0 <= src < len(self._arcs)) or not (0 <= nextstate < len(self._arcs)):
            raise FstError(f"arc {src}->{nextstate} references a missing state")
        self._arcs[src].append(Arc(ilabel, olabel, weight, nextstate))

    def set_start(self, state: int) -> None:
        if not 0 <= state < len(self._arcs):
            raise FstError(f"start state {state} does not exist")
        self.start = state

    def set_final(self, state: int, weight: float | None = None) -> None:
        if not 0 <= state < len(self._arcs):
            raise FstError(f"final state {state} does not exist")
        self.finals[state] = self.semiring.one if weight is None else weight

    # -- inspection ---------------------------------------------------

    @property
    def num_states(self) -> int:
        return len(self._arcs)

    @property
    def num_arcs(self) -> int:
        return sum(len(arcs) for arcs in self._arcs)

    def states(self) -> range:
        return range(len(self._arcs))

    def arcs(self, state: int) -> Sequence[Arc]:
        return self._arcs[state]

    def final_weight(self, state: int) -> float:
        return self.finals.get(state, self.semiring.zero)

    def is_empty(self) -> bool:
        return self.start is None or not self.finals

    def copy(self) -> "Wfst":
        out = Wfst(self.semiring, self.isyms, self.osyms)
        out._arcs = [list(arcs) for arcs in self._arcs]
        out.start = self.start
        out.finals = dict(self.finals)
        return out


def _empty_like(a: Wfst, isyms: SymbolTable | None = None,
                osyms: SymbolTable | None = None) -> Wfst:
    return Wfst(a.semiring,
                a.isyms if isyms is None else isyms,
                a.osyms if osyms is None else osyms)


# ---------------------------------------------------------------------
# Composition with the three-state epsilon filter
# ---------------------------------------------------------------------

def compose(a: Wfst, b: Wfst) -> Wfst:
    """Compose two transducers, matching a's output tape against b's input tape.

    Epsilon moves on either side are sequenced through the standard
    three-state filter so that no composite path is counted twice.
    """
    if a.semiring is not b.semiring:
        raise FstError("cannot compose machines over different semirings")
    if a.osyms != b.isyms:
        raise FstError("symbol-table mismatch: a's output table != b's input table")
    sr = a.semiring
    out = _empty_like(a, isyms=a.isyms, osyms=b.osyms)
    if a.start is None or b.start is None:
        return out

    b_by_ilabel: list[dict[int, list[Arc]]] = []
    for q in b.states():
        groups: dict[int, list[Arc]] = {}
        for arc in b.arcs(q):
            groups.setdefault(arc.ilabel, []).append(arc)
        b_by_ilabel.append(groups)

    state_of: dict[tuple[int, int, int], int] = {}

    def state_id(key: tuple[int, int, int]) -> int:
        if key not in state_of:
            state_of[key] = out.add_state()
            qa, qb, _ = key
            fa, fb = a.final_weight(qa), b.final_weight(qb)
            if fa != sr.zero and fb != sr.zero:
                existing = out.final_weight(state_of[key])
                out.set_final(state_of[key], sr.plus(existing, sr.times(fa, fb)))
        return state_of[key]

    start_key = (a.start, b.start, 0)
    out.set_start(state_id(start_key))
    queue = [start_key]
    seen = {start_key}
    while queue:
        key = queue.pop()
        qa, qb, flt = key
        src = state_id(key)

        def emit(ilabel: int, olabel: int, weight: float,
                 nkey: tuple[int, int, int]) -> None:
            dst = state_id(nkey)
            out.add_arc(src, ilabel, olabel, weight, dst)
            if nkey not in seen:
                seen.add(nkey)
                queue.append(nkey)

        for arc1 in a.arcs(qa):
            if arc1.olabel != EPSILON:
                for arc2 in b_by_ilabel[qb].get(arc1.olabel, ()):
                    emit(arc1.ilabel, arc2.olabel,
                         sr.times(arc1.weight, arc2.weight),
                         (arc1.nextstate, arc2.nextstate, 0))
            else:
                # a moves alone: forbidden right after b moved alone.
                if flt != 2:
                    emit(arc1.ilabel, EPSILON, arc1.weight,
                         (arc1.nextstate, qb, 1))
                # both sides take epsilon arcs together: only from filter 0.
                if flt == 0:
                    for arc2 in b_by_ilabel[qb].get(EPSILON, ()):
                        emit(arc1.ilabel, arc2.olabel,
                             sr.times(arc1.weight, arc2.weight),
                             (arc1.nextstate, arc2.nextstate, 0))
        # b moves alone: forbidden right after a moved alone.
        if flt != 1:
            for arc2 in b_by_ilabel[qb].get(EPSILON, ()):
                emit(EPSILON, arc2.olabel, arc2.weight, (qa, arc2.nextstate, 2))
    return connect(out)


# ---------------------------------------------------------------------
# Connection, sorting, relabeling
# ---------------------------------------------------------------------

def connect(a: Wfst) -> Wfst:
    """Drop states that do not lie on some start-to-final path."""
    out = _empty_like(a)
    if a.start is None:
        return out
    forward = {a.start}
    stack = [a.start]
    while stack:
        q = stack.pop()
        for arc in a.arcs(q):
            if arc.nextstate not in forward:
                forward.add(arc.nextstate)
                stack.append(arc.nextstate)
    rev: list[list[int]] = [[] for _ in a.states()]
    for q in a.states():
        for arc in a.arcs(q):
            rev[arc.nextstate].append(q)
    backward = set(a.finals)
    stack = list(a.finals)
    while stack:
        q = stack.pop()
        for p in rev[q]:
            if p not in backward:
                backward.add(p)
                stack.append(p)
    keep = forward & backward
    if a.start not in keep:
        return out
    remap = {}
    for q in sorted(keep):
        remap[q] = out.add_state()
    out.set_start(remap[a.start])
    for q in sorted(keep):
        for arc in a.arcs(q):
            if arc.nextstate in keep:
                out.add_arc(remap[q], arc.ilabel, arc.olabel, arc.weight,
                            remap[arc.nextstate])
        if q in a.finals:
            out.set_final(remap[q], a.finals[q])
    return out


def arc_sort(a: Wfst, side: str = "input") -> Wfst:
    """Return a copy with each state's arcs sorted by the requested label."""
    if side not in ("input", "output"):
        raise FstError(f"arc_sort side must be 'input' or 'output', got {side!r}")
    out = a.copy()
    if side == "input":
        key = lambda arc: (arc.ilabel, arc.olabel, arc.weight, arc.nextstate)
    else:
        key = lambda arc: (arc.olabel, arc.ilabel, arc.weight, arc.nextstate)
    out._arcs = [sorted(arcs, key=key) for arcs in out._arcs]
    return out


def relabel_input_to_epsilon(a: Wfst, labels: Iterable[int]) -> Wfst:
    """Replace the given input labels by epsilon on every arc."""
    drop = set(labels)
    out = a.copy()
    out._arcs = [
        [Arc(EPSILON, arc.olabel, arc.weight, arc.nextstate)
         if arc.ilabel in drop else arc
         for arc in arcs]
        for arcs in out._arcs
    ]
    return out


def remove_weights(a: Wfst) -> Wfst:
    """Set every arc and final weight to the semiring one (topology only)."""
    out = a.copy()
    one = a.semiring.one
    out._arcs = [[Arc(arc.ilabel, arc.olabel, one, arc.nextstate)
                  for arc in arcs] for arcs in out._arcs]
    out.finals = {q: one for q in out.finals}
    return out


# ---------------------------------------------------------------------
# Shortest distance (used by weight pushing)
# ---------------------------------------------------------------------

def shortest_distance_to_final(a: Wfst, tol: float = 1e-12,
                               max_sweeps: int = 10000) -> list[float]:
    """Per-state plus-aggregate of all path weights to a final state.

    Exact for the tropical semiring; for the log semiring on cyclic
    machines the queue relaxation converges geometrically and stops once
    updates fall below ``tol``.
    """
    sr = a.semiring
    d = [sr.zero] * a.num_states
    r = [sr.zero] * a.num_states
    rev: list[list[tuple[int, float]]] = [[] for _ in a.states()]
    for q in a.states():
        for arc in a.arcs(q):
            rev[arc.nextstate].append((q, arc.weight))
    queue: list[int] = []
    queued = [False] * a.num_states
    for q, w in a.finals.items():
        d[q] = sr.plus(d[q], w)
        r[q] = sr.plus(r[q], w)
        if not queued[q]:
            queued[q] = True
            queue.append(q)
    sweeps = 0
    while queue:
        sweeps += 1
        if sweeps > max_sweeps * max(1, a.num_states):
            raise FstError("shortest-distance relaxation failed to converge")
        q = queue.pop(0)
        queued[q] = False
        rq, r[q] = r[q], sr.zero
        for p, w in rev[q]:
            delta = sr.times(w, rq)
            new = sr.plus(d[p], delta)
            if not sr.approx_equal(new, d[p], tol):
                d[p] = new
                r[p] = sr.plus(r[p], delta)
                if not queued[p]:
                    queued[p] = True
                    queue.append(p)
    return d


# ---------------------------------------------------------------------
# Determinization
# ---------------------------------------------------------------------

def _epsilon_closure(a: Wfst, entries: dict[tuple[int, tuple[int, ...]], float]
                     ) -> dict[tuple[int, tuple[int, ...]], float]:
    """Extend subset entries across input-epsilon arcs, summing path weights.

    Entries are keyed by (state, pending output string).  The epsilon
    subgraph must be acyclic on states; a cycle makes the closure (and
    determinization) ill-defined and raises.
    """
    sr = a.semiring
    # Discover (state, pending) nodes reachable over input-epsilon arcs.
    discovered = set(entries)
    frontier = list(entries)
    while frontier:
        state, pending = frontier.pop()
        for arc in a.arcs(state):
            if arc.ilabel != EPSILON:
                continue
            nxt = (arc.nextstate,
                   pending + ((arc.olabel,) if arc.olabel != EPSILON else ()))
            if nxt not in discovered:
                discovered.add(nxt)
                frontier.append(nxt)
            if len(discovered) > 4 * (a.num_states + 1) * (a.num_states + len(entries) + 1):
                raise FstError(
                    "input-epsilon closure blew up (epsilon cycle or unbounded output delay)")
    # Topological order over the epsilon DAG of discovered nodes.
    succ: dict[tuple[int, tuple[int, ...]], list[tuple[tuple[int, tuple[int, ...]], float]]] = {}
    indeg = {node: 0 for node in discovered}
    for node in discovered:
        state, pending = node
        for arc in a.arcs(state):
            if arc.ilabel != EPSILON:
                continue
            nxt = (arc.nextstate,
                   pending + ((arc.olabel,) if arc.olabel != EPSILON else ()))
            succ.setdefault(node, []).append((nxt, arc.weight))
            indeg[nxt] += 1
    ready = [node for node, deg in indeg.items() if deg == 0]
    processed = 0
    values = {node: entries.get(node, sr.zero) for node in discovered}
    while ready:
        node = ready.pop()
        processed += 1
        for nxt, w in succ.get(node, ()):
            values[nxt] = sr.plus(values[nxt], sr.times(values[node], w))
            indeg[nxt] -= 1
            if indeg[nxt] == 0:
                ready.append(nxt)
    if processed != len(discovered):
        raise FstError("input-epsilon cycle detected during determinization")
    return {node: w for node, w in values.items() if w != sr.zero}


def _common_prefix(strings: Iterable[tuple[int, ...]]) -> tuple[int, ...]:
    it = iter(strings)
    prefix = next(it)
    for s in it:
        limit = min(len(prefix), len(s))
        i = 0
        while i < limit and prefix[i] == s[i]:
            i += 1
        prefix = prefix[:i]
        if not prefix:
            break
    return prefix


def determinize(a: Wfst, max_states: int | None = None) -> Wfst:
    """Weighted subset determinization with residual weights and outputs.

    The result has at most one arc per (state, input label); pending
    output strings longer than one symbol are expanded into chains of
    input-epsilon arcs.  Inputs must be determinizable (e.g. acyclic, or
    functional with the twins property); otherwise the subset budget is
    exhausted and a DeterminizationError raised.
    """
    sr = a.semiring
    out = _empty_like(a)
    if a.start is None or a.is_empty():
        return out
    budget = max_states if max_states is not None else max(100 * a.num_states, 100)

    subset_ids: dict[frozenset, int] = {}
    queue: list[tuple[frozenset, dict]] = []

    def intern(entries: dict[tuple[int, tuple[int, ...]], float]) -> int:
        key = frozenset((state, pending, w) for (state, pending), w in entries.items())
        if key in subset_ids:
            return subset_ids[key]
        if len(subset_ids) >= budget:
            raise DeterminizationError(
                f"determinization exceeded {budget} subset states "
                f"(input had {a.num_states}); input likely lacks the twins property")
        subset_ids[key] = out.add_state()
        queue.append((key, entries))
        return subset_ids[key]

    def emit_chain(src: int, ilabel: int, weight: float,
                   string: tuple[int, ...], dst: int) -> None:
        labels = string if string else (EPSILON,)
        cur = src
        for i, olab in enumerate(labels):
            last = i == len(labels) - 1
            nxt = dst if last else out.add_state()
            out.add_arc(cur, ilabel if i == 0 else EPSILON, olab,
                        weight if i == 0 else sr.one, nxt)
            cur = nxt

    start_entries = _epsilon_closure(a, {(a.start, ()): sr.one})
    out.set_start(intern(start_entries))

    while queue:
        _, entries = queue.pop()
        src = intern(entries)

        # Final treatment: empty pending strings become final weights,
        # nonempty ones are flushed over epsilon-input chains.
        flush: dict[tuple[int, ...], float] = {}
        for (state, pending), v in entries.items():
            f = a.final_weight(state)
            if f == sr.zero:
                continue
            flush[pending] = sr.plus(flush.get(pending, sr.zero), sr.times(v, f))
        for pending, w in sorted(flush.items()):
            if not pending:
                out.set_final(src, w)
            else:
                sink = out.add_state()
                out.set_final(sink, sr.one)
                emit_chain(src, EPSILON, w, pending, sink)

        by_label: dict[int, dict[tuple[int, tuple[int, ...]], float]] = {}
        for (state, pending), v in entries.items():
            for arc in a.arcs(state):
                if arc.ilabel == EPSILON:
                    continue
                string = pending + ((arc.olabel,) if arc.olabel != EPSILON else ())
                group = by_label.setdefault(arc.ilabel, {})
                node = (arc.nextstate, string)
                group[node] = sr.plus(group.get(node, sr.zero),
                                      sr.times(v, arc.weight))
        for ilabel in sorted(by_label):
            cand = _epsilon_closure(a, by_label[ilabel])
            if not cand:
                continue
            lam = sr.zero
            for w in cand.values():
                lam = sr.plus(lam, w)
            mu = _common_prefix(pending for (_, pending) in cand)
            shifted = {(state, pending[len(mu):]): sr.divide(w, lam)
                       for (state, pending), w in cand.items()}
            dst = intern(shifted)
            emit_chain(src, ilabel, lam, mu, dst)
    return connect(out)


# ---------------------------------------------------------------------
# Minimization
# ---------------------------------------------------------------------

def _check_deterministic(a: Wfst) -> None:
    for q in a.states():
        seen: set[int] = set()
        for arc in a.arcs(q):
            if arc.ilabel in seen:
                raise FstError(
                    f"state {q} has two arcs with input label {arc.ilabel}; "
                    "minimize requires a deterministic machine")
            seen.add(arc.ilabel)


def minimize(a: Wfst) -> Wfst:
    """Merge states of a deterministic machine without changing its relation.

    Weights are pushed toward the initial state first, then states are
    merged by partition refinement over (ilabel, olabel, weight, class)
    arc signatures.
    """
    _check_deterministic(a)
    a = connect(a)
    out = _empty_like(a)
    if a.start is None:
        return out
    sr = a.semiring

    # Push weights: potentials are shortest distances to a final state,
    # shifted so the start potential is the semiring one (keeps the total
    # path weight unchanged without an initial-weight field).
    dist = shortest_distance_to_final(a)
    shift = dist[a.start]
    pot = [sr.divide(d, shift) for d in dist]
    arcs_pushed: list[list[Arc]] = []
    for q in a.states():
        pushed = []
        for arc in a.arcs(q):
            w = sr.divide(sr.times(arc.weight, pot[arc.nextstate]), pot[q])
            pushed.append(Arc(arc.ilabel, arc.olabel, w, arc.nextstate))
        arcs_pushed.append(pushed)
    finals_pushed = {q: sr.divide(w, pot[q]) for q, w in a.finals.items()}

    # Moore partition refinement.
    cls = [0] * a.num_states
    blocks: dict[tuple, int] = {}
    for q in a.states():
        key = (finals_pushed.get(q),)
        cls[q] = blocks.setdefault(key, len(blocks))
    while True:
        blocks = {}
        new_cls = [0] * a.num_states
        for q in a.states():
            sig = tuple(sorted(
                (arc.ilabel, arc.olabel, arc.weight, cls[arc.nextstate])
                for arc in arcs_pushed[q]))
            key = (finals_pushed.get(q), cls[q], sig)
            new_cls[q] = blocks.setdefault(key, len(blocks))
        if new_cls == cls:
            break
        cls = new_cls

    n_classes = len(set(cls))
    out.add_states(n_classes)
    out.set_start(cls[a.start])
    done = set()
    for q in a.states():
        c = cls[q]
        if c in done:
            continue
        done.add(c)
        for arc in arcs_pushed[q]:
            out.add_arc(c, arc.ilabel, arc.olabel, arc.weight, cls[arc.nextstate])
        if q in finals_pushed:
            out.set_final(c, finals_pushed[q])
    return out


# ---------------------------------------------------------------------
# Path enumeration (oracle support)
# ---------------------------------------------------------------------

def enumerate_paths(a: Wfst, max_len: int) -> list[tuple[str, str, float]]:
    """All accepting (input, output, weight) triples with at most ``max_len``
    consumed input symbols, plus-aggregated per (input, output) pair.

    Within a stretch of input-epsilon arcs a state may not repeat, which
    prunes epsilon cycles: exact in the tropical semiring whenever such
    cycles have nonnegative weight.
    """
    if max_len > 12:
        raise FstError("enumerate_paths is an oracle; max_len is capped at 12")
    sr = a.semiring
    results: dict[tuple[tuple[int, ...], tuple[int, ...]], float] = {}
    if a.start is None:
        return []
    stack: list[tuple[int, tuple[int, ...], tuple[int, ...], float, frozenset]] = [
        (a.start, (), (), sr.one, frozenset([a.start]))]
    while stack:
        state, ins, outs, w, stretch = stack.pop()
        f = a.final_weight(state)
        if f != sr.zero:
            key = (ins, outs)
            results[key] = sr.plus(results.get(key, sr.zero), sr.times(w, f))
        for arc in a.arcs(state):
            nw = sr.times(w, arc.weight)
            nouts = outs + ((arc.olabel,) if arc.olabel != EPSILON else ())
            if arc.ilabel == EPSILON:
                if arc.nextstate in stretch:
                    continue
                stack.append((arc.nextstate, ins, nouts, nw,
                              stretch | {arc.nextstate}))
            else:
                if len(ins) == max_len:
                    continue
                stack.append((arc.nextstate, ins + (arc.ilabel,), nouts, nw,
                              frozenset([arc.nextstate])))
    rendered = [
        (" ".join(a.isyms.symbol_of(i) for i in ins),
         " ".join(a.osyms.symbol_of(o) for o in outs),
         w)
        for (ins, outs), w in results.items()
    ]
    rendered.sort(key=lambda item: (item[0], item[1]))
    return rendered
