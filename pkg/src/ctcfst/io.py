"""Readers and writers for every on-disk format: feature archives, label
archives, speaker maps and stats, unit tables, lexicons, ARPA language
models, priors, FST text/binary files, transcripts and configs.

All text formats are UTF-8.  Floats are written with repr() so that every
write-read cycle is bitwise exact.
"""

from __future__ import annotations

import logging
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .ctc import LabelPriors, LabelSequence
from .features import FeatureMatrix, SpeakerStats
from .graphs import ArpaLm, GraphError, Lexicon, LexiconEntry, UnitTable
from .wfst import TROPICAL, Semiring, SymbolTable, Wfst, semiring_by_name

log = logging.getLogger(__name__)

FST_MAGIC = b"CTCFSTG1"
FST_VERSION = 1


class FormatError(ValueError):
    """Malformed input file; carries path and line number when known."""

    def __init__(self, path, lineno: int | None, message: str):
        location = f"{path}:{lineno}" if lineno is not None else str(path)
        super().__init__(f"{location}: {message}")
        self.path = path
        self.lineno = lineno


def _fmt(value: float) -> str:
    return repr(float(value))


def _lines(path) -> Iterable[tuple[int, str]]:
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            yield lineno, line.rstrip("\n")


# ---------------------------------------------------------------------
# Feature archives
# ---------------------------------------------------------------------

def write_feature_archive(feats: Sequence[FeatureMatrix], path) -> None:
    """Records: a header line "<utt> <T> <D>" then T lines of D floats."""
    with open(path, "w", encoding="utf-8") as fh:
        for feat in feats:
            fh.write(f"{feat.utterance_id} {feat.num_frames} {feat.dim}\n")
            for row in feat.frames:
                fh.write(" ".join(_fmt(v) for v in row) + "\n")


def _read_feature_records(path) -> list[FeatureMatrix]:
    feats = []
    rows: list[list[float]] = []
    header: tuple[str, int, int] | None = None
    header_line = 0

    def finish():
        nonlocal header, rows
        if header is None:
            return
        utt, t, d = header
        if len(rows) != t:
            raise FormatError(path, header_line,
                              f"utterance {utt}: expected {t} frames, got {len(rows)}")
        feats.append(FeatureMatrix(utt, np.array(rows, dtype=np.float64)))
        header, rows = None, []

    for lineno, line in _lines(path):
        parts = line.split()
        if not parts:
            continue
        if header is None or len(rows) == header[1]:
            finish()
            if len(parts) != 3:
                raise FormatError(path, lineno,
                                  "expected record header '<utt> <T> <D>'")
            try:
                header = (parts[0], int(parts[1]), int(parts[2]))
            except ValueError:
                raise FormatError(path, lineno, "header T and D must be integers")
            header_line = lineno
            if header[1] < 1 or header[2] < 1:
                raise FormatError(path, lineno, "T and D must be >= 1")
        else:
            if len(parts) != header[2]:
                raise FormatError(path, lineno,
                                  f"expected {header[2]} values, got {len(parts)}")
            try:
                rows.append([float(v) for v in parts])
            except ValueError:
                raise FormatError(path, lineno, "non-numeric feature value")
    finish()
    return feats


def read_feature_archive(path) -> list[FeatureMatrix]:
    """Read a single archive file, or every file inside a directory."""
    path = Path(path)
    if path.is_dir():
        feats = []
        for child in sorted(path.iterdir()):
            if child.is_file():
                feats.extend(_read_feature_records(child))
        return feats
    return _read_feature_records(path)


# ---------------------------------------------------------------------
# Speaker maps and stats
# ---------------------------------------------------------------------

def write_speaker_map(speaker_map: Mapping[str, str], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for utt in sorted(speaker_map):
            fh.write(f"{utt} {speaker_map[utt]}\n")


def read_speaker_map(path) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, line in _lines(path):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 2:
            raise FormatError(path, lineno, "expected '<utterance_id> <speaker_id>'")
        if parts[0] in out:
            raise FormatError(path, lineno, f"duplicate utterance {parts[0]}")
        out[parts[0]] = parts[1]
    return out


def write_speaker_stats(stats: Mapping[str, SpeakerStats], path) -> None:
    """One line per speaker: "<speaker> <D> <means...> <variances...>"."""
    with open(path, "w", encoding="utf-8") as fh:
        for spk in sorted(stats):
            s = stats[spk]
            values = [_fmt(v) for v in s.mean] + [_fmt(v) for v in s.variance]
            fh.write(f"{spk} {s.mean.shape[0]} " + " ".join(values) + "\n")


def read_speaker_stats(path) -> dict[str, SpeakerStats]:
    out: dict[str, SpeakerStats] = {}
    for lineno, line in _lines(path):
        parts = line.split()
        if not parts:
            continue
        try:
            dim = int(parts[1])
        except (IndexError, ValueError):
            raise FormatError(path, lineno, "expected '<speaker> <D> ...'")
        if len(parts) != 2 + 2 * dim:
            raise FormatError(path, lineno,
                              f"expected {2 * dim} values for dim {dim}")
        try:
            values = np.array([float(v) for v in parts[2:]])
        except ValueError:
            raise FormatError(path, lineno, "non-numeric statistics value")
        out[parts[0]] = SpeakerStats(parts[0], values[:dim], values[dim:])
    return out


# ---------------------------------------------------------------------
# Unit tables, labels, lexicons, transcripts
# ---------------------------------------------------------------------

def write_unit_table(units: UnitTable, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for i, sym in enumerate(units.units):
            fh.write(f"{sym} {i}\n")


def read_unit_table(path) -> UnitTable:
    entries = []
    for lineno, line in _lines(path):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 2:
            raise FormatError(path, lineno, "expected '<unit> <id>'")
        try:
            entries.append((parts[0], int(parts[1])))
        except ValueError:
            raise FormatError(path, lineno, "unit id must be an integer")
    entries.sort(key=lambda kv: kv[1])
    ids = [i for _, i in entries]
    if ids != list(range(len(entries))):
        raise FormatError(path, None, "unit ids must be contiguous from 0")
    try:
        return UnitTable([sym for sym, _ in entries])
    except GraphError as exc:
        raise FormatError(path, None, str(exc))


def write_label_archive(seqs: Sequence[LabelSequence], units: UnitTable, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for z in seqs:
            syms = " ".join(units.symbol_of(int(k)) for k in z.labels)
            fh.write(f"{z.utterance_id} {syms}\n")


def read_label_archive(path, units: UnitTable) -> list[LabelSequence]:
    out = []
    seen = set()
    for lineno, line in _lines(path):
        parts = line.split()
        if not parts:
            continue
        utt, syms = parts[0], parts[1:]
        if utt in seen:
            raise FormatError(path, lineno, f"duplicate utterance {utt}")
        seen.add(utt)
        if not syms:
            raise FormatError(path, lineno, f"utterance {utt} has no labels")
        try:
            labels = [units.id_of(sym) for sym in syms]
        except GraphError as exc:
            raise FormatError(path, lineno, str(exc))
        if 0 in labels:
            raise FormatError(path, lineno,
                              f"utterance {utt}: the blank cannot be a target label")
        out.append(LabelSequence(utt, np.array(labels)))
    return out


def write_lexicon(lex: Lexicon, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for entry in lex.entries:
            fh.write(f"{entry.word} " + " ".join(entry.units) + "\n")


def read_lexicon(path) -> Lexicon:
    entries = []
    for lineno, line in _lines(path):
        parts = line.split()
        if not parts:
            continue
        if len(parts) < 2:
            raise FormatError(path, lineno, "expected '<word> <unit> [<unit> ...]'")
        entries.append(LexiconEntry(parts[0], tuple(parts[1:])))
    if not entries:
        raise FormatError(path, None, "lexicon file is empty")
    return Lexicon(entries)


def write_transcripts(trans: Mapping[str, Sequence[str]], path) -> None:
    """Word sequences per utterance; also the hypothesis-file format."""
    with open(path, "w", encoding="utf-8") as fh:
        for utt in sorted(trans):
            fh.write(utt + ("" if not trans[utt] else " " + " ".join(trans[utt])) + "\n")


def read_transcripts(path) -> dict[str, list[str]]:
    out: dict[str, list[str]] = {}
    for lineno, line in _lines(path):
        parts = line.split()
        if not parts:
            continue
        if parts[0] in out:
            raise FormatError(path, lineno, f"duplicate utterance {parts[0]}")
        out[parts[0]] = parts[1:]
    return out


# ---------------------------------------------------------------------
# Priors
# ---------------------------------------------------------------------

def write_priors(priors: LabelPriors, units: UnitTable, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for i, sym in enumerate(units.units):
            fh.write(f"{sym} {_fmt(priors.log_prior[i])}\n")


def read_priors(path, units: UnitTable) -> LabelPriors:
    values = np.full(len(units), np.nan)
    for lineno, line in _lines(path):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 2:
            raise FormatError(path, lineno, "expected '<symbol> <log_prior>'")
        try:
            values[units.id_of(parts[0])] = float(parts[1])
        except GraphError as exc:
            raise FormatError(path, lineno, str(exc))
        except ValueError:
            raise FormatError(path, lineno, "log prior must be a float")
    if np.any(np.isnan(values)):
        missing = [units.symbol_of(i) for i in np.flatnonzero(np.isnan(values))]
        raise FormatError(path, None, f"missing priors for {missing}")
    return LabelPriors(values)


# ---------------------------------------------------------------------
# ARPA language models
# ---------------------------------------------------------------------

def parse_arpa(path) -> ArpaLm:
    """Standard \\data\\ ... \\N-grams: ... \\end\\ text format.

    Declared n-gram counts must match the parsed entries exactly.
    """
    declared: dict[int, int] = {}
    ngrams: dict[int, dict[tuple[str, ...], tuple[float, float | None]]] = {}
    section: int | None = None
    in_data = False
    saw_end = False
    for lineno, line in _lines(path):
        text = line.strip()
        if not text:
            continue
        if text == "\\data\\":
            in_data = True
            continue
        if text == "\\end\\":
            saw_end = True
            break
        if text.endswith("-grams:") and text.startswith("\\"):
            try:
                section = int(text[1:].split("-")[0])
            except ValueError:
                raise FormatError(path, lineno, f"bad section header {text!r}")
            ngrams.setdefault(section, {})
            continue
        if in_data and section is None:
            if not text.startswith("ngram "):
                raise FormatError(path, lineno,
                                  f"expected 'ngram N=count' in data section, got {text!r}")
            body = text[len("ngram "):]
            try:
                n, count = body.split("=")
                declared[int(n)] = int(count)
            except ValueError:
                raise FormatError(path, lineno, f"bad ngram count line {text!r}")
            continue
        if section is None:
            raise FormatError(path, lineno, "n-gram entry before any section header")
        parts = text.split()
        if len(parts) < section + 1 or len(parts) > section + 2:
            raise FormatError(path, lineno,
                              f"expected {section}-gram entry with probability "
                              f"and optional backoff, got {len(parts)} fields")
        try:
            prob = float(parts[0])
            backoff = float(parts[-1]) if len(parts) == section + 2 else None
        except ValueError:
            raise FormatError(path, lineno, "probabilities must be floats")
        gram = tuple(parts[1:section + 1])
        if gram in ngrams[section]:
            raise FormatError(path, lineno, f"duplicate {section}-gram {' '.join(gram)}")
        ngrams[section][gram] = (prob, backoff)
    if not saw_end:
        raise FormatError(path, None, "missing \\end\\ marker")
    if not in_data:
        raise FormatError(path, None, "missing \\data\\ header")
    for n, count in declared.items():
        actual = len(ngrams.get(n, {}))
        if actual != count:
            raise FormatError(path, None,
                              f"declared ngram {n}={count} but parsed {actual} entries")
    for n in ngrams:
        if n not in declared:
            raise FormatError(path, None, f"undeclared {n}-gram section")
    lm = ArpaLm(ngrams)
    try:
        lm.validate()
    except GraphError as exc:
        raise FormatError(path, None, str(exc))
    return lm


def write_arpa(lm: ArpaLm, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\\data\\\n")
        for n in sorted(lm.ngrams):
            fh.write(f"ngram {n}={len(lm.ngrams[n])}\n")
        for n in sorted(lm.ngrams):
            fh.write(f"\n\\{n}-grams:\n")
            for gram in sorted(lm.ngrams[n]):
                prob, backoff = lm.ngrams[n][gram]
                entry = f"{_fmt(prob)}\t{' '.join(gram)}"
                if backoff is not None:
                    entry += f"\t{_fmt(backoff)}"
                fh.write(entry + "\n")
        fh.write("\n\\end\\\n")


# ---------------------------------------------------------------------
# FSTs and symbol tables
# ---------------------------------------------------------------------

def write_symbols(table: SymbolTable, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for sym, i in table:
            fh.write(f"{sym} {i}\n")


def read_symbols(path) -> SymbolTable:
    entries = []
    for lineno, line in _lines(path):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 2:
            raise FormatError(path, lineno, "expected '<symbol> <id>'")
        entries.append((parts[0], int(parts[1])))
    entries.sort(key=lambda kv: kv[1])
    if [i for _, i in entries] != list(range(len(entries))):
        raise FormatError(path, None, "symbol ids must be contiguous from 0")
    if not entries or entries[0][0] != "<eps>":
        raise FormatError(path, None, "symbol id 0 must be <eps>")
    return SymbolTable(sym for sym, _ in entries[1:])


def write_fst_text(fst: Wfst, path) -> None:
    """Arc lines "<src> <dst> <isym> <osym> <weight>", then final lines
    "<state> <weight>".  The first line's first field is the start state."""
    with open(path, "w", encoding="utf-8") as fh:
        if fst.start is None:
            return
        order = [fst.start] + [q for q in fst.states() if q != fst.start]
        for q in order:
            for arc in fst.arcs(q):
                fh.write(f"{q} {arc.nextstate} {fst.isyms.symbol_of(arc.ilabel)} "
                         f"{fst.osyms.symbol_of(arc.olabel)} {_fmt(arc.weight)}\n")
        for q in sorted(fst.finals):
            fh.write(f"{q} {_fmt(fst.finals[q])}\n")


def read_fst_text(path, isyms: SymbolTable, osyms: SymbolTable,
                  semiring: Semiring | None = None) -> Wfst:
    fst = Wfst(semiring or TROPICAL, isyms, osyms)

    def ensure(state: int) -> int:
        while fst.num_states <= state:
            fst.add_state()
        return state

    start: int | None = None
    for lineno, line in _lines(path):
        parts = line.split()
        if not parts:
            continue
        if len(parts) == 5:
            try:
                src, dst = int(parts[0]), int(parts[1])
                weight = float(parts[4])
            except ValueError:
                raise FormatError(path, lineno, "bad arc line")
            ensure(max(src, dst))
            try:
                fst.add_arc(src, isyms.id_of(parts[2]), osyms.id_of(parts[3]),
                            weight, dst)
            except Exception as exc:
                raise FormatError(path, lineno, str(exc))
        elif len(parts) == 2:
            try:
                state, weight = int(parts[0]), float(parts[1])
            except ValueError:
                raise FormatError(path, lineno, "bad final line")
            ensure(state)
            fst.set_final(state, weight)
        else:
            raise FormatError(path, lineno,
                              "expected 5 fields (arc) or 2 fields (final)")
        if start is None:
            start = int(parts[0])
    if start is not None:
        fst.set_start(start)
    return fst


def write_fst_binary(fst: Wfst, path) -> None:
    """Versioned binary twin of the text format with the symbol tables
    embedded, so the file is self-contained."""
    with open(path, "wb") as fh:
        fh.write(FST_MAGIC)
        sem = {"tropical": 0, "log": 1}[fst.semiring.name]
        start = fst.start if fst.start is not None else -1
        fh.write(struct.pack("<IBqII", FST_VERSION, sem, start,
                             fst.num_states, len(fst.finals)))
        for state in sorted(fst.finals):
            fh.write(struct.pack("<Id", state, fst.finals[state]))
        for q in fst.states():
            arcs = fst.arcs(q)
            fh.write(struct.pack("<I", len(arcs)))
            for arc in arcs:
                fh.write(struct.pack("<IIdI", arc.ilabel, arc.olabel,
                                     arc.weight, arc.nextstate))
        for table in (fst.isyms, fst.osyms):
            syms = table.symbols()
            fh.write(struct.pack("<I", len(syms)))
            for sym in syms:
                raw = sym.encode("utf-8")
                fh.write(struct.pack("<I", len(raw)) + raw)


def read_fst_binary(path) -> Wfst:
    try:
        with open(path, "rb") as fh:
            if fh.read(len(FST_MAGIC)) != FST_MAGIC:
                raise FormatError(path, None, "not an FST binary file (bad magic)")
            version, sem, start, num_states, num_finals = struct.unpack(
                "<IBqII", fh.read(struct.calcsize("<IBqII")))
            if version != FST_VERSION:
                raise FormatError(path, None, f"unsupported FST version {version}")
            semiring = semiring_by_name("tropical" if sem == 0 else "log")
            finals = [struct.unpack("<Id", fh.read(12)) for _ in range(num_finals)]
            arcs_per_state = []
            for _ in range(num_states):
                (count,) = struct.unpack("<I", fh.read(4))
                arcs_per_state.append([struct.unpack("<IIdI", fh.read(20))
                                       for _ in range(count)])
            tables = []
            for _ in range(2):
                (count,) = struct.unpack("<I", fh.read(4))
                syms = []
                for _ in range(count):
                    (n,) = struct.unpack("<I", fh.read(4))
                    syms.append(fh.read(n).decode("utf-8"))
                if not syms or syms[0] != "<eps>":
                    raise FormatError(path, None, "embedded symbol table lacks <eps>")
                tables.append(SymbolTable(syms[1:]))
            if fh.read(1):
                raise FormatError(path, None, "trailing bytes after FST data")
    except (struct.error, UnicodeDecodeError) as exc:
        raise FormatError(path, None, f"truncated or corrupt FST file ({exc})")
    fst = Wfst(semiring, tables[0], tables[1])
    fst.add_states(num_states)
    for q, arcs in enumerate(arcs_per_state):
        for ilabel, olabel, weight, dst in arcs:
            fst.add_arc(q, ilabel, olabel, weight, dst)
    for state, weight in finals:
        fst.set_final(state, weight)
    if start >= 0:
        fst.set_start(start)
    return fst


# ---------------------------------------------------------------------
# Key-value config files
# ---------------------------------------------------------------------

def write_config(values: Mapping[str, str], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for key in values:
            fh.write(f"{key} {values[key]}\n")


def read_config(path) -> dict[str, str]:
    """Lines "key value"; '#' starts a comment."""
    out: dict[str, str] = {}
    for lineno, line in _lines(path):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        parts = text.split(None, 1)
        if len(parts) != 2:
            raise FormatError(path, lineno, "expected 'key value'")
        if parts[0] in out:
            raise FormatError(path, lineno, f"duplicate key {parts[0]}")
        out[parts[0]] = parts[1]
    return out


# ---------------------------------------------------------------------
# Corpus loading with referential integrity
# ---------------------------------------------------------------------

@dataclass
class Corpus:
    features: dict[str, FeatureMatrix]
    labels: dict[str, LabelSequence]
    speaker_map: dict[str, str]
    unit_table: UnitTable
    lexicon: Lexicon | None = None


def load_corpus(features_path, labels_path, unit_table_path,
                speaker_map_path=None, lexicon_path=None) -> Corpus:
    """Load and cross-validate a corpus; every dangling reference is
    collected and reported in one error."""
    units = read_unit_table(unit_table_path)
    feats = {f.utterance_id: f for f in read_feature_archive(features_path)}
    labels = {z.utterance_id: z for z in read_label_archive(labels_path, units)}
    problems = []
    for utt in sorted(labels):
        if utt not in feats:
            problems.append(f"utterance {utt} has labels but no features")
    if speaker_map_path is not None and os.path.getsize(speaker_map_path) > 0:
        speaker_map = read_speaker_map(speaker_map_path)
        for utt in sorted(feats):
            if utt not in speaker_map:
                problems.append(f"utterance {utt} missing from speaker map")
    else:
        log.warning("no speaker map; falling back to global CMVN over one pseudo-speaker")
        speaker_map = {utt: "global" for utt in feats}
    lexicon = read_lexicon(lexicon_path) if lexicon_path is not None else None
    if problems:
        raise FormatError(labels_path, None,
                          "corpus integrity errors:\n  " + "\n  ".join(problems))
    return Corpus(feats, labels, speaker_map, units, lexicon)
