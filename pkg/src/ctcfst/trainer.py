"""Training orchestration: length-sorted padded batching, SGD on the CTC
log-likelihood with elementwise gradient clipping, the newbob learning
rate schedule driven by validation label error rate, and checkpointing.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import ctc, nnet
from .ctc import LabelSequence, UnrealizableSequenceError
from .features import FeatureMatrix
from .io import Corpus, read_config, write_config
from .nnet import BlstmStack

log = logging.getLogger(__name__)

DEFAULT_LEARNING_RATE = 0.00004
DEFAULT_CLIP = 50.0
DEFAULT_BATCH_SIZE = 10
DEFAULT_VALIDATION_FRACTION = 0.05
# Full-scale architecture; toy recipes override these in their configs.
DEFAULT_LAYERS = 4
DEFAULT_CELLS = 320

MAX_SKIPPED_BATCH_FRACTION = 0.10


@dataclass
class Batch:
    utterance_ids: list[str]
    features: np.ndarray  # [B x Tmax x D], zero-padded
    lengths: np.ndarray
    labels: list[LabelSequence]

    def __len__(self) -> int:
        return len(self.utterance_ids)


@dataclass(frozen=True)
class NewbobState:
    """Learning-rate schedule state; transitions constant -> decaying -> stop.

    The rate holds until the validation LER drop falls below
    ``decay_start_threshold`` (absolute), then halves at each following
    epoch until the drop falls below ``stop_threshold``.
    """

    learning_rate: float = DEFAULT_LEARNING_RATE
    phase: str = "constant"
    prev_ler: float | None = None
    halving_factor: float = 0.5
    decay_start_threshold: float = 0.005
    stop_threshold: float = 0.001


def newbob_step(state: NewbobState, validation_ler: float) -> tuple[NewbobState, bool]:
    """Advance the schedule after an epoch's validation LER; returns
    (next state, stop flag)."""
    if validation_ler < 0.0:
        raise ValueError(f"LER cannot be negative, got {validation_ler}")
    if state.prev_ler is None:
        return replace(state, prev_ler=validation_ler), False
    drop = state.prev_ler - validation_ler
    if state.phase == "constant":
        phase = "decaying" if drop < state.decay_start_threshold else "constant"
        return replace(state, phase=phase, prev_ler=validation_ler), False
    if drop < state.stop_threshold:
        return replace(state, prev_ler=validation_ler), True
    return replace(state, learning_rate=state.learning_rate * state.halving_factor,
                   prev_ler=validation_ler), False


def make_batches(corpus: Corpus, batch_size: int) -> list[Batch]:
    """Group length-sorted labeled utterances into padded batches.

    Utterances whose targets cannot be realized in their frame count are
    dropped with a warning rather than failing the run.
    """
    if batch_size < 1:
        raise ValueError(f"batch size must be >= 1, got {batch_size}")
    usable: list[tuple[FeatureMatrix, LabelSequence]] = []
    for utt in sorted(corpus.labels):
        feat = corpus.features[utt]
        z = corpus.labels[utt]
        if feat.num_frames < ctc.min_frames(z):
            log.warning("dropping %s: %d labels need %d frames, have %d",
                        utt, len(z), ctc.min_frames(z), feat.num_frames)
            continue
        usable.append((feat, z))
    if not usable:
        raise ValueError("no trainable utterances (corpus empty or all unrealizable)")
    usable.sort(key=lambda pair: (pair[0].num_frames, pair[0].utterance_id))
    batches = []
    for i in range(0, len(usable), batch_size):
        group = usable[i:i + batch_size]
        t_max = max(f.num_frames for f, _ in group)
        dim = group[0][0].dim
        feats = np.zeros((len(group), t_max, dim))
        lengths = np.zeros(len(group), dtype=np.int64)
        for b, (f, _) in enumerate(group):
            feats[b, :f.num_frames] = f.frames
            lengths[b] = f.num_frames
        batches.append(Batch([f.utterance_id for f, _ in group], feats, lengths,
                             [z for _, z in group]))
    return batches


def clip_gradients(grads: BlstmStack, limit: float) -> None:
    """Elementwise clip of every gradient array to [-limit, limit]."""
    for _, arr in nnet.iter_arrays(grads):
        np.clip(arr, -limit, limit, out=arr)


def train_epoch(stack: BlstmStack, batches: Sequence[Batch], lr: float,
                clip: float = DEFAULT_CLIP) -> tuple[BlstmStack, float, float]:
    """One pass of gradient-ascent SGD on the CTC log-likelihood.

    Per batch: forward, CTC occupancies, backward, per-utterance gradient
    averaging, elementwise clipping, update.  Returns the updated stack,
    the corpus-level training LER from greedy collapsing, and the mean
    per-utterance log-likelihood.
    """
    if lr < 0.0 or clip <= 0.0:
        raise ValueError("learning rate must be >= 0 and clip > 0")
    stack = nnet.copy_stack(stack)
    total_loglik = 0.0
    utts_counted = 0
    edit_total = 0
    ref_total = 0
    skipped = 0
    for batch in batches:
        ok = True
        try:
            probs, caches = nnet.blstm_forward(stack, batch.features,
                                               batch.lengths)
        except FloatingPointError:
            ok = False
        errors = np.zeros_like(probs) if ok else None
        batch_loglik = 0.0
        if ok:
            for b, z in enumerate(batch.labels):
                y = probs[b, :batch.lengths[b]]
                try:
                    trellis = ctc.ctc_forward_backward(y, z)
                except UnrealizableSequenceError:
                    ok = False
                    break
                if not np.isfinite(trellis.log_likelihood):
                    ok = False
                    break
                gamma = ctc.occupancies(trellis, z, probs.shape[2])
                errors[b, :batch.lengths[b]] = gamma - y
                batch_loglik += trellis.log_likelihood
                hyp = ctc.greedy_collapse(y)
                edit_total += ctc.edit_distance(hyp.tolist(), z.labels.tolist())
                ref_total += len(z)
        if not ok:
            skipped += 1
            log.warning("skipping batch %s (unrealizable target or non-finite loss)",
                        batch.utterance_ids[:3])
            continue
        grads = nnet.blstm_backward(stack, caches, errors)
        scale = 1.0 / len(batch)
        for _, arr in nnet.iter_arrays(grads):
            arr *= scale
        clip_gradients(grads, clip)
        for (_, param), (_, grad) in zip(nnet.iter_arrays(stack),
                                         nnet.iter_arrays(grads)):
            param += lr * grad
        total_loglik += batch_loglik
        utts_counted += len(batch)
    if batches and skipped > MAX_SKIPPED_BATCH_FRACTION * len(batches):
        raise RuntimeError(
            f"{skipped} of {len(batches)} batches skipped; training is diverging")
    train_ler = edit_total / ref_total if ref_total else 0.0
    mean_loglik = total_loglik / utts_counted if utts_counted else float("-inf")
    return stack, train_ler, mean_loglik


def evaluate_ler(stack: BlstmStack,
                 pairs: Sequence[tuple[FeatureMatrix, LabelSequence]]) -> float:
    """Corpus-level greedy label error rate."""
    edit_total = 0
    ref_total = 0
    for feat, z in pairs:
        probs, _ = nnet.blstm_forward(stack, feat.frames)
        hyp = ctc.greedy_collapse(probs)
        edit_total += ctc.edit_distance(hyp.tolist(), z.labels.tolist())
        ref_total += len(z)
    if ref_total == 0:
        raise ValueError("cannot evaluate LER without reference labels")
    return edit_total / ref_total


# ---------------------------------------------------------------------
# Full training runs
# ---------------------------------------------------------------------

@dataclass
class RunConfig:
    features: Path
    labels: Path
    unit_table: Path
    out_dir: Path
    speaker_map: Path | None = None
    mode: str = "phoneme"
    layers: int = DEFAULT_LAYERS
    cells: int = DEFAULT_CELLS
    learning_rate: float = DEFAULT_LEARNING_RATE
    clip: float = DEFAULT_CLIP
    batch_size: int = DEFAULT_BATCH_SIZE
    validation_fraction: float = DEFAULT_VALIDATION_FRACTION
    max_epochs: int = 50
    seed: int = 0
    decay_start_threshold: float = 0.005
    stop_threshold: float = 0.001
    halving_factor: float = 0.5

    @classmethod
    def from_file(cls, path, out_dir=None) -> "RunConfig":
        raw = read_config(path)
        base = Path(path).parent
        kwargs = {}
        paths = {"features", "labels", "unit_table", "speaker_map", "out_dir"}
        ints = {"layers", "cells", "batch_size", "max_epochs", "seed"}
        floats = {"learning_rate", "clip", "validation_fraction",
                  "decay_start_threshold", "stop_threshold", "halving_factor"}
        for key, value in raw.items():
            if key in paths:
                kwargs[key] = base / value
            elif key in ints:
                kwargs[key] = int(value)
            elif key in floats:
                kwargs[key] = float(value)
            elif key == "mode":
                if value not in ("phoneme", "character"):
                    raise ValueError(f"mode must be phoneme or character, got {value!r}")
                kwargs[key] = value
            else:
                raise ValueError(f"unknown config key {key!r} in {path}")
        if out_dir is not None:
            kwargs["out_dir"] = Path(out_dir)
        missing = {"features", "labels", "unit_table", "out_dir"} - set(kwargs)
        if missing:
            raise ValueError(f"config {path} missing required keys: {sorted(missing)}")
        return cls(**kwargs)


@dataclass
class EpochReport:
    epoch: int
    learning_rate: float
    train_ler: float
    val_ler: float
    loglik: float

    def line(self) -> str:
        return (f"epoch {self.epoch} lr {self.learning_rate!r} "
                f"train_ler {self.train_ler!r} val_ler {self.val_ler!r} "
                f"loglik {self.loglik!r}")

    @classmethod
    def from_line(cls, line: str) -> "EpochReport":
        fields = line.split()
        keys = fields[0::2]
        if keys != ["epoch", "lr", "train_ler", "val_ler", "loglik"]:
            raise ValueError(f"malformed report line {line!r}")
        values = fields[1::2]
        return cls(int(values[0]), float(values[1]), float(values[2]),
                   float(values[3]), float(values[4]))


def read_training_report(path) -> list[EpochReport]:
    with open(path, "r", encoding="utf-8") as fh:
        return [EpochReport.from_line(line) for line in fh if line.strip()]


def split_validation(corpus: Corpus, fraction: float, seed: int
                     ) -> tuple[list[str], list[str]]:
    """Deterministic train/validation split over labeled utterances."""
    utts = sorted(corpus.labels)
    if len(utts) < 2:
        raise ValueError("need at least two labeled utterances to split")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(utts))
    n_val = max(1, int(round(fraction * len(utts))))
    val = sorted(utts[i] for i in perm[:n_val])
    train = sorted(set(utts) - set(val))
    return train, val


def _subset(corpus: Corpus, utts: Sequence[str]) -> Corpus:
    return Corpus({u: corpus.features[u] for u in utts},
                  {u: corpus.labels[u] for u in utts},
                  corpus.speaker_map, corpus.unit_table, corpus.lexicon)


def _state_sidecar(path, epoch: int, state: NewbobState, stopped: bool) -> None:
    write_config({
        "epoch": str(epoch),
        "learning_rate": repr(state.learning_rate),
        "phase": state.phase,
        "prev_ler": "none" if state.prev_ler is None else repr(state.prev_ler),
        "halving_factor": repr(state.halving_factor),
        "decay_start_threshold": repr(state.decay_start_threshold),
        "stop_threshold": repr(state.stop_threshold),
        "stopped": "true" if stopped else "false",
    }, path)


def _read_sidecar(path) -> tuple[int, NewbobState, bool]:
    raw = read_config(path)
    prev = None if raw["prev_ler"] == "none" else float(raw["prev_ler"])
    state = NewbobState(
        learning_rate=float(raw["learning_rate"]), phase=raw["phase"],
        prev_ler=prev, halving_factor=float(raw["halving_factor"]),
        decay_start_threshold=float(raw["decay_start_threshold"]),
        stop_threshold=float(raw["stop_threshold"]))
    return int(raw["epoch"]), state, raw.get("stopped", "false") == "true"


def run_training(config: RunConfig, corpus: Corpus, resume: bool = False
                 ) -> tuple[Path, list[EpochReport]]:
    """Train to the newbob stopping point, checkpointing every epoch.

    Deterministic given the seed: the split, batch order and update order
    are all fixed, so resuming from a checkpoint replays the exact
    trajectory of an uninterrupted run.
    """
    out_dir = Path(config.out_dir)
    ckpt_dir = out_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    train_utts, val_utts = split_validation(
        corpus, config.validation_fraction, config.seed)
    batches = make_batches(_subset(corpus, train_utts), config.batch_size)
    val_pairs = [(corpus.features[u], corpus.labels[u]) for u in val_utts]

    start_epoch = 1
    newbob = NewbobState(
        learning_rate=config.learning_rate,
        decay_start_threshold=config.decay_start_threshold,
        stop_threshold=config.stop_threshold,
        halving_factor=config.halving_factor)
    reports: list[EpochReport] = []
    if resume:
        existing = sorted(ckpt_dir.glob("epoch_*.state"))
        if existing:
            last = existing[-1]
            epoch, newbob, stopped = _read_sidecar(last)
            stack = nnet.load_model(last.with_suffix(".bin"))
            if stopped:
                log.info("schedule already stopped after epoch %d; nothing to do",
                         epoch)
                final_path = out_dir / "final.bin"
                nnet.save_model(stack, final_path)
                return final_path, []
            start_epoch = epoch + 1
            log.info("resuming after epoch %d", epoch)
        else:
            stack = nnet.init_params(
                next(iter(corpus.features.values())).dim,
                [config.cells] * config.layers,
                len(corpus.unit_table), config.seed)
    else:
        stack = nnet.init_params(
            next(iter(corpus.features.values())).dim,
            [config.cells] * config.layers,
            len(corpus.unit_table), config.seed)

    report_path = out_dir / "train_report.txt"
    mode = "a" if resume and start_epoch > 1 else "w"
    with open(report_path, mode, encoding="utf-8") as report_fh:
        for epoch in range(start_epoch, config.max_epochs + 1):
            stack, train_ler, loglik = train_epoch(
                stack, batches, newbob.learning_rate, config.clip)
            val_ler = evaluate_ler(stack, val_pairs)
            row = EpochReport(epoch, newbob.learning_rate, train_ler, val_ler, loglik)
            reports.append(row)
            report_fh.write(row.line() + "\n")
            report_fh.flush()
            log.info("%s", row.line())
            nnet.save_model(stack, ckpt_dir / f"epoch_{epoch:04d}.bin")
            newbob, stop = newbob_step(newbob, val_ler)
            _state_sidecar(ckpt_dir / f"epoch_{epoch:04d}.state", epoch, newbob,
                           stop)
            if stop:
                log.info("newbob schedule stopped after epoch %d", epoch)
                break
    final_path = out_dir / "final.bin"
    nnet.save_model(stack, final_path)
    return final_path, reports
