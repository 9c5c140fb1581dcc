"""Synthetic desk-scale corpora for the bundled recipes.

Sentences come from a fixed Markov process over a five-word vocabulary;
each unit is rendered as a few frames of a distinct feature pattern plus
per-speaker offsets and Gaussian noise, so per-speaker CMVN and the
acoustic model both have real work to do.  Everything is deterministic
for a given seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import io as cio
from .ctc import LabelSequence
from .features import FeatureMatrix
from .graphs import ArpaLm, Lexicon, LexiconEntry, UnitTable, SPACE_SYMBOL

PHONEME_WORDS: list[tuple[str, tuple[str, ...]]] = [
    ("bo", ("bb", "oo")),
    ("bona", ("bb", "oo", "nn", "aa")),
    ("ket", ("kk", "ee", "tt")),
    ("kise", ("kk", "ii", "ss", "ee")),
    ("tomi", ("tt", "oo", "mm", "ii")),
]

CHARACTER_WORDS = ["be", "bet", "not", "or", "to"]

NUM_SPEAKERS = 5


def _phoneme_inventory() -> list[str]:
    units = sorted({u for _, pron in PHONEME_WORDS for u in pron})
    return units


def _character_inventory() -> list[str]:
    letters = sorted({ch for w in CHARACTER_WORDS for ch in w})
    return letters + [SPACE_SYMBOL]


def _sentence_model(words: list[str]) -> tuple[np.ndarray, np.ndarray, float]:
    n = len(words)
    start = np.full(n, 0.5 / (n - 1))
    start[0] = 0.5
    trans = np.full((n, n), 0.4 / (n - 1))
    for i in range(n):
        trans[i, (i + 1) % n] = 0.6
    stop_prob = 0.35
    return start, trans, stop_prob


def _sample_sentences(words: list[str], count: int, rng: np.random.Generator,
                      max_words: int = 4) -> list[list[str]]:
    start, trans, stop = _sentence_model(words)
    sentences = []
    for _ in range(count):
        idx = rng.choice(len(words), p=start)
        sent = [words[idx]]
        while len(sent) < max_words and rng.random() > stop:
            idx = rng.choice(len(words), p=trans[idx])
            sent.append(words[idx])
        sentences.append(sent)
    return sentences


def estimate_bigram(sentences: list[list[str]], vocabulary: list[str],
                    discount: float = 0.4) -> ArpaLm:
    """Absolute-discounting backoff bigram over the given sentences.

    Unigram and bigram probabilities are exact relative frequencies with
    the discounted mass redistributed through the backoff weights, so the
    model is a proper distribution.
    """
    uni: dict[str, int] = {}
    bi: dict[tuple[str, str], int] = {}
    ctx: dict[str, int] = {}
    for sent in sentences:
        tokens = ["<s>", *sent, "</s>"]
        for w in tokens[1:]:
            uni[w] = uni.get(w, 0) + 1
        for v, w in zip(tokens, tokens[1:]):
            bi[(v, w)] = bi.get((v, w), 0) + 1
            ctx[v] = ctx.get(v, 0) + 1
    total = sum(uni.values())
    # Smooth unigrams a little so unseen vocabulary words stay decodable.
    vocab = sorted(set(vocabulary) | set(uni) | {"</s>"})
    k = 0.5
    uni_p = {w: (uni.get(w, 0) + k) / (total + k * len(vocab)) for w in vocab}

    unigrams: dict[tuple[str, ...], tuple[float, float | None]] = {}
    bigrams: dict[tuple[str, ...], tuple[float, float | None]] = {}
    contexts = sorted(ctx)
    for w in vocab:
        unigrams[(w,)] = (math.log10(uni_p[w]), None)
    unigrams[("<s>",)] = (-99.0, None)

    for v in contexts:
        seen = {w: c for (vv, w), c in bi.items() if vv == v}
        unseen_uni = 1.0 - sum(uni_p[w] for w in seen)
        key = (v,)
        prob, _ = unigrams[key]
        if unseen_uni > 1e-9:
            alpha = discount * len(seen) / ctx[v] / unseen_uni
            unigrams[key] = (prob, math.log10(alpha))
            d = discount
        else:
            # every event observed after v: keep the ML estimates intact
            d = 0.0
        for w, c in seen.items():
            bigrams[(v, w)] = (math.log10((c - d) / ctx[v]), None)
    return ArpaLm({1: unigrams, 2: bigrams})


@dataclass
class ToyRecipe:
    mode: str
    units: UnitTable
    lexicon: Lexicon
    pattern_scale: float = 4.0
    speaker_offset_scale: float = 0.6
    noise_scale: float = 0.10
    test_noise_scale: float = 0.35
    frames_per_unit: tuple[int, int] = (2, 3)
    max_words: int = 3


def make_recipe(mode: str) -> ToyRecipe:
    if mode == "phoneme":
        units = UnitTable.from_units(_phoneme_inventory())
        lexicon = Lexicon([LexiconEntry(w, pron) for w, pron in PHONEME_WORDS])
    elif mode == "character":
        units = UnitTable.from_units(_character_inventory())
        lexicon = Lexicon([LexiconEntry(w, tuple(w)) for w in CHARACTER_WORDS])
    else:
        raise ValueError(f"mode must be 'phoneme' or 'character', got {mode!r}")
    return ToyRecipe(mode, units, lexicon)


def transcript_labels(recipe: ToyRecipe, sentence: list[str]) -> list[str]:
    """Unit labeling of a word sequence; the character mode inserts the
    space unit between every pair of words."""
    pron = {e.word: e.units for e in recipe.lexicon.entries}
    units: list[str] = []
    for i, word in enumerate(sentence):
        if recipe.mode == "character" and i > 0:
            units.append(SPACE_SYMBOL)
        units.extend(pron[word])
    return units


def _render_features(recipe: ToyRecipe, labels: list[int],
                     speaker_offset: np.ndarray, noise_scale: float,
                     rng: np.random.Generator) -> np.ndarray:
    dim = recipe.units.num_non_blank
    lo, hi = recipe.frames_per_unit
    rows = []
    for label in labels:
        pattern = np.zeros(dim)
        pattern[label - 1] = recipe.pattern_scale
        for _ in range(rng.integers(lo, hi + 1)):
            rows.append(pattern + speaker_offset
                        + rng.normal(0.0, noise_scale, dim))
    return np.array(rows)


def generate(out_dir, mode: str = "phoneme", num_train: int = 50,
             num_test: int = 10, seed: int = 17) -> dict[str, Path]:
    """Write units, lexicon, bigram LM, raw features, labels, speaker maps,
    transcripts and a training config under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    recipe = make_recipe(mode)
    rng = np.random.default_rng(seed)
    words = recipe.lexicon.words()
    train_sents = _sample_sentences(words, num_train, rng, recipe.max_words)
    test_sents = _sample_sentences(words, num_test, rng, recipe.max_words)
    speakers = [f"spk{f:02d}" for f in range(1, NUM_SPEAKERS + 1)]
    offsets = {spk: rng.normal(0.0, recipe.speaker_offset_scale,
                               recipe.units.num_non_blank)
               for spk in speakers}

    paths: dict[str, Path] = {}

    def emit(tag: str, sentences: list[list[str]], noise_scale: float) -> None:
        feats, labels, spk_map, texts = [], [], {}, {}
        for i, sent in enumerate(sentences, start=1):
            utt = f"{tag}_{i:04d}"
            spk = speakers[(i - 1) % len(speakers)]
            unit_syms = transcript_labels(recipe, sent)
            ids = [recipe.units.id_of(s) for s in unit_syms]
            frames = _render_features(recipe, ids, offsets[spk], noise_scale, rng)
            feats.append(FeatureMatrix(utt, frames))
            labels.append(LabelSequence(utt, np.array(ids)))
            spk_map[utt] = spk
            texts[utt] = sent
        cio.write_feature_archive(feats, out / f"{tag}_raw.ark")
        cio.write_label_archive(labels, recipe.units, out / f"{tag}_labels.txt")
        cio.write_speaker_map(spk_map, out / f"{tag}_spk.txt")
        cio.write_transcripts(texts, out / f"{tag}_text.txt")
        for kind in ("raw.ark", "labels.txt", "spk.txt", "text.txt"):
            paths[f"{tag}_{kind}"] = out / f"{tag}_{kind}"

    # Test features carry a bit more noise than training, so decoding has
    # honest work to do while staying within the lexicon's reach.
    emit("train", train_sents, recipe.noise_scale)
    emit("test", test_sents, recipe.test_noise_scale)

    cio.write_unit_table(recipe.units, out / "units.txt")
    cio.write_lexicon(recipe.lexicon, out / "lexicon.txt")
    cio.write_arpa(estimate_bigram(train_sents, words), out / "lm.arpa")
    cio.write_config({
        "mode": mode,
        "features": "prep/train.ark",
        "labels": "train_labels.txt",
        "unit_table": "units.txt",
        "speaker_map": "train_spk.txt",
        "layers": "2",
        "cells": "32",
        "learning_rate": "0.3",
        "clip": "50.0",
        "batch_size": "2",
        "validation_fraction": "0.05",
        "max_epochs": "30",
        "seed": str(seed),
    }, out / "train.cfg")
    for name in ("units.txt", "lexicon.txt", "lm.arpa", "train.cfg"):
        paths[name] = out / name
    return paths
