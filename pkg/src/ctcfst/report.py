"""Report rendering: delimited score/training files and their figures.

Figures are written next to the delimited output with a non-interactive
backend, so reports work in headless runs.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .decoder import WerSummary
from .trainer import EpochReport

FIGSIZE = (7.0, 4.2)
DPI = 130


def write_training_report(reports: Sequence[EpochReport], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in reports:
            fh.write(row.line() + "\n")


def save_training_curves(reports: Sequence[EpochReport], path) -> Path:
    epochs = [r.epoch for r in reports]
    fig, (ax_ler, ax_ll) = plt.subplots(1, 2, figsize=FIGSIZE, layout="constrained")
    ax_ler.plot(epochs, [100 * r.train_ler for r in reports], "o-", label="train")
    ax_ler.plot(epochs, [100 * r.val_ler for r in reports], "s-", label="validation")
    ax_ler.set_xlabel("epoch")
    ax_ler.set_ylabel("label error rate [%]")
    ax_ler.legend()
    ax_ler.grid(alpha=0.3)
    ax_ll.plot(epochs, [r.loglik for r in reports], "o-", color="tab:green")
    ax_ll.set_xlabel("epoch")
    ax_ll.set_ylabel("mean log-likelihood / utterance")
    ax_ll.grid(alpha=0.3)
    fig.suptitle("training progress")
    fig.savefig(path, dpi=DPI)
    plt.close(fig)
    return Path(path)


def write_score_report(summary: WerSummary, txt_path, tsv_path) -> None:
    """Human summary plus a per-utterance TSV breakdown."""
    with open(tsv_path, "w", encoding="utf-8") as fh:
        fh.write("utterance\tref_words\terrors\tsub\tins\tdel\twer\n")
        for a in summary.per_utterance:
            wer = a.errors / a.ref_len if a.ref_len else 0.0
            fh.write(f"{a.utterance_id}\t{a.ref_len}\t{a.errors}\t"
                     f"{a.substitutions}\t{a.insertions}\t{a.deletions}\t{wer:.4f}\n")
    with open(txt_path, "w", encoding="utf-8") as fh:
        fh.write(f"WER {100 * summary.wer:.2f}%\n")
        fh.write(f"errors {summary.total_errors} / {summary.total_ref_words} words "
                 f"(sub {summary.substitutions}, ins {summary.insertions}, "
                 f"del {summary.deletions})\n")
        fh.write(f"utterances {len(summary.per_utterance)}\n")


def save_wer_breakdown(summary: WerSummary, path) -> Path:
    fig, (ax_counts, ax_hist) = plt.subplots(1, 2, figsize=FIGSIZE,
                                             layout="constrained")
    kinds = ["substitutions", "insertions", "deletions"]
    counts = [summary.substitutions, summary.insertions, summary.deletions]
    ax_counts.bar(kinds, counts, color=["tab:orange", "tab:red", "tab:blue"])
    ax_counts.set_ylabel("count")
    ax_counts.set_title(f"WER {100 * summary.wer:.2f}%")
    ax_counts.tick_params(axis="x", rotation=20)
    rates = [100 * a.errors / a.ref_len for a in summary.per_utterance if a.ref_len]
    ax_hist.hist(rates, bins=min(20, max(5, len(rates))), color="tab:gray")
    ax_hist.set_xlabel("per-utterance WER [%]")
    ax_hist.set_ylabel("utterances")
    fig.savefig(path, dpi=DPI)
    plt.close(fig)
    return Path(path)


def write_graph_stats(stats: dict[str, tuple[int, int]], path) -> None:
    """Lines "<name> <states> <arcs>" for each built machine."""
    with open(path, "w", encoding="utf-8") as fh:
        for name, (states, arcs) in stats.items():
            fh.write(f"{name} {states} {arcs}\n")
