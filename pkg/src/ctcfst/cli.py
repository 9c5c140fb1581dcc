"""Command-line interface: prepare, train, build-graph, decode, score,
plus make-toy to generate the bundled synthetic recipes.

Every failure exits nonzero after printing a single machine-parsable
line "error: <category>: <detail>" on stderr.
"""

from __future__ import annotations

import argparse
import logging
import math
import multiprocessing
import sys
from pathlib import Path

from . import ctc, decoder, features, graphs, nnet, report, toydata, trainer, wfst
from . import io as cio

log = logging.getLogger(__name__)


class CliError(Exception):
    def __init__(self, category: str, detail: str):
        super().__init__(detail)
        self.category = category


def _error_category(exc: Exception) -> str:
    if isinstance(exc, CliError):
        return exc.category
    if isinstance(exc, cio.FormatError):
        return "format"
    if isinstance(exc, (FileNotFoundError, PermissionError, OSError)):
        return "io"
    if isinstance(exc, (graphs.GraphError, wfst.FstError)):
        return "graph"
    if isinstance(exc, ctc.UnrealizableSequenceError):
        return "data"
    if isinstance(exc, RuntimeError):
        return "training"
    return "config"


# ---------------------------------------------------------------------
# prepare
# ---------------------------------------------------------------------

def cmd_prepare(args) -> int:
    for out in (args.out_features, args.stats_out, args.out_priors):
        if out is not None:
            Path(out).parent.mkdir(parents=True, exist_ok=True)
    feats = cio.read_feature_archive(args.features)
    units = cio.read_unit_table(args.unit_table)
    feats = [features.add_deltas(f, args.delta_order, args.delta_window)
             for f in feats]
    if args.speaker_map is not None:
        speaker_map = cio.read_speaker_map(args.speaker_map)
        missing = [f.utterance_id for f in feats if f.utterance_id not in speaker_map]
        if missing:
            raise CliError("data", f"utterances missing from speaker map: {missing[:5]}")
    else:
        log.warning("no speaker map given; using one global pseudo-speaker")
        speaker_map = {f.utterance_id: "global" for f in feats}
    if args.stats_in is not None:
        stats = cio.read_speaker_stats(args.stats_in)
    else:
        stats = features.estimate_speaker_stats(feats, speaker_map)
        if args.stats_out is not None:
            cio.write_speaker_stats(stats, args.stats_out)
    normalized = []
    for f in feats:
        spk = speaker_map[f.utterance_id]
        if spk not in stats:
            raise CliError("data", f"no CMVN stats for speaker {spk!r}")
        normalized.append(features.apply_cmvn(f, stats[spk]))
    Path(args.out_features).parent.mkdir(parents=True, exist_ok=True)
    cio.write_feature_archive(normalized, args.out_features)
    print(f"prepared {len(normalized)} utterances -> {args.out_features}")
    if args.labels is not None:
        seqs = cio.read_label_archive(args.labels, units)
        priors = ctc.estimate_priors(seqs, len(units))
        out_priors = args.out_priors
        if out_priors is None:
            raise CliError("config", "--labels requires --out-priors")
        cio.write_priors(priors, units, out_priors)
        print(f"estimated label priors over {len(seqs)} utterances -> {out_priors}")
    return 0


# ---------------------------------------------------------------------
# train
# ---------------------------------------------------------------------

def cmd_train(args) -> int:
    if args.config is None:
        raise CliError("config", "train requires --config")
    config = trainer.RunConfig.from_file(args.config, out_dir=args.out_dir)
    if args.seed is not None:
        config.seed = args.seed
    corpus = cio.load_corpus(config.features, config.labels, config.unit_table,
                             speaker_map_path=config.speaker_map)
    final_path, reports = trainer.run_training(config, corpus, resume=args.resume)
    out_dir = Path(config.out_dir)
    report_path = out_dir / "train_report.txt"
    # the persisted report carries the full history across resumed runs
    history = trainer.read_training_report(report_path)
    figure = report.save_training_curves(history, out_dir / "training_curves.png")
    print(f"model -> {final_path}")
    print(f"report -> {report_path}")
    print(f"figure -> {figure}")
    if history:
        last = history[-1]
        print(f"final val_ler {100 * last.val_ler:.2f}% after epoch {last.epoch}")
    return 0


# ---------------------------------------------------------------------
# build-graph
# ---------------------------------------------------------------------

def cmd_build_graph(args) -> int:
    units = cio.read_unit_table(args.unit_table)
    lexicon = cio.read_lexicon(args.lexicon)
    if not args.keep_pronunciations:
        lexicon = graphs.first_pronunciations(lexicon)
    if (args.arpa is None) == (not args.lexicon_only):
        raise CliError("config", "give exactly one of --arpa or --lexicon-only")
    lm = cio.parse_arpa(args.arpa) if args.arpa is not None else None
    symbols = graphs.symbols_for(units, lexicon, lm)
    token = graphs.build_token_fst(units, symbols)
    if args.mode == "phoneme":
        lex_fst = graphs.build_lexicon_fst_phoneme(lexicon, symbols)
    else:
        lex_fst = graphs.build_lexicon_fst_spelling(lexicon, symbols)
    if lm is not None:
        grammar = graphs.build_grammar_fst(lm, symbols)
    else:
        grammar = graphs.build_word_loop_grammar(lexicon.words(), symbols)
    search = graphs.compile_search_graph(token, lex_fst, grammar, symbols)

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stats = {}
    for name, fst in (("T", token), ("L", lex_fst), ("G", grammar), ("TLG", search)):
        cio.write_fst_binary(fst, out_dir / f"{name}.fst")
        stats[name] = (fst.num_states, fst.num_arcs)
    cio.write_symbols(symbols.token_in, out_dir / "tokens.txt")
    cio.write_symbols(symbols.words, out_dir / "words.txt")
    report.write_graph_stats(stats, out_dir / "graph_stats.txt")
    for name, (n_states, n_arcs) in stats.items():
        print(f"{name}: {n_states} states, {n_arcs} arcs")
    return 0


# ---------------------------------------------------------------------
# decode
# ---------------------------------------------------------------------

_WORKER: dict = {}


def _decode_init(graph, stack, priors, scale, beam, max_active):
    _WORKER.update(graph=graph, stack=stack, priors=priors, scale=scale,
                   beam=beam, max_active=max_active)


def _decode_one(feat: features.FeatureMatrix) -> tuple[str, list[str], float]:
    probs, _ = nnet.blstm_forward(_WORKER["stack"], feat.frames)
    scorer = decoder.AcousticScorer(probs, _WORKER["priors"], _WORKER["scale"])
    words, cost = decoder.decode_utterance(
        _WORKER["graph"], scorer, _WORKER["beam"], _WORKER["max_active"])
    return feat.utterance_id, words, cost


def cmd_decode(args) -> int:
    graph = cio.read_fst_binary(args.graph)
    if args.word_symbols is not None:
        graph.osyms = cio.read_symbols(args.word_symbols)
    stack = nnet.load_model(args.model)
    token_syms = graph.isyms.symbols()
    if len(token_syms) < 2 or token_syms[1] != graphs.BLANK_SYMBOL:
        raise CliError("graph", "graph input table does not look like CTC labels "
                                f"(<blank> must have id 1, got {token_syms[:2]})")
    units = graphs.UnitTable(token_syms[1:])
    priors = cio.read_priors(args.priors, units)
    feats = cio.read_feature_archive(args.features)
    beam = args.beam
    max_active = math.inf if args.max_active <= 0 else args.max_active

    jobs = max(1, args.jobs)
    results: list[tuple[str, list[str], float]] = []
    if jobs == 1:
        _decode_init(graph, stack, priors, args.acoustic_scale, beam, max_active)
        for feat in feats:
            results.append(_decode_one(feat))
    else:
        with multiprocessing.Pool(
                jobs, initializer=_decode_init,
                initargs=(graph, stack, priors, args.acoustic_scale, beam,
                          max_active)) as pool:
            results = list(pool.imap(_decode_one, feats))
    hyps = {utt: words for utt, words, _ in results}
    cio.write_transcripts(hyps, args.out)
    empty = sum(1 for _, words, _ in results if not words)
    print(f"decoded {len(results)} utterances -> {args.out}"
          + (f" ({empty} empty)" if empty else ""))
    return 0


# ---------------------------------------------------------------------
# score
# ---------------------------------------------------------------------

def cmd_score(args) -> int:
    hyps = cio.read_transcripts(args.hyp)
    refs = cio.read_transcripts(args.ref)
    summary = decoder.word_error_rate(hyps, refs)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report.write_score_report(summary, out_dir / "score_report.txt",
                              out_dir / "score_report.tsv")
    figure = report.save_wer_breakdown(summary, out_dir / "wer_breakdown.png")
    print(f"WER {100 * summary.wer:.2f}% "
          f"(sub {summary.substitutions}, ins {summary.insertions}, "
          f"del {summary.deletions}) over {summary.total_ref_words} words")
    print(f"report -> {out_dir / 'score_report.txt'}")
    print(f"figure -> {figure}")
    return 0


# ---------------------------------------------------------------------
# make-toy
# ---------------------------------------------------------------------

def cmd_make_toy(args) -> int:
    seed = 17 if args.seed is None else args.seed
    paths = toydata.generate(args.out_dir, mode=args.mode,
                             num_train=args.num_train, num_test=args.num_test,
                             seed=seed)
    print(f"toy {args.mode} corpus -> {args.out_dir} ({len(paths)} files)")
    return 0


# ---------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ctcfst",
        description="CTC sequence recognition: BLSTM training and WFST decoding")
    parser.add_argument("--config", help="key-value config file (train)")
    parser.add_argument("--jobs", type=int, default=1,
                        help="worker processes for per-utterance work")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the seed of seeded subcommands")
    parser.add_argument("--verbose", "-v", action="count", default=0,
                        help="-v for info, -vv for debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="add deltas, apply CMVN, estimate priors")
    p.add_argument("--features", required=True, help="raw feature archive or directory")
    p.add_argument("--unit-table", required=True)
    p.add_argument("--out-features", required=True, help="normalized archive to write")
    p.add_argument("--speaker-map", default=None)
    p.add_argument("--stats-in", default=None, help="reuse CMVN stats from this file")
    p.add_argument("--stats-out", default=None, help="write estimated CMVN stats here")
    p.add_argument("--labels", default=None, help="label archive for prior estimation")
    p.add_argument("--out-priors", default=None)
    p.add_argument("--delta-order", type=int, default=2)
    p.add_argument("--delta-window", type=int, default=2)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train the BLSTM with the CTC objective")
    p.add_argument("--config", default=argparse.SUPPRESS,
                   help="key-value config file (alias of the global flag)")
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS,
                   help="override the config seed")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--resume", action="store_true",
                   help="continue from the latest checkpoint in --out-dir")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("build-graph", help="compile T, L, G and the search graph")
    p.add_argument("--unit-table", required=True)
    p.add_argument("--lexicon", required=True)
    p.add_argument("--arpa", default=None, help="ARPA language model")
    p.add_argument("--lexicon-only", action="store_true",
                   help="use an unweighted word loop instead of an LM")
    p.add_argument("--mode", choices=("phoneme", "character"), default="phoneme")
    p.add_argument("--keep-pronunciations", action="store_true",
                   help="keep alternative pronunciations instead of the first only")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_build_graph)

    p = sub.add_parser("decode", help="beam-search decode prepared features")
    p.add_argument("--graph", required=True, help="binary search graph (TLG.fst)")
    p.add_argument("--model", required=True)
    p.add_argument("--features", required=True, help="prepared feature archive")
    p.add_argument("--priors", required=True)
    p.add_argument("--acoustic-scale", type=float,
                   default=decoder.DEFAULT_ACOUSTIC_SCALE)
    p.add_argument("--beam", type=float, default=16.0,
                   help="score beam; pass inf to disable pruning")
    p.add_argument("--max-active", type=int, default=5000,
                   help="token cap per frame; <= 0 disables the cap")
    p.add_argument("--word-symbols", default=None,
                   help="override the output symbol table of the graph")
    p.add_argument("--out", required=True, help="hypothesis file to write")
    p.add_argument("--jobs", type=int, default=argparse.SUPPRESS,
                   help="decode worker processes (alias of the global flag)")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("score", help="word error rate of a hypothesis file")
    p.add_argument("--hyp", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("make-toy", help="generate a synthetic recipe corpus")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--mode", choices=("phoneme", "character"), default="phoneme")
    p.add_argument("--num-train", type=int, default=50)
    p.add_argument("--num-test", type=int, default=10)
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS,
                   help="corpus seed (alias of the global flag)")
    p.set_defaults(func=cmd_make_toy)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = (logging.WARNING, logging.INFO, logging.DEBUG)[min(args.verbose, 2)]
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except Exception as exc:  # single-line machine-parsable failure
        print(f"error: {_error_category(exc)}: {exc}", file=sys.stderr)
        if args.verbose:
            raise
        return 1


if __name__ == "__main__":
    sys.exit(main())
