import itertools
import math
from importlib import resources

import numpy as np
import pytest

from ctcfst import ctc, graphs, wfst
from ctcfst.graphs import (ArpaLm, GraphError, Lexicon, LexiconEntry,
                           UnitTable, add_disambiguation, build_grammar_fst,
                           build_lexicon_fst_phoneme,
                           build_lexicon_fst_spelling, build_token_fst,
                           build_word_loop_grammar, compile_search_graph,
                           first_pronunciations, make_graph_symbols,
                           remove_disambig, symbols_for)
from ctcfst.io import read_unit_table

from conftest import arpa_sentence_cost, collapse_path, relation, relations_equal


def run_token(token, units, frame_labels):
    state = token.start
    out = []
    for lab in frame_labels:
        hits = [a for a in token.arcs(state) if a.ilabel == lab + 1]
        assert len(hits) == 1, "token machine must be input-deterministic"
        if hits[0].olabel != 0:
            out.append(token.osyms.symbol_of(hits[0].olabel))
        state = hits[0].nextstate
    assert state in token.finals
    return out


class TestUnitTable:
    def test_blank_must_be_first(self):
        with pytest.raises(GraphError, match="<blank>"):
            UnitTable(["a", "<blank>"])

    def test_duplicates_rejected(self):
        with pytest.raises(GraphError, match="duplicate"):
            UnitTable(["<blank>", "a", "a"])

    def test_lookup(self):
        t = UnitTable.from_units(["a", "b"])
        assert t.id_of("<blank>") == 0 and t.id_of("b") == 2
        assert t.num_non_blank == 2


class TestTokenFst:
    @pytest.fixture()
    def token(self):
        units = UnitTable(["<blank>", "A", "B"])
        symbols = make_graph_symbols(units, 0, ["w"])
        return build_token_fst(units, symbols), units

    def test_blank_and_repetition_variants_collapse_to_one_unit(self, token):
        t, units = token
        for frames in ([1, 1, 1, 1, 1], [0, 0, 1, 1, 0], [0, 1, 1, 1, 0]):
            assert run_token(t, units, frames) == ["A"]

    def test_blank_separated_repetition_is_two_units(self, token):
        t, units = token
        assert run_token(t, units, [1, 0, 1]) == ["A", "A"]

    def test_blank_only_and_empty_map_to_empty(self, token):
        t, units = token
        assert run_token(t, units, []) == []
        assert run_token(t, units, [0, 0, 0]) == []

    def test_matches_collapse_exhaustively_to_length_four(self, token):
        t, units = token
        for length in range(5):
            for s in itertools.product([0, 1, 2], repeat=length):
                want = [units.symbol_of(k) for k in collapse_path(s)]
                assert run_token(t, units, list(s)) == want


class TestDisambiguation:
    def test_homophones_get_distinct_suffixes(self):
        lex = Lexicon([LexiconEntry("red", ("r", "eh", "d")),
                       LexiconEntry("read", ("r", "eh", "d"))])
        entries, num = add_disambiguation(lex)
        assert num == 2
        assert [d for _, d in entries] == ["#1", "#2"]

    def test_prefix_pronunciations_get_a_suffix(self):
        lex = Lexicon([LexiconEntry("to", ("t", "o")),
                       LexiconEntry("tool", ("t", "o", "l"))])
        entries, num = add_disambiguation(lex)
        assert dict((e.word, d) for e, d in entries) == {"to": "#1", "tool": None}

    def test_distinct_pronunciations_untouched(self):
        lex = Lexicon([LexiconEntry("a", ("x",)), LexiconEntry("b", ("y",))])
        entries, num = add_disambiguation(lex)
        assert num == 0
        assert all(d is None for _, d in entries)

    def test_first_pronunciations_filter(self):
        lex = Lexicon([LexiconEntry("a", ("x",)), LexiconEntry("a", ("y",)),
                       LexiconEntry("b", ("z",))])
        kept = first_pronunciations(lex)
        assert [(e.word, e.units) for e in kept.entries] == [
            ("a", ("x",)), ("b", ("z",))]


class TestLexiconPhoneme:
    def test_pronunciation_maps_to_word(self):
        units = UnitTable.from_units(["IH", "Z"])
        lex = Lexicon([LexiconEntry("is", ("IH", "Z"))])
        symbols = symbols_for(units, lex)
        lx = build_lexicon_fst_phoneme(lex, symbols)
        rel = relation(lx, 4)
        assert rel[("IH Z", "is")] == 0.0
        assert ("IH Z IH Z", "is is") in rel  # closed under concatenation

    def test_single_unit_word_is_a_self_loop_arc(self):
        units = UnitTable.from_units(["a"])
        lex = Lexicon([LexiconEntry("w", ("a",))])
        symbols = symbols_for(units, lex)
        lx = build_lexicon_fst_phoneme(lex, symbols)
        assert ("a a a", "w w w") in relation(lx, 4)

    def test_unknown_unit_names_word(self):
        units = UnitTable.from_units(["a"])
        lex = Lexicon([LexiconEntry("bad", ("q",))])
        with pytest.raises(GraphError, match="bad"):
            build_lexicon_fst_phoneme(lex, symbols_for(units, lex))

    def test_empty_lexicon_rejected(self):
        units = UnitTable.from_units(["a"])
        with pytest.raises(GraphError, match="empty"):
            build_lexicon_fst_phoneme(Lexicon([]), symbols_for(
                units, Lexicon([LexiconEntry("w", ("a",))])))

    def test_pronunciation_probability_weights_first_arc(self):
        units = UnitTable.from_units(["a", "b"])
        lex = Lexicon([LexiconEntry("w", ("a", "b"), prob=0.5)])
        symbols = symbols_for(units, lex)
        lx = build_lexicon_fst_phoneme(lex, symbols)
        rel = relation(lx, 2)
        assert rel[("a b", "w")] == pytest.approx(-math.log(0.5))

    def test_homophones_survive_determinization(self):
        units = UnitTable.from_units(["r", "eh", "d"])
        lex = Lexicon([LexiconEntry("red", ("r", "eh", "d")),
                       LexiconEntry("read", ("r", "eh", "d"))])
        symbols = symbols_for(units, lex)
        lx = build_lexicon_fst_phoneme(lex, symbols)
        loop = build_word_loop_grammar(["red", "read"], symbols)
        lg = wfst.determinize(wfst.compose(lx, loop))
        rel = relation(remove_disambig(lg, symbols), 6)
        outputs = {o for (i, o) in rel}
        assert {"red", "read", "red read", "read red"} <= outputs


class TestLexiconSpelling:
    @pytest.fixture()
    def spelled(self):
        units = UnitTable.from_units(["i", "s", "t", "o", "b", "e", "<space>"])
        lex = Lexicon([LexiconEntry("is", ("i", "s")),
                       LexiconEntry("to", ("t", "o")),
                       LexiconEntry("be", ("b", "e"))])
        symbols = symbols_for(units, lex)
        return build_lexicon_fst_spelling(lex, symbols), symbols

    def test_optional_leading_and_trailing_space(self, spelled):
        lx, _ = spelled
        rel = relation(lx, 4)
        for ins in ("i s", "<space> i s", "i s <space>", "<space> i s <space>"):
            assert rel[(ins, "is")] == 0.0

    def test_two_words_with_one_separating_space(self, spelled):
        lx, _ = spelled
        rel = relation(lx, 6)
        assert rel[("t o <space> b e", "to be")] == 0.0

    def test_out_of_vocabulary_word_by_spelling_alone(self):
        # any letter sequence becomes a decodable word without a
        # pronunciation model
        units = UnitTable.from_units(["z", "x", "<space>"])
        lex = Lexicon([LexiconEntry("zx", ("z", "x"))])
        symbols = symbols_for(units, lex)
        lx = build_lexicon_fst_spelling(lex, symbols)
        assert ("z x", "zx") in relation(lx, 3)

    def test_missing_character_is_an_error(self):
        units = UnitTable.from_units(["a", "<space>"])
        lex = Lexicon([LexiconEntry("ab", ("a", "b"))])
        with pytest.raises(GraphError, match="ab"):
            build_lexicon_fst_spelling(lex, symbols_for(units, lex))

    def test_space_unit_must_exist(self):
        units = UnitTable.from_units(["a"])
        lex = Lexicon([LexiconEntry("a", ("a",))])
        with pytest.raises(GraphError, match="space"):
            build_lexicon_fst_spelling(lex, symbols_for(units, lex))


FIVE_SENTENCE_TRIGRAM = ArpaLm({
    1: {("<s>",): (-99.0, -0.5), ("</s>",): (-0.5, None),
        ("go",): (-0.7, -0.4), ("left",): (-0.9, -0.3),
        ("right",): (-1.2, -0.2), ("stop",): (-0.9, -0.35),
        ("now",): (-0.9, -0.25)},
    2: {("<s>", "go"): (-0.25, -0.3), ("<s>", "stop"): (-0.55, -0.2),
        ("go", "left"): (-0.3, -0.25), ("go", "right"): (-0.6, -0.15),
        ("stop", "now"): (-0.4, -0.1), ("stop", "</s>"): (-0.5, None),
        ("left", "</s>"): (-0.35, None), ("left", "now"): (-0.7, -0.2),
        ("right", "</s>"): (-0.2, None), ("now", "</s>"): (-0.15, None)},
    3: {("<s>", "go", "left"): (-0.2, None), ("<s>", "go", "right"): (-0.5, None),
        ("<s>", "stop", "now"): (-0.3, None), ("go", "left", "</s>"): (-0.25, None),
        ("go", "left", "now"): (-0.8, None), ("stop", "now", "</s>"): (-0.1, None),
        ("left", "now", "</s>"): (-0.12, None)},
})

LM_WORDS = ["go", "left", "right", "stop", "now"]


def grammar_sentence_cost(grammar, symbols, sentence):
    """Tropical cost G assigns to a word sequence, via composition with a
    one-sentence acceptor after erasing the backoff input labels."""
    acceptor = wfst.Wfst(wfst.TROPICAL, symbols.words, symbols.words)
    prev = acceptor.add_state()
    acceptor.set_start(prev)
    for word in sentence:
        nxt = acceptor.add_state()
        wid = symbols.words.id_of(word)
        acceptor.add_arc(prev, wid, wid, 0.0, nxt)
        prev = nxt
    acceptor.set_final(prev, 0.0)
    g_eps = wfst.relabel_input_to_epsilon(
        grammar, {symbols.words.id_of(graphs.BACKOFF_SYMBOL)})
    composed = wfst.compose(acceptor, g_eps)
    key = " ".join(sentence)
    rel = relation(composed, max_len=len(sentence))
    return rel.get((key, key), math.inf)


class TestGrammar:
    def test_two_sentence_toy_is_exact(self):
        units = UnitTable.from_units(["A"])
        lm = ArpaLm({
            1: {(w,): (-99.0, None) for w in
                ("<s>", "</s>", "how", "are", "is", "you", "it")},
            2: {("<s>", "how"): (0.0, None),
                ("how", "are"): (math.log10(0.5), None),
                ("how", "is"): (math.log10(0.5), None),
                ("are", "you"): (0.0, None), ("is", "it"): (0.0, None),
                ("you", "</s>"): (0.0, None), ("it", "</s>"): (0.0, None)},
        })
        symbols = make_graph_symbols(units, 0, ["how", "are", "is", "you", "it"])
        g = build_grammar_fst(lm, symbols)
        sentences = sorted(o for _, o, _ in wfst.enumerate_paths(g, 6))
        assert sentences == ["how are you", "how is it"]

    def test_uniform_unigram_sentences_weigh_equal(self):
        units = UnitTable.from_units(["A"])
        p = math.log10(1.0 / 3.0)
        lm = ArpaLm({1: {("<s>",): (-99.0, 0.0), ("</s>",): (p, None),
                         ("aa",): (p, None), ("bb",): (p, None),
                         ("cc",): (p, None)}})
        symbols = make_graph_symbols(units, 0, ["aa", "bb", "cc"])
        g = build_grammar_fst(lm, symbols)
        one_word = [(o, w) for _, o, w in wfst.enumerate_paths(g, 1) if o]
        assert len(one_word) == 3
        assert len({round(w, 12) for _, w in one_word}) == 1

    def test_trigram_matches_independent_backoff_scorer(self):
        units = UnitTable.from_units(["A"])
        symbols = make_graph_symbols(units, 0, LM_WORDS)
        g = build_grammar_fst(FIVE_SENTENCE_TRIGRAM, symbols)
        sentences = [["go", "left"], ["go", "right"], ["stop", "now"],
                     ["go", "left", "now"], ["stop"]]
        for sentence in sentences:
            want = arpa_sentence_cost(FIVE_SENTENCE_TRIGRAM, sentence)
            got = grammar_sentence_cost(g, symbols, sentence)
            assert abs(want - got) < 1e-9, sentence

    def test_backoff_routes_match_scorer_too(self):
        units = UnitTable.from_units(["A"])
        symbols = make_graph_symbols(units, 0, LM_WORDS)
        g = build_grammar_fst(FIVE_SENTENCE_TRIGRAM, symbols)
        for sentence in (["right", "now"], ["go", "right", "now"],
                         ["now"], ["left", "left"]):
            want = arpa_sentence_cost(FIVE_SENTENCE_TRIGRAM, sentence)
            got = grammar_sentence_cost(g, symbols, sentence)
            assert abs(want - got) < 1e-9, sentence

    def test_backoff_context_validation(self):
        lm = ArpaLm({1: {("a",): (-0.3, None)},
                     2: {("b", "a"): (-0.2, None)}})
        with pytest.raises(GraphError, match="context"):
            lm.validate()


def toy_system(lm=None):
    units = UnitTable.from_units(["a", "b", "c"])
    lex = Lexicon([LexiconEntry("wa", ("a", "b")),
                   LexiconEntry("wb", ("a", "b")),
                   LexiconEntry("wc", ("a",)),
                   LexiconEntry("wd", ("c",))])
    if lm is None:
        lm = ArpaLm({
            1: {("<s>",): (-99.0, -0.35), ("</s>",): (math.log10(0.1), None),
                ("wa",): (math.log10(0.3), -0.3), ("wb",): (math.log10(0.2), -0.25),
                ("wc",): (math.log10(0.25), -0.2), ("wd",): (math.log10(0.15), -0.4)},
            2: {("<s>", "wa"): (math.log10(0.6), None),
                ("<s>", "wc"): (math.log10(0.3), None),
                ("wa", "wd"): (math.log10(0.5), None),
                ("wa", "</s>"): (math.log10(0.4), None),
                ("wc", "wb"): (math.log10(0.5), None),
                ("wc", "</s>"): (math.log10(0.3), None),
                ("wd", "</s>"): (math.log10(0.7), None),
                ("wb", "</s>"): (math.log10(0.8), None)},
        })
    symbols = symbols_for(units, lex, lm)
    token = build_token_fst(units, symbols)
    lexicon = build_lexicon_fst_phoneme(lex, symbols)
    grammar = build_grammar_fst(lm, symbols)
    return units, lex, symbols, token, lexicon, grammar


class TestSearchGraph:
    def test_relation_equals_unoptimized_composition(self):
        units, lex, symbols, token, lexicon, grammar = toy_system()
        s = compile_search_graph(token, lexicon, grammar, symbols)
        raw = wfst.compose(lexicon, grammar)
        ref = wfst.connect(wfst.compose(token, remove_disambig(raw, symbols)))
        assert relations_equal(relation(s, 6), relation(ref, 6), 1e-9)

    def test_single_sentence_grammar_restricts_inputs(self):
        units = UnitTable.from_units(["a", "b"])
        lex = Lexicon([LexiconEntry("w", ("a", "b"))])
        lm = ArpaLm({1: {("<s>",): (-99.0, None), ("</s>",): (-99.0, None),
                         ("w",): (-99.0, None)},
                     2: {("<s>", "w"): (0.0, None), ("w", "</s>"): (0.0, None)}})
        symbols = symbols_for(units, lex, lm)
        s = compile_search_graph(build_token_fst(units, symbols),
                                 build_lexicon_fst_phoneme(lex, symbols),
                                 build_grammar_fst(lm, symbols), symbols)
        for ins, outs, _ in wfst.enumerate_paths(s, 5):
            frame = [symbols.token_in.id_of(sym) - 1 for sym in ins.split()]
            assert [units.symbol_of(k) for k in collapse_path(frame)] == ["a", "b"]
            assert outs == "w"

    def test_det_min_shrink_or_equal_on_character_recipe(self, tmp_path):
        # measured on the bundled character recipe; at very small lexicon
        # sizes determinization's output delays can outweigh the merging,
        # so the compression claim is tied to this concrete system
        from ctcfst import toydata
        from ctcfst.io import parse_arpa
        recipe = toydata.make_recipe("character")
        toydata.generate(tmp_path, mode="character")
        lm = parse_arpa(tmp_path / "lm.arpa")
        symbols = symbols_for(recipe.units, recipe.lexicon, lm)
        token = build_token_fst(recipe.units, symbols)
        lexicon = build_lexicon_fst_spelling(recipe.lexicon, symbols)
        grammar = build_grammar_fst(lm, symbols)
        s = compile_search_graph(token, lexicon, grammar, symbols)
        raw = wfst.connect(wfst.compose(
            token, remove_disambig(wfst.compose(lexicon, grammar), symbols)))
        assert s.num_states <= raw.num_states

    def test_lexicon_only_graph_with_word_loop(self):
        units, lex, symbols, token, lexicon, _ = toy_system()
        loop = build_word_loop_grammar(lex.words(), symbols)
        s = compile_search_graph(token, lexicon, loop, symbols)
        outputs = {o for _, o, _ in wfst.enumerate_paths(s, 4)}
        assert {"wc", "wd", "wc wd", "wd wc"} <= outputs


class TestRandomizedSearchGraphs:
    def test_relation_preserved_over_random_lexicons_and_lms(self):
        rng = np.random.default_rng(77)
        unit_pool = ["a", "b"]
        for trial in range(8):
            units = UnitTable.from_units(unit_pool)
            n_words = int(rng.integers(2, 4))
            entries = []
            for j in range(n_words):
                length = int(rng.integers(1, 4))
                pron = tuple(unit_pool[int(k)]
                             for k in rng.integers(0, len(unit_pool), length))
                entries.append(LexiconEntry(f"w{j}", pron))
            lex = Lexicon(entries)
            words = lex.words()
            unigrams = {("<s>",): (-99.0, round(float(-rng.random()), 4)),
                        ("</s>",): (round(float(-rng.random()), 4), None)}
            bigrams = {}
            for w in words:
                unigrams[(w,)] = (round(float(-1 - rng.random()), 4),
                                  round(float(-rng.random()), 4))
                if rng.random() < 0.7:
                    bigrams[("<s>", w)] = (round(float(-rng.random()), 4), None)
                if rng.random() < 0.7:
                    bigrams[(w, "</s>")] = (round(float(-rng.random()), 4), None)
                for v in words:
                    if rng.random() < 0.4:
                        bigrams[(v, w)] = (round(float(-rng.random()), 4), None)
            lm = ArpaLm({1: unigrams, 2: bigrams})
            symbols = symbols_for(units, lex, lm)
            token = build_token_fst(units, symbols)
            lexicon = build_lexicon_fst_phoneme(lex, symbols)
            grammar = build_grammar_fst(lm, symbols)
            if grammar.is_empty():
                continue  # draw admitted no complete sentence
            s = compile_search_graph(token, lexicon, grammar, symbols)
            ref = wfst.connect(wfst.compose(token, remove_disambig(
                wfst.compose(lexicon, grammar), symbols)))
            assert relations_equal(relation(s, 8), relation(ref, 8), 1e-9), trial


class TestBundledRecipe:
    def test_cmu_subset_has_72_labels(self):
        ref = resources.files("ctcfst") / "recipes" / "cmu_phoneme_units.txt"
        with resources.as_file(ref) as path:
            units = read_unit_table(path)
        assert len(units) == 72
        assert units.symbol_of(0) == "<blank>"
