import json

import numpy as np
import pytest

from adatrig.corpus import (
    Corpus,
    RealisPolicy,
    TaggedSentence,
    Token,
    compute_stats,
    default_synthetic_spec,
    filter_unrealized_events,
    load_corpus,
    make_synthetic_pair,
    sample_labeled_fraction,
    split_corpus,
    write_corpus,
)
from adatrig.errors import ParseError, ValidationError
from adatrig.util import rng_stream

from conftest import make_sentence


def write_lines(path, lines):
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


class TestLoadCorpus:
    def test_three_line_fixture(self, tmp_path):
        f = tmp_path / "c.tsv"
        write_lines(
            f,
            [
                "d0\t0\tthe\tO\tDET\t_",
                "d0\t0\tstorm\tEVENT\tNOUN\t_",
                "d0\t0\tended\tO\tVERB\t_",
            ],
        )
        corpus = load_corpus(f)
        assert len(corpus.sentences) == 1
        sent = corpus.sentences[0]
        assert len(sent.tokens) == 3
        assert sent.tags == ("O", "EVENT", "O")
        assert sent.tokens[0].pos == "DET"

    def test_empty_file(self, tmp_path):
        f = tmp_path / "c.tsv"
        f.write_text("", encoding="utf-8")
        with pytest.raises(ValidationError, match="no sentences"):
            load_corpus(f)

    def test_unknown_tag_names_line(self, tmp_path):
        f = tmp_path / "c.tsv"
        write_lines(f, ["d0\t0\tthe\tO\t_\t_", "d0\t0\tx\tEVNT\t_\t_"])
        with pytest.raises(ValidationError, match=":2"):
            load_corpus(f)

    def test_wrong_column_count_names_line(self, tmp_path):
        f = tmp_path / "c.tsv"
        write_lines(f, ["d0\t0\tthe\tO\t_\t_", "d0\t0\tbad\tO"])
        with pytest.raises(ParseError, match=":2"):
            load_corpus(f)

    def test_attrs_parsing(self, tmp_path):
        f = tmp_path / "c.tsv"
        write_lines(f, ["d0\t0\twill\tEVENT\t_\ttense=FUTURE;modality=would"])
        corpus = load_corpus(f)
        assert corpus.sentences[0].tokens[0].attrs == {
            "tense": "FUTURE",
            "modality": "would",
        }

    def test_meta_sidecar_round_trip(self, tmp_path, tiny_corpus):
        corpus = split_corpus(tiny_corpus, (0.4, 0.3, 0.3), seed=3)
        write_corpus(corpus, tmp_path / "tiny.tsv")
        loaded = load_corpus(tmp_path / "tiny.tsv")
        assert loaded.name == "tiny"
        assert loaded.splits == corpus.splits

    def test_write_load_write_is_byte_identical(self, tmp_path, tiny_corpus):
        a = tmp_path / "a.tsv"
        b = tmp_path / "b.tsv"
        write_corpus(tiny_corpus, a)
        write_corpus(load_corpus(a), b)
        assert a.read_bytes() == b.read_bytes()


class TestInvariants:
    def test_length_mismatch_rejected(self):
        with pytest.raises(ValidationError, match="tags"):
            TaggedSentence("d", 0, (Token("a"),), ("O", "O"))

    def test_empty_sentence_rejected(self):
        with pytest.raises(ValidationError):
            TaggedSentence("d", 0, (), ())

    def test_unknown_tag_rejected(self):
        with pytest.raises(ValidationError):
            TaggedSentence("d", 0, (Token("a"),), ("MAYBE",))

    def test_splits_must_cover_all_docs(self, tiny_corpus):
        with pytest.raises(ValidationError, match="missing"):
            Corpus("x", tiny_corpus.sentences, {"train": ("d0",)})

    def test_splits_must_be_disjoint(self, tiny_corpus):
        with pytest.raises(ValidationError, match="both"):
            Corpus(
                "x",
                tiny_corpus.sentences,
                {"train": ("d0", "d1"), "dev": ("d1", "d2")},
            )


class TestRealisFilter:
    def test_future_tense_dropped(self):
        sent = make_sentence(
            "d", 0, ["will", "explode"], ["O", "EVENT"], attrs=[None, {"tense": "FUTURE"}]
        )
        out = filter_unrealized_events(Corpus("c", (sent,)))
        assert out.sentences[0].tags == ("O", "O")
        assert len(out.sentences[0].tokens) == 2

    def test_no_attrs_unchanged(self):
        sent = make_sentence("d", 0, ["exploded"], ["EVENT"])
        out = filter_unrealized_events(Corpus("c", (sent,)))
        assert out.sentences[0].tags == ("EVENT",)

    def test_zero_events_identity(self):
        sent = make_sentence("d", 0, ["quiet", "day"], ["O", "O"], attrs=[{"tense": "FUTURE"}, None])
        corpus = Corpus("c", (sent,))
        out = filter_unrealized_events(corpus)
        assert out.sentences == corpus.sentences

    def test_modality_and_polarity_rules(self):
        sents = (
            make_sentence("d", 0, ["might", "fall"], ["O", "EVENT"], attrs=[None, {"modality": "might"}]),
            make_sentence("d", 1, ["did", "not", "fall"], ["O", "O", "EVENT"],
                          attrs=[None, None, {"polarity": "NEG"}]),
            make_sentence("d", 2, ["fell"], ["EVENT"], attrs=[{"polarity": "POS"}]),
        )
        out = filter_unrealized_events(Corpus("c", sents))
        assert out.sentences[0].tags == ("O", "O")
        assert out.sentences[1].tags == ("O", "O", "O")
        assert out.sentences[2].tags == ("EVENT",)

    def test_idempotent_and_monotone(self):
        sents = tuple(
            make_sentence(
                "d",
                i,
                ["w1", "w2"],
                ["EVENT", "O"] if i % 2 else ["O", "EVENT"],
                attrs=[{"tense": "FUTURE"}, None] if i % 3 == 0 else None,
            )
            for i in range(12)
        )
        corpus = Corpus("c", sents)
        once = filter_unrealized_events(corpus)
        twice = filter_unrealized_events(once)
        assert once.sentences == twice.sentences
        assert compute_stats(once).n_events <= compute_stats(corpus).n_events
        # never adds EVENT tags
        for before, after in zip(corpus.sentences, once.sentences):
            for b, a in zip(before.tags, after.tags):
                assert not (b == "O" and a == "EVENT")

    def test_policy_file_round_trip(self, tmp_path):
        p = tmp_path / "policy.json"
        p.write_text(
            json.dumps(
                {
                    "drop_tenses": ["future", "FUTURE_PERFECT"],
                    "assertion_modalities": ["none"],
                    "drop_polarities": ["neg"],
                }
            ),
            encoding="utf-8",
        )
        policy = RealisPolicy.from_file(p)
        assert policy.drops({"tense": "future_perfect"})
        assert not policy.drops({"tense": "PAST"})

    def test_policy_file_unknown_key(self, tmp_path):
        p = tmp_path / "policy.json"
        p.write_text(json.dumps({"drop_stuff": []}), encoding="utf-8")
        with pytest.raises(ValidationError, match="unknown"):
            RealisPolicy.from_file(p)


class TestStats:
    def test_small_fixture_exact(self):
        sent = make_sentence("d", 0, ["a", "b", "c", "d"], ["O", "EVENT", "O", "O"])
        stats = compute_stats(Corpus("c", (sent,)))
        assert (stats.n_docs, stats.n_tokens, stats.n_events) == (1, 4, 1)
        assert stats.density == 0.25

    def test_empty_corpus_error(self):
        with pytest.raises(ValidationError, match="empty"):
            compute_stats(Corpus("c", ()))

    def test_density_is_exact_ratio(self, tiny_corpus):
        stats = compute_stats(tiny_corpus)
        assert stats.density == stats.n_events / stats.n_tokens
        assert (stats.n_docs, stats.n_tokens, stats.n_events) == (3, 12, 4)


class TestSplit:
    def test_10_docs_8_1_1(self):
        sents = tuple(make_sentence(f"d{i}", 0, ["w"], ["O"]) for i in range(10))
        corpus = split_corpus(Corpus("c", sents), (0.8, 0.1, 0.1), seed=7)
        assert tuple(len(corpus.splits[k]) for k in ("train", "dev", "test")) == (8, 1, 1)
        again = split_corpus(Corpus("c", sents), (0.8, 0.1, 0.1), seed=7)
        assert corpus.splits == again.splits

    def test_100_docs_80_10_10(self):
        sents = tuple(make_sentence(f"d{i:03d}", 0, ["w"], ["O"]) for i in range(100))
        corpus = split_corpus(Corpus("c", sents), (0.8, 0.1, 0.1), seed=0)
        assert tuple(len(corpus.splits[k]) for k in ("train", "dev", "test")) == (80, 10, 10)

    def test_bad_fractions(self, tiny_corpus):
        with pytest.raises(ValidationError, match="sum"):
            split_corpus(tiny_corpus, (0.5, 0.5, 0.5), seed=1)

    def test_too_few_docs(self):
        sents = (make_sentence("d0", 0, ["w"], ["O"]), make_sentence("d1", 0, ["w"], ["O"]))
        with pytest.raises(ValidationError, match="3 documents"):
            split_corpus(Corpus("c", sents), (0.8, 0.1, 0.1), seed=1)

    def test_partition_exact_over_random_corpora(self):
        rng = rng_stream(99, "split-prop")
        for trial in range(100):
            n_docs = int(rng.integers(3, 40))
            sents = tuple(
                make_sentence(f"d{i}", j, ["w"], ["O"])
                for i in range(n_docs)
                for j in range(int(rng.integers(1, 4)))
            )
            corpus = split_corpus(Corpus("c", sents), (0.6, 0.2, 0.2), seed=trial)
            pieces = [set(corpus.splits[k]) for k in ("train", "dev", "test")]
            assert set().union(*pieces) == set(corpus.doc_ids)
            assert sum(len(p) for p in pieces) == n_docs


class TestSampleFraction:
    def _corpus(self, n):
        sents = tuple(make_sentence(f"d{i // 10}", i % 10, ["w", "v"], ["O", "EVENT"]) for i in range(n))
        return Corpus("c", sents)

    def test_200_at_1pct(self):
        labeled, rest = sample_labeled_fraction(self._corpus(200), 0.01, seed=5)
        assert len(labeled.sentences) == 2
        assert len(rest.sentences) == 198

    def test_minimum_clamp(self):
        labeled, rest = sample_labeled_fraction(self._corpus(50), 0.01, seed=5)
        assert len(labeled.sentences) == 1
        assert len(rest.sentences) == 49

    def test_deterministic_and_partitions(self):
        corpus = self._corpus(80)
        a1, r1 = sample_labeled_fraction(corpus, 0.1, seed=3)
        a2, r2 = sample_labeled_fraction(corpus, 0.1, seed=3)
        assert [s.key for s in a1.sentences] == [s.key for s in a2.sentences]
        keys = {s.key for s in a1.sentences} | {s.key for s in r1.sentences}
        assert keys == {s.key for s in corpus.sentences}
        assert not ({s.key for s in a1.sentences} & {s.key for s in r1.sentences})

    def test_percent_bounds(self):
        with pytest.raises(ValidationError):
            sample_labeled_fraction(self._corpus(10), 0.0, seed=1)
        with pytest.raises(ValidationError):
            sample_labeled_fraction(self._corpus(10), 1.0, seed=1)


class TestSynthetic:
    def test_densities_measured_within_tolerance(self):
        spec = default_synthetic_spec(
            n_templates=50, n_content=200, densities=(0.05, 0.10), n_sentences=(500, 500), seed=0
        )
        src, tgt = make_synthetic_pair(spec, seed=0)
        assert abs(compute_stats(src).density - 0.05) <= 0.01
        assert abs(compute_stats(tgt).density - 0.10) <= 0.01

    def test_identical_seeds_byte_identical(self, tmp_path):
        spec = default_synthetic_spec(n_templates=20, n_content=40, n_sentences=(60, 60), seed=2)
        for i, pair in enumerate([make_synthetic_pair(spec, seed=9), make_synthetic_pair(spec, seed=9)]):
            write_corpus(pair[0], tmp_path / f"s{i}.tsv")
            write_corpus(pair[1], tmp_path / f"t{i}.tsv")
        assert (tmp_path / "s0.tsv").read_bytes() == (tmp_path / "s1.tsv").read_bytes()
        assert (tmp_path / "t0.tsv").read_bytes() == (tmp_path / "t1.tsv").read_bytes()

    def test_content_vocabularies_disjoint(self):
        spec = default_synthetic_spec(n_templates=20, n_content=60, n_sentences=(80, 80), seed=1)
        src, tgt = make_synthetic_pair(spec, seed=4)
        function_words = spec.function_vocab()
        src_content = {t.surface for s in src.sentences for t in s.tokens} - function_words
        tgt_content = {t.surface for s in tgt.sentences for t in s.tokens} - function_words
        assert src_content and tgt_content
        assert not (src_content & tgt_content)

    def test_overlapping_vocab_rejected(self):
        spec = default_synthetic_spec(n_templates=10, n_content=20, n_sentences=(30, 30), seed=3)
        bad = type(spec)(
            templates=spec.templates,
            source_nouns=spec.source_nouns,
            source_triggers=spec.source_triggers,
            target_nouns=spec.target_nouns + (spec.source_nouns[0],),
            target_triggers=spec.target_triggers,
        )
        with pytest.raises(ValidationError, match="overlap"):
            make_synthetic_pair(bad, seed=0)

    def test_generated_corpora_round_trip(self, tmp_path):
        spec = default_synthetic_spec(n_templates=12, n_content=30, n_sentences=(40, 40), seed=5)
        src, _ = make_synthetic_pair(spec, seed=1)
        write_corpus(src, tmp_path / "src.tsv")
        loaded = load_corpus(tmp_path / "src.tsv")
        assert loaded.sentences == src.sentences
        assert loaded.splits == src.splits

    def test_unreachable_density_rejected(self):
        spec = default_synthetic_spec(n_templates=20, n_content=40, n_sentences=(50, 50), seed=0)
        bad = type(spec)(
            templates=spec.templates,
            source_nouns=spec.source_nouns,
            source_triggers=spec.source_triggers,
            target_nouns=spec.target_nouns,
            target_triggers=spec.target_triggers,
            densities=(0.9, 0.1),
        )
        with pytest.raises(ValidationError, match="achievable"):
            make_synthetic_pair(bad, seed=0)
