import numpy as np
import pytest

from adatrig.corpus import Corpus
from adatrig.errors import ValidationError
from adatrig.evaluation import (
    EvalReport,
    TransferMatrix,
    build_transfer_matrix,
    export_disagreements,
    score,
    write_disagreements,
)
from adatrig.util import pct

from conftest import make_sentence


def brute_force_counts(pred, gold, masks):
    """Independent oracle: enumerate tokens and count tp/fp/fn directly."""
    tp = fp = fn = 0
    for p_seq, g_seq, m_seq in zip(pred, gold, masks):
        for p, g, m in zip(p_seq, g_seq, m_seq):
            if not m:
                continue
            if g == "EVENT" and p == "EVENT":
                tp += 1
            elif g != "EVENT" and p == "EVENT":
                fp += 1
            elif g == "EVENT" and p != "EVENT":
                fn += 1
    return tp, fp, fn


class TestScore:
    def test_counting_example(self):
        rep = score([["O", "EVENT", "EVENT", "O"]], [["O", "EVENT", "O", "EVENT"]])
        assert (rep.tp, rep.fp, rep.fn) == (1, 1, 1)
        assert rep.precision == rep.recall == rep.f1 == 0.5

    def test_table_consistency_check(self):
        # P=85.0, R=35.0 in percentage points must display F1 49.6
        p, r = 0.85, 0.35
        f1 = 2 * p * r / (p + r)
        assert pct(f1) == 49.6

    def test_zero_denominator_rules(self):
        rep = score([["O", "O"]], [["EVENT", "O"]])
        assert rep.precision == 0.0 and rep.recall == 0.0 and rep.f1 == 0.0
        empty = EvalReport(0, 0, 0)
        assert empty.precision == empty.recall == empty.f1 == 0.0

    def test_length_mismatch_errors(self):
        with pytest.raises(ValidationError):
            score([["O", "O"]], [["O"]])
        with pytest.raises(ValidationError):
            score([["O"]], [["O"], ["O"]])

    def test_matches_bruteforce_on_1000_random_cases(self):
        rng = np.random.default_rng(2024)
        for _ in range(1000):
            n_seq = int(rng.integers(1, 5))
            pred, gold, masks = [], [], []
            for _ in range(n_seq):
                L = int(rng.integers(1, 9))
                pred.append([["O", "EVENT"][i] for i in rng.integers(0, 2, L)])
                gold.append([["O", "EVENT"][i] for i in rng.integers(0, 2, L)])
                masks.append(list(rng.integers(0, 2, L)))
            rep = score(pred, gold, masks)
            tp, fp, fn = brute_force_counts(pred, gold, masks)
            assert (rep.tp, rep.fp, rep.fn) == (tp, fp, fn)
            p = tp / (tp + fp) if tp + fp else 0.0
            r = tp / (tp + fn) if tp + fn else 0.0
            f = 2 * p * r / (p + r) if p + r else 0.0
            assert abs(rep.precision - p) < 1e-9
            assert abs(rep.recall - r) < 1e-9
            assert abs(rep.f1 - f) < 1e-9

    def test_f1_bounds_and_zero_iff_no_tp(self):
        rng = np.random.default_rng(7)
        for _ in range(300):
            tp, fp, fn = (int(x) for x in rng.integers(0, 6, 3))
            rep = EvalReport(tp, fp, fn)
            assert 0.0 <= rep.f1 <= 1.0
            assert rep.f1 <= (rep.precision + rep.recall) / 2 + 1e-12
            assert (rep.f1 == 0.0) == (tp == 0)

    def test_masked_tokens_never_alter_counts(self):
        pred = [["EVENT", "O", "EVENT"]]
        gold = [["EVENT", "EVENT", "O"]]
        base = score(pred, gold)
        # pad every sequence with masked garbage
        pred2 = [pred[0] + ["EVENT", "EVENT"]]
        gold2 = [gold[0] + ["O", "EVENT"]]
        masks2 = [[1, 1, 1, 0, 0]]
        padded = score(pred2, gold2, masks2)
        assert (base.tp, base.fp, base.fn) == (padded.tp, padded.fp, padded.fn)

    def test_integer_tag_encoding_accepted(self):
        rep = score([[1, 0, 1]], [[1, 1, 0]])
        assert (rep.tp, rep.fp, rep.fn) == (1, 1, 1)


class _FixedModel:
    """Predicts a fixed tag for every token; optionally misses a given word."""

    def __init__(self, tag="O", hit_words=()):
        self.tag = tag
        self.hit_words = set(hit_words)
        self.train_domain = None

    def predict(self, sentences, batch_size=64):
        out = []
        for s in sentences:
            out.append(
                ["EVENT" if t.surface in self.hit_words else self.tag for t in s.tokens]
            )
        return out


def two_domain_corpora():
    src = Corpus(
        "src",
        (
            make_sentence("a0", 0, ["x", "boom"], ["O", "EVENT"]),
            make_sentence("a1", 0, ["y", "boom"], ["O", "EVENT"]),
            make_sentence("a2", 0, ["z", "pop"], ["O", "EVENT"]),
        ),
        {"train": ("a0",), "dev": ("a1",), "test": ("a2",)},
    )
    tgt = Corpus(
        "tgt",
        (
            make_sentence("b0", 0, ["u", "crash"], ["O", "EVENT"]),
            make_sentence("b1", 0, ["v", "crash"], ["O", "EVENT"]),
            make_sentence("b2", 0, ["w", "thud"], ["O", "EVENT"]),
        ),
        {"train": ("b0",), "dev": ("b1",), "test": ("b2",)},
    )
    return src, tgt


class TestTransferMatrix:
    def test_two_models_two_domains_four_cells(self):
        src, tgt = two_domain_corpora()
        m1 = _FixedModel(hit_words={"pop", "thud"})
        m1.train_domain = "src"
        m2 = _FixedModel(hit_words={"pop"})
        m2.train_domain = "tgt"
        matrix = build_transfer_matrix({"m1": m1, "m2": m2}, {"src": src, "tgt": tgt})
        assert len(matrix.cells) == 4
        assert matrix.get("m1", "src").f1 == 1.0
        assert matrix.get("m1", "tgt").f1 == 1.0
        assert matrix.get("m2", "tgt").f1 == 0.0

    def test_deterministic_cells(self):
        src, tgt = two_domain_corpora()
        model = _FixedModel(hit_words={"pop", "thud"})
        model.train_domain = "src"
        a = build_transfer_matrix({"m": model}, {"src": src, "tgt": tgt})
        b = build_transfer_matrix({"m": model}, {"src": src, "tgt": tgt})
        assert a.to_json() == b.to_json()

    def test_out_of_domain_all_uses_every_sentence(self):
        src, tgt = two_domain_corpora()
        model = _FixedModel(hit_words={"crash", "thud", "pop"})
        model.train_domain = "src"
        matrix = build_transfer_matrix({"m": model}, {"src": src, "tgt": tgt}, "all")
        assert matrix.get("m", "tgt").tp == 3  # all three target sentences

    def test_missing_train_domain_rejected(self):
        src, tgt = two_domain_corpora()
        with pytest.raises(ValidationError, match="train domain"):
            build_transfer_matrix({"m": _FixedModel()}, {"src": src, "tgt": tgt})

    def test_render_text_contains_rows(self):
        src, tgt = two_domain_corpora()
        model = _FixedModel(hit_words={"pop"})
        model.train_domain = "src"
        matrix = build_transfer_matrix({"mymodel": model}, {"src": src, "tgt": tgt})
        text = matrix.render_text()
        assert "mymodel" in text and "src" in text and "tgt" in text


class TestDisagreements:
    def test_identical_models_empty(self):
        src, _ = two_domain_corpora()
        model = _FixedModel(hit_words={"boom"})
        assert export_disagreements(model, model, src, 10) == []

    def test_planted_disagreement_found(self):
        src, _ = two_domain_corpora()
        miss = _FixedModel()  # predicts O everywhere
        hit = _FixedModel(hit_words={"boom"})
        rows = export_disagreements(miss, hit, src, 10)
        assert len(rows) == 2  # the two sentences containing "boom"
        assert "**boom**" in rows[0]["text"]

    def test_limit_respected(self):
        sents = tuple(
            make_sentence(f"d{i}", 0, ["x", "boom"], ["O", "EVENT"]) for i in range(80)
        )
        corpus = Corpus("c", sents)
        rows = export_disagreements(_FixedModel(), _FixedModel(hit_words={"boom"}), corpus, 50)
        assert len(rows) == 50

    def test_written_file_is_tsv(self, tmp_path):
        src, _ = two_domain_corpora()
        rows = export_disagreements(_FixedModel(), _FixedModel(hit_words={"boom"}), src, 10)
        out = tmp_path / "dis.tsv"
        write_disagreements(rows, out)
        lines = out.read_text().strip().split("\n")
        assert lines[0].split("\t") == ["doc_id", "sent_index", "token_indices", "text"]
        assert len(lines) == len(rows) + 1
