"""Token-level precision/recall/F1, transfer matrices, and disagreement export."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .corpus import Corpus, EVENT
from .errors import ValidationError
from .util import pct


@dataclass(frozen=True)
class EvalReport:
    """Counts and derived ratios for one (model, dataset) pair.

    EVENT is the positive class. Precision and recall fall back to 0 when
    their denominator is 0, which keeps F1 total and penalizes empty
    predictions.
    """

    tp: int
    fp: int
    fn: int
    dataset: str = ""
    model_id: str = ""

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if (self.tp + self.fp) else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if (self.tp + self.fn) else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if (p + r) else 0.0

    def as_dict(self) -> dict:
        return {
            "dataset": self.dataset,
            "model": self.model_id,
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
        }

    def display_row(self) -> str:
        """P/R/F1 in percentage points, one decimal."""
        return f"{pct(self.precision):5.1f} {pct(self.recall):5.1f} {pct(self.f1):5.1f}"


def score(pred, gold, masks=None, dataset: str = "", model_id: str = "") -> EvalReport:
    """Token-level binary P/R/F1 over EVENT for aligned tag sequences.

    ``pred`` and ``gold`` are lists of per-sentence tag sequences; ``masks``
    optionally marks which positions count (defaults to everything).
    """
    if len(pred) != len(gold):
        raise ValidationError(f"{len(pred)} predictions vs {len(gold)} gold sequences")
    tp = fp = fn = 0
    for i, (p_seq, g_seq) in enumerate(zip(pred, gold)):
        if len(p_seq) != len(g_seq):
            raise ValidationError(
                f"sequence {i}: {len(p_seq)} predictions vs {len(g_seq)} gold tags"
            )
        m_seq = masks[i] if masks is not None else [1] * len(g_seq)
        if len(m_seq) != len(g_seq):
            raise ValidationError(f"sequence {i}: mask length {len(m_seq)} != {len(g_seq)}")
        for p, g, m in zip(p_seq, g_seq, m_seq):
            if not m:
                continue
            p_ev = p == EVENT or p == 1
            g_ev = g == EVENT or g == 1
            if p_ev and g_ev:
                tp += 1
            elif p_ev:
                fp += 1
            elif g_ev:
                fn += 1
    return EvalReport(tp, fp, fn, dataset=dataset, model_id=model_id)


def evaluate_model(model, sentences, dataset: str = "", model_id: str = "") -> EvalReport:
    """Predict tags for gold sentences and score them."""
    pred = model.predict(sentences)
    gold = [list(s.tags) for s in sentences]
    return score(pred, gold, dataset=dataset, model_id=model_id)


@dataclass
class TransferMatrix:
    """Rows are (model, train-domain); columns are evaluation domains."""

    cells: dict[tuple[str, str], EvalReport] = field(default_factory=dict)

    def put(self, model_id: str, eval_domain: str, report: EvalReport) -> None:
        self.cells[(model_id, eval_domain)] = report

    def get(self, model_id: str, eval_domain: str) -> EvalReport:
        return self.cells[(model_id, eval_domain)]

    def to_json(self) -> dict:
        return {
            "cells": [
                {"model": m, "eval_domain": d, **r.as_dict()}
                for (m, d), r in sorted(self.cells.items())
            ]
        }

    def render_text(self) -> str:
        models = sorted({m for m, _ in self.cells})
        domains = sorted({d for _, d in self.cells})
        width = max([len(m) for m in models] + [12])
        header = " " * (width + 2) + "  ".join(f"{d:^23}" for d in domains)
        sub = " " * (width + 2) + "  ".join(f"{'P':>7} {'R':>7} {'F1':>7}" for _ in domains)
        lines = [header, sub]
        for m in models:
            cols = []
            for d in domains:
                r = self.cells.get((m, d))
                if r is None:
                    cols.append(" " * 23)
                else:
                    cols.append(f"{pct(r.precision):7.1f} {pct(r.recall):7.1f} {pct(r.f1):7.1f}")
            lines.append(f"{m:<{width}}  " + "  ".join(cols))
        return "\n".join(lines)


def build_transfer_matrix(
    models: dict[str, object],
    corpora: dict[str, Corpus],
    out_of_domain_split: str = "test",
) -> TransferMatrix:
    """Score every model on every domain.

    In-domain cells use the model's train domain's test split; out-of-domain
    cells use the other domain's evaluation set (its test split by default,
    or every sentence when ``out_of_domain_split='all'``).
    """
    matrix = TransferMatrix()
    for model_id, model in models.items():
        train_domain = getattr(model, "train_domain", None)
        if train_domain is None or train_domain not in corpora:
            raise ValidationError(f"model {model_id!r} does not declare a known train domain")
        for domain, corpus in corpora.items():
            if domain == train_domain:
                sentences = corpus.split("test")
            elif out_of_domain_split == "all":
                sentences = list(corpus.sentences)
            else:
                sentences = corpus.split(out_of_domain_split)
            if not sentences:
                raise ValidationError(f"corpus {domain!r} has no evaluation sentences")
            matrix.put(model_id, domain, evaluate_model(model, sentences, domain, model_id))
    return matrix


def write_transfer_matrix(matrix: TransferMatrix, out_dir: str | Path) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "matrix.json").write_text(
        json.dumps(matrix.to_json(), indent=2, sort_keys=True), encoding="utf-8"
    )
    (out_dir / "matrix.txt").write_text(matrix.render_text() + "\n", encoding="utf-8")


def export_disagreements(model_a, model_b, corpus: Corpus, limit: int = 50):
    """Sentences holding a gold EVENT token that model_a misses but model_b finds.

    Each hit is rendered with the token wrapped in ``**`` markers; at most
    ``limit`` sentences are returned.
    """
    sentences = list(corpus.sentences)
    pred_a = model_a.predict(sentences)
    pred_b = model_b.predict(sentences)
    rows = []
    for sent, a_tags, b_tags in zip(sentences, pred_a, pred_b):
        hits = [
            k
            for k, (gold, a, b) in enumerate(zip(sent.tags, a_tags, b_tags))
            if gold == EVENT and a != EVENT and b == EVENT
        ]
        if not hits:
            continue
        words = [
            f"**{tok.surface}**" if k in hits else tok.surface
            for k, tok in enumerate(sent.tokens)
        ]
        rows.append(
            {
                "doc_id": sent.doc_id,
                "sent_index": sent.sent_index,
                "token_indices": hits,
                "text": " ".join(words),
            }
        )
        if len(rows) >= limit:
            break
    return rows


def write_disagreements(rows, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["\t".join(["doc_id", "sent_index", "token_indices", "text"])]
    for row in rows:
        lines.append(
            "\t".join(
                [
                    row["doc_id"],
                    str(row["sent_index"]),
                    ",".join(str(i) for i in row["token_indices"]),
                    row["text"],
                ]
            )
        )
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
