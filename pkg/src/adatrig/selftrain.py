"""Teacher/student self-training on a labeled fraction plus pseudo-labels.

The pipeline: finetune the teacher on the small gold subset, tag the
remaining unlabeled sentences with it, then train a fresh student on both
sets with each loss term normalized by its own dataset size. The labeling
step can be repeated with the updated student as the labeler.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace as dc_replace

import numpy as np

from .corpus import Corpus, TaggedSentence, sample_partition
from .errors import ValidationError
from .evaluation import EvalReport
from .features import FeatureSpace, collate
from .nets import CONTEXTUAL_KIND, TriggerModel
from .training import (
    Adam,
    AdaConfig,
    EarlyStopper,
    _PreparedEval,
    _batches,
    _encode_all,
    build_trigger_model,
    finetune,
    weighted_sentence_cross_entropy,
)
from .util import rng_stream

log = logging.getLogger("adatrig")


@dataclass
class SelfTrainSpec:
    teacher: TriggerModel
    cfg: AdaConfig
    labeled_fraction: float = 0.01
    iterations: int = 1
    student_kind: str = CONTEXTUAL_KIND
    student_max_epochs: int | None = None

    def __post_init__(self):
        if not 0 < self.labeled_fraction < 1:
            raise ValidationError(
                f"labeled_fraction must be in (0, 1), got {self.labeled_fraction}"
            )
        if self.iterations < 1:
            raise ValidationError("iterations must be >= 1")
        if self.teacher is None:
            raise ValidationError("self-training requires a teacher model")


@dataclass
class SelfTrainResult:
    student: TriggerModel
    report: EvalReport
    teacher_report: EvalReport
    iteration_reports: list[dict] = field(default_factory=list)
    pseudo_corpus: Corpus | None = None
    n_label_passes: int = 0


def pseudo_label(model, sentences) -> list[TaggedSentence]:
    """Hard argmax tags for every sentence; exact ties resolve to O.

    Accepts tagged sentences or bare token sequences; gold tags, when
    present, are never read.
    """
    if not getattr(model, "trained", False):
        raise ValidationError("cannot pseudo-label with an untrained model")
    preds = model.predict(sentences)
    out = []
    for i, (item, tags) in enumerate(zip(sentences, preds)):
        tokens = tuple(item.tokens) if hasattr(item, "tokens") else tuple(item)
        doc_id = getattr(item, "doc_id", "pseudo")
        sent_index = getattr(item, "sent_index", i)
        out.append(TaggedSentence(doc_id, sent_index, tokens, tuple(tags)))
    return out


def _train_student(
    kind: str,
    labeled: list[TaggedSentence],
    pseudo: list[TaggedSentence],
    dev_eval: _PreparedEval,
    cfg: AdaConfig,
    feats: FeatureSpace,
) -> TriggerModel:
    """Fit a fresh student on gold + pseudo-labeled data.

    Per-sentence losses are summed token NLLs weighted 1/m for the gold set
    and 1/n for the pseudo set, so one epoch sums to the two-term objective.
    """
    model = build_trigger_model(kind, feats, cfg, with_domain_head=False)
    m, n = len(labeled), len(pseudo)
    encoded = _encode_all(labeled, feats, with_tags=True) + _encode_all(
        pseudo, feats, with_tags=True
    )
    weights = np.array([1.0 / m] * m + [1.0 / n] * n)

    opt = Adam(model.trainable_params(), lr=cfg.learning_rate, max_grad_norm=cfg.max_grad_norm)
    rng_order = rng_stream(cfg.seed, "order", "student")
    rng_drop = rng_stream(cfg.seed, "drop", "student")
    stopper = EarlyStopper(cfg.patience)
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng_order.permutation(len(encoded))
        pos = 0
        while pos < len(order):
            idx = order[pos : pos + cfg.batch_size]
            pos += cfg.batch_size
            batch_enc = [encoded[i] for i in idx]
            batch = collate(batch_enc, feats.plan)
            model.zero_grads()
            logits, cache = model.task_forward(batch, train=True, rng=rng_drop)
            _, dlogits = weighted_sentence_cross_entropy(
                logits, batch.tags, batch.mask, weights[idx]
            )
            model.task_backward(dlogits, cache)
            opt.step()
        stopper.update(epoch, dev_eval.evaluate(model).f1, model.snapshot)
        if stopper.should_stop(epoch):
            break
    if stopper.best_snapshot is not None:
        model.restore(stopper.best_snapshot)
    model.trained = True
    return model


def self_train(spec: SelfTrainSpec, target: Corpus, feats: FeatureSpace) -> SelfTrainResult:
    """Run the full teacher/student procedure on the target corpus.

    The target train split partitions into a gold fraction and an unlabeled
    rest; the student never sees gold tags of the unlabeled part (only the
    generated labels), which the structure here makes impossible by
    construction: unlabeled sentences flow through token-only paths.
    """
    if not getattr(spec.teacher, "trained", False):
        raise ValidationError("self-training requires a trained teacher")
    train_sents = target.split("train")
    if not train_sents:
        raise ValidationError(f"corpus {target.name!r} has no train split")
    if not target.split("dev"):
        raise ValidationError(f"corpus {target.name!r} needs a dev split for model selection")
    labeled_idx, rest_idx = sample_partition(
        len(train_sents), spec.labeled_fraction, rng_stream(spec.cfg.seed, "selftrain-partition")
    )
    if not rest_idx:
        raise ValidationError("unlabeled pool is empty: labeled fraction too large")
    gold = [train_sents[i] for i in labeled_idx]
    unlabeled = [train_sents[i] for i in rest_idx]

    gold_docs = tuple(sorted({s.doc_id for s in gold}))
    gold_corpus = Corpus(f"{target.name}-gold", tuple(gold), {"train": gold_docs})

    cfg = spec.cfg
    teacher = finetune(spec.teacher, gold_corpus, cfg, loss_mode="sentence_sum")
    teacher.trained = True

    dev_eval = _PreparedEval(target.split("dev"), feats)
    test_eval = _PreparedEval(target.split("test"), feats)
    teacher_report = test_eval.evaluate(teacher)

    labeler = teacher
    student = None
    pseudo: list[TaggedSentence] = []
    iteration_reports: list[dict] = []
    passes = 0
    for iteration in range(1, spec.iterations + 1):
        pseudo = pseudo_label(labeler, unlabeled)
        passes += 1
        student_seed = int(rng_stream(cfg.seed, "selftrain-student", iteration).integers(2**31))
        student_cfg = dc_replace(
            cfg,
            seed=student_seed,
            max_epochs=spec.student_max_epochs or cfg.max_epochs,
        )
        student = _train_student(spec.student_kind, gold, pseudo, dev_eval, student_cfg, feats)
        student_report = test_eval.evaluate(student)
        iteration_reports.append(
            {
                "iteration": iteration,
                "student_f1": student_report.f1,
                "student_precision": student_report.precision,
                "student_recall": student_report.recall,
            }
        )
        labeler = student

    pseudo_docs = tuple(sorted({s.doc_id for s in pseudo}))
    pseudo_corpus = Corpus(f"{target.name}-pseudo", tuple(pseudo), {"train": pseudo_docs})
    final_report = test_eval.evaluate(student)
    return SelfTrainResult(
        student=student,
        report=EvalReport(
            final_report.tp, final_report.fp, final_report.fn,
            dataset=target.name, model_id="student",
        ),
        teacher_report=EvalReport(
            teacher_report.tp, teacher_report.fp, teacher_report.fn,
            dataset=target.name, model_id="teacher",
        ),
        iteration_reports=iteration_reports,
        pseudo_corpus=pseudo_corpus,
        n_label_passes=passes,
    )
