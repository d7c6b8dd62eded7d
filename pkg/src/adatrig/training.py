"""Training loops: supervised, adversarial (gradient-reversal), feature
augmentation, and finetuning on labeled fractions.

Every source of randomness is a named stream derived from the config seed,
so adding the adversarial branch does not perturb the task stream: with
lambda = 0 the representation learner and event classifier follow exactly
the same trajectory as plain supervised training.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .corpus import Corpus, sample_labeled_fraction
from .errors import AdatrigError, ValidationError
from .evaluation import EvalReport, score
from .features import Batch, FeatureSpace, collate, encode_sentence, random_embeddings
from .nets import (
    BILSTM,
    LSTM,
    POS,
    FedaModel,
    TriggerModel,
    sequence_cross_entropy,
    token_cross_entropy,
    weighted_sentence_cross_entropy,
)
from .util import rng_stream

log = logging.getLogger("adatrig")

LAMBDA_GRID = (0.1, 0.2, 0.5, 1.0, 2.0, 5.0)


@dataclass
class AdaConfig:
    """All training hyperparameters in one place."""

    lambda_: float = 1.0
    batch_size: int = 16
    max_epochs: int = 1000
    finetune_epochs: int = 10
    patience: int = 25
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    pooling: str = "mean"
    seed: int = 0
    hidden: int = 100
    input_dropout: float = 0.5
    embed_init_scale: float = 0.25
    max_grad_norm: float | None = None
    domain_loss_domains: str = "both"  # or "source_only"
    lambda_grid: tuple = LAMBDA_GRID

    def __post_init__(self):
        if self.lambda_ < 0:
            raise ValidationError(f"lambda must be non-negative, got {self.lambda_}")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if self.patience < 1:
            raise ValidationError("patience must be >= 1")
        if self.max_epochs < 0:
            raise ValidationError("max_epochs must be >= 0")
        if self.optimizer != "adam":
            raise ValidationError(f"unsupported optimizer {self.optimizer!r}")
        if self.domain_loss_domains not in ("both", "source_only"):
            raise ValidationError(f"unknown domain_loss_domains {self.domain_loss_domains!r}")


class Adam:
    """Adaptive-moment optimizer with default rate settings."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, max_grad_norm=None):
        self.params = [p for p in params if p.trainable]
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.max_grad_norm = max_grad_norm
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def step(self):
        if self.max_grad_norm is not None:
            total = np.sqrt(sum(float((p.grad**2).sum()) for p in self.params))
            if total > self.max_grad_norm:
                scale = self.max_grad_norm / (total + 1e-12)
                for p in self.params:
                    p.grad *= scale
        self.t += 1
        bc1 = 1.0 - self.b1**self.t
        bc2 = 1.0 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * p.grad
            v *= self.b2
            v += (1.0 - self.b2) * p.grad**2
            p.value -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


@dataclass
class TrainLogEntry:
    epoch: int
    task_loss: float
    domain_loss: float | None
    domain_acc: float | None
    dev_f1: float
    wall_time: float
    heldout_domain_acc: float | None = None

    def as_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "task_loss": self.task_loss,
            "domain_loss": self.domain_loss,
            "domain_acc": self.domain_acc,
            "dev_f1": self.dev_f1,
            "wall_time": self.wall_time,
            "heldout_domain_acc": self.heldout_domain_acc,
        }


@dataclass
class TrainResult:
    model: object
    log: list[TrainLogEntry]
    best_epoch: int
    best_dev_f1: float
    final_snapshot: dict | None = None  # last-epoch params (best is in .model)


class EarlyStopper:
    """Track the best dev score and say when patience has run out."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best_f1 = -1.0
        self.best_epoch = -1
        self.best_snapshot = None

    def update(self, epoch: int, f1: float, snapshot_fn) -> bool:
        # ties keep the latest epoch: on a plateau, later checkpoints have
        # seen more adaptation at no dev cost
        if f1 >= self.best_f1:
            self.best_f1 = f1
            self.best_epoch = epoch
            self.best_snapshot = snapshot_fn()
            return True
        return False

    def should_stop(self, epoch: int) -> bool:
        return epoch - self.best_epoch >= self.patience


def _append_entry(entries: list[TrainLogEntry], entry: TrainLogEntry):
    if entries and entry.epoch <= entries[-1].epoch:
        raise AdatrigError("train log epochs must be strictly increasing")
    for value in (entry.task_loss, entry.domain_loss):
        if value is not None and not np.isfinite(value):
            raise AdatrigError(
                f"non-finite loss at epoch {entry.epoch}: task={entry.task_loss} "
                f"domain={entry.domain_loss}"
            )
    entries.append(entry)


# ---------------------------------------------------------------------------
# Encoding / batching helpers
# ---------------------------------------------------------------------------


def _encode_all(sentences, feats: FeatureSpace, with_tags: bool, domain: int | None = None):
    return [
        encode_sentence(
            s,
            feats.vocab,
            feats.plan,
            store=feats.store,
            pos_vocab=feats.pos_vocab,
            with_tags=with_tags,
            domain=domain,
        )
        for s in sentences
    ]


def _batches(encoded, order, batch_size, plan):
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        yield collate([encoded[i] for i in idx], plan)


class _CyclingPool:
    """Endless sentence stream over a pool, reshuffled each full pass."""

    def __init__(self, encoded, rng):
        if not encoded:
            raise ValidationError("cannot cycle over an empty pool")
        self.encoded = encoded
        self.rng = rng
        self._order: list[int] = []
        self._pos = 0

    def take(self, n: int) -> list:
        out = []
        while len(out) < n:
            if self._pos >= len(self._order):
                self._order = list(self.rng.permutation(len(self.encoded)))
                self._pos = 0
            out.append(self.encoded[self._order[self._pos]])
            self._pos += 1
        return out


class _MixedDomainStream:
    """Domain-balanced batches: half source, half target, whatever the pool
    sizes are. Keeps the adversary's class prior at 0.5 so the reversed
    gradient encodes domain evidence, not corpus-size imbalance."""

    def __init__(self, source_encoded, target_encoded, batch_size, plan, rng_src, rng_tgt):
        self.src = _CyclingPool(source_encoded, rng_src)
        self.tgt = _CyclingPool(target_encoded, rng_tgt)
        self.batch_size = batch_size
        self.plan = plan

    def next(self) -> Batch:
        n_src = (self.batch_size + 1) // 2
        n_tgt = max(1, self.batch_size - n_src)
        return collate(self.src.take(n_src) + self.tgt.take(n_tgt), self.plan)


class _CyclingBatches:
    """Endless batch stream over one pool, reshuffled each full pass."""

    def __init__(self, encoded, batch_size, plan, rng):
        self.pool = _CyclingPool(encoded, rng)
        self.batch_size = batch_size
        self.plan = plan

    def next(self) -> Batch:
        return collate(self.pool.take(self.batch_size), self.plan)


class _PreparedEval:
    """Pre-encoded evaluation set for cheap per-epoch scoring."""

    def __init__(self, sentences, feats: FeatureSpace, batch_size: int = 64):
        self.gold = [list(s.tags) for s in sentences]
        self.batches = []
        encoded = _encode_all(sentences, feats, with_tags=False)
        for start in range(0, len(encoded), batch_size):
            self.batches.append(collate(encoded[start : start + batch_size], feats.plan))

    def evaluate(self, model, domain: int | None = None) -> EvalReport:
        pred = []
        for batch in self.batches:
            if domain is None:
                rows = model.predict_batch(batch)
            else:
                rows = model.predict_batch(batch, domain)
            for row, length in zip(rows, batch.lengths):
                pred.append([int(v) for v in row[:length]])
        return score(pred, self.gold)


def build_trigger_model(
    kind: str,
    feats: FeatureSpace,
    cfg: AdaConfig,
    with_domain_head: bool,
    word_table=None,
    pos_table=None,
) -> TriggerModel:
    """Construct a model, creating random embedding tables where none are given."""
    if kind in (LSTM, BILSTM, POS) and word_table is None:
        word_table = random_embeddings(
            feats.vocab, feats.plan.word_dim, cfg.embed_init_scale, cfg.seed
        )
    if kind == POS and pos_table is None:
        if feats.pos_vocab is None:
            raise ValidationError("POS learner requires a pos_vocab in the feature space")
        pos_table = random_embeddings(feats.pos_vocab, feats.plan.pos_dim, 0.05, cfg.seed)
    return TriggerModel(
        kind,
        feats,
        hidden=cfg.hidden,
        lambda_=cfg.lambda_,
        pooling=cfg.pooling,
        input_dropout=cfg.input_dropout,
        with_domain_head=with_domain_head,
        seed=cfg.seed,
        word_table=word_table,
        pos_table=pos_table,
    )


# ---------------------------------------------------------------------------
# Supervised training
# ---------------------------------------------------------------------------


def train_supervised(
    kind: str,
    source: Corpus,
    cfg: AdaConfig,
    feats: FeatureSpace,
    word_table=None,
    pos_table=None,
) -> TrainResult:
    """Minimize token cross-entropy on the source train split, early-stopping
    on source-dev F1; returns the best-dev checkpoint."""
    model = build_trigger_model(kind, feats, cfg, with_domain_head=False,
                                word_table=word_table, pos_table=pos_table)
    model.train_domain = source.name
    return _fit_task(model, source, cfg, feats)


def _fit_task(model: TriggerModel, source: Corpus, cfg: AdaConfig, feats: FeatureSpace,
              domain_stream: _CyclingBatches | None = None,
              heldout_probe: _PreparedEval | None = None,
              probe_fn=None) -> TrainResult:
    train_sents = source.split("train")
    dev_sents = source.split("dev")
    if not train_sents:
        raise ValidationError(f"corpus {source.name!r} has no train split")
    if not dev_sents:
        raise ValidationError(f"corpus {source.name!r} has no dev split")

    encoded = _encode_all(train_sents, feats, with_tags=True)
    dev_eval = _PreparedEval(dev_sents, feats)
    opt = Adam(model.trainable_params(), lr=cfg.learning_rate, max_grad_norm=cfg.max_grad_norm)
    rng_order = rng_stream(cfg.seed, "order", "task")
    rng_drop = rng_stream(cfg.seed, "drop", "task")
    rng_drop_domain = rng_stream(cfg.seed, "drop", "domain")
    stopper = EarlyStopper(cfg.patience)
    entries: list[TrainLogEntry] = []

    if cfg.max_epochs == 0:
        log.warning("max_epochs=0: returning the initialized model")
        return TrainResult(model, entries, best_epoch=0, best_dev_f1=float("nan"))

    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        order = rng_order.permutation(len(encoded))
        task_sum = 0.0
        dom_sum = 0.0
        dom_hits = 0
        dom_total = 0
        n_batches = 0
        for batch in _batches(encoded, order, cfg.batch_size, feats.plan):
            model.zero_grads()
            logits, cache = model.task_forward(batch, train=True, rng=rng_drop)
            loss, dlogits = token_cross_entropy(logits, batch.tags, batch.mask)
            model.task_backward(dlogits, cache)
            task_sum += loss
            n_batches += 1
            if domain_stream is not None:
                mixed = domain_stream.next()
                d_logits, d_cache = model.domain_forward(mixed, train=True, rng=rng_drop_domain)
                d_loss, d_dlogits = sequence_cross_entropy(d_logits, mixed.domains)
                model.domain_backward(d_dlogits, d_cache)
                dom_sum += d_loss
                dom_hits += int((d_logits.argmax(axis=1) == mixed.domains).sum())
                dom_total += mixed.size
                if probe_fn is not None:
                    probe_fn(model, opt)
            opt.step()

        dev_f1 = dev_eval.evaluate(model).f1
        heldout_acc = None
        if heldout_probe is not None:
            heldout_acc = heldout_probe(model)
        entry = TrainLogEntry(
            epoch=epoch,
            task_loss=task_sum / max(1, n_batches),
            domain_loss=(dom_sum / max(1, n_batches)) if domain_stream is not None else None,
            domain_acc=(dom_hits / dom_total) if dom_total else None,
            dev_f1=dev_f1,
            wall_time=time.perf_counter() - t0,
            heldout_domain_acc=heldout_acc,
        )
        _append_entry(entries, entry)
        stopper.update(epoch, dev_f1, model.snapshot)
        if stopper.should_stop(epoch):
            break

    final_snapshot = model.snapshot()
    if stopper.best_snapshot is not None:
        model.restore(stopper.best_snapshot)
    model.trained = True
    return TrainResult(model, entries, stopper.best_epoch, stopper.best_f1, final_snapshot)


# ---------------------------------------------------------------------------
# Adversarial training
# ---------------------------------------------------------------------------


def unlabeled_sequences(corpus: Corpus, split: str = "train"):
    """Token sequences of a split, with tags stripped away."""
    return [s.tokens for s in corpus.split(split)]


def train_ada(
    kind: str,
    source: Corpus,
    target_unlabeled,
    cfg: AdaConfig,
    feats: FeatureSpace,
    word_table=None,
    pos_table=None,
) -> TrainResult:
    """Adversarial domain adaptation.

    Each step draws one labeled source batch (event loss) and one mixed
    source/target batch routed through pool -> gradient reversal -> domain
    predictor. The predictor itself receives plain gradients and learns to
    separate the domains, while the reversed path pushes the representation
    learner toward domain-invariant features. Target items contribute token
    sequences only; their tags (if any exist) are never read.
    """
    if not target_unlabeled:
        raise ValidationError("train_ada requires unlabeled target sequences")
    model = build_trigger_model(kind, feats, cfg, with_domain_head=True,
                                word_table=word_table, pos_table=pos_table)
    model.train_domain = source.name

    source_encoded = _encode_all(source.split("train"), feats, with_tags=False, domain=0)
    target_encoded = [
        encode_sentence(
            item, feats.vocab, feats.plan, store=feats.store,
            pos_vocab=feats.pos_vocab, with_tags=False, domain=1,
        )
        for item in target_unlabeled
    ]
    stream = _MixedDomainStream(
        source_encoded,
        target_encoded,
        cfg.batch_size,
        feats.plan,
        rng_stream(cfg.seed, "order", "mixed-src"),
        rng_stream(cfg.seed, "order", "mixed-tgt"),
    )

    probe_fn = None
    if cfg.domain_loss_domains == "source_only":
        # Domain-invariance pressure only from source sequences: the mixed
        # batch trains the predictor with a zeroed reversal (no learner
        # gradient), and an extra source-only batch runs through the live GRL.
        src_stream = _CyclingBatches(
            source_encoded, cfg.batch_size, feats.plan, rng_stream(cfg.seed, "order", "grl-src")
        )
        rng_drop_src = rng_stream(cfg.seed, "drop", "grl-src")

        def probe_fn(m, _opt, _stream=src_stream, _rng=rng_drop_src, _lam=cfg.lambda_):
            batch = _stream.next()
            m.grl.lambda_ = _lam
            try:
                logits, cache = m.domain_forward(batch, train=True, rng=_rng)
                _, dlogits = sequence_cross_entropy(logits, batch.domains)
                # freeze the predictor for this pass: only the reversed path matters
                head_params = m.domain_head.params()
                saved = [p.grad.copy() for p in head_params]
                m.domain_backward(dlogits, cache)
                for p, g in zip(head_params, saved):
                    p.grad[...] = g
            finally:
                m.grl.lambda_ = 0.0

        model.grl.lambda_ = 0.0  # mixed batches train the predictor only
        result = _fit_task(model, source, cfg, feats, domain_stream=stream, probe_fn=probe_fn)
        model.grl.lambda_ = cfg.lambda_
        return result

    return _fit_task(model, source, cfg, feats, domain_stream=stream)


def domain_probe_accuracy(model: TriggerModel, source_sents, target_sents, feats: FeatureSpace,
                          batch_size: int = 64) -> float:
    """Accuracy of the trained domain predictor on held-out sequences."""
    if model.domain_head is None:
        raise ValidationError("model has no domain head")
    hits = 0
    total = 0
    for sents, domain in ((source_sents, 0), (target_sents, 1)):
        encoded = _encode_all(sents, feats, with_tags=False, domain=domain)
        for start in range(0, len(encoded), batch_size):
            batch = collate(encoded[start : start + batch_size], feats.plan)
            logits, _ = model.domain_forward(batch, train=False)
            hits += int((logits.argmax(axis=1) == domain).sum())
            total += batch.size
    return hits / total


# ---------------------------------------------------------------------------
# Feature augmentation (supervised adaptation ceiling)
# ---------------------------------------------------------------------------


def train_feda(
    kind: str,
    source: Corpus,
    target_labeled: Corpus | None,
    cfg: AdaConfig,
    feats: FeatureSpace,
    word_table=None,
    pos_table=None,
) -> TrainResult:
    """Joint training on both labeled domains with triplicated extractors."""
    if kind in (LSTM, BILSTM, POS) and word_table is None:
        word_table = random_embeddings(
            feats.vocab, feats.plan.word_dim, cfg.embed_init_scale, cfg.seed
        )
    if kind == POS and pos_table is None:
        pos_table = random_embeddings(feats.pos_vocab, feats.plan.pos_dim, 0.05, cfg.seed)
    model = FedaModel(
        kind,
        feats,
        hidden=cfg.hidden,
        input_dropout=cfg.input_dropout,
        seed=cfg.seed,
        word_table=word_table,
        pos_table=pos_table,
    )
    model.train_domain = source.name

    src_train = source.split("train")
    tgt_train = target_labeled.split("train") if target_labeled is not None else []
    if not src_train:
        raise ValidationError("FEDA needs source train sentences")
    encoded = _encode_all(src_train, feats, with_tags=True, domain=0) + _encode_all(
        tgt_train, feats, with_tags=True, domain=1
    )

    src_dev = source.split("dev")
    tgt_dev = target_labeled.split("dev") if target_labeled is not None else []
    if not src_dev and not tgt_dev:
        raise ValidationError("FEDA needs at least one dev split")
    src_dev_eval = _PreparedEval(src_dev, feats) if src_dev else None
    tgt_dev_eval = _PreparedEval(tgt_dev, feats) if tgt_dev else None

    def pooled_dev_f1() -> float:
        tp = fp = fn = 0
        for ev, domain in ((src_dev_eval, 0), (tgt_dev_eval, 1)):
            if ev is None:
                continue
            rep = ev.evaluate(model, domain=domain)
            tp += rep.tp
            fp += rep.fp
            fn += rep.fn
        return EvalReport(tp, fp, fn).f1

    opt = Adam(model.trainable_params(), lr=cfg.learning_rate, max_grad_norm=cfg.max_grad_norm)
    rng_order = rng_stream(cfg.seed, "order", "feda")
    rng_drop = rng_stream(cfg.seed, "drop", "feda")
    stopper = EarlyStopper(cfg.patience)
    entries: list[TrainLogEntry] = []

    if cfg.max_epochs == 0:
        log.warning("max_epochs=0: returning the initialized model")
        return TrainResult(model, entries, best_epoch=0, best_dev_f1=float("nan"))

    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        order = rng_order.permutation(len(encoded))
        task_sum = 0.0
        n_batches = 0
        for batch in _batches(encoded, order, cfg.batch_size, feats.plan):
            model.zero_grads()
            logits, cache = model.forward(batch, batch.domains, train=True, rng=rng_drop)
            loss, dlogits = token_cross_entropy(logits, batch.tags, batch.mask)
            model.backward(dlogits, cache)
            opt.step()
            task_sum += loss
            n_batches += 1
        dev_f1 = pooled_dev_f1()
        _append_entry(
            entries,
            TrainLogEntry(epoch, task_sum / max(1, n_batches), None, None, dev_f1,
                          time.perf_counter() - t0),
        )
        stopper.update(epoch, dev_f1, model.snapshot)
        if stopper.should_stop(epoch):
            break

    final_snapshot = model.snapshot()
    if stopper.best_snapshot is not None:
        model.restore(stopper.best_snapshot)
    model.trained = True
    return TrainResult(model, entries, stopper.best_epoch, stopper.best_f1, final_snapshot)


# ---------------------------------------------------------------------------
# Finetuning
# ---------------------------------------------------------------------------


def finetune(
    model: TriggerModel,
    labeled_target: Corpus,
    cfg: AdaConfig,
    seed_tag: int = 0,
    loss_mode: str = "token_mean",
) -> TriggerModel:
    """Continue training (a copy of) the model on labeled target sentences for
    cfg.finetune_epochs epochs with no early stopping; returns the final model."""
    sentences = labeled_target.split("train")
    if not sentences:
        raise ValidationError("finetune requires a non-empty labeled corpus")
    tuned = model.clone()
    if cfg.finetune_epochs == 0:
        return tuned
    feats = tuned.feats
    encoded = _encode_all(sentences, feats, with_tags=True)
    opt = Adam(tuned.trainable_params(), lr=cfg.learning_rate, max_grad_norm=cfg.max_grad_norm)
    rng_order = rng_stream(cfg.seed, "finetune-order", seed_tag)
    rng_drop = rng_stream(cfg.seed, "finetune-drop", seed_tag)
    m = len(sentences)
    for _epoch in range(cfg.finetune_epochs):
        order = rng_order.permutation(len(encoded))
        for batch in _batches(encoded, order, cfg.batch_size, feats.plan):
            tuned.zero_grads()
            logits, cache = tuned.task_forward(batch, train=True, rng=rng_drop)
            if loss_mode == "sentence_sum":
                weights = np.full(batch.size, 1.0 / m)
                _, dlogits = weighted_sentence_cross_entropy(
                    logits, batch.tags, batch.mask, weights
                )
            else:
                _, dlogits = token_cross_entropy(logits, batch.tags, batch.mask)
            tuned.task_backward(dlogits, cache)
            opt.step()
    tuned.trained = True
    return tuned


@dataclass
class CurveRow:
    percent: float
    mean_f1: float
    std_f1: float
    per_seed: list[float] = field(default_factory=list)


@dataclass
class CurveReport:
    rows: list[CurveRow] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "rows": [
                {
                    "percent": r.percent,
                    "mean_f1": r.mean_f1,
                    "std_f1": r.std_f1,
                    "per_seed": r.per_seed,
                }
                for r in self.rows
            ]
        }


def run_finetune_sweep(
    model: TriggerModel,
    target: Corpus,
    percents,
    seeds,
    cfg: AdaConfig,
) -> CurveReport:
    """Finetune on sampled labeled fractions and report the F1 curve.

    For a fixed seed the sampled subsets are nested across percents (the
    sampler takes a prefix of one permutation), which keeps the curve
    comparison within a seed apples-to-apples.
    """
    report = CurveReport()
    if not percents:
        log.warning("empty percent list: nothing to sweep")
        return report
    for percent in percents:
        if not 0 < percent < 1:
            raise ValidationError(f"percent {percent} outside (0, 1)")
    test_eval = _PreparedEval(target.split("test"), model.feats)
    for percent in percents:
        f1s = []
        for seed in seeds:
            labeled, _rest = sample_labeled_fraction(target, percent, seed)
            tuned = finetune(model, labeled, cfg, seed_tag=seed)
            f1s.append(test_eval.evaluate(tuned).f1)
        report.rows.append(
            CurveRow(percent, float(np.mean(f1s)), float(np.std(f1s)), f1s)
        )
    return report
