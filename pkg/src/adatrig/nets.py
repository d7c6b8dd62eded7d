"""Differentiable components: representation learners, classifier heads,
pooling, gradient reversal, and losses.

Everything runs in float64 NumPy with hand-derived backward passes; the
recurrent time loops go through adatrig.kernels (compiled when available).
Correctness of the gradients is defined by finite differences, which the
test suite checks for every component.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels
from .corpus import EVENT, OUT
from .errors import ValidationError
from .features import (
    CONTEXTUAL,
    PAD_IDX,
    STATIC,
    STATIC_POS,
    Batch,
    EmbeddingTable,
    FeaturePlan,
    FeatureSpace,
    Vocab,
    collate,
    encode_sentence,
)
from .util import rng_stream

LSTM = "LSTM"
BILSTM = "BILSTM"
POS = "POS"
CONTEXTUAL_KIND = "CONTEXTUAL"
LEARNER_KINDS = (LSTM, BILSTM, POS, CONTEXTUAL_KIND)

# feature plan kind required by each learner kind
PLAN_FOR_KIND = {
    LSTM: STATIC,
    BILSTM: STATIC,
    POS: STATIC_POS,
    CONTEXTUAL_KIND: CONTEXTUAL,
}

WEIGHT_INIT = 0.08  # uniform bound for recurrent/dense weights
FORGET_BIAS = 1.0


class Param:
    """A named trainable tensor with an accumulated gradient."""

    __slots__ = ("name", "value", "grad", "trainable")

    def __init__(self, name: str, value: np.ndarray, trainable: bool = True):
        self.name = name
        # always copy: two models built from one embedding table must not alias
        self.value = np.array(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.trainable = trainable

    def zero_grad(self):
        self.grad[...] = 0.0

    @property
    def size(self) -> int:
        return self.value.size


def _uniform(rng, shape, bound=WEIGHT_INIT):
    return rng.uniform(-bound, bound, size=shape)


class Dense:
    """y = x @ w + b over the last axis of a 2-D input."""

    def __init__(self, name: str, in_dim: int, out_dim: int, rng):
        self.w = Param(f"{name}.w", _uniform(rng, (in_dim, out_dim)))
        self.b = Param(f"{name}.b", np.zeros(out_dim))

    def forward(self, x):
        return x @ self.w.value + self.b.value, x

    def backward(self, dy, x):
        self.w.grad += x.T @ dy
        self.b.grad += dy.sum(axis=0)
        return dy @ self.w.value.T

    def params(self):
        return [self.w, self.b]


class Mlp:
    """Dense stack with ReLU between layers; the final layer is linear."""

    def __init__(self, name: str, dims: list[int], rng):
        self.layers = [
            Dense(f"{name}.l{i}", dims[i], dims[i + 1], rng) for i in range(len(dims) - 1)
        ]

    def forward(self, x):
        caches = []
        for i, layer in enumerate(self.layers):
            y, x_in = layer.forward(x)
            relu_mask = None
            if i < len(self.layers) - 1:
                relu_mask = y > 0
                y = y * relu_mask
            caches.append((x_in, relu_mask))
            x = y
        return x, caches

    def backward(self, dy, caches):
        for layer, (x_in, relu_mask) in zip(reversed(self.layers), reversed(caches)):
            if relu_mask is not None:
                dy = dy * relu_mask
            dy = layer.backward(dy, x_in)
        return dy

    def params(self):
        return [p for layer in self.layers for p in layer.params()]


class Dropout:
    """Inverted elementwise dropout on learner inputs."""

    def __init__(self, p: float):
        if not 0.0 <= p < 1.0:
            raise ValidationError(f"dropout probability {p} outside [0, 1)")
        self.p = p

    def forward(self, x, train: bool, rng):
        if not train or self.p == 0.0:
            return x, None
        keep = (rng.random(x.shape) >= self.p) / (1.0 - self.p)
        return x * keep, keep

    def backward(self, dy, keep):
        if keep is None:
            return dy
        return dy * keep


class GradientReversal:
    """Identity in the forward pass; scales gradients by -lambda in the backward."""

    def __init__(self, lambda_: float):
        if lambda_ < 0:
            raise ValidationError(f"lambda must be non-negative, got {lambda_}")
        self.lambda_ = float(lambda_)

    def forward(self, x):
        return x

    def backward(self, dy):
        return -self.lambda_ * dy


class Pooler:
    """Collapse per-token vectors into one per-sequence vector, mask-aware."""

    MODES = ("mean", "max", "last")

    def __init__(self, mode: str = "mean"):
        if mode not in self.MODES:
            raise ValidationError(f"unknown pooling mode {mode!r}")
        self.mode = mode

    def forward(self, h, mask):
        lengths = mask.sum(axis=1)
        if np.any(lengths < 1):
            raise ValidationError("cannot pool a fully masked sequence")
        m = mask[:, :, None]
        if self.mode == "mean":
            pooled = (h * m).sum(axis=1) / lengths[:, None]
            return pooled, (mask, lengths, None)
        if self.mode == "max":
            neg = np.where(m > 0, h, -np.inf)
            arg = neg.argmax(axis=1)  # (B, D)
            pooled = np.take_along_axis(h, arg[:, None, :], axis=1)[:, 0, :]
            return pooled, (mask, lengths, arg)
        last = lengths.astype(np.int64) - 1
        pooled = h[np.arange(h.shape[0]), last]
        return pooled, (mask, lengths, last)

    def backward(self, dp, h_shape, cache):
        mask, lengths, extra = cache
        B, L, D = h_shape
        dh = np.zeros(h_shape)
        if self.mode == "mean":
            dh += (dp / lengths[:, None])[:, None, :] * mask[:, :, None]
        elif self.mode == "max":
            np.put_along_axis(dh, extra[:, None, :], dp[:, None, :], axis=1)
        else:
            dh[np.arange(B), extra] = dp
        return dh


# ---------------------------------------------------------------------------
# Recurrent stacks
# ---------------------------------------------------------------------------


class LstmLayer:
    """Single-direction LSTM over a padded batch."""

    def __init__(self, name: str, in_dim: int, hidden: int, rng, reverse: bool = False):
        self.w_x = Param(f"{name}.w_x", _uniform(rng, (in_dim, 4 * hidden)))
        self.w_h = Param(f"{name}.w_h", _uniform(rng, (hidden, 4 * hidden)))
        bias = np.zeros(4 * hidden)
        bias[hidden : 2 * hidden] = FORGET_BIAS
        self.b = Param(f"{name}.b", bias)
        self.hidden = hidden
        self.in_dim = in_dim
        self.reverse = reverse

    def forward(self, x, mask):
        # time-major views; reversed direction runs the mirrored sequence
        xt = np.ascontiguousarray(x.transpose(1, 0, 2))
        mt = np.ascontiguousarray(mask.T)
        if self.reverse:
            xt = np.ascontiguousarray(xt[::-1])
            mt = np.ascontiguousarray(mt[::-1])
        preact = xt @ self.w_x.value + self.b.value
        y, hs, cs, gates, tch = kernels.lstm_forward(
            np.ascontiguousarray(preact), self.w_h.value, mt
        )
        out = y[::-1] if self.reverse else y
        cache = (xt, mt, gates, tch, hs, cs)
        return np.ascontiguousarray(out.transpose(1, 0, 2)), cache

    def backward(self, dy, cache):
        xt, mt, gates, tch, hs, cs = cache
        dyt = np.ascontiguousarray(dy.transpose(1, 0, 2))
        if self.reverse:
            dyt = np.ascontiguousarray(dyt[::-1])
        dpre, dwh = kernels.lstm_backward(dyt, self.w_h.value, mt, gates, tch, hs, cs)
        self.w_h.grad += dwh
        T, B, _ = dpre.shape
        flat_pre = dpre.reshape(T * B, -1)
        flat_x = xt.reshape(T * B, -1)
        self.w_x.grad += flat_x.T @ flat_pre
        self.b.grad += flat_pre.sum(axis=0)
        dxt = (flat_pre @ self.w_x.value.T).reshape(T, B, self.in_dim)
        if self.reverse:
            dxt = dxt[::-1]
        return np.ascontiguousarray(dxt.transpose(1, 0, 2))

    def params(self):
        return [self.w_x, self.w_h, self.b]


class RecurrentStack:
    """One or two LstmLayers; bidirectional output is the concatenation."""

    def __init__(self, name: str, in_dim: int, hidden: int, bidirectional: bool, rng):
        self.layers = [LstmLayer(f"{name}.fwd", in_dim, hidden, rng)]
        if bidirectional:
            self.layers.append(LstmLayer(f"{name}.bwd", in_dim, hidden, rng, reverse=True))
        self.out_dim = hidden * len(self.layers)
        self.in_dim = in_dim

    def forward(self, x, mask):
        outs, caches = [], []
        for layer in self.layers:
            y, cache = layer.forward(x, mask)
            outs.append(y)
            caches.append(cache)
        return np.concatenate(outs, axis=2), caches

    def backward(self, dh, caches):
        hidden = self.layers[0].hidden
        dx = None
        for i, (layer, cache) in enumerate(zip(self.layers, caches)):
            part = layer.backward(dh[:, :, i * hidden : (i + 1) * hidden], cache)
            dx = part if dx is None else dx + part
        return dx

    def params(self):
        return [p for layer in self.layers for p in layer.params()]


class ReprLearner:
    """Maps a token batch to per-token representations.

    Kinds: LSTM (unidirectional over word embeddings), BILSTM (bidirectional),
    POS (bidirectional over word + POS-tag embeddings), CONTEXTUAL
    (bidirectional over precomputed features). Input dropout is applied to the
    assembled vectors in train mode only.
    """

    def __init__(
        self,
        kind: str,
        plan: FeaturePlan,
        hidden: int,
        rng,
        word_table: EmbeddingTable | None = None,
        pos_table: EmbeddingTable | None = None,
        input_dropout: float = 0.5,
        name: str = "learner",
    ):
        if kind not in LEARNER_KINDS:
            raise ValidationError(f"unknown learner kind {kind!r}")
        if plan.kind != PLAN_FOR_KIND[kind]:
            raise ValidationError(
                f"learner kind {kind} requires a {PLAN_FOR_KIND[kind]} feature plan, "
                f"got {plan.kind}"
            )
        self.kind = kind
        self.plan = plan
        self.hidden = hidden
        self.dropout = Dropout(input_dropout)
        self.word_param = None
        self.pos_param = None
        if kind in (LSTM, BILSTM, POS):
            if word_table is None:
                raise ValidationError(f"{kind} learner requires a word embedding table")
            self.word_param = Param(f"{name}.word_emb", word_table.matrix, word_table.trainable)
        if kind == POS:
            if pos_table is None:
                raise ValidationError("POS learner requires a pos embedding table")
            self.pos_param = Param(f"{name}.pos_emb", pos_table.matrix, pos_table.trainable)
        self.stack = RecurrentStack(
            name, plan.input_dim(), hidden, bidirectional=(kind != LSTM), rng=rng
        )
        self.out_dim = self.stack.out_dim

    def _assemble(self, batch: Batch):
        if self.kind == CONTEXTUAL_KIND:
            if batch.ctx is None:
                raise ValidationError("batch has no contextual features")
            return batch.ctx
        x = self.word_param.value[batch.word_idx]
        if self.kind == POS:
            if batch.pos_idx is None:
                raise ValidationError("batch has no POS indices")
            x = np.concatenate([x, self.pos_param.value[batch.pos_idx]], axis=2)
        return x

    def forward(self, batch: Batch, train: bool, rng=None):
        x = self._assemble(batch)
        if train and rng is None and self.dropout.p > 0:
            raise ValidationError("train-mode forward requires an RNG for dropout")
        xd, keep = self.dropout.forward(x, train, rng)
        h, caches = self.stack.forward(xd, batch.mask)
        return h, (batch, keep, caches)

    def backward(self, dh, cache):
        batch, keep, caches = cache
        dx = self.stack.backward(dh, caches)
        dx = self.dropout.backward(dx, keep)
        if self.kind == CONTEXTUAL_KIND:
            return
        word_dim = self.word_param.value.shape[1]
        if self.word_param.trainable:
            flat_idx = batch.word_idx.reshape(-1)
            np.add.at(self.word_param.grad, flat_idx, dx[:, :, :word_dim].reshape(len(flat_idx), -1))
            self.word_param.grad[PAD_IDX] = 0.0
        if self.kind == POS and self.pos_param.trainable:
            flat_idx = batch.pos_idx.reshape(-1)
            np.add.at(self.pos_param.grad, flat_idx, dx[:, :, word_dim:].reshape(len(flat_idx), -1))
            self.pos_param.grad[PAD_IDX] = 0.0

    def params(self):
        out = []
        if self.word_param is not None:
            out.append(self.word_param)
        if self.pos_param is not None:
            out.append(self.pos_param)
        out.extend(self.stack.params())
        return out


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def _log_softmax(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    return shifted - lse


def token_cross_entropy(logits, tags, mask):
    """Mean per-token negative log-likelihood over unmasked positions.

    Returns (loss, dlogits) with the gradient of the mean already folded in.
    """
    if logits.shape[:2] != tags.shape or tags.shape != mask.shape:
        raise ValidationError(
            f"inconsistent shapes: logits {logits.shape}, tags {tags.shape}, mask {mask.shape}"
        )
    n = mask.sum()
    if n < 1:
        raise ValidationError("empty mask: no tokens to score")
    logp = _log_softmax(logits)
    B, L, C = logits.shape
    picked = np.take_along_axis(logp, tags[:, :, None], axis=2)[:, :, 0]
    loss = -(picked * mask).sum() / n
    dlogits = np.exp(logp)
    flat = dlogits.reshape(-1, C)
    flat[np.arange(flat.shape[0]), tags.reshape(-1)] -= 1.0
    dlogits *= (mask / n)[:, :, None]
    return loss, dlogits


def weighted_sentence_cross_entropy(logits, tags, mask, weights):
    """Per-sentence summed token NLL, combined with per-sentence weights.

    loss = sum_b weights[b] * sum_t mask[b,t] * nll[b,t]. Used by the
    self-training objective where each dataset term carries its own 1/size.
    """
    logp = _log_softmax(logits)
    B, L, C = logits.shape
    picked = np.take_along_axis(logp, tags[:, :, None], axis=2)[:, :, 0]
    per_sent = -(picked * mask).sum(axis=1)
    loss = float(per_sent @ weights)
    dlogits = np.exp(logp)
    flat = dlogits.reshape(-1, C)
    flat[np.arange(flat.shape[0]), tags.reshape(-1)] -= 1.0
    dlogits *= (mask * weights[:, None])[:, :, None]
    return loss, dlogits


def sequence_cross_entropy(logits, labels):
    """Mean negative log-likelihood for one label per sequence (domain loss)."""
    logp = _log_softmax(logits)
    B = logits.shape[0]
    loss = -logp[np.arange(B), labels].mean()
    dlogits = np.exp(logp)
    dlogits[np.arange(B), labels] -= 1.0
    dlogits /= B
    return loss, dlogits


# ---------------------------------------------------------------------------
# Spec-level operations
# ---------------------------------------------------------------------------


def represent(learner: ReprLearner, batch: Batch, train_mode: bool, rng=None):
    """Per-token representations; dropout only in train mode."""
    h, _ = learner.forward(batch, train_mode, rng)
    return h


def classify_events(event_head: Mlp, h):
    """Token-wise 2-logit scores from representations."""
    B, L, D = h.shape
    logits, _ = event_head.forward(h.reshape(B * L, D))
    return logits.reshape(B, L, -1)


def pool(pooler: Pooler, h, mask):
    pooled, _ = pooler.forward(h, mask)
    return pooled


def grl_apply(grl: GradientReversal, v):
    return grl.forward(v)


def predict_domain(domain_head: Mlp, pooled):
    logits, _ = domain_head.forward(pooled)
    return logits


# ---------------------------------------------------------------------------
# Full models
# ---------------------------------------------------------------------------


class TriggerModel:
    """Representation learner + event classifier, with an optional adversarial
    branch (pooler -> gradient reversal -> domain predictor)."""

    def __init__(
        self,
        kind: str,
        feats: FeatureSpace,
        hidden: int = 100,
        lambda_: float = 1.0,
        pooling: str = "mean",
        input_dropout: float = 0.5,
        with_domain_head: bool = False,
        seed: int = 0,
        word_table: EmbeddingTable | None = None,
        pos_table: EmbeddingTable | None = None,
    ):
        self.feats = feats
        self.kind = kind
        self.hidden = hidden
        self.pooling = pooling
        self.input_dropout = input_dropout
        self.seed = seed
        self.train_domain: str | None = None
        self.trained = False
        self.learner = ReprLearner(
            kind,
            feats.plan,
            hidden,
            rng_stream(seed, "init", "learner"),
            word_table=word_table,
            pos_table=pos_table,
            input_dropout=input_dropout,
        )
        self.event_head = Mlp(
            "event", [self.learner.out_dim, 100, 2], rng_stream(seed, "init", "event")
        )
        self.pooler = Pooler(pooling)
        self.grl = GradientReversal(lambda_)
        self.domain_head = None
        if with_domain_head:
            self.domain_head = Mlp(
                "domain",
                [self.learner.out_dim, 100, 100, 100, 2],
                rng_stream(seed, "init", "domain"),
            )

    @property
    def lambda_(self) -> float:
        return self.grl.lambda_

    def params(self):
        out = list(self.learner.params()) + self.event_head.params()
        if self.domain_head is not None:
            out += self.domain_head.params()
        return out

    def trainable_params(self):
        return [p for p in self.params() if p.trainable]

    def n_learner_params(self) -> int:
        return sum(p.size for p in self.learner.stack.params())

    def zero_grads(self):
        for p in self.params():
            p.zero_grad()

    def task_forward(self, batch: Batch, train: bool, rng=None):
        h, lcache = self.learner.forward(batch, train, rng)
        B, L, D = h.shape
        logits_flat, hcache = self.event_head.forward(h.reshape(B * L, D))
        return logits_flat.reshape(B, L, 2), (lcache, hcache, h.shape)

    def task_backward(self, dlogits, cache):
        lcache, hcache, h_shape = cache
        B, L, D = h_shape
        dh = self.event_head.backward(dlogits.reshape(B * L, -1), hcache).reshape(h_shape)
        self.learner.backward(dh, lcache)

    def domain_forward(self, batch: Batch, train: bool, rng=None):
        if self.domain_head is None:
            raise ValidationError("model has no domain head")
        h, lcache = self.learner.forward(batch, train, rng)
        pooled, pcache = self.pooler.forward(h, batch.mask)
        reversed_ = self.grl.forward(pooled)
        logits, hcache = self.domain_head.forward(reversed_)
        return logits, (lcache, pcache, hcache, h.shape)

    def domain_backward(self, dlogits, cache):
        lcache, pcache, hcache, h_shape = cache
        dpooled = self.domain_head.backward(dlogits, hcache)
        dpooled = self.grl.backward(dpooled)
        dh = self.pooler.backward(dpooled, h_shape, pcache)
        self.learner.backward(dh, lcache)

    # -- inference ---------------------------------------------------------

    def predict_batch(self, batch: Batch):
        logits, _ = self.task_forward(batch, train=False)
        # ties break toward O (strict > keeps exact ties out of EVENT)
        return (logits[:, :, 1] > logits[:, :, 0]).astype(np.int64)

    def predict(self, sentences, batch_size: int = 64):
        """Tag sequences for a list of sentences (gold tags are never read)."""
        out = []
        for start in range(0, len(sentences), batch_size):
            chunk = sentences[start : start + batch_size]
            encoded = [
                encode_sentence(
                    s,
                    self.feats.vocab,
                    self.feats.plan,
                    store=self.feats.store,
                    pos_vocab=self.feats.pos_vocab,
                    with_tags=False,
                )
                for s in chunk
            ]
            batch = collate(encoded, self.feats.plan)
            pred = self.predict_batch(batch)
            for row, length in zip(pred, batch.lengths):
                out.append([EVENT if v else OUT for v in row[:length]])
        return out

    # -- snapshots ---------------------------------------------------------

    def snapshot(self):
        return {p.name: p.value.copy() for p in self.params()}

    def restore(self, snap):
        for p in self.params():
            p.value[...] = snap[p.name]

    def clone(self) -> "TriggerModel":
        other = TriggerModel(
            self.kind,
            self.feats,
            hidden=self.hidden,
            lambda_=self.lambda_,
            pooling=self.pooling,
            input_dropout=self.input_dropout,
            with_domain_head=self.domain_head is not None,
            seed=self.seed,
            word_table=self._word_table_stub(),
            pos_table=self._pos_table_stub(),
        )
        other.restore(self.snapshot())
        other.train_domain = self.train_domain
        other.trained = self.trained
        return other

    def _word_table_stub(self):
        if self.learner.word_param is None:
            return None
        return EmbeddingTable(self.learner.word_param.value.copy(), self.learner.word_param.trainable)

    def _pos_table_stub(self):
        if self.learner.pos_param is None:
            return None
        return EmbeddingTable(self.learner.pos_param.value.copy(), self.learner.pos_param.trainable)


class FedaModel:
    """Feature-augmentation model: source-specific, target-specific, and
    general recurrent extractors over a shared embedding, with a shared
    event classifier. Source rows activate {source, general}; target rows
    activate {target, general}; the inactive extractor contributes zeros."""

    EXTRACTORS = ("src", "tgt", "gen")

    def __init__(
        self,
        kind: str,
        feats: FeatureSpace,
        hidden: int = 100,
        input_dropout: float = 0.5,
        seed: int = 0,
        word_table: EmbeddingTable | None = None,
        pos_table: EmbeddingTable | None = None,
    ):
        if kind not in LEARNER_KINDS:
            raise ValidationError(f"unknown learner kind {kind!r}")
        if feats.plan.kind != PLAN_FOR_KIND[kind]:
            raise ValidationError(f"learner kind {kind} incompatible with plan {feats.plan.kind}")
        self.feats = feats
        self.kind = kind
        self.hidden = hidden
        self.input_dropout = input_dropout
        self.seed = seed
        self.train_domain: str | None = None
        self.trained = False
        self.word_param = None
        self.pos_param = None
        if kind in (LSTM, BILSTM, POS):
            if word_table is None:
                raise ValidationError(f"{kind} model requires a word embedding table")
            self.word_param = Param("embed.word", word_table.matrix, word_table.trainable)
        if kind == POS:
            if pos_table is None:
                raise ValidationError("POS model requires a pos embedding table")
            self.pos_param = Param("embed.pos", pos_table.matrix, pos_table.trainable)
        self.dropout = Dropout(input_dropout)
        bidirectional = kind != LSTM
        self.stacks = {
            name: RecurrentStack(
                f"extractor.{name}",
                feats.plan.input_dim(),
                hidden,
                bidirectional,
                rng_stream(seed, "init", "extractor", name),
            )
            for name in self.EXTRACTORS
        }
        out_dim = self.stacks["gen"].out_dim
        self.event_head = Mlp("event", [3 * out_dim, 100, 2], rng_stream(seed, "init", "event"))
        self.out_dim = out_dim

    def _assemble(self, batch: Batch):
        if self.kind == CONTEXTUAL_KIND:
            return batch.ctx
        x = self.word_param.value[batch.word_idx]
        if self.kind == POS:
            x = np.concatenate([x, self.pos_param.value[batch.pos_idx]], axis=2)
        return x

    @staticmethod
    def _gates(domains, B):
        return {
            "src": (domains == 0).astype(np.float64)[:, None, None],
            "tgt": (domains == 1).astype(np.float64)[:, None, None],
            "gen": np.ones((B, 1, 1)),
        }

    def forward(self, batch: Batch, domains, train: bool, rng=None):
        x = self._assemble(batch)
        xd, keep = self.dropout.forward(x, train, rng)
        gates = self._gates(np.asarray(domains), batch.size)
        hs, caches = {}, {}
        for name in self.EXTRACTORS:
            h, cache = self.stacks[name].forward(xd, batch.mask)
            hs[name] = h * gates[name]
            caches[name] = cache
        h_cat = np.concatenate([hs[n] for n in self.EXTRACTORS], axis=2)
        B, L, D = h_cat.shape
        logits_flat, hcache = self.event_head.forward(h_cat.reshape(B * L, D))
        cache = (batch, keep, gates, caches, hcache, h_cat.shape)
        return logits_flat.reshape(B, L, 2), cache

    def backward(self, dlogits, cache):
        batch, keep, gates, caches, hcache, h_shape = cache
        B, L, D = h_shape
        dh_cat = self.event_head.backward(dlogits.reshape(B * L, -1), hcache).reshape(h_shape)
        dx = None
        width = self.out_dim
        for i, name in enumerate(self.EXTRACTORS):
            dh = dh_cat[:, :, i * width : (i + 1) * width] * gates[name]
            part = self.stacks[name].backward(dh, caches[name])
            dx = part if dx is None else dx + part
        dx = self.dropout.backward(dx, keep)
        if self.kind == CONTEXTUAL_KIND:
            return
        word_dim = self.word_param.value.shape[1]
        if self.word_param.trainable:
            flat = batch.word_idx.reshape(-1)
            np.add.at(self.word_param.grad, flat, dx[:, :, :word_dim].reshape(len(flat), -1))
            self.word_param.grad[PAD_IDX] = 0.0
        if self.kind == POS and self.pos_param.trainable:
            flat = batch.pos_idx.reshape(-1)
            np.add.at(self.pos_param.grad, flat, dx[:, :, word_dim:].reshape(len(flat), -1))
            self.pos_param.grad[PAD_IDX] = 0.0

    def params(self):
        out = []
        if self.word_param is not None:
            out.append(self.word_param)
        if self.pos_param is not None:
            out.append(self.pos_param)
        for name in self.EXTRACTORS:
            out.extend(self.stacks[name].params())
        out.extend(self.event_head.params())
        return out

    def trainable_params(self):
        return [p for p in self.params() if p.trainable]

    def n_extractor_params(self) -> int:
        return sum(p.size for name in self.EXTRACTORS for p in self.stacks[name].params())

    def zero_grads(self):
        for p in self.params():
            p.zero_grad()

    def predict_batch(self, batch: Batch, domain: int):
        domains = np.full(batch.size, domain, dtype=np.int64)
        logits, _ = self.forward(batch, domains, train=False)
        return (logits[:, :, 1] > logits[:, :, 0]).astype(np.int64)

    def predict(self, sentences, domain: int, batch_size: int = 64):
        out = []
        for start in range(0, len(sentences), batch_size):
            chunk = sentences[start : start + batch_size]
            encoded = [
                encode_sentence(
                    s,
                    self.feats.vocab,
                    self.feats.plan,
                    store=self.feats.store,
                    pos_vocab=self.feats.pos_vocab,
                    with_tags=False,
                )
                for s in chunk
            ]
            batch = collate(encoded, self.feats.plan)
            pred = self.predict_batch(batch, domain)
            for row, length in zip(pred, batch.lengths):
                out.append([EVENT if v else OUT for v in row[:length]])
        return out

    def snapshot(self):
        return {p.name: p.value.copy() for p in self.params()}

    def restore(self, snap):
        for p in self.params():
            p.value[...] = snap[p.name]


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

_MAGIC = b"ATCK"
_FORMAT_VERSION = 1


def _write_params(params, path: Path):
    with path.open("wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _FORMAT_VERSION, len(params)))
        for p in params:
            name = p.name.encode("utf-8")
            fh.write(struct.pack("<H", len(name)))
            fh.write(name)
            fh.write(struct.pack("<B", p.value.ndim))
            fh.write(struct.pack(f"<{p.value.ndim}I", *p.value.shape))
            fh.write(np.ascontiguousarray(p.value, dtype="<f4").tobytes())


def _read_params(path: Path) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    with path.open("rb") as fh:
        if fh.read(4) != _MAGIC:
            raise ValidationError(f"{path}: not a checkpoint parameter file")
        version, count = struct.unpack("<II", fh.read(8))
        if version != _FORMAT_VERSION:
            raise ValidationError(f"{path}: unsupported checkpoint version {version}")
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            data = np.frombuffer(fh.read(4 * int(np.prod(shape))), dtype="<f4")
            out[name] = data.reshape(shape).astype(np.float64)
    return out


def save_checkpoint(model, dirpath: str | Path, config_hash: str = "") -> None:
    """Persist a model as params.bin + model.json + vocab.json."""
    dirpath = Path(dirpath)
    dirpath.mkdir(parents=True, exist_ok=True)
    _write_params(model.params(), dirpath / "params.bin")
    feats = model.feats
    meta = {
        "model_type": "feda" if isinstance(model, FedaModel) else "trigger",
        "kind": model.kind,
        "hidden": model.hidden,
        "plan": {
            "kind": feats.plan.kind,
            "word_dim": feats.plan.word_dim,
            "pos_dim": feats.plan.pos_dim,
            "contextual_dim": feats.plan.contextual_dim,
        },
        "lambda": getattr(model, "lambda_", 0.0),
        "pooling": getattr(model, "pooling", "mean"),
        "input_dropout": model.input_dropout,
        "with_domain_head": getattr(model, "domain_head", None) is not None,
        "seed": model.seed,
        "train_domain": model.train_domain,
        "vocab_hash": feats.vocab.hash,
        "config_hash": config_hash,
        "format_version": _FORMAT_VERSION,
    }
    (dirpath / "model.json").write_text(json.dumps(meta, indent=2, sort_keys=True), encoding="utf-8")
    vocab_blob = {
        "tokens": list(feats.vocab.tokens),
        "case_fold": feats.vocab.case_fold,
        "pos_tokens": list(feats.pos_vocab.tokens) if feats.pos_vocab else None,
    }
    (dirpath / "vocab.json").write_text(json.dumps(vocab_blob, indent=2), encoding="utf-8")


def load_checkpoint(dirpath: str | Path, store=None):
    """Rebuild a model from a checkpoint directory, validating every shape."""
    dirpath = Path(dirpath)
    meta = json.loads((dirpath / "model.json").read_text(encoding="utf-8"))
    vocab_blob = json.loads((dirpath / "vocab.json").read_text(encoding="utf-8"))
    vocab = Vocab(tuple(vocab_blob["tokens"]), case_fold=vocab_blob["case_fold"])
    pos_vocab = (
        Vocab(tuple(vocab_blob["pos_tokens"])) if vocab_blob.get("pos_tokens") else None
    )
    plan = FeaturePlan(
        kind=meta["plan"]["kind"],
        word_dim=meta["plan"]["word_dim"],
        pos_dim=meta["plan"]["pos_dim"],
        contextual_dim=meta["plan"]["contextual_dim"],
    )
    feats = FeatureSpace(vocab, plan, pos_vocab=pos_vocab, store=store)
    kind = meta["kind"]

    def zero_table(dim):
        if plan.kind == CONTEXTUAL:
            return None
        return EmbeddingTable(np.zeros((len(vocab), dim)), trainable=True)

    def zero_pos_table():
        if kind != POS:
            return None
        return EmbeddingTable(np.zeros((len(pos_vocab), plan.pos_dim)), trainable=True)

    if meta["model_type"] == "feda":
        model = FedaModel(
            kind,
            feats,
            hidden=meta["hidden"],
            input_dropout=meta["input_dropout"],
            seed=meta["seed"],
            word_table=zero_table(plan.word_dim),
            pos_table=zero_pos_table(),
        )
    else:
        model = TriggerModel(
            kind,
            feats,
            hidden=meta["hidden"],
            lambda_=meta["lambda"],
            pooling=meta["pooling"],
            input_dropout=meta["input_dropout"],
            with_domain_head=meta["with_domain_head"],
            seed=meta["seed"],
            word_table=zero_table(plan.word_dim),
            pos_table=zero_pos_table(),
        )
    model.train_domain = meta.get("train_domain")
    model.trained = True

    saved = _read_params(dirpath / "params.bin")
    expected = {p.name: p for p in model.params()}
    if set(saved) != set(expected):
        missing = sorted(set(expected) - set(saved))[:3]
        extra = sorted(set(saved) - set(expected))[:3]
        raise ValidationError(f"checkpoint mismatch: missing {missing}, unexpected {extra}")
    for name, value in saved.items():
        p = expected[name]
        if p.value.shape != value.shape:
            raise ValidationError(
                f"checkpoint tensor {name} has shape {value.shape}, expected {p.value.shape}"
            )
        p.value[...] = value
    return model
