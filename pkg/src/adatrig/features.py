"""Vocabulary construction and token-to-vector encoding.

Three input flavors are supported: static word embeddings, word + POS-tag
embeddings, and precomputed contextual features consumed from an offline
extraction artifact (a directory of per-document float32 arrays plus a JSON
index; see ``import_contextual_features``).
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import Corpus, TaggedSentence, Token, EVENT
from .errors import ParseError, ValidationError
from .util import rng_stream, sha256_of

PAD = "<pad>"
UNK = "<unk>"
PAD_IDX = 0
UNK_IDX = 1

STATIC = "STATIC"
STATIC_POS = "STATIC_POS"
CONTEXTUAL = "CONTEXTUAL"

# seed for out-of-vocabulary rows in pretrained tables; fixed so repeated loads agree
_OOV_SEED = 90210

MEAN_SUBTOKENS = "mean_subtokens"
FIRST_SUBTOKEN = "first_subtoken"


@dataclass(frozen=True)
class Vocab:
    """Dense token->index map with reserved PAD=0 and UNK=1 rows."""

    tokens: tuple[str, ...]
    case_fold: bool = False
    index: dict[str, int] = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        if self.tokens[:2] != (PAD, UNK):
            raise ValidationError("vocab must start with PAD and UNK")
        object.__setattr__(self, "index", {t: i for i, t in enumerate(self.tokens)})

    def __len__(self) -> int:
        return len(self.tokens)

    def lookup(self, surface: str) -> int:
        if self.case_fold:
            surface = surface.lower()
        return self.index.get(surface, UNK_IDX)

    @property
    def hash(self) -> str:
        return sha256_of({"tokens": list(self.tokens), "case_fold": self.case_fold})


@dataclass
class EmbeddingTable:
    """|V| x d matrix; row 0 (PAD) is always zero."""

    matrix: np.ndarray
    trainable: bool

    def __post_init__(self):
        if self.matrix.ndim != 2:
            raise ValidationError("embedding matrix must be 2-D")
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        self.matrix[PAD_IDX] = 0.0

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]


@dataclass(frozen=True)
class FeaturePlan:
    """How tokens become input vectors for a representation learner."""

    kind: str = STATIC
    word_dim: int = 100
    pos_dim: int = 50
    contextual_dim: int = 3072

    def __post_init__(self):
        if self.kind not in (STATIC, STATIC_POS, CONTEXTUAL):
            raise ValidationError(f"unknown feature plan kind {self.kind!r}")

    def input_dim(self) -> int:
        if self.kind == STATIC:
            return self.word_dim
        if self.kind == STATIC_POS:
            return self.word_dim + self.pos_dim
        return self.contextual_dim


@dataclass
class FeatureSpace:
    """Everything needed to encode sentences for a model."""

    vocab: "Vocab"
    plan: "FeaturePlan"
    pos_vocab: "Vocab | None" = None
    store: "ContextualFeatureStore | None" = None


class ContextualFeatureStore:
    """Keyed lookup (doc_id, sent_index) -> token-level feature matrix."""

    def __init__(self, dim: int, rows: dict[tuple[str, int], np.ndarray] | None = None):
        self.dim = dim
        self._rows: dict[tuple[str, int], np.ndarray] = {}
        for key, mat in (rows or {}).items():
            self.put(key, mat)

    def put(self, key: tuple[str, int], matrix: np.ndarray) -> None:
        matrix = np.asarray(matrix, dtype=np.float32)
        if matrix.ndim != 2 or matrix.shape[1] != self.dim:
            raise ValidationError(
                f"feature matrix for {key} has shape {matrix.shape}, expected (*, {self.dim})"
            )
        self._rows[(str(key[0]), int(key[1]))] = matrix

    def get(self, doc_id: str, sent_index: int) -> np.ndarray:
        key = (doc_id, sent_index)
        if key not in self._rows:
            raise ValidationError(f"no contextual features for (doc_id={doc_id!r}, sent_index={sent_index})")
        return self._rows[key]

    def __contains__(self, key: tuple[str, int]) -> bool:
        return (str(key[0]), int(key[1])) in self._rows

    def __len__(self) -> int:
        return len(self._rows)

    def keys(self):
        return self._rows.keys()


def build_vocab(source: Corpus, target: Corpus, min_count: int = 1, case_fold: bool = False) -> Vocab:
    """Shared vocabulary over both domains: frequency >= min_count, ordered by
    frequency (descending) then lexicographically."""
    if not source.sentences or not target.sentences:
        raise ValidationError("cannot build a vocabulary from an empty corpus")
    counts: Counter[str] = Counter()
    for corpus in (source, target):
        for sent in corpus.sentences:
            for tok in sent.tokens:
                counts[tok.surface.lower() if case_fold else tok.surface] += 1
    kept = sorted(
        (t for t, c in counts.items() if c >= min_count),
        key=lambda t: (-counts[t], t),
    )
    return Vocab((PAD, UNK, *kept), case_fold=case_fold)


def build_pos_vocab(source: Corpus, target: Corpus) -> Vocab:
    """Vocabulary over POS tags (missing tags fall back to UNK at encode time)."""
    tags = sorted(
        {
            tok.pos
            for corpus in (source, target)
            for sent in corpus.sentences
            for tok in sent.tokens
            if tok.pos is not None
        }
    )
    return Vocab((PAD, UNK, *tags))


def random_embeddings(vocab: Vocab, dim: int, scale: float, seed: int, trainable: bool = True) -> EmbeddingTable:
    """Uniform(-scale, scale) table used when no pretrained file is given."""
    rng = rng_stream(seed, "embed-init", dim)
    matrix = rng.uniform(-scale, scale, size=(len(vocab), dim))
    return EmbeddingTable(matrix, trainable=trainable)


def load_pretrained_embeddings(
    path: str | Path, vocab: Vocab, expected_dim: int | None = None
) -> EmbeddingTable:
    """Read a word2vec-text file into a frozen table aligned with the vocab.

    In-vocab words are copied exactly; words missing from the file get
    uniform(-0.05, 0.05) rows drawn from a fixed seed; PAD stays zero.
    """
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        header = fh.readline().split()
        if len(header) != 2:
            raise ParseError(f"{path}:1: expected header '<n_words> <dim>'")
        n_words, dim = int(header[0]), int(header[1])
        if expected_dim is not None and dim != expected_dim:
            raise ValidationError(
                f"{path}: embedding dim {dim} does not match plan word_dim {expected_dim}"
            )
        rng = rng_stream(_OOV_SEED, "oov", dim)
        matrix = rng.uniform(-0.05, 0.05, size=(len(vocab), dim))
        for lineno, line in enumerate(fh, start=2):
            parts = line.rstrip("\n").split(" ")
            if len(parts) != dim + 1:
                raise ParseError(f"{path}:{lineno}: expected {dim + 1} fields, got {len(parts)}")
            word = parts[0].lower() if vocab.case_fold else parts[0]
            idx = vocab.index.get(word)
            if idx is not None and idx > UNK_IDX:
                matrix[idx] = np.asarray([float(x) for x in parts[1:]])
    return EmbeddingTable(matrix, trainable=False)


@dataclass
class EncodedSentence:
    """Per-sentence index/feature arrays, ready to collate into a padded batch."""

    key: tuple[str, int]
    word_idx: np.ndarray
    pos_idx: np.ndarray | None
    ctx: np.ndarray | None
    tags: np.ndarray | None
    domain: int | None = None

    @property
    def length(self) -> int:
        return len(self.word_idx)


@dataclass
class Batch:
    """Padded tensors for one batch; mask marks real tokens."""

    word_idx: np.ndarray  # (B, L) int64
    mask: np.ndarray  # (B, L) float64, 1.0 on real tokens
    lengths: np.ndarray  # (B,) int64
    keys: list[tuple[str, int]]
    pos_idx: np.ndarray | None = None  # (B, L) int64
    ctx: np.ndarray | None = None  # (B, L, D) float64
    tags: np.ndarray | None = None  # (B, L) int64; 1 = EVENT
    domains: np.ndarray | None = None  # (B,) int64; 0 = source, 1 = target

    @property
    def size(self) -> int:
        return self.word_idx.shape[0]

    @property
    def max_len(self) -> int:
        return self.word_idx.shape[1]


def _tokens_of(item) -> tuple[Token, ...]:
    return item.tokens if hasattr(item, "tokens") else tuple(item)


def encode_sentence(
    item,
    vocab: Vocab,
    plan: FeaturePlan,
    store: ContextualFeatureStore | None = None,
    pos_vocab: Vocab | None = None,
    with_tags: bool = True,
    domain: int | None = None,
) -> EncodedSentence:
    """Encode one sentence (or bare token sequence) under a feature plan.

    ``with_tags=False`` guarantees the sentence's gold tags are never read,
    which is how unlabeled/domain batches keep out of the label path.
    """
    tokens = _tokens_of(item)
    key = getattr(item, "key", ("", -1))
    word_idx = np.asarray([vocab.lookup(t.surface) for t in tokens], dtype=np.int64)

    pos_idx = None
    if plan.kind == STATIC_POS:
        if pos_vocab is None:
            raise ValidationError("STATIC_POS plan requires a pos_vocab")
        pos_idx = np.asarray(
            [pos_vocab.index.get(t.pos, UNK_IDX) if t.pos else UNK_IDX for t in tokens],
            dtype=np.int64,
        )

    ctx = None
    if plan.kind == CONTEXTUAL:
        if store is None:
            raise ValidationError("CONTEXTUAL plan requires a feature store")
        mat = store.get(key[0], key[1])
        if mat.shape[0] != len(tokens):
            raise ValidationError(
                f"contextual features for {key} have {mat.shape[0]} rows, "
                f"sentence has {len(tokens)} tokens"
            )
        ctx = np.asarray(mat, dtype=np.float64)

    tags = None
    if with_tags:
        tags = np.asarray([1 if t == EVENT else 0 for t in item.tags], dtype=np.int64)
    return EncodedSentence(key, word_idx, pos_idx, ctx, tags, domain)


def collate(encoded: list[EncodedSentence], plan: FeaturePlan) -> Batch:
    """Pad a list of encoded sentences into one batch."""
    if not encoded:
        raise ValidationError("cannot collate an empty batch")
    B = len(encoded)
    L = max(e.length for e in encoded)
    word_idx = np.zeros((B, L), dtype=np.int64)
    mask = np.zeros((B, L), dtype=np.float64)
    lengths = np.zeros(B, dtype=np.int64)
    pos_idx = np.zeros((B, L), dtype=np.int64) if plan.kind == STATIC_POS else None
    ctx = (
        np.zeros((B, L, plan.contextual_dim), dtype=np.float64)
        if plan.kind == CONTEXTUAL
        else None
    )
    any_tags = all(e.tags is not None for e in encoded)
    tags = np.zeros((B, L), dtype=np.int64) if any_tags else None
    any_domains = all(e.domain is not None for e in encoded)
    domains = np.zeros(B, dtype=np.int64) if any_domains else None

    for b, enc in enumerate(encoded):
        n = enc.length
        word_idx[b, :n] = enc.word_idx
        mask[b, :n] = 1.0
        lengths[b] = n
        if pos_idx is not None:
            pos_idx[b, :n] = enc.pos_idx
        if ctx is not None:
            ctx[b, :n] = enc.ctx
        if tags is not None:
            tags[b, :n] = enc.tags
        if domains is not None:
            domains[b] = enc.domain
    return Batch(word_idx, mask, lengths, [e.key for e in encoded], pos_idx, ctx, tags, domains)


def encode_batch(
    sentences: list,
    vocab: Vocab,
    plan: FeaturePlan,
    store: ContextualFeatureStore | None = None,
    pos_vocab: Vocab | None = None,
    with_tags: bool = True,
) -> Batch:
    """Encode and pad a batch of sentences in one call."""
    encoded = [
        encode_sentence(s, vocab, plan, store=store, pos_vocab=pos_vocab, with_tags=with_tags)
        for s in sentences
    ]
    return collate(encoded, plan)


# ---------------------------------------------------------------------------
# Contextual feature artifact
# ---------------------------------------------------------------------------


def import_contextual_features(
    path: str | Path, corpus: Corpus, alignment: str = MEAN_SUBTOKENS
) -> ContextualFeatureStore:
    """Load an offline feature dump, collapsing subtoken rows to token rows.

    Layout: ``index.json`` maps "doc_id::sent_index" to the binary file, byte
    offset, subtoken count, and a subtoken->token alignment list; the binary
    files hold row-major float32 matrices.
    """
    if alignment not in (MEAN_SUBTOKENS, FIRST_SUBTOKEN):
        raise ValidationError(f"unknown alignment rule {alignment!r}")
    path = Path(path)
    index_path = path / "index.json"
    if not index_path.exists():
        raise ValidationError(f"feature index not found: {index_path}")
    index = json.loads(index_path.read_text(encoding="utf-8"))
    dim = int(index["dim"])
    store = ContextualFeatureStore(dim)

    wanted = {s.key: len(s.tokens) for s in corpus.sentences}
    for key_str, entry in index["entries"].items():
        doc_id, _, sent_str = key_str.rpartition("::")
        key = (doc_id, int(sent_str))
        if key not in wanted:
            continue
        n_sub = int(entry["n_subtokens"])
        align = [int(a) for a in entry["alignment"]]
        if len(align) != n_sub:
            raise ValidationError(f"{key}: alignment length {len(align)} != n_subtokens {n_sub}")
        raw = np.fromfile(
            path / entry["file"], dtype="<f4", count=n_sub * dim, offset=int(entry["offset"])
        )
        if raw.size != n_sub * dim:
            raise ValidationError(f"{key}: short read from {entry['file']}")
        sub = raw.reshape(n_sub, dim)

        n_tokens = wanted[key]
        if align and (min(align) < 0 or max(align) >= n_tokens):
            raise ValidationError(
                f"{key}: alignment references token {max(align)} but sentence has {n_tokens} tokens"
            )
        mat = np.zeros((n_tokens, dim), dtype=np.float64)
        if alignment == FIRST_SUBTOKEN:
            seen: set[int] = set()
            for row, tok in enumerate(align):
                if tok not in seen:
                    seen.add(tok)
                    mat[tok] = sub[row]
            covered = seen
        else:
            counts = np.zeros(n_tokens)
            for row, tok in enumerate(align):
                mat[tok] += sub[row]
                counts[tok] += 1
            covered = {t for t in range(n_tokens) if counts[t] > 0}
            nz = counts > 0
            mat[nz] /= counts[nz, None]
        if len(covered) != n_tokens:
            raise ValidationError(
                f"{key}: alignment covers {len(covered)} of {n_tokens} tokens"
            )
        store.put(key, mat.astype(np.float32))

    missing = [k for k in wanted if k not in store]
    if missing:
        raise ValidationError(
            f"feature dump misses {len(missing)} sentences, e.g. {sorted(missing)[:3]}"
        )
    return store


def write_contextual_features(store: ContextualFeatureStore, path: str | Path) -> None:
    """Write a store in the offline artifact layout (one binary file per doc)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries: dict[str, dict] = {}
    offsets: dict[str, int] = {}
    handles: dict[str, object] = {}
    try:
        for (doc_id, sent_index) in sorted(store.keys()):
            mat = store.get(doc_id, sent_index).astype("<f4")
            fname = f"{doc_id}.bin"
            if fname not in handles:
                handles[fname] = (path / fname).open("wb")
                offsets[fname] = 0
            handles[fname].write(mat.tobytes())  # type: ignore[attr-defined]
            entries[f"{doc_id}::{sent_index}"] = {
                "file": fname,
                "offset": offsets[fname],
                "n_subtokens": int(mat.shape[0]),
                "alignment": list(range(mat.shape[0])),
            }
            offsets[fname] += mat.nbytes
    finally:
        for fh in handles.values():
            fh.close()  # type: ignore[attr-defined]
    index = {"dim": store.dim, "entries": entries}
    (path / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True), encoding="utf-8")
