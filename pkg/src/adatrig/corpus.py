"""Token-level tagged corpora: ingest, filter, split, summarize, synthesize.

The on-disk format is a flat TSV, one token per line:

    doc_id  sent_index  token  tag  pos  attrs

with a blank line between sentences. ``pos`` may be ``_``; ``attrs`` is ``_``
or ``key=val;key=val``. Tags are binary: ``EVENT`` or ``O``. A sidecar
``<stem>.meta.json`` records the corpus name and its split assignment.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ParseError, ValidationError
from .util import round_half_up, rng_stream

EVENT = "EVENT"
OUT = "O"
TAGS = (OUT, EVENT)

SPLIT_NAMES = ("train", "dev", "test")


@dataclass(frozen=True)
class Token:
    surface: str
    pos: str | None = None
    attrs: dict[str, str] | None = None

    def __post_init__(self):
        if not self.surface:
            raise ValidationError("token surface must be non-empty")
        if self.attrs:
            for key in self.attrs:
                if not key.isidentifier() or key != key.lower():
                    raise ValidationError(f"attr key {key!r} is not a lowercase identifier")


@dataclass(frozen=True)
class TaggedSentence:
    doc_id: str
    sent_index: int
    tokens: tuple[Token, ...]
    tags: tuple[str, ...]

    def __post_init__(self):
        if len(self.tokens) < 1:
            raise ValidationError(f"sentence {self.doc_id}/{self.sent_index} has no tokens")
        if self.sent_index < 0:
            raise ValidationError("sent_index must be non-negative")
        if len(self.tokens) != len(self.tags):
            raise ValidationError(
                f"sentence {self.doc_id}/{self.sent_index}: "
                f"{len(self.tokens)} tokens but {len(self.tags)} tags"
            )
        for tag in self.tags:
            if tag not in TAGS:
                raise ValidationError(
                    f"sentence {self.doc_id}/{self.sent_index}: unknown tag {tag!r}"
                )

    @property
    def key(self) -> tuple[str, int]:
        return (self.doc_id, self.sent_index)


SOURCE = "SOURCE"
TARGET = "TARGET"


@dataclass(frozen=True)
class DomainExample:
    """An unlabeled token sequence paired with a domain label."""

    tokens: tuple[Token, ...]
    domain: str

    def __post_init__(self):
        if len(self.tokens) < 1:
            raise ValidationError("domain example has no tokens")
        if self.domain not in (SOURCE, TARGET):
            raise ValidationError(f"unknown domain {self.domain!r}")


@dataclass(frozen=True)
class Corpus:
    name: str
    sentences: tuple[TaggedSentence, ...]
    splits: dict[str, tuple[str, ...]] = field(default_factory=dict)

    def __post_init__(self):
        all_docs = {s.doc_id for s in self.sentences}
        seen: dict[str, str] = {}
        for split, docs in self.splits.items():
            for doc in docs:
                if doc not in all_docs:
                    raise ValidationError(f"split {split!r} references unknown doc {doc!r}")
                if doc in seen:
                    raise ValidationError(
                        f"doc {doc!r} assigned to both {seen[doc]!r} and {split!r}"
                    )
                seen[doc] = split
        if self.splits and set(seen) != all_docs:
            missing = sorted(all_docs - set(seen))[:5]
            raise ValidationError(f"docs missing from splits, e.g. {missing}")

    @property
    def doc_ids(self) -> tuple[str, ...]:
        out, seen = [], set()
        for s in self.sentences:
            if s.doc_id not in seen:
                seen.add(s.doc_id)
                out.append(s.doc_id)
        return tuple(out)

    def split(self, name: str) -> list[TaggedSentence]:
        """Sentences of one split, in file order. No splits means everything is train."""
        if not self.splits:
            if name == "train":
                return list(self.sentences)
            return []
        docs = set(self.splits.get(name, ()))
        return [s for s in self.sentences if s.doc_id in docs]


@dataclass(frozen=True)
class CorpusStats:
    n_docs: int
    n_tokens: int
    n_events: int

    @property
    def density(self) -> float:
        return self.n_events / self.n_tokens


def _parse_attrs(text: str, path: str, lineno: int) -> dict[str, str] | None:
    if text == "_" or text == "":
        return None
    attrs: dict[str, str] = {}
    for piece in text.split(";"):
        if not piece:
            continue
        if "=" not in piece:
            raise ParseError(f"{path}:{lineno}: malformed attrs field {text!r}")
        key, _, val = piece.partition("=")
        attrs[key] = val
    return attrs or None


def _render_attrs(attrs: dict[str, str] | None) -> str:
    if not attrs:
        return "_"
    return ";".join(f"{k}={v}" for k, v in attrs.items())


def load_corpus(path: str | Path, fmt: str = "tsv") -> Corpus:
    """Read a corpus from a token-per-line TSV, plus its meta sidecar if present."""
    if fmt != "tsv":
        raise ValidationError(f"unsupported corpus format {fmt!r}")
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"corpus file not found: {path}")

    sentences: list[TaggedSentence] = []
    block: list[tuple[int, list[str]]] = []

    def flush():
        if not block:
            return
        first_line, first = block[0][0], block[0][1]
        doc_id, sent_index = first[0], first[1]
        tokens, tags = [], []
        for lineno, cols in block:
            if cols[0] != doc_id or cols[1] != sent_index:
                raise ParseError(
                    f"{path}:{lineno}: sentence block mixes ({doc_id},{sent_index}) "
                    f"with ({cols[0]},{cols[1]})"
                )
            tag = cols[3]
            if tag not in TAGS:
                raise ValidationError(f"{path}:{lineno}: unknown tag {tag!r}")
            pos = None if cols[4] == "_" else cols[4]
            tokens.append(Token(cols[2], pos, _parse_attrs(cols[5], str(path), lineno)))
            tags.append(tag)
        try:
            idx = int(sent_index)
        except ValueError:
            raise ParseError(f"{path}:{first_line}: sent_index {sent_index!r} is not an integer")
        sentences.append(TaggedSentence(doc_id, idx, tuple(tokens), tuple(tags)))
        block.clear()

    with path.open(encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line.strip():
                flush()
                continue
            cols = line.split("\t")
            if len(cols) != 6:
                raise ParseError(f"{path}:{lineno}: expected 6 columns, got {len(cols)}")
            block.append((lineno, cols))
    flush()

    if not sentences:
        raise ValidationError(f"{path}: no sentences")

    name = path.stem
    splits: dict[str, tuple[str, ...]] = {}
    meta_path = path.parent / (path.stem + ".meta.json")
    if meta_path.exists():
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
        name = meta.get("name", name)
        splits = {k: tuple(v) for k, v in meta.get("splits", {}).items()}
    return Corpus(name, tuple(sentences), splits)


def write_corpus(corpus: Corpus, path: str | Path) -> None:
    """Write a corpus in canonical TSV form plus its meta sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines: list[str] = []
    for i, sent in enumerate(corpus.sentences):
        if i:
            lines.append("")
        for token, tag in zip(sent.tokens, sent.tags):
            lines.append(
                "\t".join(
                    [
                        sent.doc_id,
                        str(sent.sent_index),
                        token.surface,
                        tag,
                        token.pos or "_",
                        _render_attrs(token.attrs),
                    ]
                )
            )
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    meta = {"name": corpus.name, "splits": {k: list(v) for k, v in corpus.splits.items()}}
    meta_path = path.parent / (path.stem + ".meta.json")
    meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")


@dataclass(frozen=True)
class RealisPolicy:
    """Rules deciding which annotated events count as not having occurred.

    An EVENT tag is dropped (changed to O) when the token's attrs show a
    future tense, a non-assertive modality, or negative polarity. Values are
    compared case-insensitively. Tokens without attrs are never touched.
    """

    drop_tenses: frozenset[str] = frozenset({"FUTURE"})
    assertion_modalities: frozenset[str] = frozenset({"NONE"})
    drop_polarities: frozenset[str] = frozenset({"NEG"})

    @classmethod
    def from_file(cls, path: str | Path) -> "RealisPolicy":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        known = {"drop_tenses", "assertion_modalities", "drop_polarities"}
        unknown = set(data) - known
        if unknown:
            raise ValidationError(f"unknown realis policy keys: {sorted(unknown)}")
        kwargs = {k: frozenset(str(v).upper() for v in data[k]) for k in data}
        return cls(**kwargs)

    def drops(self, attrs: dict[str, str] | None) -> bool:
        if not attrs:
            return False
        tense = attrs.get("tense", "").strip().upper()
        if tense and tense in self.drop_tenses:
            return True
        modality = attrs.get("modality", "").strip().upper()
        if modality and modality not in self.assertion_modalities:
            return True
        polarity = attrs.get("polarity", "").strip().upper()
        if polarity and polarity in self.drop_polarities:
            return True
        return False


def filter_unrealized_events(corpus: Corpus, policy: RealisPolicy | None = None) -> Corpus:
    """Demote EVENT tags whose tokens match the realis drop rules.

    Token counts are unchanged and tags only ever move EVENT -> O, so the
    operation is idempotent and never increases the event count.
    """
    policy = policy or RealisPolicy()
    new_sentences = []
    for sent in corpus.sentences:
        tags = tuple(
            OUT if tag == EVENT and policy.drops(tok.attrs) else tag
            for tok, tag in zip(sent.tokens, sent.tags)
        )
        new_sentences.append(replace(sent, tags=tags) if tags != sent.tags else sent)
    return Corpus(corpus.name, tuple(new_sentences), dict(corpus.splits))


def compute_stats(corpus: Corpus) -> CorpusStats:
    """Document/token/event counts; density is the exact events-per-token ratio."""
    n_tokens = sum(len(s.tokens) for s in corpus.sentences)
    if n_tokens == 0:
        raise ValidationError(f"corpus {corpus.name!r} is empty")
    n_events = sum(tag == EVENT for s in corpus.sentences for tag in s.tags)
    return CorpusStats(len(corpus.doc_ids), n_tokens, n_events)


def split_corpus(
    corpus: Corpus,
    fractions: tuple[float, float, float] = (0.8, 0.1, 0.1),
    seed: int = 13,
) -> Corpus:
    """Assign documents to train/dev/test splits, deterministically per seed."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValidationError(f"split fractions {fractions} do not sum to 1")
    docs = list(corpus.doc_ids)
    if len(docs) < 3:
        raise ValidationError(f"need at least 3 documents to split, got {len(docs)}")
    order = rng_stream(seed, "doc-split").permutation(len(docs))
    shuffled = [docs[i] for i in order]

    n = len(docs)
    counts = [round_half_up(fractions[0] * n), round_half_up(fractions[1] * n)]
    counts.append(n - counts[0] - counts[1])
    # every nonzero fraction gets at least one document
    for i in range(3):
        if fractions[i] > 0 and counts[i] < 1:
            donor = int(np.argmax(counts))
            counts[donor] -= 1
            counts[i] = 1
    if min(counts) < 0:
        raise ValidationError(f"split fractions {fractions} produce negative counts")

    splits, start = {}, 0
    for name, count in zip(SPLIT_NAMES, counts):
        splits[name] = tuple(sorted(shuffled[start : start + count]))
        start += count
    return Corpus(corpus.name, corpus.sentences, splits)


def sample_partition(n: int, percent: float, rng: np.random.Generator) -> tuple[list[int], list[int]]:
    """Pick round(percent * n) indices (at least one); return (chosen, rest) sorted."""
    if not 0 < percent < 1:
        raise ValidationError(f"percent must be in (0, 1), got {percent}")
    k = max(1, round_half_up(percent * n))
    order = rng.permutation(n)
    chosen = sorted(int(i) for i in order[:k])
    rest = sorted(int(i) for i in order[k:])
    return chosen, rest


def sample_labeled_fraction(
    corpus: Corpus, percent: float, seed: int
) -> tuple[Corpus, Corpus]:
    """Sentence-level sample of the train split into (labeled, remainder) corpora."""
    train = corpus.split("train")
    if not train:
        raise ValidationError(f"corpus {corpus.name!r} has no train sentences")
    chosen, rest = sample_partition(len(train), percent, rng_stream(seed, "fraction"))

    def subcorpus(indices: list[int], suffix: str) -> Corpus:
        sents = tuple(train[i] for i in indices)
        docs = tuple(sorted({s.doc_id for s in sents}))
        return Corpus(f"{corpus.name}-{suffix}", sents, {"train": docs} if sents else {})

    return subcorpus(chosen, "labeled"), subcorpus(rest, "rest")


# ---------------------------------------------------------------------------
# Synthetic two-domain corpora
# ---------------------------------------------------------------------------

NOUN_SLOT = "<N>"
TRIGGER_SLOT = "<T>"

FUNCTION_WORDS = (
    "the a an of in on at by and then while near under over was were had has "
    "very quite some many few this that it they he she after before during ."
).split()


@dataclass(frozen=True)
class SyntheticSpec:
    """Declarative recipe for a pair of corpora with shared contexts.

    Trigger and noun slots sit inside templates built from a shared
    function-word inventory; the words that fill the slots come from
    per-domain content vocabularies that never overlap, so lexical identity
    is the only domain signal at slot positions.
    """

    templates: tuple[tuple[str, ...], ...]
    source_nouns: tuple[str, ...]
    source_triggers: tuple[str, ...]
    target_nouns: tuple[str, ...]
    target_triggers: tuple[str, ...]
    densities: tuple[float, float] = (0.05, 0.10)
    n_sentences: tuple[int, int] = (500, 500)
    sentences_per_doc: int = 10
    names: tuple[str, str] = ("synth-src", "synth-tgt")

    def content_vocab(self, domain: int) -> set[str]:
        if domain == 0:
            return set(self.source_nouns) | set(self.source_triggers)
        return set(self.target_nouns) | set(self.target_triggers)

    def function_vocab(self) -> set[str]:
        return {w for tpl in self.templates for w in tpl if w not in (NOUN_SLOT, TRIGGER_SLOT)}

    def validate(self) -> None:
        if not self.templates:
            raise ValidationError("synthetic spec has no templates")
        overlap = self.content_vocab(0) & self.content_vocab(1)
        if overlap:
            raise ValidationError(
                f"content vocabularies overlap across domains, e.g. {sorted(overlap)[:5]}"
            )
        shared = self.function_vocab() & (self.content_vocab(0) | self.content_vocab(1))
        if shared:
            raise ValidationError(f"content words collide with function words: {sorted(shared)[:5]}")
        if not any(TRIGGER_SLOT in tpl for tpl in self.templates):
            raise ValidationError("no template contains a trigger slot")
        for d in self.densities:
            if not 0 < d < 1:
                raise ValidationError(f"density {d} outside (0, 1)")
        for domain in (0, 1):
            if not self.content_vocab(domain):
                raise ValidationError("empty content vocabulary")

    @classmethod
    def from_dict(cls, data: dict) -> "SyntheticSpec":
        known = {f.name for f in cls.__dataclass_fields__.values()}  # type: ignore[attr-defined]
        unknown = set(data) - known
        if unknown:
            raise ValidationError(f"unknown synthetic spec keys: {sorted(unknown)}")
        kwargs = dict(data)
        kwargs["templates"] = tuple(
            tuple(t.split() if isinstance(t, str) else t) for t in data["templates"]
        )
        for key in ("source_nouns", "source_triggers", "target_nouns", "target_triggers"):
            kwargs[key] = tuple(data[key])
        for key in ("densities", "n_sentences", "names"):
            if key in data:
                kwargs[key] = tuple(data[key])
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return {
            "templates": [" ".join(tpl) for tpl in self.templates],
            "source_nouns": list(self.source_nouns),
            "source_triggers": list(self.source_triggers),
            "target_nouns": list(self.target_nouns),
            "target_triggers": list(self.target_triggers),
            "densities": list(self.densities),
            "n_sentences": list(self.n_sentences),
            "sentences_per_doc": self.sentences_per_doc,
            "names": list(self.names),
        }


def _pseudo_words(consonants: str, n: int, rng: np.random.Generator, suffix: str) -> tuple[str, ...]:
    vowels = "aeiou"
    words: list[str] = []
    seen = set()
    while len(words) < n:
        syllables = rng.integers(2, 4)
        word = "".join(
            consonants[rng.integers(len(consonants))] + vowels[rng.integers(len(vowels))]
            for _ in range(syllables)
        )
        word += suffix
        if word not in seen:
            seen.add(word)
            words.append(word)
    return tuple(words)


def default_synthetic_spec(
    n_templates: int = 50,
    n_content: int = 200,
    densities: tuple[float, float] = (0.05, 0.10),
    n_sentences: tuple[int, int] = (500, 500),
    seed: int = 0,
) -> SyntheticSpec:
    """Build a ready-to-use synthetic spec with generated vocabularies and templates."""
    rng = rng_stream(seed, "synth-spec")
    n_trig = max(1, n_content // 4)
    n_noun = n_content - n_trig
    source_nouns = _pseudo_words("bdgklm", n_noun, rng, "o")
    source_triggers = _pseudo_words("bdgklm", n_trig, rng, "ar")
    target_nouns = _pseudo_words("prstvz", n_noun, rng, "u")
    target_triggers = _pseudo_words("prstvz", n_trig, rng, "ix")

    templates: list[tuple[str, ...]] = []
    # trigger-slot counts cycle so the template pool spans a wide density range
    trig_counts = [0, 0, 1, 1, 1, 2, 2, 3]
    for i in range(n_templates):
        n_trig_slots = trig_counts[i % len(trig_counts)]
        n_noun_slots = int(rng.integers(1, 4))
        length = int(rng.integers(8, 15))
        n_func = max(0, length - n_trig_slots - n_noun_slots)
        items = [TRIGGER_SLOT] * n_trig_slots + [NOUN_SLOT] * n_noun_slots
        items += [FUNCTION_WORDS[int(rng.integers(len(FUNCTION_WORDS) - 1))] for _ in range(n_func)]
        rng.shuffle(items)
        items.append(".")
        templates.append(tuple(items))

    return SyntheticSpec(
        templates=tuple(templates),
        source_nouns=source_nouns,
        source_triggers=source_triggers,
        target_nouns=target_nouns,
        target_triggers=target_triggers,
        densities=densities,
        n_sentences=n_sentences,
    )


def _template_weights(templates, density: float) -> np.ndarray:
    """Mix low- and high-trigger templates so expected density hits the target."""
    counts = np.array([tpl.count(TRIGGER_SLOT) for tpl in templates], dtype=float)
    lengths = np.array([len(tpl) for tpl in templates], dtype=float)
    ratios = counts / lengths
    order = np.argsort(ratios, kind="stable")
    quart = max(1, len(templates) // 4)
    low = np.zeros(len(templates))
    high = np.zeros(len(templates))
    low[order[:quart]] = 1.0 / quart
    high[order[-quart:]] = 1.0 / quart

    def expected(alpha: float) -> float:
        w = (1 - alpha) * low + alpha * high
        return float(w @ counts) / float(w @ lengths)

    lo, hi = 0.0, 1.0
    if not expected(lo) <= density <= expected(hi):
        raise ValidationError(
            f"target density {density} outside achievable range "
            f"[{expected(lo):.4f}, {expected(hi):.4f}]"
        )
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if expected(mid) < density:
            lo = mid
        else:
            hi = mid
    alpha = 0.5 * (lo + hi)
    return (1 - alpha) * low + alpha * high


_SLOT_POS = {NOUN_SLOT: "NOUN", TRIGGER_SLOT: "VERB"}


def make_synthetic_pair(spec: SyntheticSpec, seed: int) -> tuple[Corpus, Corpus]:
    """Generate the (source, target) corpora described by a synthetic spec."""
    spec.validate()
    corpora = []
    for domain in (0, 1):
        name = spec.names[domain]
        nouns = spec.source_nouns if domain == 0 else spec.target_nouns
        triggers = spec.source_triggers if domain == 0 else spec.target_triggers
        weights = _template_weights(spec.templates, spec.densities[domain])
        rng = rng_stream(seed, "synth-gen", name)

        sentences = []
        for i in range(spec.n_sentences[domain]):
            tpl = spec.templates[int(rng.choice(len(spec.templates), p=weights))]
            tokens, tags = [], []
            for item in tpl:
                if item == NOUN_SLOT:
                    surface = nouns[int(rng.integers(len(nouns)))]
                    tag = OUT
                elif item == TRIGGER_SLOT:
                    surface = triggers[int(rng.integers(len(triggers)))]
                    tag = EVENT
                else:
                    surface = item
                    tag = OUT
                tokens.append(Token(surface, _SLOT_POS.get(item, "FUNC")))
                tags.append(tag)
            doc = f"{name}-d{i // spec.sentences_per_doc:03d}"
            sentences.append(
                TaggedSentence(doc, i % spec.sentences_per_doc, tuple(tokens), tuple(tags))
            )
        corpus = Corpus(name, tuple(sentences))
        corpora.append(split_corpus(corpus, seed=seed))
    return corpora[0], corpora[1]
