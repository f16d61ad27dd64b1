"""Tokenization, vocabulary, JSONL corpora and the synthetic corpus."""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

PAD, UNK, BOS, EOS = 0, 1, 2, 3
RESERVED = ("<pad>", "<unk>", "<bos>", "<eos>")
SEP = "|"
SENTENCE_END = frozenset({".", "!", "?"})

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


class CorpusFormatError(ValueError):
    """A JSONL line could not be parsed."""


class SchemaError(ValueError):
    """A record is missing a required field or has the wrong type."""


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace, and split every punctuation character
    into its own token."""
    return _TOKEN_RE.findall(text.lower())


def detokenize(tokens: Sequence[str]) -> str:
    return " ".join(tokens)


def split_sentences(tokens: Sequence[str]) -> list[list[str]]:
    sents, cur = [], []
    for tok in tokens:
        cur.append(tok)
        if tok in SENTENCE_END:
            sents.append(cur)
            cur = []
    if cur:
        sents.append(cur)
    return sents


@dataclass(frozen=True)
class Vocabulary:
    itos: tuple[str, ...]

    def __post_init__(self):
        if self.itos[:4] != RESERVED:
            raise ValueError("the first four ids are reserved")
        if len(set(self.itos)) != len(self.itos):
            raise ValueError("duplicate tokens in vocabulary")
        object.__setattr__(self, "_stoi", {t: i for i, t in enumerate(self.itos)})

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self._stoi

    def id(self, token: str) -> int:
        return self._stoi.get(token, UNK)

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self._stoi.get(t, UNK) for t in tokens]

    def decode(self, ids: Iterable[int], strip_special: bool = True) -> list[str]:
        out = []
        for i in ids:
            if strip_special and i < 4:
                continue
            out.append(self.itos[i])
        return out

    def to_list(self) -> list[str]:
        return list(self.itos)


def build_vocab(texts: Iterable[Sequence[str]], min_count: int = 1, specials: Sequence[str] = ()) -> Vocabulary:
    """Ids by descending frequency, ties lexicographic, after the reserved
    ids. ``specials`` are appended at the end if not already present."""
    counts: Counter[str] = Counter()
    for toks in texts:
        counts.update(toks)
    kept = sorted((t for t, c in counts.items() if c >= min_count and t not in RESERVED), key=lambda t: (-counts[t], t))
    for s in specials:
        if s not in kept:
            kept.append(s)
    return Vocabulary(RESERVED + tuple(kept))


@dataclass(frozen=True)
class ControlledExample:
    document: tuple[str, ...]
    aspects: tuple[str, ...]
    controlled_summary: tuple[str, ...] | None = None
    general_summary: tuple[str, ...] | None = None
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not self.document:
            raise SchemaError("document must contain at least one token")
        if not self.aspects:
            raise SchemaError("aspects must contain at least one token")

    def to_record(self) -> dict:
        rec = {"document": detokenize(self.document), "aspects": detokenize(self.aspects)}
        if self.controlled_summary is not None:
            rec["summary"] = detokenize(self.controlled_summary)
        if self.general_summary is not None:
            rec["general_summary"] = detokenize(self.general_summary)
        if self.meta:
            rec["meta"] = self.meta
        return rec


@dataclass(frozen=True)
class Corpus:
    examples: tuple[ControlledExample, ...]
    source: str = ""
    split: str = ""

    def __len__(self) -> int:
        return len(self.examples)

    def __iter__(self) -> Iterator[ControlledExample]:
        return iter(self.examples)

    def __getitem__(self, i):
        return self.examples[i]

    def subset(self, indices: Iterable[int], split: str | None = None) -> "Corpus":
        return Corpus(tuple(self.examples[i] for i in indices), self.source, split or self.split)

    def texts(self) -> Iterator[tuple[str, ...]]:
        for ex in self.examples:
            yield ex.document
            yield ex.aspects
            if ex.controlled_summary:
                yield ex.controlled_summary
            if ex.general_summary:
                yield ex.general_summary

    def to_jsonl(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            for ex in self.examples:
                fh.write(json.dumps(ex.to_record(), sort_keys=True) + "\n")


def _field_text(obj: dict, name: str, lineno: int, required: bool) -> str | None:
    if name not in obj or obj[name] is None:
        if required:
            raise SchemaError(f"line {lineno}: missing required field '{name}'")
        return None
    val = obj[name]
    if isinstance(val, str):
        return val
    if isinstance(val, list) and all(isinstance(v, str) for v in val):
        return " ".join(val)
    raise SchemaError(f"line {lineno}: field '{name}' must be a string or list of strings")


def parse_record(obj, lineno: int = 1, require_summary: bool = True) -> ControlledExample:
    if not isinstance(obj, dict):
        raise SchemaError(f"line {lineno}: expected a JSON object")
    doc = _field_text(obj, "document", lineno, True)
    aspects = _field_text(obj, "aspects", lineno, True)
    summary = _field_text(obj, "summary", lineno, require_summary)
    general = _field_text(obj, "general_summary", lineno, False)
    try:
        return ControlledExample(
            document=tuple(tokenize(doc)),
            aspects=tuple(tokenize(aspects)),
            controlled_summary=None if summary is None else tuple(tokenize(summary)),
            general_summary=None if general is None else tuple(tokenize(general)),
            meta=obj.get("meta") or {},
        )
    except SchemaError as err:
        raise SchemaError(f"line {lineno}: {err}") from None


def load_jsonl(path, require_summary: bool = True, split: str = "") -> Corpus:
    """Read a NEWTS/EntSUM-shaped JSONL file.

    Fields: ``document``, ``aspects`` (string or list, lists are joined in
    order), ``summary`` and optionally ``general_summary``.
    """
    examples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as err:
                raise CorpusFormatError(f"{path}: line {lineno}: invalid JSON ({err.msg})") from None
            examples.append(parse_record(obj, lineno, require_summary))
    return Corpus(tuple(examples), source=Path(path).name, split=split)


# -- synthetic corpus -------------------------------------------------------

_ONSETS = ("b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z")
_VOWELS = ("a", "e", "i", "o", "u")
FUNCTION_WORDS = ("the", "a", "of", "and", "in", "to", "with", "on")


@dataclass(frozen=True)
class SynthSpec:
    """Shape of the synthetic vocabulary and sentences."""

    num_topics: int = 12
    words_per_topic: int = 10
    keywords_per_topic: int = 4
    sentence_len: tuple[int, int] = (4, 6)
    function_word_rate: float = 0.25


def _pseudo_words(count: int, rng: np.random.Generator) -> list[str]:
    words: list[str] = []
    seen = set(FUNCTION_WORDS)
    while len(words) < count:
        w = "".join(rng.choice(_ONSETS) + rng.choice(_VOWELS) for _ in range(int(rng.integers(2, 4))))
        if w not in seen:
            seen.add(w)
            words.append(w)
    return words


def topic_pools(seed: int, spec: SynthSpec) -> list[list[str]]:
    """Disjoint content-word pools; the first ``keywords_per_topic`` words
    of each pool are its keywords."""
    rng = np.random.default_rng([seed, 0])
    words = _pseudo_words(spec.num_topics * spec.words_per_topic, rng)
    w = spec.words_per_topic
    return [words[t * w : (t + 1) * w] for t in range(spec.num_topics)]


def _sentence(pool: list[str], spec: SynthSpec, rng: np.random.Generator) -> list[str]:
    lo, hi = spec.sentence_len
    n = int(rng.integers(lo, hi + 1))
    out = []
    for _ in range(n):
        if out and rng.random() < spec.function_word_rate:
            out.append(str(rng.choice(FUNCTION_WORDS)))
        out.append(str(rng.choice(pool)))
    out.append(".")
    return out


LAYOUTS = ("interleaved", "shuffled")


def synth_corpus(
    seed: int,
    num_docs: int,
    topics_per_doc: int = 2,
    sents_per_topic: int | tuple[int, int] = 3,
    vocab_spec: SynthSpec | None = None,
    pool_seed: int | None = None,
    layout: str = "interleaved",
    lead: int = 3,
) -> Corpus:
    """Documents built from sentences of ``topics_per_doc`` disjoint topic
    pools, one controlled example per (document, topic).

    The aspects are the topic's keywords and the controlled summary is every
    sentence of that topic in document order. ``sents_per_topic`` is a fixed
    count or an inclusive ``(lo, hi)`` range drawn per topic.

    ``layout="interleaved"`` orders sentences round-robin over the topics
    and takes the first sentence of each topic as the general summary.
    ``layout="shuffled"`` puts the sentences in random order and takes the
    first ``lead`` sentences as the general summary, so the overlap between
    general and controlled summaries varies with where the topic landed.

    ``pool_seed`` fixes the word pools independently of ``seed`` so that
    train and test corpora share a vocabulary.
    """
    spec = vocab_spec or SynthSpec()
    if topics_per_doc < 2:
        raise ValueError("topics_per_doc must be at least 2")
    if topics_per_doc > spec.num_topics:
        raise ValueError("more topics per document than topics available")
    if layout not in LAYOUTS:
        raise ValueError(f"unknown layout {layout!r}; expected one of {LAYOUTS}")
    if lead < 1:
        raise ValueError("lead must be at least 1")
    lo, hi = (sents_per_topic, sents_per_topic) if isinstance(sents_per_topic, int) else sents_per_topic
    if not 1 <= lo <= hi:
        raise ValueError("sents_per_topic must be at least 1")
    pools = topic_pools(seed if pool_seed is None else pool_seed, spec)
    rng = np.random.default_rng([seed, 1])
    examples = []
    for doc_id in range(num_docs):
        topics = [int(t) for t in rng.choice(spec.num_topics, size=topics_per_doc, replace=False)]
        counts = {t: int(rng.integers(lo, hi + 1)) for t in topics}
        if layout == "interleaved":
            labels = [t for i in range(max(counts.values())) for t in topics if i < counts[t]]
        else:
            labels = [t for t in topics for _ in range(counts[t])]
            labels = [labels[i] for i in rng.permutation(len(labels))]
        sents = [_sentence(pools[t], spec, rng) for t in labels]
        doc = [tok for s in sents for tok in s]
        if layout == "interleaved":
            general = [tok for t in topics for tok in sents[labels.index(t)]]
        else:
            general = [tok for s in sents[:lead] for tok in s]
        for t in topics:
            examples.append(
                ControlledExample(
                    document=tuple(doc),
                    aspects=tuple(pools[t][: spec.keywords_per_topic]),
                    controlled_summary=tuple(tok for s, lab in zip(sents, labels) if lab == t for tok in s),
                    general_summary=tuple(general),
                    meta={"doc_id": doc_id, "topic": t},
                )
            )
    return Corpus(tuple(examples), source=f"synthetic(seed={seed})", split="all")


def unique_documents(corpus: Corpus) -> list[ControlledExample]:
    """One example per distinct document (first occurrence)."""
    seen, out = set(), []
    for ex in corpus:
        if ex.document not in seen:
            seen.add(ex.document)
            out.append(ex)
    return out
