"""ROUGE-1/2/LSum over word tokens, candidate-filter statistics and an
aspect-relevance score.

No stemming or stopword removal is applied.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Sequence

from .numerics import ParameterError
from .text import split_sentences


@dataclass(frozen=True)
class RougeScore:
    precision: float
    recall: float
    f1: float

    @classmethod
    def from_counts(cls, hits: int, cand_total: int, ref_total: int) -> "RougeScore":
        if cand_total == 0 or ref_total == 0:
            return cls(0.0, 0.0, 0.0)
        p, r = hits / cand_total, hits / ref_total
        f = 2 * p * r / (p + r) if p + r > 0 else 0.0
        return cls(p, r, f)


def ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def rouge_n(candidate: Sequence[str], reference: Sequence[str], n: int = 1) -> RougeScore:
    if n not in (1, 2):
        raise ParameterError(f"rouge_n supports n in {{1, 2}}, got {n}")
    c, r = ngrams(candidate, n), ngrams(reference, n)
    hits = sum((c & r).values())
    return RougeScore.from_counts(hits, sum(c.values()), sum(r.values()))


def _lcs_table(a: Sequence[str], b: Sequence[str]) -> list[list[int]]:
    t = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            t[i][j] = t[i - 1][j - 1] + 1 if a[i - 1] == b[j - 1] else max(t[i - 1][j], t[i][j - 1])
    return t


def _lcs_positions(ref: Sequence[str], cand: Sequence[str]) -> set[int]:
    """Indices into ``ref`` of one longest common subsequence with ``cand``."""
    t = _lcs_table(ref, cand)
    i, j, hit = len(ref), len(cand), set()
    while i > 0 and j > 0:
        if ref[i - 1] == cand[j - 1]:
            hit.add(i - 1)
            i -= 1
            j -= 1
        elif t[i - 1][j] >= t[i][j - 1]:
            i -= 1
        else:
            j -= 1
    return hit


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    return _lcs_table(a, b)[-1][-1]


def rouge_lsum(candidate_sents: Sequence[Sequence[str]], reference_sents: Sequence[Sequence[str]]) -> RougeScore:
    """Summary-level LCS.

    For each reference sentence take the union of its LCS positions against
    every candidate sentence; each hit token is counted at most as many
    times as it occurs on either side.
    """
    cand_total = sum(len(s) for s in candidate_sents)
    ref_total = sum(len(s) for s in reference_sents)
    if cand_total == 0 or ref_total == 0:
        return RougeScore(0.0, 0.0, 0.0)
    cand_left = Counter(t for s in candidate_sents for t in s)
    ref_left = Counter(t for s in reference_sents for t in s)
    hits = 0
    for ref in reference_sents:
        union: set[int] = set()
        for cand in candidate_sents:
            union |= _lcs_positions(ref, cand)
        for i in sorted(union):
            tok = ref[i]
            if cand_left[tok] > 0 and ref_left[tok] > 0:
                hits += 1
                cand_left[tok] -= 1
                ref_left[tok] -= 1
    return RougeScore.from_counts(hits, cand_total, ref_total)


def rouge_lsum_tokens(candidate: Sequence[str], reference: Sequence[str]) -> RougeScore:
    return rouge_lsum(split_sentences(candidate), split_sentences(reference))


def rouge_all(candidate: Sequence[str], reference: Sequence[str]) -> dict[str, RougeScore]:
    return {
        "rouge1": rouge_n(candidate, reference, 1),
        "rouge2": rouge_n(candidate, reference, 2),
        "rougeLsum": rouge_lsum_tokens(candidate, reference),
    }


def mean_rouge_f1(candidate: Sequence[str], reference: Sequence[str]) -> float:
    """Mean of ROUGE-1, ROUGE-2 and ROUGE-LSum F1."""
    scores = rouge_all(candidate, reference)
    return sum(s.f1 for s in scores.values()) / 3.0


def unique_word_ratio(tokens: Sequence[str]) -> float:
    if not tokens:
        return 1.0
    return len(set(tokens)) / len(tokens)


def word_overlap(candidate: Sequence[str], base: Sequence[str]) -> float:
    """Share of the base summary's distinct words kept by the candidate."""
    b = set(base)
    if not b:
        return 1.0
    return len(set(candidate) & b) / len(b)


def aspect_relevance(summary: Sequence[str], aspects: Sequence[str]) -> float:
    a = set(aspects)
    if not a:
        raise ParameterError("aspect_relevance needs at least one aspect token")
    return len(set(summary) & a) / len(a)
