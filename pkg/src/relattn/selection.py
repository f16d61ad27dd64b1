"""Online selection of the control weight (OS) and its oracle upper bound.

A sweep generates one greedy summary per grid value plus the uncontrolled
base summary. Degenerate candidates are filtered, duplicates collapse onto
their smallest-weight representative, and the kept candidate with the
highest mean ROUGE-1 F1 against the other kept candidates is chosen.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .metrics import mean_rouge_f1, rouge_n, unique_word_ratio, word_overlap
from .model import CrossAttentionOverride, Seq2Seq, source_ids
from .numerics import ParameterError
from .relevance import DEFAULT_SIGMA, RelAttnControl, RelevanceParams, blend_weight_zero_shot
from .text import ControlledExample, Vocabulary

log = logging.getLogger(__name__)

KEPT = "kept"
REP_FILTERED = "rep-filtered"
DISTRACTION_FILTERED = "distraction-filtered"
DUPLICATE = "duplicate"
ERROR = "error"

MIN_UNIQUE_RATIO = 0.6
MIN_OVERLAP = 0.2


def default_grid(upper: float = 0.30, count: int = 30) -> list[float]:
    """``count`` evenly spaced weights ending at ``upper``; the defaults give
    0.01, 0.02, ..., 0.30."""
    if count < 1 or not 0.0 < upper <= 1.0:
        raise ParameterError("grid needs count >= 1 and upper in (0, 1]")
    return [round(upper * i / count, 6) for i in range(1, count + 1)]


@dataclass
class Candidate:
    w_rel: float
    tokens: tuple[str, ...]
    status: str = KEPT
    error: str | None = None


@dataclass
class CandidateSet:
    base: tuple[str, ...]
    entries: list[Candidate]

    def __post_init__(self):
        ws = [c.w_rel for c in self.entries]
        if any(b <= a for a, b in zip(ws, ws[1:])):
            raise ParameterError("candidate weights must be strictly increasing")

    def kept(self) -> list[Candidate]:
        return [c for c in self.entries if c.status == KEPT]

    def at(self, w_rel: float) -> Candidate:
        for c in self.entries:
            if abs(c.w_rel - w_rel) < 1e-12:
                return c
        raise KeyError(w_rel)

    def filter_log(self) -> list[dict]:
        return [{"w_rel": c.w_rel, "status": c.status} for c in self.entries]


@dataclass
class SelectionResult:
    w_rel: float
    summary: tuple[str, ...]
    scores: dict[float, float]
    filter_log: list[dict]
    fallback: bool = False
    method: str = "central"

    def to_json(self) -> dict:
        d = asdict(self)
        d["summary"] = " ".join(self.summary)
        d["scores"] = [{"w_rel": w, "score": s} for w, s in self.scores.items()]
        return d


def check_grid(grid: Sequence[float]) -> list[float]:
    grid = [float(w) for w in grid]
    if not grid:
        raise ParameterError("empty grid")
    if any(not 0.0 < w <= 1.0 for w in grid):
        raise ParameterError("grid values must lie in (0, 1]")
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise ParameterError("grid values must be strictly increasing (no duplicates)")
    return grid


def sweep(
    model: Seq2Seq,
    vocab: Vocabulary,
    example: ControlledExample,
    grid: Sequence[float] | None = None,
    params: RelevanceParams | None = None,
    sigma: float | None = DEFAULT_SIGMA,
    batched: bool = True,
) -> CandidateSet:
    """Base summary plus one greedy generation per grid value.

    The encoder pass and the relevance distribution are computed once and
    shared by every candidate; with ``batched`` all grid values are decoded
    together. A failing candidate is recorded with status ``error`` and the
    sweep continues.
    """
    grid = check_grid(default_grid() if grid is None else grid)
    params = params or RelevanceParams.identity(model.config.d_model)
    enc = model.encode(source_ids(example, vocab, "doc-only"))
    base = tuple(vocab.decode(model.greedy(enc)))
    control = RelAttnControl(params, 0.0, sigma)
    relevance = control.relevance(model, enc, vocab.encode(example.aspects)).values
    if batched:
        try:
            outs = model.greedy_sweep(enc, relevance, grid)
            return CandidateSet(base, [Candidate(w, tuple(vocab.decode(o))) for w, o in zip(grid, outs)])
        except (ValueError, ArithmeticError) as err:
            log.warning("batched sweep failed (%s); retrying candidates one at a time", err)
    cfg = model.config
    entries = []
    for w in grid:
        try:
            ov = CrossAttentionOverride(relevance, blend_weight_zero_shot(w, cfg.n_dec_layers, cfg.n_heads))
            entries.append(Candidate(w, tuple(vocab.decode(model.greedy(enc, ov)))))
        except (ValueError, ArithmeticError) as err:
            log.warning("candidate w_rel=%s failed: %s", w, err)
            entries.append(Candidate(w, (), ERROR, str(err)))
    return CandidateSet(base, entries)


def filter_candidates(
    cands: CandidateSet,
    min_unique_ratio: float = MIN_UNIQUE_RATIO,
    min_overlap: float = MIN_OVERLAP,
) -> CandidateSet:
    """Mark repetitive, distracted and duplicate candidates, in weight order."""
    seen: set[tuple[str, ...]] = set()
    out = []
    for c in cands.entries:
        if c.status == ERROR:
            out.append(c)
            continue
        if unique_word_ratio(c.tokens) < min_unique_ratio:
            status = REP_FILTERED
        elif word_overlap(c.tokens, cands.base) < min_overlap:
            status = DISTRACTION_FILTERED
        elif c.tokens in seen:
            status = DUPLICATE
        else:
            status = KEPT
            seen.add(c.tokens)
        out.append(Candidate(c.w_rel, c.tokens, status, c.error))
    return CandidateSet(cands.base, out)


def _first_max(scores, tol: float = 1e-12) -> int:
    """Index of the first score within ``tol`` of the maximum, so that ties
    lost to float summation order still go to the smallest weight."""
    scores = np.asarray(scores, dtype=np.float64)
    return int(np.flatnonzero(scores >= scores.max() - tol)[0])


def _fallback(cands: CandidateSet, method: str) -> SelectionResult:
    return SelectionResult(0.0, cands.base, {}, cands.filter_log(), fallback=True, method=method)


def select_central(cands: CandidateSet, include_self: bool = False) -> SelectionResult:
    """Kept candidate with the highest mean ROUGE-1 F1 to the other kept
    candidates; ties go to the smallest weight."""
    kept = cands.kept()
    if not kept:
        return _fallback(cands, "central")
    k = len(kept)
    if k == 1:
        only = kept[0]
        return SelectionResult(only.w_rel, only.tokens, {only.w_rel: 1.0}, cands.filter_log(), method="central")
    sim = np.eye(k) if include_self else np.zeros((k, k))
    for i in range(k):
        for j in range(i + 1, k):
            sim[i, j] = sim[j, i] = rouge_n(kept[i].tokens, kept[j].tokens, 1).f1
    scores = sim.sum(axis=1) / (k if include_self else k - 1)
    best = _first_max(scores)
    chosen = kept[best]
    return SelectionResult(
        chosen.w_rel,
        chosen.tokens,
        {c.w_rel: float(s) for c, s in zip(kept, scores)},
        cands.filter_log(),
        method="central",
    )


def select_oracle(cands: CandidateSet, reference: Sequence[str] | None) -> SelectionResult:
    """Kept candidate with the best mean(R-1, R-2, R-LSum) F1 against the
    reference; ties go to the smallest weight."""
    if reference is None:
        raise ParameterError("oracle selection needs a reference summary")
    kept = cands.kept()
    if not kept:
        return _fallback(cands, "oracle")
    scores = [mean_rouge_f1(c.tokens, reference) for c in kept]
    best = _first_max(scores)
    return SelectionResult(
        kept[best].w_rel,
        kept[best].tokens,
        {c.w_rel: s for c, s in zip(kept, scores)},
        cands.filter_log(),
        method="oracle",
    )
