"""Evaluation modes, per-example reports, degree-of-control bins and
attention traces."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .metrics import aspect_relevance, mean_rouge_f1, rouge_all, rouge_n, unique_word_ratio
from .model import AttentionRecord, Seq2Seq, generate, source_ids
from .numerics import ParameterError
from .relevance import DEFAULT_SIGMA, RelevanceParams, zero_shot_control
from .selection import (
    MIN_OVERLAP,
    MIN_UNIQUE_RATIO,
    CandidateSet,
    filter_candidates,
    select_central,
    select_oracle,
    sweep,
)
from .text import ControlledExample, Vocabulary

log = logging.getLogger(__name__)

REPORT_SCHEMA = 1
EVAL_MODES = ("doc-only", "prefix", "relattn-val", "relattn-os", "relattn-oracle")
SWEEP_MODES = ("relattn-val", "relattn-os", "relattn-oracle")
METRIC_KEYS = ("rouge1", "rouge2", "rougeLsum", "mean_rouge", "aspect_relevance")
MIN_BIN_SIZE = 10


@dataclass
class ExampleRecord:
    index: int
    mode: str
    summary: str
    w_rel: float | None
    rouge1: float
    rouge2: float
    rougeLsum: float
    mean_rouge: float
    aspect_relevance: float
    general_rouge1: float | None = None
    fallback: bool = False
    filter_log: list[dict] | None = None


@dataclass
class EvalReport:
    records: list[ExampleRecord]
    modes: list[str]
    val_w: float | None = None
    val_scores: dict[float, float] | None = None
    config: dict = field(default_factory=dict)

    def by_mode(self, mode: str) -> list[ExampleRecord]:
        return [r for r in self.records if r.mode == mode]

    def aggregates(self) -> dict[str, dict[str, float]]:
        out = {}
        for mode in self.modes:
            rows = self.by_mode(mode)
            agg = {k: float(np.mean([getattr(r, k) for r in rows])) for k in METRIC_KEYS}
            ws = [r.w_rel for r in rows if r.w_rel is not None]
            agg["w_rel"] = float(np.mean(ws)) if ws else None
            agg["n"] = len(rows)
            out[mode] = agg
        return out

    def to_json(self) -> dict:
        return {
            "schema_version": REPORT_SCHEMA,
            "kind": "eval-report",
            "config": self.config,
            "modes": self.modes,
            "val_w": self.val_w,
            "val_scores": None if self.val_scores is None else [{"w_rel": w, "score": s} for w, s in self.val_scores.items()],
            "aggregates": self.aggregates(),
            "records": [asdict(r) for r in self.records],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "EvalReport":
        if doc.get("kind") != "eval-report":
            raise ParameterError("not an evaluation report")
        vs = doc.get("val_scores")
        return cls(
            [ExampleRecord(**r) for r in doc["records"]],
            list(doc["modes"]),
            doc.get("val_w"),
            None if vs is None else {e["w_rel"]: e["score"] for e in vs},
            doc.get("config") or {},
        )


def _record(
    index: int,
    mode: str,
    ex: ControlledExample,
    summary: Sequence[str],
    w_rel: float | None,
    fallback: bool = False,
    filter_log: list[dict] | None = None,
) -> ExampleRecord:
    ref = ex.controlled_summary
    scores = rouge_all(summary, ref)
    general = None if ex.general_summary is None else rouge_n(ex.general_summary, ref, 1).f1
    return ExampleRecord(
        index=index,
        mode=mode,
        summary=" ".join(summary),
        w_rel=w_rel,
        rouge1=scores["rouge1"].f1,
        rouge2=scores["rouge2"].f1,
        rougeLsum=scores["rougeLsum"].f1,
        mean_rouge=sum(s.f1 for s in scores.values()) / 3.0,
        aspect_relevance=aspect_relevance(summary, ex.aspects),
        general_rouge1=general,
        fallback=fallback,
        filter_log=filter_log,
    )


def choose_val_weight(
    model: Seq2Seq,
    vocab: Vocabulary,
    val: Sequence[ControlledExample],
    grid: Sequence[float],
    params: RelevanceParams | None = None,
    sigma: float | None = DEFAULT_SIGMA,
) -> tuple[float, dict[float, float]]:
    """The single grid weight with the best mean reference ROUGE on ``val``;
    ties go to the smallest weight."""
    if not val:
        raise ParameterError("relattn-val needs a non-empty validation split")
    totals = np.zeros(len(grid))
    for ex in val:
        if ex.controlled_summary is None:
            raise ParameterError("validation examples need controlled summaries")
        cands = sweep(model, vocab, ex, grid, params, sigma)
        totals += [mean_rouge_f1(c.tokens, ex.controlled_summary) for c in cands.entries]
    means = totals / len(val)
    best = int(np.argmax(means))
    return float(grid[best]), {float(w): float(s) for w, s in zip(grid, means)}


def evaluate(
    model: Seq2Seq,
    vocab: Vocabulary,
    test: Sequence[ControlledExample],
    modes: Sequence[str],
    grid: Sequence[float],
    val: Sequence[ControlledExample] | None = None,
    params: RelevanceParams | None = None,
    sigma: float | None = DEFAULT_SIGMA,
    min_unique_ratio: float = MIN_UNIQUE_RATIO,
    min_overlap: float = MIN_OVERLAP,
    config: dict | None = None,
) -> EvalReport:
    modes = list(modes)
    if not modes:
        raise ParameterError("no evaluation modes requested")
    unknown = [m for m in modes if m not in EVAL_MODES]
    if unknown:
        raise ParameterError(f"unknown modes {unknown}; expected a subset of {EVAL_MODES}")
    if any(ex.controlled_summary is None for ex in test):
        raise ParameterError("evaluation needs controlled reference summaries")
    grid = [float(w) for w in grid]
    val_w = val_scores = None
    if "relattn-val" in modes:
        val_w, val_scores = choose_val_weight(model, vocab, val or [], grid, params, sigma)
        log.info("relattn-val weight %.4f", val_w)
    records = []
    for i, ex in enumerate(test):
        cands: CandidateSet | None = None
        if any(m in SWEEP_MODES for m in modes):
            cands = filter_candidates(sweep(model, vocab, ex, grid, params, sigma), min_unique_ratio, min_overlap)
        for mode in modes:
            if mode in ("doc-only", "prefix"):
                summary, _ = generate(model, vocab, ex, mode)
                records.append(_record(i, mode, ex, summary, None))
            elif mode == "relattn-val":
                records.append(_record(i, mode, ex, cands.at(val_w).tokens, val_w))
            else:
                res = select_central(cands) if mode == "relattn-os" else select_oracle(cands, ex.controlled_summary)
                records.append(_record(i, mode, ex, res.summary, res.w_rel, res.fallback, res.filter_log))
    return EvalReport(records, modes, val_w, val_scores, config or {})


@dataclass
class BinRow:
    lo: float
    hi: float
    n: int
    os_better: int | None
    prefix_better: int | None
    mean_os_w: float | None
    mean_oracle_w: float | None
    flagged: bool


def bin_table(report: EvalReport, width: float = 0.1) -> list[BinRow]:
    """Bins over ROUGE-1(general reference, controlled reference).

    Every example falls in exactly one bin; the last bin is closed on the
    right. Bins with fewer than 10 examples are flagged.
    """
    if not 0.0 < width <= 1.0:
        raise ParameterError("bin width must lie in (0, 1]")
    per_ex: dict[int, dict[str, ExampleRecord]] = {}
    for r in report.records:
        per_ex.setdefault(r.index, {})[r.mode] = r
    keys = {}
    for idx, rows in per_ex.items():
        g = next(iter(rows.values())).general_rouge1
        if g is None:
            raise ParameterError(f"example {idx} has no general reference summary")
        keys[idx] = g
    n_bins = int(math.ceil(1.0 / width - 1e-9))
    table = []
    for b in range(n_bins):
        lo, hi = b * width, min((b + 1) * width, 1.0)
        last = b == n_bins - 1
        members = [i for i, g in keys.items() if lo <= g < hi or (last and g == hi)]
        os_rows = [per_ex[i]["relattn-os"] for i in members if "relattn-os" in per_ex[i]]
        orc_rows = [per_ex[i]["relattn-oracle"] for i in members if "relattn-oracle" in per_ex[i]]
        os_better = prefix_better = None
        if "relattn-os" in report.modes and "prefix" in report.modes:
            pairs = [(per_ex[i]["relattn-os"].rouge1, per_ex[i]["prefix"].rouge1) for i in members]
            os_better = sum(a > b for a, b in pairs)
            prefix_better = sum(b > a for a, b in pairs)
        table.append(
            BinRow(
                round(lo, 10),
                round(hi, 10),
                len(members),
                os_better,
                prefix_better,
                float(np.mean([r.w_rel for r in os_rows])) if os_rows else None,
                float(np.mean([r.w_rel for r in orc_rows])) if orc_rows else None,
                len(members) < MIN_BIN_SIZE,
            )
        )
    return table


def attention_trace(
    model: Seq2Seq,
    vocab: Vocabulary,
    example: ControlledExample,
    w_rel: float,
    params: RelevanceParams | None = None,
    sigma: float | None = DEFAULT_SIGMA,
) -> dict:
    """Relevance vector plus every per-step cross-attention row of a
    relattn generation at ``w_rel``."""
    control = zero_shot_control(model.config.d_model, w_rel, sigma)
    if params is not None:
        control.params = params
    enc = model.encode(source_ids(example, vocab, "relattn"))
    relevance = control.relevance(model, enc, vocab.encode(example.aspects)).values.data[0]
    record = AttentionRecord()
    summary, _ = generate(model, vocab, example, "relattn", control, record)
    cross = []
    for layer in range(model.config.n_dec_layers):
        for head in range(model.config.n_heads):
            if ("cross", layer, head) in record.rows:
                rows = record.matrix("cross", layer, head)
                cross.append({"layer": layer, "head": head, "rows": rows.tolist()})
    return {
        "w_rel": float(w_rel),
        "source": [vocab.itos[i] for i in enc.ids],
        "aspects": list(example.aspects),
        "relevance": relevance.tolist(),
        "summary": " ".join(summary),
        "unique_word_ratio": unique_word_ratio(summary),
        "cross_attention": cross,
    }
