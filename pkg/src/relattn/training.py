"""Teacher-forced training: backbone pretraining on general summaries and
few-shot training of the relevance parameters with a frozen backbone."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from .metrics import mean_rouge_f1, rouge_all
from .model import ModelConfig, Seq2Seq, generate, source_ids
from .numerics import NumericError, Parameter, ParameterError, Tape, Tensor
from .relevance import FEW_SHOT, RelAttnControl, RelevanceParams, WrelPredictor
from .text import BOS, EOS, UNK, Corpus, ControlledExample, Vocabulary

log = logging.getLogger(__name__)

BACKBONE_ALL, RELATTN_ONLY = "backbone-all", "relattn-only"


@dataclass
class TrainConfig:
    lr: float = 1e-3
    epochs: int = 1
    steps: int | None = None
    batch_size: int = 8
    seed: int = 0
    trainable: str = BACKBONE_ALL
    log_every: int = 25
    grad_clip: float | None = 1.0
    warmup: int = 0
    # fraction of pretraining examples turned into document reconstruction
    # from a token-masked copy (denoising objective)
    denoise_rate: float = 0.0
    mask_rate: float = 0.15

    def __post_init__(self):
        if not self.lr > 0:
            raise ParameterError(f"learning rate must be positive, got {self.lr}")
        if self.trainable not in (BACKBONE_ALL, RELATTN_ONLY):
            raise ParameterError(f"unknown trainable set {self.trainable!r}")
        if self.batch_size < 1:
            raise ParameterError("batch_size must be at least 1")
        if not (0.0 <= self.denoise_rate <= 1.0 and 0.0 <= self.mask_rate < 1.0):
            raise ParameterError("denoise_rate must lie in [0, 1] and mask_rate in [0, 1)")


class Adam:
    """Adam with bias correction; moments live in ``self.m`` / ``self.v``."""

    def __init__(self, params: Sequence[Parameter], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self, lr: float | None = None, scale: float = 1.0) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad * scale
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _target(example: ControlledExample, which: str) -> tuple[str, ...]:
    tgt = example.controlled_summary if which == "controlled" else example.general_summary
    if tgt is None:
        raise ParameterError(f"example has no {which} summary")
    return tgt


def teacher_forced_loss(
    model: Seq2Seq,
    vocab: Vocabulary,
    example: ControlledExample,
    control: RelAttnControl | None = None,
    target: str = "controlled",
    mode: str = "doc-only",
) -> Tensor:
    """Mean token cross-entropy of the target summary (plus EOS).

    With ``control`` the decoder runs with the relevance blend, so the loss
    is differentiable in the relevance and predictor parameters.
    """
    enc = model.encode(source_ids(example, vocab, "relattn" if control is not None else mode))
    override = None if control is None else control.override(model, enc, vocab.encode(example.aspects))
    return sequence_loss(model, enc, vocab.encode(_target(example, target)), override)


def sequence_loss(model: Seq2Seq, enc, target_ids: Sequence[int], override=None) -> Tensor:
    tgt = list(target_ids)[: model.config.max_tgt_len]
    return nx.cross_entropy(model.decode(enc, [BOS] + tgt, override), tgt + [EOS])


def denoising_loss(model: Seq2Seq, vocab: Vocabulary, example: ControlledExample, rng: np.random.Generator, mask_rate: float) -> Tensor:
    """Reconstruct a random window of the document from a copy with
    ``mask_rate`` of its tokens replaced by UNK.

    Random windows give many distinct views of each document, which makes
    copying cheaper to learn than memorizing the documents.
    """
    ids = np.asarray(vocab.encode(example.document))
    n = len(ids)
    lo = min(n, 4)
    length = int(rng.integers(lo, n + 1))
    start = int(rng.integers(0, n - length + 1))
    ids = ids[start : start + length]
    noisy = np.where(rng.random(len(ids)) < mask_rate, UNK, ids)
    return sequence_loss(model, model.encode(noisy.tolist()), ids.tolist())


def _clip(params: Sequence[Parameter], max_norm: float | None) -> float:
    norm = math.sqrt(sum(float((p.grad * p.grad).sum()) for p in params))
    if max_norm is not None and norm > max_norm:
        for p in params:
            p.grad *= max_norm / norm
    return norm


@dataclass
class TrainHistory:
    losses: list[float] = field(default_factory=list)
    intervals: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def pretrain_backbone(
    examples: Sequence[ControlledExample],
    vocab: Vocabulary,
    model_config: ModelConfig,
    config: TrainConfig,
    model: Seq2Seq | None = None,
) -> tuple[Seq2Seq, TrainHistory]:
    """Train every backbone parameter on (document, general summary) pairs."""
    if config.trainable != BACKBONE_ALL:
        raise ParameterError("pretraining trains the whole backbone")
    examples = [ex for ex in examples if ex.general_summary is not None]
    if not examples:
        raise ParameterError("no examples with a general summary")
    model = model or Seq2Seq.init(model_config, seed=config.seed)
    model.set_trainable(True)
    params = model.parameters()
    opt = Adam(params, lr=config.lr)
    rng = np.random.default_rng(config.seed)
    total_steps = config.steps or config.epochs * math.ceil(len(examples) / config.batch_size)
    hist = TrainHistory()
    window: list[float] = []
    order: list[int] = []
    for step in range(total_steps):
        if len(order) < config.batch_size:
            order.extend(rng.permutation(len(examples)).tolist())
        batch, order = order[: config.batch_size], order[config.batch_size :]
        opt.zero_grad()
        batch_loss = 0.0
        for i in batch:
            with Tape() as tape:
                if config.denoise_rate and rng.random() < config.denoise_rate:
                    loss = denoising_loss(model, vocab, examples[i], rng, config.mask_rate)
                else:
                    loss = teacher_forced_loss(model, vocab, examples[i], target="general")
            nx.backward(tape, loss)
            batch_loss += loss.item()
        batch_loss /= len(batch)
        if not math.isfinite(batch_loss):
            raise NumericError(f"training diverged at step {step}")
        _clip(params, config.grad_clip)
        lr = config.lr * min(1.0, (step + 1) / config.warmup) if config.warmup else config.lr
        opt.step(lr=lr, scale=1.0 / len(batch))
        hist.losses.append(batch_loss)
        window.append(batch_loss)
        if len(window) == config.log_every:
            hist.intervals.append(float(np.mean(window)))
            log.info("step %d loss %.4f", step + 1, hist.intervals[-1])
            window = []
    if window:
        hist.intervals.append(float(np.mean(window)))
    return model, hist


# -- few-shot -----------------------------------------------------------------


@dataclass
class FewShotRun:
    seed: int
    example_ids: list[int]
    losses: list[float]
    initial_loss: float
    final_loss: float
    control: RelAttnControl
    heldout: dict[str, float] | None = None

    def relattn_state(self) -> dict[str, np.ndarray]:
        return {**self.control.params.state(), **self.control.weights.state()}

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "example_ids": self.example_ids,
            "losses": self.losses,
            "initial_loss": self.initial_loss,
            "final_loss": self.final_loss,
            "heldout": self.heldout,
        }


@dataclass
class FewShotReport:
    runs: list[FewShotRun]

    def mean_heldout(self) -> dict[str, float] | None:
        scored = [r.heldout for r in self.runs if r.heldout]
        if not scored:
            return None
        return {k: float(np.mean([h[k] for h in scored])) for k in scored[0]}

    def to_json(self) -> dict:
        return {"runs": [r.to_json() for r in self.runs], "mean_heldout": self.mean_heldout()}


def fewshot_control(d_model: int, n_layers: int, n_heads: int, sigma: float | None) -> RelAttnControl:
    """Identity relevance maps and a zero predictor: step 0 behaves like the
    zero-shot model with every head at w_rel = 0.5."""
    return RelAttnControl(RelevanceParams.identity(d_model, FEW_SHOT), WrelPredictor.zeros(d_model, n_layers, n_heads), sigma)


def control_from_state(state: dict[str, np.ndarray], n_layers: int, n_heads: int, sigma: float | None) -> RelAttnControl:
    return RelAttnControl(RelevanceParams.from_state(state, FEW_SHOT), WrelPredictor.from_state(state, n_layers, n_heads), sigma)


def _mean_loss(model, vocab, examples, control) -> float:
    return float(np.mean([teacher_forced_loss(model, vocab, ex, control).item() for ex in examples]))


def heldout_scores(model: Seq2Seq, vocab: Vocabulary, examples: Sequence[ControlledExample], control) -> dict[str, float]:
    """Mean ROUGE F1 (and their average) of relattn generations against the
    controlled references."""
    rows = []
    for ex in examples:
        summary, _ = generate(model, vocab, ex, "relattn", control)
        s = rouge_all(summary, ex.controlled_summary)
        rows.append([s["rouge1"].f1, s["rouge2"].f1, s["rougeLsum"].f1])
    r1, r2, rl = np.mean(rows, axis=0)
    return {"rouge1": float(r1), "rouge2": float(r2), "rougeLsum": float(rl), "mean": float((r1 + r2 + rl) / 3)}


def train_fewshot(
    model: Seq2Seq,
    vocab: Vocabulary,
    examples: Sequence[ControlledExample],
    config: TrainConfig,
    seeds: Sequence[int] = (0, 1, 2, 3, 4),
    n_examples: int = 10,
    heldout: Sequence[ControlledExample] | None = None,
    sigma: float | None = 1.0,
) -> FewShotReport:
    """Train the relevance maps and the per-head w_rel predictor with the
    backbone frozen, once per seed.

    Each seed draws its own ``n_examples`` training examples when the pool
    is larger, and its own batch order. The reported initial and final
    losses are full-pass means over that seed's training examples.
    """
    if config.trainable != RELATTN_ONLY:
        raise ParameterError("few-shot training only updates the relevance parameters")
    examples = [ex for ex in examples if ex.controlled_summary is not None]
    if not examples:
        raise ParameterError("few-shot training needs at least one example with a controlled summary")
    cfg = model.config
    model.set_trainable(False)
    steps = config.steps or config.epochs * math.ceil(min(n_examples, len(examples)) / config.batch_size)
    runs = []
    for seed in seeds:
        rng = np.random.default_rng(seed)
        if len(examples) > n_examples:
            ids = sorted(rng.choice(len(examples), size=n_examples, replace=False).tolist())
        else:
            ids = list(range(len(examples)))
        train = [examples[i] for i in ids]
        control = fewshot_control(cfg.d_model, cfg.n_dec_layers, cfg.n_heads, sigma)
        params = control.params.parameters() + control.weights.parameters()
        opt = Adam(params, lr=config.lr)
        initial = _mean_loss(model, vocab, train, control)
        losses: list[float] = []
        order: list[int] = []
        for step in range(steps):
            if len(order) < min(config.batch_size, len(train)):
                order.extend(rng.permutation(len(train)).tolist())
            bs = min(config.batch_size, len(train))
            batch, order = order[:bs], order[bs:]
            opt.zero_grad()
            total = 0.0
            for i in batch:
                with Tape() as tape:
                    loss = teacher_forced_loss(model, vocab, train[i], control)
                nx.backward(tape, loss)
                total += loss.item()
            if not math.isfinite(total):
                raise NumericError(f"few-shot training diverged at step {step} (seed {seed})")
            _clip(params, config.grad_clip)
            opt.step(scale=1.0 / len(batch))
            losses.append(total / len(batch))
        final = _mean_loss(model, vocab, train, control)
        log.info("seed %d: loss %.4f -> %.4f", seed, initial, final)
        scores = heldout_scores(model, vocab, heldout, control) if heldout else None
        runs.append(FewShotRun(int(seed), ids, losses, initial, final, control, scores))
    return FewShotReport(runs)
