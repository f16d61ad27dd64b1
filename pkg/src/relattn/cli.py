"""Command-line interface.

Every command reads one JSON config (``--config``; all fields optional) plus
``--set section.key=value`` overrides, and writes JSON artifacts that embed
the resolved config. Exit codes: 0 success, 1 usage or configuration error,
2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .evaluation import EVAL_MODES, EvalReport, attention_trace, bin_table, evaluate
from .model import Checkpoint, ConfigurationError, ModelConfig, load_checkpoint, save_checkpoint
from .numerics import DegenerateMaskError, NumericError, ParameterError, ShapeError
from .relevance import EmptyAspectError
from .selection import MIN_OVERLAP, MIN_UNIQUE_RATIO, check_grid, default_grid, filter_candidates, select_central, select_oracle, sweep
from .text import SEP, CorpusFormatError, SchemaError, SynthSpec, build_vocab, load_jsonl, synth_corpus, unique_documents
from .training import BACKBONE_ALL, RELATTN_ONLY, TrainConfig, pretrain_backbone, train_fewshot

log = logging.getLogger("relattn")

SCHEMA_VERSION = 1
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


@dataclass
class SynthConfig:
    num_docs: int = 200
    topics_per_doc: int = 2
    sents_per_topic: list[int] = field(default_factory=lambda: [3, 3])
    layout: str = "interleaved"
    lead: int = 3
    pool_seed: int = 0


@dataclass
class GridConfig:
    """Either explicit ``values`` or ``count`` evenly spaced weights up to
    ``upper``."""

    upper: float = 0.30
    count: int = 30
    values: list[float] | None = None

    def resolve(self) -> list[float]:
        return check_grid(self.values) if self.values else default_grid(self.upper, self.count)


@dataclass
class FewShotConfig:
    n_examples: int = 10
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    lr: float = 5e-3
    steps: int = 40
    batch_size: int = 5


@dataclass
class RunConfig:
    seed: int = 0
    paths: dict = field(default_factory=dict)
    synth: SynthConfig = field(default_factory=SynthConfig)
    model: dict = field(default_factory=lambda: {"d_model": 64, "n_heads": 4, "n_enc_layers": 2, "n_dec_layers": 2, "d_ff": 128, "max_src_len": 128, "max_tgt_len": 48})
    pretrain: dict = field(default_factory=lambda: {"lr": 3e-3, "steps": 1500, "batch_size": 8, "warmup": 50, "denoise_rate": 0.5, "mask_rate": 0.15})
    fewshot: FewShotConfig = field(default_factory=FewShotConfig)
    grid: GridConfig = field(default_factory=GridConfig)
    sigma: float | None = 1.0
    min_unique_ratio: float = MIN_UNIQUE_RATIO
    min_overlap: float = MIN_OVERLAP
    val_size: int = 100
    bin_width: float = 0.1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigurationError(f"unknown config keys: {sorted(extra)}")
        base = cls()
        kw = {}
        for name in known:
            if name not in d:
                continue
            val = d[name]
            cur = getattr(base, name)
            if isinstance(cur, (SynthConfig, GridConfig, FewShotConfig)):
                sub_known = {f.name for f in fields(cur)}
                if not isinstance(val, dict) or set(val) - sub_known:
                    raise ConfigurationError(f"bad '{name}' section: {val!r}")
                val = type(cur)(**{**asdict(cur), **val})
            elif isinstance(cur, dict):
                if not isinstance(val, dict):
                    raise ConfigurationError(f"'{name}' must be an object")
                val = {**cur, **val}
            kw[name] = val
        return cls(**{**{f.name: getattr(base, f.name) for f in fields(cls)}, **kw})

    def model_config(self, vocab_size: int) -> ModelConfig:
        try:
            return ModelConfig(vocab_size=vocab_size, **self.model)
        except TypeError as err:
            raise ConfigurationError(f"bad model section: {err}") from None

    def pretrain_config(self) -> TrainConfig:
        try:
            return TrainConfig(seed=self.seed, trainable=BACKBONE_ALL, **self.pretrain)
        except TypeError as err:
            raise ConfigurationError(f"bad pretrain section: {err}") from None

    def fewshot_config(self) -> TrainConfig:
        f = self.fewshot
        return TrainConfig(lr=f.lr, steps=f.steps, batch_size=f.batch_size, seed=self.seed, trainable=RELATTN_ONLY)


def _apply_override(d: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigurationError(f"override {assignment!r} is not key=value")
    key, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    parts = key.split(".")
    node = d
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigurationError(f"cannot set {key}: {p} is not a section")
    node[parts[-1]] = value


def resolve_config(path: str | None, overrides: list[str]) -> RunConfig:
    raw: dict = {}
    if path:
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigurationError(f"config file {path} not found") from None
        except json.JSONDecodeError as err:
            raise ConfigurationError(f"config file {path} is not valid JSON ({err.msg})") from None
        if not isinstance(raw, dict):
            raise ConfigurationError("config file must hold a JSON object")
    raw = copy.deepcopy(raw)
    for o in overrides:
        _apply_override(raw, o)
    return RunConfig.from_dict(raw)


def _write_json(path: str, doc: dict) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")


def _artifact(kind: str, cfg: RunConfig, **body) -> dict:
    return {"schema_version": SCHEMA_VERSION, "kind": kind, "config": cfg.to_dict(), **body}


def _path(args, cfg: RunConfig, name: str, required: bool = True) -> str | None:
    val = getattr(args, name, None) or cfg.paths.get(name)
    if required and not val:
        raise ConfigurationError(f"missing --{name.replace('_', '-')} (or paths.{name} in the config)")
    return val


def _load_corpus(path: str, require_summary: bool = True):
    try:
        corpus = load_jsonl(path, require_summary=require_summary)
    except FileNotFoundError:
        raise CorpusFormatError(f"corpus {path} not found") from None
    if len(corpus) == 0:
        raise SchemaError(f"corpus {path} is empty")
    return corpus


def _load_ckpt(path: str) -> Checkpoint:
    try:
        return load_checkpoint(path)
    except FileNotFoundError:
        raise ConfigurationError(f"checkpoint {path} not found") from None
    except (json.JSONDecodeError, KeyError) as err:
        raise ConfigurationError(f"checkpoint {path} is malformed ({err})") from None


# -- commands -----------------------------------------------------------------


def cmd_synth(args, cfg: RunConfig) -> None:
    s = cfg.synth
    corpus = synth_corpus(cfg.seed, s.num_docs, s.topics_per_doc, tuple(s.sents_per_topic), SynthSpec(), s.pool_seed, s.layout, s.lead)
    out = _path(args, cfg, "out")
    corpus.to_jsonl(out)
    _write_json(out + ".config.json", _artifact("synth-corpus", cfg, examples=len(corpus)))
    log.info("wrote %d examples to %s", len(corpus), out)


def cmd_pretrain(args, cfg: RunConfig) -> None:
    corpus = _load_corpus(_path(args, cfg, "corpus"), require_summary=False)
    vocab = build_vocab(corpus.texts(), specials=[SEP])
    docs = unique_documents(corpus)
    model, hist = pretrain_backbone(docs, vocab, cfg.model_config(len(vocab)), cfg.pretrain_config())
    meta = {"config": cfg.to_dict(), "seed": cfg.seed, "history": hist.intervals, "documents": len(docs)}
    save_checkpoint(_path(args, cfg, "out"), Checkpoint(model, vocab, None, meta))


def cmd_train_fewshot(args, cfg: RunConfig) -> None:
    ck = _load_ckpt(_path(args, cfg, "checkpoint"))
    pool = _load_corpus(_path(args, cfg, "corpus"))
    held_path = _path(args, cfg, "heldout", required=False)
    held = list(_load_corpus(held_path)) if held_path else None
    f = cfg.fewshot
    report = train_fewshot(ck.model, ck.vocab, list(pool), cfg.fewshot_config(), f.seeds, f.n_examples, held, cfg.sigma)
    out_dir = Path(_path(args, cfg, "out"))
    out_dir.mkdir(parents=True, exist_ok=True)
    for run in report.runs:
        meta = {**ck.meta, "fewshot_seed": run.seed, "config": cfg.to_dict()}
        save_checkpoint(out_dir / f"fewshot_seed{run.seed}.json", Checkpoint(ck.model, ck.vocab, run.relattn_state(), meta))
    _write_json(str(out_dir / "report.json"), _artifact("fewshot-report", cfg, **report.to_json()))


def _split_val(test: list, cfg: RunConfig) -> tuple[list, list]:
    """Hold out ``val_size`` examples (at most half) of the test corpus."""
    n = min(cfg.val_size, len(test) // 2)
    if n < 1:
        raise SchemaError("corpus too small to hold out a validation split")
    idx = np.random.default_rng(cfg.seed).permutation(len(test))
    val_ids = set(idx[:n].tolist())
    return [ex for i, ex in enumerate(test) if i in val_ids], [ex for i, ex in enumerate(test) if i not in val_ids]


def cmd_eval(args, cfg: RunConfig) -> None:
    ck = _load_ckpt(_path(args, cfg, "checkpoint"))
    test = list(_load_corpus(_path(args, cfg, "corpus")))
    modes = args.modes or list(EVAL_MODES)
    val = None
    if "relattn-val" in modes:
        val_path = _path(args, cfg, "val_corpus", required=False)
        if val_path:
            val = list(_load_corpus(val_path))[: cfg.val_size]
        else:
            val, test = _split_val(test, cfg)
    report = evaluate(
        ck.model,
        ck.vocab,
        test,
        modes,
        cfg.grid.resolve(),
        val,
        sigma=cfg.sigma,
        min_unique_ratio=cfg.min_unique_ratio,
        min_overlap=cfg.min_overlap,
        config=cfg.to_dict(),
    )
    _write_json(_path(args, cfg, "out"), report.to_json())


def cmd_bins(args, cfg: RunConfig) -> None:
    path = _path(args, cfg, "report")
    try:
        report = EvalReport.from_json(json.loads(Path(path).read_text()))
    except FileNotFoundError:
        raise ConfigurationError(f"report {path} not found") from None
    except (json.JSONDecodeError, KeyError, TypeError) as err:
        raise SchemaError(f"report {path} is malformed ({err})") from None
    width = args.width if args.width is not None else cfg.bin_width
    rows = bin_table(report, width)
    _write_json(_path(args, cfg, "out"), _artifact("bin-table", cfg, width=width, bins=[asdict(r) for r in rows]))


def _example(cfg: RunConfig, args):
    corpus = _load_corpus(_path(args, cfg, "corpus"), require_summary=False)
    if not 0 <= args.index < len(corpus):
        raise ConfigurationError(f"--index {args.index} out of range for {len(corpus)} examples")
    return corpus[args.index]


def cmd_trace(args, cfg: RunConfig) -> None:
    ck = _load_ckpt(_path(args, cfg, "checkpoint"))
    ex = _example(cfg, args)
    trace = attention_trace(ck.model, ck.vocab, ex, args.w_rel, sigma=cfg.sigma)
    _write_json(_path(args, cfg, "out"), _artifact("attention-trace", cfg, index=args.index, **trace))


def cmd_select(args, cfg: RunConfig) -> None:
    ck = _load_ckpt(_path(args, cfg, "checkpoint"))
    ex = _example(cfg, args)
    cands = filter_candidates(
        sweep(ck.model, ck.vocab, ex, cfg.grid.resolve(), sigma=cfg.sigma), cfg.min_unique_ratio, cfg.min_overlap
    )
    res = select_oracle(cands, ex.controlled_summary) if args.oracle else select_central(cands)
    body = {
        "index": args.index,
        "base": " ".join(cands.base),
        "candidates": [{"w_rel": c.w_rel, "status": c.status, "summary": " ".join(c.tokens)} for c in cands.entries],
        "selection": res.to_json(),
    }
    _write_json(_path(args, cfg, "out"), _artifact("selection", cfg, **body))


COMMANDS = {
    "synth": cmd_synth,
    "pretrain": cmd_pretrain,
    "train-fewshot": cmd_train_fewshot,
    "eval": cmd_eval,
    "bins": cmd_bins,
    "trace": cmd_trace,
    "select": cmd_select,
}


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on usage errors; usage errors are exit 1 here."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config field, e.g. grid.upper=0.9")
    common.add_argument("--seed", type=int, help="shortcut for --set seed=N")
    common.add_argument("--out", help="output path")
    common.add_argument("--log-level", default="WARNING")

    p = _Parser(prog="relattn", description="Relevance-attention steering for controllable summarization.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("synth", parents=[common], help="write a synthetic corpus as JSONL")
    sp = sub.add_parser("pretrain", parents=[common], help="pretrain the backbone on general summaries")
    sp.add_argument("--corpus")
    sp = sub.add_parser("train-fewshot", parents=[common], help="train relevance parameters with a frozen backbone")
    sp.add_argument("--checkpoint")
    sp.add_argument("--corpus", help="pool of controlled training examples")
    sp.add_argument("--heldout", help="held-out corpus for the per-seed ROUGE report")
    sp = sub.add_parser("eval", parents=[common], help="evaluate generation modes")
    sp.add_argument("--checkpoint")
    sp.add_argument("--corpus")
    sp.add_argument("--val-corpus", dest="val_corpus")
    sp.add_argument("--modes", nargs="+", choices=EVAL_MODES)
    sp = sub.add_parser("bins", parents=[common], help="degree-of-control bin table from an eval report")
    sp.add_argument("--report")
    sp.add_argument("--width", type=float)
    for name, helptext in (("trace", "dump relevance and cross-attention rows"), ("select", "run the weight sweep and selection for one example")):
        sp = sub.add_parser(name, parents=[common], help=helptext)
        sp.add_argument("--checkpoint")
        sp.add_argument("--corpus")
        sp.add_argument("--index", type=int, default=0)
        if name == "trace":
            sp.add_argument("--w-rel", dest="w_rel", type=float, required=True)
        else:
            sp.add_argument("--oracle", action="store_true", help="select against the reference instead of centrally")
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = list(args.set) + ([f"seed={args.seed}"] if args.seed is not None else [])
        cfg = resolve_config(args.config, overrides)
        COMMANDS[args.command](args, cfg)
    except (CorpusFormatError, SchemaError, EmptyAspectError, DegenerateMaskError, ShapeError) as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigurationError, ParameterError) as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as err:
        print(f"io error: {err}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
