"""A tiny pre-LN encoder-decoder transformer with greedy decoding.

Every cross-attention head of every decoder layer can be overridden with a
blend of its own distribution and an externally supplied relevance
distribution (see :class:`CrossAttentionOverride`).
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from . import numerics as nx
from .numerics import Parameter, Tensor
from .text import BOS, EOS, PAD, SEP, ControlledExample, Vocabulary

log = logging.getLogger(__name__)

CHECKPOINT_SCHEMA = 1
MODES = ("doc-only", "prefix", "relattn")


class ConfigurationError(ValueError):
    pass


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_heads: int = 4
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    d_ff: int = 128
    max_src_len: int = 128
    max_tgt_len: int = 48

    def __post_init__(self):
        for name, val in asdict(self).items():
            if val <= 0:
                raise ConfigurationError(f"{name} must be positive, got {val}")
        if self.d_model % self.n_heads:
            raise ConfigurationError(f"n_heads={self.n_heads} does not divide d_model={self.d_model}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


def sinusoidal_positions(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(0, d, 2)[None, :]
    angle = pos / np.power(10000.0, i / d)
    pe = np.zeros((n, d))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : d // 2])
    return pe


@dataclass
class EncoderState:
    ids: np.ndarray
    h_enc: Tensor
    mask: np.ndarray
    r_d: Tensor
    # per decoder layer (K, V) of h_enc, filled lazily
    cross_kv: dict = field(default_factory=dict, repr=False)

    @property
    def n(self) -> int:
        return len(self.ids)


@dataclass
class CrossAttentionOverride:
    """Blend weights for every (decoder layer, head).

    ``weights`` is either an array of shape (layers, heads) of floats, or a
    1 x (layers*heads) Tensor (layer-major) when the weights are predicted
    and must stay differentiable.
    """

    relevance: Tensor
    weights: np.ndarray | Tensor | None = None
    # (rows x 1) weights shared by every layer and head; used when several
    # candidates are decoded as stacked blocks
    row_weights: np.ndarray | None = None

    def weight(self, layer: int, head: int, n_heads: int):
        if self.row_weights is not None:
            return Tensor(self.row_weights)
        if isinstance(self.weights, Tensor):
            k = layer * n_heads + head
            return nx.slice_cols(self.weights, k, k + 1)
        return float(self.weights[layer, head])


class Control(Protocol):
    def override(self, model: "Seq2Seq", enc: EncoderState, aspect_ids: Sequence[int]) -> CrossAttentionOverride: ...


class AttentionRecord:
    """Attention rows keyed by (kind, layer, head); kind is 'enc', 'self' or
    'cross'. During generation one row is stored per decoding step."""

    def __init__(self):
        self.rows: dict[tuple[str, int, int], list[np.ndarray]] = {}

    def add(self, kind: str, layer: int, head: int, attn: np.ndarray) -> None:
        self.rows.setdefault((kind, layer, head), []).append(attn)

    def matrix(self, kind: str, layer: int, head: int) -> np.ndarray:
        return np.vstack(self.rows[(kind, layer, head)])

    def keys(self):
        return self.rows.keys()


def blend(xattn: Tensor, relattn: Tensor, w) -> Tensor:
    """w * relattn + (1 - w) * xattn, row-wise against a 1 x n relattn."""
    if relattn.shape[1] != xattn.shape[1]:
        raise nx.ShapeError(f"relevance has {relattn.shape[1]} positions, attention has {xattn.shape[1]}")
    if isinstance(w, Tensor):
        return nx.add(nx.mul(relattn, w), nx.mul(xattn, nx.sub(1.0, w)))
    if not 0.0 <= w <= 1.0:
        raise nx.ParameterError(f"w_rel must lie in [0, 1], got {w}")
    return nx.add(nx.mul(relattn, w), nx.mul(xattn, 1.0 - w))


def block_causal_mask(blocks: int, t: int) -> np.ndarray:
    """Causal mask for ``blocks`` independent sequences of length ``t``
    stacked row-wise."""
    return np.kron(np.eye(blocks, dtype=bool), np.tril(np.ones((t, t), dtype=bool)))


def _init_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, Parameter]:
    d, f = cfg.d_model, cfg.d_ff
    p: dict[str, Parameter] = {}

    def lin(name, fan_in, fan_out):
        std = math.sqrt(2.0 / (fan_in + fan_out))
        p[name] = Parameter(rng.normal(0.0, std, (fan_in, fan_out)), name)

    def ln(prefix):
        p[prefix + ".g"] = Parameter(np.ones((1, d)), prefix + ".g")
        p[prefix + ".b"] = Parameter(np.zeros((1, d)), prefix + ".b")

    def attn(prefix):
        for m in ("wq", "wk", "wv", "wo"):
            lin(f"{prefix}.{m}", d, d)
        p[prefix + ".bo"] = Parameter(np.zeros((1, d)), prefix + ".bo")

    def ff(prefix):
        lin(prefix + ".w1", d, f)
        p[prefix + ".b1"] = Parameter(np.zeros((1, f)), prefix + ".b1")
        lin(prefix + ".w2", f, d)
        p[prefix + ".b2"] = Parameter(np.zeros((1, d)), prefix + ".b2")

    p["emb"] = Parameter(rng.normal(0.0, 1.0, (cfg.vocab_size, d)), "emb")
    for l in range(cfg.n_enc_layers):
        ln(f"enc.{l}.ln1")
        attn(f"enc.{l}.self")
        ln(f"enc.{l}.ln2")
        ff(f"enc.{l}.ff")
    ln("enc.ln")
    for l in range(cfg.n_dec_layers):
        ln(f"dec.{l}.ln1")
        attn(f"dec.{l}.self")
        ln(f"dec.{l}.ln2")
        attn(f"dec.{l}.cross")
        ln(f"dec.{l}.ln3")
        ff(f"dec.{l}.ff")
    ln("dec.ln")
    p["out.b"] = Parameter(np.zeros((1, cfg.vocab_size)), "out.b")
    return p


class Seq2Seq:
    """Encoder-decoder transformer; output projection tied to the embedding."""

    def __init__(self, config: ModelConfig, params: dict[str, Parameter]):
        self.config = config
        self.params = params
        self._pe = sinusoidal_positions(max(config.max_src_len, config.max_tgt_len) + 2, config.d_model)

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0) -> "Seq2Seq":
        return cls(config, _init_params(config, np.random.default_rng(seed)))

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def set_trainable(self, flag: bool) -> None:
        for p in self.params.values():
            p.requires_grad = flag

    # -- building blocks ----------------------------------------------------

    def _ln(self, x: Tensor, prefix: str) -> Tensor:
        return nx.layer_norm(x, self.params[prefix + ".g"], self.params[prefix + ".b"])

    def _ff(self, x: Tensor, prefix: str) -> Tensor:
        p = self.params
        h = nx.gelu(nx.add(nx.matmul(x, p[prefix + ".w1"]), p[prefix + ".b1"]))
        return nx.add(nx.matmul(h, p[prefix + ".w2"]), p[prefix + ".b2"])

    def _embed(self, ids: np.ndarray, positions: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
        tok = nx.gather_rows(self.params["emb"], ids)
        pe = self._pe[: len(ids)] if positions is None else self._pe[positions]
        return tok, nx.add(tok, Tensor(pe))

    def _heads(
        self,
        q: Tensor,
        k: Tensor,
        v: Tensor,
        mask: np.ndarray,
        prefix: str,
        kind: str,
        layer: int,
        override: CrossAttentionOverride | None = None,
        record: AttentionRecord | None = None,
    ) -> Tensor:
        cfg = self.config
        dh = cfg.d_head
        scale = 1.0 / math.sqrt(dh)
        outs = []
        for h in range(cfg.n_heads):
            qh = nx.slice_cols(q, h * dh, (h + 1) * dh)
            kh = nx.slice_cols(k, h * dh, (h + 1) * dh)
            vh = nx.slice_cols(v, h * dh, (h + 1) * dh)
            scores = nx.mul(nx.matmul(qh, nx.transpose(kh)), scale)
            attn = nx.softmax_rows(scores, mask)
            if override is not None:
                attn = blend(attn, override.relevance, override.weight(layer, h, cfg.n_heads))
            if record is not None:
                record.add(kind, layer, h, attn.data)
            outs.append(nx.matmul(attn, vh))
        ctx = outs[0] if len(outs) == 1 else nx.concat_cols(outs)
        return nx.add(nx.matmul(ctx, self.params[prefix + ".wo"]), self.params[prefix + ".bo"])

    def cross_kv(self, enc: EncoderState, layer: int) -> tuple[Tensor, Tensor]:
        if layer not in enc.cross_kv:
            p = self.params
            pre = f"dec.{layer}.cross"
            enc.cross_kv[layer] = (nx.matmul(enc.h_enc, p[pre + ".wk"]), nx.matmul(enc.h_enc, p[pre + ".wv"]))
        return enc.cross_kv[layer]

    # -- public surface -----------------------------------------------------

    def encode(self, ids: Sequence[int], record: AttentionRecord | None = None) -> EncoderState:
        cfg = self.config
        ids = np.asarray(ids, dtype=np.int64)
        if len(ids) == 0:
            raise ConfigurationError("cannot encode an empty source")
        if len(ids) > cfg.max_src_len:
            log.warning("source of %d tokens truncated to max_src_len=%d", len(ids), cfg.max_src_len)
            ids = ids[: cfg.max_src_len]
        mask = ids != PAD
        if not mask.any():
            raise nx.DegenerateMaskError("source contains only padding")
        tok, x = self._embed(ids)
        p = self.params
        for l in range(cfg.n_enc_layers):
            pre = f"enc.{l}"
            h = self._ln(x, pre + ".ln1")
            q = nx.matmul(h, p[pre + ".self.wq"])
            k = nx.matmul(h, p[pre + ".self.wk"])
            v = nx.matmul(h, p[pre + ".self.wv"])
            x = nx.add(x, self._heads(q, k, v, mask, pre + ".self", "enc", l, record=record))
            x = nx.add(x, self._ff(self._ln(x, pre + ".ln2"), pre + ".ff"))
        return EncoderState(ids=ids, h_enc=self._ln(x, "enc.ln"), mask=mask, r_d=tok)

    def decode(
        self,
        enc: EncoderState,
        tgt_in: Sequence[int],
        override: CrossAttentionOverride | None = None,
        record: AttentionRecord | None = None,
        blocks: int = 1,
    ) -> Tensor:
        """Logits (T x vocab) for every target-input position, causally.

        With ``blocks > 1``, ``tgt_in`` holds that many equal-length
        sequences back to back, decoded independently against ``enc``.
        """
        cfg = self.config
        tgt_in = np.asarray(tgt_in, dtype=np.int64)
        if len(tgt_in) % blocks:
            raise nx.ShapeError(f"{len(tgt_in)} target tokens do not split into {blocks} blocks")
        t = len(tgt_in) // blocks
        if override is not None and override.relevance.shape[1] != enc.n:
            raise nx.ShapeError(f"relevance has {override.relevance.shape[1]} positions, source has {enc.n}")
        if blocks == 1:
            causal = np.tril(np.ones((t, t), dtype=bool))
            _, x = self._embed(tgt_in)
        else:
            causal = block_causal_mask(blocks, t)
            _, x = self._embed(tgt_in, np.tile(np.arange(t), blocks))
        p = self.params
        for l in range(cfg.n_dec_layers):
            pre = f"dec.{l}"
            h = self._ln(x, pre + ".ln1")
            q = nx.matmul(h, p[pre + ".self.wq"])
            k = nx.matmul(h, p[pre + ".self.wk"])
            v = nx.matmul(h, p[pre + ".self.wv"])
            x = nx.add(x, self._heads(q, k, v, causal, pre + ".self", "self", l, record=record))
            h = self._ln(x, pre + ".ln2")
            q = nx.matmul(h, p[pre + ".cross.wq"])
            ck, cv = self.cross_kv(enc, l)
            x = nx.add(x, self._heads(q, ck, cv, enc.mask, pre + ".cross", "cross", l, override, record))
            x = nx.add(x, self._ff(self._ln(x, pre + ".ln3"), pre + ".ff"))
        h = self._ln(x, "dec.ln")
        logits = nx.matmul(h, nx.transpose(p["emb"]))
        return nx.add(nx.mul(logits, 1.0 / math.sqrt(cfg.d_model)), p["out.b"])

    def cross_attention(
        self,
        h_dec: Tensor,
        enc: EncoderState,
        layer: int,
        head: int,
        override: tuple[Tensor, float] | None = None,
    ) -> tuple[Tensor, Tensor]:
        """Single-head cross attention for already-normalized decoder states.

        Returns (context rows, attention rows); with ``override=(relattn,
        w_rel)`` the attention is the blended distribution.
        """
        dh = self.config.d_head
        q = nx.matmul(h_dec, self.params[f"dec.{layer}.cross.wq"])
        ck, cv = self.cross_kv(enc, layer)
        qh = nx.slice_cols(q, head * dh, (head + 1) * dh)
        kh = nx.slice_cols(ck, head * dh, (head + 1) * dh)
        vh = nx.slice_cols(cv, head * dh, (head + 1) * dh)
        attn = nx.softmax_rows(nx.mul(nx.matmul(qh, nx.transpose(kh)), 1.0 / math.sqrt(dh)), enc.mask)
        if override is not None:
            attn = blend(attn, override[0], override[1])
        return nx.matmul(attn, vh), attn

    def greedy(
        self,
        enc: EncoderState,
        override: CrossAttentionOverride | None = None,
        max_len: int | None = None,
        record: AttentionRecord | None = None,
    ) -> list[int]:
        """Greedy decoding from BOS until EOS or ``max_len`` tokens."""
        max_len = self.config.max_tgt_len if max_len is None else max_len
        out = [BOS]
        for _ in range(max_len):
            step = AttentionRecord() if record is not None else None
            logits = self.decode(enc, out, override, step)
            if record is not None:
                for key, mats in step.rows.items():
                    record.add(*key, mats[0][-1].copy())
            nxt = int(np.argmax(logits.data[-1]))
            if nxt == EOS:
                break
            out.append(nxt)
        return out[1:]

    def greedy_sweep(
        self,
        enc: EncoderState,
        relevance: Tensor,
        weights: Sequence[float],
        max_len: int | None = None,
    ) -> list[list[int]]:
        """Greedy decoding for several blend weights at once.

        Unfinished candidates always share the same length, so they are
        stacked as blocks of one decoder pass per step.
        """
        max_len = self.config.max_tgt_len if max_len is None else max_len
        w = np.asarray(weights, dtype=np.float64)
        if ((w < 0) | (w > 1)).any():
            raise nx.ParameterError("w_rel must lie in [0, 1]")
        seqs = [[BOS] for _ in weights]
        active = list(range(len(weights)))
        for _ in range(max_len):
            if not active:
                break
            t = len(seqs[active[0]])
            tgt = [tok for i in active for tok in seqs[i]]
            ov = CrossAttentionOverride(relevance, row_weights=np.repeat(w[active], t)[:, None])
            logits = self.decode(enc, tgt, ov, blocks=len(active)).data
            still = []
            for b, i in enumerate(active):
                nxt = int(np.argmax(logits[b * t + t - 1]))
                if nxt != EOS:
                    seqs[i].append(nxt)
                    still.append(i)
            active = still
        return [s[1:] for s in seqs]


# -- generation modes -------------------------------------------------------


def source_ids(example: ControlledExample, vocab: Vocabulary, mode: str) -> list[int]:
    if mode == "prefix":
        return vocab.encode(list(example.aspects) + [SEP] + list(example.document))
    return vocab.encode(example.document)


def generate(
    model: Seq2Seq,
    vocab: Vocabulary,
    example: ControlledExample,
    mode: str = "doc-only",
    control: Control | None = None,
    record: AttentionRecord | None = None,
) -> tuple[list[str], AttentionRecord | None]:
    """Generate a summary for ``example`` in one of doc-only / prefix / relattn."""
    if mode not in MODES:
        raise ConfigurationError(f"unknown mode {mode!r}; expected one of {MODES}")
    if mode == "relattn" and control is None:
        raise ConfigurationError("relattn mode requires a control")
    enc = model.encode(source_ids(example, vocab, mode))
    override = None
    if mode == "relattn":
        override = control.override(model, enc, vocab.encode(example.aspects))
    ids = model.greedy(enc, override, record=record)
    return vocab.decode(ids), record


# -- checkpoints ------------------------------------------------------------


def _pack(arr: np.ndarray) -> dict:
    return {"shape": list(arr.shape), "data": arr.reshape(-1).tolist()}


def _unpack(obj: dict) -> np.ndarray:
    return np.asarray(obj["data"], dtype=np.float64).reshape(obj["shape"])


@dataclass
class Checkpoint:
    model: Seq2Seq
    vocab: Vocabulary
    relattn: dict[str, np.ndarray] | None = None
    meta: dict = field(default_factory=dict)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """JSON container: config, vocabulary, named backbone tensors and an
    optional ``relattn`` namespace for the relevance parameters."""
    doc = {
        "schema_version": CHECKPOINT_SCHEMA,
        "kind": "relattn-checkpoint",
        "config": asdict(ckpt.model.config),
        "vocab": ckpt.vocab.to_list(),
        "params": {name: _pack(p.data) for name, p in ckpt.model.params.items()},
        "relattn": None if ckpt.relattn is None else {k: _pack(v) for k, v in ckpt.relattn.items()},
        "meta": ckpt.meta,
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(doc, sort_keys=True))


def load_checkpoint(path) -> Checkpoint:
    doc = json.loads(Path(path).read_text())
    if doc.get("kind") != "relattn-checkpoint":
        raise ConfigurationError(f"{path} is not a checkpoint")
    if doc.get("schema_version") != CHECKPOINT_SCHEMA:
        raise ConfigurationError(f"unsupported checkpoint schema {doc.get('schema_version')}")
    cfg = ModelConfig(**doc["config"])
    params = {name: Parameter(_unpack(obj), name) for name, obj in doc["params"].items()}
    rel = None if doc.get("relattn") is None else {k: _unpack(v) for k, v in doc["relattn"].items()}
    return Checkpoint(Seq2Seq(cfg, params), Vocabulary(tuple(doc["vocab"])), rel, doc.get("meta") or {})
