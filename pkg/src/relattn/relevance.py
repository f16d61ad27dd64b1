"""Relevance attention over source tokens and the blend controls built on it.

Relevance logits are the column sums of ``Q(r_ca) K(r_d)^T`` where ``r_ca``
and ``r_d`` are the input token embeddings of the aspects and the source.
The softmax of those sums, optionally Gaussian-smoothed, is mixed into every
cross-attention head with a weight ``w_rel``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numerics as nx
from .model import CrossAttentionOverride, EncoderState, Seq2Seq
from .numerics import Parameter, ParameterError, Tensor

DEFAULT_SIGMA = 1.0
ZERO_SHOT, FEW_SHOT = "zero-shot", "few-shot"


class EmptyAspectError(ValueError):
    pass


@dataclass
class RelevanceParams:
    """Affine query/key maps d_model -> d_model.

    Zero-shot parameters are the identity with zero bias and are applied as
    a plain dot product.
    """

    mode: str
    q_weight: Parameter
    q_bias: Parameter
    k_weight: Parameter
    k_bias: Parameter

    @classmethod
    def identity(cls, d_model: int, mode: str = ZERO_SHOT) -> "RelevanceParams":
        trainable = mode == FEW_SHOT
        eye, zero = np.eye(d_model), np.zeros((1, d_model))
        return cls(
            mode,
            Parameter(eye.copy(), "relattn.q_weight", trainable),
            Parameter(zero.copy(), "relattn.q_bias", trainable),
            Parameter(eye.copy(), "relattn.k_weight", trainable),
            Parameter(zero.copy(), "relattn.k_bias", trainable),
        )

    def parameters(self) -> list[Parameter]:
        return [self.q_weight, self.q_bias, self.k_weight, self.k_bias]

    def state(self) -> dict[str, np.ndarray]:
        return {p.name: p.data.copy() for p in self.parameters()}

    @classmethod
    def from_state(cls, state: dict[str, np.ndarray], mode: str = FEW_SHOT) -> "RelevanceParams":
        trainable = mode == FEW_SHOT
        get = lambda k: Parameter(np.array(state[k]), k, trainable)  # noqa: E731
        return cls(mode, get("relattn.q_weight"), get("relattn.q_bias"), get("relattn.k_weight"), get("relattn.k_bias"))


@dataclass
class RelevanceAttention:
    values: Tensor
    sigma_used: float | None
    mask: np.ndarray


def relevance_logits(r_ca: Tensor, r_d: Tensor, params: RelevanceParams) -> Tensor:
    """``Rel = Q(r_ca) K(r_d)^T``, shape k x n."""
    if params.mode == ZERO_SHOT:
        q, k = r_ca, r_d
    else:
        q = nx.add(nx.matmul(r_ca, params.q_weight), params.q_bias)
        k = nx.add(nx.matmul(r_d, params.k_weight), params.k_bias)
    return nx.matmul(q, nx.transpose(k))


def compute_relevance(
    r_ca: Tensor,
    r_d: Tensor,
    params: RelevanceParams,
    mask=None,
    sigma: float | None = DEFAULT_SIGMA,
) -> RelevanceAttention:
    k, n = r_ca.shape[0], r_d.shape[0]
    if k == 0:
        raise EmptyAspectError("no controlling-aspect tokens")
    if n == 0:
        raise nx.DegenerateMaskError("empty source")
    mask = np.ones(n, bool) if mask is None else np.asarray(mask, bool).reshape(-1)
    rel = relevance_logits(r_ca, r_d, params)
    summed = nx.matmul(Tensor(np.ones((1, k))), rel)
    attn = nx.softmax_row(summed, mask)
    if sigma is not None:
        attn = nx.gaussian_smooth_1d(attn, sigma, mask)
    return RelevanceAttention(attn, sigma, mask)


def blend_weight_zero_shot(w_rel: float, n_layers: int, n_heads: int) -> np.ndarray:
    """Broadcast one w_rel to every decoder layer and head."""
    if not 0.0 <= w_rel <= 1.0:
        raise ParameterError(f"w_rel must lie in [0, 1], got {w_rel}")
    return np.full((n_layers, n_heads), float(w_rel))


@dataclass
class WrelPredictor:
    """One sigmoid-linear unit per (decoder layer, head) over the
    concatenated pooled source and aspect representations."""

    weight: Parameter
    bias: Parameter
    n_layers: int
    n_heads: int

    @classmethod
    def zeros(cls, d_model: int, n_layers: int, n_heads: int) -> "WrelPredictor":
        m = n_layers * n_heads
        return cls(
            Parameter(np.zeros((2 * d_model, m)), "relattn.wrel_weight"),
            Parameter(np.zeros((1, m)), "relattn.wrel_bias"),
            n_layers,
            n_heads,
        )

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]

    def state(self) -> dict[str, np.ndarray]:
        return {p.name: p.data.copy() for p in self.parameters()}

    @classmethod
    def from_state(cls, state: dict[str, np.ndarray], n_layers: int, n_heads: int) -> "WrelPredictor":
        return cls(
            Parameter(np.array(state["relattn.wrel_weight"]), "relattn.wrel_weight"),
            Parameter(np.array(state["relattn.wrel_bias"]), "relattn.wrel_bias"),
            n_layers,
            n_heads,
        )


def masked_mean(x: Tensor, mask=None) -> Tensor:
    n = x.shape[0]
    m = np.ones(n, bool) if mask is None else np.asarray(mask, bool).reshape(-1)
    w = m.astype(np.float64) / max(m.sum(), 1)
    return nx.matmul(Tensor(w.reshape(1, -1)), x)


def predict_wrel(doc_repr: Tensor, ca_repr: Tensor, predictor: WrelPredictor) -> Tensor:
    """Per-head weights in (0, 1), shape 1 x (layers*heads), layer-major."""
    feats = nx.concat_cols([doc_repr, ca_repr])
    return nx.sigmoid(nx.add(nx.matmul(feats, predictor.weight), predictor.bias))


@dataclass
class RelAttnControl:
    """Everything needed to steer a model on one example.

    ``weights`` is a fixed w_rel (zero-shot) or a :class:`WrelPredictor`
    (few-shot).
    """

    params: RelevanceParams
    weights: float | WrelPredictor
    sigma: float | None = DEFAULT_SIGMA

    def relevance(self, model: Seq2Seq, enc: EncoderState, aspect_ids: Sequence[int]) -> RelevanceAttention:
        if len(aspect_ids) == 0:
            raise EmptyAspectError("no controlling-aspect tokens")
        r_ca = nx.gather_rows(model.params["emb"], aspect_ids)
        return compute_relevance(r_ca, enc.r_d, self.params, enc.mask, self.sigma)

    def override(self, model: Seq2Seq, enc: EncoderState, aspect_ids: Sequence[int]) -> CrossAttentionOverride:
        rel = self.relevance(model, enc, aspect_ids)
        cfg = model.config
        if isinstance(self.weights, WrelPredictor):
            r_ca = nx.gather_rows(model.params["emb"], aspect_ids)
            w = predict_wrel(masked_mean(enc.r_d, enc.mask), masked_mean(r_ca), self.weights)
        else:
            w = blend_weight_zero_shot(self.weights, cfg.n_dec_layers, cfg.n_heads)
        return CrossAttentionOverride(rel.values, w)

    def with_weight(self, w_rel: float) -> "RelAttnControl":
        return RelAttnControl(self.params, w_rel, self.sigma)


def zero_shot_control(d_model: int, w_rel: float, sigma: float | None = DEFAULT_SIGMA) -> RelAttnControl:
    return RelAttnControl(RelevanceParams.identity(d_model, ZERO_SHOT), w_rel, sigma)
