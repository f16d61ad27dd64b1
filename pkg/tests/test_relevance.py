import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from relattn import numerics as nx
from relattn.model import blend
from relattn.numerics import Parameter, Tensor
from relattn.relevance import (
    FEW_SHOT,
    EmptyAspectError,
    RelAttnControl,
    RelevanceParams,
    WrelPredictor,
    blend_weight_zero_shot,
    compute_relevance,
    masked_mean,
    predict_wrel,
    relevance_logits,
    zero_shot_control,
)


def _softmax(z):
    e = np.exp(z - z.max())
    return e / e.sum()


def test_matched_token_peak():
    n = 6
    r_d = Tensor(np.eye(n, 8))
    r_ca = Tensor(np.eye(n, 8)[2:3])
    out = compute_relevance(r_ca, r_d, RelevanceParams.identity(8), sigma=None).values.data[0]
    assert int(np.argmax(out)) == 2
    assert out[2] == pytest.approx(math.e / (math.e + n - 1), abs=1e-12)


def test_zero_aspect_gives_uniform():
    r_d = Tensor(np.random.default_rng(0).normal(size=(5, 4)))
    mask = np.array([True, True, False, True, True])
    out = compute_relevance(Tensor(np.zeros((1, 4))), r_d, RelevanceParams.identity(4), mask, sigma=None).values.data[0]
    assert np.allclose(out, np.where(mask, 0.25, 0.0), atol=1e-15)


def test_duplicate_aspect_doubles_logits(rng):
    r_d = rng.normal(size=(7, 4))
    ca = rng.normal(size=(1, 4))
    params = RelevanceParams.identity(4)
    one = compute_relevance(Tensor(ca), Tensor(r_d), params, sigma=None).values.data[0]
    two = compute_relevance(Tensor(np.vstack([ca, ca])), Tensor(r_d), params, sigma=None).values.data[0]
    z = (ca @ r_d.T)[0]
    assert np.allclose(one, _softmax(z), atol=1e-12)
    assert np.allclose(two, _softmax(2 * z), atol=1e-12)


def test_identity_params_equal_raw_dot(rng):
    r_ca, r_d = rng.normal(size=(3, 5)), rng.normal(size=(6, 5))
    zs = relevance_logits(Tensor(r_ca), Tensor(r_d), RelevanceParams.identity(5)).data
    fs = relevance_logits(Tensor(r_ca), Tensor(r_d), RelevanceParams.identity(5, FEW_SHOT)).data
    assert np.array_equal(zs, r_ca @ r_d.T)
    assert np.allclose(fs, r_ca @ r_d.T, atol=1e-12)


def test_zero_shot_params_are_frozen_identity():
    p = RelevanceParams.identity(4)
    assert np.array_equal(p.q_weight.data, np.eye(4)) and not p.q_bias.data.any()
    assert not any(q.requires_grad for q in p.parameters())
    assert all(q.requires_grad for q in RelevanceParams.identity(4, FEW_SHOT).parameters())


def test_relevance_errors(rng):
    with pytest.raises(nx.DegenerateMaskError):
        compute_relevance(Tensor(rng.normal(size=(1, 3))), Tensor(rng.normal(size=(2, 3))), RelevanceParams.identity(3), [False, False])


def test_control_rejects_empty_aspects(tiny_model):
    enc = tiny_model.encode([5, 6, 7])
    with pytest.raises(EmptyAspectError):
        zero_shot_control(16, 0.1).relevance(tiny_model, enc, [])


def test_smoothed_relevance_is_distribution_and_step_independent(tiny_model):
    enc = tiny_model.encode([5, 6, 7, 8, 9, 10])
    c = zero_shot_control(16, 0.1, sigma=1.0)
    a = c.relevance(tiny_model, enc, [6, 9]).values.data
    b = c.relevance(tiny_model, enc, [6, 9]).values.data
    assert np.array_equal(a, b)
    assert a.sum() == pytest.approx(1.0, abs=1e-12) and (a >= 0).all()


def test_blend_weight_zero_shot():
    assert np.all(blend_weight_zero_shot(0.12, 2, 4) == 0.12)
    assert blend_weight_zero_shot(0.30, 3, 2).shape == (3, 2)
    assert not blend_weight_zero_shot(0.0, 2, 2).any()
    for bad in (-0.01, 1.01):
        with pytest.raises(nx.ParameterError):
            blend_weight_zero_shot(bad, 2, 2)


def test_predictor_zero_init_and_saturation(rng):
    pred = WrelPredictor.zeros(4, 2, 3)
    doc, ca = Tensor(rng.normal(size=(1, 4))), Tensor(rng.normal(size=(1, 4)))
    assert np.array_equal(predict_wrel(doc, ca, pred).data, np.full((1, 6), 0.5))
    pred.bias.data[:] = 20.0
    w = predict_wrel(doc, ca, pred).data
    assert (w > 0.999).all() and (w < 1.0).all() and np.isfinite(w).all()


def test_predictor_gradient(rng):
    pred = WrelPredictor.zeros(4, 1, 2)
    pred.weight.data[:] = rng.normal(size=pred.weight.shape) * 0.3
    doc, ca = Tensor(rng.normal(size=(1, 4))), Tensor(rng.normal(size=(1, 4)))
    target = Tensor(rng.normal(size=(1, 2)))
    err = nx.grad_check(lambda: nx.total(nx.mul(predict_wrel(doc, ca, pred), target)), pred.parameters())
    assert err < 1e-3


def test_masked_mean():
    x = Tensor([[1.0, 2.0], [3.0, 4.0], [100.0, 100.0]])
    assert masked_mean(x, [True, True, False]).data.tolist() == [[2.0, 3.0]]


def test_predictor_control_gives_per_head_weights(tiny_model):
    enc = tiny_model.encode([5, 6, 7])
    ctl = RelAttnControl(RelevanceParams.identity(16, FEW_SHOT), WrelPredictor.zeros(16, 2, 2))
    ov = ctl.override(tiny_model, enc, [6])
    assert ov.weight(1, 1, 2).data.tolist() == [[0.5]]


@settings(max_examples=50, deadline=None)
@given(n=st.integers(2, 12), seed=st.integers(0, 2**16))
def test_blended_mass_increases_with_weight(n, seed):
    r = np.random.default_rng(seed)
    x, rel = _softmax(r.normal(size=n)), _softmax(r.normal(size=n) * 3)
    pos = rel > x
    if not pos.any():
        return
    masses = [blend(Tensor(x[None]), Tensor(rel[None]), w).data[0][pos].sum() for w in (0.0, 0.5, 1.0)]
    assert masses[0] < masses[1] < masses[2]
    out = blend(Tensor(x[None]), Tensor(rel[None]), 0.3).data[0]
    assert np.allclose(out, 0.3 * rel + 0.7 * x, atol=1e-15)
    assert out.sum() == pytest.approx(1.0, abs=1e-9)


def test_state_roundtrip():
    p = RelevanceParams.identity(3, FEW_SHOT)
    p.q_bias.data[:] = 1.5
    back = RelevanceParams.from_state(p.state())
    assert np.array_equal(back.q_bias.data, p.q_bias.data)
    pred = WrelPredictor.zeros(3, 1, 1)
    assert np.array_equal(WrelPredictor.from_state(pred.state(), 1, 1).weight.data, pred.weight.data)
    assert isinstance(back.q_weight, Parameter)
