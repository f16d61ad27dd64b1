import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from relattn import numerics as nx
from relattn.numerics import Parameter, Tape, Tensor


def test_tensor_coerces_to_2d():
    assert Tensor(3.0).shape == (1, 1)
    assert Tensor([1, 2, 3]).shape == (1, 3)
    with pytest.raises(nx.ShapeError):
        Tensor(np.zeros((2, 2, 2)))


def test_matmul_examples():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(nx.matmul(np.eye(2), a).data, a)
    assert nx.matmul([[1.0, 0.0]], [[0.0], [5.0]]).data.tolist() == [[0.0]]
    assert nx.matmul(a, [[5.0, 6.0], [7.0, 8.0]]).data.tolist() == [[19.0, 22.0], [43.0, 50.0]]


def test_matmul_shape_error_names_shapes():
    with pytest.raises(nx.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        nx.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_matmul_associative(rng):
    a, b, c = rng.normal(size=(3, 4)), rng.normal(size=(4, 5)), rng.normal(size=(5, 2))
    left = nx.matmul(nx.matmul(a, b), c).data
    right = nx.matmul(a, nx.matmul(b, c)).data
    assert np.allclose(left, right, atol=1e-9, rtol=0)


def test_broadcast_mismatch():
    with pytest.raises(nx.ShapeError):
        nx.add(np.ones((2, 3)), np.ones((3, 2)))


def test_softmax_row_examples():
    assert np.allclose(nx.softmax_row([0.0, 0.0]).data, [[0.5, 0.5]])
    big = nx.softmax_row([100.0, 0.0]).data
    assert big[0, 0] == pytest.approx(1.0) and big[0, 1] < 1e-40
    out = nx.softmax_row([1.0, 2.0, 3.0], [True, False, True]).data[0]
    e2 = math.exp(2)
    assert out[1] == 0.0
    assert out[0] == pytest.approx(1 / (1 + e2), abs=1e-12)
    assert out[2] == pytest.approx(e2 / (1 + e2), abs=1e-12)


def test_softmax_fully_masked_row():
    with pytest.raises(nx.DegenerateMaskError):
        nx.softmax_row([1.0, 2.0], [False, False])
    with pytest.raises(nx.DegenerateMaskError):
        nx.softmax_rows(np.zeros((2, 2)), np.array([[True, True], [False, False]]))


@settings(max_examples=60, deadline=None)
@given(
    rows=st.integers(1, 8),
    cols=st.integers(1, 8),
    scale=st.floats(0.1, 500.0),
    seed=st.integers(0, 2**16),
)
def test_softmax_rows_is_distribution(rows, cols, scale, seed):
    r = np.random.default_rng(seed)
    x = r.normal(size=(rows, cols)) * scale
    mask = r.random((rows, cols)) < 0.7
    mask[np.arange(rows), r.integers(0, cols, rows)] = True
    p = nx.softmax_rows(x, mask).data
    assert (p >= 0).all()
    assert np.all(p[~mask] == 0.0)
    assert np.allclose(p.sum(axis=1), 1.0, atol=1e-9, rtol=0)


def _g(d, sigma=1.0):
    return math.exp(-d * d / (2 * sigma * sigma))


def test_gaussian_delta_matches_kernel():
    out = nx.gaussian_smooth_1d([0, 0, 1, 0, 0], 1.0).data[0]
    expect = np.array([_g(2), _g(1), _g(0), _g(1), _g(2)])
    assert np.allclose(out, expect / expect.sum(), atol=1e-12)


def test_gaussian_uniform_interior_fixed_point():
    # Mass is spread per source, so the edges of a uniform input shift;
    # positions whose whole neighbourhood (two radii) is interior stay put.
    n, sigma = 30, 1.0
    out = nx.gaussian_smooth_1d(np.full(n, 1 / n), sigma).data[0]
    r = math.ceil(3 * sigma)
    interior = out[2 * r : n - 2 * r]
    assert np.allclose(interior, interior[0], atol=1e-12)
    assert out.sum() == pytest.approx(1.0, abs=1e-12)


def test_gaussian_tiny_sigma_is_identity(rng):
    p = rng.random(7)
    p /= p.sum()
    assert np.allclose(nx.gaussian_smooth_1d(p, 1e-6).data[0], p, atol=1e-6)


def test_gaussian_respects_mask():
    mask = np.array([True, True, False, True])
    out = nx.gaussian_smooth_1d([0.5, 0.0, 0.0, 0.5], 1.0, mask).data[0]
    assert out[2] == 0.0
    assert out.sum() == pytest.approx(1.0, abs=1e-12)


def test_gaussian_bad_sigma():
    with pytest.raises(nx.ParameterError):
        nx.gaussian_smooth_1d([1.0], 0.0)


@settings(max_examples=60, deadline=None)
@given(n=st.integers(1, 40), sigma=st.floats(0.05, 6.0), seed=st.integers(0, 2**16))
def test_gaussian_preserves_mass(n, sigma, seed):
    r = np.random.default_rng(seed)
    p = r.random(n) + 1e-3
    mask = r.random(n) < 0.8
    mask[r.integers(n)] = True
    p = np.where(mask, p, 0.0)
    p /= p.sum()
    out = nx.gaussian_smooth_1d(p, sigma, mask).data[0]
    assert (out >= 0).all()
    assert np.all(out[~mask] == 0.0)
    assert out.sum() == pytest.approx(1.0, abs=1e-9)


def test_backward_linear_case():
    x = np.array([[1.0], [2.0], [-3.0]])
    w = Parameter(np.ones((1, 3)), "w")
    with Tape() as tape:
        loss = nx.matmul(w, x)
    nx.backward(tape, loss)
    assert np.array_equal(w.grad, x.T)


def test_backward_softmax_cross_entropy():
    logits = Parameter(np.zeros((1, 2)), "z")
    with Tape() as tape:
        loss = nx.cross_entropy(logits, [0])
    nx.backward(tape, loss)
    assert np.allclose(logits.grad, [[-0.5, 0.5]])


def test_backward_accumulates_until_zeroed():
    w = Parameter(np.ones((1, 1)), "w")
    for _ in range(2):
        with Tape() as tape:
            loss = nx.mul(w, 3.0)
        nx.backward(tape, loss)
    assert w.grad[0, 0] == 6.0
    w.zero_grad()
    assert w.grad[0, 0] == 0.0


def test_disconnected_loss():
    with Tape() as tape:
        pass
    with pytest.raises(nx.DisconnectedGraphError):
        nx.backward(tape, Tensor(1.0))


def test_frozen_parameters_are_not_recorded():
    w = Parameter(np.ones((2, 2)), "w", requires_grad=False)
    with Tape() as tape:
        nx.matmul(w, w)
    assert len(tape) == 0


def test_nothing_recorded_outside_tape():
    w = Parameter(np.ones((2, 2)), "w")
    out = nx.matmul(w, w)
    with Tape() as tape:
        pass
    assert len(tape) == 0 and out.shape == (2, 2)


def test_nonfinite_raises():
    with pytest.raises(nx.NumericError):
        nx.div(1.0, 0.0)


def test_cross_entropy_values():
    v = 7
    assert nx.cross_entropy(np.zeros((3, v)), [0, 1, 2]).item() == pytest.approx(math.log(v))
    perfect = np.full((2, 4), -50.0)
    perfect[0, 1] = perfect[1, 3] = 50.0
    assert nx.cross_entropy(perfect, [1, 3]).item() < 1e-12
    # ignored rows do not count
    logits = np.zeros((2, 3))
    logits[1] = [100.0, 0.0, 0.0]
    assert nx.cross_entropy(logits, [0, -100], ignore_index=-100).item() == pytest.approx(math.log(3))


def test_grad_check_trivial_cases():
    w = Parameter(np.array([[0.3, -1.2, 2.0]]), "w")
    assert nx.grad_check(lambda: nx.total(nx.mul(w, w)), [w]) < 1e-6
    c = Parameter(np.ones((1, 2)), "c")
    assert nx.grad_check(lambda: Tensor(5.0), [c]) == 0.0


def _check(f, params, tol=1e-3):
    err = nx.grad_check(f, params)
    assert err < tol, err


@settings(max_examples=25, deadline=None)
@given(m=st.integers(1, 8), k=st.integers(1, 8), n=st.integers(1, 8), seed=st.integers(0, 2**16))
def test_primitive_gradients(m, k, n, seed):
    r = np.random.default_rng(seed)
    a = Parameter(r.normal(size=(m, k)), "a")
    b = Parameter(r.normal(size=(k, n)), "b")
    row = Parameter(r.normal(size=(1, k)), "row")
    col = Parameter(r.normal(size=(m, 1)), "col")
    pos = Parameter(r.random((m, k)) + 0.5, "pos")
    weights = Tensor(r.normal(size=(m, n)))
    mask = r.random((m, n)) < 0.7
    mask[:, 0] = True
    _check(lambda: nx.total(nx.mul(nx.matmul(a, b), weights)), [a, b])
    _check(lambda: nx.total(nx.mul(nx.add(a, row), nx.sub(a, col))), [a, row, col])
    _check(lambda: nx.total(nx.div(a, pos)), [a, pos])
    _check(lambda: nx.total(nx.mul(nx.neg(nx.transpose(a)), nx.transpose(a))), [a])
    _check(lambda: nx.total(nx.mul(nx.gelu(a), nx.sigmoid(a))), [a])
    _check(lambda: nx.total(nx.mul(nx.softmax_rows(nx.matmul(a, b), mask), weights)), [a, b])
    g = Parameter(r.normal(size=(1, k)), "g")
    _check(lambda: nx.total(nx.mul(nx.layer_norm(a, g, row), pos)), [a, g, row])
    targets = r.integers(0, n, m).tolist()
    _check(lambda: nx.cross_entropy(nx.matmul(a, b), targets), [a, b])
    ids = r.integers(0, k, 5)
    _check(lambda: nx.total(nx.mul(nx.gather_rows(b, ids), nx.gather_rows(b, ids))), [b])
    if k > 1:
        _check(lambda: nx.total(nx.mul(nx.concat_cols([nx.slice_cols(a, 1, k), nx.slice_cols(a, 0, 1)]), pos)), [a])


def test_relu_gradient_away_from_kink(rng):
    a = Parameter(rng.normal(size=(4, 4)) + np.sign(rng.normal(size=(4, 4))) * 0.5, "a")
    w = Tensor(rng.normal(size=(4, 4)))
    _check(lambda: nx.total(nx.mul(nx.relu(a), w)), [a])


def test_smoothing_gradient(rng):
    p = Parameter(rng.normal(size=(1, 9)), "p")
    mask = np.array([True] * 7 + [False] * 2)
    w = Tensor(rng.normal(size=(1, 9)))
    _check(lambda: nx.total(nx.mul(nx.gaussian_smooth_1d(nx.softmax_row(p, mask), 1.3, mask), w)), [p])
