import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from srlab.linalg import DimensionError, as_mat, matmul, mp_matmul
from srlab.quant import QuantGrid, Rounding, ThresholdStream

ID = QuantGrid.identity()
U1 = QuantGrid.uniform(1.0)


def test_matmul_examples():
    b = np.array([[1.5, -2.0], [0.25, 3.0]])
    assert np.array_equal(matmul(np.eye(2), b), b)
    assert np.array_equal(matmul(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([[1.0], [1.0]])), [[3.0], [7.0]])
    assert np.array_equal(matmul(b, np.zeros((2, 3))), np.zeros((2, 3)))


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(DimensionError):
        mp_matmul(np.ones((2, 3)), np.ones((2, 3)), ID, Rounding.IDENTITY, ID, Rounding.IDENTITY)


def test_as_mat_validation():
    with pytest.raises(DimensionError):
        as_mat(np.ones(3))
    with pytest.raises(DimensionError):
        as_mat(np.ones((0, 2)))
    with pytest.raises(ValueError, match=r"\(1, 0\)"):
        as_mat(np.array([[1.0, 2.0], [np.inf, 0.0]]))


def test_identity_grids_bitwise_exact():
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((5, 7)), rng.standard_normal((7, 3))
    assert np.array_equal(mp_matmul(a, b, ID, Rounding.SR, ID, Rounding.RTN, ThresholdStream.prng(0)), a @ b)


def test_rtn_ties_up_then_multiply():
    out = mp_matmul(np.array([[0.5]]), np.array([[0.5]]), U1, Rounding.RTN, U1, Rounding.RTN)
    assert out[0, 0] == 1.0


def test_sr_product_mean():
    s = ThresholdStream.prng(3)
    vals = np.array([mp_matmul(np.array([[0.7]]), np.array([[1.0]]), U1, Rounding.SR, ID, Rounding.IDENTITY, s)[0, 0]
                     for _ in range(20000)])
    assert abs(vals.mean() - 0.7) <= 4 * vals.std(ddof=1) / np.sqrt(vals.size)


def test_a_quantized_before_b_from_one_stream():
    a = np.full((2, 2), 0.5)
    b = np.full((2, 1), 0.5)
    got = mp_matmul(a, b, U1, Rounding.SR, U1, Rounding.SR, ThresholdStream.prng(11))
    eps = ThresholdStream.prng(11).draw(6)
    qa = np.where(eps[:4] <= 0.5, 1.0, 0.0).reshape(2, 2)
    qb = np.where(eps[4:] <= 0.5, 1.0, 0.0).reshape(2, 1)
    assert np.array_equal(got, qa @ qb)


def test_sr_entrywise_unbiased():
    rng = np.random.default_rng(5)
    a, b = rng.uniform(-3, 3, (3, 4)), rng.uniform(-3, 3, (4, 2))
    s = ThresholdStream.prng(6)
    trials = 20000
    outs = np.stack([mp_matmul(a, b, U1, Rounding.SR, U1, Rounding.SR, s) for _ in range(trials)])
    se = outs.std(axis=0, ddof=1) / np.sqrt(trials)
    assert np.all(np.abs(outs.mean(axis=0) - a @ b) <= 4 * se)


mats = st.integers(1, 4).flatmap(
    lambda k: st.tuples(
        arrays(np.float64, (2, k), elements=st.floats(-50, 50)),
        arrays(np.float64, (k, 3), elements=st.floats(-50, 50)),
    )
)


@settings(max_examples=60)
@given(mats, st.sampled_from([0.25, 1.0, 4.0]), st.sampled_from([0.5, 2.0]))
def test_rtn_error_bound(ab, da, db):
    a, b = ab
    out = mp_matmul(a, b, QuantGrid.uniform(da), Rounding.RTN, QuantGrid.uniform(db), Rounding.RTN)
    bound = np.abs(a) @ np.full(b.shape, db / 2) + np.full(a.shape, da / 2) @ np.abs(b) + a.shape[1] * da * db / 4
    assert np.all(np.abs(out - a @ b) <= bound + 1e-9)


@settings(max_examples=40)
@given(st.integers(-20, 20), st.integers(-20, 20), st.integers(-20, 20))
def test_on_grid_inputs_are_exact(i, j, k):
    a = np.array([[i * 0.5, j * 0.5]])
    b = np.array([[k * 0.25], [i * 0.25]])
    out = mp_matmul(a, b, QuantGrid.uniform(0.5), Rounding.SR, QuantGrid.uniform(0.25), Rounding.SR, ThresholdStream.prng(0))
    assert np.array_equal(out, a @ b)
