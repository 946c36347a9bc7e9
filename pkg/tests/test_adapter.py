import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flexlora.adapter import LayerShape, LoraAdapter, adapter_from_factors, compose, decompose, init_adapter
from flexlora.errors import InvalidMatrix, RankOutOfRange, ShapeMismatch
from flexlora.lowrank import frobenius_norm, numerical_rank, svd, truncate, truncation_error

from oracles import loop_matmul


def rel(a, b):
    return frobenius_norm(a - b) / max(frobenius_norm(b), 1e-300)


def test_compose_zero_up():
    a = LoraAdapter(np.zeros((3, 2)), np.ones((2, 4)))
    np.testing.assert_array_equal(compose(a), np.zeros((3, 4)))


def test_compose_analytic_outer_product():
    a = LoraAdapter(np.array([[1.0], [0.0]]), np.array([[0.0, 1.0]]), scaling=2.0)
    np.testing.assert_array_equal(compose(a), [[0.0, 2.0], [0.0, 0.0]])


def test_compose_matches_loop_oracle():
    rng = np.random.default_rng(1)
    a = LoraAdapter(rng.standard_normal((16, 4)), rng.standard_normal((4, 16)), scaling=1.5)
    want = 1.5 * loop_matmul(a.up, a.down)
    assert rel(compose(a), want) <= 1e-12


def test_adapter_invariants():
    with pytest.raises(ShapeMismatch):
        LoraAdapter(np.ones((3, 2)), np.ones((3, 4)))
    with pytest.raises(InvalidMatrix):
        LoraAdapter(np.ones((3, 2)), np.ones((2, 4)), scaling=0.0)
    with pytest.raises(RankOutOfRange):
        LoraAdapter(np.ones((3, 4)), np.ones((4, 4)))
    with pytest.raises(InvalidMatrix):
        LoraAdapter(np.full((2, 1), np.nan), np.ones((1, 2)))
    a = LoraAdapter(np.ones((3, 2)), np.ones((2, 5)))
    assert a.rank == 2 and a.shape == LayerShape(3, 5) and a.num_params == 16


def test_layer_shape():
    s = LayerShape(16, 32)
    assert s.max_rank == 16 and s.adapter_params(4) == 4 * 48 and s.base_params == 512
    with pytest.raises(ShapeMismatch):
        LayerShape(0, 3)


@pytest.mark.parametrize("s", [0.1, 1.0, 7.0])
def test_exact_rank_roundtrip(s):
    rng = np.random.default_rng(2)
    w = rng.standard_normal((6, 2)) @ rng.standard_normal((2, 5))
    assert rel(compose(decompose(w, 2, s)), w) <= 1e-10


def test_decompose_diagonal():
    a = decompose(np.diag([3.0, 1.0]), 1, 1.0)
    np.testing.assert_allclose(compose(a), [[3.0, 0.0], [0.0, 0.0]], atol=1e-15)
    assert a.rank == 1


def test_decompose_error_matches_tail_formula():
    w = np.random.default_rng(3).standard_normal((32, 32))
    a = decompose(w, 5, 16.0)
    want = truncation_error(svd(w), 5)
    assert abs(frobenius_norm(compose(a) - w) - want) <= 1e-9 * want
    assert a.scaling == 16.0 and a.rank == 5


def test_decompose_rank_errors():
    w = np.ones((4, 3))
    for r in (0, 4, -2):
        with pytest.raises(RankOutOfRange):
            decompose(w, r)
    with pytest.raises(InvalidMatrix):
        decompose(w, 1, s=-1.0)


def test_adapter_from_cached_factors_matches_decompose():
    w = np.random.default_rng(4).standard_normal((9, 7))
    f = svd(w)
    for r in range(1, 8):
        a, b = adapter_from_factors(f, r, 2.0), decompose(w, r, 2.0)
        assert np.array_equal(a.up, b.up) and np.array_equal(a.down, b.down)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 12), st.integers(1, 12), st.data(),
       st.floats(0.01, 100.0), st.integers(0, 2**32 - 1))
def test_property_roundtrip_scaling_rank(d, p, data, s, seed):
    r = data.draw(st.integers(1, min(d, p)))
    w = np.random.default_rng(seed).standard_normal((d, p))
    got = compose(decompose(w, r, s))
    target = truncate(svd(w), r)
    assert rel(got, target) <= 1e-10
    assert frobenius_norm(got - compose(decompose(w, r, 1.0))) <= 1e-12 * frobenius_norm(w)
    assert numerical_rank(got) <= r


def test_init_adapter_zero_delta():
    rng = np.random.default_rng(5)
    a = init_adapter(LayerShape(16, 32), 4, rng, s=2.0)
    assert a.rank == 4 and a.scaling == 2.0
    np.testing.assert_array_equal(compose(a), np.zeros((16, 32)))
    assert 0.5 < np.var(a.down) * 32 < 2.0
    with pytest.raises(RankOutOfRange):
        init_adapter(LayerShape(4, 4), 5, rng)
