import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import poisson

from disagg.aggregate import (
    aggregate_gaussian,
    aggregate_poisson,
    aggregate_sum,
    aggregate_sum_backward,
    build_incidence,
    incidence_from_weights,
)
from disagg.exceptions import DomainError, ShapeError

from conftest import random_mask


def dense_incidence(mask):
    """Independent dense construction with explicit loops."""
    n = int(mask.max())
    h, w = mask.shape
    dense = np.zeros((n, h * w))
    for y in range(h):
        for x in range(w):
            if mask[y, x] > 0:
                dense[mask[y, x] - 1, y * w + x] = 1.0
    return dense


def test_three_region_example():
    mask = np.array([[1, 1, 0, 2], [1, 3, 3, 2], [0, 3, 3, 2]])
    values = np.arange(1, 13, dtype=float).reshape(3, 4)
    inc = build_incidence(mask)
    np.testing.assert_array_equal(aggregate_sum(inc, values), [1 + 2 + 5, 4 + 8 + 12, 6 + 7 + 10 + 11])
    np.testing.assert_array_equal(inc.sizes(), [3, 3, 4])
    assert inc.nnz == 10


def test_rows_are_row_major():
    mask = np.array([[2, 1], [1, 2]])
    inc = build_incidence(mask)
    np.testing.assert_array_equal(inc.indices, [1, 2, 0, 3])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 12), st.integers(1, 9), st.integers(1, 9))
def test_matches_dense(seed, n, h, w):
    rng = np.random.default_rng(seed)
    if n > h * w:
        n = h * w
    mask = random_mask(rng, h, w, n) if n < h * w else rng.permutation(h * w).reshape(h, w) + 1
    inc = build_incidence(mask)
    dense = dense_incidence(mask)
    np.testing.assert_array_equal(inc.to_dense(), dense)
    x = rng.normal(size=(h, w))
    np.testing.assert_allclose(aggregate_sum(inc, x), dense @ x.ravel(), rtol=1e-12, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_adjoint_identity(seed):
    rng = np.random.default_rng(seed)
    mask = random_mask(rng, 7, 5, int(rng.integers(1, 8)))
    inc = build_incidence(mask)
    x = rng.normal(size=mask.shape)
    g = rng.normal(size=inc.n_regions)
    lhs = float(g @ aggregate_sum(inc, x))
    rhs = float(np.sum(aggregate_sum_backward(inc, g) * x))
    assert abs(lhs - rhs) <= 1e-12 * max(1.0, abs(lhs))


def test_backward_is_transpose():
    rng = np.random.default_rng(0)
    mask = random_mask(rng, 6, 6, 5)
    inc = build_incidence(mask)
    g = rng.normal(size=5)
    np.testing.assert_allclose(aggregate_sum_backward(inc, g).ravel(), inc.to_dense().T @ g, rtol=1e-14)


def test_background_gets_zero_gradient():
    mask = np.array([[1, 0], [0, 2]])
    grad = aggregate_sum_backward(build_incidence(mask), np.array([3.0, -4.0]))
    np.testing.assert_array_equal(grad, [[3.0, 0.0], [0.0, -4.0]])


def test_fractional_weights():
    maps = np.zeros((2, 2, 2))
    maps[0] = [[1.0, 0.5], [0.0, 0.0]]
    maps[1] = [[0.0, 0.5], [1.0, 0.25]]
    inc = incidence_from_weights(maps)
    x = np.array([[2.0, 4.0], [8.0, 16.0]])
    np.testing.assert_allclose(aggregate_sum(inc, x), [4.0, 2.0 + 8.0 + 4.0])
    g = np.array([1.0, 10.0])
    np.testing.assert_allclose(aggregate_sum_backward(inc, g), np.einsum("r,rhw->hw", g, maps))


def test_errors():
    with pytest.raises(DomainError):
        build_incidence(np.zeros((3, 3), dtype=int))
    inc = build_incidence(np.array([[1, 2]]))
    with pytest.raises(ShapeError):
        aggregate_sum(inc, np.zeros((2, 2)))
    with pytest.raises(ShapeError):
        aggregate_sum_backward(inc, np.zeros(3))
    with pytest.raises(DomainError):
        aggregate_gaussian(inc, np.zeros((1, 2)), np.array([[1.0, 0.0]]))
    with pytest.raises(DomainError):
        incidence_from_weights(np.zeros((1, 2, 2)))


def test_gaussian_closure_exact():
    mask = np.array([[1, 1, 2], [0, 2, 2]])
    mu = np.array([[1.0, 2.0, 3.0], [100.0, 4.0, 5.0]])
    var = np.array([[0.5, 0.25, 1.0], [9.0, 2.0, 3.0]])
    rg = aggregate_gaussian(build_incidence(mask), mu, var)
    np.testing.assert_array_equal(rg.mu_star, [3.0, 12.0])
    np.testing.assert_array_equal(rg.var_star, [0.75, 6.0])
    np.testing.assert_array_equal(rg.scaled(10.0).var_star, [75.0, 600.0])


def test_gaussian_closure_monte_carlo():
    rng = np.random.default_rng(7)
    mask = np.array([[1, 1, 2, 2], [1, 3, 3, 2]])
    mu = rng.normal(size=mask.shape)
    var = rng.uniform(0.1, 2.0, size=mask.shape)
    inc = build_incidence(mask)
    rg = aggregate_gaussian(inc, mu, var)
    draws = mu + np.sqrt(var) * rng.standard_normal((200000,) + mask.shape)
    sums = np.stack([draws[:, mask == k].sum(axis=1) for k in (1, 2, 3)], axis=1)
    n = draws.shape[0]
    assert np.all(np.abs(sums.mean(0) - rg.mu_star) < 5 * np.sqrt(rg.var_star / n))
    np.testing.assert_allclose(sums.var(0), rg.var_star, rtol=0.02)


def test_poisson_closure_by_convolution():
    rates = np.array([0.3, 1.2, 2.5])
    mask = np.array([[1, 1, 1]])
    lam = aggregate_poisson(build_incidence(mask), rates[None, :])[0]
    support = np.arange(40)
    conv = poisson.pmf(support, rates[0])
    for r in rates[1:]:
        conv = np.convolve(conv, poisson.pmf(support, r))[: support.size]
    np.testing.assert_allclose(conv, poisson.pmf(support, lam), rtol=1e-10, atol=1e-300)


def test_dump_csv(tmp_path):
    inc = build_incidence(np.array([[0, 1], [2, 1]]))
    inc.dump_csv(tmp_path / "m.csv")
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines == ["region_id,pixel_index,weight", "1,1,1.0", "1,3,1.0", "2,2,1.0"]


def test_large_mask_entry_count(rng):
    mask = rng.integers(0, 51, size=(302, 302))
    mask[0, :50] = np.arange(1, 51)
    inc = build_incidence(mask)
    assert inc.nnz == int(np.count_nonzero(mask))
    assert inc.n_regions == 50


def test_poisson_two_rates_truncated():
    k = np.arange(21)
    conv = np.convolve(poisson.pmf(k, 0.5), poisson.pmf(k, 1.5))[:21]
    lam = aggregate_poisson(build_incidence(np.array([[1, 1]])), np.array([[0.5, 1.5]]))[0]
    assert lam == 2.0
    np.testing.assert_allclose(conv, poisson.pmf(k, lam), rtol=0, atol=1e-10)
