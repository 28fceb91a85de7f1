import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from misret import _pykernels, kernels

try:
    from misret import _kernels
except ImportError:  # pragma: no cover
    _kernels = None

needs_ext = pytest.mark.skipif(_kernels is None, reason="compiled extension not built")
floats = st.floats(-100, 100, allow_nan=False, width=32)


def rtg_oracle(r, gamma):
    return np.array([sum(gamma ** (k - t) * r[k] for k in range(t, len(r))) for t in range(len(r))])


def expectile_grid(x, alpha, lo=None, hi=None):
    """Golden-section-free oracle: dense grid, then a finer grid around the best point."""
    x = np.asarray(x, float)
    lo = x.min() if lo is None else lo
    hi = x.max() if hi is None else hi
    for _ in range(4):
        g = np.linspace(lo, hi, 2001)
        u = x[None, :] - g[:, None]
        loss = (np.where(u < 0, 1 - alpha, alpha) * u * u).mean(1)
        i = int(np.argmin(loss))
        step = (hi - lo) / 2000
        lo, hi = g[max(i - 1, 0)] - step, g[min(i + 1, 2000)] + step
    return g[i]


@given(st.lists(floats, min_size=1, max_size=30), st.sampled_from([1.0, 0.99, 0.5, 0.0]))
@settings(max_examples=60, deadline=None)
def test_returns_to_go_matches_sum(r, gamma):
    r = np.array(r, dtype=np.float64)
    np.testing.assert_allclose(_pykernels.returns_to_go(r, gamma), rtg_oracle(r, gamma), rtol=1e-9, atol=1e-6)


def test_returns_to_go_example():
    np.testing.assert_allclose(kernels.returns_to_go(np.array([1.0, 2.0, 3.0]), 1.0), [6, 5, 3])
    np.testing.assert_allclose(kernels.returns_to_go(np.array([1.0, 1.0]), 0.5), [1.5, 1.0])


@given(st.lists(floats, min_size=1, max_size=25), st.sampled_from([0.1, 0.5, 0.9, 0.99]))
@settings(max_examples=60, deadline=None)
def test_expectile_fit_matches_grid(x, alpha):
    x = np.array(x, dtype=np.float64)
    m = _pykernels.expectile_fit(x, alpha)
    rng = x.max() - x.min()
    if rng == 0:
        assert m == pytest.approx(x[0])
        return
    assert abs(m - expectile_grid(x, alpha)) <= 1e-6 * max(1.0, rng)


def test_expectile_fit_two_point_closed_form():
    for a in (0.5, 0.9, 0.99):
        assert kernels.expectile_fit(np.array([0.0, 1.0]), a) == pytest.approx(a, abs=1e-12)


@needs_ext
@given(st.lists(floats, min_size=1, max_size=30), st.floats(0.01, 0.99))
@settings(max_examples=80, deadline=None)
def test_compiled_matches_python_expectile(x, alpha):
    x = np.array(x, dtype=np.float64)
    assert _kernels.expectile_fit(x, alpha) == pytest.approx(_pykernels.expectile_fit(x, alpha), rel=1e-12,
                                                             abs=1e-12)


@needs_ext
@given(st.lists(floats, min_size=1, max_size=30), st.floats(0.0, 1.0))
@settings(max_examples=80, deadline=None)
def test_compiled_matches_python_rtg(r, gamma):
    r = np.array(r, dtype=np.float64)
    np.testing.assert_allclose(_kernels.returns_to_go(r, gamma), _pykernels.returns_to_go(r, gamma), rtol=1e-12,
                               atol=1e-9)


def _mf_inputs(seed=0):
    rng = np.random.default_rng(seed)
    rows = rng.integers(0, 12, 80).astype(np.int64)
    cols = rng.integers(0, 9, 80).astype(np.int64)
    vals = rng.normal(size=80)
    P = rng.normal(0, 0.1, (12, 3))
    Q = rng.normal(0, 0.1, (9, 3))
    order = np.stack([rng.permutation(80) for _ in range(5)]).astype(np.int64)
    return rows, cols, vals, P, Q, order


@needs_ext
def test_compiled_matches_python_mf():
    rows, cols, vals, P, Q, order = _mf_inputs()
    P1, Q1 = _pykernels.mf_sgd(rows, cols, vals, P.copy(), Q.copy(), 0.05, 0.1, 5, order)
    P2, Q2 = _kernels.mf_sgd(rows, cols, vals, P.copy(), Q.copy(), 0.05, 0.1, 5, order)
    np.testing.assert_allclose(P1, P2, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(Q1, Q2, rtol=1e-12, atol=1e-12)


def test_mf_sgd_single_update_by_hand():
    P = np.array([[1.0, 0.0]])
    Q = np.array([[0.5, 0.5]])
    P1, Q1 = _pykernels.mf_sgd(np.array([0]), np.array([0]), np.array([2.0]), P.copy(), Q.copy(), 0.1, 0.0, 1,
                               np.zeros((1, 1), np.int64))
    err = 2.0 - 0.5
    np.testing.assert_allclose(P1, [[1.0 + 0.1 * err * 0.5, 0.1 * err * 0.5]])
    np.testing.assert_allclose(Q1, [[0.5 + 0.1 * err * 1.0, 0.5]])


def test_backend_name():
    assert kernels.BACKEND in ("cython", "python")
