import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from eqdp.metrics import SparsityTrace, brier_score, l0_eps_fraction, top1_accuracy


def test_l0_examples():
    assert l0_eps_fraction([0.0, 1e-6, 1.0]) == pytest.approx(2 / 3)
    assert l0_eps_fraction(np.zeros(5)) == 1.0
    assert l0_eps_fraction(np.zeros(5), 0.0) == 0.0
    # the threshold is strict
    assert l0_eps_fraction([1e-5, -1e-5], 1e-5) == 0.0


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=1, max_size=30), st.floats(0, 1), st.floats(0, 1))
def test_l0_monotone_in_threshold(v, a, b):
    lo, hi = sorted((a, b))
    assert l0_eps_fraction(v, lo) <= l0_eps_fraction(v, hi)


def test_l0_errors():
    with pytest.raises(ValueError):
        l0_eps_fraction([], 1e-5)
    with pytest.raises(ValueError):
        l0_eps_fraction([1.0], -1.0)


def test_brier_examples():
    assert brier_score(np.full((3, 10), 0.1), [0, 4, 9]) == pytest.approx(0.09)
    assert brier_score(np.eye(4), [0, 1, 2, 3]) == 0.0
    assert brier_score(np.eye(2)[::-1], [0, 1]) == 1.0


def test_brier_matches_loop():
    rng = np.random.default_rng(0)
    logits = rng.standard_normal((20, 6))
    p = np.exp(logits) / np.exp(logits).sum(1, keepdims=True)
    y = rng.integers(0, 6, 20)
    loop = sum((p[i, k] - (k == y[i])) ** 2 for i in range(20) for k in range(6)) / 120
    assert abs(brier_score(p, y) - loop) < 1e-12


def test_brier_validation():
    with pytest.raises(ValueError):
        brier_score(np.full((2, 3), 0.5), [0, 1])
    with pytest.raises(ValueError):
        brier_score(np.full((2, 2), 0.5), [0, 2])
    with pytest.raises(ValueError):
        brier_score(np.full((2, 2), 0.5), [0])


def test_top1_examples():
    p = np.array([[0.7, 0.3], [0.2, 0.8], [0.6, 0.4]])
    assert top1_accuracy(p, [0, 1, 1]) == pytest.approx(2 / 3)
    # ties go to the lowest index
    assert top1_accuracy(np.full((2, 3), 1 / 3), [0, 0]) == 1.0


def test_sparsity_trace_records():
    tr = SparsityTrace()
    row = tr.record(3, np.array([0.0, 1.0]), np.array([0.0, 0.0, 2.0, 0.0]))
    assert row == (3, 0.5, 0.75) and tr.records == [row]
