import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.stats import norm

from secantlab.errors import ShapeError
from secantlab.metrics import energy_distance, moment_error


def abs_normal_mean(m, s):
    """E|N(m, s^2)|."""
    return s * math.sqrt(2 / math.pi) * math.exp(-m * m / (2 * s * s)) + m * (1 - 2 * norm.cdf(-m / s))


def test_identical_sets_zero():
    a = np.random.default_rng(0).normal(size=(300, 2))
    assert energy_distance(a, a.copy()) == 0.0
    assert moment_error(a, a.copy()) == (0.0, 0.0)


def test_null_pair_small():
    rng = np.random.default_rng(1)
    assert energy_distance(rng.normal(size=(10_000, 2)), rng.normal(size=(10_000, 2))) < 0.02


def test_shifted_gaussians_match_closed_form():
    rng = np.random.default_rng(2)
    a, b = rng.normal(size=(10_000, 1)), 3 + rng.normal(size=(10_000, 1))
    exact = 2 * abs_normal_mean(3, math.sqrt(2)) - 2 * abs_normal_mean(0, math.sqrt(2))
    assert energy_distance(a, b) == pytest.approx(exact, rel=0.1)
    # brute-force Monte-Carlo of the same functional on independent pairs
    x, y, x2, y2 = (rng.normal(size=200_000) + m for m in (0, 3, 0, 3))
    mc = 2 * np.abs(x - y).mean() - np.abs(x - x2).mean() - np.abs(y - y2).mean()
    assert energy_distance(a, b) == pytest.approx(mc, rel=0.1)


def test_moment_error_examples():
    rng = np.random.default_rng(3)
    a = rng.normal(size=(500, 2))
    mg, cg = moment_error(a, a + np.array([1.0, 0.0]))
    assert mg == pytest.approx(1.0) and cg == pytest.approx(0.0, abs=1e-12)
    big = rng.normal(size=(400_000, 2))
    _, cg = moment_error(big, 2 * rng.normal(size=(400_000, 2)))
    assert cg == pytest.approx(3 * math.sqrt(2), rel=0.02)


def test_validation():
    with pytest.raises(ShapeError):
        energy_distance(np.zeros((3, 2)), np.zeros((3, 1)))
    with pytest.raises(ValueError):
        moment_error(np.zeros((1, 2)), np.zeros((3, 2)))
    with pytest.raises(ValueError):
        energy_distance(np.zeros((1, 2)), np.zeros((3, 2)))


sets = arrays(np.float64, st.tuples(st.integers(2, 30), st.just(2)),
              elements=st.floats(-5, 5, allow_nan=False))


@given(sets, sets, st.randoms(use_true_random=False))
def test_symmetry_nonnegativity_permutation(a, b, rnd):
    d = energy_distance(a, b)
    assert d >= 0
    assert d == pytest.approx(energy_distance(b, a), rel=1e-9, abs=1e-12)
    perm = list(range(len(a)))
    rnd.shuffle(perm)
    assert energy_distance(a[perm], b) == pytest.approx(d, rel=1e-9, abs=1e-12)
    mg, cg = moment_error(a, b)
    mg2, cg2 = moment_error(a[perm], b)
    assert mg2 == pytest.approx(mg, abs=1e-12) and cg2 == pytest.approx(cg, abs=1e-10)
