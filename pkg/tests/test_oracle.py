import math

import numpy as np
import pytest

from conftest import point_mass_field
from secantlab.data import preset
from secantlab.errors import DivergenceError
from secantlab.interpolant import Interpolant
from secantlab.oracle import (MixtureField, NetField, integrate, mc_secant, picard_iterate,
                              secant_oracle)
from secantlab.net import NetSpec, SecantNet
from secantlab.timesampling import RSampling

LIN = Interpolant("linear")


def const_field(c):
    return lambda x, t, **_: np.full_like(np.asarray(x, dtype=float), c)


def test_point_mass_secant_example():
    assert secant_oracle(point_mass_field, np.array([1.0]), 0.0, 0.5, 100)[0] == pytest.approx(-1.0, abs=1e-12)


def test_t_equal_s_returns_field():
    f = MixtureField(preset("ring8"), LIN)
    x = np.array([[0.3, -0.2], [1.0, 0.4]])
    np.testing.assert_array_equal(secant_oracle(f, x, 0.4, 0.4, 32), f(x, 0.4))


def test_constant_field():
    out = secant_oracle(const_field(2.5), np.zeros((3, 2)), np.array([0.0, 0.2, 0.9]),
                        np.array([0.5, 0.1, 0.3]), 16)
    np.testing.assert_allclose(out, 2.5, rtol=1e-14)


def test_substeps_validation():
    with pytest.raises(ValueError):
        secant_oracle(point_mass_field, np.array([1.0]), 0.0, 0.5, 8)


def test_fourth_order_convergence():
    f = MixtureField(preset("gauss1"), LIN)
    x = np.array([0.7])
    errs = [abs(secant_oracle(f, x, 0.1, 0.6, n)[0] - secant_oracle(f, x, 0.1, 0.6, 2048)[0])
            for n in (16, 32)]
    assert errs[0] / errs[1] == pytest.approx(16, rel=0.2)


def test_one_jump_identity():
    f = MixtureField(preset("ring8"), LIN)
    rng = np.random.default_rng(0)
    x = rng.normal(size=(50, 2))
    t = rng.uniform(0, 0.7, 50)
    s = t + rng.uniform(-0.1, 0.3, 50).clip(-t, 1 - t)
    end = integrate(f, x, t, s, 400)
    jump = x + (s - t)[:, None] * secant_oracle(f, x, t, s, 400)
    np.testing.assert_allclose(jump, end, rtol=1e-10, atol=1e-12)


def test_divergence_reports_time():
    bad = lambda x, t, **_: np.where(np.asarray(t)[:, None] > 0.5, np.inf, 1.0) * np.ones_like(x)
    with pytest.raises(DivergenceError, match="time"):
        secant_oracle(bad, np.array([0.0]), 0.0, 1.0, 16)


def test_mc_secant_point_mass_constant_integrand():
    est, se = mc_secant(point_mass_field, np.array([1.0]), 0.0, 0.5, 100_000, rng=1, substeps=2000)
    assert est[0] == pytest.approx(-1.0, abs=1e-9)
    assert se[0] < 1e-9


@pytest.mark.parametrize("mode", [RSampling(), RSampling("trunc_normal", 0.5, 0.5)])
def test_mc_secant_matches_oracle(mode):
    f = MixtureField(preset("gauss1"), LIN)
    rng = np.random.default_rng(2)
    for i in range(5):
        t = rng.uniform(0, 0.6)
        s = t + rng.uniform(0.05, 0.35)
        x = rng.normal(size=1)
        est, se = mc_secant(f, x, t, s, 20_000, mode, rng=(i, 3), substeps=2000)
        ref = secant_oracle(f, x, t, s, 1000)
        assert np.all(np.abs(est - ref) <= 3 * se + 1e-12)


def test_picard_point_mass():
    res = picard_iterate(point_mass_field, np.array([1.0]), 0.0, np.linspace(0, 0.3, 301), 5)
    np.testing.assert_array_equal(res.iterates[0], 0.0)
    e = res.sup_errors
    assert np.all(np.diff(e) < 0)
    assert np.all(res.ratios <= 0.9)


def test_picard_first_iterate_value():
    res = picard_iterate(point_mass_field, np.array([1.0]), 0.0, np.linspace(0, 0.5, 1001), 1)
    assert res.iterates[1][-1, 0] == pytest.approx(-2 * math.log(2), abs=1e-6)


def test_picard_constant_field_converges_in_one_step():
    res = picard_iterate(const_field(1.5), np.array([0.2, 0.1]), 0.1, np.linspace(0.1, 0.4, 31), 3)
    np.testing.assert_allclose(res.iterates[1], 1.5, rtol=1e-14)
    assert res.sup_errors[1] < 1e-10  # reference integration round-off


def test_picard_divergence_detected():
    # Strongly expanding field: contraction fails for a long interval.
    grow = lambda x, t, **_: 40.0 * np.asarray(x) ** 2
    with pytest.raises(DivergenceError, match="Lh"):
        picard_iterate(grow, np.array([1.0]), 0.0, np.linspace(0, 0.02, 21), 10,
                       reference=np.ones((21, 1)))


def test_net_field_uses_diagonal():
    spec = NetSpec(2, (8,), num_frequencies=2, embed_dim=4, use_s=False)
    net = SecantNet(spec, seed=0)
    x = np.ones((3, 2))
    np.testing.assert_array_equal(NetField(net)(x, np.full(3, 0.3)), net(x, 0.3))
