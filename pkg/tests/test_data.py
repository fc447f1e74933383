import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from secantlab.data import (NULL_LABEL, GaussianMixture, analytic_velocity, guided_velocity, make_rng,
                            mixture_from_spec, population_target_std, posterior_means, preset,
                            sample_batch)
from secantlab.errors import ConfigError, SingularityError
from secantlab.interpolant import Interpolant

LIN = Interpolant("linear")


def snis_velocity(mix, ip, x, t, n, seed):
    """Self-normalised importance sampling of E[alpha' x0 + sigma' z | x_t = x].

    Draws x0 from the mixture as proposal; the weight of a draw is the
    Gaussian likelihood N(x; alpha x0, sigma^2 I).
    """
    rng = np.random.default_rng(seed)
    comp = rng.choice(len(mix.weights), size=n, p=mix.weights)
    x0 = mix.means[comp] + mix.stds[comp, None] * rng.standard_normal((n, mix.dim))
    a, s, da, ds = ip.coefficients(t)
    logw = -0.5 * ((x - a * x0) ** 2).sum(1) / s**2
    w = np.exp(logw - logw.max())
    w /= w.sum()
    z = (x - a * x0) / s
    target = da * x0 + ds * z
    est = w @ target
    # Delta-method standard error of a ratio estimator.
    se = np.sqrt((w[:, None] ** 2 * (target - est) ** 2).sum(0))
    return est, se


def test_sample_batch_examples():
    b = sample_batch(preset("point"), 3, 0.0, 1)
    np.testing.assert_array_equal(b.x0, np.zeros((3, 1)))
    mix = GaussianMixture([1.0, 0.0], [[5.0], [-5.0]], [0.1, 0.1])
    b = sample_batch(mix, 1000, 0.0, 2)
    assert np.all(b.x0 > 4)


def test_sample_batch_mean_clt():
    n = 10**6
    b = sample_batch(preset("gauss1"), n, 0.0, 3)
    assert abs(b.x0.mean()) < 4 / math.sqrt(n)


def test_sample_batch_deterministic_and_dropout():
    a = sample_batch(preset("cond2"), 5000, 0.3, (7, 1))
    b = sample_batch(preset("cond2"), 5000, 0.3, (7, 1))
    np.testing.assert_array_equal(a.x0, b.x0)
    np.testing.assert_array_equal(a.z, b.z)
    assert abs(a.drop_mask.mean() - 0.3) < 0.03
    assert np.all(a.effective_labels[a.drop_mask] == NULL_LABEL)
    # labels record the generating component: the cluster at +(1, 1) is class 0
    assert np.mean((a.x0[:, 0] > 0) == (a.labels == 0)) > 0.99


def test_sample_batch_validation():
    with pytest.raises(ConfigError):
        sample_batch(preset("point"), 0)
    with pytest.raises(ConfigError):
        sample_batch(preset("point"), 3, dropout=1.5)


def test_mixture_validation():
    with pytest.raises(ConfigError):
        GaussianMixture([0.5, 0.6], [[0.0], [1.0]], [1.0, 1.0])
    with pytest.raises(ConfigError):
        GaussianMixture([1.0], [[0.0]], [-1.0])
    with pytest.raises(ConfigError):
        mixture_from_spec("nope")


def test_mixture_from_json():
    mix = mixture_from_spec("[[0.25, [1, 2], 0.5, 0], [0.75, [0, 0], 0.1, 1]]")
    assert mix.dim == 2 and mix.num_classes == 2
    np.testing.assert_allclose(mix.weights, [0.25, 0.75])


def test_point_mass_velocity_examples():
    mix = preset("point")
    assert analytic_velocity(mix, LIN, np.array([1.0]), 0.0)[0] == pytest.approx(-1.0)
    assert analytic_velocity(mix, LIN, np.array([1.0]), 0.5)[0] == pytest.approx(-2.0)
    # sigma_t = 0 limit: x_t sits on the mass, velocity is alpha' * mean
    assert analytic_velocity(mix, LIN, np.array([0.0]), 1.0)[0] == 0.0


@given(st.floats(-3, 3), st.floats(0.0, 0.999))
def test_gaussian_velocity_closed_form(x, t):
    v = analytic_velocity(preset("gauss1"), LIN, np.array([x]), t)[0]
    expected = x * (2 * t - 1) / (2 * t * t - 2 * t + 1)
    assert v == pytest.approx(expected, rel=1e-12, abs=1e-12)


def test_velocity_matches_importance_sampling():
    rng = np.random.default_rng(0)
    for name in ("gauss1", "ring8"):
        mix = preset(name)
        for i in range(5):
            t = rng.uniform(0.05, 0.9)
            x0 = mix.sample(1, rng)[0][0]
            x = LIN.noised(x0, rng.standard_normal(mix.dim), t)
            est, se = snis_velocity(mix, LIN, x, t, 200_000, (i, 1))
            v = analytic_velocity(mix, LIN, x, t)
            assert np.all(np.abs(v - est) <= 4 * se + 1e-9), (name, t, v, est, se)


def test_singularity_for_mixed_point_mass():
    mix = GaussianMixture([0.5, 0.5], [[0.0], [1.0]], [0.0, 0.5])
    with pytest.raises(SingularityError, match="clip"):
        posterior_means(mix, LIN, np.array([[0.0]]), 1.0)


def test_guided_velocity_examples():
    mix = GaussianMixture([0.5, 0.5], [[1.0], [-1.0]], [0.0, 0.0], class_labels=[0, 1])
    x, t = np.array([[0.3]]), 0.4
    v_c = analytic_velocity(mix, LIN, x, t, 0)
    v_u = analytic_velocity(mix, LIN, x, t)
    np.testing.assert_allclose(guided_velocity(mix, LIN, x, t, 0, 1.0), v_c)
    np.testing.assert_allclose(guided_velocity(mix, LIN, x, t, 0, 0.0), v_u)
    # closed forms: conditional on the mass at +1 the field is (1 - x)/(1 - t)
    assert v_c[0, 0] == pytest.approx((1 - 0.3) / 0.6)
    np.testing.assert_allclose(guided_velocity(mix, LIN, x, t, 0, 2.0), 2 * v_c - v_u, atol=1e-14)
    with pytest.raises(ConfigError):
        guided_velocity(mix, LIN, x, t, 5, 1.0)


@given(st.floats(-2, 4), st.floats(-2, 4))
def test_guided_velocity_affine_in_w(w1, w2):
    mix = preset("cond2")
    x = np.array([[0.2, -0.4], [1.0, 0.5]])
    g = lambda w: guided_velocity(mix, LIN, x, 0.6, 1, w)
    np.testing.assert_allclose(g(w1) + g(w2), 2 * g((w1 + w2) / 2), atol=1e-12)


def test_null_label_rows_use_unconditional():
    mix = preset("cond2")
    x = np.array([[0.2, -0.4], [0.2, -0.4]])
    v = analytic_velocity(mix, LIN, x, 0.5, np.array([NULL_LABEL, 0]))
    np.testing.assert_allclose(v[0], analytic_velocity(mix, LIN, x[0], 0.5))
    np.testing.assert_allclose(v[1], analytic_velocity(mix, LIN, x[1], 0.5, 0))


def test_population_target_std_ring8():
    mix = preset("ring8")
    b = sample_batch(mix, 400_000, 0.0, 11)
    assert population_target_std(mix) == pytest.approx(np.std(b.x0 - b.z), rel=5e-3)
    assert population_target_std(mix) == pytest.approx(math.sqrt(0.5 + 0.01 + 1.0))


def test_make_rng_keys():
    a = make_rng((1, 2)).random(3)
    b = make_rng((1, 2)).random(3)
    c = make_rng((1, 3)).random(3)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)
