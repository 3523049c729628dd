import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_dataset
from ntrflab.errors import InvalidInputError
from ntrflab.losses import (cross_entropy, cross_entropy_prime, dataset_metrics,
                            default_hinge_lambda, margin_metrics, squared_hinge)
from ntrflab.network import NetworkShape, WeightStack, init_weights


def test_cross_entropy_values():
    assert cross_entropy(0.0) == pytest.approx(np.log(2), rel=1e-15)
    assert cross_entropy(-100.0) == pytest.approx(100.0, rel=1e-15)
    eps = 1e-3
    v = cross_entropy(np.log(1 / eps))
    assert v == pytest.approx(np.log1p(eps), rel=1e-12)
    assert v <= eps


def test_cross_entropy_no_overflow_at_extremes():
    z = np.array([-1e4, -31.0, -30.0, 0.0, 30.0, 31.0, 1e4])
    v = cross_entropy(z)
    assert np.all(np.isfinite(v))
    assert v[0] == 1e4
    assert np.all(np.diff(v) < 0) or v[-1] == 0.0


@given(st.floats(-200, 200))
def test_cross_entropy_matches_log1p_reference(z):
    ref = np.logaddexp(0.0, -z)
    assert cross_entropy(z) == pytest.approx(ref, rel=1e-13, abs=1e-300)


def test_cross_entropy_prime_values():
    assert cross_entropy_prime(0.0) == -0.5
    tail = cross_entropy_prime(100.0)
    assert tail < 0
    assert tail == pytest.approx(-np.exp(-100.0), rel=1e-12)


def test_prime_bounded_by_loss_on_grid():
    z = np.arange(-5000, 5001) * 1e-2
    d = -cross_entropy_prime(z)
    assert np.all(d <= np.minimum(1.0, cross_entropy(z)))
    assert np.all(d > 0) and np.all(d <= 1)
    # 1 - e^z is representable in float64 only while e^z > 2^-53
    assert np.all(d[np.abs(z) <= 36] < 1)


def test_prime_matches_finite_differences():
    z = np.linspace(-20, 20, 81)
    h = 1e-6
    fd = (cross_entropy(z + h) - cross_entropy(z - h)) / (2 * h)
    np.testing.assert_allclose(cross_entropy_prime(z), fd, rtol=1e-6, atol=1e-12)


def test_convexity_witness():
    rng = np.random.default_rng(0)
    z1, z2 = rng.uniform(-50, 50, (2, 10**4))
    t = rng.uniform(0, 1, 10**4)
    lhs = cross_entropy(t * z1 + (1 - t) * z2)
    rhs = t * cross_entropy(z1) + (1 - t) * cross_entropy(z2)
    assert np.all(lhs <= rhs + 1e-12)


def test_squared_hinge_cases():
    v, d = squared_hinge(2.0, 2.0)
    assert (v, d) == (0.0, 0.0)
    v, d = squared_hinge(0.0, 2.0)
    assert (v, d) == (4.0, -4.0)
    with pytest.raises(InvalidInputError):
        squared_hinge(0.0, 0.0)


def test_squared_hinge_derivative():
    rng = np.random.default_rng(1)
    lam = 3.0
    z = rng.uniform(-5, 8, 500)
    z = z[np.abs(lam - z) > 1e-3]
    v, d = squared_hinge(z, lam)
    h = 1e-7
    fd = (squared_hinge(z + h, lam)[0] - squared_hinge(z - h, lam)[0]) / (2 * h)
    active = v > 0
    np.testing.assert_allclose(d[active], fd[active], rtol=1e-6)
    np.testing.assert_allclose(d, -2 * np.sqrt(v), rtol=1e-15)


def test_default_hinge_lambda():
    assert default_hinge_lambda(1e-3) == pytest.approx(np.log(1000) + 1)


def test_zero_weights_metrics(rng):
    data = random_dataset(rng, 9, 4)
    met = dataset_metrics(WeightStack.zeros(NetworkShape(4, 3, 3)), data)
    assert met.err01 == 1.0
    assert met.loss == pytest.approx(np.log(2))
    assert met.surrogate == 0.5


def test_large_margin_metrics():
    met = margin_metrics(np.full(10, 20.0))
    assert met.err01 == 0.0
    assert met.loss <= 3e-9


def test_err01_at_most_twice_surrogate(rng):
    for s in range(20):
        data = random_dataset(rng, 30, 5)
        met = dataset_metrics(init_weights(NetworkShape(5, 8, 3), s), data)
        assert met.err01 <= 2 * met.surrogate
        assert 0 < met.surrogate <= 1


def test_zero_margin_counts_as_error():
    assert margin_metrics(np.array([0.0, 1.0])).err01 == 0.5
