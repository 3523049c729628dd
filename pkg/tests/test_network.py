import numpy as np
import pytest

from conftest import central_difference, max_rel_error, random_dataset, score_fn, unit_rows
from ntrflab.data import LabeledDataset
from ntrflab.errors import InvalidInputError
from ntrflab.network import (NetworkShape, WeightStack, backward_batch, forward, forward_batch,
                             init_weights, jvp_batch, loss_and_gradient, network_gradient,
                             per_example_gradients, per_example_layer_norms)


def hand_net(w1):
    return WeightStack([np.array([w1], float), np.array([[2.0]])])


def test_init_shapes():
    w = init_weights(NetworkShape(2, 4, 3), seed=7)
    assert [a.shape for a in w] == [(4, 2), (4, 4), (1, 4)]


def test_init_deterministic():
    a = init_weights(NetworkShape(5, 16, 4), seed=99)
    b = init_weights(NetworkShape(5, 16, 4), seed=99)
    c = init_weights(NetworkShape(5, 16, 4), seed=100)
    assert a.equals(b)
    assert not a.equals(c)


def test_init_variances_at_width_512():
    m = 512
    hidden = np.concatenate([init_weights(NetworkShape(8, m, 3), s)[1].ravel()
                             for s in range(4)])
    out = np.concatenate([init_weights(NetworkShape(1, m, 2), s)[1].ravel()
                          for s in range(2000)])
    assert hidden.size >= 10**6 and out.size >= 10**6
    assert abs(hidden.var() / (2 / m) - 1) < 0.01
    assert abs(out.var() / (1 / m) - 1) < 0.01


def test_shape_validation():
    with pytest.raises(InvalidInputError):
        NetworkShape(2, 4, 1)
    with pytest.raises(InvalidInputError):
        WeightStack([np.zeros((4, 2)), np.zeros((3, 4)), np.zeros((1, 4))])
    with pytest.raises(InvalidInputError):
        forward(init_weights(NetworkShape(2, 4, 2), 0), np.ones(3))


def test_forward_hand_cases():
    assert forward(hand_net([1.0, 0.0]), np.array([1.0, 0.0])).score == 2.0
    assert forward(hand_net([-1.0, 0.0]), np.array([1.0, 0.0])).score == 0.0
    zero = WeightStack.zeros(NetworkShape(3, 5, 4))
    assert forward(zero, np.array([1.0, 0.0, 0.0])).score == 0.0


def test_cache_invariants(tiny_net, rng):
    x = unit_rows(rng, 1, 3)[0]
    c = forward(tiny_net, x)
    for pre, post in zip(c.pre, c.post):
        np.testing.assert_array_equal(post, np.maximum(pre, 0))
    assert c.score == pytest.approx(2.0 * (tiny_net[-1][0] @ c.post[-1]))


def test_last_layer_homogeneity(tiny_net, rng):
    X = unit_rows(rng, 6, 3)
    scaled = WeightStack(tiny_net.layers[:-1] + [3.5 * tiny_net[-1]])
    np.testing.assert_allclose(forward_batch(scaled, X).scores,
                               3.5 * forward_batch(tiny_net, X).scores, rtol=1e-14)


def test_gradient_hand_case():
    w = hand_net([1.0, 0.0])
    g = network_gradient(w, forward(w, np.array([1.0, 0.0])))
    assert g[1][0, 0] == 1.0
    np.testing.assert_array_equal(g[0], [[2.0, 0.0]])


def test_dead_path_gives_zero_first_layer_gradient():
    w = WeightStack([-np.ones((3, 2)), np.eye(3), np.ones((1, 3))])
    g = network_gradient(w, forward(w, np.array([0.6, 0.8])))
    np.testing.assert_array_equal(g[0], 0.0)


@pytest.mark.parametrize("L", [2, 3, 5])
@pytest.mark.parametrize("m", [2, 4])
def test_gradient_matches_finite_differences(L, m, rng):
    for trial in range(3):
        w = init_weights(NetworkShape(3, m, L), seed=100 * L + 10 * m + trial)
        x = unit_rows(rng, 1, 3)[0]
        g = network_gradient(w, forward(w, x))
        assert g.shape == w.shape
        assert max_rel_error(g, central_difference(score_fn(x), w)) <= 1e-5


def test_loss_gradient_matches_finite_differences(rng):
    w = init_weights(NetworkShape(3, 4, 3), seed=3)
    data = random_dataset(rng, 7, 3)
    _, g = loss_and_gradient(w, data)
    fd = central_difference(lambda v: loss_and_gradient(v, data)[0], w)
    assert max_rel_error(g, fd) <= 1e-5


def test_saturated_loss_tail():
    x = np.array([[1.0, 0.0]])
    w = WeightStack([np.array([[25.0, 0.0]]), np.array([[2.0]])])   # y f = 50
    loss, g = loss_and_gradient(w, LabeledDataset(x, [1]))
    feat = np.sqrt(network_gradient(w, forward(w, x[0])).sq_norm())
    assert loss <= 1e-21
    assert np.sqrt(g.sq_norm()) <= 1e-20 * feat


def test_duplicating_examples_changes_nothing(tiny_net, rng):
    data = random_dataset(rng, 5, 3)
    loss, g = loss_and_gradient(tiny_net, data)
    loss2, g2 = loss_and_gradient(tiny_net, data.concat(data))
    assert loss2 == pytest.approx(loss, rel=1e-14)
    np.testing.assert_allclose(g2.flatten(), g.flatten(), rtol=1e-12, atol=1e-15)


def test_batched_routines_agree_with_single_example(rng):
    w = init_weights(NetworkShape(4, 6, 4), seed=5)
    X = unit_rows(rng, 5, 4)
    f0, G = per_example_gradients(w, X)
    cache = forward_batch(w, X)
    norms = per_example_layer_norms(w, cache)
    coef = rng.standard_normal(5)
    total = backward_batch(w, cache, coef)
    acc = np.zeros(w.shape.n_params)
    for i, x in enumerate(X):
        c = forward(w, x)
        g = network_gradient(w, c)
        assert f0[i] == pytest.approx(c.score, rel=1e-13)
        np.testing.assert_allclose(G[i], g.flatten(), rtol=1e-12, atol=1e-14)
        np.testing.assert_allclose(norms[i], g.frob_norms(), rtol=1e-12)
        acc += coef[i] * g.flatten()
    np.testing.assert_allclose(total.flatten(), acc, rtol=1e-11, atol=1e-13)


def test_jvp_matches_directional_derivative(rng):
    w = init_weights(NetworkShape(4, 6, 3), seed=8)
    X = unit_rows(rng, 5, 4)
    direction = init_weights(NetworkShape(4, 6, 3), seed=9)
    jv = jvp_batch(w, forward_batch(w, X), direction)
    t = 1e-6
    fd = (forward_batch(w + direction.scaled(t), X).scores
          - forward_batch(w - direction.scaled(t), X).scores) / (2 * t)
    np.testing.assert_allclose(jv, fd, rtol=1e-5, atol=1e-8)


def test_gradient_norm_over_sqrt_m_is_width_stable(rng):
    X = unit_rows(rng, 32, 10)
    medians = []
    for m in (64, 256, 1024):
        vals = []
        for s in range(5):
            w = init_weights(NetworkShape(10, m, 3), seed=s)
            vals.append(per_example_layer_norms(w, forward_batch(w, X)).max() / np.sqrt(m))
        medians.append(np.median(vals))
    assert max(medians) / min(medians) <= 3.0
