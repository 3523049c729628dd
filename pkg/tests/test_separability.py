import itertools
import math

import numpy as np
import pytest

from conftest import unit_rows
from ntrflab.data import LabeledDataset, flip_labels, gen_margin_dataset
from ntrflab.errors import DegenerateFeatureError, EmptySurvivorError, UndefinedPhiError
from ntrflab.network import NetworkShape, WeightStack, forward, init_weights, network_gradient
from ntrflab.ntrf import NtrfFeatures, extract_features, fit_projected_gd
from ntrflab.separability import (ShallowMarginReport, class_distance, ntrf_margin,
                                  shallow_margins, shallow_ntk_margin, shallow_witness)

# empirical slack constant for label noise, fitted once on seeds 0-2 (largest
# observed ratio 0.56) and frozen; the check below runs on other seeds
NOISE_SLACK_C = 1.0


def brute_force_phi(data):
    best = math.inf
    for i, j in itertools.combinations(range(data.n), 2):
        if data.y[i] != data.y[j]:
            best = min(best, float(np.sqrt(np.sum((data.X[i] - data.X[j]) ** 2))))
    return best


def test_phi_antipodal_and_coincident():
    data = LabeledDataset(np.array([[1.0, 0.0], [-1.0, 0.0]]), [1, -1])
    rep = class_distance(data)
    assert rep.phi == 2.0 and (rep.i, rep.j) == (0, 1)
    same = LabeledDataset(np.array([[0.6, 0.8], [0.6, 0.8]]), [1, -1])
    assert class_distance(same).phi == 0.0


def test_phi_single_class():
    with pytest.raises(UndefinedPhiError):
        class_distance(LabeledDataset(np.eye(3), [1, 1, 1]))


@pytest.mark.parametrize("n", [3, 17, 120, 1000])
def test_phi_matches_brute_force(n, rng):
    X = unit_rows(rng, n, 4)
    y = rng.choice([-1, 1], size=n)
    y[0], y[1] = 1, -1
    data = LabeledDataset(X, y)
    rep = class_distance(data)
    if n <= 120:
        assert rep.phi == pytest.approx(brute_force_phi(data), rel=1e-12)
    assert rep.phi == pytest.approx(np.linalg.norm(X[rep.i] - X[rep.j]), rel=1e-12)
    perm = rng.permutation(n)
    assert class_distance(data.subset(perm)).phi == pytest.approx(rep.phi, rel=1e-12)


def test_ntrf_margin_single_example():
    w0 = init_weights(NetworkShape(5, 16, 3), 0)
    data = gen_margin_dataset(1, 5, 0.1, seed=1)
    feats = extract_features(w0, data)
    rep = ntrf_margin(feats, data.y, iterations=50)
    g = feats.grads[0]
    assert rep.gamma_hat == pytest.approx(np.linalg.norm(g) / 4.0, rel=1e-10)
    np.testing.assert_allclose(rep.ustar.flatten(), data.y[0] * g / np.linalg.norm(g),
                               rtol=1e-10, atol=1e-14)


def test_ntrf_margin_report_invariants():
    data = gen_margin_dataset(60, 8, 0.1, seed=2)
    feats = extract_features(init_weights(NetworkShape(8, 32, 3), 3), data)
    rep = ntrf_margin(feats, data.y, iterations=200, rho=0.05)
    assert abs(rep.ustar.sq_norm() - 1) <= 1e-8
    s = data.y * (feats.grads @ rep.ustar.flatten())
    assert rep.rho_hat == np.mean(s < math.sqrt(32) * rep.gamma_hat)
    assert rep.rho_hat <= 0.05
    assert set(rep.gamma_by_rho) == {0.0, 0.01, 0.05, 0.1}
    assert rep.gamma_by_rho[0.0] <= rep.gamma_by_rho[0.1]


def test_ntrf_margin_duplication_and_scaling():
    data = gen_margin_dataset(40, 6, 0.1, seed=4)
    feats = extract_features(init_weights(NetworkShape(6, 16, 3), 5), data)
    rep = ntrf_margin(feats, data.y, iterations=150)
    dup = NtrfFeatures(feats.shape, np.concatenate([feats.offsets] * 2),
                       np.vstack([feats.grads] * 2))
    assert ntrf_margin(dup, np.concatenate([data.y] * 2), 150).gamma_hat == pytest.approx(
        rep.gamma_hat, rel=1e-9)
    scaled = ntrf_margin(feats.scaled(3.0), data.y, iterations=150)
    assert scaled.gamma_hat == pytest.approx(3.0 * rep.gamma_hat, rel=1e-10)
    assert scaled.rho_hat == rep.rho_hat
    np.testing.assert_allclose(scaled.ustar.flatten(), rep.ustar.flatten(), atol=1e-10)


def test_ntrf_margin_recovers_planted_direction():
    rng = np.random.default_rng(0)
    shape = NetworkShape(2, 1, 2)          # three parameters, sqrt(m) = 1
    u = np.array([1.0, 0.0, 0.0])
    n = 30
    y = rng.choice([-1, 1], size=n)
    G = rng.uniform(-1, 1, (n, 3))
    G[:, 0] = y * (0.3 + rng.uniform(0, 0.5, n))
    feats = NtrfFeatures(shape, np.zeros(n), G)
    assert np.min(y * (G @ u)) >= 0.3
    assert ntrf_margin(feats, y, iterations=400).gamma_hat >= 0.29


def test_ntrf_margin_dead_network():
    shape = NetworkShape(3, 4, 3)
    feats = NtrfFeatures(shape, np.zeros(5), np.zeros((5, shape.n_params)))
    with pytest.raises(DegenerateFeatureError):
        ntrf_margin(feats, np.ones(5), 10)


def test_label_noise_costs_at_most_linear_slack():
    R = 5.0
    for s in (3, 4, 5):
        base = gen_margin_dataset(200, 20, 0.1, seed=s)
        feats = extract_features(init_weights(NetworkShape(20, 128, 3), s), base)
        eps0 = fit_projected_gd(feats, R, base.y, 1000).eps_ntrf
        for rho in (0.01, 0.05, 0.1):
            eps = fit_projected_gd(feats, R, flip_labels(base, rho, s).y, 1000).eps_ntrf
            assert eps <= eps0 + NOISE_SLACK_C * rho * R


def test_shallow_margin_single_example():
    data = LabeledDataset(np.array([[0.6, 0.8, 0.0]]), [1])
    rep = shallow_ntk_margin(data, k=10_000, seed=0, iterations=20)
    active = rep.z @ data.X[0] > 0
    assert rep.gamma_hat == pytest.approx(active.mean(), rel=1e-12)
    assert abs(rep.gamma_hat - 0.5) <= 0.05
    np.testing.assert_allclose(rep.umap[active], np.tile(data.X[0], (active.sum(), 1)))


def test_shallow_margin_label_symmetry():
    data = gen_margin_dataset(30, 5, 0.2, seed=1)
    a = shallow_ntk_margin(data, k=500, seed=2, iterations=100)
    b = shallow_ntk_margin(data.with_labels(-data.y), k=500, seed=2, iterations=100)
    assert b.gamma_hat == pytest.approx(a.gamma_hat, rel=1e-12)
    np.testing.assert_allclose(b.umap, -a.umap, atol=1e-15)


def test_shallow_margin_beats_constant_map():
    data, w = gen_margin_dataset(50, 10, 0.2, seed=3, return_teacher=True)
    rep = shallow_ntk_margin(data, k=10_000, seed=0, iterations=150)
    gamma_lin = np.min(data.y * (data.X @ w))
    const = shallow_margins(data, rep.z, np.tile(w, (rep.k, 1))).min()
    assert const >= gamma_lin / 2 - 0.05
    assert rep.gamma_hat >= gamma_lin / 2 - 0.05
    assert np.all(np.linalg.norm(rep.umap, axis=1) <= 1 + 1e-10)


def test_umap_round_trip(tmp_path):
    data = gen_margin_dataset(10, 4, 0.2, seed=0)
    rep = shallow_ntk_margin(data, k=50, seed=1, iterations=10)
    rep.save(tmp_path / "u.bin")
    back = ShallowMarginReport.load(tmp_path / "u.bin")
    assert back.gamma_hat == rep.gamma_hat
    assert back.umap.tobytes() == rep.umap.tobytes()


def test_witness_empty_survivors():
    m = 16
    w0 = WeightStack([np.ones((m, 3)), np.full((1, m), 0.4 / math.sqrt(m))])
    data = gen_margin_dataset(5, 3, 0.2, seed=0)
    with pytest.raises(EmptySurvivorError):
        shallow_witness(w0, np.zeros((m, 3)), data)


def test_witness_construction():
    data = gen_margin_dataset(64, 10, 0.2, seed=5)
    m = 2000
    w0 = init_weights(NetworkShape(10, m, 2), 6)
    rep = shallow_ntk_margin(data, z=w0[0], iterations=200)
    res = shallow_witness(w0, rep.umap, data)
    assert np.linalg.norm(res.U) <= 2.2
    w2 = w0[1][0]
    np.testing.assert_array_equal(res.survivors,
                                  np.flatnonzero(np.abs(w2) >= 0.47 / math.sqrt(m)))
    # margins equal <grad_{W1} f(x_i), U> computed through the network gradient
    i = 7
    g = network_gradient(w0, forward(w0, data.X[i]))[0]
    assert res.margins[i] == pytest.approx(data.y[i] * np.sum(g * res.U), rel=1e-10)
    assert np.all(res.margins > 0)
