import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import sparse

from dissipaton_pinn.dqme import DissipatonLevel, SystemSpec, build_liouvillian, enumerate_basis
from dissipaton_pinn.pinn import (DEFAULT_DELTA_T, Feature, FeatureMap, LossProblem, LossWeights, PinnError,
                                  activation, forward_amplitude, init_model, load_checkpoint,
                                  loss_eval, loss_gradient, rdt_eval, rdt_time_derivative, save_checkpoint)

FM3 = FeatureMap.parse(["t", "t^2", "sqrt_ratio(0.015)"])


def _instance(seed=0, m_max=1, weights=None):
    rng = np.random.default_rng(seed)
    basis = enumerate_basis(1, 1, m_max)
    lv = DissipatonLevel(0, 0, 0, 0.3 + 0.2j, 0.5 - 0.1j, 1.2 + 0.4j, 1.2 - 0.4j, "test")
    L = build_liouvillian(SystemSpec(1, eps0=0.7), [lv], basis)
    target = np.zeros(basis.size, complex)
    target[basis.vacuum_diagonal()] = [0.4, 0.6]
    model = init_model(basis.width, FM3, (0.0, 0.2), hidden=5, seed=seed)
    pts = np.sort(rng.uniform(0.0, 0.2, 6))
    prob = LossProblem(basis, L.matrix, pts, target, (0.0, 0.2), weights or LossWeights(delta_t=1e-4))
    return model, prob


def test_activation_value():
    assert activation(0.0) == 0.5


def test_parameter_count_anderson_shape():
    m = init_model(20, FM3, (0.0, 0.23), hidden=35, n_layers=4)
    assert m.shape == (23, 35, 35, 35, 1)
    assert m.n_real == 6792


def test_init_reproducible_and_zero_scale():
    a = init_model(6, FM3, (0, 1), hidden=4, seed=3)
    b = init_model(6, FM3, (0, 1), hidden=4, seed=3)
    assert np.array_equal(a.get_params(), b.get_params())
    z = init_model(6, FM3, (0, 1), hidden=4, seed=3, scale=0.0)
    assert not np.any(z.get_params())
    # all-zero network: a(0) = 1/2 through every layer, output W=0 gives b=0
    assert forward_amplitude(z, [1, 0, 1, 0, 0, 1], 0.5) == 0


def test_init_variance():
    m = init_model(200, FeatureMap.parse(["t"]), (0, 1), hidden=300, n_layers=2, seed=0)
    W = m.weights[0]
    assert np.var(W.real) == pytest.approx(1 / 501, rel=0.05)
    assert np.var(W.imag) == pytest.approx(1 / 501, rel=0.05)
    assert not np.any(m.biases[0])


def test_single_layer_is_affine():
    m = init_model(4, FeatureMap.parse(["t"]), (0.0, 1.0), n_layers=1, seed=1)
    s = np.array([1, 0, 1, 1.0])
    expect = m.weights[0] @ np.append(s, 0.3) + m.biases[0]
    assert forward_amplitude(m, s, 0.3) == pytest.approx(complex(expect[0]))


def test_params_round_trip():
    m = init_model(6, FM3, (0, 1), hidden=4, seed=3)
    th = m.get_params()
    assert np.array_equal(m.with_params(th).get_params(), th)
    with pytest.raises(PinnError):
        m.with_params(th[:-1])


def test_feature_catalog():
    t = np.array([0.0, 0.04])
    assert Feature.parse("t1.5")(t)[1] == pytest.approx(0.04 ** 1.5)
    assert Feature.parse("sqrt_ratio(0.015)")(t)[1] == pytest.approx(0.2 / 0.055)
    assert FeatureMap.parse(["t", "t2", "t3"]).describe() == ["t", "t^2", "t^3"]
    with pytest.raises(PinnError):
        FeatureMap.parse(["sqrt_ratio(0.1)", "sqrt_ratio(0.2)"])
    with pytest.raises(PinnError):
        Feature.parse("t^4")


@given(st.integers(0, 10_000), st.floats(0.0, 0.2))
@settings(max_examples=25, deadline=None)
def test_symmetry_identity(seed, t):
    model, prob = _instance(seed % 7)
    model = init_model(prob.basis.width, FM3, (0.0, 0.2), hidden=5, seed=seed)
    b = prob.basis
    rho = rdt_eval(model, b, t)
    assert np.max(np.abs(rho - b.phase * rho[b.partner].conj())) <= 1e-14 * max(1.0, np.max(np.abs(rho)))
    assert np.all(rho[b.vacuum_diagonal()].imag == 0)


def test_zero_network_uniform_on_self_partners():
    _, prob = _instance()
    m = init_model(prob.basis.width, FM3, (0.0, 0.2), hidden=5, scale=0.0)
    m.biases[-1][:] = 0.3 - 0.1j
    rho = rdt_eval(m, prob.basis, 0.1)
    self_p = prob.basis.partner == np.arange(prob.basis.size)
    np.testing.assert_allclose(rho[self_p], 0.6)


def test_derivative_exact_for_linear_feature():
    basis = enumerate_basis(1, 1, 1)
    m = init_model(basis.width, FeatureMap.parse(["t"]), (0.0, 1.0), n_layers=1, seed=2)
    d = rdt_time_derivative(m, basis, 0.5, 1e-3)
    w = m.weights[0][0, -1]
    expect = w + basis.phase * np.conj(w)
    np.testing.assert_allclose(d, expect, atol=1e-12)


def test_derivative_matches_five_point_stencil():
    model, prob = _instance(3)
    b, t, h = prob.basis, 0.1, 1e-3
    five = (rdt_eval(model, b, t - 2 * h) - 8 * rdt_eval(model, b, t - h)
            + 8 * rdt_eval(model, b, t + h) - rdt_eval(model, b, t + 2 * h)) / (12 * h)
    d = rdt_time_derivative(model, b, t, DEFAULT_DELTA_T)
    assert np.linalg.norm(d - five) <= 1e-6 * np.linalg.norm(five)


def test_boundary_derivative_one_sided():
    basis = enumerate_basis(1, 1, 1)
    model = init_model(basis.width, FeatureMap.parse(["t", "t^2", "t^3"]), (0.0, 0.2), hidden=5, seed=4)
    h = 1e-5
    for t in (0.0, 0.2):
        d = rdt_time_derivative(model, basis, t, h)
        central = (rdt_eval(model, basis, t + h) - rdt_eval(model, basis, t - h)) / (2 * h)
        assert np.linalg.norm(d - central) <= 1e-6 * np.linalg.norm(central)


def test_stationary_exact_case_zero_loss_and_gradient():
    basis = enumerate_basis(1, 1, 0)
    m = init_model(basis.width, FeatureMap.parse(["t"]), (0.0, 1.0), n_layers=1, scale=0.0)
    m.biases[0][:] = 0.25
    target = np.full(basis.size, 0.5 + 0j)
    prob = LossProblem(basis, sparse.csr_matrix((basis.size, basis.size), dtype=complex),
                       np.linspace(0, 1, 5), target, (0.0, 1.0))
    rep, g = loss_gradient(m, prob)
    assert rep.l_r == 0 and rep.l_i == 0 and rep.l_tr == 0 and rep.total == 0
    assert not np.any(g)


def test_loss_components_and_weights():
    model, prob = _instance(1)
    r1 = loss_eval(model, prob)
    w = prob.weights
    assert r1.total == pytest.approx(w.omega_r * r1.l_r + w.omega_i * r1.l_i + w.omega_tr * r1.l_tr)
    assert min(r1.l_r, r1.l_i, r1.l_tr) >= 0
    p2 = prob.with_weights(dataclasses.replace(w, omega_tr=2 * w.omega_tr))
    r2 = loss_eval(model, p2)
    assert r2.total - r1.total == pytest.approx(w.omega_tr * r1.l_tr, rel=1e-12)
    assert (r2.l_r, r2.l_i, r2.l_tr) == (r1.l_r, r1.l_i, r1.l_tr)


def test_lambda_zero_is_plain_norm():
    model, prob = _instance(1)
    p0 = prob.with_weights(dataclasses.replace(prob.weights, lam=0.0))
    from dissipaton_pinn.pinn import rdt_eval as ev
    d = ev(model, prob.basis, 0.0) - prob.target
    assert loss_eval(model, p0).l_i == pytest.approx(np.sum(np.abs(d) ** 2), rel=1e-12)


def test_gradient_linear_in_weights():
    model, prob = _instance(2)
    parts = []
    for w in ((1, 0, 0), (0, 1, 0), (0, 0, 1)):
        parts.append(loss_gradient(model, prob.with_weights(LossWeights(*w, delta_t=1e-4)))[1])
    _, g = loss_gradient(model, prob.with_weights(LossWeights(0.3, 1.7, 4.0, delta_t=1e-4)))
    np.testing.assert_allclose(g, 0.3 * parts[0] + 1.7 * parts[1] + 4.0 * parts[2], rtol=1e-10, atol=1e-10)


def test_loss_permutation_invariant():
    model, prob = _instance(5)
    perm = LossProblem(prob.basis, prob.L, prob.points[::-1], prob.target, prob.interval, prob.weights)
    assert loss_eval(model, perm).total == pytest.approx(loss_eval(model, prob).total, rel=1e-13)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_gradient_matches_finite_differences(seed):
    model, prob = _instance(seed)
    _, g = loss_gradient(model, prob)
    th = model.get_params()
    fd = np.empty_like(th)
    for k in range(th.size):
        e = np.zeros_like(th)
        e[k] = 1e-6
        fd[k] = (loss_eval(model.with_params(th + e), prob).total
                 - loss_eval(model.with_params(th - e), prob).total) / 2e-6
    assert np.linalg.norm(g - fd) <= 1e-6 * np.linalg.norm(fd)


def test_loss_report_matches_gradient_report():
    model, prob = _instance(6)
    assert loss_gradient(model, prob)[0].total == loss_eval(model, prob).total


def test_trace_guard():
    basis = enumerate_basis(1, 1, 0)
    m = init_model(basis.width, FeatureMap.parse(["t"]), (0.0, 1.0), n_layers=1, scale=0.0)
    prob = LossProblem(basis, sparse.csr_matrix((4, 4), dtype=complex), np.array([0.5]),
                       np.zeros(4, complex), (0.0, 1.0))
    with pytest.raises(PinnError):
        loss_eval(m, prob)


def test_points_must_be_inside():
    _, prob = _instance()
    with pytest.raises(PinnError):
        LossProblem(prob.basis, prob.L, np.array([0.3]), prob.target, (0.0, 0.2))


def test_non_finite_flag():
    model, prob = _instance()
    th = model.get_params()
    bad = model.with_params(np.full_like(th, 1e3))
    rep = loss_eval(bad, prob)
    assert not rep.finite and rep.total == float("inf")


def test_checkpoint_round_trip(tmp_path):
    model, prob = _instance()
    save_checkpoint(model, tmp_path / "m.json", prob.basis)
    back = load_checkpoint(tmp_path / "m.json", prob.basis)
    assert np.array_equal(back.get_params(), model.get_params())
    assert back.features == model.features and back.interval == model.interval
    with pytest.raises(PinnError):
        load_checkpoint(tmp_path / "m.json", enumerate_basis(1, 1, 2))
