import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import sparse

from dissipaton_pinn.dqme import (SystemSpec, build_liouvillian, enumerate_basis, levels_from_modes,
                                  occupation_expectation, vacuum_rdt)
from dissipaton_pinn.reference import (DiscreteLevel, ReferenceError, Trajectory, discrete_bath_oracle,
                                       discrete_level_modes, propagate_reference, rk4_step,
                                       step_size_audit)


def test_rk4_scalar_exponential():
    L = sparse.csr_matrix(np.array([[-1.0 + 0j]]))
    out = rk4_step(L, np.array([1.0 + 0j]), 0.1)
    assert abs(out[0] - math.exp(-0.1)) < 1e-7


def test_rk4_zero_generator_and_linearity():
    rng = np.random.default_rng(0)
    x, y = rng.normal(size=(2, 5)) + 0j
    Z = sparse.csr_matrix((5, 5), dtype=complex)
    assert np.array_equal(rk4_step(Z, x, 0.3), x)
    A = sparse.csr_matrix(rng.normal(size=(5, 5)) + 0j)
    np.testing.assert_allclose(rk4_step(A, 2 * x + y, 0.1), 2 * rk4_step(A, x, 0.1) + rk4_step(A, y, 0.1),
                               atol=1e-13)


def test_rk4_errors():
    A = sparse.csr_matrix(np.array([[1e308 + 0j]]))
    with pytest.raises(ReferenceError), np.errstate(all="ignore"):
        rk4_step(A, np.array([1e308 + 0j]), 1.0)
    with pytest.raises(ReferenceError):
        rk4_step(A, np.array([1.0 + 0j]), 0.0)


def test_trajectory_validation():
    with pytest.raises(ReferenceError):
        Trajectory(np.array([0.0, 0.0]), {})
    with pytest.raises(ReferenceError):
        Trajectory(np.array([0.0, 1.0]), {"x": np.array([1.0, np.nan])})


def test_unitary_coherence_magnitude():
    from dissipaton_pinn.dqme import DissipatonLevel, reduced_density_matrix
    lv = DissipatonLevel(0, 0, 0, 0j, 0j, 1.0 + 0j, 1.0 + 0j, "lorentzian-pole")
    basis = enumerate_basis(1, 1, 1)
    L = build_liouvillian(SystemSpec(1, eps0=1.7), [lv], basis)
    rho = vacuum_rdt(basis, np.array([[0.5, 0.4], [0.4, 0.5]]))
    tr = propagate_reference(L, rho, 1e-2, 2.0, {"c": lambda r: abs(reduced_density_matrix(r, basis)[0, 1])})
    np.testing.assert_allclose(tr["c"], 0.4, atol=1e-9)


def test_oracle_zero_coupling_is_von_neumann():
    sys = SystemSpec(1, eps0=0.7)
    tr = discrete_bath_oracle(sys, [DiscreteLevel(0.3, 0.0)], beta=1.0, mu=0.0, T=1.0, dt=0.1,
                              rho_sys0=np.diag([0.25, 0.75]))
    np.testing.assert_allclose(tr["n_0"], 0.75, atol=1e-14)


def test_oracle_resonant_two_mode_rabi():
    g = 0.8
    sys = SystemSpec(1, eps0=0.5)
    # empty bath level at the same energy: the electron hops back and forth
    tr = discrete_bath_oracle(sys, [DiscreteLevel(0.5, g)], beta=np.inf, mu=0.0, T=3.0, dt=0.05,
                              rho_sys0=np.diag([0.0, 1.0]))
    np.testing.assert_allclose(tr["n_0"], np.cos(g * tr.t) ** 2, atol=1e-12)


def test_oracle_conservation():
    sys = SystemSpec(2, eps0=-0.3, u0=1.0)
    lv = [DiscreteLevel(0.4, 0.5, 0), DiscreteLevel(-0.2, 0.3, 1), DiscreteLevel(0.1, 0.2, 0)]
    rho = np.diag([0.1, 0.2, 0.3, 0.4]).astype(complex)
    tr = discrete_bath_oracle(sys, lv, beta=2.0, mu=0.1, T=2.0, dt=0.1, rho_sys0=rho)
    np.testing.assert_allclose(tr["trace"], 1.0, atol=1e-12)
    np.testing.assert_allclose(tr["N_total"], tr["N_total"][0], atol=1e-12)


@given(st.permutations([0, 1, 2]))
@settings(max_examples=6, deadline=None)
def test_oracle_permutation_invariant(perm):
    sys = SystemSpec(1, eps0=0.2)
    lv = [DiscreteLevel(0.4, 0.5), DiscreteLevel(-0.6, 0.3), DiscreteLevel(1.0, 0.2)]
    a = discrete_bath_oracle(sys, lv, 1.5, 0.0, 2.0, 0.1, np.diag([1.0, 0.0]))
    b = discrete_bath_oracle(sys, [lv[i] for i in perm], 1.5, 0.0, 2.0, 0.1, np.diag([1.0, 0.0]))
    np.testing.assert_allclose(a["n_0"], b["n_0"], atol=1e-12)


def test_oracle_mode_cap():
    with pytest.raises(ReferenceError):
        discrete_bath_oracle(SystemSpec(2), [DiscreteLevel(0.0, 0.1)] * 11, 1.0, 0.0, 1.0, 0.1)


def test_discrete_modes_are_physical():
    modes = discrete_level_modes([DiscreteLevel(0.5, 0.3)], beta=2.0, mu=0.0)
    f = 1 / (1 + math.exp(1.0))
    assert modes[0].sigma == -1 and modes[0].eta == pytest.approx(0.09 * (1 - f))
    assert modes[1].eta == pytest.approx(0.09 * f)
    assert modes[1].gamma == pytest.approx(-0.5j) and modes[0].gamma == pytest.approx(0.5j)


def _dqme_vs_oracle(sys, levels, beta, mu, rho_sys, T, dt):
    modes = discrete_level_modes(levels, beta, mu)
    lv = levels_from_modes(modes)
    basis = enumerate_basis(sys.n_orbitals, len(lv), 2 * len(lv))
    L = build_liouvillian(sys, lv, basis)
    obs = {f"n_{u}": (lambda r, u=u: occupation_expectation(r, basis, u)) for u in range(sys.n_orbitals)}
    d = propagate_reference(L, vacuum_rdt(basis, rho_sys), dt / 10, T, obs, sample_dt=dt)
    o = discrete_bath_oracle(sys, levels, beta, mu, T, dt, rho_sys)
    return max(float(np.max(np.abs(d[k] - o[k]))) for k in obs)


def test_dqme_matches_discrete_oracle_spinless():
    sys = SystemSpec(1, eps0=0.3)
    lv = [DiscreteLevel(0.5, 0.4), DiscreteLevel(-0.7, 0.3)]
    g_eff = 2 * (0.4 ** 2 + 0.3 ** 2)
    assert _dqme_vs_oracle(sys, lv, 2.0, 0.1, np.diag([0.35, 0.65]), 2.0 / g_eff, 2.0 / g_eff / 40) <= 1e-4


def test_dqme_matches_discrete_oracle_spinful():
    sys = SystemSpec(2, eps0=-0.4, u0=1.3)
    lv = [DiscreteLevel(0.6, 0.5, 0), DiscreteLevel(-0.2, 0.35, 1)]
    rho = np.diag([0.1, 0.3, 0.4, 0.2]).astype(complex)
    assert _dqme_vs_oracle(sys, lv, 1.5, 0.2, rho, 3.0, 0.075) <= 1e-4


def test_richardson_order():
    from dissipaton_pinn.bath import BathSpec, Reservoir, expand_correlation
    spec = BathSpec((Reservoir(beta=1.0, width=3.0),), np.array([[1.0]]), n_pade=1)
    lv = levels_from_modes(expand_correlation(spec))
    basis = enumerate_basis(1, len(lv), 2)
    L = build_liouvillian(SystemSpec(1, eps0=0.5), lv, basis)
    rho = vacuum_rdt(basis, np.diag([1.0, 0.0]))
    obs = {"n": lambda r: occupation_expectation(r, basis, 0)}
    n = [propagate_reference(L, rho, dt, 1.0, obs, sample_dt=0.2)["n"] for dt in (0.1, 0.05, 0.025)]
    ratio = np.max(np.abs(n[0] - n[1])) / np.max(np.abs(n[1] - n[2]))
    assert 12 <= ratio <= 20
    assert step_size_audit(L, rho, 1e-3, 1.0, obs, sample_dt=0.2) < 1e-8


def test_sample_grid_must_divide_horizon():
    from dissipaton_pinn.dqme import DissipatonLevel
    lv = DissipatonLevel(0, 0, 0, 0j, 0j, 1.0 + 0j, 1.0 + 0j, "lorentzian-pole")
    basis = enumerate_basis(1, 1, 0)
    L = build_liouvillian(SystemSpec(1), [lv], basis)
    with pytest.raises(ReferenceError):
        propagate_reference(L, vacuum_rdt(basis, np.eye(2) / 2), 0.01, 1.0, sample_dt=0.3)
