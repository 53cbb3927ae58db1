import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dissipaton_pinn.bath import BathSpec, Reservoir, expand_correlation
from dissipaton_pinn.convention import (conjugation_random_residual, conjugation_residual, even_sector,
                                        trace_residual)
from dissipaton_pinn.dqme import (DqmeError, DissipatonLevel, SystemSpec, apply_liouvillian,
                                  block_swap_partner, build_liouvillian, enumerate_basis,
                                  levels_from_modes, occupation_expectation, reachability_filter,
                                  reduced_density_matrix, reservoir_current, trace_rdo, vacuum_rdt)
from dissipaton_pinn.reference import propagate_reference


def _small(n_sys=1, n_pade=1, m_max=2, gamma=1.0, n_res=1):
    res = tuple(Reservoir(beta=1.0, mu=0.2 * a, width=3.0) for a in range(n_res))
    spec = BathSpec(res, np.full((n_sys, n_res), gamma), n_pade=n_pade)
    levels = levels_from_modes(expand_correlation(spec))
    sys = SystemSpec(n_sys, eps0=0.5, u0=1.0, mu_post=tuple(0.2 * a for a in range(n_res)))
    basis = enumerate_basis(n_sys, len(levels), m_max)
    return sys, levels, basis


def test_basis_count_12_states():
    b = enumerate_basis(1, 1, 1)
    assert b.size == 12
    assert b.keys[0] == 0 and b.index_of(0) == 0
    assert np.all(np.diff(b.keys) > 0)


def test_basis_full_when_unconstrained():
    assert enumerate_basis(2, 2, 4).size == 2 ** (2 * 2 + 2 * 2)


def test_basis_truncation_counts_tiers():
    b = enumerate_basis(2, 3, 2)
    assert b.tier().max() == 2
    assert b.size == 16 * (1 + 6 + 15)


def test_basis_capacity_error():
    with pytest.raises(DqmeError):
        enumerate_basis(2, 8, 4, cap=1000)


def test_basis_hash_changes_with_m_max():
    assert enumerate_basis(1, 2, 1).hash != enumerate_basis(1, 2, 2).hash
    assert enumerate_basis(1, 2, 1).hash == enumerate_basis(1, 2, 1).hash


def test_block_swap_examples():
    # n=1, n'=0, one level, m- = 0, m+ = 0
    assert block_swap_partner((1, 0, 0, 0), 1, 1) == ((0, 1, 0, 0), 1)
    # two levels, m- = (1, 1) so M- = 2 -> phase -1; partner swaps m- and m+
    assert block_swap_partner((0, 0, 1, 1, 0, 0), 1, 2) == ((0, 0, 0, 0, 1, 1), -1)


@given(st.integers(0, 2 ** 8 - 1))
@settings(max_examples=100, deadline=None)
def test_block_swap_involution(key):
    bits = tuple((key >> (7 - i)) & 1 for i in range(8))
    p1, s1 = block_swap_partner(bits, 1, 3)
    p2, s2 = block_swap_partner(p1, 1, 3)
    assert p2 == bits and s1 * s2 == 1


def test_basis_swap_closed_and_partner_consistent():
    b = enumerate_basis(2, 2, 2)
    assert b.swap_closed()
    assert np.all(b.partner[b.partner] == np.arange(b.size))
    assert np.all(b.phase * b.phase[b.partner] == 1)


def test_von_neumann_limit():
    sys = SystemSpec(1, eps0=1.0, u0=0.0)
    lv = DissipatonLevel(0, 0, 0, 0j, 0j, 1.0 + 0j, 1.0 + 0j, "lorentzian-pole")
    basis = enumerate_basis(1, 1, 0)
    L = build_liouvillian(sys, [lv], basis)
    rho = vacuum_rdt(basis, np.array([[0.5, 0.0], [0.5, 0.5]]))
    traj = propagate_reference(L, rho, 1e-3, 1.0, {"coh": lambda r: reduced_density_matrix(r, basis)[1, 0]})
    np.testing.assert_allclose(traj["coh"], 0.5 * np.exp(-1j * traj.t), atol=1e-10)


@pytest.mark.parametrize("n_sys,n_pade,m_max", [(1, 1, 2), (2, 1, 2), (1, 2, 3)])
def test_generator_arbiters_small(n_sys, n_pade, m_max):
    # physical RDTs have even total parity; the generator never mixes sectors
    sys, levels, full = _small(n_sys, n_pade, m_max)
    L_full = build_liouvillian(sys, levels, full)
    odd = (np.bitwise_count(full.keys) & 1).astype(bool)
    S = abs(L_full.structure()).tocoo()
    assert np.all(odd[S.row] == odd[S.col])
    basis = even_sector(full)
    L = build_liouvillian(sys, levels, basis, check=True)
    assert trace_residual(L.matrix, basis) <= 1e-12
    assert conjugation_residual(L.matrix, basis) <= 1e-12


def test_generator_matches_dense_assembly():
    sys, levels, basis = _small(1, 1, 1)
    assert basis.size == 4 * (1 + 4)
    L = build_liouvillian(sys, levels, basis)
    dense = np.zeros((basis.size, basis.size), complex)
    for r, c, v in zip(L.rows, L.cols, L.vals):
        dense[r, c] += v
    x = np.random.default_rng(0).normal(size=basis.size) + 0j
    assert np.max(np.abs(apply_liouvillian(L, x) - dense @ x)) <= 1e-14


def test_apply_linear_and_dims():
    sys, levels, basis = _small(1, 1, 2)
    L = build_liouvillian(sys, levels, basis)
    rng = np.random.default_rng(2)
    a, b = rng.normal(size=(2, basis.size)) + 1j * rng.normal(size=(2, basis.size))
    assert np.allclose(apply_liouvillian(L, 2 * a - 3j * b), 2 * L.matrix @ a - 3j * L.matrix @ b, atol=1e-13)
    assert not np.any(apply_liouvillian(L, np.zeros(basis.size)))
    with pytest.raises(DqmeError):
        apply_liouvillian(L, np.zeros(basis.size + 1))


def test_zero_coupling_has_no_current():
    sys, levels, basis = _small(1, 1, 2, gamma=0.0, n_res=2)
    L = build_liouvillian(sys, levels, basis)
    rho = vacuum_rdt(basis, np.diag([0.3, 0.7]))
    rho = rho + L.matrix @ rho
    for a in (0, 1):
        assert reservoir_current(rho, L, a) == 0.0
    with pytest.raises(DqmeError):
        reservoir_current(rho, L, 5)


def test_occupation_examples():
    basis = enumerate_basis(1, 1, 1)
    assert occupation_expectation(vacuum_rdt(basis, np.diag([0.0, 1.0])), basis, 0) == 1.0
    assert occupation_expectation(vacuum_rdt(basis, np.diag([1.0, 0.0])), basis, 0) == 0.0
    assert occupation_expectation(vacuum_rdt(basis, np.diag([0.5, 0.5])), basis, 0) == 0.5
    with pytest.warns(RuntimeWarning):
        occupation_expectation(vacuum_rdt(basis, np.diag([0.5, 0.5j])), basis, 0)


def test_filter_identity_with_full_seeds():
    sys, levels, basis = _small(1, 1, 2)
    L = build_liouvillian(sys, levels, basis)
    f = reachability_filter(basis, L, np.arange(basis.size))
    assert np.array_equal(f.keys, basis.keys)
    with pytest.raises(DqmeError):
        reachability_filter(basis, L, [])


def test_filter_closed_under_generator():
    sys, levels, basis = _small(2, 1, 2)
    L = build_liouvillian(sys, levels, basis)
    f = reachability_filter(basis, L, np.nonzero(basis.vacuum_diagonal())[0])
    keep = np.isin(basis.keys, f.keys)
    S = abs(L.structure()).tocoo()
    assert not np.any(keep[S.col] & ~keep[S.row])
    assert f.swap_closed()


def test_anderson_generator_invariants(anderson):
    P = anderson
    assert P.basis.swap_closed()
    assert P.truncated_size == 4816 and P.basis.size == 484
    # filtered space is more than an order of magnitude below the unconstrained space
    assert P.basis.size < P.full_size / 10
    assert trace_residual(P.L.matrix, P.basis) <= 1e-12
    assert conjugation_random_residual(P.L.matrix, P.basis, n_vectors=100) <= 1e-12


def test_anderson_charge_balance(anderson):
    P = anderson
    dt = 2e-3
    rho = P.rho0.copy()
    from dissipaton_pinn.reference import rk4_step
    N = P.basis.trace_weights() * P.basis.field_bits("n").sum(axis=1)
    for _ in range(50):
        rho = rk4_step(P.L, rho, dt)
    rate = (N @ P.L.matrix @ rho).real
    cur = sum(reservoir_current(rho, P.L, a) for a in P.L.reservoirs)
    assert abs(rate - cur) <= 1e-8
    assert abs(trace_rdo(rho, P.basis) - 1) <= 1e-10
