"""
Selection of the operator-ordering convention for the coupling terms.

The coupling lines of the equation of motion mix left and right
multiplication without saying which dissipaton string each ``b`` acts on or
which parity factors right multiplication picks up.  Every term family is
therefore given a small set of realizations (:class:`FamilyConvention`) and
the product set is screened by three arbiters:

1. conjugation symmetry ``L rho^dagger = (L rho)^dagger`` under the
   block-swap conjugation,
2. trace-row nullity ``w L = 0``,
3. agreement with the exact discrete-bath oracle.

The screening runs on the even-parity sector (``|n| + |n'| + M`` even), the
only sector physical states occupy and one that every candidate preserves.
The first family's ordering is pinned because flipping every family by
``(-1)^M`` is an exact gauge symmetry that no arbiter can see.
"""
from __future__ import annotations

import functools
import itertools
import logging
import time
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, sparse

from .dqme import (FAMILIES, Convention, DissipatonLevel, DqmeError, FamilyConvention,
                   RdtBasis, SystemSpec, _coefficient, _make_basis, build_liouvillian,
                   enumerate_basis, family_entries, levels_from_modes, occupation_expectation,
                   vacuum_rdt)
from .reference import DiscreteLevel, discrete_bath_oracle, discrete_level_modes

log = logging.getLogger(__name__)

__all__ = [
    "ConventionSearchResult",
    "candidate_options",
    "conjugation_matrix",
    "conjugation_residual",
    "conjugation_random_residual",
    "trace_residual",
    "even_sector",
    "search_conventions",
    "selected_convention",
]

ARBITER_TOL = 1e-10
ORACLE_TOL = 1e-8


def candidate_options(family_index: int) -> list[FamilyConvention]:
    """Realizations tried for one family (ordering pinned for the first)."""
    swaps = (False,) if family_index == 0 else (False, True)
    return [FamilyConvention(s, w, p) for s in ("minus", "plus") for w in swaps for p in (False, True)]


def conjugation_matrix(basis: RdtBasis) -> sparse.csr_matrix:
    """``Pi`` with ``rho^dagger = Pi @ conj(rho)``."""
    if not basis.swap_closed():
        raise DqmeError("basis is not closed under the block swap")
    n = basis.size
    return sparse.csr_matrix((basis.phase.astype(float), (np.arange(n), basis.partner)), shape=(n, n))


def conjugation_residual(mat, basis: RdtBasis) -> float:
    """Largest entry of ``L Pi - Pi conj(L)``."""
    P = conjugation_matrix(basis)
    D = (sparse.csr_matrix(mat) @ P - P @ sparse.csr_matrix(mat).conj()).tocoo()
    return float(np.max(np.abs(D.data))) if D.nnz else 0.0


def conjugation_random_residual(mat, basis: RdtBasis, n_vectors: int = 100, seed: int = 0) -> float:
    """``max |L(rho^dagger) - (L rho)^dagger|`` over random complex vectors."""
    rng = np.random.default_rng(seed)
    P = conjugation_matrix(basis)
    X = rng.standard_normal((basis.size, n_vectors)) + 1j * rng.standard_normal((basis.size, n_vectors))
    return float(np.max(np.abs(mat @ (P @ X.conj()) - P @ (mat @ X).conj())))


def trace_residual(mat, basis: RdtBasis) -> float:
    """Largest entry of ``w L`` with ``w`` the vacuum-diagonal indicator."""
    r = sparse.csr_matrix(mat).T @ basis.trace_weights()
    return float(np.max(np.abs(r))) if r.size else 0.0


def even_sector(basis: RdtBasis) -> RdtBasis:
    """States with even total parity ``|n| + |n'| + M``."""
    keep = (np.bitwise_count(basis.keys) & 1) == 0
    return _make_basis(basis.keys[keep], basis.n_sys, basis.n_levels, basis.m_max)


def _family_matrix(basis: RdtBasis, levels, fam_index: int, conv: FamilyConvention) -> sparse.csr_matrix:
    fam = FAMILIES[fam_index]
    n = basis.size
    R, C, V = [], [], []
    for j, lv in enumerate(levels):
        rows, cols, sign, _ = family_entries(basis, fam, j, lv.orbital, conv)
        R.append(rows); C.append(cols)
        V.append(-1j * fam.sign * _coefficient(lv, fam.coeff) * sign)
    return sparse.csr_matrix((np.concatenate(V).astype(complex),
                              (np.concatenate(R), np.concatenate(C))), shape=(n, n))


# ---------------------------------------------------------------------------
# instances


@dataclass
class _OracleInstance:
    name: str
    sys: SystemSpec
    levels: list[DiscreteLevel]
    beta: float
    mu: float
    rho_sys: np.ndarray
    T: float = 3.0
    dt: float = 0.05


def _oracle_instances() -> list[_OracleInstance]:
    spinless = _OracleInstance(
        "spinless, two discrete levels",
        SystemSpec(n_orbitals=1, eps0=0.3, u0=0.0),
        [DiscreteLevel(0.5, 0.4, 0), DiscreteLevel(-0.7, 0.3, 0)],
        beta=2.0, mu=0.1, rho_sys=np.diag([0.35, 0.65]).astype(complex))
    rho = np.diag([0.1, 0.3, 0.2, 0.4]).astype(complex)
    rho[1, 2] = 0.15 + 0.05j
    rho[2, 1] = np.conj(rho[1, 2])
    spinful = _OracleInstance(
        "spinful with U, one level per spin",
        SystemSpec(n_orbitals=2, eps0=-0.4, u0=1.3),
        [DiscreteLevel(0.6, 0.5, 0), DiscreteLevel(-0.2, 0.35, 1)],
        beta=1.5, mu=0.2, rho_sys=rho)
    return [spinless, spinful]


def _algebraic_instance(seed: int = 7):
    """Spinful system, two levels per orbital, generic complex amplitudes."""
    rng = np.random.default_rng(seed)
    levels = []
    for j in range(4):
        gm = complex(rng.uniform(0.5, 2.0), rng.uniform(-2, 2))
        levels.append(DissipatonLevel(orbital=j % 2, reservoir=j // 2, pole=j,
                                      eta_minus=complex(*rng.standard_normal(2)),
                                      eta_plus=complex(*rng.standard_normal(2)),
                                      gamma_minus=gm, gamma_plus=np.conj(gm), kind="test"))
    basis = even_sector(enumerate_basis(2, 4, 8))
    return levels, basis


# ---------------------------------------------------------------------------
# search


@dataclass
class ConventionSearchResult:
    selected: Convention | None
    n_candidates: int
    stage_counts: dict = field(default_factory=dict)
    arbiters: dict = field(default_factory=dict)
    seconds: float = 0.0

    def as_dict(self) -> dict:
        return {
            "selected": None if self.selected is None else self.selected.as_dict(),
            "n_candidates": self.n_candidates,
            "stage_counts": self.stage_counts,
            "arbiters": self.arbiters,
            "seconds": self.seconds,
        }


def _group_survivors(mats: dict, fam_ids: list[int], P, basis: RdtBasis, *, with_trace: bool):
    """Option tuples of ``fam_ids`` whose summed matrices pass the arbiters."""
    n = basis.size
    labels, blocks = [], []
    for f in fam_ids:
        for k in range(len(candidate_options(f))):
            M = mats[f, k]
            D = (M @ P - P @ M.conj()).tocoo()
            blocks.append((D.row.astype(np.int64) * n + D.col, D.data))
            labels.append((f, k))
    allpos = np.unique(np.concatenate([b[0] for b in blocks]))
    dense = np.zeros((allpos.size, len(blocks)), complex)
    for c, (pos, val) in enumerate(blocks):
        np.add.at(dense[:, c], np.searchsorted(allpos, pos), val)
    col = {lab: c for c, lab in enumerate(labels)}
    w = basis.trace_weights()
    tr = {lab: np.asarray(mats[lab].T @ w).ravel() for lab in labels}

    ranges = [range(len(candidate_options(f))) for f in fam_ids]
    conj_pass, both_pass = [], []
    for combo in itertools.product(*ranges):
        s = sum(dense[:, col[f, k]] for f, k in zip(fam_ids, combo))
        if np.max(np.abs(s), initial=0.0) > ARBITER_TOL:
            continue
        conj_pass.append(combo)
        if with_trace:
            t = sum(tr[f, k] for f, k in zip(fam_ids, combo))
            if np.max(np.abs(t), initial=0.0) > ARBITER_TOL:
                continue
        both_pass.append(combo)
    return conj_pass, both_pass


def _dqme_occupations(conv: Convention, inst: _OracleInstance) -> np.ndarray:
    modes = discrete_level_modes(inst.levels, inst.beta, inst.mu)
    levels = levels_from_modes(modes)
    ns = inst.sys.n_orbitals
    basis = even_sector(enumerate_basis(ns, len(levels), 2 * len(levels)))
    L = build_liouvillian(inst.sys, levels, basis, conv)
    rho = vacuum_rdt(basis, inst.rho_sys)
    prop = linalg.expm(L.matrix.toarray() * inst.dt)
    n_steps = int(round(inst.T / inst.dt))
    out = np.empty((n_steps + 1, ns))
    for i in range(n_steps + 1):
        out[i] = [occupation_expectation(rho, basis, u) for u in range(ns)]
        rho = prop @ rho
    return out


def _oracle_occupations(inst: _OracleInstance) -> np.ndarray:
    tr = discrete_bath_oracle(inst.sys, inst.levels, inst.beta, inst.mu, inst.T, inst.dt, inst.rho_sys)
    return np.column_stack([tr[f"n_{u}"] for u in range(inst.sys.n_orbitals)])


def search_conventions(seed: int = 7) -> ConventionSearchResult:
    """Screen every candidate convention with the three arbiters."""
    t0 = time.perf_counter()
    levels, basis = _algebraic_instance(seed)
    P = conjugation_matrix(basis)
    opts = [candidate_options(f) for f in range(len(FAMILIES))]
    n_candidates = int(np.prod([len(o) for o in opts]))
    mats = {(f, k): _family_matrix(basis, levels, f, o)
            for f in range(len(FAMILIES)) for k, o in enumerate(opts[f])}

    lower = [i for i, f in enumerate(FAMILIES) if f.tag == "tier-lowering"]
    raise_ = [i for i, f in enumerate(FAMILIES) if f.tag == "tier-raising"]
    low_conj, low_ok = _group_survivors(mats, lower, P, basis, with_trace=True)
    up_conj, up_ok = _group_survivors(mats, raise_, P, basis, with_trace=True)
    counts = {
        "candidates": n_candidates,
        "conjugation_pass": len(low_conj) * len(up_conj),
        "conjugation_and_trace_pass": len(low_ok) * len(up_ok),
    }

    survivors = []
    for lo, up in itertools.product(low_ok, up_ok):
        choice = [None] * len(FAMILIES)
        for f, k in zip(lower, lo):
            choice[f] = opts[f][k]
        for f, k in zip(raise_, up):
            choice[f] = opts[f][k]
        survivors.append(Convention(tuple(choice)))

    for inst in _oracle_instances():
        ref = _oracle_occupations(inst)
        kept = []
        for conv in survivors:
            err = float(np.max(np.abs(_dqme_occupations(conv, inst) - ref)))
            if err <= ORACLE_TOL:
                kept.append(conv)
        survivors = kept
        counts[f"oracle_pass[{inst.name}]"] = len(survivors)

    arbiters = {}
    selected = survivors[0] if len(survivors) == 1 else None
    if selected is not None:
        full = build_liouvillian(SystemSpec(n_orbitals=2, eps0=0.4, u0=1.1), levels, basis, selected)
        arbiters["trace_residual"] = trace_residual(full.matrix, basis)
        arbiters["conjugation_residual"] = conjugation_residual(full.matrix, basis)
        errs = []
        for inst in _oracle_instances():
            errs.append(float(np.max(np.abs(_dqme_occupations(selected, inst) - _oracle_occupations(inst)))))
        arbiters["oracle_max_error"] = max(errs)
        arbiters["trace_pass"] = arbiters["trace_residual"] <= ARBITER_TOL
        arbiters["conjugation_pass"] = arbiters["conjugation_residual"] <= ARBITER_TOL
        arbiters["oracle_pass"] = arbiters["oracle_max_error"] <= ORACLE_TOL
    res = ConventionSearchResult(selected, n_candidates, counts, arbiters, time.perf_counter() - t0)
    log.info("convention search: %s", counts)
    return res


@functools.lru_cache(maxsize=1)
def _cached_search() -> ConventionSearchResult:
    return search_conventions()


def selected_convention() -> Convention:
    """The unique convention passing all arbiters; raises if not unique."""
    res = _cached_search()
    if res.selected is None:
        n = res.stage_counts.get(list(res.stage_counts)[-1], 0)
        raise DqmeError(f"convention search left {n} candidates (need exactly one): {res.stage_counts}")
    return res.selected


def search_result() -> ConventionSearchResult:
    """Cached result of the build-time search."""
    return _cached_search()
