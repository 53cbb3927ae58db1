"""
Reduced density tensor (RDT) state space and the fermionic DQME generator.

A basis state is the bit string ``(n, n'; m-, m+)``: system occupations on
the ket and bra side, then one bit per dissipaton level for each charge.
States are stored as integer keys whose most significant bit is the first
entry of that string, so sorting keys gives the lexicographic order with
the all-zeros state first.

Every elementary creation/annihilation operator toggles one bit and picks
up the Jordan-Wigner sign ``(-1)^(occupied bits preceding it)`` over this
global ordering.
"""
from __future__ import annotations

import hashlib
import logging
import warnings
from dataclasses import dataclass, field
from itertools import combinations
from typing import Iterable, Literal, Sequence

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph

from .bath import ExponentialMode

log = logging.getLogger(__name__)

__all__ = [
    "DqmeError",
    "SystemSpec",
    "DissipatonLevel",
    "RdtBasis",
    "FamilyConvention",
    "Convention",
    "FAMILIES",
    "Liouvillian",
    "levels_from_modes",
    "enumerate_basis",
    "reachability_filter",
    "build_liouvillian",
    "apply_liouvillian",
    "block_swap_partner",
    "occupation_expectation",
    "reservoir_current",
    "trace_rdo",
    "vacuum_rdt",
    "reduced_density_matrix",
]

DROP_TOL = 1e-15


class DqmeError(ValueError):
    """Invalid basis/generator input, capacity overflow or a failed convention."""


@dataclass(frozen=True)
class SystemSpec:
    """Impurity with one (spinless) or two (spin up/down) orbitals.

    Before ``t_quench`` the energies are ``eps0`` and ``u0``; afterwards they
    are shifted by ``d_eps`` and ``d_u``.  ``mu_pre`` / ``mu_post`` are the
    reservoir chemical potentials on either side of the quench.
    """

    n_orbitals: int = 2
    eps0: float = 2.0
    u0: float = 4.0
    d_eps: float = 0.0
    d_u: float = 0.0
    t_quench: float = 0.0
    mu_pre: tuple[float, ...] = (0.0, 0.0)
    mu_post: tuple[float, ...] = (0.0, 0.0)

    def __post_init__(self):
        if self.n_orbitals not in (1, 2):
            raise DqmeError("only one or two system spin-orbitals are supported")

    def energy(self, occ: np.ndarray, *, post: bool = True) -> np.ndarray:
        """Diagonal energy of occupation rows ``occ`` (shape ``(..., n_orbitals)``)."""
        occ = np.asarray(occ)
        eps = self.eps0 + (self.d_eps if post else 0.0)
        u = self.u0 + (self.d_u if post else 0.0)
        e = eps * occ.sum(axis=-1)
        if self.n_orbitals == 2:
            e = e + u * occ[..., 0] * occ[..., 1]
        return e.astype(float)

    def hamiltonian(self, *, post: bool = True) -> np.ndarray:
        """System Hamiltonian in the occupation basis (orbital 0 most significant)."""
        occ = _occupation_table(self.n_orbitals)
        return np.diag(self.energy(occ, post=post)).astype(complex)


def _occupation_table(n: int) -> np.ndarray:
    idx = np.arange(2 ** n)
    return ((idx[:, None] >> (n - 1 - np.arange(n))[None, :]) & 1).astype(np.int64)


@dataclass(frozen=True)
class DissipatonLevel:
    """Level ``j``: the pair of sigma = -/+ modes sharing (reservoir, orbital, pole)."""

    orbital: int
    reservoir: int
    pole: int
    eta_minus: complex
    eta_plus: complex
    gamma_minus: complex
    gamma_plus: complex
    kind: str


def levels_from_modes(modes: Sequence[ExponentialMode]) -> list[DissipatonLevel]:
    """Pair sigma = -1 and +1 modes into dissipaton levels, in first-seen order."""
    order: list[tuple] = []
    pairs: dict[tuple, dict[int, ExponentialMode]] = {}
    for m in modes:
        key = (m.reservoir, m.orbital, m.pole)
        if key not in pairs:
            order.append(key)
            pairs[key] = {}
        if m.sigma in pairs[key]:
            raise DqmeError(f"duplicate sigma={m.sigma} mode for level {key}")
        pairs[key][m.sigma] = m
    out = []
    for key in order:
        pm = pairs[key]
        if set(pm) != {-1, +1}:
            raise DqmeError(f"level {key} lacks one of the sigma = -/+ modes")
        mm, mp = pm[-1], pm[+1]
        out.append(DissipatonLevel(key[1], key[0], key[2], mm.eta, mp.eta,
                                   mm.gamma, mp.gamma, mm.kind))
    return out


# ---------------------------------------------------------------------------
# basis


@dataclass(frozen=True, eq=False)
class RdtBasis:
    """Ordered RDT states with block-swap partners.

    ``keys`` is sorted ascending; ``partner[i]`` is the ordinal of the swapped
    state (or -1 when it is not in the basis) and ``phase[i]`` the sign
    ``(-1)^(floor(M-/2) + floor(M+/2))``.
    """

    n_sys: int
    n_levels: int
    m_max: int
    keys: np.ndarray
    partner: np.ndarray = field(repr=False)
    phase: np.ndarray = field(repr=False)

    @property
    def width(self) -> int:
        return 2 * self.n_sys + 2 * self.n_levels

    @property
    def size(self) -> int:
        return self.keys.size

    def __len__(self) -> int:
        return self.keys.size

    def pos_n(self, u: int) -> int:
        return u

    def pos_np(self, u: int) -> int:
        return self.n_sys + u

    def pos_m(self, j: int, sigma: int) -> int:
        base = 2 * self.n_sys + (0 if sigma < 0 else self.n_levels)
        return base + j

    def bits(self) -> np.ndarray:
        """(size, width) array of 0/1 occupations in global order."""
        shifts = self.width - 1 - np.arange(self.width)
        return ((self.keys[:, None] >> shifts[None, :]) & 1).astype(np.uint8)

    def field_bits(self, name: Literal["n", "np", "mm", "mp"]) -> np.ndarray:
        b = self.bits()
        s, e = self.n_sys, self.n_levels
        sl = {"n": slice(0, s), "np": slice(s, 2 * s), "mm": slice(2 * s, 2 * s + e),
              "mp": slice(2 * s + e, 2 * s + 2 * e)}[name]
        return b[:, sl]

    def sys_index(self) -> tuple[np.ndarray, np.ndarray]:
        """Integer labels of the ket and bra system configurations."""
        s, e = self.n_sys, self.n_levels
        mask = (1 << s) - 1
        ket = (self.keys >> (s + 2 * e)) & mask
        bra = (self.keys >> (2 * e)) & mask
        return ket, bra

    def m_minus(self) -> np.ndarray:
        return np.bitwise_count((self.keys >> self.n_levels) & ((1 << self.n_levels) - 1)).astype(int)

    def m_plus(self) -> np.ndarray:
        return np.bitwise_count(self.keys & ((1 << self.n_levels) - 1)).astype(int)

    def tier(self) -> np.ndarray:
        return np.bitwise_count(self.keys & ((1 << (2 * self.n_levels)) - 1)).astype(int)

    def vacuum_diagonal(self) -> np.ndarray:
        ket, bra = self.sys_index()
        return (self.tier() == 0) & (ket == bra)

    def trace_weights(self) -> np.ndarray:
        return self.vacuum_diagonal().astype(float)

    def lookup(self, keys) -> np.ndarray:
        """Ordinals of ``keys`` (-1 where absent)."""
        keys = np.asarray(keys, dtype=np.int64)
        pos = np.searchsorted(self.keys, keys)
        pos_c = np.minimum(pos, self.keys.size - 1)
        found = self.keys[pos_c] == keys
        return np.where(found, pos_c, -1)

    def index_of(self, key: int) -> int:
        i = int(self.lookup(np.array([key]))[0])
        if i < 0:
            raise KeyError(key)
        return i

    def key_of(self, n: Sequence[int], n_prime: Sequence[int],
               m_minus: Sequence[int], m_plus: Sequence[int]) -> int:
        bits = list(n) + list(n_prime) + list(m_minus) + list(m_plus)
        if len(bits) != self.width:
            raise DqmeError("bit string has the wrong length")
        k = 0
        for b in bits:
            k = (k << 1) | int(b)
        return k

    @property
    def hash(self) -> str:
        h = hashlib.sha256()
        h.update(np.array([self.n_sys, self.n_levels, self.m_max], dtype=np.int64).tobytes())
        h.update(np.ascontiguousarray(self.keys, dtype=np.int64).tobytes())
        return h.hexdigest()[:16]

    def swap_closed(self) -> bool:
        return bool(np.all(self.partner >= 0))


def _swap_keys(keys: np.ndarray, n_sys: int, n_levels: int) -> np.ndarray:
    s, e = n_sys, n_levels
    ms, me = (1 << s) - 1, (1 << e) - 1
    ket = (keys >> (s + 2 * e)) & ms
    bra = (keys >> (2 * e)) & ms
    mm = (keys >> e) & me
    mp = keys & me
    return (bra << (s + 2 * e)) | (ket << (2 * e)) | (mp << e) | mm


def _swap_phase(keys: np.ndarray, n_levels: int) -> np.ndarray:
    me = (1 << n_levels) - 1
    mm = np.bitwise_count((keys >> n_levels) & me).astype(np.int64)
    mp = np.bitwise_count(keys & me).astype(np.int64)
    return np.where(((mm // 2 + mp // 2) % 2) == 0, 1, -1).astype(np.int8)


def _make_basis(keys: np.ndarray, n_sys: int, n_levels: int, m_max: int) -> RdtBasis:
    keys = np.unique(np.asarray(keys, dtype=np.int64))
    swapped = _swap_keys(keys, n_sys, n_levels)
    pos = np.searchsorted(keys, swapped)
    pos_c = np.minimum(pos, keys.size - 1)
    partner = np.where(keys[pos_c] == swapped, pos_c, -1)
    return RdtBasis(n_sys, n_levels, m_max, keys, partner, _swap_phase(keys, n_levels))


def enumerate_basis(n_sys: int, n_levels: int, m_max: int, *, cap: int = 2_000_000) -> RdtBasis:
    """All states with total dissipaton occupation ``M <= m_max``."""
    if m_max < 0:
        raise DqmeError("m_max must be >= 0")
    if 2 * n_sys + 2 * n_levels > 62:
        raise DqmeError("bit string too long for 64-bit state keys")
    nd = 2 * n_levels
    top = min(m_max, nd)
    from math import comb
    count = (4 ** n_sys) * sum(comb(nd, k) for k in range(top + 1))
    if count > cap:
        raise DqmeError(f"basis would hold {count} states, above the cap of {cap}")
    dis = [0]
    for k in range(1, top + 1):
        for combo in combinations(range(nd), k):
            v = 0
            for p in combo:
                v |= 1 << (nd - 1 - p)
            dis.append(v)
    dis = np.array(dis, dtype=np.int64)
    sysk = np.arange(4 ** n_sys, dtype=np.int64)
    keys = (sysk[:, None] << nd) | dis[None, :]
    return _make_basis(keys.ravel(), n_sys, n_levels, m_max)


def block_swap_partner(bits: Sequence[int], n_sys: int, n_levels: int) -> tuple[tuple[int, ...], int]:
    """Swap ``(n, n'; m-, m+) -> (n', n; m+, m-)`` and return the Hermiticity phase."""
    b = tuple(int(x) for x in bits)
    s, e = n_sys, n_levels
    if len(b) != 2 * s + 2 * e:
        raise DqmeError("bit string has the wrong length")
    n, npr, mm, mp = b[:s], b[s:2 * s], b[2 * s:2 * s + e], b[2 * s + e:]
    phase = (-1) ** (sum(mm) // 2 + sum(mp) // 2)
    return npr + n + mp + mm, phase


# ---------------------------------------------------------------------------
# generator: term families and their realization


@dataclass(frozen=True)
class FamilyConvention:
    """How one Eq.-of-motion term family is realized on bit strings.

    ``string`` picks the dissipaton bit (``m-`` or ``m+``) that the family's
    ``b``/``b^dagger`` toggles; ``swap_order`` applies the two elementary
    toggles in the reverse of the textual order; ``system_parity``
    multiplies by the parity of the system bits the dissipaton or bra
    toggle passes over (``|n| + |n'|`` for ket-side system operators,
    ``|n|`` for bra-side ones) in the source state.
    """

    string: Literal["minus", "plus"]
    swap_order: bool
    system_parity: bool

    def as_tuple(self) -> tuple:
        return (self.string, self.swap_order, self.system_parity)


@dataclass(frozen=True)
class _Family:
    name: str
    tag: Literal["tier-lowering", "tier-raising"]
    sign: int
    coeff: Literal["one", "eta_minus", "conj_eta_plus", "eta_plus", "conj_eta_minus"]
    left: tuple[tuple[str, bool], ...]
    right: tuple[tuple[str, bool], ...]

    @property
    def system_side(self) -> str:
        return "L" if any(op == "c" for op, _ in self.left) else "R"


# textual operator strings; (operator, dagger)
FAMILIES: tuple[_Family, ...] = (
    _Family("cdag.b.rho", "tier-lowering", +1, "one", (("c", True), ("b", False)), ()),
    _Family("b.rho.cdag", "tier-lowering", -1, "one", (("b", False),), (("c", True),)),
    _Family("c.rho.bdag", "tier-lowering", +1, "one", (("c", False),), (("b", True),)),
    _Family("rho.bdag.c", "tier-lowering", -1, "one", (), (("b", True), ("c", False))),
    _Family("c.bdag.rho", "tier-raising", -1, "eta_minus", (("c", False), ("b", True)), ()),
    _Family("bdag.rho.c", "tier-raising", -1, "conj_eta_plus", (("b", True),), (("c", False),)),
    _Family("cdag.rho.b", "tier-raising", +1, "eta_plus", (("c", True),), (("b", False),)),
    _Family("rho.b.cdag", "tier-raising", +1, "conj_eta_minus", (), (("b", False), ("c", True))),
)
FAMILY_NAMES = tuple(f.name for f in FAMILIES)


@dataclass(frozen=True)
class Convention:
    """One realization choice per term family, keyed by family name."""

    families: tuple[FamilyConvention, ...]

    def __post_init__(self):
        if len(self.families) != len(FAMILIES):
            raise DqmeError("a convention needs one entry per term family")

    def as_dict(self) -> dict:
        return {f.name: dict(zip(("string", "swap_order", "system_parity"), c.as_tuple()))
                for f, c in zip(FAMILIES, self.families)}

    @classmethod
    def from_dict(cls, d: dict) -> "Convention":
        return cls(tuple(FamilyConvention(d[f.name]["string"], bool(d[f.name]["swap_order"]),
                                          bool(d[f.name]["system_parity"])) for f in FAMILIES))


def _coefficient(level: DissipatonLevel, coeff: str) -> complex:
    return {
        "one": 1.0 + 0j,
        "eta_minus": level.eta_minus,
        "conj_eta_plus": np.conj(level.eta_plus),
        "eta_plus": level.eta_plus,
        "conj_eta_minus": np.conj(level.eta_minus),
    }[coeff]


def _toggle(keys: np.ndarray, width: int, pos: int, create: bool):
    """Apply one JW creation/annihilation on bit ``pos``; returns (keys, sign, valid)."""
    shift = width - 1 - pos
    occ = (keys >> shift) & 1
    valid = occ == (0 if create else 1)
    sign = 1 - 2 * (np.bitwise_count(keys >> (shift + 1)) & 1).astype(np.int64)
    return keys ^ (np.int64(1) << shift), sign, valid


def family_entries(basis: RdtBasis, family: _Family, level_index: int, orbital: int,
                   conv: FamilyConvention):
    """Coefficient-free (row, col, sign) triples of one family for one level.

    Columns are source states, rows the states the term writes into;
    entries whose target falls outside ``basis`` are dropped.
    """
    width = basis.width
    sigma = -1 if conv.string == "minus" else +1
    ops = [("L",) + op for op in reversed(family.left)] + [("R",) + op for op in family.right]
    if conv.swap_order:
        ops = ops[::-1]
    keys = basis.keys.copy()
    sign = np.ones(keys.size, dtype=np.int64)
    valid = np.ones(keys.size, dtype=bool)
    for side, op, dag in ops:
        if op == "c":
            pos = basis.pos_n(orbital) if side == "L" else basis.pos_np(orbital)
        else:
            pos = basis.pos_m(level_index, sigma)
        create = dag if side == "L" else not dag
        keys, s, v = _toggle(keys, width, pos, create)
        sign *= s
        valid &= v
    if conv.system_parity:
        src = basis.keys
        s, e = basis.n_sys, basis.n_levels
        ms = (1 << s) - 1
        ket = (src >> (s + 2 * e)) & ms
        bra = (src >> (2 * e)) & ms
        count = np.bitwise_count(ket) + (np.bitwise_count(bra) if family.system_side == "L" else 0)
        sign *= 1 - 2 * (count.astype(np.int64) & 1)
    cols = np.nonzero(valid)[0]
    rows = basis.lookup(keys[cols])
    inside = rows >= 0
    return rows[inside], cols[inside], sign[cols[inside]], int((~inside).sum())


@dataclass(eq=False)
class Liouvillian:
    """Sparse DQME generator over ``basis`` with per-entry provenance tags.

    ``rows/cols/vals`` hold the un-summed entries; ``family`` is the term
    family name per entry ("hamiltonian", "damping" or one of
    :data:`FAMILY_NAMES`) and ``alpha`` the reservoir index of coupling
    entries (-1 otherwise).
    """

    basis: RdtBasis
    matrix: sparse.csr_matrix
    rows: np.ndarray
    cols: np.ndarray
    vals: np.ndarray
    family: np.ndarray
    alpha: np.ndarray
    convention: Convention
    dropped: int = 0
    _by_alpha: dict = field(default_factory=dict, repr=False)

    @property
    def shape(self):
        return self.matrix.shape

    def reservoir_part(self, alpha: int) -> sparse.csr_matrix:
        if alpha not in self._by_alpha:
            sel = self.alpha == alpha
            if not np.any(sel):
                raise DqmeError(f"no coupling entries tagged with reservoir {alpha}")
            n = self.basis.size
            self._by_alpha[alpha] = sparse.csr_matrix(
                (self.vals[sel], (self.rows[sel], self.cols[sel])), shape=(n, n))
        return self._by_alpha[alpha]

    @property
    def reservoirs(self) -> list[int]:
        return sorted(int(a) for a in np.unique(self.alpha) if a >= 0)

    def structure(self) -> sparse.csr_matrix:
        """0/1 pattern of every assembled entry, including numerically-zero ones."""
        n = self.basis.size
        return sparse.csr_matrix((np.ones(self.rows.size), (self.rows, self.cols)), shape=(n, n))

    def triplets(self):
        """Iterate ``(row, col, re, im, family, alpha)`` over un-summed entries."""
        for r, c, v, f, a in zip(self.rows, self.cols, self.vals, self.family, self.alpha):
            yield int(r), int(c), float(v.real), float(v.imag), str(f), int(a)


def build_liouvillian(sys: SystemSpec, levels: Sequence[DissipatonLevel], basis: RdtBasis,
                      convention: Convention | None = None, *, post_quench: bool = True,
                      check: bool = False, tol: float = 1e-12) -> Liouvillian:
    """Assemble the DQME generator on ``basis``.

    With ``convention=None`` the convention chosen by
    :func:`dissipaton_pinn.convention.selected_convention` is used.  With
    ``check=True`` the trace-row and conjugation arbiters are verified on
    the assembled matrix and :class:`DqmeError` is raised on failure.
    """
    if convention is None:
        from .convention import selected_convention
        convention = selected_convention()
    if len(levels) != basis.n_levels:
        raise DqmeError(f"basis has {basis.n_levels} levels but {len(levels)} were given")
    if basis.n_sys != sys.n_orbitals:
        raise DqmeError("basis and system disagree on the number of orbitals")
    n = basis.size
    R, C, V, F, A = [], [], [], [], []

    ket, bra = basis.sys_index()
    occ = _occupation_table(basis.n_sys)
    energies = sys.energy(occ, post=post_quench)
    diag = -1j * (energies[ket] - energies[bra])
    R.append(np.arange(n)); C.append(np.arange(n)); V.append(diag)
    F.append(np.full(n, "hamiltonian", dtype=object)); A.append(np.full(n, -1))

    mm = basis.field_bits("mm").astype(float)
    mp = basis.field_bits("mp").astype(float)
    gm = np.array([lv.gamma_minus for lv in levels], dtype=complex)
    gp = np.array([lv.gamma_plus for lv in levels], dtype=complex)
    damp = -(mm @ gm + mp @ gp) if levels else np.zeros(n, complex)
    R.append(np.arange(n)); C.append(np.arange(n)); V.append(damp)
    F.append(np.full(n, "damping", dtype=object)); A.append(np.full(n, -1))

    dropped = 0
    for fam, conv in zip(FAMILIES, convention.families):
        for j, lv in enumerate(levels):
            rows, cols, sign, nd = family_entries(basis, fam, j, lv.orbital, conv)
            dropped += nd
            val = -1j * fam.sign * _coefficient(lv, fam.coeff) * sign
            R.append(rows); C.append(cols); V.append(val.astype(complex))
            F.append(np.full(rows.size, fam.name, dtype=object))
            A.append(np.full(rows.size, lv.reservoir))

    rows = np.concatenate(R)
    cols = np.concatenate(C)
    vals = np.concatenate(V).astype(complex)
    fam_tags = np.concatenate(F)
    alpha = np.concatenate(A).astype(int)
    mat = sparse.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
    mat.sum_duplicates()
    mat.data[np.abs(mat.data) < DROP_TOL] = 0
    mat.eliminate_zeros()
    L = Liouvillian(basis, mat, rows, cols, vals, fam_tags, alpha, convention, dropped)
    if check:
        from .convention import trace_residual, conjugation_residual
        t = trace_residual(L.matrix, basis)
        c = conjugation_residual(L.matrix, basis)
        if t > tol or c > tol:
            raise DqmeError(f"convention fails the arbiters (trace {t:.2e}, conjugation {c:.2e})")
    return L


def reachability_filter(basis: RdtBasis, structure, seeds: Iterable[int]) -> RdtBasis:
    """Keep only states connected to ``seeds`` through nonzero generator entries.

    ``structure`` is a sparse matrix (or a :class:`Liouvillian`) over
    ``basis``; edges are followed in both directions so the kept space is
    invariant under the generator and its transpose.
    """
    if isinstance(structure, Liouvillian):
        structure = structure.structure()
    seeds = np.unique(np.asarray(list(seeds), dtype=int))
    if seeds.size == 0:
        raise DqmeError("reachability filter needs at least one seed state")
    if np.any(seeds < 0) or np.any(seeds >= basis.size):
        raise DqmeError("seed ordinal outside the basis")
    g = sparse.csr_matrix(structure, copy=True)
    g.data = np.ones_like(g.data, dtype=float)
    g = (g + g.T).tocsr()
    _, labels = csgraph.connected_components(g, directed=False)
    keep = np.isin(labels, np.unique(labels[seeds]))
    return _make_basis(basis.keys[keep], basis.n_sys, basis.n_levels, basis.m_max)


def apply_liouvillian(L: Liouvillian | sparse.spmatrix, rho: np.ndarray) -> np.ndarray:
    """Return ``L @ rho``; ``rho`` may be one RDT vector or a (dim, k) stack."""
    mat = L.matrix if isinstance(L, Liouvillian) else L
    rho = np.asarray(rho)
    if rho.shape[0] != mat.shape[1]:
        raise DqmeError(f"dimension mismatch: generator {mat.shape}, vector {rho.shape}")
    return mat @ rho


# ---------------------------------------------------------------------------
# observables


def trace_rdo(rho: np.ndarray, basis: RdtBasis) -> complex:
    """System trace of the dissipaton-vacuum block."""
    return complex(basis.trace_weights() @ np.asarray(rho))


def vacuum_rdt(basis: RdtBasis, rho_sys: np.ndarray) -> np.ndarray:
    """Embed a system density matrix in the dissipaton vacuum block."""
    rho_sys = np.asarray(rho_sys, dtype=complex)
    dim = 2 ** basis.n_sys
    if rho_sys.shape != (dim, dim):
        raise DqmeError(f"system density matrix must be {dim}x{dim}")
    out = np.zeros(basis.size, dtype=complex)
    vac = basis.tier() == 0
    ket, bra = basis.sys_index()
    out[vac] = rho_sys[ket[vac], bra[vac]]
    return out


def reduced_density_matrix(rho: np.ndarray, basis: RdtBasis) -> np.ndarray:
    """Dissipaton-vacuum block as a system density matrix."""
    dim = 2 ** basis.n_sys
    out = np.zeros((dim, dim), dtype=complex)
    vac = basis.tier() == 0
    ket, bra = basis.sys_index()
    out[ket[vac], bra[vac]] = np.asarray(rho)[vac]
    return out


def _real_or_warn(value: complex, what: str, tol: float = 1e-8) -> float:
    if abs(value.imag) > tol:
        warnings.warn(f"{what} has imaginary residue {value.imag:.3e}", RuntimeWarning, stacklevel=3)
    return float(value.real)


def occupation_expectation(rho: np.ndarray, basis: RdtBasis, orbital: int) -> float:
    """``tr_s(n_u rho_0)`` from the vacuum block."""
    if not 0 <= orbital < basis.n_sys:
        raise DqmeError(f"orbital {orbital} outside the system")
    w = basis.trace_weights() * basis.field_bits("n")[:, orbital]
    return _real_or_warn(complex(w @ np.asarray(rho)), "occupation")


def _charge_weights(basis: RdtBasis) -> np.ndarray:
    return basis.trace_weights() * basis.field_bits("n").sum(axis=1)


def reservoir_current(rho: np.ndarray, L: Liouvillian, alpha: int) -> float:
    """Particle current from reservoir ``alpha`` into the impurity.

    Defined as ``tr_s[N_sys P_0 (L_alpha rho)]`` where ``L_alpha`` keeps only
    the coupling entries tagged with ``alpha``; summed over reservoirs it
    equals ``d<N_sys>/dt``.
    """
    if alpha not in L.reservoirs:
        raise DqmeError(f"unknown reservoir tag {alpha}")
    val = _charge_weights(L.basis) @ (L.reservoir_part(alpha) @ np.asarray(rho))
    return _real_or_warn(complex(val), "current")


def current_weights(L: Liouvillian, alpha: int) -> np.ndarray:
    """Row vector ``v`` with ``reservoir_current(rho) == Re(v @ rho)``."""
    return L.reservoir_part(alpha).T @ _charge_weights(L.basis)
