"""
Reference propagation of the DQME and an exact discretized-bath oracle.

The reference integrator is fixed-step RK4 on ``d rho/dt = L rho``.  The
oracle treats a handful of discrete bath levels exactly: the full
system + bath density matrix is evolved with the eigendecomposition of the
many-body Hamiltonian, which gives reduced observables with no hierarchy
truncation at all.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .bath import ExponentialMode
from .dqme import (Liouvillian, SystemSpec, occupation_expectation,
                   reservoir_current, trace_rdo)

log = logging.getLogger(__name__)

__all__ = [
    "ReferenceError",
    "Trajectory",
    "DiscreteLevel",
    "rk4_step",
    "propagate_reference",
    "step_size_audit",
    "default_observables",
    "discrete_bath_oracle",
    "discrete_level_modes",
    "fermi",
    "MAX_ORACLE_MODES",
]

MAX_ORACLE_MODES = 12


class ReferenceError(RuntimeError):
    """Non-finite step, trace drift or an oversized oracle."""


@dataclass
class Trajectory:
    """Observables on a strictly increasing time grid.

    ``columns`` maps observable names to arrays of the same length as
    ``t``; ``states`` optionally stores the full RDT at each sample.
    """

    t: np.ndarray
    columns: dict[str, np.ndarray]
    states: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float)
        if self.t.ndim != 1 or (self.t.size > 1 and np.any(np.diff(self.t) <= 0)):
            raise ReferenceError("trajectory times must be strictly increasing")
        for k, v in self.columns.items():
            v = np.asarray(v)
            if v.shape != self.t.shape:
                raise ReferenceError(f"column {k!r} has shape {v.shape}, expected {self.t.shape}")
            if not np.all(np.isfinite(v)):
                raise ReferenceError(f"column {k!r} holds non-finite values")
            self.columns[k] = v

    def __getitem__(self, key: str) -> np.ndarray:
        return self.columns[key]

    def __len__(self) -> int:
        return self.t.size


def rk4_step(L, rho: np.ndarray, dt: float) -> np.ndarray:
    """One classical RK4 step for ``d rho/dt = L rho``."""
    if not dt > 0:
        raise ReferenceError("dt must be positive")
    mat = L.matrix if isinstance(L, Liouvillian) else L
    k1 = mat @ rho
    k2 = mat @ (rho + 0.5 * dt * k1)
    k3 = mat @ (rho + 0.5 * dt * k2)
    k4 = mat @ (rho + dt * k3)
    out = rho + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    if not np.all(np.isfinite(out)):
        raise ReferenceError("RK4 step produced non-finite values")
    return out


def default_observables(L: Liouvillian) -> dict[str, Callable[[np.ndarray], complex | float]]:
    """trace (complex), n_up and one current per reservoir (I_L, I_R for two)."""
    basis = L.basis
    obs: dict[str, Callable] = {
        "trace": lambda r: trace_rdo(r, basis),
        "n_up": lambda r: occupation_expectation(r, basis, 0),
    }
    names = {0: "I_L", 1: "I_R"} if len(L.reservoirs) == 2 else {}
    for a in L.reservoirs:
        obs[names.get(a, f"I_{a}")] = (lambda r, a=a: reservoir_current(r, L, a))
    return obs


def propagate_reference(L: Liouvillian, rho0: np.ndarray, dt: float, T: float,
                        observables: Mapping[str, Callable] | None = None, *,
                        sample_dt: float | None = None, keep_states: bool = False,
                        drift_tol: float = 1e-6) -> Trajectory:
    """Integrate from 0 to ``T`` with fixed RK4 steps and sample observables.

    The step is shrunk so that ``T`` (and every sample time, when
    ``sample_dt`` is given) is hit exactly.  Raises
    :class:`ReferenceError` when the trace drifts by more than
    ``drift_tol``.
    """
    if not T > 0 or not dt > 0:
        raise ReferenceError("dt and T must be positive")
    if observables is None:
        observables = default_observables(L)
    sample_dt = dt if sample_dt is None else sample_dt
    n_samples = int(round(T / sample_dt))
    if n_samples < 1 or abs(n_samples * sample_dt - T) > 1e-9 * T:
        raise ReferenceError("T must be an integer multiple of the sampling interval")
    sub = max(1, int(np.ceil(sample_dt / dt - 1e-9)))
    h = sample_dt / sub

    mat = L.matrix
    rho = np.asarray(rho0, dtype=complex).copy()
    tr0 = trace_rdo(rho, L.basis)
    times = np.linspace(0.0, T, n_samples + 1)
    cols = {k: [] for k in observables}
    states = [] if keep_states else None

    def record(r):
        for k, f in observables.items():
            cols[k].append(f(r))
        if keep_states:
            states.append(r.copy())

    record(rho)
    for i in range(n_samples):
        for _ in range(sub):
            rho = rk4_step(mat, rho, h)
        drift = abs(trace_rdo(rho, L.basis) - tr0)
        if drift > drift_tol:
            raise ReferenceError(f"trace drift {drift:.3e} at t={times[i + 1]:.4g} exceeds {drift_tol}")
        record(rho)
    columns = {k: np.asarray(v) for k, v in cols.items()}
    return Trajectory(times, columns, np.array(states) if keep_states else None,
                      {"dt": h, "T": T})


def step_size_audit(L: Liouvillian, rho0: np.ndarray, dt: float, T: float,
                    observables: Mapping[str, Callable] | None = None, *,
                    sample_dt: float | None = None) -> float:
    """Largest observable change when the step is halved."""
    sample_dt = dt if sample_dt is None else sample_dt
    a = propagate_reference(L, rho0, dt, T, observables, sample_dt=sample_dt)
    b = propagate_reference(L, rho0, dt / 2, T, observables, sample_dt=sample_dt)
    return max(float(np.max(np.abs(a[k] - b[k]))) for k in a.columns)


# ---------------------------------------------------------------------------
# discrete-bath oracle


@dataclass(frozen=True)
class DiscreteLevel:
    """One bath level at energy ``eps`` hopping to system orbital ``orbital``."""

    eps: float
    hopping: complex
    orbital: int = 0
    reservoir: int = 0


def fermi(x: np.ndarray | float) -> np.ndarray:
    return 0.5 * (1.0 - np.tanh(0.5 * np.asarray(x, dtype=float)))


def discrete_level_modes(levels: Sequence[DiscreteLevel], beta: float, mu: float) -> list[ExponentialMode]:
    """Exponential modes of a discrete bath: ``C^sigma(t) = sum |t_k|^2 f^sigma e^{sigma i eps_k t}``.

    The amplitudes are the physical correlation weights, so they are the same
    whichever spectral-density prefactor convention the continuum bath uses.
    Modes are ordered level by level, sigma = -1 before +1.
    """
    out = []
    for k, lv in enumerate(levels):
        f = float(fermi(beta * (lv.eps - mu))) if np.isfinite(beta) else float(lv.eps < mu)
        w = abs(lv.hopping) ** 2
        for sigma in (-1, +1):
            fs = f if sigma > 0 else 1.0 - f
            out.append(ExponentialMode(sigma=sigma, reservoir=lv.reservoir, orbital=lv.orbital,
                                       pole=k, eta=complex(w * fs), gamma=complex(-sigma * 1j * lv.eps),
                                       kind="discrete-level", label=f"d{k}"))
    return out


def _jw_annihilators(n_modes: int) -> list[np.ndarray]:
    """Dense annihilation operators, mode 0 most significant in the basis index."""
    a = np.array([[0.0, 1.0], [0.0, 0.0]])
    z = np.diag([1.0, -1.0])
    eye = np.eye(2)
    ops = []
    for k in range(n_modes):
        m = np.array([[1.0]])
        for i in range(n_modes):
            m = np.kron(m, z if i < k else (a if i == k else eye))
        ops.append(m)
    return ops


def discrete_bath_oracle(sys: SystemSpec, levels: Sequence[DiscreteLevel], beta: float, mu: float,
                         T: float, dt: float, rho_sys0: np.ndarray | None = None,
                         *, post_quench: bool = True) -> Trajectory:
    """Exact reduced dynamics of the system coupled to discrete levels.

    The initial state is ``rho_sys0`` (system occupation basis, orbital 0
    most significant) times the thermal state of each bath level.  Returns
    columns ``trace``, ``n_<u>`` per orbital and ``N_total`` (total particle
    number, system plus bath).
    """
    ns = sys.n_orbitals
    nm = ns + len(levels)
    if nm > MAX_ORACLE_MODES:
        raise ReferenceError(f"oracle limited to {MAX_ORACLE_MODES} fermionic modes, got {nm}")
    if any(not 0 <= lv.orbital < ns for lv in levels):
        raise ReferenceError("bath level couples to a nonexistent orbital")
    dim_s = 2 ** ns
    if rho_sys0 is None:
        rho_sys0 = np.zeros((dim_s, dim_s), complex)
        rho_sys0[0, 0] = 1.0
    rho_sys0 = np.asarray(rho_sys0, dtype=complex)

    c = _jw_annihilators(nm)
    num = [ck.T @ ck for ck in c]
    eps = sys.eps0 + (sys.d_eps if post_quench else 0.0)
    u = sys.u0 + (sys.d_u if post_quench else 0.0)
    H = sum(eps * num[k] for k in range(ns))
    if ns == 2:
        H = H + u * num[0] @ num[1]
    for k, lv in enumerate(levels):
        d = c[ns + k]
        cu = c[lv.orbital]
        H = H + lv.eps * num[ns + k]
        hop = lv.hopping * cu.T @ d
        H = H + hop + hop.conj().T
    H = np.asarray(H, dtype=complex)

    rho_b = np.array([[1.0]])
    for lv in levels:
        f = float(fermi(beta * (lv.eps - mu))) if np.isfinite(beta) else float(lv.eps < mu)
        rho_b = np.kron(rho_b, np.diag([1.0 - f, f]))
    rho0 = np.kron(rho_sys0, rho_b)

    w, v = np.linalg.eigh(H)
    r0 = v.conj().T @ rho0 @ v
    n_steps = int(round(T / dt))
    if n_steps < 1 or abs(n_steps * dt - T) > 1e-9 * T:
        raise ReferenceError("T must be an integer multiple of dt")
    times = np.linspace(0.0, T, n_steps + 1)
    obs_ops = {f"n_{k}": v.conj().T @ num[k] @ v for k in range(ns)}
    obs_ops["N_total"] = v.conj().T @ sum(num) @ v
    cols: dict[str, list] = {k: [] for k in ["trace", *obs_ops]}
    for t in times:
        ph = np.exp(-1j * w * t)
        rt = ph[:, None] * r0 * ph.conj()[None, :]
        cols["trace"].append(np.trace(rt).real)
        for k, op in obs_ops.items():
            cols[k].append(np.einsum("ij,ji->", op, rt).real)
    return Trajectory(times, {k: np.asarray(x) for k, x in cols.items()},
                      meta={"n_modes": nm})
