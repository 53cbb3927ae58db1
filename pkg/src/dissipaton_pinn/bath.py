"""
Reservoir correlation functions and their exponential-mode decomposition.

Lorentzian hybridization functions are combined with a sum-over-poles
(Pade or Matsubara) representation of the Fermi function, and the resulting
contour integral is closed to give a finite list of exponential modes
``eta * exp(-gamma * t)``.  A direct quadrature of the same integrand is
provided as an independent check.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np
from scipy import integrate
from scipy.linalg import eigh_tridiagonal

__all__ = [
    "BathError",
    "PsdTerms",
    "Reservoir",
    "BathSpec",
    "ExponentialMode",
    "pade_poles_residues",
    "matsubara_poles_residues",
    "fermi_eval_psd",
    "lorentzian",
    "expand_correlation",
    "correlation_from_modes",
    "correlation_quadrature_oracle",
]

Convention = Literal["bare", "pi"]


class BathError(ValueError):
    """Raised for invalid bath input, singular arguments or degenerate modes."""


@dataclass(frozen=True)
class PsdTerms:
    """Dimensionless poles ``xi`` (ascending) and residues of a Fermi-function
    sum-over-poles expansion ``f(x) = 1/2 - sum_p 2 eta_p x / (x^2 + xi_p^2)``."""

    poles: np.ndarray
    residues: np.ndarray

    def __post_init__(self):
        xi = np.asarray(self.poles, dtype=float)
        eta = np.asarray(self.residues, dtype=float)
        if xi.shape != eta.shape or xi.ndim != 1 or xi.size == 0:
            raise BathError("poles and residues must be equal-length 1-d arrays")
        if np.any(xi <= 0) or np.any(np.diff(xi) <= 0):
            raise BathError("poles must be positive, distinct and ascending")
        if np.any(eta <= 0):
            raise BathError("residues must be positive")
        object.__setattr__(self, "poles", xi)
        object.__setattr__(self, "residues", eta)

    def __len__(self) -> int:
        return self.poles.size


def _positive_tridiag_eigs(off: np.ndarray, count: int) -> np.ndarray:
    # spectrum is symmetric about zero; odd sizes carry a round-off "zero"
    lam = eigh_tridiagonal(np.zeros(off.size + 1), off, eigvals_only=True)
    return np.sort(lam)[lam.size - count:]


def pade_poles_residues(n: int) -> PsdTerms:
    """[N-1/N] Pade decomposition of the Fermi function.

    Poles are ``2/lambda`` for the positive eigenvalues ``lambda`` of the
    2N x 2N tridiagonal matrix with off-diagonals ``1/sqrt((2m-1)(2m+1))``;
    the zeros of the numerator come from the (2N-1) x (2N-1) analog with
    off-diagonals ``1/sqrt((2m+1)(2m+3))``.
    """
    if int(n) != n or n < 1:
        raise BathError(f"Pade order must be a positive integer, got {n!r}")
    n = int(n)
    try:
        m = np.arange(1, 2 * n)
        lam = _positive_tridiag_eigs(1.0 / np.sqrt((2 * m - 1) * (2 * m + 1)), n)
        if n > 1:
            m = np.arange(1, 2 * n - 1)
            mu = _positive_tridiag_eigs(1.0 / np.sqrt((2 * m + 1) * (2 * m + 3)), n - 1)
        else:
            mu = np.empty(0)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - LAPACK failure
        raise BathError(f"Pade eigenvalue solve failed for N={n}") from exc
    if np.any(lam <= 0) or np.any(mu <= 0):
        raise BathError(f"Pade eigenvalue solve returned non-positive roots for N={n}")

    xi = np.sort(2.0 / lam)
    zeta2 = (2.0 / mu) ** 2
    xi2 = xi ** 2
    eta = np.empty(n)
    for p in range(n):
        num = np.prod(zeta2 - xi2[p])
        den = np.prod(np.delete(xi2, p) - xi2[p])
        eta[p] = 0.5 * n * (2 * n + 1) * num / den
    return PsdTerms(xi, eta)


def matsubara_poles_residues(n: int) -> PsdTerms:
    """Truncated Matsubara expansion: ``xi_p = (2p - 1) pi``, unit residues."""
    if int(n) != n or n < 1:
        raise BathError(f"Matsubara order must be a positive integer, got {n!r}")
    p = np.arange(1, int(n) + 1)
    return PsdTerms((2 * p - 1) * np.pi, np.ones(p.size))


def fermi_eval_psd(terms: PsdTerms, z, *, tol: float = 1e-10):
    """Evaluate the pole expansion of ``1/(1 + e^z)`` at complex ``z``.

    Pass ``z = sigma * beta * (omega - mu)`` for the sigma-resolved Fermi
    function.  Raises :class:`BathError` within ``tol`` of a pole ``+-i xi``.
    """
    z = np.asarray(z, dtype=complex)
    xi = terms.poles.reshape((-1,) + (1,) * z.ndim)
    eta = terms.residues.reshape(xi.shape)
    dist = np.minimum(np.abs(z - 1j * xi), np.abs(z + 1j * xi))
    if np.any(dist < tol):
        raise BathError("argument collides with a Fermi-function pole")
    out = 0.5 - np.sum(2.0 * eta * z / (z * z + xi * xi), axis=0)
    return out if out.ndim else complex(out)


@dataclass(frozen=True)
class Reservoir:
    """One electron reservoir; ``center`` defaults to the chemical potential."""

    beta: float
    mu: float = 0.0
    width: float = 5.0
    center: float | None = None

    def __post_init__(self):
        if not self.beta > 0:
            raise BathError("beta must be positive")
        if not self.width > 0:
            raise BathError("band width must be positive")
        if self.center is None:
            object.__setattr__(self, "center", float(self.mu))


@dataclass(frozen=True)
class BathSpec:
    """Reservoirs plus the hybridization strengths ``Gamma[u, alpha]``.

    ``u`` runs over system spin-orbitals; ``orbital_labels[u]`` gives the
    ``(nu, s)`` pair used in exported mode tables.
    """

    reservoirs: tuple[Reservoir, ...]
    hybridization: np.ndarray
    n_pade: int = 2
    scheme: Literal["pade", "matsubara"] = "pade"
    convention: Convention = "bare"
    orbital_labels: tuple[tuple[int, int], ...] | None = None

    def __post_init__(self):
        res = tuple(self.reservoirs)
        gam = np.atleast_2d(np.asarray(self.hybridization, dtype=float))
        if gam.shape[1] != len(res):
            raise BathError("hybridization must have one column per reservoir")
        if np.any(gam < 0):
            raise BathError("hybridization strengths must be non-negative")
        if int(self.n_pade) != self.n_pade or self.n_pade < 1:
            raise BathError("n_pade must be >= 1")
        if self.scheme not in ("pade", "matsubara"):
            raise BathError(f"unknown pole scheme {self.scheme!r}")
        if self.convention not in ("bare", "pi"):
            raise BathError(f"unknown prefactor convention {self.convention!r}")
        labels = self.orbital_labels
        if labels is None:
            labels = tuple((0, u) for u in range(gam.shape[0]))
        if len(labels) != gam.shape[0]:
            raise BathError("orbital_labels length must match hybridization rows")
        object.__setattr__(self, "reservoirs", res)
        object.__setattr__(self, "hybridization", gam)
        object.__setattr__(self, "orbital_labels", tuple(tuple(x) for x in labels))

    @property
    def n_orbitals(self) -> int:
        return self.hybridization.shape[0]

    @property
    def prefactor(self) -> float:
        """Overall factor in front of the frequency integral."""
        return 1.0 if self.convention == "bare" else 1.0 / np.pi

    def psd_terms(self) -> PsdTerms:
        if self.scheme == "pade":
            return pade_poles_residues(self.n_pade)
        return matsubara_poles_residues(self.n_pade)


@dataclass(frozen=True)
class ExponentialMode:
    """One term ``eta * exp(-gamma t)`` of the sigma-resolved correlation.

    ``sigma`` is +1 (hole-type) or -1 (electron-type); ``orbital`` is the
    system spin-orbital the mode couples to; ``pole`` indexes the term
    within its ``(sigma, reservoir, orbital)`` group.
    """

    sigma: int
    reservoir: int
    orbital: int
    pole: int
    eta: complex
    gamma: complex
    kind: Literal["lorentzian-pole", "pade-pole", "discrete-level"]
    label: tuple[int, int] = field(default=(0, 0), compare=False)


def lorentzian(omega, gamma_hyb: float, res: Reservoir):
    """Lorentzian hybridization function, valid for complex ``omega``."""
    w = res.width
    return gamma_hyb * w * w / ((omega - res.center) ** 2 + w * w)


def _check_degenerate(modes: Sequence[ExponentialMode], tol: float) -> None:
    groups: dict[tuple, list[ExponentialMode]] = {}
    for m in modes:
        groups.setdefault((m.sigma, m.reservoir, m.orbital), []).append(m)
    for key, grp in groups.items():
        g = np.array([m.gamma for m in grp])
        diff = np.abs(g[:, None] - g[None, :])
        np.fill_diagonal(diff, np.inf)
        if np.any(diff < tol):
            raise BathError(
                f"degenerate exponents in correlation group (sigma, alpha, u)={key}; "
                "merging is not supported"
            )


def expand_correlation(spec: BathSpec, *, degeneracy_tol: float = 1e-10) -> list[ExponentialMode]:
    """Exponential modes for every ``(reservoir, orbital, sigma)``.

    Ordering is ``(reservoir, orbital, pole)`` with sigma = -1 before +1;
    pole 0 is the Lorentzian pole, poles ``1..n_pade`` come from the Fermi
    function.
    """
    terms = spec.psd_terms()
    modes: list[ExponentialMode] = []
    for a, res in enumerate(spec.reservoirs):
        beta, mu, om, w = res.beta, res.mu, res.center, res.width
        for u in range(spec.n_orbitals):
            g_hyb = spec.hybridization[u, a]
            label = spec.orbital_labels[u]
            for p in range(len(terms) + 1):
                for sigma in (-1, +1):
                    if p == 0:
                        omega = om + sigma * 1j * w
                        f = fermi_eval_psd(terms, sigma * beta * (omega - mu))
                        eta = np.pi * g_hyb * w * f
                        gamma = w - sigma * 1j * om
                        kind = "lorentzian-pole"
                    else:
                        xi = terms.poles[p - 1]
                        omega = mu + sigma * 1j * xi / beta
                        eta = -2j * np.pi / beta * terms.residues[p - 1] * lorentzian(omega, g_hyb, res)
                        gamma = xi / beta - sigma * 1j * mu
                        kind = "pade-pole"
                    modes.append(
                        ExponentialMode(sigma, a, u, p, complex(eta * spec.prefactor),
                                        complex(gamma), kind, label)
                    )
    _check_degenerate(modes, degeneracy_tol)
    return modes


def correlation_from_modes(modes: Sequence[ExponentialMode], sigma: int, t,
                           *, reservoir: int | None = None, orbital: int | None = None):
    """Sum ``eta exp(-gamma t)`` over modes of the given charge (and optional
    reservoir/orbital).  ``t`` may be a scalar or an array."""
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise BathError("correlation functions are evaluated for t >= 0 only")
    out = np.zeros(t.shape, dtype=complex)
    for m in modes:
        if m.sigma != sigma:
            continue
        if reservoir is not None and m.reservoir != reservoir:
            continue
        if orbital is not None and m.orbital != orbital:
            continue
        out = out + m.eta * np.exp(-m.gamma * t)
    return out if out.ndim else complex(out)


def correlation_quadrature_oracle(spec: BathSpec, sigma: int, t: float, *,
                                  reservoir: int = 0, orbital: int = 0,
                                  window: float = 40.0, tol: float = 1e-9) -> complex:
    """Integrate the frequency-domain definition of ``C^sigma(t)`` directly.

    The Fermi function is replaced by its pole expansion so that the result
    is comparable with :func:`correlation_from_modes` to quadrature accuracy.
    The integral over ``|omega - Omega| <= window * W`` is done adaptively;
    the two tails (where the Lorentzian decays only as ``1/omega^2``) are
    added with semi-infinite Fourier quadrature.
    """
    if t < 0:
        raise BathError("t must be non-negative")
    res = spec.reservoirs[reservoir]
    g_hyb = spec.hybridization[orbital, reservoir]
    if g_hyb == 0:
        return 0j
    terms = spec.psd_terms()
    beta, mu = res.beta, res.mu

    def amp(w):
        return (fermi_eval_psd(terms, sigma * beta * (w - mu)) * lorentzian(w, g_hyb, res)).real

    lo = res.center - window * res.width
    hi = res.center + window * res.width
    opts = dict(epsabs=tol, epsrel=0.0, limit=2000)
    total = 0j
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("error", integrate.IntegrationWarning)
            re_c, _ = integrate.quad(lambda w: amp(w) * np.cos(sigma * w * t), lo, hi, **opts)
            im_c, _ = integrate.quad(lambda w: amp(w) * np.sin(sigma * w * t), lo, hi, **opts)
            total += re_c + 1j * im_c
            for sign, edge in ((+1, hi), (-1, lo)):
                # tail in u = sign*(w - edge) >= 0
                def tail(u, edge=edge, sign=sign):
                    return amp(edge + sign * u)

                if t == 0:
                    val, _ = integrate.quad(tail, 0.0, np.inf, **opts)
                    total += val
                else:
                    # e^{i sigma w t} with w = edge + sign u
                    ph = np.exp(1j * sigma * edge * t)
                    c, _ = integrate.quad(tail, 0.0, np.inf, weight="cos", wvar=t, limlst=200)
                    s, _ = integrate.quad(tail, 0.0, np.inf, weight="sin", wvar=t, limlst=200)
                    total += ph * (c + 1j * sigma * sign * s)
    except integrate.IntegrationWarning as exc:  # pragma: no cover
        raise BathError("quadrature oracle did not converge") from exc
    return complex(total * spec.prefactor)
