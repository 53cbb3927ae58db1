"""
Full-memory BFGS with a strong-Wolfe line search, and warm-start transfer.

The line search follows the bracketing/zoom scheme of Nocedal & Wright
(Algorithms 3.5 and 3.6) with safeguarded cubic interpolation.  Trial
points where the objective is not finite are rejected by shrinking the
step, which is how activation poles of the network are handled.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.linalg import blas

from .pinn import FeatureMap, PinnError, PinnModel, init_model

log = logging.getLogger(__name__)

__all__ = [
    "OptimizerOptions",
    "LineSearchError",
    "BfgsResult",
    "wolfe_line_search",
    "bfgs_minimize",
    "warm_start_transfer",
]


class LineSearchError(RuntimeError):
    """No step satisfying the strong Wolfe conditions was found."""


@dataclass(frozen=True)
class OptimizerOptions:
    max_iter: int = 1000
    grad_tol: float = 1e-8
    loss_target: float = -math.inf
    c1: float = 1e-4
    c2: float = 0.9
    initial_step: float = 1.0
    max_ls_trials: int = 40
    time_limit: float | None = None

    def __post_init__(self):
        if not 0 < self.c1 < self.c2 < 1:
            raise ValueError("Wolfe constants need 0 < c1 < c2 < 1")
        if self.max_iter < 0 or self.max_ls_trials < 1:
            raise ValueError("iteration limits must be positive")


@dataclass
class BfgsResult:
    x: np.ndarray
    f: float
    grad: np.ndarray
    n_iter: int
    status: str
    history: list[dict] = field(default_factory=list)

    @property
    def failed(self) -> bool:
        return self.status == "line-search-failure"


def _cubic_min(a, fa, ga, b, fb, gb):
    """Minimizer of the cubic through (a, fa, ga) and (b, fb, gb), or None."""
    d1 = ga + gb - 3.0 * (fa - fb) / (a - b)
    disc = d1 * d1 - ga * gb
    if disc < 0:
        return None
    d2 = math.copysign(math.sqrt(disc), b - a)
    denom = gb - ga + 2.0 * d2
    if denom == 0:
        return None
    return b - (b - a) * (gb + d2 - d1) / denom


def wolfe_line_search(phi: Callable[[float], tuple[float, float]], f0: float, g0: float,
                      opts: OptimizerOptions, alpha0: float | None = None) -> tuple[float, float, float]:
    """Step ``alpha`` with ``phi(alpha) = (f, df/dalpha)`` meeting the strong Wolfe conditions.

    Returns ``(alpha, f(alpha), phi'(alpha))``.  Raises
    :class:`LineSearchError` when ``g0 >= 0`` or no acceptable step is found
    within ``opts.max_ls_trials`` evaluations.
    """
    if not g0 < 0:
        raise LineSearchError("not a descent direction")
    c1, c2 = opts.c1, opts.c2
    trials = 0

    def ok_armijo(a, fa):
        # a required decrease below the resolution of f0 is treated as met
        if fa <= f0 + c1 * a * g0:
            return True
        return fa <= f0 and -c1 * a * g0 <= 4.0 * np.finfo(float).eps * abs(f0)

    def ok_curv(ga):
        return abs(ga) <= -c2 * g0

    def zoom(lo, flo, glo, hi, fhi, ghi):
        nonlocal trials
        while trials < opts.max_ls_trials:
            trials += 1
            a = _cubic_min(lo, flo, glo, hi, fhi, ghi) if np.isfinite(fhi) else None
            lo_, hi_ = min(lo, hi), max(lo, hi)
            margin = 0.1 * (hi_ - lo_)
            if a is None or not np.isfinite(a) or a < lo_ + margin or a > hi_ - margin:
                a = 0.5 * (lo + hi)
            fa, ga = phi(a)
            if not np.isfinite(fa):
                hi, fhi, ghi = a, np.inf, np.nan
                continue
            if not ok_armijo(a, fa) or fa >= flo:
                hi, fhi, ghi = a, fa, ga
            else:
                if ok_curv(ga):
                    return a, fa, ga
                if ga * (hi - lo) >= 0:
                    hi, fhi, ghi = lo, flo, glo
                lo, flo, glo = a, fa, ga
            if abs(hi - lo) <= 1e-16 * max(1.0, abs(lo)):
                break
        raise LineSearchError("zoom did not converge")

    a_prev, f_prev, g_prev = 0.0, f0, g0
    a = opts.initial_step if alpha0 is None else alpha0
    first = True
    while trials < opts.max_ls_trials:
        trials += 1
        fa, ga = phi(a)
        if not np.isfinite(fa) or not np.isfinite(ga):
            a = a_prev + 0.5 * (a - a_prev)
            continue
        if not ok_armijo(a, fa) or (not first and fa >= f_prev):
            return zoom(a_prev, f_prev, g_prev, a, fa, ga)
        if ok_curv(ga):
            return a, fa, ga
        if ga >= 0:
            return zoom(a, fa, ga, a_prev, f_prev, g_prev)
        a_prev, f_prev, g_prev = a, fa, ga
        a = 2.0 * a
        first = False
    raise LineSearchError("bracketing failed")


def _scaled_identity(n: int, scale: float) -> np.ndarray:
    H = np.zeros((n, n), order="F")
    H.flat[:: n + 1] = scale
    return H


def _symv(H: np.ndarray, x: np.ndarray) -> np.ndarray:
    """``H @ x`` reading only the upper triangle of a Fortran-ordered ``H``."""
    return blas.dsymv(1.0, H, x)


def bfgs_minimize(fun: Callable[[np.ndarray], tuple[float, np.ndarray]], x0: np.ndarray,
                  opts: OptimizerOptions = OptimizerOptions(), *,
                  info: Callable[[np.ndarray], dict] | None = None,
                  callback: Callable[[dict], None] | None = None,
                  line_search: Callable | None = None) -> BfgsResult:
    """Minimize ``fun(x) -> (f, grad)`` with dense inverse-Hessian BFGS.

    Stops on ``f <= loss_target``, ``|grad| <= grad_tol``, ``max_iter``,
    the optional wall-clock limit, or a line-search failure (which returns
    the best point so far with status ``"line-search-failure"``).
    ``info(x)`` may add extra columns (e.g. loss components) to the
    per-iteration history.  ``line_search`` replaces
    :func:`wolfe_line_search` (same signature), e.g. with an exact search
    on model problems.
    """
    search = wolfe_line_search if line_search is None else line_search
    x = np.asarray(x0, dtype=float).copy()
    f, g = fun(x)
    if not np.isfinite(f) or not np.all(np.isfinite(g)):
        raise ValueError("objective is not finite at the starting point")
    n = x.size
    H = None  # inverse Hessian, upper triangle only
    Hg = None
    history: list[dict] = []
    t_start = time.perf_counter()

    def record(it, step):
        row = {"iteration": it, "loss": float(f), "grad_norm": float(np.linalg.norm(g)), "step": float(step)}
        if info is not None:
            row.update(info(x))
        history.append(row)
        if callback is not None:
            callback(row)

    record(0, 0.0)
    status = "max-iter"
    it = 0
    while True:
        if f <= opts.loss_target:
            status = "loss-target"
            break
        if np.linalg.norm(g) <= opts.grad_tol:
            status = "grad-tol"
            break
        if it >= opts.max_iter:
            status = "max-iter"
            break
        if opts.time_limit is not None and time.perf_counter() - t_start > opts.time_limit:
            status = "time-limit"
            break
        d = -g if H is None else -Hg
        gd = float(g @ d)
        if not gd < 0:
            H = None
            d = -g
            gd = float(g @ d)
        cache = {}

        def phi(a):
            fa, ga = fun(x + a * d)
            cache[a] = (fa, ga)
            return fa, float(ga @ d) if np.all(np.isfinite(ga)) else np.nan

        alpha0 = 1.0 if H is not None else min(1.0, 1.0 / max(np.linalg.norm(g), 1e-300))
        try:
            a, fa, _ = search(phi, f, gd, opts, alpha0)
        except LineSearchError as err:
            if H is not None:
                # retry once along steepest descent before giving up
                H = None
                log.debug("line search failed (%s); resetting curvature", err)
                continue
            status = "line-search-failure"
            break
        x_new = x + a * d
        f_new, g_new = cache[a]
        s = x_new - x
        y = g_new - g
        sy = float(s @ y)
        if sy > 0:
            if H is None:
                H = _scaled_identity(n, sy / float(y @ y))
                Hg = H[0, 0] * g
            rho = 1.0 / sy
            Hg_new = _symv(H, g_new)
            Hy = Hg_new - Hg
            # H <- (I - rho s y^T) H (I - rho y s^T) + rho s s^T, written as the
            # symmetric rank-2 update H + v s^T + s v^T on the upper triangle
            v = 0.5 * (rho * rho * float(y @ Hy) + rho) * s - rho * Hy
            blas.dsyr2(1.0, v, s, a=H, overwrite_a=True)
            Hg = Hg_new + v * float(s @ g_new) + s * float(v @ g_new)
        elif H is not None:
            Hg = _symv(H, g_new)
        x, f, g = x_new, f_new, g_new
        it += 1
        record(it, a)
    return BfgsResult(x, float(f), g, it, status, history)


def warm_start_transfer(prev: PinnModel, interval: tuple[float, float],
                        features: FeatureMap | None = None, seed: int = 0) -> PinnModel:
    """Copy ``prev`` to a new subdomain.

    With the same feature map the parameters are copied unchanged.  When the
    map changes, the input-layer columns of features whose kind changed are
    redrawn from ``seed`` (same distribution as :func:`init_model`) and
    everything else is copied.
    """
    features = prev.features if features is None else features
    if len(features) != len(prev.features):
        raise PinnError("warm start needs the same number of time features")
    new = prev.copy()
    new.interval = tuple(map(float, interval))
    if features != prev.features:
        fresh = init_model(prev.n_bits, features, interval, hidden=prev.weights[0].shape[0],
                           n_layers=len(prev.weights), seed=seed)
        if fresh.shape != prev.shape:
            raise PinnError("architecture mismatch beyond the input layer")
        W1 = new.weights[0]
        for k, (fa, fb) in enumerate(zip(prev.features.features, features.features)):
            if fa != fb:
                col = prev.n_bits + k
                W1[:, col] = fresh.weights[0][:, col]
        new.features = features
    return new
