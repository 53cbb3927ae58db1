"""
Time-domain decomposition, staged residual-point refinement and metrics.

The horizon is split into subdomains, each represented by its own network.
Subdomain ``p`` is trained against the generator residual at its residual
points plus an initial-condition loss that ties it to the previous
subdomain's boundary value (or to the physical initial state for ``p = 1``).
Parameters are carried from one subdomain to the next as the initial guess.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .bath import BathSpec, Reservoir, expand_correlation
from .config import ConfigError, RunConfig
from .dqme import (Liouvillian, RdtBasis, SystemSpec, build_liouvillian, current_weights,
                   enumerate_basis, levels_from_modes, reachability_filter, vacuum_rdt)
from .optim import BfgsResult, OptimizerOptions, bfgs_minimize, warm_start_transfer
from .pinn import (FeatureMap, LossProblem, LossWeights, PinnModel, init_model, loss_eval,
                   loss_gradient, rdt_eval)
from .reference import Trajectory, rk4_step

log = logging.getLogger(__name__)

__all__ = [
    "DriverError",
    "Problem",
    "Stage",
    "TrainingSchedule",
    "StageReport",
    "SubdomainReport",
    "TrainResult",
    "build_problem",
    "boundary_jumps",
    "thermal_state",
    "plan_subdomains",
    "uniform_points",
    "refine_points",
    "cusp_points",
    "staged_train_subdomain",
    "train_full_horizon",
    "schedule_from_config",
    "observables_from_rdts",
    "model_trajectory",
    "reference_state_at",
    "reference_trajectory",
    "relative_error_metric",
]


class DriverError(RuntimeError):
    """Inconsistent schedule or a failed subdomain."""


# ---------------------------------------------------------------------------
# physical setup


@dataclass(eq=False)
class Problem:
    """Everything the solvers share: generator, basis and initial state."""

    system: SystemSpec
    bath: BathSpec
    levels: list
    basis: RdtBasis
    L: Liouvillian
    rho0: np.ndarray
    truncated_size: int
    full_size: int

    @property
    def beta(self) -> float:
        return self.bath.reservoirs[0].beta


def thermal_state(system: SystemSpec, beta: float, mu: float = 0.0, *, post: bool = False) -> np.ndarray:
    """Gibbs state of the isolated impurity (diagonal in occupations)."""
    H = system.hamiltonian(post=post).real
    occ = np.array([bin(i).count("1") for i in range(H.shape[0])])
    e = np.diag(H) - mu * occ
    w = np.exp(-beta * (e - e.min()))
    return np.diag(w / w.sum()).astype(complex)


def _bath_spec(cfg: RunConfig, mus: Sequence[float]) -> BathSpec:
    b = cfg.bath
    res = tuple(Reservoir(beta=1.0 / b.kT, mu=m, width=b.width,
                          center=None if b.center_follows_mu else b.center) for m in mus)
    hyb = np.full((cfg.system.n_orbitals, len(res)), b.gamma / len(res))
    labels = tuple((0, u) for u in range(cfg.system.n_orbitals))
    return BathSpec(res, hyb, n_pade=b.n_pade, scheme=b.scheme, convention=b.convention,
                    orbital_labels=labels)


def build_problem(cfg: RunConfig) -> Problem:
    """Biased post-quench generator on the filtered basis and the initial RDT.

    The reservoirs sit at ``mu = +bias/2`` (L) and ``-bias/2`` (R) after the
    quench and at zero before it.  The initial state is the pre-quench
    impurity Gibbs state in the dissipaton vacuum, or, with
    ``initial_state = "relaxed"``, that state propagated for
    ``relax_time`` under the pre-quench generator.
    """
    s = cfg.system
    if s.t_quench != 0.0:
        raise ConfigError("only a quench at t = 0 is supported (system.t_quench = 0)")
    half = 0.5 * cfg.bath.bias
    system = SystemSpec(s.n_orbitals, s.eps0, s.u0, s.d_eps, s.d_u, 0.0,
                        mu_pre=(0.0, 0.0), mu_post=(half, -half))
    bath = _bath_spec(cfg, system.mu_post)
    levels = levels_from_modes(expand_correlation(bath))
    full = enumerate_basis(s.n_orbitals, len(levels), cfg.basis.m_max, cap=cfg.basis.cap)
    L_full = build_liouvillian(system, levels, full)
    if cfg.basis.filter:
        seeds = np.nonzero(full.vacuum_diagonal())[0]
        basis = reachability_filter(full, L_full, seeds)
        L = build_liouvillian(system, levels, basis)
    else:
        basis, L = full, L_full
    beta = 1.0 / cfg.bath.kT
    rho0 = vacuum_rdt(basis, thermal_state(system, beta, 0.0, post=False))
    if cfg.bath.initial_state == "relaxed":
        pre_levels = levels_from_modes(expand_correlation(_bath_spec(cfg, system.mu_pre)))
        L_pre = build_liouvillian(system, pre_levels, basis, post_quench=False)
        rho0 = reference_state_at(L_pre, rho0, cfg.bath.relax_time, cfg.integrator.dt)
    width = 2 * s.n_orbitals + 2 * len(levels)
    return Problem(system, bath, levels, basis, L, rho0, full.size, 2 ** width)


# ---------------------------------------------------------------------------
# schedule


@dataclass(frozen=True)
class Stage:
    spacing: float
    target: float
    cusp_points: int = 0


@dataclass
class TrainingSchedule:
    """Boundaries, per-subdomain feature maps and stages, loss weights."""

    boundaries: np.ndarray
    feature_maps: list[FeatureMap]
    stages: list[list[Stage]]
    weights: LossWeights = field(default_factory=LossWeights)
    ic_source: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.boundaries = np.asarray(self.boundaries, dtype=float)
        n = self.n_subdomains
        if n < 1 or np.any(np.diff(self.boundaries) <= 0):
            raise DriverError("subdomain boundaries must be strictly increasing")
        self.feature_maps = _per_subdomain(self.feature_maps, n, "feature_maps")
        self.stages = _per_subdomain(self.stages, n, "stages")
        self.ic_source = _per_subdomain(self.ic_source or ["model"], n, "ic_source")
        for st in self.stages:
            t = [s.target for s in st]
            if not st or any(b >= a for a, b in zip(t, t[1:])):
                raise DriverError("stage loss targets must decrease")

    @property
    def n_subdomains(self) -> int:
        return self.boundaries.size - 1

    def interval(self, p: int) -> tuple[float, float]:
        return float(self.boundaries[p]), float(self.boundaries[p + 1])


def _per_subdomain(items, n: int, what: str) -> list:
    items = list(items)
    if not items:
        raise DriverError(f"{what} must not be empty")
    if len(items) > n:
        raise DriverError(f"{what} has {len(items)} entries for {n} subdomains")
    return items + [items[-1]] * (n - len(items))


def plan_subdomains(horizon: float, width: float | None = None,
                    boundaries: Sequence[float] | None = None) -> np.ndarray:
    """Subdomain boundaries: explicit list verbatim, else uniform of ``width``."""
    if boundaries is not None and len(boundaries):
        b = np.asarray(boundaries, dtype=float)
        if b.ndim != 1 or b.size < 2 or np.any(np.diff(b) <= 0):
            raise DriverError("explicit boundaries must be strictly increasing")
        return b
    if not horizon > 0:
        raise DriverError("horizon must be positive")
    if width is None or width >= horizon:
        return np.array([0.0, float(horizon)])
    n = max(1, int(math.ceil(horizon / width - 1e-9)))
    return np.linspace(0.0, float(horizon), n + 1)


def uniform_points(interval: tuple[float, float], spacing: float) -> np.ndarray:
    """Both ends plus uniform interior points with spacing at most ``spacing``."""
    a, b = interval
    n = max(1, int(math.ceil((b - a) / spacing - 1e-9)))
    return np.linspace(a, b, n + 1)


def refine_points(points: np.ndarray, spacing: float) -> np.ndarray:
    """Insert midpoints into the widest gaps until the mean spacing is <= ``spacing``."""
    pts = sorted(float(x) for x in points)
    span = pts[-1] - pts[0]
    while len(pts) > 1 and span / (len(pts) - 1) > spacing * (1 + 1e-12):
        gaps = np.diff(pts)
        k = int(np.argmax(gaps))
        pts.insert(k + 1, 0.5 * (pts[k] + pts[k + 1]))
    return np.array(pts)


def cusp_points(model: PinnModel, prob: LossProblem, points: np.ndarray, n_extra: int) -> np.ndarray:
    """Extra residual points at the largest-residual spot of a 10x finer audit grid."""
    if n_extra <= 0:
        return np.array([])
    a, b = prob.interval
    mean = (b - a) / max(1, points.size - 1)
    audit = uniform_points((a, b), mean / 10.0)
    aprob = LossProblem(prob.basis, prob.L, audit, prob.target, prob.interval, prob.weights)
    rep = loss_eval(model, aprob)
    k = int(np.nanargmax(rep.residual_norms))
    order = [k]
    step = 1
    while len(order) < n_extra and step < audit.size:
        for j in (k - step, k + step):
            if 0 <= j < audit.size and len(order) < n_extra:
                order.append(j)
        step += 1
    extra = audit[order]
    return np.array([x for x in extra if not np.any(np.isclose(points, x, rtol=0, atol=1e-12))])


# ---------------------------------------------------------------------------
# training


@dataclass
class StageReport:
    n_points: int
    target: float
    loss: float
    components: dict
    iterations: int
    status: str
    reached: bool
    history: list[dict] = field(default_factory=list, repr=False)
    points: np.ndarray | None = field(default=None, repr=False)
    params: np.ndarray | None = field(default=None, repr=False)

    def as_dict(self) -> dict:
        return {"n_points": self.n_points, "target": self.target, "loss": self.loss,
                "components": self.components, "iterations": self.iterations,
                "status": self.status, "reached": self.reached,
                "points": None if self.points is None else [float(x) for x in self.points]}


@dataclass
class SubdomainReport:
    index: int
    interval: tuple[float, float]
    stages: list[StageReport]
    initial_loss: float
    seconds: float
    ic_source: str = "model"

    @property
    def success(self) -> bool:
        return bool(self.stages) and self.stages[-1].reached

    def as_dict(self) -> dict:
        return {"index": self.index, "interval": list(self.interval), "success": self.success,
                "initial_loss": self.initial_loss, "seconds": self.seconds,
                "ic_source": self.ic_source, "stages": [s.as_dict() for s in self.stages]}


def _objective(model: PinnModel, prob: LossProblem):
    """``fun(theta) -> (loss, grad)`` and ``info(theta) -> loss components``.

    ``info`` reuses the report of the latest evaluation when ``theta`` is
    the point just evaluated, which is the usual case after a line search.
    """
    last = {}

    def fun(theta):
        rep, g = loss_gradient(model.with_params(theta), prob)
        last["theta"], last["rep"] = theta.copy(), rep
        if not rep.finite or not np.all(np.isfinite(g)):
            return math.inf, g
        return rep.total, g

    def info(theta):
        if "theta" in last and np.array_equal(last["theta"], theta):
            return last["rep"].as_dict()
        return loss_eval(model.with_params(theta), prob).as_dict()

    return fun, info


def staged_train_subdomain(model0: PinnModel, L, basis: RdtBasis, stages: Sequence[Stage],
                           initial_target: np.ndarray, weights: LossWeights = LossWeights(),
                           opts: OptimizerOptions = OptimizerOptions(), *, index: int = 0,
                           ic_source: str = "model",
                           callback: Callable[[dict], None] | None = None) -> tuple[PinnModel, SubdomainReport]:
    """Optimize one subdomain through its refinement stages.

    Stage ``k`` uses a superset of stage ``k-1``'s residual points with the
    mean spacing brought down to the stage's ``spacing``, plus optional
    extras around the largest residual.  Each stage runs BFGS until its loss
    target (or another stopping rule) is met.
    """
    interval = model0.interval
    t0 = time.perf_counter()
    model = model0
    points = uniform_points(interval, stages[0].spacing)
    reports: list[StageReport] = []
    initial_loss = None
    for k, stage in enumerate(stages):
        if k > 0:
            points = refine_points(points, stage.spacing)
        prob = LossProblem(basis, L, points, initial_target, interval, weights)
        if stage.cusp_points:
            extra = cusp_points(model, prob, points, stage.cusp_points)
            if extra.size:
                points = np.sort(np.concatenate([points, extra]))
                prob = LossProblem(basis, L, points, initial_target, interval, weights)
        fun, info = _objective(model, prob)
        if initial_loss is None:
            initial_loss = float(fun(model.get_params())[0])
        res: BfgsResult = bfgs_minimize(fun, model.get_params(), replace(opts, loss_target=stage.target),
                                        info=info, callback=callback)
        model = model.with_params(res.x)
        rep = loss_eval(model, prob)
        reports.append(StageReport(points.size, stage.target, rep.total, rep.as_dict(), res.n_iter,
                                   res.status, rep.total <= stage.target, res.history, points.copy(),
                                   res.x.copy()))
        log.info("subdomain %d stage %d: loss %.3e (target %.1e) after %d iterations [%s]",
                 index, k, rep.total, stage.target, res.n_iter, res.status)
    return model, SubdomainReport(index, interval, reports, float(initial_loss),
                                  time.perf_counter() - t0, ic_source)


@dataclass
class TrainResult:
    models: list[PinnModel]
    reports: list[SubdomainReport]
    trajectory: Trajectory
    status: str
    stopped_at: float | None = None

    @property
    def success(self) -> bool:
        return self.status == "complete"


def schedule_from_config(cfg: RunConfig) -> TrainingSchedule:
    s = cfg.schedule
    bounds = plan_subdomains(s.horizon, s.width, s.boundaries or None)
    if s.n_subdomains:
        bounds = bounds[: s.n_subdomains + 1]
    fmaps = [FeatureMap.parse(list(f)) for f in cfg.network.feature_maps]
    stages = [Stage(st.spacing, st.target, st.cusp_points) for st in s.stages]
    weights = LossWeights(s.omega_r, s.omega_i, s.omega_tr, s.lam, s.delta_t)
    return TrainingSchedule(bounds, fmaps, [stages], weights, list(s.ic_source))


def optimizer_from_config(cfg: RunConfig) -> OptimizerOptions:
    s = cfg.schedule
    return OptimizerOptions(max_iter=s.max_iter, grad_tol=s.grad_tol,
                            time_limit=s.time_limit if s.time_limit > 0 else None)


def train_full_horizon(problem: Problem, schedule: TrainingSchedule, *, hidden: int = 35,
                       n_layers: int = 4, seed: int = 0, init_scale: float = 1.0,
                       opts: OptimizerOptions = OptimizerOptions(), override: bool = False,
                       reference_dt: float = 5e-4, sample_dt: float = 0.01,
                       extrapolate_to: float | None = None,
                       callback: Callable[[int, SubdomainReport], None] | None = None) -> TrainResult:
    """Train all subdomains in order with warm starts and stitch the result.

    Without ``override`` training stops after the first subdomain whose
    final stage misses its target; the stitched trajectory then ends there.
    With ``extrapolate_to`` past the last boundary, a run that reaches the
    last boundary has its final model evaluated on to that time unchanged.
    """
    basis, L = problem.basis, problem.L
    models: list[PinnModel] = []
    reports: list[SubdomainReport] = []
    status, stopped = "complete", None
    for p in range(schedule.n_subdomains):
        interval = schedule.interval(p)
        fmap = schedule.feature_maps[p]
        if p == 0:
            model = init_model(basis.width, fmap, interval, hidden=hidden, n_layers=n_layers,
                               seed=seed, scale=init_scale)
            target = problem.rho0
        else:
            model = warm_start_transfer(models[-1], interval, fmap, seed=seed + p)
            if schedule.ic_source[p] == "reference":
                target = reference_state_at(L, problem.rho0, interval[0], reference_dt)
            else:
                target = rdt_eval(models[-1], basis, interval[0])
        model, rep = staged_train_subdomain(model, L, basis, schedule.stages[p], target,
                                            schedule.weights, opts, index=p,
                                            ic_source=schedule.ic_source[p] if p else "physical")
        models.append(model)
        reports.append(rep)
        if callback is not None:
            callback(p, rep)
        if not rep.success:
            if not override:
                status, stopped = "subdomain-failure", interval[1]
                break
            status = "completed-with-failures"
    end = models[-1].interval[1]
    if stopped is None and extrapolate_to is not None and extrapolate_to > end:
        end = float(extrapolate_to)
    traj = model_trajectory(models, L, _grid(schedule.boundaries[0], end, sample_dt))
    return TrainResult(models, reports, traj, status, stopped)


def _grid(a: float, b: float, step: float) -> np.ndarray:
    n = max(1, int(round((b - a) / step)))
    return np.linspace(a, b, n + 1)


# ---------------------------------------------------------------------------
# observables and metrics


def observables_from_rdts(R: np.ndarray, L: Liouvillian) -> dict[str, np.ndarray]:
    """trace, n_up and reservoir currents for RDT columns ``R`` (S, T)."""
    basis = L.basis
    w = basis.trace_weights()
    out = {"trace": w @ R, "n_up": np.real(w * basis.field_bits("n")[:, 0] @ R)}
    names = {0: "I_L", 1: "I_R"} if len(L.reservoirs) == 2 else {}
    for a in L.reservoirs:
        out[names.get(a, f"I_{a}")] = np.real(current_weights(L, a) @ R)
    return out


def model_trajectory(models: Sequence[PinnModel], L: Liouvillian, times: np.ndarray) -> Trajectory:
    """Stitched observables; time ``t`` uses the model whose interval holds it.

    Times past the last interval use the last model (extrapolation).
    """
    times = np.asarray(times, dtype=float)
    starts = np.array([m.interval[0] for m in models])
    idx = np.clip(np.searchsorted(starts, times, side="right") - 1, 0, len(models) - 1)
    # interval ends belong to the earlier model
    for k in range(1, len(models)):
        idx[(idx == k) & np.isclose(times, starts[k], rtol=0, atol=1e-12)] = k - 1
    R = np.empty((L.basis.size, times.size), complex)
    for k, m in enumerate(models):
        sel = idx == k
        if np.any(sel):
            R[:, sel] = rdt_eval(m, L.basis, times[sel])
    return Trajectory(times, observables_from_rdts(R, L))


def boundary_jumps(models: Sequence[PinnModel], L: Liouvillian, key: str = "n_up") -> list[float]:
    """``|X_p(t_p) - X_{p+1}(t_p)|`` at each interior boundary of a stitched run."""
    jumps = []
    for a, b in zip(models, models[1:]):
        t = np.array([b.interval[0]])
        xa = observables_from_rdts(rdt_eval(a, L.basis, t), L)[key][0]
        xb = observables_from_rdts(rdt_eval(b, L.basis, t), L)[key][0]
        jumps.append(float(abs(xa - xb)))
    return jumps


def reference_state_at(L, rho0: np.ndarray, t: float, dt: float) -> np.ndarray:
    """RK4 state at time ``t`` (step shrunk to land on ``t`` exactly)."""
    if t <= 0:
        return np.asarray(rho0, complex).copy()
    n = max(1, int(math.ceil(t / dt - 1e-9)))
    h = t / n
    mat = L.matrix if isinstance(L, Liouvillian) else L
    rho = np.asarray(rho0, complex).copy()
    for _ in range(n):
        rho = rk4_step(mat, rho, h)
    return rho


def reference_trajectory(problem: Problem, horizon: float, dt: float = 5e-4,
                         sample_dt: float = 0.01) -> Trajectory:
    """Reference propagation with the standard observable columns."""
    n = max(1, int(round(horizon / sample_dt)))
    states = [problem.rho0.copy()]
    rho = problem.rho0.copy()
    h_sample = horizon / n
    for _ in range(n):
        rho = reference_state_at(problem.L, rho, h_sample, dt)
        states.append(rho)
    R = np.array(states).T
    traj = Trajectory(np.linspace(0.0, horizon, n + 1), observables_from_rdts(R, problem.L))
    drift = float(np.max(np.abs(traj["trace"] - traj["trace"][0])))
    if drift > 1e-6:
        raise DriverError(f"reference trace drift {drift:.2e}")
    return traj


def relative_error_metric(traj: Trajectory, ref: Trajectory, key: str,
                          window: tuple[float, float] | None = None) -> float:
    """``int |X - X_ref| / int (|X| + |X_ref|)/2`` on the merged time grid.

    Both series are linearly interpolated onto the union of their sample
    times inside the overlap (or ``window``) and integrated with the
    trapezoidal rule.
    """
    lo = max(traj.t[0], ref.t[0])
    hi = min(traj.t[-1], ref.t[-1])
    if window is not None:
        lo, hi = max(lo, window[0]), min(hi, window[1])
    if not hi > lo:
        raise DriverError("trajectories do not overlap")
    grid = np.union1d(traj.t, ref.t)
    grid = grid[(grid >= lo) & (grid <= hi)]
    grid = np.union1d(grid, [lo, hi])
    x = np.interp(grid, traj.t, np.real(traj[key]))
    y = np.interp(grid, ref.t, np.real(ref[key]))
    num = np.trapezoid(np.abs(x - y), grid)
    den = np.trapezoid(0.5 * (np.abs(x) + np.abs(y)), grid)
    if den == 0:
        raise DriverError("zero denominator in the relative error")
    return float(num / den)
