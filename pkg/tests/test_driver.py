import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import sparse

from dissipaton_pinn.config import RunConfig, ScheduleBlock, StageBlock
from dissipaton_pinn.driver import (DriverError, Stage, TrainingSchedule, model_trajectory, plan_subdomains,
                                    reference_state_at, reference_trajectory, refine_points,
                                    relative_error_metric, schedule_from_config, staged_train_subdomain,
                                    uniform_points)
from dissipaton_pinn.dqme import enumerate_basis
from dissipaton_pinn.optim import OptimizerOptions
from dissipaton_pinn.pinn import FeatureMap, LossWeights, init_model
from dissipaton_pinn.reference import Trajectory


def test_plan_uniform_ten_subdomains():
    b = plan_subdomains(2.3, 0.23)
    assert b.size == 11 and b[0] == 0 and b[-1] == 2.3
    np.testing.assert_allclose(np.diff(b), 0.23)


def test_plan_explicit_boundaries_verbatim():
    for bounds in ([0.0, 0.228], [0.3, 0.4], [1.44, 1.67]):
        assert plan_subdomains(2.3, 0.23, bounds).tolist() == bounds
    with pytest.raises(DriverError):
        plan_subdomains(2.3, boundaries=[0.0, 0.5, 0.4])
    with pytest.raises(DriverError):
        plan_subdomains(-1.0)


def test_uniform_points_cover_interval():
    p = uniform_points((0.23, 0.46), 0.015)
    assert p[0] == 0.23 and p[-1] == 0.46
    assert np.max(np.diff(p)) <= 0.015 + 1e-12


@given(st.floats(0.05, 1.0), st.floats(0.01, 0.05), st.floats(0.3, 0.95))
@settings(max_examples=50, deadline=None)
def test_refine_is_denser_superset(width, spacing, shrink):
    p = uniform_points((0.0, width), spacing)
    q = refine_points(p, spacing * shrink)
    assert set(p.tolist()) <= set(q.tolist())
    assert q[0] == 0.0 and q[-1] == width
    assert np.mean(np.diff(q)) <= spacing * shrink * (1 + 1e-9)
    assert np.mean(np.diff(q)) < np.mean(np.diff(p)) or p.size == q.size


def test_schedule_validation():
    fm = [FeatureMap.parse(["t"])]
    with pytest.raises(DriverError):
        TrainingSchedule(np.array([0.0, 1.0]), fm, [[Stage(0.03, 1e-3), Stage(0.02, 1e-2)]])
    with pytest.raises(DriverError):
        TrainingSchedule(np.array([0.0, 1.0, 0.5]), fm, [[Stage(0.03, 1e-3)]])
    s = TrainingSchedule(np.array([0.0, 1.0, 2.0]), fm, [[Stage(0.03, 1e-3)]])
    assert len(s.feature_maps) == 2 and len(s.stages) == 2 and s.ic_source == ["model", "model"]


def test_schedule_from_config():
    cfg = RunConfig(schedule=ScheduleBlock(stages=(StageBlock(0.03, 1e-3), StageBlock(0.019, 1e-4))))
    s = schedule_from_config(cfg)
    assert s.n_subdomains == 10
    assert [st.spacing for st in s.stages[0]] == [0.03, 0.019]


def _trivial():
    basis = enumerate_basis(1, 1, 0)
    L = sparse.csr_matrix((basis.size, basis.size), dtype=complex)
    target = np.full(basis.size, 0.5 + 0j)
    return basis, L, target


def test_trivial_subdomain_reaches_target():
    basis, L, target = _trivial()
    m = init_model(basis.width, FeatureMap.parse(["t"]), (0.0, 0.2), hidden=4, seed=0)
    model, rep = staged_train_subdomain(m, L, basis, [Stage(0.05, 1e-3), Stage(0.02, 1e-7)], target,
                                        LossWeights(delta_t=1e-4), OptimizerOptions(max_iter=500))
    assert rep.success and all(s.reached for s in rep.stages)
    assert rep.stages[-1].loss <= 1e-7
    assert rep.stages[1].n_points > rep.stages[0].n_points
    assert set(rep.stages[0].points.tolist()) <= set(rep.stages[1].points.tolist())
    assert rep.stages[0].points[0] == 0.0


def test_cusp_points_added():
    basis, L, target = _trivial()
    m = init_model(basis.width, FeatureMap.parse(["t"]), (0.0, 0.2), hidden=4, seed=0)
    _, rep = staged_train_subdomain(m, L, basis, [Stage(0.05, 1e-3), Stage(0.04, 1e-12, cusp_points=3)],
                                    target, LossWeights(delta_t=1e-4), OptimizerOptions(max_iter=5))
    base = refine_points(rep.stages[0].points, 0.04).size
    assert rep.stages[1].n_points > base
    assert np.all((rep.stages[1].points >= 0) & (rep.stages[1].points <= 0.2))


def _traj(t, x):
    return Trajectory(np.asarray(t, float), {"n_up": np.asarray(x, float)})


def test_relative_error_examples():
    t = np.linspace(0, 1, 11)
    assert relative_error_metric(_traj(t, np.sin(t) + 1), _traj(t, np.sin(t) + 1), "n_up") == 0
    assert relative_error_metric(_traj(t, np.full(11, 1.1)), _traj(t, np.full(11, 0.9)), "n_up") == pytest.approx(0.2)
    with pytest.raises(DriverError):
        relative_error_metric(_traj(t, np.zeros(11)), _traj(t, np.zeros(11)), "n_up")
    with pytest.raises(DriverError):
        relative_error_metric(_traj(t, t), _traj(t + 2, t), "n_up")


_X = st.floats(-2, 2, allow_subnormal=False)


@given(st.lists(_X, min_size=5, max_size=5), st.lists(_X, min_size=9, max_size=9),
       st.floats(0.01, 100))
@settings(max_examples=100, deadline=None)
def test_relative_error_symmetric_and_scale_invariant(a, b, c):
    ta, tb = np.linspace(0, 1, 5), np.linspace(0, 1, 9)
    A, B = _traj(ta, a), _traj(tb, b)
    try:
        e1 = relative_error_metric(A, B, "n_up")
    except DriverError:
        return
    assert relative_error_metric(B, A, "n_up") == pytest.approx(e1, rel=1e-12, abs=1e-15)
    scaled = relative_error_metric(_traj(ta, c * np.array(a)), _traj(tb, c * np.array(b)), "n_up")
    assert scaled == pytest.approx(e1, rel=1e-9, abs=1e-15)


def test_relative_error_window():
    t = np.linspace(0, 2, 21)
    x = np.where(t < 1, 1.0, 2.0)
    assert relative_error_metric(_traj(t, x), _traj(t, np.ones(21)), "n_up", window=(0.0, 0.9)) == 0


def test_model_trajectory_assignment(anderson):
    P = anderson
    fm = FeatureMap.parse(["t"])
    m1 = init_model(P.basis.width, fm, (0.0, 0.1), hidden=3, seed=1)
    m2 = init_model(P.basis.width, fm, (0.1, 0.2), hidden=3, seed=2)
    times = np.array([0.0, 0.05, 0.1, 0.15, 0.3])
    tr = model_trajectory([m1, m2], P.L, times)
    from dissipaton_pinn.driver import observables_from_rdts
    from dissipaton_pinn.pinn import rdt_eval
    first = observables_from_rdts(rdt_eval(m1, P.basis, np.array([0.1])), P.L)["n_up"][0]
    last = observables_from_rdts(rdt_eval(m2, P.basis, np.array([0.3])), P.L)["n_up"][0]
    assert tr["n_up"][2] == first and tr["n_up"][4] == last


def test_reference_trajectory_physics(anderson):
    P = anderson
    ref = reference_trajectory(P, 0.23, 5e-4, 0.01)
    assert np.max(np.abs(ref["trace"] - 1)) <= 1e-8
    s = reference_state_at(P.L, P.rho0, 0.23, 5e-4)
    from dissipaton_pinn.dqme import occupation_expectation
    assert occupation_expectation(s, P.basis, 0) == pytest.approx(ref["n_up"][-1], abs=1e-12)
