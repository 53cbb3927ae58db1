"""Command-line entry point: ``dissipaton-pinn <subcommand> --config run.toml``."""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import platform
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .bath import BathError, correlation_from_modes, correlation_quadrature_oracle, expand_correlation
from .config import ConfigError, RunConfig, load_config
from .convention import (conjugation_random_residual, search_result, trace_residual)
from .dqme import DqmeError, DissipatonLevel, SystemSpec, build_liouvillian, enumerate_basis
from .driver import (DriverError, boundary_jumps, build_problem, model_trajectory, optimizer_from_config, reference_trajectory,
                     relative_error_metric, schedule_from_config, train_full_horizon)
from .io import atomic_write_text, emit_history, emit_trajectory, read_trajectory, write_json
from .pinn import (FeatureMap, LossProblem, LossWeights, PinnError, init_model, loss_eval,
                   loss_gradient, save_checkpoint)
from .reference import ReferenceError

log = logging.getLogger("dissipaton_pinn")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_PHYSICS = 3
EXIT_OPTIMIZATION = 4
EXIT_IO = 5

SUBCOMMANDS = ("bath", "basis", "propagate", "train", "compare", "gradcheck")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dissipaton-pinn",
                                description="Fermionic DQME: reference propagation and PINN training.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("command", choices=SUBCOMMANDS)
    p.add_argument("files", nargs="*", help="trajectory CSVs for 'compare'")
    p.add_argument("--config", help="TOML run configuration (defaults when omitted)")
    p.add_argument("--out", help="output directory (overrides output.dir)")
    p.add_argument("--threads", type=int, default=1, help="BLAS threads (default 1)")
    p.add_argument("--override-subdomain-failure", action="store_true",
                   help="keep training past a subdomain that misses its final loss target")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _manifest_base(cfg: RunConfig, command: str) -> dict:
    return {
        "command": command,
        "version": __version__,
        "config": cfg.to_dict(),
        "python": platform.python_version(),
        "numpy": np.__version__,
    }


def _convention_record() -> dict:
    return search_result().as_dict()


def cmd_bath(cfg: RunConfig, out: Path) -> int:
    from .driver import _bath_spec
    half = 0.5 * cfg.bath.bias
    spec = _bath_spec(cfg, (half, -half))
    modes = expand_correlation(spec)
    table = [{"sigma": m.sigma, "alpha": m.reservoir, "nu": spec.orbital_labels[m.orbital][0],
              "s": spec.orbital_labels[m.orbital][1], "p": m.pole, "eta_re": m.eta.real,
              "eta_im": m.eta.imag, "gamma_re": m.gamma.real, "gamma_im": m.gamma.imag, "kind": m.kind}
             for m in modes]
    write_json(out / "modes.json", table)
    times = np.linspace(0.0, 2.0, 21)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t", "sigma", "alpha", "re_C", "im_C", "re_oracle", "im_oracle"])
    for alpha in range(len(spec.reservoirs)):
        for sigma in (-1, 1):
            c = correlation_from_modes(modes, sigma, times, reservoir=alpha, orbital=0)
            for t, v in zip(times, c):
                o = correlation_quadrature_oracle(spec, sigma, float(t), reservoir=alpha, orbital=0)
                w.writerow([format(t, ".17g"), sigma, alpha] + [format(x, ".17g") for x in
                                                               (v.real, v.imag, o.real, o.imag)])
    atomic_write_text(out / "correlation.csv", buf.getvalue())
    return EXIT_OK


def cmd_basis(cfg: RunConfig, out: Path) -> int:
    prob = build_problem(cfg)
    L = prob.L
    tr = trace_residual(L.matrix, prob.basis)
    cj = conjugation_random_residual(L.matrix, prob.basis)
    summary = {
        "n_levels": len(prob.levels),
        "m_max": cfg.basis.m_max,
        "full_count": prob.full_size,
        "truncated_count": prob.truncated_size,
        "filtered_count": prob.basis.size,
        "basis_hash": prob.basis.hash,
        "nnz": int(L.matrix.nnz),
        "trace_residual": tr,
        "conjugation_residual": cj,
        "convention_search": _convention_record(),
    }
    write_json(out / "basis.json", summary)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["row", "col", "re", "im", "family", "alpha"])
    for r, c, re_, im_, f, a in L.triplets():
        w.writerow([r, c, format(re_, ".17g"), format(im_, ".17g"), f, a])
    atomic_write_text(out / "liouvillian.csv", buf.getvalue())
    if tr > 1e-12 or cj > 1e-12:
        log.error("generator invariants failed: trace %.2e, conjugation %.2e", tr, cj)
        return EXIT_PHYSICS
    return EXIT_OK


def cmd_propagate(cfg: RunConfig, out: Path) -> int:
    t0 = time.perf_counter()
    prob = build_problem(cfg)
    ig = cfg.integrator
    traj = reference_trajectory(prob, ig.horizon, ig.dt, ig.sample_dt)
    emit_trajectory(traj, out / "reference.csv")
    man = _manifest_base(cfg, "propagate")
    man.update({"basis_hash": prob.basis.hash, "basis_size": prob.basis.size,
                "convention_search": _convention_record(),
                "trace_drift": float(np.max(np.abs(traj["trace"] - traj["trace"][0]))),
                "seconds": time.perf_counter() - t0})
    write_json(out / "manifest.json", man)
    return EXIT_OK


def cmd_train(cfg: RunConfig, out: Path, override: bool) -> int:
    t0 = time.perf_counter()
    if override and not cfg.schedule.override_failure:
        # recorded in the config echo so a manifest rerun behaves the same
        cfg = replace(cfg, schedule=replace(cfg.schedule, override_failure=True))
    prob = build_problem(cfg)
    sched = schedule_from_config(cfg)
    net = cfg.network
    ckdir = out / "checkpoints"

    def on_subdomain(p, rep):
        a, b = rep.interval
        grid = np.linspace(a, b, max(2, int(round((b - a) / cfg.output.sample_dt * 4)) + 1))
        model = None
        for k, st in enumerate(rep.stages):
            emit_history(st.history, out / f"loss_sub{p:02d}_stage{k}.csv")
            if st.params is not None:
                if model is None:
                    model = init_model(prob.basis.width, sched.feature_maps[p], rep.interval,
                                       hidden=net.hidden, n_layers=net.n_layers)
                emit_trajectory(model_trajectory([model.with_params(st.params)], prob.L, grid),
                                out / f"trajectory_sub{p:02d}_stage{k}.csv")

    res = train_full_horizon(prob, sched, hidden=net.hidden, n_layers=net.n_layers, seed=net.seed,
                             init_scale=net.init_scale, opts=optimizer_from_config(cfg),
                             override=cfg.schedule.override_failure, reference_dt=cfg.integrator.dt,
                             sample_dt=cfg.output.sample_dt,
                             extrapolate_to=cfg.schedule.extrapolate_to or None, callback=on_subdomain)
    for p, m in enumerate(res.models):
        save_checkpoint(m, ckdir / f"sub{p:02d}.json", prob.basis)
    emit_trajectory(res.trajectory, out / "trajectory.csv")
    end = float(res.trajectory.t[-1])
    ref = reference_trajectory(prob, end, cfg.integrator.dt, cfg.output.sample_dt)
    emit_trajectory(ref, out / "reference.csv")
    errors = {k: relative_error_metric(res.trajectory, ref, k) for k in ("n_up", "I_L", "I_R")}
    man = _manifest_base(cfg, "train")
    man.update({
        "seeds": {"network": net.seed},
        "basis_hash": prob.basis.hash,
        "basis_sizes": {"full": prob.full_size, "truncated": prob.truncated_size,
                        "filtered": prob.basis.size},
        "convention_search": _convention_record(),
        "boundaries": [float(x) for x in sched.boundaries],
        "subdomains": [r.as_dict() for r in res.reports],
        "status": res.status,
        "stopped_at": res.stopped_at,
        "relative_errors": errors,
        "boundary_jumps_n_up": boundary_jumps(res.models, prob.L),
        "seconds": time.perf_counter() - t0,
    })
    write_json(out / "manifest.json", man)
    return EXIT_OK if res.status != "subdomain-failure" else EXIT_OPTIMIZATION


def cmd_compare(files: list[str], out: Path | None) -> int:
    if len(files) != 2:
        raise ConfigError("compare needs exactly two trajectory CSV files")
    a, b = (read_trajectory(f) for f in files)
    keys = [k for k in ("n_up", "I_L", "I_R") if k in a.columns and k in b.columns]
    result = {k: relative_error_metric(a, b, k) for k in keys}
    print(json.dumps(result, indent=2, sort_keys=True))
    if out is not None:
        write_json(out / "compare.json", result)
    return EXIT_OK


def gradcheck(draws: int = 20, step: float = 1e-6, delta_t: float = 1e-3, tol: float = 1e-6,
              seed: int = 0, hidden: int = 6) -> dict:
    """Backprop vs central finite differences on a 12-state instance."""
    rng = np.random.default_rng(seed)
    sys_ = SystemSpec(n_orbitals=1, eps0=0.7, u0=0.0)
    basis = enumerate_basis(1, 1, 1)
    worst = 0.0
    for d in range(draws):
        gm = complex(rng.uniform(0.5, 2.0), rng.uniform(-1, 1))
        lv = [DissipatonLevel(0, 0, 0, complex(*rng.standard_normal(2)), complex(*rng.standard_normal(2)),
                              gm, np.conj(gm), "test")]
        L = build_liouvillian(sys_, lv, basis)
        fmap = FeatureMap.parse(["t", "t^2", "sqrt_ratio(0.015)"])
        model = init_model(basis.width, fmap, (0.0, 0.2), hidden=hidden, seed=int(rng.integers(1 << 31)))
        p0 = rng.uniform(0.2, 0.8)
        target = np.zeros(basis.size, complex)
        target[basis.vacuum_diagonal()] = [1 - p0, p0]
        weights = LossWeights(*rng.uniform(0.1, 2.0, 3), lam=-3.0, delta_t=delta_t)
        prob = LossProblem(basis, L.matrix, np.sort(rng.uniform(0.0, 0.2, 5)), target, (0.0, 0.2), weights)
        _, g = loss_gradient(model, prob)
        th = model.get_params()
        fd = np.empty_like(th)
        for k in range(th.size):
            e = np.zeros_like(th)
            e[k] = step
            fd[k] = (loss_eval(model.with_params(th + e), prob).total
                     - loss_eval(model.with_params(th - e), prob).total) / (2 * step)
        worst = max(worst, float(np.linalg.norm(fd - g) / np.linalg.norm(fd)))
    return {"draws": draws, "max_relative_error": worst, "tolerance": tol, "passed": worst <= tol,
            "n_states": basis.size}


def cmd_gradcheck(cfg: RunConfig, out: Path) -> int:
    g = cfg.gradcheck
    res = gradcheck(g.draws, g.step, g.delta_t, g.tol, g.seed, g.hidden)
    write_json(out / "gradcheck.json", res)
    print(json.dumps(res, indent=2))
    return EXIT_OK if res["passed"] else EXIT_PHYSICS


def _set_threads(n: int):
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        return None
    return threadpool_limits(limits=max(1, n))


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config) if args.config else RunConfig()
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out or cfg.output.dir)
    _set_threads(args.threads)
    try:
        if args.command == "compare":
            return cmd_compare(args.files, Path(args.out) if args.out else None)
        if args.files:
            raise ConfigError(f"{args.command} takes no positional arguments")
        if args.command == "bath":
            return cmd_bath(cfg, out)
        if args.command == "basis":
            return cmd_basis(cfg, out)
        if args.command == "propagate":
            return cmd_propagate(cfg, out)
        if args.command == "train":
            return cmd_train(cfg, out, args.override_subdomain_failure)
        return cmd_gradcheck(cfg, out)
    except (ConfigError, BathError, PinnError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (DqmeError, ReferenceError) as err:
        print(f"physics invariant failure: {err}", file=sys.stderr)
        return EXIT_PHYSICS
    except DriverError as err:
        print(f"optimization failure: {err}", file=sys.stderr)
        return EXIT_OPTIMIZATION
    except OSError as err:
        print(f"I/O error: {err}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
