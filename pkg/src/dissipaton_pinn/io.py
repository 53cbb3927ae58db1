"""Atomic file output and the trajectory CSV format."""
from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .reference import Trajectory

__all__ = ["atomic_write_text", "write_json", "emit_trajectory", "read_trajectory",
           "TRAJECTORY_HEADER", "emit_history"]

TRAJECTORY_HEADER = ("t", "trace_re", "trace_im", "n_up", "I_L", "I_R")


def atomic_write_text(path, text: str) -> None:
    """Write ``text`` to a temp file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path, payload) -> None:
    atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, complex):
        return [o.real, o.imag]
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def emit_trajectory(traj: Trajectory, path) -> None:
    """CSV with header ``t,trace_re,trace_im,n_up,I_L,I_R`` at 17 significant digits.

    Columns missing from the trajectory are written as ``nan``.
    """
    t = np.asarray(traj.t, dtype=float)
    if t.size > 1 and np.any(np.diff(t) <= 0):
        raise ValueError("trajectory times must be strictly increasing")
    trace = np.asarray(traj.columns.get("trace", np.full(t.size, np.nan)), dtype=complex)
    cols = [t, trace.real, trace.imag]
    for k in TRAJECTORY_HEADER[3:]:
        cols.append(np.asarray(traj.columns.get(k, np.full(t.size, np.nan)), dtype=float))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRAJECTORY_HEADER)
    for row in zip(*cols):
        w.writerow([_fmt(x) for x in row])
    atomic_write_text(path, buf.getvalue())


def read_trajectory(path) -> Trajectory:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != TRAJECTORY_HEADER:
        raise ValueError(f"{path}: not a trajectory CSV")
    data = np.array(rows[1:], dtype=float).reshape(-1, len(TRAJECTORY_HEADER))
    cols = {"trace": data[:, 1] + 1j * data[:, 2], "n_up": data[:, 3], "I_L": data[:, 4], "I_R": data[:, 5]}
    cols = {k: v for k, v in cols.items() if not np.all(np.isnan(np.real(v)))}
    return Trajectory(data[:, 0], cols)


def emit_history(history, path) -> None:
    """Optimizer history CSV: iteration, loss, L_R, L_I, L_tr, grad_norm, step."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["iteration", "loss", "L_R", "L_I", "L_tr", "grad_norm", "step"])
    for r in history:
        w.writerow([r["iteration"]] + [_fmt(r[k]) for k in ("loss", "L_R", "L_I", "L_tr", "grad_norm", "step")])
    atomic_write_text(path, buf.getvalue())
