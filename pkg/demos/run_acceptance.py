"""Train the acceptance experiments into ``demos/runs/<name>/``.

Each run directory holds a ``stamp.json`` with a digest of the package
sources and the config file; a run is repeated only when that digest
changes.  Usage::

    python demos/run_acceptance.py [name ...] [--force]
"""
from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from pathlib import Path

import dissipaton_pinn
from dissipaton_pinn.cli import main as cli_main

HERE = Path(__file__).resolve().parent
CONFIGS = HERE / "configs"
RUNS = HERE / "runs"
NAMES = ("high_T", "low_T_staged", "low_T_linear", "low_T_ic_model", "low_T_ic_reference")


def source_digest(config: Path) -> str:
    h = hashlib.sha256()
    pkg = Path(dissipaton_pinn.__file__).parent
    for f in sorted(pkg.glob("*.py")):
        h.update(f.name.encode())
        h.update(f.read_bytes())
    h.update(config.read_bytes())
    return h.hexdigest()


def is_current(name: str) -> bool:
    stamp = RUNS / name / "stamp.json"
    if not stamp.exists():
        return False
    return json.loads(stamp.read_text()).get("digest") == source_digest(CONFIGS / f"{name}.toml")


def run(name: str, force: bool = False) -> Path:
    """Train ``name`` unless its artifacts are current; return the run directory."""
    out = RUNS / name
    if not force and is_current(name):
        return out
    cfg = CONFIGS / f"{name}.toml"
    digest = source_digest(cfg)
    t0 = time.perf_counter()
    code = cli_main(["train", "--config", str(cfg), "--out", str(out)])
    stamp = {"digest": digest, "exit_code": code, "seconds": time.perf_counter() - t0}
    (out / "stamp.json").write_text(json.dumps(stamp, indent=2) + "\n")
    return out


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("names", nargs="*", default=list(NAMES))
    p.add_argument("--force", action="store_true")
    args = p.parse_args(argv)
    for name in args.names:
        if name not in NAMES:
            p.error(f"unknown run {name!r}")
        out = run(name, args.force)
        man = json.loads((out / "manifest.json").read_text())
        print(f"{name}: status {man['status']}, errors {man['relative_errors']}", flush=True)
    return 0


if __name__ == "__main__":
    sys.exit(main())
