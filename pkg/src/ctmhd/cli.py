"""Command-line experiment runner.

Subcommands
-----------
``converge``    manufactured-solution error table with observed orders
``cavity``      driven-cavity GMRES/Picard counts over meshes and Re
``robustness``  driven-cavity counts over Re x Rm (x kappa, x variant)
``alpha``       driven-cavity counts over Re x alpha
``solve``       a single run with full diagnostics

Every run writes ``<kind>.csv``, ``config.json`` (the exact configuration,
byte-stable across reruns) and ``manifest.json`` (configuration, git hash,
timings, column mapping) into ``--out``.  Sweep cells run in parallel
processes when ``CTMHD_THREADS`` is larger than one.

Exit codes: 0 when every cell converged, 2 when some cell did not, 1 on error.
"""

from __future__ import annotations

import argparse
import csv
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
import itertools
import json
import logging
import math
import os
from pathlib import Path
import subprocess
import sys
import time
from typing import Optional

from .assembly import Params
from .driver import (
    PicardConfig,
    cavity_benchmark,
    divergence_diagnostics,
    error_norms,
    manufactured_case_example1,
    picard_solve,
    write_snapshot,
)
from .fespace import make_spaces
from .krylov import SolveConfig
from .mesh import mesh_level

log = logging.getLogger(__name__)

EXIT_OK, EXIT_ERROR, EXIT_NOT_CONVERGED = 0, 1, 2
KINDS = ("converge", "cavity", "robustness", "alpha", "solve")
SWEEP_KEYS = ("Re", "Rm", "kappa", "alpha", "variant")

# per-kind defaults; lists are sweeps
DEFAULTS = {
    "converge": dict(levels=[1, 2, 3], Re=[1.0], Rm=[1.0], kappa=[1.0], delta=1e-5, eps=1e-6),
    "cavity": dict(levels=[1, 2, 3], Re=[1.0, 10.0, 100.0], Rm=[10.0], kappa=[1.0]),
    "robustness": dict(levels=[3], Re=[1.0, 10.0, 100.0], Rm=[1.0, 20.0, 40.0, 60.0], kappa=[1.0]),
    "alpha": dict(levels=[3], Re=[1.0, 10.0, 100.0], Rm=[1.0], kappa=[100.0],
                  alpha=[0.0, 0.5, 1.0, 10.0, 100.0]),
    "solve": dict(levels=[2], Re=[1.0], Rm=[1.0], kappa=[1.0]),
}

SWEEP_COLUMNS = ["level", "Re", "Rm", "kappa", "alpha", "gamma", "variant",
                 "n_gmres", "n_picard", "converged", "linear_converged", "display"]
CONVERGE_COLUMNS = ["level", "h", "u_dg", "u_dg_order", "p_L2", "p_L2_order", "A_Hcurl",
                    "A_Hcurl_order", "H_Hcurl", "H_Hcurl_order", "div_u_L2", "n_picard",
                    "converged"]
SOLVE_COLUMNS = ["case", "level", "Re", "Rm", "kappa", "alpha", "n_gmres", "n_picard",
                 "converged", "div_u_L2", "J_flux_jump", "B_flux_jump", "div_J_max",
                 "div_B_max", "helmholtz_H", "helmholtz_A", "u_dg", "p_L2", "A_Hcurl", "H_Hcurl"]

TABLE_MAP = {
    "converge": "velocity/pressure and field error tables: errors and log2 ratios per mesh level",
    "cavity": "iteration table: rows mesh level, columns Re, cell N_gmres (N_picard)",
    "robustness": "iteration tables: rows Re, columns Rm (one table per kappa and variant)",
    "alpha": "iteration table: rows Re, columns alpha",
    "solve": "single-run diagnostics",
}


@dataclass
class ExperimentConfig:
    """One experiment; list-valued parameters are swept as a Cartesian product."""

    kind: str = "cavity"
    levels: list = field(default_factory=lambda: [1, 2, 3])
    Re: list = field(default_factory=lambda: [1.0])
    Rm: list = field(default_factory=lambda: [1.0])
    kappa: list = field(default_factory=lambda: [1.0])
    alpha: list = field(default_factory=lambda: [1.0])
    variant: list = field(default_factory=lambda: ["S_u"])
    gamma: float = 10.0
    delta: float = 1e-4
    eps: float = 1e-5
    inner_tol: float = 1e-3
    inner: str = "direct"
    picard_maxiter: int = 100
    gmres_maxiter: int = 500
    case: str = "cavity"  # for ``solve``: cavity | example1
    out: str = "results"
    vtk: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown experiment kind {self.kind!r}")
        for key in ("levels",) + SWEEP_KEYS:
            value = getattr(self, key)
            if not isinstance(value, (list, tuple)):
                value = [value]
            setattr(self, key, list(value))
        self.levels = [int(v) for v in self.levels]
        for key in ("Re", "Rm", "kappa", "alpha"):
            setattr(self, key, [float(v) for v in getattr(self, key)])
        if not self.levels or min(self.levels) < 1:
            raise ValueError("mesh levels must be >= 1")
        if self.inner not in ("direct", "iterative"):
            raise ValueError(f"unknown inner solve policy {self.inner!r}")
        if self.case not in ("cavity", "example1"):
            raise ValueError(f"unknown case {self.case!r}")
        if not (self.delta > 0 and self.eps > 0):
            raise ValueError("delta and eps must be positive")

    @classmethod
    def for_kind(cls, kind: str, **overrides) -> "ExperimentConfig":
        values = dict(DEFAULTS.get(kind, {}))
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(kind=kind, **values)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------------------
# cells
# ---------------------------------------------------------------------------
def _picard_config(cfg: ExperimentConfig, variant: str = "S_u") -> PicardConfig:
    solve = SolveConfig(tol=cfg.eps, maxiter=cfg.gmres_maxiter, inner=cfg.inner,
                        inner_tol=cfg.inner_tol)
    return PicardConfig(delta=cfg.delta, maxiter=cfg.picard_maxiter, solve=solve, variant=variant)


def display_cell(n_gmres: float, n_picard: int, converged: bool, maxit: int) -> str:
    """``"N_gmres (N_picard)"``; a non-converged Picard run shows ``">maxit"``, e.g. ``">100"``."""
    picard = str(n_picard) if converged else f">{maxit}"
    return f"{int(round(n_gmres))} ({picard})"


def _snapshot_path(cfg: ExperimentConfig, tag: str) -> Path:
    return Path(cfg.out) / "vtk" / f"{cfg.kind}_{tag}"


def run_sweep_cell(cfg: ExperimentConfig, level: int, Re: float, Rm: float, kappa: float,
                   alpha: float, variant: str) -> dict:
    """One driven-cavity run."""
    t0 = time.perf_counter()
    mesh = mesh_level(level)
    params = Params(Re=Re, Rm=Rm, kappa=kappa, gamma=cfg.gamma, alpha=alpha)
    spaces = make_spaces(mesh)
    state, rep = picard_solve(mesh, params, cavity_benchmark(mesh, params),
                              _picard_config(cfg, variant), spaces)
    if cfg.vtk:
        tag = f"L{level}_Re{Re:g}_Rm{Rm:g}_k{kappa:g}_a{alpha:g}_{variant}"
        write_snapshot(_snapshot_path(cfg, tag), state, mesh, spaces, params)
    return {
        "level": level, "Re": Re, "Rm": Rm, "kappa": kappa, "alpha": alpha, "gamma": cfg.gamma,
        "variant": variant, "n_gmres": round(rep.mean_gmres, 4), "n_picard": rep.iterations,
        "converged": rep.converged, "linear_converged": rep.linear_ok,
        "display": display_cell(rep.mean_gmres, rep.iterations, rep.converged,
                                cfg.picard_maxiter),
        "_time": time.perf_counter() - t0,
    }


def _manufactured_params(cfg: ExperimentConfig, case) -> Params:
    """Parameters of a manufactured run; the sources only fit the case's Re, Rm and kappa."""
    fixed = case.params
    for key in ("Re", "Rm", "kappa"):
        if getattr(cfg, key)[0] != getattr(fixed, key):
            raise ValueError(f"the manufactured case requires {key}={getattr(fixed, key):g}")
    return Params(Re=fixed.Re, Rm=fixed.Rm, kappa=fixed.kappa, gamma=cfg.gamma,
                  alpha=cfg.alpha[0])


def run_converge_level(cfg: ExperimentConfig, level: int) -> dict:
    """Manufactured-solution errors on one mesh."""
    t0 = time.perf_counter()
    case = manufactured_case_example1()
    mesh = mesh_level(level)
    params = _manufactured_params(cfg, case)
    spaces = make_spaces(mesh)
    state, rep = picard_solve(mesh, params, case, _picard_config(cfg), spaces)
    err = error_norms(state, case, mesh, spaces)
    if cfg.vtk:
        write_snapshot(_snapshot_path(cfg, f"L{level}"), state, mesh, spaces, params)
    row = {"level": level, "h": mesh.h, "n_picard": rep.iterations,
           "converged": rep.converged and rep.linear_ok, "_time": time.perf_counter() - t0}
    row.update({k: err[k] for k in ("u_dg", "p_L2", "A_Hcurl", "H_Hcurl", "div_u_L2")})
    return row


def observed_orders(rows: list, keys=("u_dg", "p_L2", "A_Hcurl", "H_Hcurl")) -> list:
    """Add ``<key>_order = log2(e_{L-1} / e_L)`` for consecutive levels (blank on the first)."""
    rows = sorted(rows, key=lambda r: r["level"])
    for prev, cur in zip([None] + rows[:-1], rows):
        for k in keys:
            ok = (prev is not None and cur["level"] == prev["level"] + 1
                  and prev.get(k, 0) > 0 and cur.get(k, 0) > 0)
            cur[f"{k}_order"] = math.log2(prev[k] / cur[k]) if ok else ""
    return rows


def run_solve(cfg: ExperimentConfig) -> dict:
    """One run (first value of every sweep list) with all diagnostics."""
    t0 = time.perf_counter()
    level = cfg.levels[0]
    mesh = mesh_level(level)
    if cfg.case == "example1":
        case = data = manufactured_case_example1()
        params = _manufactured_params(cfg, case)
    else:
        case = None
        params = Params(Re=cfg.Re[0], Rm=cfg.Rm[0], kappa=cfg.kappa[0], gamma=cfg.gamma,
                        alpha=cfg.alpha[0])
        data = cavity_benchmark(mesh, params)
    spaces = make_spaces(mesh)
    state, rep = picard_solve(mesh, params, data, _picard_config(cfg, cfg.variant[0]), spaces)
    row = {"case": cfg.case, "level": level, "Re": params.Re, "Rm": params.Rm,
           "kappa": params.kappa, "alpha": params.alpha, "n_gmres": round(rep.mean_gmres, 4),
           "n_picard": rep.iterations, "converged": rep.converged and rep.linear_ok}
    diag = divergence_diagnostics(state, mesh, spaces)
    row.update({k: diag[k] for k in ("div_u_L2", "J_flux_jump", "B_flux_jump", "div_J_max",
                                     "div_B_max", "helmholtz_H", "helmholtz_A")})
    if case is not None:
        err = error_norms(state, case, mesh, spaces)
        row.update({k: err[k] for k in ("u_dg", "p_L2", "A_Hcurl", "H_Hcurl")})
    if cfg.vtk:
        write_snapshot(_snapshot_path(cfg, f"L{level}"), state, mesh, spaces, params)
    row["_time"] = time.perf_counter() - t0
    return row


# ---------------------------------------------------------------------------
# orchestration
# ---------------------------------------------------------------------------
def max_workers(n_cells: int) -> int:
    """Parallel sweep cells, capped by ``CTMHD_THREADS`` (default 1: serial)."""
    raw = os.environ.get("CTMHD_THREADS", "1")
    try:
        cap = int(raw)
    except ValueError as err:
        raise ValueError(f"CTMHD_THREADS must be an integer, got {raw!r}") from err
    return max(1, min(cap, n_cells))


def _run_cells(func, jobs: list) -> list:
    """Run ``func(*job)`` for every job; results come back in job order."""
    workers = max_workers(len(jobs))
    if workers == 1:
        return [func(*job) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(func, *job) for job in jobs]
        return [f.result() for f in futures]


def _failed_row(columns: list, base: dict, err: Exception) -> dict:
    row = {c: "" for c in columns}
    row.update(base)
    row.update(converged=False, _error=f"{type(err).__name__}: {err}")
    if "display" in columns:
        row["display"] = "error"
    return row


def _guarded(func):
    def call(*args):
        try:
            return func(*args)
        except Exception as err:  # one failing cell must not abort the sweep
            log.exception("cell %s failed", args[1:])
            return err
    return call


def _converge_cell(cfg, level):
    return _guarded(run_converge_level)(cfg, level)


def _sweep_cell(cfg, *args):
    return _guarded(run_sweep_cell)(cfg, *args)


def run_experiment(cfg: ExperimentConfig) -> tuple[list, list]:
    """Run every cell of ``cfg``; returns ``(columns, rows)`` in deterministic order."""
    if cfg.kind == "solve":
        return SOLVE_COLUMNS, [run_solve(cfg)]
    if cfg.kind == "converge":
        jobs = [(cfg, L) for L in sorted(set(cfg.levels))]
        rows = []
        for (_, level), res in zip(jobs, _run_cells(_converge_cell, jobs)):
            rows.append(_failed_row(CONVERGE_COLUMNS, {"level": level}, res)
                        if isinstance(res, Exception) else res)
        return CONVERGE_COLUMNS, observed_orders(rows)
    jobs = [(cfg, L, Re, Rm, k, a, v) for L, Re, Rm, k, a, v in itertools.product(
        cfg.levels, cfg.Re, cfg.Rm, cfg.kappa, cfg.alpha, cfg.variant)]
    rows = []
    for job, res in zip(jobs, _run_cells(_sweep_cell, jobs)):
        if isinstance(res, Exception):
            base = dict(zip(("level", "Re", "Rm", "kappa", "alpha", "variant"), job[1:]))
            base["gamma"] = cfg.gamma
            res = _failed_row(SWEEP_COLUMNS, base, res)
        rows.append(res)
    return SWEEP_COLUMNS, rows


def _fmt(value) -> str:
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_csv(path, columns: list, rows: list) -> Path:
    """CSV with a fixed header; floats are written with ``repr`` so they re-parse exactly."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with tmp.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(row.get(c, "")) for c in columns])
    tmp.replace(path)
    return path


def read_csv(path) -> list:
    """Rows of a CSV written by :func:`write_csv`, with numbers converted back."""

    def parse(text):
        if text in ("true", "false"):
            return text == "true"
        for conv in (int, float):
            try:
                return conv(text)
            except ValueError:
                pass
        return text

    with Path(path).open(newline="") as fh:
        return [{k: parse(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def git_hash() -> Optional[str]:
    try:
        out = subprocess.run(["git", "rev-parse", "HEAD"], capture_output=True, text=True,
                             cwd=Path(__file__).resolve().parent, timeout=10)
    except (OSError, subprocess.SubprocessError):
        return None
    if out.returncode != 0:
        return None
    return out.stdout.strip() or None


def write_outputs(cfg: ExperimentConfig, columns: list, rows: list, wall_time: float) -> dict:
    """Write the CSV table, ``config.json`` and ``manifest.json``; returns their paths."""
    out = Path(cfg.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        csv_path = write_csv(out / f"{cfg.kind}.csv", columns, rows)
        config_path = out / "config.json"
        config_path.write_text(cfg.to_json())
        manifest = {
            "config": asdict(cfg),
            "git": git_hash(),
            "table": TABLE_MAP[cfg.kind],
            "columns": columns,
            "wall_time": wall_time,
            "cell_times": [row.get("_time") for row in rows],
            "errors": [row["_error"] for row in rows if "_error" in row],
        }
        manifest_path = out / "manifest.json"
        manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    except OSError as err:
        raise OSError(f"cannot write outputs to {out}: {err}") from err
    return {"csv": csv_path, "config": config_path, "manifest": manifest_path}


def exit_code(rows: list) -> int:
    if any("_error" in row for row in rows):
        return EXIT_ERROR
    return EXIT_OK if all(row.get("converged") is True for row in rows) else EXIT_NOT_CONVERGED


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ctmhd", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="kind", required=True)
    for kind in KINDS:
        p = sub.add_parser(kind, help=TABLE_MAP[kind])
        p.add_argument("--config", type=Path, help="JSON file with flat keys; flags override it")
        p.add_argument("--levels", type=int, nargs="+")
        for key in ("Re", "Rm", "kappa", "alpha"):
            p.add_argument(f"--{key}", type=float, nargs="+")
        p.add_argument("--variant", nargs="+", choices=["S_u", "F"])
        p.add_argument("--gamma", type=float)
        p.add_argument("--delta", type=float, help="Picard tolerance")
        p.add_argument("--eps", type=float, help="relative GMRES tolerance")
        p.add_argument("--inner", choices=["direct", "iterative"])
        p.add_argument("--inner-tol", dest="inner_tol", type=float)
        p.add_argument("--picard-maxiter", dest="picard_maxiter", type=int)
        p.add_argument("--gmres-maxiter", dest="gmres_maxiter", type=int)
        p.add_argument("--out", type=str)
        p.add_argument("--vtk", action="store_true", default=None, help="write field snapshots")
        if kind == "solve":
            p.add_argument("--case", choices=["cavity", "example1"])
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    values = {}
    if args.config is not None:
        values.update(json.loads(Path(args.config).read_text()))
        values.pop("kind", None)
    known = {f.name for f in fields(ExperimentConfig)} - {"kind"}
    unknown = set(values) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    for name in known:
        value = getattr(args, name, None)
        if value is not None:
            values[name] = value
    return ExperimentConfig.for_kind(args.kind, **values)


def main(argv: Optional[list] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_from_args(args)
        t0 = time.perf_counter()
        columns, rows = run_experiment(cfg)
        paths = write_outputs(cfg, columns, rows, time.perf_counter() - t0)
    except Exception as err:
        print(f"ctmhd: error: {err}", file=sys.stderr)
        return EXIT_ERROR
    for row in rows:
        print(", ".join(f"{c}={_fmt(row.get(c, ''))}" for c in columns))
    print(f"wrote {paths['csv']}")
    return exit_code(rows)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
