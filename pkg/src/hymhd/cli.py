"""Command-line driver for single runs and manufactured convergence studies."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

from .mesh import generate_structured_mesh, load_mesh
from .mms import ExactSolution2D, compute_eoc, energy_error, manufactured_problem
from .report import CSV_HEADER, rate_table_csv, render_rate_figure
from .solver import SolverConfig, SolverError, run_simulation


class UsageError(ValueError):
    """Bad flags or inconsistent study parameters."""


@dataclass
class StudyConfig:
    k: int
    nu: float
    mu: float
    c_stab: float = 1.0
    meshes: list = field(default_factory=list)
    mesh_files: list = field(default_factory=list)
    t_final: float = 1.0
    out: str | None = None
    condense: bool = True
    upwind: bool = True
    plot: bool = True

    def validate(self):
        if self.k < 0:
            raise UsageError("--k must be a nonnegative integer")
        if self.nu <= 0 or self.mu <= 0:
            raise UsageError("--nu and --mu must be positive")
        if self.c_stab < 0:
            raise UsageError("--cstab must be nonnegative")
        if self.t_final <= 0:
            raise UsageError("--tf must be positive")
        if bool(self.meshes) == bool(self.mesh_files):
            raise UsageError("give exactly one of --meshes or --mesh-files")
        if any(n < 1 for n in self.meshes):
            raise UsageError("--meshes entries must be >= 1")


@dataclass
class StudyResult:
    config: StudyConfig
    hs: list
    errors: list
    rates: list
    csv: str
    reports: list


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _build_parser() -> _Parser:
    p = _Parser(prog="hymhd", add_help=True, description=(
        "Unsteady incompressible MHD solver on hybrid RTN/face polynomial "
        "spaces; runs manufactured-solution convergence studies and emits "
        "a CSV rate table (plus a figure next to it)."))
    p.add_argument("--config", help="JSON file with defaults for any flag")
    p.add_argument("--k", type=int, help="polynomial degree (default 0)")
    p.add_argument("--nu", type=float, help="fluid viscosity (default 1)")
    p.add_argument("--mu", type=float, help="magnetic diffusivity (default 1)")
    p.add_argument("--cstab", type=float, help="upwind strength (default 1)")
    p.add_argument("--meshes", help="comma list of structured sizes, e.g. 4,8,16")
    p.add_argument("--mesh-files", help="comma list of mesh file paths")
    p.add_argument("--tf", type=float, help="final time (default 1)")
    p.add_argument("--out", help="CSV output path (stdout when omitted)")
    p.add_argument("--condense", choices=["on", "off"],
                   help="static condensation (default on)")
    p.add_argument("--no-upwind", action="store_true", default=None,
                   help="disable convective stabilization (C_stab = 0)")
    p.add_argument("--no-plot", action="store_true", default=None,
                   help="skip the convergence figure next to the CSV")
    return p


def parse_config(argv) -> StudyConfig:
    """Flags layered over optional JSON config; explicit flags win."""
    ns = _build_parser().parse_args(argv)
    file_vals = {}
    if ns.config:
        try:
            file_vals = json.loads(Path(ns.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config file {ns.config}: {exc}")
        if not isinstance(file_vals, dict):
            raise UsageError("config file must hold a JSON object")

    def pick(flag, key, default):
        val = getattr(ns, flag)
        if val is not None:
            return val
        return file_vals.get(key, default)

    meshes = pick("meshes", "meshes", "")
    if isinstance(meshes, str):
        try:
            meshes = [int(s) for s in meshes.split(",") if s.strip()]
        except ValueError:
            raise UsageError(f"bad --meshes value {meshes!r}")
    mesh_files = pick("mesh_files", "mesh_files", "")
    if isinstance(mesh_files, str):
        mesh_files = [s for s in mesh_files.split(",") if s.strip()]

    cfg = StudyConfig(
        k=int(pick("k", "k", 0)),
        nu=float(pick("nu", "nu", 1.0)),
        mu=float(pick("mu", "mu", 1.0)),
        c_stab=float(pick("cstab", "cstab", 1.0)),
        meshes=meshes,
        mesh_files=mesh_files,
        t_final=float(pick("tf", "tf", 1.0)),
        out=pick("out", "out", None),
        condense=pick("condense", "condense", "on") == "on",
        upwind=not pick("no_upwind", "no_upwind", False),
        plot=not pick("no_plot", "no_plot", False),
    )
    if not cfg.upwind:
        cfg.c_stab = 0.0
    cfg.validate()
    return cfg


def _study_meshes(cfg: StudyConfig):
    if cfg.meshes:
        for n in cfg.meshes:
            yield f"n={n}", generate_structured_mesh(n)
    else:
        for path in cfg.mesh_files:
            yield path, load_mesh(Path(path).read_text())


def run_convergence_study(cfg: StudyConfig) -> StudyResult:
    """One manufactured run per mesh; CSV rows flushed as they complete."""
    exact = ExactSolution2D()
    problem = manufactured_problem(cfg.nu, cfg.mu)
    hs, errors, reports = [], [], []

    def flush():
        if cfg.out is not None:
            Path(cfg.out).write_text(rate_table_csv(hs, errors)
                                     if hs else CSV_HEADER + "\n")

    for label, mesh in _study_meshes(cfg):
        solver_cfg = SolverConfig(k=cfg.k, nu=cfg.nu, mu=cfg.mu,
                                  t_final=cfg.t_final, c_stab=cfg.c_stab,
                                  condense=cfg.condense)
        try:
            traj = run_simulation(mesh, solver_cfg, problem)
        except SolverError as exc:
            flush()
            raise SolverError(f"mesh {label}: {exc}") from exc
        rep = energy_error(traj, exact, solver_cfg)
        hs.append(rep.h)
        errors.append(rep.energy_error)
        reports.append(rep)
        flush()

    csv = rate_table_csv(hs, errors)
    rates = compute_eoc(errors, hs) if len(errors) > 1 else []
    if cfg.out is not None and cfg.plot:
        fig_path = str(Path(cfg.out).with_suffix(".png"))
        title = (f"nu={cfg.nu:g}, mu={cfg.mu:g}, C_stab={cfg.c_stab:g}, "
                 f"t_F={cfg.t_final:g}")
        render_rate_figure(hs, errors, cfg.k, fig_path, title)
    return StudyResult(config=cfg, hs=hs, errors=errors, rates=rates,
                       csv=csv, reports=reports)


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        cfg = parse_config(argv)
    except UsageError as exc:
        print(f"hymhd: usage error: {exc}", file=sys.stderr)
        return 1
    try:
        result = run_convergence_study(cfg)
    except SolverError as exc:
        print(f"hymhd: solver failure: {exc}", file=sys.stderr)
        return 2
    if cfg.out is None:
        sys.stdout.write(result.csv)
    else:
        print(f"wrote {cfg.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
