"""Command-line driver: ``dsgd run | converge | verify``.

CSV columns (stable)::

    family,k,l,p,stab,h,n_dofs_total,n_dofs_condensed,err_grad,err_pot,newton_iters,wall_ms

Convergence studies append ``# slope k=K: S`` comment lines (least squares
on the last three levels).  Exit codes: 0 success, 1 failed invariant
checks (verify), 2 solver failure, 3 configuration error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import cases, checks, schemes
from .core import Discretization, SpaceSpec, SpecError
from .mesh import FAMILIES, MeshError, MeshFamilySpec, generate, load
from .stabilization import StabilizationKind

COLUMNS = ["family", "k", "l", "p", "stab", "h", "n_dofs_total", "n_dofs_condensed",
           "err_grad", "err_pot", "newton_iters", "wall_ms"]

EXIT_OK, EXIT_CHECKS, EXIT_SOLVER, EXIT_CONFIG = 0, 1, 2, 3

log = logging.getLogger("dsgd")


class ConfigError(ValueError):
    pass


def parse_range(text: str) -> list:
    """``"3"`` -> [3]; ``"1..4"`` -> [1, 2, 3, 4]."""
    try:
        if ".." in text:
            a, b = text.split("..")
            lo, hi = int(a), int(b)
            if hi < lo:
                raise ValueError
            return list(range(lo, hi + 1))
        return [int(text)]
    except ValueError:
        raise ConfigError(f"bad range {text!r} (expected N or A..B)") from None


def parse_p(text: str) -> float:
    try:
        p = float(Fraction(text))
    except (ValueError, ZeroDivisionError):
        raise ConfigError(f"bad exponent {text!r}") from None
    if not p > 1:
        raise ConfigError("p must be > 1")
    return p


@dataclass
class RunConfig:
    command: str
    family: str | None
    mesh: Path | None
    levels: list
    degrees: list
    l_offset: str
    p: float
    case: str
    stab: str
    condense: bool
    output: Path | None
    seed: int
    threads: int
    tol: float
    max_iter: int
    elem_exactness: int | None
    face_exactness: int | None
    rho: float

    @classmethod
    def from_args(cls, ns) -> "RunConfig":
        if (ns.family is None) == (ns.mesh is None):
            raise ConfigError("give exactly one of --family or --mesh")
        if ns.family is not None and ns.family not in FAMILIES:
            raise ConfigError(f"unknown family {ns.family!r}")
        threads = ns.threads if ns.threads is not None else int(os.environ.get("DSGD_THREADS", "1"))
        cfg = cls(
            command=ns.command,
            family=ns.family,
            mesh=None if ns.mesh is None else Path(ns.mesh),
            levels=parse_range(ns.n) if ns.mesh is None else [0],
            degrees=parse_range(ns.k),
            l_offset=ns.l_offset,
            p=parse_p(ns.p),
            case=ns.case,
            stab=ns.stab,
            condense=ns.condense,
            output=None if ns.output is None else Path(ns.output),
            seed=ns.seed,
            threads=max(1, threads),
            tol=ns.tol,
            max_iter=ns.max_iter,
            elem_exactness=ns.elem_exactness,
            face_exactness=ns.face_exactness,
            rho=ns.rho,
        )
        if cfg.command == "run" and (len(cfg.levels) != 1 or len(cfg.degrees) != 1):
            raise ConfigError("run takes a single --n and --k (use converge for ranges)")
        if cfg.stab == "hmm" and (max(cfg.degrees) != 0 or cfg.l_offset == "plus"):
            raise ConfigError("--stab hmm requires k = 0 and l-offset minus or same")
        for k in cfg.degrees:
            SpaceSpec.from_offset(k, cfg.l_offset)
        return cfg

    def mesh_for(self, n):
        if self.mesh is not None:
            return load(self.mesh), self.mesh.stem
        return generate(MeshFamilySpec(self.family, n)), self.family

    def discretization(self, mesh, k):
        return Discretization(mesh, SpaceSpec.from_offset(k, self.l_offset), rho=self.rho,
                              elem_exactness=self.elem_exactness,
                              face_exactness=self.face_exactness, threads=self.threads)


def solve_row(cfg: RunConfig, mesh, name, k):
    """Solve one configuration; returns (row dict, converged flag)."""
    disc = cfg.discretization(mesh, k)
    case = cases.CASES[cfg.case](cfg.p)
    problem = schemes.ProblemSpec.from_case(case)
    kw = {} if problem.flux == "linear" else {"tol": cfg.tol, "max_iter": cfg.max_iter}
    u, report, system, ms = schemes.timed_solve(disc, problem, cfg.stab, condense=cfg.condense, **kw)
    eg, ep = schemes.measure_errors(disc, u, case.u, case.grad_u, cfg.p)
    row = {
        "family": name, "k": k, "l": disc.spec.l, "p": f"{cfg.p:g}", "stab": cfg.stab,
        "h": f"{mesh.h:.6e}", "n_dofs_total": system.n_total,
        "n_dofs_condensed": system.n_condensed, "err_grad": f"{eg:.6e}", "err_pot": f"{ep:.6e}",
        "newton_iters": report.iterations, "wall_ms": f"{ms:.1f}",
    }
    return row, report.converged


def _open(cfg):
    if cfg.output is None:
        return sys.stdout, False
    cfg.output.parent.mkdir(parents=True, exist_ok=True)
    return open(cfg.output, "w", newline=""), True


def cmd_solve(cfg: RunConfig) -> int:
    out, close = _open(cfg)
    status = EXIT_OK
    try:
        writer = csv.DictWriter(out, fieldnames=COLUMNS, lineterminator="\n")
        writer.writeheader()
        slopes = {}
        for k in cfg.degrees:
            hs, errs = [], []
            for n in cfg.levels:
                mesh, name = cfg.mesh_for(n)
                row, ok = solve_row(cfg, mesh, name, k)
                writer.writerow(row)
                out.flush()
                if not ok:
                    log.error("Newton did not converge (k=%d, n=%d)", k, n)
                    status = EXIT_SOLVER
                hs.append(mesh.h)
                errs.append(float(row["err_grad"]))
            if cfg.command == "converge" and len(hs) >= 2:
                slopes[k] = schemes.fit_slope(hs, errs)
        for k, s in slopes.items():
            out.write(f"# slope k={k}: {s:.4f}\n")
    finally:
        if close:
            out.close()
    return status


def cmd_verify(cfg: RunConfig) -> int:
    out, close = _open(cfg)
    failed = False
    try:
        for n in cfg.levels:
            mesh, name = cfg.mesh_for(n)
            for k in cfg.degrees:
                disc = cfg.discretization(mesh, k)
                kinds = None if cfg.stab in ("rtn", "hho") else [cfg.stab]
                for res in checks.run_suite(disc, kinds, rng=cfg.seed, extended=True):
                    out.write(f"{name} n={n} k={k} l={disc.spec.l} {res.line()}\n")
                    failed |= not res.passed
    finally:
        if close:
            out.close()
    return EXIT_CHECKS if failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dsgd", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in (("run", "single solve, one CSV row"),
                        ("converge", "convergence study with fitted slopes"),
                        ("verify", "algebraic invariant suite")):
        p = sub.add_parser(name, help=help_)
        src = p.add_mutually_exclusive_group()
        src.add_argument("--family", choices=FAMILIES)
        src.add_argument("--mesh", help="polymesh v1 file")
        p.add_argument("--n", default="2", help="refinement level N or range A..B")
        p.add_argument("--k", default="1", help="face degree K or range A..B")
        p.add_argument("--l-offset", choices=("minus", "same", "plus"), default="same")
        p.add_argument("--p", default="2", help="exponent, e.g. 3 or 7/4")
        p.add_argument("--case", choices=sorted(cases.CASES), default="trig")
        p.add_argument("--stab", choices=[s.value for s in StabilizationKind], default="rtn")
        p.add_argument("--condense", action=argparse.BooleanOptionalAction, default=True)
        p.add_argument("--output", help="write to this file instead of stdout")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--threads", type=int, default=None,
                       help="element-loop threads (default: $DSGD_THREADS or 1)")
        p.add_argument("--tol", type=float, default=1e-9, help="Newton relative tolerance")
        p.add_argument("--max-iter", type=int, default=100)
        p.add_argument("--elem-exactness", type=int, default=None)
        p.add_argument("--face-exactness", type=int, default=None)
        p.add_argument("--rho", type=float, default=0.1, help="star-point safety factor")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.WARNING - 10 * ns.verbose,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    np.random.seed(ns.seed)
    try:
        cfg = RunConfig.from_args(ns)
        if cfg.command == "verify":
            return cmd_verify(cfg)
        return cmd_solve(cfg)
    except (ConfigError, SpecError, MeshError, OSError) as exc:
        print(f"dsgd: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except schemes.SolverError as exc:
        print(f"dsgd: solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
