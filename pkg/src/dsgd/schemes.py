"""Gradient schemes for linear diffusion and the p-Laplace equation.

Element contributions are expressed as quadrature "blocks": each block holds
weights ``W`` and a matrix ``B`` mapping local DOFs to a dim-vector at every
quadrature point.  For the DSGD gradients there is a single 2-vector block
(the stabilized gradient); HHO adds a scalar block for the face penalty.  The
residual of every block is sum_q W sigma_eps(B u) . B v, evaluated by
:func:`dsgd.kernels.flux_contract`.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sps
import scipy.sparse.linalg as spla

from . import kernels
from .core import Discretization
from .stabilization import StabilizationKind, build_stabilization, hho_boundary_stab

__all__ = [
    "SingularSystem",
    "SolverError",
    "MaxIterations",
    "LineSearchStall",
    "ProblemSpec",
    "AssembledSystem",
    "NewtonReport",
    "gradient_blocks",
    "assemble_linear",
    "assemble_plaplace_residual",
    "solve_linear",
    "newton_solve",
    "solve",
    "measure_errors",
    "dirichlet_vector",
    "fit_slope",
    "timed_solve",
    "assemble_plaplace",
]

log = logging.getLogger(__name__)

EPS_SCHEDULE = (1e-2, 1e-4, 1e-6, 1e-10)


class SolverError(RuntimeError):
    pass


class SingularSystem(SolverError):
    pass


class MaxIterations(SolverError):
    def __init__(self, msg, report=None):
        super().__init__(msg)
        self.report = report


class LineSearchStall(SolverError):
    def __init__(self, msg, report=None):
        super().__init__(msg)
        self.report = report


@dataclass
class ProblemSpec:
    """p-Laplace (or linear, p = 2) problem with Dirichlet data ``g``.

    ``g = None`` means homogeneous boundary conditions.
    """

    p: float = 2.0
    f: object = None
    g: object = None
    flux: str = "p_laplace"
    exact: object = None
    exact_grad: object = None

    def __post_init__(self):
        if not self.p > 1:
            raise ValueError("p must be in (1, inf)")
        if self.flux not in ("linear", "p_laplace"):
            raise ValueError(f"unknown flux {self.flux!r}")
        if self.flux == "linear":
            self.p = 2.0

    @classmethod
    def from_case(cls, case, flux: str = "p_laplace") -> "ProblemSpec":
        return cls(p=case.p, f=case.f, g=None if case.homogeneous else case.u,
                   flux=flux if case.p != 2 else "linear",
                   exact=case.u, exact_grad=case.grad_u)


@dataclass
class BlockGroup:
    """Elements sharing one local size; quadrature padded with zero weights."""

    elements: np.ndarray
    dofs: np.ndarray  # (nE, nT)
    blocks: list  # [(W (nE, nq), B (nE, nq, dim, nT), is_penalty)]


@dataclass
class NewtonReport:
    iterations: int = 0
    residuals: list = field(default_factory=list)
    damping: list = field(default_factory=list)
    eps_schedule: list = field(default_factory=list)
    converged: bool = False
    final_residual: float = float("nan")


@dataclass
class AssembledSystem:
    """Element blocks, load vector and boundary constraints of a scheme."""

    disc: Discretization
    kind: StabilizationKind
    p: float
    groups: list
    load: np.ndarray
    fixed: np.ndarray  # boundary DOF indices
    fixed_values: np.ndarray
    condense: bool = True

    @property
    def n_total(self) -> int:
        return self.disc.layout.n_total

    @property
    def free(self) -> np.ndarray:
        mask = np.ones(self.n_total, dtype=bool)
        mask[self.fixed] = False
        return mask

    @property
    def n_condensed(self) -> int:
        nc = self.disc.layout.n_cell_dofs
        return int(self.free[nc:].sum())

    def local_matrices(self, u: np.ndarray | None = None, eps: float = 0.0):
        """Per-element tangent matrices, as {element: matrix}."""
        u = np.zeros(self.n_total) if u is None else u
        out = {}
        for grp in self.groups:
            _, jac = _group_eval(grp, u, self.p, eps, True)
            for e, J in zip(grp.elements, jac):
                out[int(e)] = J
        return out


# ---------------------------------------------------------------------------
# blocks


def gradient_blocks(disc: Discretization, kind, p: float = 2.0, *, hho_gradient: str = "GT",
                    stabs=None):
    """Per-element list of (weights, B) blocks for the chosen gradient."""
    kind = StabilizationKind(kind)
    if kind is not StabilizationKind.HHO and stabs is None:
        stabs = build_stabilization(disc, kind)
    out = []
    for t, op in enumerate(disc.ops):
        w = op.rule.weights
        if kind in (StabilizationKind.RTN, StabilizationKind.HMM):
            out.append([(w, op.G_at() + stabs[t].qp_values)])
        elif kind is StabilizationKind.ALT:
            out.append([(w, op.gradR_at() + stabs[t].qp_values)])
        else:
            grad = op.gradR_at() if hho_gradient == "rT" else op.G_at()
            pen = hho_boundary_stab(op, p)
            out.append([(w, grad), (pen.weights, pen.jumps[:, None, :])])
    return out


def _group(disc: Discretization, blocks) -> list:
    by_size = {}
    for t, op in enumerate(disc.ops):
        by_size.setdefault(op.n_local, []).append(t)
    groups = []
    for nT, elems in sorted(by_size.items()):
        elems = np.array(elems)
        dofs = np.stack([disc.layout.local_dofs(t) for t in elems])
        nblocks = len(blocks[elems[0]])
        packed = []
        for b in range(nblocks):
            nq = max(len(blocks[t][b][0]) for t in elems)
            dim = blocks[elems[0]][b][1].shape[1]
            W = np.zeros((len(elems), nq))
            B = np.zeros((len(elems), nq, dim, nT))
            for i, t in enumerate(elems):
                w, Bt = blocks[t][b]
                W[i, : len(w)] = w
                B[i, : len(w)] = Bt
            packed.append((W, B, b > 0))
        groups.append(BlockGroup(elems, dofs, packed))
    return groups


def _group_eval(grp: BlockGroup, u: np.ndarray, p: float, eps: float, jacobian: bool):
    U = np.ascontiguousarray(u[grp.dofs])
    res = np.zeros(grp.dofs.shape)
    jac = np.zeros(grp.dofs.shape + (grp.dofs.shape[1],)) if jacobian else None
    for W, B, _ in grp.blocks:
        r, J = kernels.flux_contract(B, W, U, float(p), float(eps), jacobian)
        res += r
        if jacobian:
            jac += J
    return res, jac


# ---------------------------------------------------------------------------
# assembly


def _load_vector(disc: Discretization, f) -> np.ndarray:
    F = np.zeros(disc.layout.n_total)
    if f is None:
        return F
    for t, op in enumerate(disc.ops):
        vals = op.rule.weights * f(op.rule.points)
        F[disc.layout.local_dofs(t)] += (op.phi[:, : op.n_pot] @ op.VT).T @ vals
    return F


def dirichlet_vector(disc: Discretization, g) -> tuple[np.ndarray, np.ndarray]:
    """Boundary DOF indices and the values pi_F^k g on boundary faces."""
    layout = disc.layout
    idx = layout.boundary_dofs()
    vals = np.zeros(len(idx))
    if g is not None:
        nf = disc.spec.n_face
        for i, f in enumerate(disc.mesh.boundary_faces):
            r, b = disc.face_rules[f], disc.face_bases[f]
            psi = b.values(r.points)
            vals[i * nf:(i + 1) * nf] = np.linalg.solve(
                psi.T @ (r.weights[:, None] * psi), psi.T @ (r.weights * g(r.points)))
    return idx, vals


def _assemble(disc, kind, p, f, g, condense, hho_gradient, stabs=None):
    kind = StabilizationKind(kind)
    blocks = gradient_blocks(disc, kind, p, hho_gradient=hho_gradient, stabs=stabs)
    fixed, vals = dirichlet_vector(disc, g)
    return AssembledSystem(disc, kind, p, _group(disc, blocks), _load_vector(disc, f),
                           fixed, vals, condense)


def assemble_linear(disc: Discretization, kind="rtn", f=None, g=None, *, condense: bool = True,
                    stabs=None) -> AssembledSystem:
    """Linear diffusion (Lambda = identity).  HHO uses grad r_T in the consistency term."""
    return _assemble(disc, kind, 2.0, f, g, condense, "rT", stabs)


def assemble_plaplace(disc: Discretization, kind="rtn", p: float = 2.0, f=None, g=None, *,
                      condense: bool = True, stabs=None) -> AssembledSystem:
    """p-Laplace scheme.  HHO uses G_T in the consistency term."""
    return _assemble(disc, kind, p, f, g, condense, "GT", stabs)


def assemble_plaplace_residual(system: AssembledSystem, u: np.ndarray, eps: float = 0.0,
                               jacobian: bool = True):
    """Global residual (free DOFs zeroed elsewhere) and sparse Jacobian.

    Returns ``(residual, jacobian, local)`` where ``local`` keeps the
    per-group element tangents for static condensation.
    """
    n = system.n_total
    res = -system.load.copy()
    rows, cols, vals, local = [], [], [], []
    for grp in system.groups:
        r, J = _group_eval(grp, u, system.p, eps, jacobian)
        np.add.at(res, grp.dofs, r)
        if jacobian:
            local.append(J)
            nT = grp.dofs.shape[1]
            rows.append(np.repeat(grp.dofs, nT, axis=1).ravel())
            cols.append(np.tile(grp.dofs, (1, nT)).ravel())
            vals.append(J.ravel())
    Jg = None
    if jacobian:
        Jg = sps.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                            shape=(n, n))
    return res, Jg, local


# ---------------------------------------------------------------------------
# linear solves


def _factor(A):
    try:
        lu = spla.splu(A.tocsc())
    except RuntimeError as exc:
        raise SingularSystem(f"sparse factorization failed: {exc}") from exc
    return lu


def _step_full(system, J, r):
    free = system.free
    du = np.zeros(system.n_total)
    A = J[free][:, free]
    lu = _factor(A)
    du[free] = lu.solve(-r[free])
    return du


def _step_condensed(system, local, r):
    """Newton step with element unknowns eliminated element by element."""
    disc = system.disc
    nc = disc.spec.n_cell
    ncd = disc.layout.n_cell_dofs
    n = system.n_total
    if nc == 0:
        return _step_full(system, _sparse_from_local(system, local), r)
    rows, cols, vals = [], [], []
    rhs = -r[ncd:].copy()
    saved = []
    for grp, J in zip(system.groups, local):
        A = J[:, :nc, :nc]
        Bm = J[:, :nc, nc:]
        C = J[:, nc:, :nc]
        D = J[:, nc:, nc:]
        rT = r[grp.dofs[:, :nc]]
        AinvB = np.linalg.solve(A, Bm)
        Ainvr = np.linalg.solve(A, rT[..., None])[..., 0]
        S = D - C @ AinvB
        fd = grp.dofs[:, nc:] - ncd
        np.add.at(rhs, fd, np.einsum("eij,ej->ei", C, Ainvr))
        m = fd.shape[1]
        rows.append(np.repeat(fd, m, axis=1).ravel())
        cols.append(np.tile(fd, (1, m)).ravel())
        vals.append(S.ravel())
        saved.append((AinvB, Ainvr))
    nf = n - ncd
    K = sps.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                       shape=(nf, nf))
    free_f = system.free[ncd:]
    duF = np.zeros(nf)
    lu = _factor(K[free_f][:, free_f])
    duF[free_f] = lu.solve(rhs[free_f])
    du = np.zeros(n)
    du[ncd:] = duF
    for grp, (AinvB, Ainvr) in zip(system.groups, saved):
        loc = duF[grp.dofs[:, nc:] - ncd]
        du[grp.dofs[:, :nc]] = -Ainvr - np.einsum("eij,ej->ei", AinvB, loc)
    return du


def _sparse_from_local(system, local):
    n = system.n_total
    rows, cols, vals = [], [], []
    for grp, J in zip(system.groups, local):
        nT = grp.dofs.shape[1]
        rows.append(np.repeat(grp.dofs, nT, axis=1).ravel())
        cols.append(np.tile(grp.dofs, (1, nT)).ravel())
        vals.append(J.ravel())
    return sps.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(n, n))


def _newton_step(system, u, eps, condense):
    r, J, local = assemble_plaplace_residual(system, u, eps)
    if condense:
        du = _step_condensed(system, local, r)
    else:
        du = _step_full(system, J, r)
    return r, du


def _initial(system) -> np.ndarray:
    u = np.zeros(system.n_total)
    u[system.fixed] = system.fixed_values
    return u


def solve_linear(system: AssembledSystem, condense: bool | None = None) -> np.ndarray:
    """Solve a p = 2 system: one exact Newton step from the boundary lifting."""
    if system.p != 2.0:
        raise ValueError("solve_linear requires p = 2")
    condense = system.condense if condense is None else condense
    u = _initial(system)
    r, du = _newton_step(system, u, 0.0, condense)
    return u + du


def _free_norm(system, r):
    return float(np.linalg.norm(r[system.free]))


def newton_solve(system: AssembledSystem, initial: np.ndarray | None = None, *,
                 tol: float = 1e-9, max_iter: int = 100, max_halvings: int = 30,
                 condense: bool | None = None, strict: bool = False):
    """Damped Newton with epsilon continuation for p < 2.

    Convergence: unregularized residual <= tol * ||load||.  Returns
    ``(u, report)``; raises :class:`MaxIterations` only when ``strict``.
    """
    condense = system.condense if condense is None else condense
    p = system.p
    report = NewtonReport()
    if initial is None:
        lin = AssembledSystem(system.disc, system.kind, 2.0, system.groups, system.load,
                              system.fixed, system.fixed_values, condense)
        initial = solve_linear(lin)
        if p == 2.0:
            report.iterations = 1
    u = initial.copy()
    u[system.fixed] = system.fixed_values
    scale = _free_norm(system, system.load)
    if scale == 0.0:
        scale = 1.0
    schedule = EPS_SCHEDULE if p < 2.0 else (0.0,)
    stalled = False
    for eps in schedule:
        report.eps_schedule.append(eps)
        r, _, _ = assemble_plaplace_residual(system, u, eps, jacobian=False)
        rn = _free_norm(system, r)
        report.residuals.append(rn)
        while rn > tol * scale:
            if report.iterations >= max_iter:
                report.final_residual = rn
                if strict:
                    raise MaxIterations(f"no convergence in {max_iter} iterations", report)
                log.warning("Newton stopped after %d iterations (residual %.3e)", max_iter, rn)
                return u, report
            r, du = _newton_step(system, u, eps, condense)
            step = 1.0
            for _ in range(max_halvings + 1):
                trial = u + step * du
                rt, _, _ = assemble_plaplace_residual(system, trial, eps, jacobian=False)
                rtn = _free_norm(system, rt)
                if rtn < rn:
                    break
                step *= 0.5
            else:
                report.final_residual = rn
                if rn <= 1e3 * tol * scale:
                    log.info("line search stalled at roundoff level (residual %.3e)", rn)
                    stalled = True
                    break
                raise LineSearchStall(f"no decrease after {max_halvings} halvings", report)
            u, rn = trial, rtn
            report.iterations += 1
            report.residuals.append(rn)
            report.damping.append(step)
    r, _, _ = assemble_plaplace_residual(system, u, 0.0, jacobian=False)
    report.final_residual = _free_norm(system, r)
    # a stall at roundoff level still counts when the residual is tiny
    limit = tol * scale * (1e3 if stalled else 1.0)
    report.converged = report.final_residual <= limit
    if strict and not report.converged:
        raise MaxIterations("unregularized residual above tolerance", report)
    return u, report


def solve(disc: Discretization, problem: ProblemSpec, kind="rtn", *, condense: bool = True,
          stabs=None, **newton):
    """Assemble and solve; returns ``(u, report, system)``."""
    if problem.flux == "linear":
        system = assemble_linear(disc, kind, problem.f, problem.g, condense=condense, stabs=stabs)
        u = solve_linear(system)
        report = NewtonReport(iterations=1, converged=True)
        r, _, _ = assemble_plaplace_residual(system, u, 0.0, jacobian=False)
        report.final_residual = _free_norm(system, r)
        return u, report, system
    system = assemble_plaplace(disc, kind, problem.p, problem.f, problem.g, condense=condense,
                               stabs=stabs)
    u, report = newton_solve(system, **newton)
    return u, report, system


# ---------------------------------------------------------------------------
# errors


def measure_errors(disc: Discretization, u_h: np.ndarray, exact, exact_grad, p: float):
    """(||G_h(I_h u - u_h)||_{L^p}, ||Pi_D u_h - u||_{L^p})."""
    Iu = disc.interpolate(exact)
    diff = Iu - u_h
    eg = 0.0
    ep = 0.0
    for t, op in enumerate(disc.ops):
        w = op.rule.weights
        g = op.G_at() @ diff[disc.layout.local_dofs(t)]
        eg += w @ np.linalg.norm(g, axis=1) ** p
        pot = (op.phi[:, : op.n_pot] @ op.VT) @ u_h[disc.layout.local_dofs(t)]
        ep += w @ np.abs(pot - exact(op.rule.points)) ** p
    return eg ** (1 / p), ep ** (1 / p)


def timed_solve(disc, problem, kind="rtn", **kw):
    t0 = time.perf_counter()
    u, report, system = solve(disc, problem, kind, **kw)
    return u, report, system, 1e3 * (time.perf_counter() - t0)


def fit_slope(h, err, last: int = 3) -> float:
    """Least-squares slope of log(err) against log(h) over the last points."""
    h = np.asarray(h, dtype=float)[-last:]
    err = np.asarray(err, dtype=float)[-last:]
    if len(h) < 2:
        return float("nan")
    return float(np.polyfit(np.log(h), np.log(err), 1)[0])
