"""Gradient-discretisation quantities: coercivity, consistency, limit-conformity."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sps
import scipy.sparse.linalg as spla

from .core import Discretization, SpecError
from .mesh import MeshFamilySpec, generate
from .core import SpaceSpec
from .schemes import SolverError, fit_slope, gradient_blocks
from .stabilization import StabilizationKind

__all__ = [
    "EigenFailure",
    "GdOperators",
    "GdReport",
    "coercivity_constant",
    "consistency_defect",
    "limit_conformity_defect",
    "gd_study",
]


class EigenFailure(RuntimeError):
    pass


class GdOperators:
    """Per-element reconstruction matrices of the gradient discretisation.

    ``grad[t]`` maps local DOFs to the reconstructed gradient at the element
    quadrature points (nq, 2, nT); ``pot[t]`` maps them to Pi_D v (nq, nT).
    """

    def __init__(self, disc: Discretization, kind="rtn", stabs=None):
        kind = StabilizationKind(kind)
        if kind is StabilizationKind.HHO:
            raise SpecError("HHO is not a gradient discretisation (separate face penalty)")
        self.disc, self.kind = disc, kind
        blocks = gradient_blocks(disc, kind, stabs=stabs)
        self.grad = [b[0][1] for b in blocks]
        self.pot = [op.phi[:, : op.n_pot] @ op.VT for op in disc.ops]
        self.weights = [op.rule.weights for op in disc.ops]
        self.points = [op.rule.points for op in disc.ops]
        n = disc.layout.n_total
        free = np.ones(n, dtype=bool)
        free[disc.layout.boundary_dofs()] = False
        self.free = free
        self._K = self._M = None

    def _assemble(self, mats):
        rows, cols, vals = [], [], []
        for t, A in enumerate(mats):
            d = self.disc.layout.local_dofs(t)
            rows.append(np.repeat(d, len(d)))
            cols.append(np.tile(d, len(d)))
            vals.append(A.ravel())
        n = self.disc.layout.n_total
        A = sps.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                           shape=(n, n))
        return A[self.free][:, self.free].tocsc()

    @property
    def K(self):
        """Gram matrix of the gradient reconstruction on U_{h,0}."""
        if self._K is None:
            mats = []
            for w, B in zip(self.weights, self.grad):
                flat = B.reshape(-1, B.shape[-1])
                mats.append(flat.T @ (np.repeat(w, 2)[:, None] * flat))
            self._K = self._assemble(mats)
        return self._K

    @property
    def M(self):
        """Mass matrix of the potential reconstruction on U_{h,0}."""
        if self._M is None:
            self._M = self._assemble([P.T @ (w[:, None] * P) for w, P in zip(self.weights, self.pot)])
        return self._M

    def embed(self, v_free):
        v = np.zeros(self.disc.layout.n_total)
        v[self.free] = v_free
        return v

    def grad_norm(self, v, p):
        s = 0.0
        for t, (w, B) in enumerate(zip(self.weights, self.grad)):
            g = B @ v[self.disc.layout.local_dofs(t)]
            s += w @ np.linalg.norm(g, axis=1) ** p
        return s ** (1 / p)

    def pot_norm(self, v, p):
        s = 0.0
        for t, (w, P) in enumerate(zip(self.weights, self.pot)):
            s += w @ np.abs(P @ v[self.disc.layout.local_dofs(t)]) ** p
        return s ** (1 / p)

    def functional(self, psi, div_psi):
        """Vector of l(v) = int grad_D v . psi + Pi_D v div psi over all DOFs."""
        r = np.zeros(self.disc.layout.n_total)
        for t, (w, B, P, x) in enumerate(zip(self.weights, self.grad, self.pot, self.points)):
            ps = psi(x)
            loc = np.einsum("q,qd,qdt->t", w, ps, B) + (w * div_psi(x)) @ P
            np.add.at(r, self.disc.layout.local_dofs(t), loc)
        return r


def _ops(disc, kind, ops):
    return ops if ops is not None else GdOperators(disc, kind)


def coercivity_constant(disc: Discretization, kind="rtn", p: float = 2.0, *, ops=None,
                        tol: float = 1e-8, maxiter: int = 2000, n_random: int = 200, seed: int = 0):
    """C_D = max ||Pi_D v||_{L^p} / ||grad_D v||_{L^p} over U_{h,0}.

    Exact (power iteration) for p = 2; for p != 2 a lower bound over the p = 2
    maximiser, interpolants of a few smooth modes and random candidates.
    """
    if not p > 1:
        raise ValueError("p must be > 1")
    g = _ops(disc, kind, ops)
    K, M = g.K, g.M
    try:
        lu = spla.splu(K)
    except RuntimeError as exc:
        raise EigenFailure(f"gradient Gram matrix singular: {exc}") from exc
    # the lowest Laplace mode is close to the maximiser
    x = disc.interpolate(lambda pts: np.sin(np.pi * pts[:, 0]) * np.sin(np.pi * pts[:, 1]))[g.free]
    x += 1e-3 * np.random.default_rng(seed).normal(size=len(x))
    lam = 0.0
    for _ in range(maxiter):
        y = lu.solve(M @ x)
        nrm = np.linalg.norm(y)
        if nrm == 0:
            raise EigenFailure("power iteration collapsed to zero")
        y /= nrm
        new = float(y @ (M @ y)) / float(y @ (K @ y))
        if abs(new - lam) <= tol * abs(new):
            lam, x = new, y
            break
        lam, x = new, y
    else:
        raise EigenFailure(f"power iteration did not converge in {maxiter} steps")
    if p == 2.0:
        return float(np.sqrt(lam))
    rng = np.random.default_rng(seed)
    cands = [g.embed(x)]
    for a in range(1, 4):
        for b in range(1, 4):
            cands.append(disc.interpolate(
                lambda pts, a=a, b=b: np.sin(a * np.pi * pts[:, 0]) * np.sin(b * np.pi * pts[:, 1])))
    cands += [g.embed(rng.normal(size=K.shape[0])) for _ in range(n_random)]
    best = 0.0
    for v in cands:
        v = v * g.free
        den = g.grad_norm(v, p)
        if den > 0:
            best = max(best, g.pot_norm(v, p) / den)
    return best


def consistency_defect(disc: Discretization, phi, grad_phi, p: float = 2.0, kind="rtn", *,
                       ops=None, exact: bool = False):
    """(potential defect, gradient defect) at v = I_h phi (upper bound for S_D).

    With ``exact=True`` and p = 2 the minimiser of the squared defect sum over
    all v (no boundary condition) is used instead.
    """
    g = _ops(disc, kind, ops)
    if exact:
        if p != 2.0:
            raise ValueError("exact S_D is only available for p = 2")
        v = _sd_minimiser(g, phi, grad_phi)
    else:
        v = disc.interpolate(phi)
    sp_, sg = 0.0, 0.0
    for t, (w, B, P, x) in enumerate(zip(g.weights, g.grad, g.pot, g.points)):
        vl = v[disc.layout.local_dofs(t)]
        sp_ += w @ np.abs(P @ vl - phi(x)) ** p
        sg += w @ np.linalg.norm(B @ vl - grad_phi(x), axis=1) ** p
    return sp_ ** (1 / p), sg ** (1 / p)


def _sd_minimiser(g: GdOperators, phi, grad_phi):
    disc = g.disc
    n = disc.layout.n_total
    rows, cols, vals = [], [], []
    rhs = np.zeros(n)
    for t, (w, B, P, x) in enumerate(zip(g.weights, g.grad, g.pot, g.points)):
        d = disc.layout.local_dofs(t)
        flat = B.reshape(-1, B.shape[-1])
        w2 = np.repeat(w, 2)
        A = flat.T @ (w2[:, None] * flat) + P.T @ (w[:, None] * P)
        rhs_t = flat.T @ (w2 * grad_phi(x).ravel()) + P.T @ (w * phi(x))
        rows.append(np.repeat(d, len(d)))
        cols.append(np.tile(d, len(d)))
        vals.append(A.ravel())
        np.add.at(rhs, d, rhs_t)
    A = sps.csc_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                       shape=(n, n))
    return spla.spsolve(A, rhs)


def limit_conformity_defect(disc: Discretization, psi, div_psi, p: float = 2.0, kind="rtn", *,
                            ops=None, n_random: int = 200, seed: int = 0):
    """W_D(psi): exact dual norm for p = 2, sampled lower bound otherwise.

    Returns ``(value, is_exact)``.
    """
    g = _ops(disc, kind, ops)
    r = g.functional(psi, div_psi)[g.free]
    try:
        y = spla.splu(g.K).solve(r)
    except RuntimeError as exc:
        raise SolverError(f"gradient Gram matrix singular: {exc}") from exc
    if p == 2.0:
        return float(np.sqrt(max(r @ y, 0.0))), True
    rng = np.random.default_rng(seed)
    best = 0.0
    for v in [y] + [rng.normal(size=len(r)) for _ in range(n_random)]:
        den = g.grad_norm(g.embed(v), p)
        if den > 0:
            best = max(best, abs(r @ v) / den)
    return best, False


@dataclass
class GdReport:
    h: list = field(default_factory=list)
    coercivity: list = field(default_factory=list)
    sd_potential: list = field(default_factory=list)
    sd_gradient: list = field(default_factory=list)
    wd: list = field(default_factory=list)
    wd_exact: bool = True

    def slopes(self) -> dict:
        out = {}
        for name in ("sd_potential", "sd_gradient", "wd"):
            vals = getattr(self, name)
            if len(vals) >= 2 and all(v > 0 for v in vals):
                out[name] = fit_slope(self.h, vals)
        return out


def gd_study(family: str, levels, k: int, l: int | None = None, kind="rtn", p: float = 2.0, *,
             phi=None, grad_phi=None, psi=None, div_psi=None, coercivity: bool = True) -> GdReport:
    """Evaluate C_D, S_D and W_D along a mesh family."""
    rep = GdReport()
    spec = SpaceSpec(k, k if l is None else l)
    for n in levels:
        mesh = generate(MeshFamilySpec(family, n))
        disc = Discretization(mesh, spec)
        g = GdOperators(disc, kind)
        rep.h.append(mesh.h)
        if coercivity:
            rep.coercivity.append(coercivity_constant(disc, kind, p, ops=g))
        if phi is not None:
            a, b = consistency_defect(disc, phi, grad_phi, p, kind, ops=g)
            rep.sd_potential.append(a)
            rep.sd_gradient.append(b)
        if psi is not None:
            val, exact = limit_conformity_defect(disc, psi, div_psi, p, kind, ops=g)
            rep.wd.append(val)
            rep.wd_exact = rep.wd_exact and exact
    return rep
