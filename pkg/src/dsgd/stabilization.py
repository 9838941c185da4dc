"""Stabilizing contributions added to the consistent gradient.

RTN, HMM and ALT liftings produce a vector field that is polynomial on each
face-based sub-triangle ``P_TF``; HHO instead contributes a separate
face-penalty term.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .core import Discretization, LocalOperators, SpecError
from .polyquad import ScaledBasis, SingularGram, monomial_exponents, poly_dim

__all__ = [
    "StabilizationKind",
    "RTSpace",
    "StabOperator",
    "FacePenalty",
    "rtn_lifting",
    "hmm_lifting",
    "alt_lifting",
    "hho_boundary_stab",
    "build_stabilization",
    "pivoted_solve",
]

PIVOT_TOL = 1e-12


class StabilizationKind(str, enum.Enum):
    RTN = "rtn"
    HMM = "hmm"
    ALT = "alt"
    HHO = "hho"


def pivoted_solve(A: np.ndarray, b: np.ndarray, tol: float = PIVOT_TOL):
    """Solve a symmetric Gram system, dropping columns below the pivot cutoff.

    Returns ``(x, rank)``; dropped unknowns are set to zero.
    """
    _, R, piv = sla.qr(A, pivoting=True, mode="economic")
    diag = np.abs(np.diag(R))
    rank = int((diag > tol * diag[0]).sum())
    if rank == 0:
        raise SingularGram("Gram matrix is numerically zero")
    sel = np.sort(piv[:rank])
    x = np.zeros((A.shape[1],) + b.shape[1:])
    x[sel] = np.linalg.solve(A[np.ix_(sel, sel)], b[sel])
    return x, rank


class RTSpace:
    """RT^m on a triangle spanned by P^m(P)^2 plus xt * (homogeneous P^m).

    ``xt`` is the position relative to ``center`` scaled by ``scale``.  When a
    quadrature rule is given, the spanning set is orthonormalized in L2(P):
    a column-pivoted QR of the Gram matrix drops directions below the pivot
    cutoff, then two Cholesky passes produce ``transform`` (raw -> orthonormal).
    """

    def __init__(self, center, scale: float, degree: int, rule=None):
        self.center = np.asarray(center, dtype=float)
        self.scale = float(scale)
        self.degree = int(degree)
        self.scalar = ScaledBasis(self.center, self.scale, self.degree)
        self.n_poly = poly_dim(self.degree)
        self.n_span = 2 * self.n_poly + self.degree + 1
        self._hom = monomial_exponents(self.degree)[self.n_poly - self.degree - 1:]
        self.transform = np.eye(self.n_span)
        self.rank = self.n_span
        if rule is not None:
            self._orthonormalize(rule)

    @property
    def dim(self) -> int:
        return self.transform.shape[1]

    def raw_values(self, points) -> np.ndarray:
        pts = np.atleast_2d(points)
        phi = self.scalar.values(pts)
        z = (pts - self.center) / self.scale
        hom = z[:, None, 0] ** self._hom[None, :, 0] * z[:, None, 1] ** self._hom[None, :, 1]
        out = np.zeros((len(pts), self.n_span, 2))
        n = self.n_poly
        out[:, :n, 0] = phi
        out[:, n:2 * n, 1] = phi
        out[:, 2 * n:, :] = hom[:, :, None] * z[:, None, :]
        return out

    def values(self, points) -> np.ndarray:
        """(n_points, dim, 2) field values of the basis functions."""
        raw = self.raw_values(points)
        return np.matmul(raw.transpose(0, 2, 1), self.transform).transpose(0, 2, 1)

    def normal_trace(self, points, normal) -> np.ndarray:
        return self.values(points) @ np.asarray(normal)

    def gram(self, rule) -> np.ndarray:
        eta = self.values(rule.points)
        flat = eta.transpose(0, 2, 1).reshape(-1, eta.shape[1])
        return flat.T @ (np.repeat(rule.weights, 2)[:, None] * flat)

    def _orthonormalize(self, rule, tol: float = PIVOT_TOL):
        raw = self.raw_values(rule.points).transpose(0, 2, 1).reshape(-1, self.n_span)
        A = raw.T @ (np.repeat(rule.weights, 2)[:, None] * raw)
        _, R, piv = sla.qr(A, pivoting=True, mode="economic")
        diag = np.abs(np.diag(R))
        rank = int((diag > tol * diag[0]).sum())
        sel = np.sort(piv[:rank])
        T = np.eye(self.n_span)[:, sel]
        for _ in range(2):
            G = T.T @ A @ T
            try:
                L = np.linalg.cholesky(G)
            except np.linalg.LinAlgError as exc:
                raise SingularGram("RT Gram matrix is not positive definite") from exc
            T = T @ sla.solve_triangular(L, np.eye(len(G)), lower=True).T
        self.transform = T
        self.rank = rank


@dataclass
class StabOperator:
    """Per-element stabilization acting on local DOFs.

    ``coeffs[i]`` maps local DOFs to field coefficients on sub-triangle ``i``
    (in ``spaces[i]``); ``qp_values`` evaluates the field at the element
    quadrature points, shape (n_points, 2, n_local).
    """

    kind: StabilizationKind
    element: int
    image_degree: int
    spaces: list
    coeffs: list
    qp_values: np.ndarray
    ranks: list

    def field_at(self, v: np.ndarray) -> np.ndarray:
        return self.qp_values @ v


@dataclass
class FacePenalty:
    """HHO face term sum_F h_F^{1-p} int_F |jump|^{p-2} jump * jump_v."""

    element: int
    p: float
    weights: np.ndarray  # (n_face_points,) includes h_F^{1-p}
    jumps: np.ndarray  # (n_face_points, n_local)

    def penalty(self, u: np.ndarray, v: np.ndarray | None = None) -> float:
        ju = self.jumps @ u
        jv = ju if v is None else self.jumps @ v
        return float(self.weights @ (np.abs(ju) ** (self.p - 2) * ju * jv))


def _lifting(op: LocalOperators, degree: int, volume: np.ndarray, kind) -> StabOperator:
    """Solve the per-sub-triangle Riesz problems.

    ``volume`` holds the volumetric field of the right-hand side at the
    element quadrature points, (n_points, 2, n_local); the face term is the
    jump (delta_TF - delta_T) tested against eta . n_TF on F.
    """
    sub = op.submesh
    rule = op.rule
    spaces, coeffs, ranks = [], [], []
    qp = np.zeros((len(rule.weights), 2, op.n_local))
    for i in range(len(op.faces)):
        tri = sub.triangles[i]
        scale = float(np.max(np.linalg.norm(tri - np.roll(tri, 1, axis=0), axis=1)))
        mask = rule.cells == i
        rt = RTSpace(tri.mean(axis=0), scale, degree, rule.restrict(i))
        w = rule.weights[mask]
        eta = rt.values(rule.points[mask])
        flat = eta.transpose(0, 2, 1).reshape(-1, eta.shape[1])
        wflat = np.repeat(w, 2)[:, None] * flat
        A = flat.T @ wflat
        rhs = wflat.T @ volume[mask].reshape(-1, op.n_local)
        fr = op.face_rules[i]
        etan = rt.normal_trace(fr.points, op.normals[i])
        rhs += (etan.T * fr.weights) @ op.jump_at(i)
        try:
            c, rank = pivoted_solve(A, rhs)
        except SingularGram as exc:
            raise SingularGram(f"element {op.element}: RT Gram on sub-triangle {i} degenerate") from exc
        spaces.append(rt)
        coeffs.append(c)
        ranks.append(rank)
        qp[mask] = np.matmul(eta.transpose(0, 2, 1), c)
    return StabOperator(kind, op.element, degree + 1, spaces, coeffs, qp, ranks)


def rtn_lifting(op: LocalOperators) -> StabOperator:
    """S_T = sum_F L_TF with L_TF in RT^{k+1}(P_TF)."""
    dG = op.gradR_at() - op.G_at()
    volume = -(dG - op.gradDT_at())
    return _lifting(op, op.spec.k + 1, volume, StabilizationKind.RTN)


def alt_lifting(op: LocalOperators) -> StabOperator:
    """Lifting in RT^{max(l,k)} for the gradient grad r_T + S~_T."""
    degree = max(op.spec.l, op.spec.k)
    return _lifting(op, degree, op.gradDT_at(), StabilizationKind.ALT)


def hmm_lifting(op: LocalOperators) -> StabOperator:
    """Lowest-order lifting: (|F| / |P_TF|) delta_TF n_TF, constant on each P_TF."""
    if op.spec.k != 0 or op.spec.l > 0:
        raise SpecError("HMM stabilization requires k = 0 and l <= 0")
    sub, rule = op.submesh, op.rule
    qp = np.zeros((len(rule.weights), 2, op.n_local))
    coeffs, spaces = [], []
    for i in range(len(op.faces)):
        # delta_TF is constant on F: its value is psi_0 * coefficient
        dtf = op.face_psi[i][0, 0] * op.DTF[i][0]
        c = (op.face_lengths[i] / sub.areas[i]) * np.outer(op.normals[i], dtf)
        qp[rule.cells == i] = c
        coeffs.append(c)
        spaces.append(None)
    return StabOperator(StabilizationKind.HMM, op.element, 0, spaces, coeffs, qp,
                        [2] * len(op.faces))


def hho_boundary_stab(op: LocalOperators, p: float = 2.0) -> FacePenalty:
    """Face penalty with scaling h_F^{1-p} (matching the discrete seminorm)."""
    ws, js = [], []
    for i in range(len(op.faces)):
        fr = op.face_rules[i]
        ws.append(op.face_lengths[i] ** (1 - p) * fr.weights)
        js.append(op.jump_at(i))
    return FacePenalty(op.element, p, np.concatenate(ws), np.concatenate(js))


_BUILDERS = {
    StabilizationKind.RTN: rtn_lifting,
    StabilizationKind.HMM: hmm_lifting,
    StabilizationKind.ALT: alt_lifting,
}


def build_stabilization(disc: Discretization, kind) -> list:
    """Stabilization operators for every element (not for HHO)."""
    kind = StabilizationKind(kind)
    if kind is StabilizationKind.HHO:
        raise ValueError("HHO uses hho_boundary_stab, not a lifting")
    builder = _BUILDERS[kind]
    return disc._map(lambda op: builder(op), disc.ops)
