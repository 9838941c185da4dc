"""Scaled monomial bases, quadrature on polygons and segments, projectors."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.linalg as sla
from scipy.special import roots_jacobi, roots_legendre

__all__ = [
    "UnsupportedDegree",
    "SingularGram",
    "QuadratureRule",
    "ScaledBasis",
    "FaceBasis",
    "poly_dim",
    "triangle_rule",
    "segment_rule",
    "polygon_rule",
    "element_quadrature",
    "face_quadrature",
    "element_basis",
    "face_basis",
    "l2_project",
    "elliptic_project",
]

MAX_EXACTNESS = 30


class UnsupportedDegree(ValueError):
    pass


class SingularGram(np.linalg.LinAlgError):
    pass


def poly_dim(degree: int) -> int:
    """Dimension of P^degree in two variables (0 for negative degrees)."""
    return 0 if degree < 0 else (degree + 1) * (degree + 2) // 2


@lru_cache(maxsize=None)
def monomial_exponents(degree: int) -> np.ndarray:
    """Exponents (a, b) of x^a y^b, graded by total degree."""
    exps = [(d - b, b) for d in range(degree + 1) for b in range(d + 1)]
    return np.array(exps, dtype=np.int64).reshape(-1, 2)


@dataclass(frozen=True)
class QuadratureRule:
    points: np.ndarray
    weights: np.ndarray
    degree: int
    # index of the sub-triangle each point belongs to (polygon rules only)
    cells: np.ndarray | None = None

    def integrate(self, values) -> np.ndarray:
        return np.tensordot(self.weights, values, axes=(0, 0))

    @property
    def measure(self) -> float:
        return float(self.weights.sum())

    def restrict(self, cell: int) -> "QuadratureRule":
        mask = self.cells == cell
        return QuadratureRule(self.points[mask], self.weights[mask], self.degree)


def _check_degree(degree):
    if degree > MAX_EXACTNESS:
        raise UnsupportedDegree(f"quadrature exactness {degree} exceeds {MAX_EXACTNESS}")
    return max(int(degree), 0)


@lru_cache(maxsize=None)
def _reference_triangle(degree):
    # collapsed Gauss-Jacobi (Stroud conical product) on (0,0),(1,0),(0,1)
    n = degree // 2 + 1
    xg, wg = roots_legendre(n)
    xj, wj = roots_jacobi(n, 1.0, 0.0)
    s = 0.5 * (xg + 1.0)
    r = 0.5 * (xj + 1.0)
    x = np.outer(r, np.ones(n)).ravel()
    y = np.outer(1.0 - r, s).ravel()
    w = np.outer(wj, wg).ravel() / 8.0
    pts = np.column_stack([x, y])
    pts.setflags(write=False)
    w.setflags(write=False)
    return pts, w


def triangle_rule(v0, v1, v2, degree: int) -> QuadratureRule:
    degree = _check_degree(degree)
    ref, w = _reference_triangle(degree)
    v0 = np.asarray(v0, dtype=float)
    J = np.column_stack([np.asarray(v1) - v0, np.asarray(v2) - v0])
    det = abs(np.linalg.det(J))
    return QuadratureRule(v0 + ref @ J.T, w * det, degree)


@lru_cache(maxsize=None)
def _reference_segment(degree):
    n = degree // 2 + 1
    x, w = roots_legendre(n)
    return 0.5 * (x + 1.0), 0.5 * w


def segment_rule(a, b, degree: int) -> QuadratureRule:
    degree = _check_degree(degree)
    s, w = _reference_segment(degree)
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    length = float(np.linalg.norm(b - a))
    return QuadratureRule(a + np.outer(s, b - a), w * length, degree)


def polygon_rule(triangles, degree: int) -> QuadratureRule:
    """Union of triangle rules; ``triangles`` is (n, 3, 2)."""
    parts = [triangle_rule(*tri, degree) for tri in triangles]
    return QuadratureRule(
        np.concatenate([p.points for p in parts]),
        np.concatenate([p.weights for p in parts]),
        parts[0].degree,
        np.repeat(np.arange(len(parts)), [len(p.weights) for p in parts]),
    )


def element_quadrature(mesh, element: int, exactness: int, star=None) -> QuadratureRule:
    """Fan-triangulation rule of a mesh element, grouped by sub-triangle."""
    _check_degree(exactness)
    if star is None:
        from .mesh import build_submesh

        star = build_submesh(mesh, element).star
    loop = mesh.elements[element]
    xy = mesh.vertices[loop]
    tris = np.stack([np.broadcast_to(star, xy.shape), xy, np.roll(xy, -1, axis=0)], axis=1)
    return polygon_rule(tris, exactness)


def face_quadrature(mesh, face: int, exactness: int) -> QuadratureRule:
    a, b = mesh.face_endpoints(face)
    return segment_rule(a, b, exactness)


# ---------------------------------------------------------------------------
# bases


class ScaledBasis:
    """Monomials in ``(x - center) / scale`` up to ``degree``, graded.

    ``coeffs`` (lower triangular) maps monomials to basis functions, so the
    first ``poly_dim(l)`` functions always span P^l.
    """

    def __init__(self, center, scale: float, degree: int, coeffs=None):
        self.center = np.asarray(center, dtype=float)
        self.scale = float(scale)
        self.degree = int(degree)
        self.exponents = monomial_exponents(max(self.degree, 0))
        self.dim = poly_dim(self.degree)
        self.coeffs = np.eye(self.dim) if coeffs is None else np.asarray(coeffs)

    def dim_of(self, degree: int) -> int:
        if degree > self.degree:
            raise ValueError(f"basis has degree {self.degree} < {degree}")
        return poly_dim(degree)

    def _powers(self, points, upto):
        z = (np.atleast_2d(points) - self.center) / self.scale
        pw = np.ones((len(z), upto + 1, 2))
        for j in range(1, upto + 1):
            pw[:, j] = pw[:, j - 1] * z
        return pw

    def monomials(self, points) -> np.ndarray:
        e = self.exponents[: self.dim]
        pw = self._powers(points, max(self.degree, 0))
        return pw[:, e[:, 0], 0] * pw[:, e[:, 1], 1]

    def monomial_gradients(self, points) -> np.ndarray:
        e = self.exponents[: self.dim]
        pw = self._powers(points, max(self.degree, 0))
        ex, ey = e[:, 0], e[:, 1]
        gx = np.where(ex > 0, ex * pw[:, np.maximum(ex - 1, 0), 0], 0.0) * pw[:, ey, 1]
        gy = pw[:, ex, 0] * np.where(ey > 0, ey * pw[:, np.maximum(ey - 1, 0), 1], 0.0)
        return np.stack([gx, gy], axis=-1) / self.scale

    def monomial_laplacians(self, points) -> np.ndarray:
        e = self.exponents[: self.dim]
        pw = self._powers(points, max(self.degree, 0))
        ex, ey = e[:, 0], e[:, 1]
        dxx = np.where(ex > 1, ex * (ex - 1) * pw[:, np.maximum(ex - 2, 0), 0], 0.0) * pw[:, ey, 1]
        dyy = pw[:, ex, 0] * np.where(ey > 1, ey * (ey - 1) * pw[:, np.maximum(ey - 2, 0), 1], 0.0)
        return (dxx + dyy) / self.scale**2

    def values(self, points) -> np.ndarray:
        return self.monomials(points) @ self.coeffs.T

    def gradients(self, points) -> np.ndarray:
        g = self.monomial_gradients(points)
        return np.einsum("qmd,im->qid", g, self.coeffs)

    def laplacians(self, points) -> np.ndarray:
        return self.monomial_laplacians(points) @ self.coeffs.T

    def gram(self, rule: QuadratureRule) -> np.ndarray:
        V = self.values(rule.points)
        return V.T @ (rule.weights[:, None] * V)

    def orthonormalized(self, rule: QuadratureRule) -> "ScaledBasis":
        """Gram-Cholesky orthonormalization (keeps the graded nesting)."""
        G = self.gram(rule)
        try:
            L = np.linalg.cholesky(G)
        except np.linalg.LinAlgError as exc:
            raise SingularGram("basis Gram matrix is not positive definite") from exc
        C = sla.solve_triangular(L, np.eye(self.dim), lower=True)
        return type(self)(self.center, self.scale, self.degree, C @ self.coeffs)

    def condition_number(self, rule: QuadratureRule) -> float:
        return float(np.linalg.cond(self.gram(rule)))


class FaceBasis(ScaledBasis):
    """1D monomials in the arclength coordinate ``(x - mid).tau / length``."""

    def __init__(self, center, tangent, scale: float, degree: int, coeffs=None):
        self.center = np.asarray(center, dtype=float)
        self.tangent = np.asarray(tangent, dtype=float)
        self.scale = float(scale)
        self.degree = int(degree)
        self.dim = 0 if degree < 0 else degree + 1
        self.coeffs = np.eye(self.dim) if coeffs is None else np.asarray(coeffs)

    def dim_of(self, degree: int) -> int:
        return 0 if degree < 0 else degree + 1

    def monomials(self, points) -> np.ndarray:
        s = ((np.atleast_2d(points) - self.center) @ self.tangent) / self.scale
        return s[:, None] ** np.arange(self.dim)[None, :]

    def monomial_gradients(self, points):
        raise NotImplementedError("face bases have no 2D gradient")

    def orthonormalized(self, rule: QuadratureRule) -> "FaceBasis":
        G = self.gram(rule)
        try:
            L = np.linalg.cholesky(G)
        except np.linalg.LinAlgError as exc:
            raise SingularGram("face Gram matrix is not positive definite") from exc
        C = sla.solve_triangular(L, np.eye(self.dim), lower=True)
        return FaceBasis(self.center, self.tangent, self.scale, self.degree, C @ self.coeffs)


def element_basis(mesh, element: int, degree: int, rule=None, orthonormal=False) -> ScaledBasis:
    basis = ScaledBasis(mesh.centroids[element], mesh.diameters[element], degree)
    if orthonormal:
        if rule is None:
            rule = element_quadrature(mesh, element, 2 * degree)
        basis = basis.orthonormalized(rule)
    return basis


def face_basis(mesh, face: int, degree: int, orthonormal=False) -> FaceBasis:
    basis = FaceBasis(mesh.face_midpoints[face], mesh.face_tangents[face],
                      mesh.face_lengths[face], degree)
    if orthonormal:
        basis = basis.orthonormalized(face_quadrature(mesh, face, 2 * degree))
    return basis


# ---------------------------------------------------------------------------
# projectors


def _factor_spd(G):
    try:
        return sla.cho_factor(G)
    except np.linalg.LinAlgError as exc:
        raise SingularGram("Gram matrix factorization failed") from exc


def l2_project(basis: ScaledBasis, rule: QuadratureRule, v, degree: int | None = None,
               check: bool = True) -> np.ndarray:
    """Coefficients of the L2-orthogonal projection of ``v`` onto P^degree.

    ``v`` is a callable on (n, 2) points or an array of values at the rule
    points.  Returns an empty array for ``degree < 0``.
    """
    degree = basis.degree if degree is None else degree
    n = basis.dim_of(degree)
    if n == 0:
        return np.zeros(0)
    vals = v(rule.points) if callable(v) else np.asarray(v)
    V = basis.values(rule.points)[:, :n]
    G = V.T @ (rule.weights[:, None] * V)
    b = V.T @ (rule.weights * vals)
    c = sla.cho_solve(_factor_spd(G), b)
    if check:
        res = G @ c - b
        scale = np.sqrt(np.abs(rule.weights @ vals**2) * np.abs(np.diag(G)).max()) + 1e-300
        if np.abs(res).max() > 1e-10 * scale:
            raise SingularGram("projection residual too large; Gram matrix ill-conditioned")
    return c


def elliptic_project(basis: ScaledBasis, rule: QuadratureRule, v, grad_v,
                     degree: int | None = None) -> np.ndarray:
    """Elliptic projection: gradient-orthogonal to P^degree, with matching mean."""
    degree = basis.degree if degree is None else degree
    n = basis.dim_of(degree)
    vals = v(rule.points) if callable(v) else np.asarray(v)
    w = rule.weights
    V = basis.values(rule.points)[:, :n]
    mean_row = w @ V
    if degree == 0:
        return np.array([(w @ vals) / mean_row[0]])
    grads = grad_v(rule.points) if callable(grad_v) else np.asarray(grad_v)
    D = basis.gradients(rule.points)[:, :n, :]
    S = np.einsum("q,qid,qjd->ij", w, D, D)
    b = np.einsum("q,qid,qd->i", w, D, grads)
    A = np.zeros((n + 1, n + 1))
    A[:n, :n] = S
    A[:n, n] = mean_row
    A[n, :n] = mean_row
    rhs = np.concatenate([b, [w @ vals]])
    try:
        sol = np.linalg.solve(A, rhs)
    except np.linalg.LinAlgError as exc:
        raise SingularGram("elliptic projection system is singular") from exc
    return sol[:n]
