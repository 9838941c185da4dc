"""Discrete unknowns, interpolator and element-local reconstructions.

Every local operator is a dense matrix acting on the local DOF layout of an
element: the element block (``poly_dim(l)`` coefficients) followed by one
block of ``k + 1`` coefficients per face, in the element's face order.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .mesh import PolytopalMesh, build_submesh
from .polyquad import (
    FaceBasis,
    ScaledBasis,
    SingularGram,
    element_basis,
    face_basis,
    face_quadrature,
    polygon_rule,
    poly_dim,
)

__all__ = [
    "SpecError",
    "SpaceSpec",
    "DofLayout",
    "Discretization",
    "LocalOperators",
    "face_weights",
    "interpolate",
    "seminorms",
]


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class SpaceSpec:
    """Face degree ``k`` and element degree ``l`` in {k-1, k, k+1}."""

    k: int
    l: int

    def __post_init__(self):
        if self.k < 0:
            raise SpecError("face degree k must be >= 0")
        if self.l not in (self.k - 1, self.k, self.k + 1):
            raise SpecError(f"element degree l={self.l} not in {{k-1, k, k+1}} for k={self.k}")

    @classmethod
    def from_offset(cls, k: int, offset: str = "same") -> "SpaceSpec":
        shift = {"minus": -1, "same": 0, "plus": 1}
        if offset not in shift:
            raise SpecError(f"unknown l-offset {offset!r}")
        return cls(k, k + shift[offset])

    @property
    def n_cell(self) -> int:
        return poly_dim(self.l)

    @property
    def n_face(self) -> int:
        return self.k + 1

    @property
    def potential_degree(self) -> int:
        return max(self.l, 0)


class DofLayout:
    """Global numbering: all element blocks first, then all face blocks."""

    def __init__(self, mesh: PolytopalMesh, spec: SpaceSpec):
        self.mesh = mesh
        self.spec = spec
        self.n_cell_dofs = mesh.n_elements * spec.n_cell
        self.n_face_dofs = mesh.n_faces * spec.n_face
        self.n_total = self.n_cell_dofs + self.n_face_dofs
        nc, nf = spec.n_cell, spec.n_face
        self._local = []
        for t in range(mesh.n_elements):
            cell = np.arange(t * nc, (t + 1) * nc)
            faces = [self.n_cell_dofs + f * nf + np.arange(nf) for f in mesh.element_faces[t]]
            self._local.append(np.concatenate([cell] + faces).astype(np.int64))

    def element_block(self, t: int) -> slice:
        nc = self.spec.n_cell
        return slice(t * nc, (t + 1) * nc)

    def face_block(self, f: int) -> slice:
        nf = self.spec.n_face
        start = self.n_cell_dofs + f * nf
        return slice(start, start + nf)

    def local_dofs(self, t: int) -> np.ndarray:
        return self._local[t]

    def boundary_dofs(self) -> np.ndarray:
        nf = self.spec.n_face
        bf = self.mesh.boundary_faces
        return (self.n_cell_dofs + (bf[:, None] * nf + np.arange(nf)[None, :])).ravel()

    def face_dofs(self) -> np.ndarray:
        return np.arange(self.n_cell_dofs, self.n_total)

    def zeros(self) -> np.ndarray:
        return np.zeros(self.n_total)


def face_weights(mesh: PolytopalMesh, t: int) -> np.ndarray:
    """Minimum-norm weights with sum_F w_F q(mean over F) = mean of q over T, q in P^1.

    For affine q the face means are the values at the face midpoints and the
    element mean is the value at the centroid.
    """
    fl = mesh.element_faces[t]
    hT = mesh.diameters[t]
    xF = (mesh.face_midpoints[fl] - mesh.centroids[t]) / hT
    A = np.vstack([np.ones(len(fl)), xF.T])
    b = np.array([1.0, 0.0, 0.0])
    w, *_ = np.linalg.lstsq(A, b, rcond=None)
    return w


class LocalOperators:
    """Reconstruction matrices for one element.

    Attributes
    ----------
    VT : (n_pot, nT) coefficients of the element potential v_T
    G : (2, n_k, nT) consistent gradient, one coefficient block per component
    R : (n_{k+1}, nT) potential reconstruction r_T
    DT : (n_l, nT) element difference operator
    DTF : list of (k+1, nT) face difference operators
    """

    def __init__(self, disc: "Discretization", t: int):
        mesh, spec = disc.mesh, disc.spec
        k, l = spec.k, spec.l
        self.element = t
        self.spec = spec
        self.faces = list(mesh.element_faces[t])
        self.normals = mesh.element_normals[t]
        self.face_lengths = mesh.face_lengths[self.faces]
        self.submesh = disc.submeshes[t]
        self.rule = polygon_rule(self.submesh.triangles, disc.elem_exactness)
        self.face_rules = [disc.face_rules[f] for f in self.faces]
        self.face_bases = [disc.face_bases[f] for f in self.faces]

        basis = ScaledBasis(mesh.centroids[t], mesh.diameters[t], k + 1)
        if disc.orthonormal:
            basis = basis.orthonormalized(self.rule)
        self.basis = basis

        nc, nf = spec.n_cell, spec.n_face
        nF = len(self.faces)
        self.n_local = nc + nF * nf
        self.face_offsets = [nc + i * nf for i in range(nF)]
        nk, nk1 = poly_dim(k), poly_dim(k + 1)
        npot = poly_dim(spec.potential_degree)
        self.n_k, self.n_k1, self.n_pot = nk, nk1, npot

        pts, w = self.rule.points, self.rule.weights
        self.phi = basis.values(pts)
        self.dphi = basis.gradients(pts)
        self.face_phi = [basis.values(r.points) for r in self.face_rules]
        self.face_dphi = [basis.gradients(r.points) for r in self.face_rules]
        self.face_psi = [b.values(r.points) for b, r in zip(self.face_bases, self.face_rules)]

        # element potential v_T
        VT = np.zeros((npot, self.n_local))
        if l >= 0:
            VT[:, :nc] = np.eye(nc)
            self.weights = None
        else:
            self.weights = face_weights(mesh, t)
            phi0 = float(self.phi[0, 0])
            for i, o in enumerate(self.face_offsets):
                VT[0, o] = self.weights[i] / phi0
        self.VT = VT

        # consistent gradient G_T
        phik = self.phi[:, :nk]
        Mk = phik.T @ (w[:, None] * phik)
        pot = self.phi[:, :npot] @ VT
        B = np.zeros((2, nk, self.n_local))
        for d in range(2):
            B[d] = -(self.dphi[:, :nk, d].T * w) @ pot
        for i, o in enumerate(self.face_offsets):
            fw = self.face_rules[i].weights
            m = (self.face_phi[i][:, :nk].T * fw) @ self.face_psi[i]
            for d in range(2):
                B[d][:, o:o + nf] += self.normals[i, d] * m
        try:
            cf = sla.cho_factor(Mk)
        except np.linalg.LinAlgError as exc:
            raise SingularGram(f"element {t}: P^k Gram matrix singular") from exc
        self.G = np.stack([sla.cho_solve(cf, B[d]) for d in range(2)])
        self.mass_k = Mk

        # potential reconstruction r_T: stiffness + mean constraint (saddle form)
        S = np.einsum("q,qid,qjd->ij", w, self.dphi, self.dphi)
        lap = basis.laplacians(pts)
        b = -(lap.T * w) @ pot
        for i, o in enumerate(self.face_offsets):
            fw = self.face_rules[i].weights
            dn = self.face_dphi[i] @ self.normals[i]
            b[:, o:o + nf] += (dn.T * fw) @ self.face_psi[i]
        mean_row = w @ self.phi
        A = np.zeros((nk1 + 1, nk1 + 1))
        A[:nk1, :nk1] = S
        A[:nk1, nk1] = mean_row
        A[nk1, :nk1] = mean_row
        rhs = np.vstack([b, (w @ pot)[None, :]])
        try:
            self.R = np.linalg.solve(A, rhs)[:nk1]
        except np.linalg.LinAlgError as exc:
            raise SingularGram(f"element {t}: r_T system singular") from exc
        self.stiffness_k1 = S

        # difference operators
        nl = poly_dim(l)
        if nl:
            phil = self.phi[:, :nl]
            Ml = phil.T @ (w[:, None] * phil)
            P = np.linalg.solve(Ml, (phil.T * w) @ self.phi)
            self.DT = P @ self.R - VT[:nl]
        else:
            self.DT = np.zeros((0, self.n_local))
        self.DTF = []
        for i, o in enumerate(self.face_offsets):
            fw = self.face_rules[i].weights
            psi = self.face_psi[i]
            MF = psi.T @ (fw[:, None] * psi)
            PF = np.linalg.solve(MF, (psi.T * fw) @ self.face_phi[i])
            D = PF @ self.R
            D[:, o:o + nf] -= np.eye(nf)
            self.DTF.append(D)

    # -- evaluation helpers -------------------------------------------------

    def potential_at(self, points) -> np.ndarray:
        return self.basis.values(points)[:, : self.n_pot] @ self.VT

    def G_at(self, points=None) -> np.ndarray:
        phik = (self.phi if points is None else self.basis.values(points))[:, : self.n_k]
        return np.einsum("qi,dit->qdt", phik, self.G)

    def R_at(self, points=None) -> np.ndarray:
        phi = self.phi if points is None else self.basis.values(points)
        return phi @ self.R

    def gradR_at(self, points=None) -> np.ndarray:
        dphi = self.dphi if points is None else self.basis.gradients(points)
        return np.einsum("qid,it->qdt", dphi, self.R)

    def gradDT_at(self, points=None) -> np.ndarray:
        nl = self.DT.shape[0]
        if nl == 0:
            n = len(self.rule.points) if points is None else len(points)
            return np.zeros((n, 2, self.n_local))
        dphi = self.dphi if points is None else self.basis.gradients(points)
        return np.einsum("qid,it->qdt", dphi[:, :nl], self.DT)

    def jump_at(self, i: int, points=None) -> np.ndarray:
        """(delta_TF - delta_T) v on face ``i`` at ``points`` (default: face rule)."""
        if points is None:
            psi, phi = self.face_psi[i], self.face_phi[i]
        else:
            psi = self.face_bases[i].values(points)
            phi = self.basis.values(points)
        out = psi @ self.DTF[i]
        nl = self.DT.shape[0]
        if nl:
            out = out - phi[:, :nl] @ self.DT
        return out

    def interpolate(self, v) -> np.ndarray:
        """Local interpolant I_T v with the discretization's quadrature."""
        nc, nf = self.spec.n_cell, self.spec.n_face
        out = np.zeros(self.n_local)
        if nc:
            vals = v(self.rule.points)
            phil = self.phi[:, :nc]
            w = self.rule.weights
            out[:nc] = np.linalg.solve(phil.T @ (w[:, None] * phil), phil.T @ (w * vals))
        for i, o in enumerate(self.face_offsets):
            r, psi = self.face_rules[i], self.face_psi[i]
            out[o:o + nf] = np.linalg.solve(psi.T @ (r.weights[:, None] * psi),
                                            psi.T @ (r.weights * v(r.points)))
        return out


class Discretization:
    """Mesh + space + quadrature settings, with per-element operator tables."""

    def __init__(self, mesh: PolytopalMesh, spec: SpaceSpec, *, rho: float = 0.1,
                 orthonormal: bool | None = None, elem_exactness: int | None = None,
                 face_exactness: int | None = None, threads: int = 1):
        self.mesh = mesh
        self.spec = spec
        self.rho = rho
        self.orthonormal = spec.k >= 3 if orthonormal is None else orthonormal
        self.elem_exactness = 2 * spec.k + 6 if elem_exactness is None else elem_exactness
        self.face_exactness = 2 * spec.k + 5 if face_exactness is None else face_exactness
        self.threads = max(1, int(threads))
        self.layout = DofLayout(mesh, spec)
        from .mesh import submeshes

        self.submeshes = submeshes(mesh, rho)
        self.face_rules = [face_quadrature(mesh, f, self.face_exactness) for f in range(mesh.n_faces)]
        self.face_bases = [face_basis(mesh, f, spec.k, orthonormal=self.orthonormal)
                           for f in range(mesh.n_faces)]
        self.ops = self._map(lambda t: LocalOperators(self, t), range(mesh.n_elements))

    def _map(self, fn, items):
        if self.threads > 1:
            with ThreadPoolExecutor(self.threads) as pool:
                return list(pool.map(fn, items))
        return [fn(i) for i in items]

    @property
    def n_elements(self) -> int:
        return self.mesh.n_elements

    def local(self, u: np.ndarray, t: int) -> np.ndarray:
        return u[self.layout.local_dofs(t)]

    def interpolate(self, v) -> np.ndarray:
        return interpolate(self, v)


def interpolate(disc: Discretization, v) -> np.ndarray:
    """Global interpolant I_h v: L2 projections on elements (P^l) and faces (P^k)."""
    layout, spec = disc.layout, disc.spec
    u = layout.zeros()
    nc, nf = spec.n_cell, spec.n_face
    for t, op in enumerate(disc.ops):
        if nc:
            w = op.rule.weights
            phil = op.phi[:, :nc]
            u[layout.element_block(t)] = np.linalg.solve(
                phil.T @ (w[:, None] * phil), phil.T @ (w * v(op.rule.points)))
    for f in range(disc.mesh.n_faces):
        r, b = disc.face_rules[f], disc.face_bases[f]
        psi = b.values(r.points)
        u[layout.face_block(f)] = np.linalg.solve(psi.T @ (r.weights[:, None] * psi),
                                                  psi.T @ (r.weights * v(r.points)))
    return u


def seminorms(disc: Discretization, u: np.ndarray, p: float):
    """Discrete W^{1,p} quantities of a global vector.

    Returns ``(norm_1p, boundary_seminorms, tnorm)`` where ``norm_1p`` is
    (sum_T ||G_T v||^p + |v|_{p,dT}^p)^{1/p}, ``boundary_seminorms[T]`` is
    |v|_{p,dT}, and ``tnorm`` is the element/face jump norm
    (sum_T ||grad v_T||^p + sum_F h_F^{1-p} ||v_F - v_T||_F^p)^{1/p}.
    """
    if not p > 1:
        raise ValueError("p must be > 1")
    total = 0.0
    ttotal = 0.0
    bnd = np.zeros(disc.n_elements)
    for t, op in enumerate(disc.ops):
        v = disc.local(u, t)
        w = op.rule.weights
        g = op.G_at() @ v
        total += w @ np.linalg.norm(g, axis=1) ** p
        s = 0.0
        tn = 0.0
        gv = np.einsum("qid,i->qd", op.dphi[:, : op.n_pot], op.VT @ v)
        tn += w @ np.linalg.norm(gv, axis=1) ** p
        for i, o in enumerate(op.face_offsets):
            fr = op.face_rules[i]
            hF = op.face_lengths[i]
            s += hF ** (1 - p) * (fr.weights @ np.abs(op.jump_at(i) @ v) ** p)
            vF = op.face_psi[i] @ v[o:o + disc.spec.n_face]
            vT = op.face_phi[i][:, : op.n_pot] @ (op.VT @ v)
            tn += hF ** (1 - p) * (fr.weights @ np.abs(vF - vT) ** p)
        bnd[t] = s ** (1 / p)
        total += s
        ttotal += tn
    return total ** (1 / p), bnd, ttotal ** (1 / p)
