"""Algebraic invariants of the local operators and stabilizations.

Every check returns a :class:`CheckResult` holding the worst normalized
defect over all elements.  No PDE is solved here.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .core import Discretization, seminorms
from .polyquad import ScaledBasis, elliptic_project, poly_dim
from .stabilization import StabilizationKind, build_stabilization

__all__ = [
    "CheckResult",
    "TOLERANCES",
    "check_commutation",
    "check_potential_projector",
    "check_kernel",
    "check_orthogonality",
    "check_difference_identity",
    "check_constant_field",
    "check_image_degree",
    "stability_bounds",
    "norm_equivalence",
    "run_suite",
]

TOLERANCES = {
    "commutation": 1e-12,
    "potential_projector": 1e-11,
    "kernel": 1e-11,
    "orthogonality": 1e-10,
    "difference_identity": 1e-12,
    "constant_field": 1e-12,
}

_EPS = 1e-300


@dataclass
class CheckResult:
    name: str
    value: float
    tol: float
    kind: str = ""
    detail: str = ""

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.value) and self.value <= self.tol)

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        kind = f"[{self.kind}] " if self.kind else ""
        extra = f" ({self.detail})" if self.detail else ""
        return f"{tag} {kind}{self.name}: {self.value:.3e} <= {self.tol:.0e}{extra}"


def _random_poly(op, degree, rng):
    """Random polynomial of ``degree`` on the element, as (values, gradients) callables."""
    basis = ScaledBasis(op.basis.center, op.basis.scale, degree)
    c = rng.normal(size=poly_dim(degree))
    return (lambda x: basis.values(x) @ c,
            lambda x: np.einsum("qid,i->qd", basis.gradients(x), c))


def _l2(w, vals):
    v = vals.reshape(len(w), -1)
    return float(np.sqrt(w @ (v**2).sum(axis=1)))


def check_commutation(disc: Discretization, rng=None, samples: int = 2) -> CheckResult:
    """G_T I_T q = pi^k(grad q) for q of degree k+2."""
    rng = np.random.default_rng(rng)
    k = disc.spec.k
    worst = 0.0
    for op in disc.ops:
        w = op.rule.weights
        phik = op.phi[:, : op.n_k]
        for _ in range(samples):
            q, dq = _random_poly(op, k + 2, rng)
            g = dq(op.rule.points)
            coef = np.linalg.solve(op.mass_k, phik.T @ (w[:, None] * g))
            diff = op.G_at() @ op.interpolate(q) - phik @ coef
            worst = max(worst, _l2(w, diff) / (_l2(w, g) + _EPS))
    return CheckResult("commutation", worst, TOLERANCES["commutation"])


def check_potential_projector(disc: Discretization, rng=None, samples: int = 2) -> CheckResult:
    """r_T I_T q equals the elliptic projection onto P^{k+1} (l >= 0 only)."""
    rng = np.random.default_rng(rng)
    k = disc.spec.k
    if disc.spec.l < 0:
        return CheckResult("potential_projector", 0.0, TOLERANCES["potential_projector"],
                           detail="skipped for l = -1")
    worst = 0.0
    for op in disc.ops:
        w = op.rule.weights
        for _ in range(samples):
            q, dq = _random_poly(op, k + 3, rng)
            ref = op.phi @ elliptic_project(op.basis, op.rule, q, dq, k + 1)
            diff = op.R_at() @ op.interpolate(q) - ref
            worst = max(worst, _l2(w, diff) / (_l2(w, q(op.rule.points)) + _EPS))
    return CheckResult("potential_projector", worst, TOLERANCES["potential_projector"])


def check_kernel(disc: Discretization, stabs, kind, rng=None, samples: int = 2) -> CheckResult:
    """S_T I_T q = 0 for q in P^{k+1}, relative to ||grad q||."""
    rng = np.random.default_rng(rng)
    worst = 0.0
    for op, st in zip(disc.ops, stabs):
        w = op.rule.weights
        for _ in range(samples):
            q, dq = _random_poly(op, disc.spec.k + 1, rng)
            s = st.field_at(op.interpolate(q))
            worst = max(worst, _l2(w, s) / (_l2(w, dq(op.rule.points)) + _EPS))
    return CheckResult("kernel", worst, TOLERANCES["kernel"], kind=str(StabilizationKind(kind).value))


def check_orthogonality(disc: Discretization, stabs, kind, rng=None, samples: int = 3) -> CheckResult:
    """(S_T v, phi)_T = 0 for phi in P^k(T)^2 (RTN, HMM) or phi in grad P^{k+1} (ALT).

    Normalized by ||phi|| times the norm of the full reconstructed gradient,
    which stays meaningful where S_T vanishes identically.
    """
    kind = StabilizationKind(kind)
    rng = np.random.default_rng(rng)
    worst = 0.0
    for op, st in zip(disc.ops, stabs):
        w = op.rule.weights
        if kind is StabilizationKind.ALT:
            tests = op.dphi[:, 1: op.n_k1, :]  # grad P^{k+1}
            base = op.gradR_at()
        else:
            phik = op.phi[:, : op.n_k]
            tests = np.concatenate([np.stack([phik, 0 * phik], -1), np.stack([0 * phik, phik], -1)], 1)
            base = op.G_at()
        tnorm = np.sqrt(np.einsum("q,qid,qid->i", w, tests, tests))
        for _ in range(samples):
            v = rng.normal(size=op.n_local)
            s = st.field_at(v)
            full = _l2(w, s + base @ v) + _l2(w, s)
            inner = np.einsum("q,qd,qid->i", w, s, tests)
            worst = max(worst, float(np.max(np.abs(inner) / (tnorm * full + _EPS))))
    return CheckResult("orthogonality", worst, TOLERANCES["orthogonality"], kind=kind.value)


def check_difference_identity(disc: Discretization, rng=None, samples: int = 2) -> CheckResult:
    """(delta_T v, (delta_TF v)_F) = I_T r_T v - v with I_T applied to the evaluated r_T v."""
    rng = np.random.default_rng(rng)
    nc, nf = disc.spec.n_cell, disc.spec.n_face
    worst = 0.0
    for op in disc.ops:
        for _ in range(samples):
            v = rng.normal(size=op.n_local)
            coef = op.R @ v
            Ir = op.interpolate(lambda x, c=coef: op.basis.values(x) @ c)
            lhs = np.concatenate([op.DT @ v] + [D @ v for D in op.DTF])
            diff = lhs - (Ir - v)
            if nc == 0:
                # no element unknowns: only the face differences are defined
                diff = diff[op.DT.shape[0]:]
            scale = max(np.abs(v).max(), np.abs(Ir).max())
            worst = max(worst, np.abs(diff).max() / (scale + _EPS))
    return CheckResult("difference_identity", worst, TOLERANCES["difference_identity"])


def check_constant_field(disc: Discretization, stabs, kind, rng=None, samples: int = 2) -> CheckResult:
    """(grad_D v, eta)_T = sum_F (v_F, eta . n_TF)_F for constant eta."""
    kind = StabilizationKind(kind)
    rng = np.random.default_rng(rng)
    nf = disc.spec.n_face
    worst = 0.0
    for op, st in zip(disc.ops, stabs):
        w = op.rule.weights
        base = op.gradR_at() if kind is StabilizationKind.ALT else op.G_at()
        for _ in range(samples):
            v = rng.normal(size=op.n_local)
            eta = rng.normal(size=2)
            lhs = w @ ((base @ v + st.field_at(v)) @ eta)
            rhs, scale = 0.0, 0.0
            for i, o in enumerate(op.face_offsets):
                fr = op.face_rules[i]
                vF = op.face_psi[i] @ v[o:o + nf]
                rhs += (fr.weights @ vF) * (eta @ op.normals[i])
                scale += fr.weights @ np.abs(vF) * np.linalg.norm(eta)
            worst = max(worst, abs(lhs - rhs) / (scale + _EPS))
    return CheckResult("constant_field", worst, TOLERANCES["constant_field"], kind=kind.value)


def check_image_degree(disc: Discretization, stabs, kind) -> CheckResult:
    """Piecewise-polynomial image degree (k+2 for RTN, 0 for HMM)."""
    kind = StabilizationKind(kind)
    k, l = disc.spec.k, disc.spec.l
    expected = {StabilizationKind.RTN: k + 2, StabilizationKind.HMM: 0,
                StabilizationKind.ALT: max(l, k) + 1}[kind]
    bad = sum(st.image_degree != expected for st in stabs)
    return CheckResult("image_degree", float(bad), 0.0, kind=kind.value,
                       detail=f"expected degree {expected}")


def _local_forms(op, st):
    w = op.rule.weights
    flat = st.qp_values.reshape(-1, op.n_local)
    A = flat.T @ (np.repeat(w, 2)[:, None] * flat)
    B = np.zeros((op.n_local, op.n_local))
    for i in range(len(op.faces)):
        J = op.jump_at(i)
        B += J.T @ (op.face_rules[i].weights[:, None] * J) / op.face_lengths[i]
    return A, B


def stability_bounds(disc: Discretization, stabs, tol: float = 1e-9):
    """Extreme generalized eigenvalues of ||S_T v||^2 against |v|_{2,dT}^2.

    Computed on the complement of the kernel of the boundary seminorm; returns
    ``(lambda_min, lambda_max)`` over all elements.
    """
    lo, hi = np.inf, 0.0
    for op, st in zip(disc.ops, stabs):
        A, B = _local_forms(op, st)
        lam, vec = np.linalg.eigh(B)
        keep = lam > tol * lam.max()
        Z = vec[:, keep]
        mu = sla.eigh(Z.T @ A @ Z, Z.T @ B @ Z, eigvals_only=True)
        lo, hi = min(lo, mu.min()), max(hi, mu.max())
    return float(lo), float(hi)


def norm_equivalence(disc: Discretization, stabs, kind, p: float = 2.0, samples: int = 20, rng=None):
    """Range of tnorm / ||grad_D v||_{L^p} over random v in U_{h,0}."""
    kind = StabilizationKind(kind)
    rng = np.random.default_rng(rng)
    ratios = []
    bnd = disc.layout.boundary_dofs()
    for _ in range(samples):
        v = rng.normal(size=disc.layout.n_total)
        v[bnd] = 0.0
        _, _, tn = seminorms(disc, v, p)
        g = 0.0
        for t, (op, st) in enumerate(zip(disc.ops, stabs)):
            base = op.gradR_at() if kind is StabilizationKind.ALT else op.G_at()
            vl = disc.local(v, t)
            g += op.rule.weights @ np.linalg.norm((base + st.qp_values) @ vl, axis=1) ** p
        ratios.append(tn / g ** (1 / p))
    return float(min(ratios)), float(max(ratios))


def run_suite(disc: Discretization, kinds=None, rng=0, extended: bool = False) -> list:
    """Run every applicable check; ``extended`` adds the S1 and norm-equivalence reports."""
    rng = np.random.default_rng(rng)
    k = disc.spec.k
    if kinds is None:
        kinds = ["rtn", "alt"] + (["hmm"] if k == 0 and disc.spec.l <= 0 else [])
    out = [check_commutation(disc, rng), check_potential_projector(disc, rng),
           check_difference_identity(disc, rng)]
    for kind in kinds:
        stabs = build_stabilization(disc, kind)
        out += [check_kernel(disc, stabs, kind, rng), check_orthogonality(disc, stabs, kind, rng),
                check_constant_field(disc, stabs, kind, rng), check_image_degree(disc, stabs, kind)]
        if extended:
            lo, hi = stability_bounds(disc, stabs)
            out.append(CheckResult("stability_lower_bound", 0.0 if lo > 1e-12 else np.inf, 0.0, kind=kind,
                                   detail=f"eigenvalues in [{lo:.3e}, {hi:.3e}]"))
            a, b = norm_equivalence(disc, stabs, kind, rng=rng)
            out.append(CheckResult("norm_equivalence", 0.0 if 0 < a <= b < np.inf else np.inf, 0.0,
                                   kind=kind, detail=f"ratio in [{a:.3f}, {b:.3f}]"))
    return out
