import numpy as np
import pytest
import scipy.linalg as sla
from hypothesis import given, settings, strategies as st

from dsgd.checks import stability_bounds
from dsgd.core import Discretization, SpaceSpec, SpecError, seminorms
from dsgd.mesh import MeshFamilySpec, from_polygons, generate
from dsgd.polyquad import ScaledBasis, element_quadrature, poly_dim, segment_rule, triangle_rule
from dsgd.stabilization import (
    RTSpace,
    StabilizationKind,
    alt_lifting,
    build_stabilization,
    hho_boundary_stab,
    hmm_lifting,
    pivoted_solve,
    rtn_lifting,
)

SQUARE = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
PENTAGON = np.array([[0, 0], [1, 0], [1.3, 0.8], [0.4, 1.2], [-0.2, 0.6]])
FAMILIES = ["cartesian", "triangular", "hexagonal", "locally_refined"]


def single(vertices, spec):
    m = from_polygons(np.asarray(vertices, float), [list(range(len(vertices)))])
    return Discretization(m, spec)


def poly(center, degree, rng):
    b = ScaledBasis(center, 1.0, degree)
    c = rng.normal(size=poly_dim(degree))
    return lambda x: b.values(x) @ c


def field_l2(op, st, v):
    f = st.field_at(v)
    return np.sqrt(op.rule.weights @ (f**2).sum(axis=1))


def pair_with(op, st, v, fields):
    """(S v, phi)_T for each phi given as (nq, 2) values."""
    f = st.field_at(v)
    return np.array([op.rule.weights @ (f * phi).sum(axis=1) for phi in fields])


def pk_fields(op, k):
    phi = op.phi[:, :poly_dim(k)]
    out = []
    for i in range(phi.shape[1]):
        for d in range(2):
            e = np.zeros((len(phi), 2))
            e[:, d] = phi[:, i]
            out.append(e)
    return out


# -- RT spaces -------------------------------------------------------------


@pytest.mark.parametrize("m", [0, 1, 2, 3])
def test_rt_dimension_and_normal_traces(m):
    tri = np.array([[0.1, 0.2], [1.0, 0.0], [0.3, 0.9]])
    rule = triangle_rule(*tri, 2 * m + 4)
    rt = RTSpace(tri.mean(0), 1.0, m, rule)
    assert rt.dim == (m + 1) * (m + 3)
    assert np.abs(rt.gram(rule) - np.eye(rt.dim)).max() <= 1e-10
    # normal traces on each edge are polynomials of degree m in arclength
    for a, b in ((0, 1), (1, 2), (2, 0)):
        t = tri[b] - tri[a]
        n = np.array([t[1], -t[0]]) / np.linalg.norm(t)
        s = np.linspace(0, 1, m + 4)
        vals = rt.normal_trace(tri[a] + np.outer(s, t), n)
        V = np.vander(s, m + 1)
        coef, *_ = np.linalg.lstsq(V, vals, rcond=None)
        assert np.abs(V @ coef - vals).max() <= 1e-9 * max(1.0, np.abs(vals).max())


def test_pivoted_solve_drops_redundant():
    A = np.array([[1.0, 1.0], [1.0, 1.0]])
    x, rank = pivoted_solve(A, np.array([2.0, 2.0]))
    assert rank == 1 and np.allclose(A @ x, [2.0, 2.0])


def test_rt_control_equivalence_logged():
    # ||eta||^2 vs ||pi^{m-1} eta||^2 + sum_sigma h ||eta.n||^2 on random members
    tri = np.array([[0.0, 0.0], [1.0, 0.0], [0.2, 0.7]])
    m = 2
    rule = triangle_rule(*tri, 12)
    rt = RTSpace(tri.mean(0), 1.0, m, rule)
    low = ScaledBasis(tri.mean(0), 1.0, m - 1).orthonormalized(rule)
    h = np.linalg.norm(tri - np.roll(tri, 1, 0), axis=1).max()
    rng = np.random.default_rng(0)
    ratios = []
    for _ in range(50):
        c = rng.normal(size=rt.dim)
        eta = np.einsum("qjd,j->qd", rt.values(rule.points), c)
        lhs = rule.weights @ (eta**2).sum(1)
        P = low.values(rule.points)
        proj = P @ (P.T @ (rule.weights[:, None] * eta))
        rhs = rule.weights @ (proj**2).sum(1)
        for a, b in ((0, 1), (1, 2), (2, 0)):
            t = tri[b] - tri[a]
            n = np.array([t[1], -t[0]]) / np.linalg.norm(t)
            sr = segment_rule(tri[a], tri[b], 2 * m + 2)
            rhs += h * (sr.weights @ (rt.normal_trace(sr.points, n) @ c) ** 2)
        ratios.append(lhs / rhs)
    print(f"RT control equivalence ratio in [{min(ratios):.3f}, {max(ratios):.3f}]")
    assert 0 < min(ratios) <= max(ratios) < 1e3


# -- RTN ---------------------------------------------------------------------


@pytest.mark.parametrize("k,l", [(0, -1), (0, 0), (0, 1), (1, 0), (1, 1), (1, 2), (2, 2), (3, 3)])
def test_rtn_kernel_on_pk1(k, l):
    d = single(PENTAGON, SpaceSpec(k, l))
    op = d.ops[0]
    st = rtn_lifting(op)
    rng = np.random.default_rng(k)
    for _ in range(3):
        q = poly(op.basis.center, k + 1, rng)
        v = op.interpolate(q)
        qn = np.sqrt(op.rule.weights @ q(op.rule.points) ** 2)
        assert np.abs(st.qp_values @ v).max() <= 1e-11 * qn
        assert all(np.abs(c @ v).max() <= 1e-11 * qn for c in st.coeffs)


@pytest.mark.parametrize("family", FAMILIES)
@pytest.mark.parametrize("kind", ["rtn", "hmm"])
def test_s2_orthogonality_100_random(family, kind):
    m = generate(MeshFamilySpec(family, 0))
    spec = SpaceSpec(0, 0) if kind == "hmm" else SpaceSpec(1, 1)
    d = Discretization(m, spec)
    stabs = build_stabilization(d, kind)
    rng = np.random.default_rng(0)
    # one element per local size (element type)
    seen = {}
    for t, op in enumerate(d.ops):
        seen.setdefault(op.n_local, t)
    worst = 0.0
    for t in seen.values():
        op, st = d.ops[t], stabs[t]
        fields = pk_fields(op, spec.k)
        for _ in range(100):
            v = rng.normal(size=op.n_local)
            dots = pair_with(op, st, v, fields)
            norms = [np.sqrt(op.rule.weights @ (f**2).sum(1)) for f in fields]
            worst = max(worst, np.max(np.abs(dots) / (field_l2(op, st, v) * np.array(norms) + 1e-300)))
    assert worst <= 1e-10, worst


def test_rtn_s1_unit_square_eigen_oracle():
    d = single(SQUARE, SpaceSpec(0, 0))
    op = d.ops[0]
    st = rtn_lifting(op)
    assert op.n_local == 5
    # independent quadratic forms: ||S v||^2 with a finer rule, |v|^2 via seminorms
    fine = element_quadrature(d.mesh, 0, 12)
    cells = [fine.restrict(i) for i in range(4)]
    A = np.zeros((5, 5))
    for i, r in enumerate(cells):
        eta = st.spaces[i].values(r.points)  # (nq, dim, 2)
        F = np.einsum("qjd,jt->qdt", eta, st.coeffs[i]).reshape(-1, 5)
        A += F.T @ (np.repeat(r.weights, 2)[:, None] * F)
    dofs = d.layout.local_dofs(0)

    def quad(v):
        e = np.zeros(d.layout.n_total)
        e[dofs] = v
        return seminorms(d, e, 2.0)[1][0] ** 2

    # polarization of the boundary seminorm
    I = np.eye(5)
    B = np.array([[0.5 * (quad(I[a] + I[b]) - quad(I[a]) - quad(I[b])) for b in range(5)]
                  for a in range(5)])
    lam, vec = np.linalg.eigh(B)
    Z = vec[:, lam > 1e-9 * lam.max()]
    mu = sla.eigh(Z.T @ A @ Z, Z.T @ B @ Z, eigvals_only=True)
    lo, hi = stability_bounds(d, [st])
    assert abs(lo - mu.min()) <= 1e-8 * mu.max() and abs(hi - mu.max()) <= 1e-8 * mu.max()
    rng = np.random.default_rng(0)
    for _ in range(50):
        v = rng.normal(size=5)
        e = np.zeros(d.layout.n_total)
        e[dofs] = v
        s = seminorms(d, e, 2.0)[1][0]
        r = field_l2(op, st, v) ** 2 / s**2
        assert mu.min() * (1 - 1e-9) <= r <= mu.max() * (1 + 1e-9)
    print(f"unit square S1 constants: [{mu.min():.4f}, {mu.max():.4f}]")


@pytest.mark.parametrize("family", FAMILIES)
def test_s1_constants_stable_under_refinement(family):
    los = []
    for n in (1, 2):
        d = Discretization(generate(MeshFamilySpec(family, n)), SpaceSpec(1, 1))
        lo, hi = stability_bounds(d, build_stabilization(d, "rtn"))
        assert lo > 0
        los.append((lo, hi))
    print(f"{family}: S1 bounds {los}")
    assert max(los[0][0], los[1][0]) / min(los[0][0], los[1][0]) <= 2
    assert max(los[0][1], los[1][1]) / min(los[0][1], los[1][1]) <= 2


@pytest.mark.parametrize("kind", ["rtn", "hmm", "alt"])
def test_image_degree(kind):
    d = single(PENTAGON, SpaceSpec(0, 0))
    st = build_stabilization(d, kind)[0]
    assert st.image_degree == {"rtn": 2, "hmm": 0, "alt": 1}[kind]


@pytest.mark.parametrize("kind", ["rtn", "hmm"])
def test_control_identity_constant_fields(kind):
    # (G_T v + S_T v, eta)_T = sum_F (v_F, eta.n)_F for constant eta
    m = generate(MeshFamilySpec("hexagonal", 1))
    d = Discretization(m, SpaceSpec(0, 0 if kind == "hmm" else 0))
    stabs = build_stabilization(d, kind)
    rng = np.random.default_rng(0)
    for op, st in zip(d.ops, stabs):
        v = rng.normal(size=op.n_local)
        g = op.G_at() @ v + st.field_at(v)
        lhs = op.rule.weights @ g
        rhs = np.zeros(2)
        for i, o in enumerate(op.face_offsets):
            fr = op.face_rules[i]
            rhs += (fr.weights @ (op.face_psi[i] @ v[o:o + 1])) * op.normals[i]
        assert np.abs(lhs - rhs).max() <= 1e-12 * max(1.0, np.abs(v).max())


@pytest.mark.parametrize("k", [0, 1])
@pytest.mark.parametrize("p", [2.0, 4.0])
def test_rtn_consistency_slope(k, p):
    u = lambda x: np.sin(np.pi * x[:, 0]) * np.sin(np.pi * x[:, 1])  # noqa: E731
    hs, errs = [], []
    for n in (1, 2, 3):
        d = Discretization(generate(MeshFamilySpec("cartesian", n)), SpaceSpec(k, k))
        I = d.interpolate(u)
        s = 0.0
        for t, (op, st) in enumerate(zip(d.ops, build_stabilization(d, "rtn"))):
            s += op.rule.weights @ np.linalg.norm(st.field_at(d.local(I, t)), axis=1) ** p
        hs.append(d.mesh.h)
        errs.append(s ** (1 / p))
    slope = np.polyfit(np.log(hs), np.log(errs), 1)[0]
    print(f"k={k} p={p}: ||S_h I_h u|| slope {slope:.3f}")
    assert slope >= k + 1 - 0.2


@pytest.mark.parametrize("p", [1.75, 4.0])
def test_lp_equivalence_logged(p):
    d = single(PENTAGON, SpaceSpec(1, 1))
    op = d.ops[0]
    st = rtn_lifting(op)
    dofs = d.layout.local_dofs(0)
    rng = np.random.default_rng(1)
    ratios = []
    for _ in range(100):
        v = rng.normal(size=op.n_local)
        e = np.zeros(d.layout.n_total)
        e[dofs] = v
        sv = (op.rule.weights @ np.linalg.norm(st.field_at(v), axis=1) ** p) ** (1 / p)
        ratios.append(sv / seminorms(d, e, p)[1][0])
    print(f"p={p}: ||S v|| / |v|_p in [{min(ratios):.3f}, {max(ratios):.3f}]")
    assert 0 < min(ratios) and max(ratios) / min(ratios) < 50


# -- HMM ---------------------------------------------------------------------


def test_hmm_rejects_higher_order():
    d = single(SQUARE, SpaceSpec(1, 1))
    with pytest.raises(SpecError):
        hmm_lifting(d.ops[0])


@pytest.mark.parametrize("l", [-1, 0])
def test_hmm_affine_exact(l):
    d = single(PENTAGON, SpaceSpec(0, l))
    op = d.ops[0]
    st = hmm_lifting(op)
    v = op.interpolate(lambda x: 0.5 + 2 * x[:, 0] - x[:, 1])
    assert np.abs(st.field_at(v)).max() <= 1e-12
    assert np.abs(op.G_at() @ v + st.field_at(v) - [2.0, -1.0]).max() <= 1e-12


@pytest.mark.parametrize("l", [-1, 0])
def test_hmm_closed_form(l):
    d = single(PENTAGON, SpaceSpec(0, l))
    op = d.ops[0]
    st = hmm_lifting(op)
    sub = op.submesh
    xT = d.mesh.centroids[0]
    rng = np.random.default_rng(4)
    for _ in range(10):
        v = rng.normal(size=op.n_local)
        G = (op.G_at() @ v)[0]
        vT = (op.VT @ v)[0] * op.phi[0, 0]
        for i, o in enumerate(op.face_offsets):
            vF = op.face_psi[i][0, 0] * v[o]
            xF = d.mesh.face_midpoints[op.faces[i]]
            ref = G + (2 / sub.distances[i]) * (vT + G @ (xF - xT) - vF) * op.normals[i]
            got = (op.G_at() @ v + st.field_at(v))[op.rule.cells == i]
            assert np.abs(got - ref).max() <= 1e-12 * max(1.0, np.abs(ref).max())


def test_hmm_unit_square_hand_values():
    d = single(SQUARE, SpaceSpec(0, 0))
    op = d.ops[0]
    st = hmm_lifting(op)
    v = np.zeros(op.n_local)
    v[op.face_offsets[0]] = 1.0 / op.face_psi[0][0, 0]
    n0 = op.normals[0]
    g = op.G_at() @ v + st.field_at(v)
    for i in range(4):
        c = n0 @ op.normals[i]
        # own face: -n0, opposite: 3 n0, sides: n0
        expect = -n0 if c > 0.5 else (3 * n0 if c < -0.5 else n0)
        assert np.abs(g[op.rule.cells == i] - expect).max() <= 1e-13


def test_hmm_and_rtn_differ_on_triangle():
    m = from_polygons(np.array([[0, 0], [1, 0], [0.2, 0.9]]), [[0, 1, 2]])
    d = Discretization(m, SpaceSpec(0, 0))
    v = np.random.default_rng(0).normal(size=d.ops[0].n_local)
    a = hmm_lifting(d.ops[0]).field_at(v)
    b = rtn_lifting(d.ops[0]).field_at(v)
    assert np.abs(a - b).max() > 1e-6


# -- ALT ---------------------------------------------------------------------


@pytest.mark.parametrize("k,l", [(0, 0), (1, 1), (2, 1), (2, 3)])
def test_alt_kernel_and_gradient_orthogonality(k, l):
    d = single(PENTAGON, SpaceSpec(k, l))
    op = d.ops[0]
    st = alt_lifting(op)
    rng = np.random.default_rng(0)
    q = poly(op.basis.center, k + 1, rng)
    assert np.abs(st.field_at(op.interpolate(q))).max() <= 1e-11
    grads = [op.dphi[:, j, :] for j in range(1, poly_dim(k + 1))]
    for _ in range(20):
        v = rng.normal(size=op.n_local)
        dots = pair_with(op, st, v, grads)
        nrm = field_l2(op, st, v) * np.array([np.sqrt(op.rule.weights @ (g**2).sum(1)) for g in grads])
        assert (np.abs(dots) / (nrm + 1e-300)).max() <= 1e-11


@pytest.mark.parametrize("k", [1, 2])
def test_alt_full_s2_fails(k):
    d = single(PENTAGON, SpaceSpec(k, k))
    op = d.ops[0]
    st = alt_lifting(op)
    fields = pk_fields(op, k)
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(10):
        v = rng.normal(size=op.n_local)
        dots = pair_with(op, st, v, fields)
        worst = max(worst, np.abs(dots).max() / field_l2(op, st, v))
    print(f"k={k}: ALT violates full orthogonality by {worst:.3e}")
    assert worst > 1e-6


# -- HHO ---------------------------------------------------------------------


def test_hho_penalty_kernel_and_p2():
    d = single(PENTAGON, SpaceSpec(1, 1))
    op = d.ops[0]
    pen = hho_boundary_stab(op, 2.0)
    q = poly(op.basis.center, 2, np.random.default_rng(0))
    assert abs(pen.penalty(op.interpolate(q))) <= 1e-22
    v = np.random.default_rng(1).normal(size=op.n_local)
    e = np.zeros(d.layout.n_total)
    e[d.layout.local_dofs(0)] = v
    assert abs(pen.penalty(v) - seminorms(d, e, 2.0)[1][0] ** 2) <= 1e-12 * pen.penalty(v)


def _exact_cubed_jump(op, v, i, a, b):
    # the jump is affine on the face for k = 1: split at its root, then integrate exactly
    j0, j1 = op.jump_at(i, np.array([a, b])) @ v
    cuts = [0.0, 1.0]
    if j0 * j1 < 0:
        cuts.insert(1, j0 / (j0 - j1))
    out = 0.0
    for s0, s1 in zip(cuts[:-1], cuts[1:]):
        r = segment_rule(a + s0 * (b - a), a + s1 * (b - a), 6)
        out += r.weights @ np.abs(op.jump_at(i, r.points) @ v) ** 3
    return out


def test_hho_penalty_p3_quadrature_oracle():
    m = from_polygons(PENTAGON.astype(float), [list(range(5))])
    v = np.random.default_rng(2).normal(size=11)
    # same rules: penalty is exactly the discrete seminorm
    d = Discretization(m, SpaceSpec(1, 0))
    pen = hho_boundary_stab(d.ops[0], 3.0)
    e = np.zeros(d.layout.n_total)
    e[d.layout.local_dofs(0)] = v
    assert abs(pen.penalty(v) - seminorms(d, e, 3.0)[1][0] ** 3) <= 1e-12 * pen.penalty(v)
    # |jump|^3 is not polynomial: the fixed rule converges to the exact integral
    errs = []
    for fe in (7, 30):
        d = Discretization(m, SpaceSpec(1, 0), face_exactness=fe)
        op = d.ops[0]
        ref = sum(op.face_lengths[i] ** (-2) * _exact_cubed_jump(op, v, i, *m.face_endpoints(fc))
                  for i, fc in enumerate(op.faces))
        errs.append(abs(hho_boundary_stab(op, 3.0).penalty(v) - ref) / ref)
    print(f"p=3 penalty relative quadrature error: exactness 7 {errs[0]:.2e}, 30 {errs[1]:.2e}")
    assert errs[1] <= 1e-4 and errs[1] < errs[0]


def test_hho_not_a_lifting():
    d = single(SQUARE, SpaceSpec(0, 0))
    with pytest.raises(ValueError):
        build_stabilization(d, StabilizationKind.HHO)


@settings(max_examples=15, deadline=None)
@given(k=st.integers(0, 2), seed=st.integers(0, 10_000), jitter=st.floats(0.0, 0.3))
def test_rtn_orthogonality_random_quads(k, seed, jitter):
    rng = np.random.default_rng(seed)
    d = single(SQUARE + jitter * rng.uniform(-0.5, 0.5, size=(4, 2)), SpaceSpec(k, k))
    op = d.ops[0]
    st = rtn_lifting(op)
    v = rng.normal(size=op.n_local)
    fields = pk_fields(op, k)
    dots = pair_with(op, st, v, fields)
    assert np.abs(dots).max() <= 1e-10 * max(field_l2(op, st, v), 1e-300)
