import numpy as np
import pytest

from dsgd import cases, schemes
from dsgd.core import Discretization, SpaceSpec
from dsgd.mesh import MeshFamilySpec, from_polygons, generate
from dsgd.polyquad import element_quadrature
from dsgd.stabilization import build_stabilization

SQUARE = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])


def disc_of(family="hexagonal", n=0, k=1, l=None, **kw):
    return Discretization(generate(MeshFamilySpec(family, n)), SpaceSpec(k, k if l is None else l), **kw)


def free_part(system, r):
    return r[system.free]


# -- problem specs -----------------------------------------------------------


def test_problem_spec_p2_is_linear():
    ps = schemes.ProblemSpec.from_case(cases.trigonometric(2.0))
    assert ps.flux == "linear" and ps.g is None
    assert schemes.ProblemSpec.from_case(cases.exponential()).g is not None
    with pytest.raises(ValueError):
        schemes.ProblemSpec(p=1.0)


def test_fit_slope_exact_power_law():
    h = np.array([0.5, 0.25, 0.125, 0.0625])
    assert abs(schemes.fit_slope(h, 3 * h**2.5) - 2.5) <= 1e-12


# -- residual and Jacobian ----------------------------------------------------


@pytest.mark.parametrize("kind", ["rtn", "hmm", "alt", "hho"])
@pytest.mark.parametrize("p,eps", [(3.0, 0.0), (4.0, 0.0), (1.75, 1e-2)])
def test_jacobian_vs_finite_differences(kind, p, eps):
    d = disc_of("locally_refined", 0, k=0, l=0)
    case = cases.trigonometric(p)
    sys_ = schemes.assemble_plaplace(d, kind, p, case.f)
    rng = np.random.default_rng(0)
    u = rng.normal(size=sys_.n_total)
    _, J, _ = schemes.assemble_plaplace_residual(sys_, u, eps)
    J = J.toarray()
    scale = np.abs(u).max()
    h = 1e-6 * scale
    worst = 0.0
    for j in rng.choice(sys_.n_total, 12, replace=False):
        e = np.zeros(sys_.n_total)
        e[j] = h
        rp, _, _ = schemes.assemble_plaplace_residual(sys_, u + e, eps, jacobian=False)
        rm, _, _ = schemes.assemble_plaplace_residual(sys_, u - e, eps, jacobian=False)
        fd = (rp - rm) / (2 * h)
        worst = max(worst, np.abs(fd - J[:, j]).max() / np.abs(J).max())
    assert worst <= 1e-6


@pytest.mark.parametrize("kind", ["rtn", "hmm", "alt", "hho"])
@pytest.mark.parametrize("p", [2.0, 3.0])
def test_jacobian_symmetric(kind, p):
    d = disc_of("hexagonal", 0, k=0, l=0)
    sys_ = schemes.assemble_plaplace(d, kind, p)
    u = np.random.default_rng(1).normal(size=sys_.n_total)
    _, J, _ = schemes.assemble_plaplace_residual(sys_, u)
    J = J.toarray()
    assert np.abs(J - J.T).max() <= 1e-12 * np.abs(J).max()


def test_p2_plaplace_equals_linear():
    d = disc_of("triangular", 0, k=1)
    f = cases.trigonometric().f
    a = schemes.assemble_linear(d, "rtn", f)
    b = schemes.assemble_plaplace(d, "rtn", 2.0, f)
    u = np.random.default_rng(2).normal(size=a.n_total)
    ra, Ja, _ = schemes.assemble_plaplace_residual(a, u)
    rb, Jb, _ = schemes.assemble_plaplace_residual(b, u)
    assert np.abs(ra - rb).max() <= 1e-13 * np.abs(ra).max()
    assert abs(Ja - Jb).max() <= 1e-13 * abs(Ja).max()
    # p = 2: residual is affine with slope J
    r0, _, _ = schemes.assemble_plaplace_residual(a, np.zeros_like(u), jacobian=False)
    assert np.abs(ra - r0 - Ja @ u).max() <= 1e-12 * np.abs(ra).max()


def test_zero_state_zero_residual():
    d = disc_of("cartesian", 0, k=1)
    sys_ = schemes.assemble_plaplace(d, "rtn", 4.0)
    r, _, _ = schemes.assemble_plaplace_residual(sys_, np.zeros(sys_.n_total))
    assert np.abs(r).max() == 0.0


@pytest.mark.parametrize("spec", [SpaceSpec(0, 0), SpaceSpec(1, 1), SpaceSpec(2, 1)], ids=str)
def test_rtn_local_matrix_splits(spec):
    # S2 makes the cross term vanish: Gram(G + S) = Gram(G) + Gram(S)
    d = Discretization(generate(MeshFamilySpec("hexagonal", 0)), spec)
    stabs = build_stabilization(d, "rtn")
    sys_ = schemes.assemble_linear(d, "rtn", stabs=stabs)
    local = sys_.local_matrices()
    for t, (op, st) in enumerate(zip(d.ops, stabs)):
        w2 = np.repeat(op.rule.weights, 2)[:, None]
        G = op.G_at().reshape(-1, op.n_local)
        S = st.qp_values.reshape(-1, op.n_local)
        ref = G.T @ (w2 * G) + S.T @ (w2 * S)
        assert np.abs(local[t] - ref).max() <= 1e-12 * np.abs(ref).max()


def test_one_element_stiffness_dense_oracle():
    m = from_polygons(SQUARE, [[0, 1, 2, 3]])
    d = Discretization(m, SpaceSpec(0, 0))
    op = d.ops[0]
    st = build_stabilization(d, "rtn")[0]
    K = schemes.assemble_linear(d, "rtn", stabs=[st]).local_matrices()[0]
    assert K.shape == (5, 5)
    # oracle: high-order quadrature of grad_D basis functions, per sub-triangle
    fine = element_quadrature(m, 0, 16, star=op.submesh.star)
    Kref = np.zeros((5, 5))
    for i in range(4):
        r = fine.restrict(i)
        grad = op.G_at(r.points) + np.einsum("qjd,jt->qdt", st.spaces[i].values(r.points), st.coeffs[i])
        flat = grad.reshape(-1, 5)
        Kref += flat.T @ (np.repeat(r.weights, 2)[:, None] * flat)
    assert np.abs(K - Kref).max() <= 1e-12 * np.abs(Kref).max()


# -- linear solves ----------------------------------------------------------


def test_zero_source_zero_solution():
    d = disc_of("hexagonal", 1, k=1)
    u, rep, _ = schemes.solve(d, schemes.ProblemSpec(p=2.0, flux="linear"))
    assert np.abs(u).max() == 0.0 and rep.converged


@pytest.mark.parametrize("kind", ["rtn", "hmm", "alt", "hho"])
@pytest.mark.parametrize("spec", [SpaceSpec(0, -1), SpaceSpec(0, 0), SpaceSpec(1, 2), SpaceSpec(2, 1)], ids=str)
def test_condensed_equals_full(kind, spec):
    if kind == "hmm" and spec.k > 0:
        pytest.skip("HMM is lowest order")
    d = Discretization(generate(MeshFamilySpec("locally_refined", 1)), spec)
    case = cases.exponential(2.0)
    ps = schemes.ProblemSpec.from_case(case)
    stabs = None if kind == "hho" else build_stabilization(d, kind)
    a, _, _ = schemes.solve(d, ps, kind, condense=True, stabs=stabs)
    b, _, _ = schemes.solve(d, ps, kind, condense=False, stabs=stabs)
    faces = d.layout.face_dofs()
    assert np.abs(a[faces] - b[faces]).max() <= 1e-10 * np.abs(b).max()
    assert np.abs(a - b).max() <= 1e-10 * np.abs(b).max()


def test_condensed_equals_full_plaplace():
    d = disc_of("triangular", 1, k=1)
    ps = schemes.ProblemSpec.from_case(cases.trigonometric(4.0))
    a, ra, _ = schemes.solve(d, ps, condense=True)
    b, rb, _ = schemes.solve(d, ps, condense=False)
    assert ra.converged and rb.converged
    assert np.abs(a - b).max() <= 1e-10 * np.abs(b).max()


def test_linear_solve_residual():
    d = disc_of("hexagonal", 1, k=2)
    case = cases.trigonometric()
    sys_ = schemes.assemble_linear(d, "rtn", case.f)
    u = schemes.solve_linear(sys_)
    r, _, _ = schemes.assemble_plaplace_residual(sys_, u, jacobian=False)
    assert np.linalg.norm(free_part(sys_, r)) <= 1e-10 * np.linalg.norm(free_part(sys_, sys_.load))


@pytest.mark.parametrize("kind", ["rtn", "alt", "hho"])
@pytest.mark.parametrize("family", ["cartesian", "triangular", "hexagonal", "locally_refined"])
@pytest.mark.parametrize("k,l", [(0, 0), (1, 0), (1, 2), (2, 2)])
def test_polynomial_exactness(kind, family, k, l):
    d = Discretization(generate(MeshFamilySpec(family, 0)), SpaceSpec(k, l))
    case = cases.polynomial(k + 1, 2.0, seed=k + 3 * l)
    u, _, _ = schemes.solve(d, schemes.ProblemSpec.from_case(case), kind)
    eg, _ = schemes.measure_errors(d, u, case.u, case.grad_u, 2.0)
    assert eg <= 1e-9


def test_hmm_polynomial_exactness():
    d = disc_of("hexagonal", 0, k=0, l=-1)
    case = cases.polynomial(1, 2.0, seed=1)
    u, _, _ = schemes.solve(d, schemes.ProblemSpec.from_case(case), "hmm")
    assert schemes.measure_errors(d, u, case.u, case.grad_u, 2.0)[0] <= 1e-9


def test_interpolant_has_zero_error():
    d = disc_of("hexagonal", 1, k=1)
    case = cases.trigonometric()
    eg, _ = schemes.measure_errors(d, d.interpolate(case.u), case.u, case.grad_u, 2.0)
    assert eg <= 1e-13


def test_dirichlet_values_are_face_projections():
    d = disc_of("cartesian", 0, k=2)
    g = cases.exponential().u
    idx, vals = schemes.dirichlet_vector(d, g)
    Ig = d.interpolate(g)
    assert np.abs(Ig[idx] - vals).max() <= 1e-13 * np.abs(vals).max()


# -- Newton ------------------------------------------------------------------


def test_p2_one_iteration():
    d = disc_of("triangular", 1, k=1)
    case = cases.trigonometric()
    sys_ = schemes.assemble_plaplace(d, "rtn", 2.0, case.f)
    u, rep = schemes.newton_solve(sys_)
    assert rep.converged and rep.iterations == 1


@pytest.mark.parametrize("p,case", [(4.0, "trig"), (3.0, "trig"), (1.75, "exp")])
def test_newton_converges_and_monotone(p, case):
    d = disc_of("triangular", 1, k=1)
    c = cases.CASES[case](p)
    u, rep, _ = schemes.solve(d, schemes.ProblemSpec.from_case(c))
    assert rep.converged
    assert rep.iterations >= 1
    if p < 2:
        assert rep.eps_schedule == list(schemes.EPS_SCHEDULE)
    # per regularization level, accepted steps decrease the residual
    res = rep.residuals
    drops = [b < a for a, b in zip(res, res[1:])]
    assert sum(drops) >= len(drops) - len(rep.eps_schedule) + 1


def test_newton_max_iterations():
    d = disc_of("triangular", 1, k=1)
    c = cases.trigonometric(4.0)
    sys_ = schemes.assemble_plaplace(d, "rtn", 4.0, c.f)
    with pytest.raises(schemes.MaxIterations) as info:
        schemes.newton_solve(sys_, max_iter=1, strict=True)
    assert info.value.report.iterations == 1
    u, rep = schemes.newton_solve(sys_, max_iter=1)
    assert not rep.converged


def test_p4_triangular_n3_converges():
    d = disc_of("triangular", 3, k=0)
    u, rep, _ = schemes.solve(d, schemes.ProblemSpec.from_case(cases.trigonometric(4.0)))
    assert rep.converged and rep.iterations >= 2


def test_hho_and_dsgd_differ_but_both_accurate():
    d = disc_of("hexagonal", 2, k=1)
    case = cases.trigonometric()
    ps = schemes.ProblemSpec.from_case(case)
    a, _, _ = schemes.solve(d, ps, "rtn")
    b, _, _ = schemes.solve(d, ps, "hho")
    assert np.abs(a - b).max() > 1e-8
    for u in (a, b):
        assert schemes.measure_errors(d, u, case.u, case.grad_u, 2.0)[0] < 5e-2


def test_threads_do_not_change_solution():
    m = generate(MeshFamilySpec("hexagonal", 1))
    ps = schemes.ProblemSpec.from_case(cases.trigonometric())
    a, _, _ = schemes.solve(Discretization(m, SpaceSpec(1, 1)), ps)
    b, _, _ = schemes.solve(Discretization(m, SpaceSpec(1, 1), threads=2), ps)
    assert np.array_equal(a, b)
