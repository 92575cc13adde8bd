import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cafm_lab import diffcore as dc
from cafm_lab.constraints import (AffineEquality, BoxBounds, ConstraintError, ConstraintSet, CountThreshold,
                                  QuadraticMass, affine_line, violation)
from cafm_lab.projection import (ProjectionConfig, ProjectionError, al_project, backward_implicit,
                                 backward_unrolled, count_project, hard_project, project, project_affine,
                                 project_box, project_values, sqp_map, sqp_project)

EXACT = ProjectionConfig(damping=1e-12, max_iter=50, feas_tol=1e-12)


def line(c=0.0):
    return ConstraintSet((affine_line([1.0, 1.0], c),), 2)


def quad(c=1.0, d=2):
    return ConstraintSet((QuadraticMass(c, d),), d)


def fd_vjp(f, y, u, h=1e-6):
    g = np.zeros_like(y)
    for i in np.ndindex(y.shape):
        yp, ym = y.copy(), y.copy()
        yp[i] += h
        ym[i] -= h
        g[i] = np.sum(u * (f(yp) - f(ym))) / (2 * h)
    return g


# config

@pytest.mark.parametrize("bad", [dict(max_iter=0), dict(damping=-1.0), dict(backward_mode="x"),
                                 dict(sqp_mode="x"), dict(al={"rho_init": 200.0})])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        ProjectionConfig(**bad)


# affine

def test_affine_examples():
    A, b = np.array([[1.0, 1.0]]), np.array([0.0])
    assert np.allclose(project_affine(A, b, [1.0, 1.0], 1e-14).x_proj, [0.0, 0.0], atol=1e-12)
    assert np.allclose(project_affine(A, b, [2.0, 0.0], 1e-14).x_proj, [1.0, -1.0], atol=1e-12)
    y = np.array([3.0, -3.0])
    assert np.linalg.norm(project_affine(A, b, y, 1e-6).x_proj - y) <= 1e-6 * np.linalg.norm(y)


def test_affine_adaptive_fallback_on_rank_deficient_rows():
    A = np.array([[1.0, 1.0], [1.0, 1.0]])
    res = project_affine(A, [1.0, 1.0], [0.0, 0.0], damping=0.0)
    assert np.allclose(res.x_proj, [0.5, 0.5], atol=1e-4)


# box

def test_box_examples():
    assert project_box(-1, 1, [2.0, -2.0]).x_proj.tolist() == [1.0, -1.0]
    assert project_box(-1, 1, [0.3, -0.2]).x_proj.tolist() == [0.3, -0.2]
    assert project_box(-1, 1, [1.0, -1.0]).x_proj.tolist() == [1.0, -1.0]
    with pytest.raises(ConstraintError):
        project_box(1, -1, [0.0])


# sqp

@pytest.mark.parametrize("mode", ["qp_linearized", "restoration"])
def test_sqp_affine_one_step_equals_closed_form(mode):
    rng = np.random.default_rng(0)
    A, b = rng.standard_normal((2, 5)), rng.standard_normal(2)
    y = rng.standard_normal((4, 5))
    cs = ConstraintSet((AffineEquality(A, b),), 5)
    got = sqp_project(cs, y, ProjectionConfig(max_iter=1, sqp_mode=mode)).x_proj
    assert np.allclose(got, project_affine(A, b, y, 1e-6).x_proj, atol=1e-12)


@pytest.mark.parametrize("mode", ["qp_linearized", "restoration"])
def test_sqp_quadmass_radial(mode):
    res = sqp_project(quad(), [2.0, 0.0], ProjectionConfig(max_iter=5, sqp_mode=mode))
    assert np.allclose(res.x_proj, [1.0, 0.0], atol=1e-6)


def test_sqp_feasible_point_fixed():
    res = sqp_project(quad(), [0.6, 0.8], ProjectionConfig())
    assert res.iterations_used == 0 and np.array_equal(res.x_proj, [0.6, 0.8])


def test_sqp_rejects_inequalities():
    cs = ConstraintSet((BoxBounds(-1, 1, 2), QuadraticMass(1.0, 2)), 2)
    with pytest.raises(ConstraintError):
        sqp_project(cs, [2.0, 0.0])


def test_sqp_monotone_residual_in_basin():
    rng = np.random.default_rng(1)
    cs = quad(4.0, 8)
    for _ in range(50):
        y = rng.standard_normal(8)
        y *= np.sqrt(4.0 + rng.uniform(-0.5, 0.5)) / np.linalg.norm(y)
        x, prev = dc.Tensor(y[None]), abs(np.sum(y * y) - 4.0)
        for _ in range(6):
            with dc.no_grad():
                x = sqp_map(cs, x, dc.Tensor(y[None]), ProjectionConfig())
            r = abs(np.sum(x.value ** 2) - 4.0)
            # the damped fixed point leaves a residual floor of order eps * lambda
            assert r <= prev + 1e-7
            prev = r


def test_correction_clamp_limits_step():
    cfg = ProjectionConfig(max_iter=1, correction_clamp=1e-3)
    x = sqp_project(quad(), [2.0, 0.0], cfg).x_proj
    assert np.allclose(x, [2.0 - 1e-3, 0.0])


# augmented Lagrangian

def test_al_affine_matches_closed_form():
    rng = np.random.default_rng(2)
    A, b = rng.standard_normal((2, 4)), rng.standard_normal(2)
    y = rng.standard_normal(4)
    cs = ConstraintSet((AffineEquality(A, b),), 4)
    x = al_project(cs, y, ProjectionConfig(method="al")).x_proj
    assert np.max(np.abs(x - project_affine(A, b, y, 1e-12).x_proj)) <= 1e-3


def test_al_quadmass_and_feasible_point():
    assert np.max(np.abs(al_project(quad(), [2.0, 0.0], ProjectionConfig(method="al")).x_proj
                         - [1.0, 0.0])) <= 1e-3
    assert np.max(np.abs(al_project(quad(), [0.6, 0.8], ProjectionConfig(method="al")).x_proj
                         - [0.6, 0.8])) <= 1e-6


@pytest.mark.parametrize("opt", ["gd", "newton"])
def test_al_alternative_inner_optimizers(opt):
    cfg = ProjectionConfig(method="al", al={"optimizer": opt, "inner_lr": 2e-3})
    x = al_project(quad(), [2.0, 0.0], cfg).x_proj
    assert np.max(np.abs(x - [1.0, 0.0])) <= 1e-3


def test_al_box_inequality_penalty_bias():
    # inequalities carry no multiplier, so the minimizer of the last round is
    # u + (y - u) / (1 + rho_max) on the violated coordinates
    cs = ConstraintSet((BoxBounds(-1.0, 1.0, 3),), 3)
    x = al_project(cs, [2.0, 0.0, -3.0], ProjectionConfig(method="al")).x_proj
    assert np.max(np.abs(x - [1.0 + 1.0 / 129, 0.0, -1.0 - 2.0 / 129])) <= 1e-3


def test_al_divergence_raises():
    cfg = ProjectionConfig(method="al", al={"optimizer": "gd", "inner_lr": 50.0})
    with pytest.raises(ProjectionError, match="diverg"):
        al_project(quad(), [2.0, 0.0], cfg)


# count

def test_count_examples():
    ct = CountThreshold(0.5, 4)
    assert count_project(ct, [-1.0, -1.0, 1.0, 1.0]).x_proj.tolist() == [-1.0, -1.0, 1.0, 1.0]
    x = count_project(ct, [0.1, 0.2, 0.3, 0.4]).x_proj
    assert np.allclose(x, [-0.1, 0.0, 0.1, 0.2], atol=1e-11)
    assert int(np.sum(x < 0)) == 2


def test_count_precondition():
    with pytest.raises(ConstraintError):
        count_project(CountThreshold(0.1, 4), np.zeros(4))
    with pytest.raises(ConstraintError):
        count_project(CountThreshold(0.99, 4), np.zeros(4))


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (3, 20), elements=st.floats(-2, 2)), st.sampled_from([0.25, 0.5, 0.6251, 0.8]))
def test_count_hard_always_feasible(y, k):
    ct = CountThreshold(k, 20)
    cs = ConstraintSet((ct, BoxBounds(-2.0, 2.0, 20)), 20)
    x = project_values(cs, y, hard=True)
    assert np.all(violation(cs, x) == 0.0)


def test_count_soft_moves_toward_target():
    ct = CountThreshold(0.5, 4)
    y = np.array([0.1, 0.2, 0.3, 0.4])
    x = count_project(ct, y, hard=False).x_proj
    assert np.all(x < y)


def test_count_grayscale_channels():
    from cafm_lab.constraints import GRAYSCALE
    rng = np.random.default_rng(3)
    ct = CountThreshold(0.6251, 64 * 3, weights=GRAYSCALE)
    x = count_project(ct, rng.uniform(-1, 1, 64 * 3)).x_proj
    assert ct.below(x) == ct.target == 40


# dispatch and backward passes

def test_empty_set_identity_and_gradient():
    y = np.array([1.0, -2.0])
    x, info = project(ConstraintSet((), 2), y)
    assert np.array_equal(x.value, y) and info["iterations"] == 0
    yt = dc.Tensor(y, requires_grad=True)
    g = dc.grad(dc.sum(dc.mul(project(ConstraintSet((), 2), yt)[0], [3.0, 4.0])), [yt])[0]
    assert np.array_equal(g, [3.0, 4.0])


def test_unrolled_affine_gradient_closed_form():
    rng = np.random.default_rng(4)
    A, b, eps = rng.standard_normal((2, 5)), rng.standard_normal(2), 1e-6
    y, u = rng.standard_normal(5), rng.standard_normal(5)
    res = project_affine(A, b, y, eps, record=True)
    Pm = np.eye(5) - A.T @ np.linalg.solve(A @ A.T + eps * np.eye(2), A)
    assert np.allclose(backward_unrolled(res, u), Pm.T @ u, atol=1e-12)


def test_unrolled_quadmass_matches_fd():
    rng = np.random.default_rng(5)
    cs, cfg = quad(4.0, 6), ProjectionConfig(max_iter=5, feas_tol=0.0)
    for _ in range(5):
        y, u = 2.2 * rng.standard_normal(6) / np.sqrt(6), rng.standard_normal(6)
        res = sqp_project(cs, y, cfg, record=True)
        fd = fd_vjp(lambda z: sqp_project(cs, z, cfg).x_proj, y, u)
        assert np.max(np.abs(backward_unrolled(res, u) - fd) / (np.abs(fd) + 1e-8)) <= 1e-4


def test_implicit_affine_closed_form_and_zero_seed():
    rng = np.random.default_rng(6)
    A, b, eps = rng.standard_normal((2, 5)), rng.standard_normal(2), 1e-12
    cs = ConstraintSet((AffineEquality(A, b),), 5)
    y, u = rng.standard_normal(5), rng.standard_normal(5)
    res = sqp_project(cs, y, ProjectionConfig(damping=eps, feas_tol=1e-10), record=True)
    Pm = np.eye(5) - A.T @ np.linalg.solve(A @ A.T + eps * np.eye(2), A)
    assert np.allclose(backward_implicit(res, u), Pm @ u, atol=1e-10)
    assert np.array_equal(backward_implicit(res, np.zeros(5)), np.zeros(5))


def test_implicit_matches_unrolled_quadmass():
    rng = np.random.default_rng(7)
    cs = quad(4.0, 6)
    unrolled = ProjectionConfig(max_iter=50, damping=1e-12, feas_tol=0.0)
    implicit = ProjectionConfig(max_iter=50, damping=1e-12, feas_tol=1e-12, backward_mode="implicit")
    for _ in range(5):
        y, u = rng.standard_normal(6), rng.standard_normal(6)
        gu = backward_unrolled(sqp_project(cs, y, unrolled, record=True), u)
        gi = backward_implicit(sqp_project(cs, y, implicit, record=True), u)
        assert np.linalg.norm(gi - gu) <= 1e-3 * np.linalg.norm(gu)


def test_implicit_errors():
    with pytest.raises(ProjectionError, match="y-independent"):
        backward_implicit(sqp_project(quad(), [2.0, 0.0], ProjectionConfig(sqp_mode="restoration",
                                                                         max_iter=20), record=True), [1.0, 0.0])
    with pytest.raises(ProjectionError, match="converged"):
        backward_implicit(sqp_project(quad(), [2.0, 0.0], ProjectionConfig(max_iter=1), record=True),
                          [1.0, 0.0])
    with pytest.raises(ProjectionError, match="recorded"):
        backward_unrolled(sqp_project(quad(), [2.0, 0.0]), [1.0, 0.0])
    with pytest.raises(ProjectionError):
        backward_implicit(project_box(-1, 1, [2.0], record=True), [1.0])


def test_implicit_mode_inside_graph():
    cfg = ProjectionConfig(max_iter=60, damping=1e-12, feas_tol=1e-12, backward_mode="implicit")
    y = dc.Tensor(np.array([[2.0, 0.5]]), requires_grad=True)
    x, _ = project(quad(), y, cfg)
    g = dc.grad(dc.sum(x), [y])[0]
    fd = fd_vjp(lambda z: project_values(quad(), z, cfg), y.value, np.ones((1, 2)))
    assert np.allclose(g, fd, rtol=1e-5, atol=1e-8)


def test_hard_project_equality_exact():
    rng = np.random.default_rng(8)
    cs = quad(4.0, 10)
    x = hard_project(cs, rng.standard_normal((5, 10)), ProjectionConfig())
    assert np.max(violation(cs, x)) <= 1e-24
