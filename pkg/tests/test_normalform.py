import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from foliation.chart import build_chart
from foliation.model import DomainError, eval_rhs, eval_rhs_jacobian, get_problem
from foliation.normalform import (
    G_split,
    SubspaceError,
    eval_G,
    eval_R,
    from_normal_coords,
    make_context,
    to_normal_coords,
)
from foliation.spectral import linearize, split_spectrum


def context(name, xi=0.0, rho_0=None):
    e = get_problem(name)
    sp = split_spectrum(linearize(e.model, e.u_star), e.model.m)
    ch = build_chart(e.model, sp, e.u_star, rho_0=rho_0)
    return e, sp, make_context(e.model, sp, ch, sp.embed("c", [xi]))


def test_eval_G_examples():
    e, sp, ctx = context("line-stable")
    assert np.all(eval_G(ctx, np.zeros(2)) == 0)
    assert np.allclose(eval_G(ctx, [0.0, 0.2]), [0.04, 0.0], atol=1e-16)
    g1, g2 = G_split(e.model, e.u_star, np.array([0.0, 0.2]))
    assert np.allclose(g1 + g2, [0.04, 0.0], atol=1e-16)
    h = 1e-4
    J = np.column_stack([(eval_G(ctx, h * ek) - eval_G(ctx, -h * ek)) / (2 * h) for ek in np.eye(2)])
    assert np.max(np.abs(J)) <= 1e-6
    with pytest.raises(DomainError):
        eval_G(ctx, [0.6, 0.0])


@pytest.mark.parametrize("name", ["line-stable", "line-hyperbolic", "parabola-stable", "linear-diag"])
def test_G_split_matches_identity(name, rng):
    e, sp, ctx = context(name)
    for _ in range(100):
        d = rng.standard_normal(sp.n)
        v = d / np.linalg.norm(d) * 0.45 * rng.uniform()
        g1, g2 = G_split(e.model, e.u_star, v)
        assert np.linalg.norm(g1 + g2 - (eval_rhs(e.model, e.u_star + v) + sp.A0 @ v)) <= 1e-10
        assert np.linalg.norm(eval_G(ctx, v) - (g1 + g2)) <= 1e-10


def test_eval_R_examples():
    _, sp, ctx = context("line-stable")
    assert all(np.all(r == 0) for r in eval_R(ctx, np.zeros(2), np.zeros(2), None))
    Rc, Rs, Ru = eval_R(ctx, np.zeros(2), np.array([0.0, 0.2]))
    assert np.allclose(Rc, [0.04, 0]) and np.allclose(Rs, 0) and np.all(Ru == 0)
    _, sp, hyp = context("line-hyperbolic", 0.1)
    assert all(np.all(r == 0) for r in eval_R(hyp, np.zeros(3), np.zeros(3), np.zeros(3)))
    with pytest.raises(SubspaceError):
        eval_R(ctx, np.array([0.0, 0.1]))


def test_context_invariants():
    e, sp, ctx = context("parabola-stable", 0.2)
    assert np.linalg.norm(eval_rhs(e.model, ctx.u_infty)) <= 1e-9
    assert np.linalg.norm(sp.P_c @ ctx.G_at_base) <= 1e-9
    with pytest.raises(SubspaceError):
        make_context(e.model, sp, ctx.chart, np.array([0.1, 0.1]))


def test_normal_coords_examples():
    _, sp, ctx = context("line-stable", 0.1)
    x, y, z = to_normal_coords(ctx, [0.15, 0.2])
    assert np.allclose(x, [0.05, 0]) and np.allclose(y, [0, 0.2]) and np.all(z == 0)
    assert np.allclose(to_normal_coords(ctx, ctx.u_infty), 0)
    assert np.array_equal(from_normal_coords(ctx, np.zeros(2)), ctx.u_infty)
    _, sp, pb = context("parabola-stable", 0.3, rho_0=0.3)
    assert np.allclose(from_normal_coords(pb, np.zeros(2), np.array([0.0, 0.05])), [0.3, 0.14], atol=1e-15)


@settings(max_examples=60, deadline=None)
@given(st.floats(-0.2, 0.2), st.floats(-0.2, 0.2), st.floats(-0.2, 0.2), st.floats(-0.1, 0.1))
def test_round_trip(a, b, c, xi):
    _, sp, ctx = context("line-hyperbolic", xi)
    u = np.array([a, b, c])
    assert np.allclose(from_normal_coords(ctx, *to_normal_coords(ctx, u)), u, atol=1e-12)


def test_normal_form_vector_field(rng):
    # d/dt of (x, y, z) along u' = f(u) equals (R_c, R_s - A_s y, R_u - A_u z)
    e, sp, ctx = context("line-hyperbolic", 0.08)
    for _ in range(20):
        u = ctx.u_infty + rng.uniform(-0.1, 0.1, 3)
        x, y, z = to_normal_coords(ctx, u)
        f = eval_rhs(e.model, u)
        Rc, Rs, Ru = eval_R(ctx, x, y, z)
        assert np.linalg.norm(sp.P_c @ f - Rc) <= 1e-8
        assert np.linalg.norm(sp.P_s @ f - (Rs - sp.A0 @ y)) <= 1e-8
        assert np.linalg.norm(sp.P_u @ f - (Ru - sp.A0 @ z)) <= 1e-8


def test_R_coords_jacobian_against_fd(rng):
    _, sp, ctx = context("line-hyperbolic", 0.05)
    for _ in range(10):
        q = rng.uniform(-0.1, 0.1, 3)
        J = ctx.R_coords_jacobian(q)
        h = 1e-6
        fd = np.column_stack([(ctx.R_coords(q + h * e) - ctx.R_coords(q - h * e)) / (2 * h) for e in np.eye(3)])
        assert np.max(np.abs(J - fd)) <= 1e-8


def test_R_is_locally_small():
    # Lipschitz constant of R on balls where both |(x, y, z)| and |xi| are <= r shrinks with r
    rng = np.random.default_rng(3)
    slopes = []
    for r in (0.2, 0.1, 0.05, 0.025):
        _, sp, ctx = context("line-hyperbolic", r / 2)
        worst = 0.0
        for _ in range(50):
            d = rng.standard_normal(3)
            q = d / np.linalg.norm(d) * r * rng.uniform(0.5, 1.0)
            worst = max(worst, np.linalg.norm(ctx.R_coords(q)) / np.linalg.norm(q))
        slopes.append(worst)
    assert all(b < a for a, b in zip(slopes, slopes[1:]))
    assert slopes[-1] <= 0.1
