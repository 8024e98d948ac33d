import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from foliation.model import (
    DomainError,
    ProblemModel,
    UnknownProblemError,
    eval_rhs,
    eval_rhs_jacobian,
    get_problem,
    problem_names,
)

BUILTINS = ["linear-diag", "line-stable", "line-hyperbolic", "parabola-stable"]


def fd_jacobian(model, u, h):
    n = model.n
    J = np.empty((n, n))
    for k in range(n):
        e = np.zeros(n)
        e[k] = h
        J[:, k] = (eval_rhs(model, u + e) - eval_rhs(model, u - e)) / (2 * h)
    return J


def test_eval_rhs_examples():
    assert np.allclose(eval_rhs(get_problem("line-stable").model, [0.1, 0.2]), [0.04, -0.18], atol=1e-15)
    assert np.array_equal(eval_rhs(get_problem("linear-diag").model.with_reference(None), [1, 2, 3]), [0, -2, 3])


@pytest.mark.parametrize("name", problem_names())
def test_u_star_is_equilibrium(name):
    e = get_problem(name)
    assert np.linalg.norm(eval_rhs(e.model, e.u_star)) <= 1e-12


def test_jacobian_examples():
    ls = get_problem("line-stable").model
    assert np.array_equal(eval_rhs_jacobian(ls, [0.0, 0.0]), [[0, 0], [0, -1]])
    ld = get_problem("linear-diag").model
    assert np.array_equal(eval_rhs_jacobian(ld, [0.1, 0.2, -0.1]), -np.diag([0.0, 1.0, -1.0]))
    u = np.array([0.1, 0.2])
    assert np.max(np.abs(eval_rhs_jacobian(ls, u) - fd_jacobian(ls, u, 1e-5))) <= 1e-8


@pytest.mark.parametrize("name", BUILTINS)
def test_jacobian_matches_fd_on_random_points(name, rng):
    e = get_problem(name)
    for _ in range(100):
        d = rng.standard_normal(e.model.n)
        u = e.u_star + d / np.linalg.norm(d) * e.model.rho_V * 0.99 * rng.uniform()
        J = eval_rhs_jacobian(e.model, u)
        err = np.linalg.norm(J - fd_jacobian(e.model, u, 1e-5)) / max(np.linalg.norm(J), 1.0)
        assert err <= 1e-6


def _cubic_model():
    # built-ins are quadratic (central differences exact); a cubic shows the O(h^2) trend
    return ProblemModel(
        n=2, m=1,
        A=lambda u: np.array([[0.0, 0.0], [0.0, 1.0 + u[0] ** 2]]),
        F=lambda u: np.array([u[1] ** 3, 0.0]),
        dA=lambda u, w: np.array([[0.0, 0.0], [0.0, 2 * u[0] * w[0]]]),
        dF=lambda u: np.array([[0.0, 3 * u[1] ** 2], [0.0, 0.0]]),
    )


def test_fd_error_is_second_order():
    model = _cubic_model()
    u = np.array([0.3, 0.4])
    J = eval_rhs_jacobian(model, u)
    e1 = np.linalg.norm(J - fd_jacobian(model, u, 1e-3))
    e2 = np.linalg.norm(J - fd_jacobian(model, u, 5e-4))
    assert 3.5 < e1 / e2 < 4.5


def test_fd_fallback_without_derivatives():
    m = _cubic_model()
    bare = ProblemModel(n=2, m=1, A=m.A, F=m.F)
    u = np.array([0.2, -0.1])
    assert np.allclose(eval_rhs_jacobian(bare, u), eval_rhs_jacobian(m, u), atol=1e-9)


@pytest.mark.parametrize("name", problem_names())
def test_psi_gives_equilibria(name):
    e = get_problem(name)
    for z in np.linspace(-0.2, 0.2, 20):
        assert np.linalg.norm(eval_rhs(e.model, e.model.psi(np.array([z])))) <= 1e-12


def test_oracle_values():
    e = get_problem("line-stable")
    assert np.allclose(e.known_fiber_oracle["stable"](np.array([0.1]), np.array([0.0])),
                       [-0.00498756211208895, 0.1], atol=1e-15)
    assert get_problem("linear-diag").u_star.tolist() == [0, 0, 0]
    p = get_problem("parabola-stable")
    assert p.model.m == 1 and np.allclose(p.model.psi(np.array([0.3])), [0.3, 0.09])


def test_domain_violation():
    e = get_problem("line-stable")
    with pytest.raises(DomainError):
        eval_rhs(e.model, [0.6, 0.0])
    with pytest.raises(DomainError):
        eval_rhs_jacobian(e.model, [0.0, 0.7])


def test_registry_errors():
    with pytest.raises(UnknownProblemError):
        get_problem("nope")
    with pytest.raises(ValueError):
        get_problem("line-stable", {"stiffness": 2.0})
    assert get_problem("line-stable", {"rho_V": 0.8}).model.rho_V == 0.8


def test_model_validation():
    with pytest.raises(ValueError):
        ProblemModel(n=2, m=2, A=lambda u: np.eye(2), F=lambda u: np.zeros(2))


@settings(max_examples=50, deadline=None)
@given(st.floats(-0.45, 0.45), st.floats(-0.2, 0.2))
def test_line_stable_conserved_quantity(x, y):
    # d/dt (x - x^2/2 + y^2/2) = 0 along the flow
    f = eval_rhs(get_problem("line-stable").model, [x, y])
    assert abs((1 - x) * f[0] + y * f[1]) <= 1e-15
