"""Quasilinear evolution problems ``u' + A(u) u = F(u)`` and the built-in registry.

Everything lives in real n-space; the right-hand side is handled in the
explicit form ``u' = f(u)`` with ``f(u) = F(u) - A(u) u``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Mapping

import numpy as np

__all__ = [
    "DomainError",
    "ProblemModel",
    "ProblemRegistryEntry",
    "UnknownProblemError",
    "eval_rhs",
    "eval_rhs_jacobian",
    "get_problem",
    "problem_names",
]

Vector = np.ndarray
Matrix = np.ndarray


class DomainError(ValueError):
    """Raised when a state leaves the validity ball of a problem."""


class UnknownProblemError(KeyError):
    pass


@dataclass(frozen=True)
class ProblemModel:
    """Data of ``u' + A(u) u = F(u)`` on real n-space.

    ``dA(u, w)`` is the directional derivative ``[A'(u) w]`` (an n x n matrix)
    and ``dF(u)`` the Jacobian of ``F``. Either may be ``None``, in which case
    central differences are used. ``u_ref`` is the center of the validity
    ball of radius ``rho_V``; with ``u_ref=None`` no domain check is made.
    """

    n: int
    m: int
    A: Callable[[Vector], Matrix]
    F: Callable[[Vector], Vector]
    dA: Callable[[Vector, Vector], Matrix] | None = None
    dF: Callable[[Vector], Matrix] | None = None
    psi: Callable[[Vector], Vector] | None = None
    rho_V: float = 0.5
    u_ref: Vector | None = None
    name: str = "custom"

    def __post_init__(self):
        if not 1 <= self.m < self.n:
            raise ValueError(f"need 1 <= m < n, got m={self.m}, n={self.n}")
        if not self.rho_V > 0:
            raise ValueError("rho_V must be positive")
        if self.u_ref is not None:
            u_ref = np.array(self.u_ref, dtype=float)
            u_ref.setflags(write=False)
            object.__setattr__(self, "u_ref", u_ref)

    def check_domain(self, u: Vector) -> None:
        if self.u_ref is None:
            return
        dist = float(np.linalg.norm(np.asarray(u, dtype=float) - self.u_ref))
        if not dist <= self.rho_V:
            raise DomainError(
                f"{self.name}: |u - u_ref| = {dist:.6g} exceeds rho_V = {self.rho_V:.6g}"
            )

    def with_reference(self, u_ref: Vector | None) -> "ProblemModel":
        return replace(self, u_ref=None if u_ref is None else np.asarray(u_ref, dtype=float))


def _fd_step(u: Vector) -> float:
    return 1e-6 * (1.0 + float(np.linalg.norm(u)))


def eval_rhs(model: ProblemModel, u: Vector) -> Vector:
    """Return ``f(u) = F(u) - A(u) u``."""
    u = np.asarray(u, dtype=float)
    model.check_domain(u)
    return np.asarray(model.F(u), dtype=float) - np.asarray(model.A(u), dtype=float) @ u


def _unchecked_rhs(model: ProblemModel, u: Vector) -> Vector:
    return np.asarray(model.F(u), dtype=float) - np.asarray(model.A(u), dtype=float) @ u


def eval_rhs_jacobian(model: ProblemModel, u: Vector) -> Matrix:
    """Return ``Df(u) = F'(u) - A(u) - [A'(u) .] u``.

    At an equilibrium this is minus the linearization ``A_0``.
    """
    u = np.asarray(u, dtype=float)
    model.check_domain(u)
    n = model.n
    if model.dA is None or model.dF is None:
        # central differences of f, step 1e-6 (1 + |u|)
        h = _fd_step(u)
        jac = np.empty((n, n))
        for k in range(n):
            e = np.zeros(n)
            e[k] = h
            jac[:, k] = (_unchecked_rhs(model, u + e) - _unchecked_rhs(model, u - e)) / (2 * h)
        return jac
    eye = np.eye(n)
    dA_u = np.column_stack([np.asarray(model.dA(u, eye[:, k]), dtype=float) @ u for k in range(n)])
    return np.asarray(model.dF(u), dtype=float) - np.asarray(model.A(u), dtype=float) - dA_u


@dataclass(frozen=True)
class ProblemRegistryEntry:
    """A registered problem with its reference equilibrium.

    ``known_fiber_oracle`` maps ``"stable"``/``"unstable"`` to closed-form
    fiber maps ``(boundary_coords, xi_coords) -> u0``; see ``docs/oracles.md``.
    """

    name: str
    model: ProblemModel
    u_star: Vector
    known_fiber_oracle: Mapping[str, Callable[[Vector, Vector], Vector]] = field(
        default_factory=dict
    )
    description: str = ""


# -- built-in problems -------------------------------------------------------


def _linear_diag(rho_V: float) -> ProblemRegistryEntry:
    diag = np.diag([0.0, 1.0, -1.0])
    zero3 = np.zeros((3, 3))
    model = ProblemModel(
        n=3,
        m=1,
        A=lambda u: diag,
        F=lambda u: np.zeros(3),
        dA=lambda u, w: zero3,
        dF=lambda u: zero3,
        psi=lambda z: np.array([z[0], 0.0, 0.0]),
        rho_V=rho_V,
        u_ref=np.zeros(3),
        name="linear-diag",
    )
    oracles = {
        "stable": lambda b, xi: np.array([xi[0], b[0], 0.0]),
        "unstable": lambda b, xi: np.array([xi[0], 0.0, b[0]]),
    }
    return ProblemRegistryEntry(
        "linear-diag", model, np.zeros(3), oracles,
        "A = diag(0, 1, -1), F = 0; flat manifold of equilibria {(s, 0, 0)}",
    )


def _line_stable(rho_V: float) -> ProblemRegistryEntry:
    def A(u):
        return np.array([[0.0, 0.0], [0.0, 1.0 - u[0]]])

    def F(u):
        return np.array([u[1] ** 2, 0.0])

    def dA(u, w):
        return np.array([[0.0, 0.0], [0.0, -w[0]]])

    def dF(u):
        return np.array([[0.0, 2.0 * u[1]], [0.0, 0.0]])

    def stable_fiber(b, xi):
        return np.array([1.0 - np.sqrt((1.0 - xi[0]) ** 2 + b[0] ** 2), b[0]])

    model = ProblemModel(
        n=2, m=1, A=A, F=F, dA=dA, dF=dF,
        psi=lambda z: np.array([z[0], 0.0]),
        rho_V=rho_V, u_ref=np.zeros(2), name="line-stable",
    )
    return ProblemRegistryEntry(
        "line-stable", model, np.zeros(2), {"stable": stable_fiber},
        "f(u) = (u2^2, -(1 - u1) u2); equilibria {(s, 0)}, normally stable for s < 1",
    )


def _line_hyperbolic(rho_V: float) -> ProblemRegistryEntry:
    def A(u):
        return np.diag([0.0, 1.0 - u[0], -(1.0 - u[0])])

    def F(u):
        return np.array([u[1] ** 2 + u[2] ** 2, 0.0, 0.0])

    def dA(u, w):
        return np.diag([0.0, -w[0], w[0]])

    def dF(u):
        return np.array([[0.0, 2.0 * u[1], 2.0 * u[2]], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]])

    def stable_fiber(b, xi):
        return np.array([1.0 - np.sqrt((1.0 - xi[0]) ** 2 + b[0] ** 2), b[0], 0.0])

    def unstable_fiber(b, xi):
        return np.array([1.0 - np.sqrt((1.0 - xi[0]) ** 2 - b[0] ** 2), 0.0, b[0]])

    model = ProblemModel(
        n=3, m=1, A=A, F=F, dA=dA, dF=dF,
        psi=lambda z: np.array([z[0], 0.0, 0.0]),
        rho_V=rho_V, u_ref=np.zeros(3), name="line-hyperbolic",
    )
    return ProblemRegistryEntry(
        "line-hyperbolic", model, np.zeros(3),
        {"stable": stable_fiber, "unstable": unstable_fiber},
        "f(u) = (u2^2 + u3^2, -(1 - u1) u2, (1 - u1) u3); equilibria {(s, 0, 0)}",
    )


def _parabola_stable(rho_V: float) -> ProblemRegistryEntry:
    diag = np.diag([0.0, 1.0])
    zero2 = np.zeros((2, 2))
    model = ProblemModel(
        n=2,
        m=1,
        A=lambda u: diag,
        F=lambda u: np.array([0.0, u[0] ** 2]),
        dA=lambda u, w: zero2,
        dF=lambda u: np.array([[0.0, 0.0], [2.0 * u[0], 0.0]]),
        psi=lambda z: np.array([z[0], z[0] ** 2]),
        rho_V=rho_V,
        u_ref=np.zeros(2),
        name="parabola-stable",
    )
    return ProblemRegistryEntry(
        "parabola-stable", model, np.zeros(2),
        {"stable": lambda b, xi: np.array([xi[0], b[0]])},
        "A = diag(0, 1), F(u) = (0, u1^2); equilibria {(s, s^2)}",
    )


def _nilpotent_demo(rho_V: float) -> ProblemRegistryEntry:
    # A_0 = [[0, 1], [0, 0]]: the line {(s, 0)} is an equilibrium set but 0 is not semi-simple
    block = np.array([[0.0, 1.0], [0.0, 0.0]])
    zero2 = np.zeros((2, 2))
    model = ProblemModel(
        n=2,
        m=1,
        A=lambda u: block,
        F=lambda u: np.zeros(2),
        dA=lambda u, w: zero2,
        dF=lambda u: zero2,
        psi=lambda z: np.array([z[0], 0.0]),
        rho_V=rho_V,
        u_ref=np.zeros(2),
        name="nilpotent-demo",
    )
    return ProblemRegistryEntry(
        "nilpotent-demo", model, np.zeros(2), {},
        "A = [[0, 1], [0, 0]], F = 0; fails the semi-simplicity condition",
    )


_REGISTRY: dict[str, Callable[[float], ProblemRegistryEntry]] = {
    "linear-diag": _linear_diag,
    "line-stable": _line_stable,
    "line-hyperbolic": _line_hyperbolic,
    "parabola-stable": _parabola_stable,
    "nilpotent-demo": _nilpotent_demo,
}

_ALLOWED_PARAMS = frozenset({"rho_V"})


def problem_names() -> list[str]:
    return sorted(_REGISTRY)


def get_problem(name: str, params: Mapping[str, float] | None = None) -> ProblemRegistryEntry:
    """Look up a built-in problem.

    ``params`` may override ``rho_V`` (default 0.5).
    """
    try:
        factory = _REGISTRY[name]
    except KeyError:
        raise UnknownProblemError(
            f"unknown problem {name!r}; registered: {', '.join(problem_names())}"
        ) from None
    params = dict(params or {})
    unknown = set(params) - _ALLOWED_PARAMS
    if unknown:
        raise ValueError(f"unknown parameter(s) for {name!r}: {', '.join(sorted(unknown))}")
    rho_V = float(params.get("rho_V", 0.5))
    if not rho_V > 0:
        raise ValueError("rho_V must be positive")
    return factory(rho_V)
