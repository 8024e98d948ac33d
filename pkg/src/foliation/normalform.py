"""Deviation nonlinearity ``G`` and the asymptotic normal form around ``u_infty``.

With ``v = u - u*`` the system reads ``v' + A_0 v = G(v)``. Around a nearby
equilibrium ``u_infty = u* + xi + phi(xi)`` the coordinates

    x = P_c v - xi,   y = P_s v - phi_s(xi),   z = P_u v - phi_u(xi)

satisfy ``x' = R_c``, ``y' + A_s y = R_s``, ``z' + A_u z = R_u`` where
``R_l = P_l (G(x + y + z + xi + phi(xi)) - G(xi + phi(xi)))``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import DomainError, ProblemModel, eval_rhs, eval_rhs_jacobian

__all__ = [
    "NormalFormContext",
    "SubspaceError",
    "deviation_G",
    "eval_G",
    "eval_R",
    "from_normal_coords",
    "G_split",
    "make_context",
    "to_normal_coords",
]


class SubspaceError(ValueError):
    """A component does not lie in its spectral subspace."""


def deviation_G(model: ProblemModel, A0, u_star, v) -> np.ndarray:
    """``G(v) = f(u* + v) + A_0 v``."""
    v = np.asarray(v, dtype=float)
    return eval_rhs(model, np.asarray(u_star, dtype=float) + v) + np.asarray(A0) @ v


def _dA(model: ProblemModel, u, w):
    if model.dA is not None:
        return np.asarray(model.dA(u, w), dtype=float)
    h = 1e-6 * (1.0 + float(np.linalg.norm(u)))
    return (np.asarray(model.A(u + h * w)) - np.asarray(model.A(u - h * w))) / (2 * h)


def _dF(model: ProblemModel, u):
    if model.dF is not None:
        return np.asarray(model.dF(u), dtype=float)
    h = 1e-6 * (1.0 + float(np.linalg.norm(u)))
    cols = []
    for k in range(model.n):
        e = np.zeros(model.n)
        e[k] = h
        cols.append((np.asarray(model.F(u + e)) - np.asarray(model.F(u - e))) / (2 * h))
    return np.column_stack(cols)


def G_split(model: ProblemModel, u_star, v, w=None) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(G_1(v), G_2(v, w))`` (``w`` defaults to ``v``).

    ``G_1(v) = (F(u*+v) - F(u*) - F'(u*) v) - (A(u*+v) - A(u*) - A'(u*) v) u*`` and
    ``G_2(v, w) = -(A(u*+v) - A(u*)) w``; ``G(v) = G_1(v) + G_2(v, v)``.
    """
    u_star = np.asarray(u_star, dtype=float)
    v = np.asarray(v, dtype=float)
    w = v if w is None else np.asarray(w, dtype=float)
    u = u_star + v
    model.check_domain(u)
    A_u, A_s = np.asarray(model.A(u)), np.asarray(model.A(u_star))
    g1 = (np.asarray(model.F(u)) - np.asarray(model.F(u_star)) - _dF(model, u_star) @ v) - (
        A_u - A_s - _dA(model, u_star, v)
    ) @ u_star
    g2 = -(A_u - A_s) @ w
    return g1, g2


@dataclass(frozen=True, eq=False)
class NormalFormContext:
    model: ProblemModel
    split: object  # SpectralSplit
    chart: object  # EquilibriumChart
    u_star: np.ndarray
    xi: np.ndarray
    phi_s: np.ndarray
    phi_u: np.ndarray
    u_infty: np.ndarray
    G_at_base: np.ndarray

    @property
    def base(self) -> np.ndarray:
        """``xi + phi(xi)``, the deviation of ``u_infty`` from ``u*``."""
        return self.xi + self.phi_s + self.phi_u

    # coordinate form used by the Lyapunov-Perron solver: q = [x; y; z] in the
    # orthonormal bases of the three parts
    def R_coords(self, q: np.ndarray) -> np.ndarray:
        V, W = self.split_matrices
        v = V @ q + self.base
        return W @ (deviation_G(self.model, self.split.A0, self.u_star, v) - self.G_at_base)

    def R_coords_jacobian(self, q: np.ndarray) -> np.ndarray:
        V, W = self.split_matrices
        u = self.u_star + V @ q + self.base
        return W @ (eval_rhs_jacobian(self.model, u) + self.split.A0) @ V

    @property
    def split_matrices(self) -> tuple[np.ndarray, np.ndarray]:
        return self.split.frame, self.split.coframe


def make_context(model: ProblemModel, split, chart, xi) -> NormalFormContext:
    """Normal-form context at base point ``xi`` (a vector in range(P_c))."""
    xi = np.asarray(xi, dtype=float)
    if float(np.linalg.norm(split.P_c @ xi - xi)) > 1e-10:
        raise SubspaceError("xi must lie in range(P_c)")
    phi_s, phi_u = chart.phi(xi)
    u_star = np.asarray(chart.u_star, dtype=float)
    base = xi + phi_s + phi_u
    G_base = deviation_G(model, split.A0, u_star, base)
    return NormalFormContext(
        model=model,
        split=split,
        chart=chart,
        u_star=u_star,
        xi=xi,
        phi_s=phi_s,
        phi_u=phi_u,
        u_infty=u_star + base,
        G_at_base=G_base,
    )


def eval_G(ctx: NormalFormContext, v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if float(np.linalg.norm(v)) > ctx.model.rho_V:
        raise DomainError(f"|v| = {np.linalg.norm(v):.6g} exceeds rho_V = {ctx.model.rho_V}")
    return deviation_G(ctx.model, ctx.split.A0, ctx.u_star, v)


def _check_part(split, part: str, w, label: str) -> np.ndarray:
    w = np.zeros(split.n) if w is None else np.asarray(w, dtype=float)
    if w.size == 0:
        w = np.zeros(split.n)
    if float(np.linalg.norm(split.projection(part) @ w - w)) > 1e-10:
        raise SubspaceError(f"{label} is not in range(P_{part})")
    return w


def eval_R(ctx: NormalFormContext, x, y=None, z=None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return ``(R_c, R_s, R_u)`` as vectors in the respective ranges."""
    split = ctx.split
    x = _check_part(split, "c", x, "x")
    y = _check_part(split, "s", y, "y")
    z = _check_part(split, "u", z, "z")
    d = eval_G(ctx, x + y + z + ctx.base) - ctx.G_at_base
    return split.P_c @ d, split.P_s @ d, split.P_u @ d


def to_normal_coords(ctx: NormalFormContext, u) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    u = np.asarray(u, dtype=float)
    ctx.model.check_domain(u)
    v = u - ctx.u_star
    split = ctx.split
    return split.P_c @ v - ctx.xi, split.P_s @ v - ctx.phi_s, split.P_u @ v - ctx.phi_u


def from_normal_coords(ctx: NormalFormContext, x, y=None, z=None) -> np.ndarray:
    split = ctx.split
    x = _check_part(split, "c", x, "x")
    y = _check_part(split, "s", y, "y")
    z = _check_part(split, "u", z, "z")
    return ctx.u_star + x + y + z + ctx.xi + ctx.phi_s + ctx.phi_u
