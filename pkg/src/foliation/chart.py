"""Local chart of the equilibrium manifold as a graph over the center subspace.

Near ``u*`` every equilibrium is ``u* + x + phi_s(x) + phi_u(x)`` with ``x`` in
range(P_c), ``phi_l(x)`` in range(P_l) and ``phi(0) = phi'(0) = 0``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .model import ProblemModel, eval_rhs, eval_rhs_jacobian
from .normalform import deviation_G

__all__ = [
    "ChartError",
    "ChartReport",
    "EquilibriumChart",
    "build_chart",
    "eval_phi_derivative",
    "verify_chart",
]

NEWTON_TOL = 1e-11
NEWTON_MAXITER = 25
MEMO_QUANTUM = 1e-12


class ChartError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class EquilibriumChart:
    """``phi(x) -> (phi_s(x), phi_u(x))``; ``dphi(x)`` is an n x m_c matrix acting on center coordinates."""

    u_star: np.ndarray
    split: object
    rho_0: float
    phi: Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]]
    dphi: Callable[[np.ndarray], np.ndarray]
    method: str = "newton"
    model: ProblemModel | None = field(default=None, repr=False)


def _fd_jacobian(g, z, h=1e-7):
    g0 = g(z)
    J = np.empty((g0.size, z.size))
    step = h * (1.0 + float(np.linalg.norm(z)))
    for k in range(z.size):
        e = np.zeros(z.size)
        e[k] = step
        J[:, k] = (g(z + e) - g(z - e)) / (2 * step)
    return J


def _solve(J, r, what):
    try:
        return np.linalg.solve(J, r)
    except np.linalg.LinAlgError as exc:
        raise ChartError(f"singular Jacobian in {what}") from exc


def build_chart(
    model: ProblemModel,
    split,
    u_star,
    *,
    rho_0: float | None = None,
    use_psi: bool = True,
) -> EquilibriumChart:
    """Build ``phi`` on demand, from ``model.psi`` if present, else by Newton on the equilibrium system.

    With ``psi``: solve ``P_c (psi(zeta) - u*) = x`` for ``zeta`` and take the
    stable/unstable components of ``psi(zeta) - u*``. Without: solve
    ``P_s f(u* + x + w) = P_u f(u* + x + w) = 0`` for ``w`` in range(P_s + P_u).
    """
    u_star = np.asarray(u_star, dtype=float)
    rho_0 = min(0.3, model.rho_V / 2) if rho_0 is None else float(rho_0)
    V_c, V_s, V_u = split.basis("c"), split.basis("s"), split.basis("u")
    V_n = np.hstack([V_s, V_u])
    W_c = V_c.T @ split.P_c
    W_n = np.vstack([V_s.T @ split.P_s, V_u.T @ split.P_u])
    m_s = V_s.shape[1]
    memo: dict[tuple, tuple[np.ndarray, np.ndarray]] = {}

    def center_coords(x):
        x = np.asarray(x, dtype=float)
        if x.shape == (split.n,):
            return W_c @ x
        return x.reshape(-1)

    def split_normal(w):
        return V_s @ w[:m_s], V_u @ w[m_s:]

    def via_psi(a):
        def g(zeta):
            return W_c @ (np.asarray(model.psi(zeta), dtype=float) - u_star)

        zeta = np.zeros(model.m)
        for _ in range(NEWTON_MAXITER):
            r = g(zeta) - a
            if np.linalg.norm(r) <= NEWTON_TOL:
                break
            J = _fd_jacobian(g, zeta)
            if np.linalg.matrix_rank(J) < J.shape[1]:
                raise ChartError("rank of psi'(zeta) projected to the center is deficient")
            zeta = zeta - _solve(J, r, "g(zeta) = x")
        else:
            raise ChartError(f"psi-inversion did not converge for |x| = {np.linalg.norm(a):.3g}")
        d = np.asarray(model.psi(zeta), dtype=float) - u_star
        return split.P_s @ d, split.P_u @ d

    def via_newton(a):
        x = V_c @ a
        w = np.zeros(V_n.shape[1])
        for _ in range(NEWTON_MAXITER + 1):
            u = u_star + x + V_n @ w
            r = W_n @ eval_rhs(model, u)
            if np.linalg.norm(r) <= NEWTON_TOL:
                break
            J = W_n @ eval_rhs_jacobian(model, u) @ V_n
            w = w - _solve(J, r, "the equilibrium system")
        else:
            raise ChartError(f"equilibrium Newton did not converge for |x| = {np.linalg.norm(a):.3g}")
        return split_normal(w)

    method = "psi" if (use_psi and model.psi is not None) else "newton"
    solver = via_psi if method == "psi" else via_newton

    def phi(x):
        a = center_coords(x)
        if np.linalg.norm(a) > rho_0 * (1 + 1e-12):
            raise ChartError(f"|x| = {np.linalg.norm(a):.6g} outside chart radius {rho_0:.6g}")
        key = tuple(np.rint(a / MEMO_QUANTUM).astype(np.int64))
        hit = memo.get(key)
        if hit is None:
            hit = solver(a)
            # dict assignment is atomic; concurrent writers store identical values
            memo[key] = hit
        return hit[0].copy(), hit[1].copy()

    def dphi(x):
        a = center_coords(x)
        phi_s, phi_u = phi(x)
        u = u_star + V_c @ a + phi_s + phi_u
        D = eval_rhs_jacobian(model, u)
        J_w = W_n @ D @ V_n
        J_x = W_n @ D @ V_c
        return V_n @ (-_solve(J_w, J_x, "the linearized equilibrium system"))

    return EquilibriumChart(
        u_star=u_star, split=split, rho_0=rho_0, phi=phi, dphi=dphi, method=method, model=model
    )


def eval_phi_derivative(chart: EquilibriumChart, x) -> np.ndarray:
    return chart.dphi(x)


@dataclass(frozen=True)
class ChartReport:
    samples: int
    max_center_residual: float
    max_normal_residual: float
    max_equilibrium_residual: float
    tol: float

    @property
    def passed(self) -> bool:
        return max(self.max_center_residual, self.max_normal_residual) <= self.tol


def verify_chart(chart: EquilibriumChart, samples: int, *, seed: int = 0, tol: float = 1e-9) -> ChartReport:
    """Evaluate ``P_c G(x + phi(x)) = 0`` and ``P_l G(x + phi(x)) = A_l phi_l(x)`` at random ``x``."""
    split = chart.split
    model = chart.model
    rng = np.random.default_rng(seed)
    m_c = split.dim("c")
    worst_c = worst_n = worst_eq = 0.0
    for _ in range(samples):
        d = rng.standard_normal(m_c)
        d /= np.linalg.norm(d)
        a = d * chart.rho_0 * rng.uniform() ** (1.0 / m_c)
        x = split.embed("c", a)
        phi_s, phi_u = chart.phi(x)
        v = x + phi_s + phi_u
        G = deviation_G(model, split.A0, chart.u_star, v)
        worst_c = max(worst_c, float(np.linalg.norm(split.P_c @ G)))
        res_s = np.linalg.norm(split.P_s @ G - split.A0 @ phi_s)
        res_u = np.linalg.norm(split.P_u @ G - split.A0 @ phi_u)
        worst_n = max(worst_n, float(res_s), float(res_u))
        worst_eq = max(worst_eq, float(np.linalg.norm(eval_rhs(model, chart.u_star + v))))
    return ChartReport(samples, worst_c, worst_n, worst_eq, tol)
