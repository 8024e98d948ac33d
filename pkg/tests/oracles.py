"""Independent oracles for derived test values.

Nothing here imports the package: right-hand sides are restated, limits are
found by brute-force high-accuracy integration, projections by a contour
integral of the resolvent. Run as a script to print the frozen values used
in the tests.
"""
from __future__ import annotations

import numpy as np
from scipy.integrate import solve_ivp
from scipy.optimize import brentq


def line_stable_rhs(t, u):
    return [u[1] ** 2, -(1.0 - u[0]) * u[1]]


def line_hyperbolic_rhs(t, u):
    return [u[1] ** 2 + u[2] ** 2, -(1.0 - u[0]) * u[1], (1.0 - u[0]) * u[2]]


def flow_limit(rhs, u0, t_final, rtol=1e-13):
    sol = solve_ivp(rhs, (0.0, t_final), u0, method="DOP853", rtol=rtol, atol=1e-15)
    return sol.y[:, -1]


def stable_fiber_by_shooting(y0, xi, t_final=60.0):
    """Solve ``limit(x0, y0) = xi`` for x0 by bisection on high-accuracy flows (line-stable)."""

    def miss(x0):
        return flow_limit(line_stable_rhs, [x0, y0], t_final)[0] - xi

    return brentq(miss, xi - 0.1, xi + 0.05, xtol=1e-13)


def unstable_fiber_by_shooting(z0, xi, t_final=-60.0):
    def miss(x0):
        return flow_limit(line_hyperbolic_rhs, [x0, 0.0, z0], t_final)[0] - xi

    return brentq(miss, xi - 0.05, xi + 0.1, xtol=1e-13)


def stable_fiber_closed_form(y0, xi):
    # x - x^2/2 + y^2/2 is conserved and the limit is (xi, 0)
    return 1.0 - np.sqrt((1.0 - xi) ** 2 + y0**2)


def unstable_fiber_closed_form(z0, xi):
    # x - x^2/2 + y^2/2 - z^2/2 is conserved; backward limit (xi, 0, 0)
    return 1.0 - np.sqrt((1.0 - xi) ** 2 - z0**2)


def contour_projection(A, center, radius, points=4000):
    """``(1 / 2 pi i) oint (lambda - A)^{-1} d lambda`` on a circle, trapezoidal rule."""
    n = A.shape[0]
    theta = np.linspace(0.0, 2 * np.pi, points, endpoint=False)
    P = np.zeros((n, n), dtype=complex)
    for th in theta:
        lam = center + radius * np.exp(1j * th)
        dlam = 1j * radius * np.exp(1j * th) * (2 * np.pi / points)
        P += np.linalg.solve(lam * np.eye(n) - A, np.eye(n)) * dlam
    return (P / (2j * np.pi)).real


if __name__ == "__main__":
    print("line-stable (0.1, 0):", stable_fiber_closed_form(0.1, 0.0), stable_fiber_by_shooting(0.1, 0.0))
    print("line-stable (0.1, 0.1):", stable_fiber_closed_form(0.1, 0.1), stable_fiber_by_shooting(0.1, 0.1))
    print("line-hyperbolic (0.1, 0):", unstable_fiber_closed_form(0.1, 0.0), unstable_fiber_by_shooting(0.1, 0.0))
    print("P for [[0,1],[0,1]] around 0:\n", contour_projection(np.array([[0.0, 1.0], [0.0, 1.0]]), 0.0, 0.5))
    print("P around 1:\n", contour_projection(np.array([[0.0, 1.0], [0.0, 1.0]]), 1.0, 0.5))
    print("exp(-1.6):", np.exp(-1.6))
