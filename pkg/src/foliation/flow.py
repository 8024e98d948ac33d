"""Independent time integration of ``u' = F(u) - A(u) u`` for validation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.integrate import RK45

from .model import ProblemModel

__all__ = [
    "DecayFitError",
    "FiberVerification",
    "FlowResult",
    "estimate_decay_rate",
    "integrate",
    "verify_fiber",
]

FIT_WINDOW = (1e-10, 1e-2)
HORIZON = 30.0  # in units of 1/sigma
STATIONARY = 1e-10
# the fit window reaches down to 1e-10, so the absolute error must sit well below it
VERIFY_TOL = 1e-12


class DecayFitError(ValueError):
    """No decay observed inside the fit window."""


@dataclass
class FlowResult:
    times: np.ndarray
    states: np.ndarray
    terminal_state: np.ndarray
    accepted_steps: int
    rejected_steps: int
    exited: bool = False
    exit_time: float | None = None
    message: str = ""

    @property
    def completed(self) -> bool:
        return not self.exited


def integrate(model: ProblemModel, u0, t_final: float, tol: float = 1e-10,
              max_steps: int = 200_000) -> FlowResult:
    """Dormand-Prince 5(4) with ``rtol = atol = tol``.

    A negative ``t_final`` integrates backward. Leaving the validity ball
    stops the integration; the partial trajectory is returned with
    ``exited=True`` and the time of the last state inside the ball.
    """
    u0 = np.asarray(u0, dtype=float)
    if t_final == 0:
        raise ValueError("t_final must be nonzero")
    if not tol > 0:
        raise ValueError("tol must be positive")
    model.check_domain(u0)
    nfev = [0]

    def rhs(t, u):
        nfev[0] += 1
        return np.asarray(model.F(u), dtype=float) - np.asarray(model.A(u), dtype=float) @ u

    def inside(u):
        if model.u_ref is None:
            return bool(np.all(np.isfinite(u)))
        return bool(np.all(np.isfinite(u))) and float(np.linalg.norm(u - model.u_ref)) <= model.rho_V

    solver = RK45(rhs, 0.0, u0, float(t_final), rtol=tol, atol=tol)
    start = nfev[0]
    times, states = [0.0], [u0.copy()]
    accepted = 0
    exited, exit_time, message = False, None, ""
    while solver.status == "running":
        if accepted >= max_steps:
            exited, exit_time, message = True, times[-1], f"step limit {max_steps} reached"
            break
        try:
            err = solver.step()
        except FloatingPointError:
            err = "floating point error"
        if err is not None or solver.status == "failed":
            exited, exit_time, message = True, times[-1], f"integration stopped: {err}"
            break
        if not inside(solver.y):
            exited, exit_time, message = True, times[-1], "left the validity ball"
            break
        accepted += 1
        times.append(solver.t)
        states.append(solver.y.copy())
    attempts = (nfev[0] - start) // 6  # six stages per attempt (FSAL)
    return FlowResult(
        times=np.array(times),
        states=np.array(states),
        terminal_state=states[-1].copy(),
        accepted_steps=accepted,
        rejected_steps=max(0, attempts - accepted),
        exited=exited,
        exit_time=exit_time,
        message=message,
    )


def estimate_decay_rate(result: FlowResult, u_infty, window=FIT_WINDOW) -> float:
    """Negated least-squares slope of ``log |u(t) - u_infty|`` against ``|t|``."""
    dev = np.linalg.norm(result.states - np.asarray(u_infty, dtype=float), axis=1)
    lo, hi = window
    mask = (dev >= lo) & (dev <= hi)
    if np.count_nonzero(mask) < 3:
        raise DecayFitError(
            f"fewer than 3 samples with deviation in [{lo:g}, {hi:g}] (no decay observed)"
        )
    slope = np.polyfit(np.abs(result.times[mask]), np.log(dev[mask]), 1)[0]
    return float(-slope)


@dataclass
class FiberVerification:
    kind: str
    passed: bool
    terminal_distance: float
    decay_rate: float
    sigma: float
    limit_equilibrium: np.ndarray
    base_point_mismatch: float
    flow: FlowResult
    reason: str = ""


def verify_fiber(model: ProblemModel, sol, horizon: float | None = None, tol: float = VERIFY_TOL,
                 split=None, distance_tol: float = 1e-6, rate_factor: float = 0.9) -> FiberVerification:
    """Integrate from a fiber point toward its base equilibrium and grade the convergence.

    Passing needs terminal distance to ``u_infty`` at most ``distance_tol``
    and a fitted rate at least ``rate_factor * sigma``. The rate is fitted
    against the observed limit (the terminal state): the fiber point carries
    a discretization error of order 1e-7, and the deviation from ``u_infty``
    levels off there, inside the fit window. ``base_point_mismatch``
    is the center-subspace distance between the limit and ``u_infty`` (the
    whole distance when no ``split`` is given).
    """
    kind = sol.request.kind
    sigma = sol.request.sigma
    horizon = HORIZON / sigma if horizon is None else float(horizon)
    t_final = horizon if kind == "stable" else -horizon
    u_inf = np.asarray(sol.u_infty, dtype=float)
    flow = integrate(model, sol.u0, t_final, tol)
    limit = flow.terminal_state.copy()
    dist = float(np.linalg.norm(limit - u_inf))
    gap = limit - u_inf
    mismatch = float(np.linalg.norm(split.P_c @ gap if split is not None else gap))
    reasons = []
    if float(np.linalg.norm(np.asarray(sol.u0) - u_inf)) <= STATIONARY:
        rate = float("nan")  # starts on the equilibrium: nothing to fit
    else:
        try:
            rate = estimate_decay_rate(flow, limit)
        except DecayFitError as exc:
            rate = float("nan")
            reasons.append(str(exc))
        else:
            if rate < rate_factor * sigma:
                reasons.append(f"decay rate {rate:.4g} < {rate_factor} * sigma = {rate_factor * sigma:.4g}")
    if flow.exited:
        reasons.append(f"{flow.message} at t = {flow.exit_time:.6g}")
    if not dist <= distance_tol:
        reasons.append(f"terminal distance {dist:.3e} > {distance_tol:g}")
    return FiberVerification(
        kind=kind,
        passed=not reasons,
        terminal_distance=dist,
        decay_rate=rate,
        sigma=sigma,
        limit_equilibrium=limit,
        base_point_mismatch=mismatch,
        flow=flow,
        reason="; ".join(reasons),
    )
