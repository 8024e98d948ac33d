"""Lyapunov-Perron solver for the stable and unstable fibers.

A fiber point is found by solving ``H_s = 0`` (or ``H_u = 0``) for a whole
trajectory ``(x(t), y(t), z(t))`` in the normal form, discretized on a
geometric grid and measured in the weighted sup norm

    ||w|| = max_j exp(sigma |t_j|) (|x_j| + |y_j| + |z_j|).

Stable kind, t >= 0::

    H_1 = x(t) + int_t^inf R_c
    H_2 = y(t) - [exp(-A_s t) w0 + int_0^t exp(-A_s (t - s)) R_s ds],   w0 = y0 - phi_s(xi)
    H_3 = z(t) + int_t^inf exp(-A_u (t - s)) R_u ds

Unstable kind, t <= 0::

    H_1 = x(t) - int_-inf^t R_c
    H_2 = y(t) - int_-inf^t exp(-A_s (t - s)) R_s ds
    H_3 = z(t) - [exp(-A_u t) w0 - int_t^0 exp(-A_u (t - s)) R_u ds],   w0 = z0 - phi_u(xi)

Integrals over the truncated part of the half line are not added to the
value; they enter as an error budget that must stay below a tenth of the
requested tolerance.
"""
from __future__ import annotations

import weakref
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg as sla
from scipy.optimize import brentq

from .chart import EquilibriumChart, build_chart
from .model import ProblemModel
from .normalform import NormalFormContext, from_normal_coords, make_context
from .spectral import (
    NHReport,
    SpectralSplit,
    check_normally_hyperbolic,
    linearize,
    split_spectrum,
)

__all__ = [
    "BallExitError",
    "ConvergenceError",
    "DecompositionError",
    "ExpQuadrature",
    "FiberError",
    "FiberRequest",
    "FiberSolution",
    "FoliationSetup",
    "GridSpec",
    "LPOperator",
    "PreconditionError",
    "TailBoundError",
    "TrajectoryGrid",
    "assemble_H",
    "assemble_Hs",
    "assemble_Hu",
    "decompose_initial_value",
    "fiber_tangent",
    "recover_initial_values",
    "setup_foliation",
    "solve_fiber",
    "solve_stable_fiber",
    "solve_unstable_fiber",
    "tangent_angle",
]

DEFAULT_N = 128
DEFAULT_TOL = 1e-9
DEFAULT_MAXITER = 40
FIRST_STEP = 0.01  # in units of 1/sigma
HORIZON = 14.0  # in units of 1/sigma
DAMPING_FLOOR = 2.0**-6
GRID_EXTENSION = 8  # nodes appended per retry after a tail-bound violation


class FiberError(RuntimeError):
    pass


class ConvergenceError(FiberError):
    pass


class BallExitError(FiberError):
    pass


class TailBoundError(FiberError):
    """The truncated tail is not negligible; extend the grid."""


class PreconditionError(ValueError):
    pass


class DecompositionError(FiberError):
    pass


# -- grids --------------------------------------------------------------------


def _geometric_ratio(N: int, T: float, first: float) -> float:
    if first * N >= T:
        return 1.0

    def excess(log_q):
        # (q - 1) / (q^N - 1) - first / T
        return np.expm1(log_q) / np.expm1(N * log_q) - first / T

    return float(np.exp(brentq(excess, 1e-12, 1.0, xtol=1e-15)))


@dataclass(frozen=True)
class GridSpec:
    """Geometric grid ``t_j = T (q^j - 1) / (q^N - 1)``, mirrored to ``[-T, 0]`` when backward."""

    sigma: float
    N: int = DEFAULT_N
    T: float | None = None
    q: float | None = None
    direction: str = "forward"

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if self.direction not in ("forward", "backward"):
            raise ValueError("direction must be 'forward' or 'backward'")
        T = HORIZON / self.sigma if self.T is None else float(self.T)
        if self.N < 32:
            raise ValueError("grid needs N >= 32")
        if T < 10.0 / self.sigma * (1 - 1e-12):
            raise ValueError("grid needs T >= 10 / sigma")
        object.__setattr__(self, "T", T)
        if self.q is None:
            object.__setattr__(self, "q", _geometric_ratio(self.N, T, FIRST_STEP / self.sigma))

    def nodes(self) -> np.ndarray:
        j = np.arange(self.N + 1)
        if self.q == 1.0:
            s = self.T * j / self.N
        else:
            lq = np.log(self.q)
            s = self.T * np.expm1(j * lq) / np.expm1(self.N * lq)
        s[0], s[-1] = 0.0, self.T
        return s if self.direction == "forward" else -s[::-1]

    def first_step(self) -> float:
        n = self.nodes()
        return float(abs(n[1] - n[0]))

    def extended(self, extra: int) -> "GridSpec":
        """Append ``extra`` nodes with the same ratio, so the old grid is a prefix of the new one."""
        N = self.N + int(extra)
        if self.q == 1.0:
            T = self.T * N / self.N
        else:
            lq = np.log(self.q)
            T = self.T * np.expm1(N * lq) / np.expm1(self.N * lq)
        return replace(self, N=N, T=float(T))

    def refined(self) -> "GridSpec":
        """Same horizon with every step split in two (nested nodes)."""
        return replace(self, N=2 * self.N, q=float(np.sqrt(self.q)))


@dataclass
class TrajectoryGrid:
    """Per-node triple ``(x_j, y_j, z_j)`` of n-vectors in range(P_c), range(P_s), range(P_u)."""

    direction: str
    nodes: np.ndarray
    sigma: float
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray

    def weights(self) -> np.ndarray:
        return np.exp(self.sigma * np.abs(self.nodes))

    def pointwise(self) -> np.ndarray:
        return (
            np.linalg.norm(self.x, axis=1)
            + np.linalg.norm(self.y, axis=1)
            + np.linalg.norm(self.z, axis=1)
        )

    def weighted_norm(self) -> float:
        return float(np.max(self.weights() * self.pointwise()))

    def origin_index(self) -> int:
        return 0 if self.direction == "forward" else len(self.nodes) - 1

    def at_origin(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        k = self.origin_index()
        return self.x[k].copy(), self.y[k].copy(), self.z[k].copy()


# -- quadrature ---------------------------------------------------------------


def _phi_functions(Z: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``exp(Z), phi_1(Z), phi_2(Z)`` from one exponential of an augmented matrix."""
    d = Z.shape[0]
    aug = np.zeros((3 * d, 3 * d))
    aug[:d, :d] = Z
    aug[:d, d : 2 * d] = np.eye(d)
    aug[d : 2 * d, 2 * d :] = np.eye(d)
    E = sla.expm(aug)
    return E[:d, :d], E[:d, d : 2 * d], E[:d, 2 * d :]


class ExpQuadrature:
    """Exponentially fitted trapezoidal convolutions on a grid.

    On each interval ``R(s) exp(alpha s)`` is interpolated linearly and the
    product with the kernel and the weight ``exp(-alpha s)`` is integrated
    exactly. ``alpha = sigma`` on forward grids and ``-sigma`` on backward
    ones, so ``exp(-alpha s)`` is the decay the weighted norm allows.

    ``head(R)_j = int_{t_0}^{t_j} exp(-M (t_j - s)) R(s) ds``
    ``tail(R)_j = int_{t_j}^{t_N} exp(M (s - t_j)) R(s) ds``
    """

    def __init__(self, M: np.ndarray, nodes: np.ndarray, alpha: float, kind: str):
        if kind not in ("head", "tail"):
            raise ValueError(kind)
        self.kind = kind
        self.nodes = np.asarray(nodes, dtype=float)
        self.alpha = float(alpha)
        M = np.atleast_2d(np.asarray(M, dtype=float))
        self.d = d = M.shape[0]
        N = len(self.nodes) - 1
        eye = np.eye(d)
        self.prop = np.empty((N, d, d))
        self.w_left = np.empty((N, d, d))
        self.w_right = np.empty((N, d, d))
        for k in range(N):
            h = self.nodes[k + 1] - self.nodes[k]
            if kind == "head":
                E, P1, P2 = _phi_functions(-h * (M - self.alpha * eye))
                self.prop[k] = sla.expm(-h * M)
                self.w_left[k] = h * (P1 - P2)
                self.w_right[k] = h * P2
            else:
                E, P1, P2 = _phi_functions(h * (M - self.alpha * eye))
                self.prop[k] = sla.expm(h * M)
                self.w_left[k] = h * P2
                self.w_right[k] = h * (P1 - P2)
        self.scale = np.exp(-self.alpha * self.nodes)

    def __call__(self, R: np.ndarray) -> np.ndarray:
        """Apply to ``R`` of shape ``(N+1, d)`` or ``(N+1, d, k)``."""
        R = np.asarray(R, dtype=float)
        squeeze = R.ndim == 2
        if squeeze:
            R = R[:, :, None]
        g = R * np.exp(self.alpha * self.nodes)[:, None, None]
        out = np.zeros_like(g)
        N = len(self.nodes) - 1
        if self.kind == "head":
            for k in range(N):
                out[k + 1] = self.prop[k] @ out[k] + self.scale[k + 1] * (
                    self.w_left[k] @ g[k] + self.w_right[k] @ g[k + 1]
                )
        else:
            for k in range(N - 1, -1, -1):
                out[k] = self.prop[k] @ out[k + 1] + self.scale[k] * (
                    self.w_left[k] @ g[k] + self.w_right[k] @ g[k + 1]
                )
        return out[:, :, 0] if squeeze else out

    def matrix(self) -> np.ndarray:
        """Dense ``((N+1) d, (N+1) d)`` matrix of the operator, node-major."""
        size = len(self.nodes) * self.d
        ident = np.eye(size).reshape(len(self.nodes), self.d, size)
        return self(ident).reshape(size, size)


class LPOperator:
    """Discretized linear part of ``H_s`` or ``H_u`` for one split and grid.

    ``H(X) = X - B(w0) - L(R(X))`` with ``X`` of shape ``(N+1, n)`` holding
    center/stable/unstable coordinates per node.
    """

    def __init__(self, split: SpectralSplit, kind: str, nodes: np.ndarray, sigma: float):
        self.kind = kind
        self.nodes = np.asarray(nodes, dtype=float)
        self.sigma = float(sigma)
        dims = split.dims
        self.n = sum(dims)
        self.slices = {}
        off = 0
        for part, d in zip("csu", dims):
            self.slices[part] = slice(off, off + d)
            off += d
        A_s, A_u = split.reduced["s"], split.reduced["u"]
        zero_c = np.zeros((dims[0], dims[0]))
        alpha = self.sigma if kind == "stable" else -self.sigma
        # (quadrature, sign) per part: L(R)_part = sign * quad(R_part)
        if kind == "stable":
            self.parts = {
                "c": (ExpQuadrature(zero_c, self.nodes, alpha, "tail"), -1.0),
                "s": (ExpQuadrature(A_s, self.nodes, alpha, "head"), 1.0),
                "u": (ExpQuadrature(A_u, self.nodes, alpha, "tail"), -1.0),
            }
            self.boundary_part = "s"
        elif kind == "unstable":
            self.parts = {
                "c": (ExpQuadrature(zero_c, self.nodes, alpha, "head"), 1.0),
                "s": (ExpQuadrature(A_s, self.nodes, alpha, "head"), 1.0),
                "u": (ExpQuadrature(A_u, self.nodes, alpha, "tail"), -1.0),
            }
            self.boundary_part = "u"
        else:
            raise ValueError("kind must be 'stable' or 'unstable'")
        self.kappa = {"s": split.kappa_s, "u": split.kappa_u}
        self.omega = split.omega
        self._matrix = None

    @property
    def N(self) -> int:
        return len(self.nodes) - 1

    def weights(self) -> np.ndarray:
        return np.exp(self.sigma * np.abs(self.nodes))

    def affine(self, w0: np.ndarray) -> np.ndarray:
        """Homogeneous solution carrying the boundary datum (``exp(-A_s t) w0`` or ``exp(-A_u t) w0``)."""
        B = np.zeros((self.N + 1, self.n))
        part = self.boundary_part
        sl = self.slices[part]
        if sl.stop == sl.start:
            return B
        quad = self.parts[part][0]
        if self.kind == "stable":
            B[0, sl] = w0
            for k in range(self.N):
                B[k + 1, sl] = quad.prop[k] @ B[k, sl]
        else:
            B[self.N, sl] = w0
            for k in range(self.N - 1, -1, -1):
                B[k, sl] = quad.prop[k] @ B[k + 1, sl]
        return B

    def apply(self, R: np.ndarray) -> np.ndarray:
        out = np.zeros_like(R)
        for part, (quad, sign) in self.parts.items():
            sl = self.slices[part]
            if sl.stop > sl.start:
                out[:, sl] = sign * quad(R[:, sl])
        return out

    def raw(self, part: str, R: np.ndarray) -> np.ndarray:
        """Unsigned quadrature of one part (``R`` of shape ``(N+1, d)``)."""
        return self.parts[part][0](R)

    def matrix(self) -> np.ndarray:
        if self._matrix is None:
            n, N1 = self.n, self.N + 1
            L = np.zeros((N1, n, N1, n))
            for part, (quad, sign) in self.parts.items():
                sl = self.slices[part]
                d = sl.stop - sl.start
                if d == 0:
                    continue
                L[:, sl, :, sl] = sign * quad.matrix().reshape(N1, d, N1, d)
            self._matrix = L.reshape(N1 * n, N1 * n)
        return self._matrix

    def weighted_norm(self, X: np.ndarray) -> float:
        return float(np.max(self.weights() * self._pointwise(X)))

    def _pointwise(self, X: np.ndarray) -> np.ndarray:
        return sum(
            np.linalg.norm(X[:, sl], axis=1) for sl in self.slices.values() if sl.stop > sl.start
        )

    def tail_budget(self, R: np.ndarray) -> float:
        """Weighted-norm bound on the integrals over the truncated half line.

        Only the components integrated to infinity are truncated (center and
        unstable for the stable kind, center and stable for the unstable
        kind). Each is assumed to obey ``|R_l(s)| <= rho_l exp(-sigma |s|)``
        beyond the grid, with ``rho_l`` the envelope ``|R_l| exp(sigma |s|)``
        fitted on the last quarter of the grid and evaluated at its end.
        """
        other = "u" if self.kind == "stable" else "s"
        budget = self._envelope(R[:, self.slices["c"]]) / self.sigma
        if self.slices[other].stop > self.slices[other].start:
            rho = self._envelope(R[:, self.slices[other]])
            budget += self.kappa[other] * rho / (self.sigma + self.omega)
        return budget

    def _envelope(self, R_part: np.ndarray) -> float:
        if R_part.shape[1] == 0:
            return 0.0
        r = np.linalg.norm(R_part, axis=1)
        s = np.abs(self.nodes)
        if self.kind == "unstable":
            r, s = r[::-1], s[::-1]
        env = r * np.exp(self.sigma * s)
        quarter = slice(len(s) - max(2, len(s) // 4), len(s))
        e_q, s_q = env[quarter], s[quarter]
        pos = e_q > 0
        if not np.any(pos):
            return 0.0
        if np.count_nonzero(pos) >= 2:
            slope, icpt = np.polyfit(s_q[pos], np.log(e_q[pos]), 1)
            if slope <= 0:
                return max(float(np.exp(icpt + slope * s[-1])), float(env[-1]))
        return float(np.max(e_q))


_OPERATORS: "weakref.WeakKeyDictionary[SpectralSplit, dict]" = weakref.WeakKeyDictionary()


def lp_operator(split: SpectralSplit, kind: str, nodes: np.ndarray, sigma: float) -> LPOperator:
    nodes = np.asarray(nodes, dtype=float)
    cache = _OPERATORS.setdefault(split, {})
    key = (kind, float(sigma), nodes.tobytes())
    op = cache.get(key)
    if op is None:
        op = cache[key] = LPOperator(split, kind, nodes, sigma)
    return op


# -- requests and solutions ----------------------------------------------------


@dataclass(frozen=True)
class FiberRequest:
    kind: str
    boundary: np.ndarray  # y0 in range(P_s) (stable) or z0 in range(P_u) (unstable)
    xi: np.ndarray  # in range(P_c)
    sigma: float
    tol_residual: float = DEFAULT_TOL
    max_iters: int = DEFAULT_MAXITER
    radius: float = 0.2
    N: int = DEFAULT_N
    T: float | None = None
    q: float | None = None

    def grid(self) -> GridSpec:
        direction = "forward" if self.kind == "stable" else "backward"
        return GridSpec(self.sigma, self.N, self.T, self.q, direction=direction)

    def with_grid(self, grid: GridSpec) -> "FiberRequest":
        return replace(self, N=grid.N, T=grid.T, q=grid.q)


@dataclass
class FiberSolution:
    request: FiberRequest
    trajectory: TrajectoryGrid
    x0: np.ndarray
    z0_rec: np.ndarray | None
    y0_rec: np.ndarray | None
    u0: np.ndarray
    u_infty: np.ndarray
    residual: float
    iterations: int
    decay_rate_est: float
    tail_budget: float
    newton_steps: int = 0
    picard_steps: int = 0


def _to_coords(split, traj: TrajectoryGrid) -> np.ndarray:
    return np.hstack([traj.x @ split.basis("c"), traj.y @ split.basis("s"), traj.z @ split.basis("u")])


def _from_coords(split, op: LPOperator, X: np.ndarray, direction: str) -> TrajectoryGrid:
    return TrajectoryGrid(
        direction=direction,
        nodes=op.nodes.copy(),
        sigma=op.sigma,
        x=X[:, op.slices["c"]] @ split.basis("c").T,
        y=X[:, op.slices["s"]] @ split.basis("s").T,
        z=X[:, op.slices["u"]] @ split.basis("u").T,
    )


def _eval_R(ctx: NormalFormContext, X: np.ndarray) -> np.ndarray:
    return np.array([ctx.R_coords(q) for q in X])


def _eval_DR(ctx: NormalFormContext, X: np.ndarray) -> np.ndarray:
    return np.array([ctx.R_coords_jacobian(q) for q in X])


def _boundary_datum(ctx: NormalFormContext, kind: str, boundary) -> np.ndarray:
    split = ctx.split
    part = "s" if kind == "stable" else "u"
    b = np.asarray(boundary, dtype=float)
    if float(np.linalg.norm(split.projection(part) @ b - b)) > 1e-10:
        raise PreconditionError(f"boundary datum must lie in range(P_{part})")
    phi = ctx.phi_s if kind == "stable" else ctx.phi_u
    return split.basis(part).T @ (b - phi)


def assemble_H(ctx: NormalFormContext, traj: TrajectoryGrid, boundary, kind: str) -> TrajectoryGrid:
    """Nodewise residual of ``H_s`` / ``H_u`` at a given trajectory."""
    split = ctx.split
    op = lp_operator(split, kind, traj.nodes, traj.sigma)
    X = _to_coords(split, traj)
    H = X - op.affine(_boundary_datum(ctx, kind, boundary)) - op.apply(_eval_R(ctx, X))
    return _from_coords(split, op, H, traj.direction)


def assemble_Hs(ctx: NormalFormContext, traj: TrajectoryGrid, y0) -> TrajectoryGrid:
    return assemble_H(ctx, traj, y0, "stable")


def assemble_Hu(ctx: NormalFormContext, traj: TrajectoryGrid, z0) -> TrajectoryGrid:
    return assemble_H(ctx, traj, z0, "unstable")


def _decay_rate(nodes: np.ndarray, dev: np.ndarray, lo=1e-10, hi=1e-2) -> float:
    mask = (dev >= lo) & (dev <= hi)
    if np.count_nonzero(mask) < 3:
        return float("nan")
    slope = np.polyfit(np.abs(nodes[mask]), np.log(dev[mask]), 1)[0]
    return float(-slope)


def recover_initial_values(ctx: NormalFormContext, traj: TrajectoryGrid, kind: str = "stable"):
    """Initial values of the components not prescribed by the boundary datum.

    Stable: ``x0 = xi - int_0^inf R_c`` and ``z0 = phi_u(xi) - int_0^inf exp(A_u s) R_u ds``.
    Unstable: ``x0 = xi + int_-inf^0 R_c`` and ``y0 = phi_s(xi) + int_-inf^0 exp(A_s s) R_s ds``.
    """
    split = ctx.split
    op = lp_operator(split, kind, traj.nodes, traj.sigma)
    X = _to_coords(split, traj)
    R = _eval_R(ctx, X)
    k = 0 if kind == "stable" else op.N
    x_int = op.raw("c", R[:, op.slices["c"]])[k]
    if kind == "stable":
        x0 = ctx.xi - split.embed("c", x_int)
        z_int = op.raw("u", R[:, op.slices["u"]])[k] if split.dims[2] else np.zeros(0)
        return x0, ctx.phi_u - split.embed("u", z_int)
    x0 = ctx.xi + split.embed("c", x_int)
    y_int = op.raw("s", R[:, op.slices["s"]])[k] if split.dims[1] else np.zeros(0)
    return x0, ctx.phi_s + split.embed("s", y_int)


def solve_fiber(ctx: NormalFormContext, req: FiberRequest, initial: np.ndarray | None = None,
                polish: bool = True) -> FiberSolution:
    """Solve the discretized ``H = 0`` by damped Newton with a Picard fallback."""
    split = ctx.split
    kind = req.kind
    if kind not in ("stable", "unstable"):
        raise ValueError("kind must be 'stable' or 'unstable'")
    if kind == "unstable" and split.dims[2] == 0:
        raise PreconditionError("unstable fiber requested but the unstable subspace is empty")
    if kind == "stable" and split.dims[1] == 0:
        raise PreconditionError("stable fiber requested but the stable subspace is empty")
    if not 0 < req.sigma <= split.omega * (1 + 1e-12):
        raise PreconditionError(f"sigma = {req.sigma:.6g} must lie in (0, omega = {split.omega:.6g}]")
    if np.linalg.norm(req.boundary) > req.radius or np.linalg.norm(req.xi) > req.radius:
        raise PreconditionError(
            f"|boundary| = {np.linalg.norm(req.boundary):.6g}, |xi| = {np.linalg.norm(req.xi):.6g};"
            f" both must be <= r = {req.radius:.6g}"
        )
    if float(np.linalg.norm(ctx.xi - np.asarray(req.xi, dtype=float))) > 1e-14:
        raise PreconditionError("request xi does not match the context base point")

    grid = req.grid()
    op = lp_operator(split, kind, grid.nodes(), req.sigma)
    w0 = _boundary_datum(ctx, kind, req.boundary)
    B = op.affine(w0)
    X = B.copy() if initial is None else np.array(initial, dtype=float)
    if X.shape != B.shape:
        raise ValueError(f"initial iterate has shape {X.shape}, expected {B.shape}")
    size = X.size
    eye = np.eye(size)

    def residual(X):
        R = _eval_R(ctx, X)
        H = X - B - op.apply(R)
        return R, H, op.weighted_norm(H)

    R, H, res = residual(X)
    iterations = 1
    newton = picard = 0
    last_was_newton = False
    J = None
    while res > req.tol_residual:
        if iterations >= req.max_iters:
            raise ConvergenceError(
                f"{kind} fiber: residual {res:.3e} > {req.tol_residual:.1e} after {iterations} iterations"
            )
        DR = _eval_DR(ctx, X)
        L = op.matrix().reshape(size, op.N + 1, op.n)
        J = eye - np.einsum("mjk,jkl->mjl", L, DR).reshape(size, size)
        delta = np.linalg.solve(J, -H.reshape(-1)).reshape(X.shape)
        accepted = False
        lam = 1.0
        while lam >= DAMPING_FLOOR:
            X_new = X + lam * delta
            if op.weighted_norm(X_new) > req.radius:
                break  # outside the trust region
            R_new, H_new, res_new = residual(X_new)
            if res_new < res:
                accepted = True
                break
            lam /= 2
        if accepted:
            newton += 1
            last_was_newton = True
        else:
            X_new = B + op.apply(R)
            if op.weighted_norm(X_new) > req.radius:
                raise BallExitError(
                    f"{kind} fiber: iterate left the ball of radius r = {req.radius:.3g}"
                )
            R_new, H_new, res_new = residual(X_new)
            picard += 1
            last_was_newton = False
        X, R, H, res = X_new, R_new, H_new, res_new
        iterations += 1

    if polish and last_was_newton and res > 0:
        DR = _eval_DR(ctx, X)
        L = op.matrix().reshape(size, op.N + 1, op.n)
        J = eye - np.einsum("mjk,jkl->mjl", L, DR).reshape(size, size)
        X_new = X + np.linalg.solve(J, -H.reshape(-1)).reshape(X.shape)
        R_new, H_new, res_new = residual(X_new)
        if res_new < res and op.weighted_norm(X_new) <= req.radius:
            X, R, H, res = X_new, R_new, H_new, res_new

    budget = op.tail_budget(R)
    if budget > 0.1 * req.tol_residual:
        raise TailBoundError(
            f"tail budget {budget:.3e} exceeds 0.1 * tol = {0.1 * req.tol_residual:.1e};"
            " extend the grid (larger T) or relax the tolerance"
        )

    direction = grid.direction
    traj = _from_coords(split, op, X, direction)
    k = traj.origin_index()
    if kind == "stable":
        x0, z0 = recover_initial_values(ctx, traj, "stable")
        traj.y[k] = split.embed("s", w0)
        traj.x[k] = x0 - ctx.xi
        traj.z[k] = z0 - ctx.phi_u
        y0_rec, z0_rec = None, z0
    else:
        x0, y0 = recover_initial_values(ctx, traj, "unstable")
        traj.z[k] = split.embed("u", w0)
        traj.x[k] = x0 - ctx.xi
        traj.y[k] = y0 - ctx.phi_s
        y0_rec, z0_rec = y0, None
    u0 = from_normal_coords(ctx, *traj.at_origin())
    final = assemble_H(ctx, traj, req.boundary, kind).weighted_norm()
    return FiberSolution(
        request=req,
        trajectory=traj,
        x0=x0,
        z0_rec=z0_rec,
        y0_rec=y0_rec,
        u0=u0,
        u_infty=ctx.u_infty.copy(),
        residual=final,
        iterations=iterations,
        decay_rate_est=_decay_rate(traj.nodes, traj.pointwise()),
        tail_budget=budget,
        newton_steps=newton,
        picard_steps=picard,
    )


def solve_stable_fiber(ctx: NormalFormContext, req: FiberRequest, **kw) -> FiberSolution:
    if req.kind != "stable":
        raise ValueError("expected a stable request")
    return solve_fiber(ctx, req, **kw)


def solve_unstable_fiber(ctx: NormalFormContext, req: FiberRequest, **kw) -> FiberSolution:
    if req.kind != "unstable":
        raise ValueError("expected an unstable request")
    return solve_fiber(ctx, req, **kw)


# -- set-up bundling the problem, split and chart -------------------------------


@dataclass(eq=False)
class FoliationSetup:
    """Model, spectral split and chart at ``u*`` plus solver defaults."""

    model: ProblemModel
    u_star: np.ndarray
    split: SpectralSplit
    chart: EquilibriumChart
    report: NHReport
    sigma: float
    radius: float
    N: int = DEFAULT_N
    T: float | None = None
    tol_residual: float = DEFAULT_TOL
    max_iters: int = DEFAULT_MAXITER
    extensions: int = 4
    _contexts: dict = field(default_factory=dict, repr=False)

    def context(self, xi) -> NormalFormContext:
        xi = np.asarray(xi, dtype=float)
        key = xi.tobytes()
        ctx = self._contexts.get(key)
        if ctx is None:
            ctx = self._contexts[key] = make_context(self.model, self.split, self.chart, xi)
        return ctx

    def embed(self, part: str, coords) -> np.ndarray:
        return self.split.embed(part, np.atleast_1d(np.asarray(coords, dtype=float)))

    def request(self, kind: str, boundary, xi, **overrides) -> FiberRequest:
        base = dict(
            sigma=self.sigma,
            tol_residual=self.tol_residual,
            max_iters=self.max_iters,
            radius=self.radius,
            N=self.N,
            T=self.T,
        )
        base.update({k: v for k, v in overrides.items() if v is not None})
        return FiberRequest(kind, np.asarray(boundary, dtype=float), np.asarray(xi, dtype=float), **base)

    def solve(self, kind: str, boundary, xi, initial=None, **overrides) -> FiberSolution:
        """Solve one fiber request; on a tail-bound violation the grid is extended and the solve repeated."""
        req = self.request(kind, boundary, xi, **overrides)
        ctx = self.context(req.xi)
        if isinstance(initial, FiberSolution):
            # warm start on the grid of an earlier solution of the same kind
            if initial.request.kind != kind:
                raise ValueError("warm start from a solution of the other kind")
            req = req.with_grid(initial.request.grid())
            initial = _to_coords(self.split, initial.trajectory)
        for attempt in range(self.extensions + 1):
            try:
                return solve_fiber(ctx, req, initial=initial)
            except TailBoundError:
                if attempt == self.extensions:
                    raise
            # same ratio, longer horizon (about 27% per step at the default ratio)
            req = req.with_grid(req.grid().extended(GRID_EXTENSION))
            initial = None
        raise AssertionError("unreachable")

    def solve_coords(self, kind: str, b, xi, **overrides) -> FiberSolution:
        """Like :meth:`solve` with coordinates in the canonical bases of the subspaces."""
        part = "s" if kind == "stable" else "u"
        return self.solve(kind, self.embed(part, b), self.embed("c", xi), **overrides)


def setup_foliation(
    model: ProblemModel,
    u_star,
    *,
    eps_center: float | None = None,
    rho_0: float | None = None,
    sigma: float | None = None,
    radius: float | None = None,
    N: int = DEFAULT_N,
    T: float | None = None,
    tol_residual: float = DEFAULT_TOL,
    max_iters: int = DEFAULT_MAXITER,
    use_psi: bool = True,
    extensions: int = 4,
) -> FoliationSetup:
    u_star = np.asarray(u_star, dtype=float)
    A0 = linearize(model, u_star)
    split = split_spectrum(A0, None, eps_center)
    report = check_normally_hyperbolic(split, model.m)
    if not report.ok:
        raise PreconditionError(f"u* is neither normally stable nor normally hyperbolic: {report.reason}")
    chart = build_chart(model, split, u_star, rho_0=rho_0, use_psi=use_psi)
    sigma = 0.9 * split.omega if sigma is None else float(sigma)
    radius = min(0.2, chart.rho_0) if radius is None else float(radius)
    return FoliationSetup(
        model=model.with_reference(model.u_ref if model.u_ref is not None else u_star),
        u_star=u_star,
        split=split,
        chart=chart,
        report=report,
        sigma=sigma,
        radius=radius,
        N=N,
        T=T,
        tol_residual=tol_residual,
        max_iters=max_iters,
        extensions=extensions,
    )


# -- tangents and decomposition --------------------------------------------------


def fiber_tangent(setup: FoliationSetup, kind: str, xi, h: float = 1e-5) -> np.ndarray:
    """Central-difference derivative of ``lambda(., xi)`` at 0; columns follow the subspace basis."""
    part = "s" if kind == "stable" else "u"
    V = setup.split.basis(part)
    xi = np.asarray(xi, dtype=float)
    base = setup.solve(kind, np.zeros(setup.split.n), xi)
    cols = []
    for k in range(V.shape[1]):
        plus = setup.solve(kind, h * V[:, k], xi, initial=base).u0
        minus = setup.solve(kind, -h * V[:, k], xi, initial=base).u0
        cols.append((plus - minus) / (2 * h))
    return np.column_stack(cols)


def tangent_angle(setup: FoliationSetup, kind: str, xi, h: float = 1e-5) -> tuple[float, np.ndarray, np.ndarray]:
    """Largest principal angle between the fiber tangent and the invariant subspace at ``u_infty``."""
    tangent = fiber_tangent(setup, kind, xi, h)
    ctx = setup.context(np.asarray(xi, dtype=float))
    split_inf = split_spectrum(linearize(setup.model, ctx.u_infty, tol=1e-9), None, setup.split.eps_center)
    target = split_inf.basis("s" if kind == "stable" else "u")
    angles = sla.subspace_angles(tangent, target)
    return float(np.max(angles)), tangent, target


@dataclass(frozen=True)
class Decomposition:
    """``u0 = lambda^s(y0, xi)``; ``y_offset = y0 - phi_s(xi)`` is the stable coordinate relative to ``u_infty``."""

    y0: np.ndarray
    xi: np.ndarray
    residual: float
    iterations: int
    solution: FiberSolution

    @property
    def y_offset(self) -> np.ndarray:
        return self.solution.trajectory.at_origin()[1]


def decompose_initial_value(setup: FoliationSetup, u0, tol: float = 1e-8, max_iter: int = 20,
                            fd_step: float = 1e-6) -> Decomposition:
    """Find ``(y0, xi)`` with ``lambda^s(y0, xi) = u0`` by Newton with a difference Jacobian."""
    if setup.report.classification != "NormallyStable":
        raise PreconditionError("decomposition of a neighborhood requires a normally stable u*")
    split = setup.split
    u0 = np.asarray(u0, dtype=float)
    d = u0 - setup.u_star
    if float(np.linalg.norm(d)) > setup.radius:
        raise PreconditionError(
            f"|u0 - u*| = {np.linalg.norm(d):.6g} exceeds r = {setup.radius:.6g}"
        )
    m_s, m_c = split.dims[1], split.dims[0]
    p = np.concatenate([split.coords("s", d), split.coords("c", d)])
    solve_tol = min(setup.tol_residual, 1e-10)

    def lam(p, initial=None):
        y0 = split.embed("s", p[:m_s])
        xi = split.embed("c", p[m_s:])
        return setup.solve("stable", y0, xi, initial=initial, tol_residual=solve_tol)

    sol = lam(p)
    r = sol.u0 - u0
    it = 0
    while np.linalg.norm(r) > tol:
        if it >= max_iter:
            raise DecompositionError(
                f"no stable-fiber decomposition: |lambda - u0| = {np.linalg.norm(r):.3e} after {it} steps"
            )
        init = sol
        J = np.empty((u0.size, m_s + m_c))
        for k in range(m_s + m_c):
            e = np.zeros(m_s + m_c)
            e[k] = fd_step
            J[:, k] = (lam(p + e, init).u0 - lam(p - e, init).u0) / (2 * fd_step)
        step = np.linalg.lstsq(J, -r, rcond=None)[0]
        try:
            sol = lam(p + step, init)
        except FiberError as exc:
            raise DecompositionError(f"fiber solve failed during decomposition: {exc}") from exc
        p = p + step
        r = sol.u0 - u0
        it += 1
    return Decomposition(
        y0=split.embed("s", p[:m_s]),
        xi=split.embed("c", p[m_s:]),
        residual=float(np.linalg.norm(r)),
        iterations=it,
        solution=sol,
    )
