"""Linearization at an equilibrium and the center/stable/unstable spectral split.

Sign convention follows ``u' + A_0 u = 0``: the *stable* part of the spectrum
has positive real part and the *unstable* part negative real part.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .model import ProblemModel, eval_rhs, eval_rhs_jacobian

__all__ = [
    "ClusteringError",
    "ImaginaryAxisError",
    "ManifoldDimensionError",
    "NonEquilibriumError",
    "NHReport",
    "SpectralError",
    "SpectralSplit",
    "check_normally_hyperbolic",
    "classify_linearization",
    "default_eps_center",
    "linearize",
    "split_spectrum",
    "stable_semigroup",
    "unstable_group",
]

PARTS = ("c", "s", "u")


class SpectralError(ValueError):
    pass


class ClusteringError(SpectralError):
    """An eigenvalue sits too close to the center tolerance to be assigned."""


class ManifoldDimensionError(SpectralError):
    pass


class ImaginaryAxisError(SpectralError):
    pass


class NonEquilibriumError(ValueError):
    pass


def linearize(model: ProblemModel, u_star, tol: float = 1e-10) -> np.ndarray:
    """Return ``A_0 w = A(u*) w + (A'(u*) w) u* - F'(u*) w`` as a matrix."""
    u_star = np.asarray(u_star, dtype=float)
    res = float(np.linalg.norm(eval_rhs(model, u_star)))
    if res > tol:
        raise NonEquilibriumError(f"|f(u*)| = {res:.3e} > {tol:.1e}; not an equilibrium")
    return -eval_rhs_jacobian(model, u_star)


def default_eps_center(A0) -> float:
    rho = float(np.max(np.abs(np.linalg.eigvals(A0)))) if np.size(A0) else 0.0
    return 1e-6 * (1.0 + rho)


def _canonical_basis(B: np.ndarray) -> np.ndarray:
    """Orthonormal basis of span(B) with a reproducible orientation.

    Columns are brought to echelon form on pivot rows, orthonormalized in
    that order and signed so the pivot entries are positive.
    """
    n, k = B.shape
    if k == 0:
        return np.zeros((n, 0))
    _, _, piv = sla.qr(B.T, pivoting=True, mode="economic")
    rows = np.sort(piv[:k])
    C = B @ np.linalg.inv(B[rows, :])
    Q, _ = np.linalg.qr(C)
    for j in range(k):
        if Q[rows[j], j] < 0:
            Q[:, j] = -Q[:, j]
    return Q + 0.0


def _eig_condition(M: np.ndarray) -> float:
    if M.shape[0] == 0:
        return 1.0
    _, X = np.linalg.eig(M)
    c = float(np.linalg.cond(X))
    return c if np.isfinite(c) else np.inf


@dataclass(frozen=True, eq=False)
class SpectralSplit:
    A0: np.ndarray
    P_c: np.ndarray
    P_s: np.ndarray
    P_u: np.ndarray
    A_s_full: np.ndarray
    A_u_full: np.ndarray
    sigma_c: tuple
    sigma_s: tuple
    sigma_u: tuple
    omega: float
    dims: tuple
    eps_center: float
    # orthonormal bases of the three ranges and the restricted operators in them
    bases: dict = field(repr=False)
    reduced: dict = field(repr=False)
    kappa_s: float = 1.0
    kappa_u: float = 1.0
    # [V_c V_s V_u] and its inverse (rows V_l^T P_l)
    frame: np.ndarray = field(default=None, repr=False)
    coframe: np.ndarray = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return self.A0.shape[0]

    def projection(self, part: str) -> np.ndarray:
        return {"c": self.P_c, "s": self.P_s, "u": self.P_u}[part]

    def basis(self, part: str) -> np.ndarray:
        return self.bases[part]

    def coords(self, part: str, v) -> np.ndarray:
        """Coordinates of ``P_part v`` in the orthonormal basis of the part."""
        return self.bases[part].T @ (self.projection(part) @ np.asarray(v, dtype=float))

    def embed(self, part: str, c) -> np.ndarray:
        return self.bases[part] @ np.asarray(c, dtype=float).reshape(-1)

    def dim(self, part: str) -> int:
        return self.bases[part].shape[1]


def split_spectrum(A0, m: int | None = None, eps_center: float | None = None) -> SpectralSplit:
    """Split ``sigma(A0)`` into center ``{0}``, stable (Re > 0) and unstable (Re < 0).

    With ``m`` given the center cluster must have dimension ``m``.
    """
    A0 = np.array(A0, dtype=float)
    if A0.ndim != 2 or A0.shape[0] != A0.shape[1]:
        raise ValueError("A0 must be square")
    if not np.all(np.isfinite(A0)):
        raise ValueError("A0 has non-finite entries")
    n = A0.shape[0]
    eps = default_eps_center(A0) if eps_center is None else float(eps_center)

    lam = np.linalg.eigvals(A0)
    for z in lam:
        re, im = abs(z.real), abs(z.imag)
        if re < eps and im >= eps:
            raise ImaginaryAxisError(f"eigenvalue {z:.6g} on the imaginary axis away from 0")
        if eps <= re < 2 * eps and im < eps:
            raise ClusteringError(
                f"eigenvalue {z:.6g} is within [eps, 2 eps) of 0 (eps = {eps:.3g}); ambiguous cluster"
            )

    def is_center(re, im):
        return (np.abs(re) < eps) & (np.abs(im) < eps)

    def is_stable(re, im):
        return re >= eps

    T1, Z1, k_c = sla.schur(A0, output="real", sort=is_center)
    rest = T1[k_c:, k_c:]
    if rest.size:
        T2, Z2, k_s = sla.schur(rest, output="real", sort=is_stable)
    else:
        T2, Z2, k_s = rest, np.zeros((0, 0)), 0
    Z = Z1.copy()
    Z[:, k_c:] = Z1[:, k_c:] @ Z2
    T = Z.T @ A0 @ Z
    k_u = n - k_c - k_s
    if m is not None and k_c != m:
        raise ManifoldDimensionError(
            f"center cluster has dimension {k_c}, manifold dimension is {m}"
        )

    # block-diagonalize T = [[T11, T12, T13], [0, T22, T23], [0, 0, T33]] by Sylvester solves
    sizes = (k_c, k_s, k_u)
    offs = np.cumsum((0,) + sizes)
    S = np.eye(n)
    S_inv = np.eye(n)
    for b in range(2):
        lo, mid = offs[b], offs[b + 1]
        if sizes[b] == 0 or mid == n:
            continue
        Tbb = T[lo:mid, lo:mid]
        Trest = T[mid:, mid:]
        C = T[lo:mid, mid:]
        Y = sla.solve_sylvester(Tbb, -Trest, -C)
        E = np.eye(n)
        E[lo:mid, mid:] = Y
        E_inv = np.eye(n)
        E_inv[lo:mid, mid:] = -Y
        S = S @ E
        S_inv = E_inv @ S_inv
        T = E_inv @ T @ E

    projections = []
    bases = {}
    reduced = {}
    for b, part in enumerate(PARTS):
        lo, hi = offs[b], offs[b + 1]
        right = Z @ S[:, lo:hi]
        left = S_inv[lo:hi, :] @ Z.T
        projections.append(right @ left)
        V = _canonical_basis(right)
        bases[part] = V
        reduced[part] = V.T @ A0 @ V
    P_c, P_s, P_u = projections

    def part_eigs(part):
        M = reduced[part]
        if not M.size:
            return ()
        return tuple(complex(z) for z in sorted(np.linalg.eigvals(M), key=lambda z: (z.real, z.imag)))

    sigma_c, sigma_s, sigma_u = (part_eigs(p) for p in PARTS)
    gaps = []
    if sigma_s:
        gaps.append(min(z.real for z in sigma_s))
    if sigma_u:
        gaps.append(-max(z.real for z in sigma_u))
    omega = 0.9 * min(gaps) if gaps else 0.0

    kappa_s = float(np.linalg.norm(P_s, 2)) * _eig_condition(reduced["s"]) if k_s else 1.0
    kappa_u = float(np.linalg.norm(P_u, 2)) * _eig_condition(reduced["u"]) if k_u else 1.0

    return SpectralSplit(
        A0=A0,
        P_c=P_c,
        P_s=P_s,
        P_u=P_u,
        A_s_full=A0 @ P_s,
        A_u_full=A0 @ P_u,
        sigma_c=sigma_c,
        sigma_s=sigma_s,
        sigma_u=sigma_u,
        omega=omega,
        dims=(k_c, k_s, k_u),
        eps_center=eps,
        bases=bases,
        reduced=reduced,
        kappa_s=kappa_s,
        kappa_u=kappa_u,
        frame=np.hstack([bases[p] for p in PARTS]),
        coframe=np.vstack([bases[p].T @ P for p, P in zip(PARTS, projections)]),
    )


@dataclass(frozen=True)
class NHReport:
    classification: str  # "NormallyHyperbolic" | "NormallyStable" | "Fails"
    reason: str
    kernel_dim: int
    kernel_ok: bool
    semisimple: bool
    imaginary_axis_ok: bool
    dims: tuple
    eigenvalues: tuple = ()
    omega: float = float("nan")

    @property
    def ok(self) -> bool:
        return self.classification != "Fails"


def _rank(M: np.ndarray, tol: float) -> int:
    if M.size == 0:
        return 0
    s = np.linalg.svd(M, compute_uv=False)
    return int(np.sum(s > tol))


def check_normally_hyperbolic(split: SpectralSplit, m: int) -> NHReport:
    """Check kernel dimension, semi-simplicity of 0 and the spectral conditions."""
    A0 = split.A0
    n = A0.shape[0]
    norm = max(float(np.linalg.norm(A0, 2)), np.finfo(float).tiny)
    r1 = _rank(A0, 1e-8 * norm)
    r2 = _rank(A0 @ A0, 1e-8 * norm**2)
    kernel_dim = n - r1
    kernel_ok = kernel_dim == m
    semisimple = r1 == r2
    eigs = tuple(split.sigma_c) + tuple(split.sigma_s) + tuple(split.sigma_u)

    reason = ""
    if not kernel_ok:
        reason = f"dim N(A0) = {kernel_dim} != m = {m}"
    elif not semisimple:
        reason = f"0 not semi-simple (rank(A0^2) = {r2} != rank(A0) = {r1})"
    elif split.dims[0] != m:
        reason = f"center cluster dimension {split.dims[0]} != m = {m}"
    if reason:
        classification = "Fails"
    elif split.dims[2] > 0:
        classification = "NormallyHyperbolic"
    else:
        classification = "NormallyStable"
    return NHReport(
        classification=classification,
        reason=reason,
        kernel_dim=kernel_dim,
        kernel_ok=kernel_ok,
        semisimple=semisimple,
        imaginary_axis_ok=True,
        dims=tuple(split.dims),
        eigenvalues=eigs,
        omega=split.omega,
    )


def classify_linearization(A0, m: int, eps_center: float | None = None) -> tuple[NHReport, SpectralSplit | None]:
    """Split and classify, turning spectral failures into a ``Fails`` report."""
    A0 = np.asarray(A0, dtype=float)
    try:
        split = split_spectrum(A0, None, eps_center)
    except ImaginaryAxisError as exc:
        report = NHReport("Fails", f"nonzero imaginary-axis spectrum: {exc}", -1, False,
                          False, False, (), tuple(complex(z) for z in np.linalg.eigvals(A0)))
        return report, None
    except ClusteringError as exc:
        report = NHReport("Fails", str(exc), -1, False, False, True, (),
                          tuple(complex(z) for z in np.linalg.eigvals(A0)))
        return report, None
    return check_normally_hyperbolic(split, m), split


def stable_semigroup(split: SpectralSplit, t: float, v) -> np.ndarray:
    """``exp(-A_s t) P_s v`` for ``t >= 0``."""
    if t < 0:
        raise ValueError("stable semigroup is only defined for t >= 0")
    c = split.coords("s", v)
    if c.size == 0:
        return np.zeros(split.n)
    return split.embed("s", sla.expm(-t * split.reduced["s"]) @ c)


def unstable_group(split: SpectralSplit, t: float, v) -> np.ndarray:
    """``exp(-A_u t) P_u v`` for ``t <= 0`` (backward use only)."""
    if t > 0:
        raise ValueError("unstable group is only applied backward in time (t <= 0)")
    c = split.coords("u", v)
    if c.size == 0:
        return np.zeros(split.n)
    return split.embed("u", sla.expm(-t * split.reduced["u"]) @ c)
