import numpy as np
import pytest
import scipy.linalg as sla
from hypothesis import given, settings
from hypothesis import strategies as st

from foliation.model import get_problem
from foliation.spectral import (
    ClusteringError,
    ImaginaryAxisError,
    ManifoldDimensionError,
    NonEquilibriumError,
    check_normally_hyperbolic,
    classify_linearization,
    linearize,
    split_spectrum,
    stable_semigroup,
    unstable_group,
)
from oracles import contour_projection


def projection_algebra_error(sp):
    Ps = [sp.P_c, sp.P_s, sp.P_u]
    errs = [np.max(np.abs(sum(Ps) - np.eye(sp.n)))]
    for i, P in enumerate(Ps):
        errs.append(np.max(np.abs(P @ P - P)))
        errs.append(np.max(np.abs(sp.A0 @ P - P @ sp.A0)))
        for j, Q in enumerate(Ps):
            if i != j:
                errs.append(np.max(np.abs(P @ Q)))
    return max(errs)


def test_linearize_examples():
    assert np.array_equal(linearize(get_problem("line-stable").model, [0, 0]), [[0, 0], [0, 1]])
    assert np.array_equal(linearize(get_problem("parabola-stable").model, [0, 0]), [[0, 0], [0, 1]])
    A0 = linearize(get_problem("line-hyperbolic").model, [0.2, 0, 0])
    assert np.allclose(A0, np.diag([0, 0.8, -0.8]), atol=1e-15)
    with pytest.raises(NonEquilibriumError):
        linearize(get_problem("line-stable").model, [0.0, 0.1])


def test_diagonal_split():
    sp = split_spectrum(np.diag([0.0, 1.0, -1.0]), 1, 1e-8)
    assert np.allclose(sp.P_c, np.diag([1, 0, 0])) and np.allclose(sp.P_s, np.diag([0, 1, 0]))
    assert np.allclose(sp.P_u, np.diag([0, 0, 1]))
    assert sp.omega == pytest.approx(0.9) and sp.dims == (1, 1, 1)
    sp2 = split_spectrum(np.diag([0.0, 1.0]), 1)
    assert sp2.dims == (1, 1, 0) and sp2.omega == pytest.approx(0.9) and len(sp2.sigma_u) == 0


def test_nonnormal_split_against_contour_integral():
    A0 = np.array([[0.0, 1.0], [0.0, 1.0]])
    sp = split_spectrum(A0, 1)
    assert np.allclose(sp.P_c, [[1, -1], [0, 0]], atol=1e-14)
    assert np.allclose(sp.P_s, [[0, 1], [0, 1]], atol=1e-14)
    assert np.allclose(sp.P_c, contour_projection(A0, 0.0, 0.5), atol=1e-10)
    assert np.allclose(sp.P_s, contour_projection(A0, 1.0, 0.5), atol=1e-10)
    assert np.allclose(sp.A_s_full, A0 @ sp.P_s)


def test_split_errors():
    with pytest.raises(ManifoldDimensionError):
        split_spectrum(np.diag([0.0, 1.0, -1.0]), 2)
    with pytest.raises(ImaginaryAxisError):
        split_spectrum(np.array([[0, 0, 0], [0, 0, 1.0], [0, -1.0, 0]]), 1)
    with pytest.raises(ClusteringError):
        split_spectrum(np.diag([0.0, 1.5e-8, 1.0]), 1, 1e-8)


def test_classification_gate():
    for name, expected in [("line-stable", "NormallyStable"), ("line-hyperbolic", "NormallyHyperbolic"),
                           ("parabola-stable", "NormallyStable"), ("linear-diag", "NormallyHyperbolic")]:
        e = get_problem(name)
        A0 = linearize(e.model, e.u_star)
        assert check_normally_hyperbolic(split_spectrum(A0), e.model.m).classification == expected
    nil = get_problem("nilpotent-demo")
    rep = check_normally_hyperbolic(split_spectrum(linearize(nil.model, nil.u_star)), 1)
    assert rep.classification == "Fails" and "not semi-simple" in rep.reason
    rep2 = check_normally_hyperbolic(split_spectrum(np.diag([0.0, 0.0, 1.0])), 1)
    assert rep2.classification == "Fails" and "dim N(A0) = 2" in rep2.reason
    rep3, sp = classify_linearization(np.array([[0, 0, 0], [0, 0, 1.0], [0, -1.0, 0]]), 1)
    assert rep3.classification == "Fails" and sp is None and "imaginary" in rep3.reason


def test_semigroups():
    sp = split_spectrum(np.diag([0.0, 1.0, -1.0]), 1, 1e-8)
    v = np.ones(3)
    assert np.allclose(stable_semigroup(sp, 1.0, v), [0, np.exp(-1), 0], atol=1e-15)
    assert np.allclose(stable_semigroup(sp, 0.0, v), sp.P_s @ v)
    assert np.allclose(unstable_group(sp, -1.0, v), [0, 0, np.exp(-1)], atol=1e-15)
    assert np.allclose(unstable_group(sp, 0.0, v), sp.P_u @ v)
    with pytest.raises(ValueError):
        stable_semigroup(sp, -1.0, v)
    with pytest.raises(ValueError):
        unstable_group(sp, 1.0, v)
    nn = split_spectrum(np.array([[0.0, 1.0], [0.0, 1.0]]), 1)
    w = stable_semigroup(nn, 2.0, np.ones(2))
    assert np.allclose(w, [np.exp(-2), np.exp(-2)], atol=1e-15)
    assert np.allclose(w, sla.expm(-2 * nn.A0) @ nn.P_s @ np.ones(2), atol=1e-14)
    hyp = get_problem("line-hyperbolic")
    sph = split_spectrum(linearize(hyp.model, [0.2, 0, 0]), 1)
    assert np.allclose(unstable_group(sph, -2.0, [0, 0, 1.0]), [0, 0, 0.20189651799465538], atol=1e-14)


def planted(rng, n, m, n_s, complex_pairs):
    """Random real matrix with spectrum {0 (m times)} + stable + unstable, conjugated by a random basis."""
    blocks = [np.zeros((m, m))]
    n_u = n - m - n_s
    for count, sign in ((n_s, 1.0), (n_u, -1.0)):
        k = count
        while k > 0:
            if complex_pairs and k >= 2:
                a, b = sign * rng.uniform(0.3, 3.0), rng.uniform(0.1, 2.0)
                blocks.append(np.array([[a, b], [-b, a]]))
                k -= 2
            else:
                blocks.append(np.array([[sign * rng.uniform(0.3, 3.0)]]))
                k -= 1
    D = sla.block_diag(*blocks)
    S = rng.standard_normal((n, n)) + 2 * np.eye(n)
    while np.linalg.cond(S) > 50:
        S = rng.standard_normal((n, n)) + 2 * np.eye(n)
    return S @ D @ np.linalg.inv(S), (m, n_s, n_u)


def test_projection_algebra_planted_batch():
    rng = np.random.default_rng(7)
    for k in range(50):
        n = int(rng.integers(3, 9))
        m = int(rng.integers(1, n - 1))
        n_s = int(rng.integers(1, n - m + 1))
        A0, dims = planted(rng, n, m, n_s, complex_pairs=bool(k % 2))
        sp = split_spectrum(A0, m)
        assert sp.dims == dims
        assert projection_algebra_error(sp) <= 1e-10
        assert all(z.real >= sp.omega for z in sp.sigma_s)
        assert all(z.real <= -sp.omega for z in sp.sigma_u)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_projection_algebra_property(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 7))
    m = int(rng.integers(1, n))
    n_s = int(rng.integers(0, n - m + 1))
    A0, dims = planted(rng, n, m, n_s, complex_pairs=True)
    sp = split_spectrum(A0, m)
    assert sp.dims == dims
    assert projection_algebra_error(sp) <= 1e-10
    for part in "csu":
        V = sp.basis(part)
        assert np.allclose(V.T @ V, np.eye(V.shape[1]), atol=1e-12)
        assert np.allclose(sp.projection(part) @ V, V, atol=1e-10)
