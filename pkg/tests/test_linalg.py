import numpy as np
import pytest
import scipy.linalg as sl
from hypothesis import given, settings, strategies as st

from eqnmc.linalg import (
    LowRankSPD,
    SqrtOperator,
    cholesky_factor_derivative,
    divergence,
    divergence_probe,
    family_divergence,
    family_jacobian,
    family_jacobian_logdet,
    noisy_divergence,
    phi,
    sqrt_apply,
    sqrt_derivative,
)


def random_lowrank(rng, n, k, batch=()):
    U = rng.standard_normal(batch + (n, k))
    c = rng.random(batch + (k,)) * 2.0
    return LowRankSPD(U, c)


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 7), k=st.integers(0, 9), seed=st.integers(0, 2**31))
def test_sqrt_squares_to_matrix(n, k, seed):
    rng = np.random.default_rng(seed)
    A = random_lowrank(rng, n, k)
    B = SqrtOperator(A)
    Bd = B.dense()
    assert np.allclose(Bd @ Bd, A.dense(), atol=1e-10 * max(1.0, np.abs(A.dense()).max()))
    assert np.allclose(Bd, Bd.T, atol=1e-12)
    assert np.all(np.linalg.eigvalsh(Bd) >= 1 - 1e-12)


def test_sqrt_matches_scipy_principal_root():
    rng = np.random.default_rng(0)
    A = random_lowrank(rng, 6, 4)
    assert np.allclose(SqrtOperator(A).dense(), sl.sqrtm(A.dense()).real, atol=1e-12)


def test_sqrt_apply_and_inverse():
    rng = np.random.default_rng(1)
    A = random_lowrank(rng, 5, 3)
    B = SqrtOperator(A)
    v = rng.standard_normal(5)
    assert np.allclose(sqrt_apply(B, v), B.dense() @ v)
    assert np.allclose(B.apply_inv(B.apply(v)), v)
    with pytest.raises(ValueError):
        sqrt_apply(B, np.ones(4))


def test_diagonal_example():
    # I + 3 e1 e1^T has root diag(2, 1)
    A = LowRankSPD(np.array([[1.0], [0.0]]), np.array([3.0]))
    assert np.allclose(SqrtOperator(A).dense(), np.diag([2.0, 1.0]))


def test_identity_and_rank_deficient():
    B = SqrtOperator(LowRankSPD.identity(3))
    v = np.arange(3.0)
    assert np.array_equal(B.apply(v), v)
    # repeated columns: rank 1 factor given as rank 3
    u = np.array([[1.0], [2.0], [0.0]])
    A = LowRankSPD(np.hstack([u, u, u]), np.ones(3))
    assert np.allclose(SqrtOperator(A).dense(), sl.sqrtm(A.dense()).real, atol=1e-12)


def test_batched_sqrt_matches_loop():
    rng = np.random.default_rng(2)
    A = random_lowrank(rng, 4, 3, batch=(5,))
    B = SqrtOperator(A)
    v = rng.standard_normal((5, 4))
    for i in range(5):
        Bi = SqrtOperator(LowRankSPD(A.factors[i], A.coeffs[i]))
        assert np.allclose(B.apply(v)[i], Bi.apply(v[i]), atol=1e-14)


def test_negative_coefficients_rejected():
    with pytest.raises(ValueError):
        LowRankSPD(np.ones((2, 1)), np.array([-1.0]))


def _fd_sqrt_derivative(A, X, S, eps=1e-6):
    dA = X @ S @ X.T
    return (sl.sqrtm(A + eps * dA).real - sl.sqrtm(A - eps * dA).real) / (2 * eps)


@pytest.mark.parametrize("seed", range(8))
def test_sqrt_derivative_against_central_differences(seed):
    rng = np.random.default_rng(seed)
    n, k, m = 5, 3, 2
    A = random_lowrank(rng, n, k)
    X = rng.standard_normal((n, m))
    S = rng.standard_normal((m, m))
    S = S + S.T
    dB = sqrt_derivative(SqrtOperator(A), X, S).dense()
    ref = _fd_sqrt_derivative(A.dense(), X, S)
    assert np.linalg.norm(dB - ref) / np.linalg.norm(ref) < 1e-6


def test_sqrt_derivative_solves_sylvester_equation():
    rng = np.random.default_rng(11)
    A = random_lowrank(rng, 4, 2)
    B = SqrtOperator(A)
    X = rng.standard_normal((4, 3))
    S = np.diag(rng.standard_normal(3))
    dB = sqrt_derivative(B, X, S).dense()
    Bd = B.dense()
    assert np.allclose(Bd @ dB + dB @ Bd, X @ S @ X.T, atol=1e-12)


def test_phi_and_cholesky_derivative():
    M = np.arange(9.0).reshape(3, 3)
    assert np.array_equal(phi(M), np.array([[0.0, 0, 0], [3, 2, 0], [6, 7, 4]]))
    rng = np.random.default_rng(3)
    A = random_lowrank(rng, 4, 4).dense()
    X = rng.standard_normal((4, 4))
    dA = X + X.T
    eps = 1e-6
    fd = (np.linalg.cholesky(A + eps * dA) - np.linalg.cholesky(A - eps * dA)) / (2 * eps)
    got = cholesky_factor_derivative(np.linalg.cholesky(A), dA)
    assert np.linalg.norm(got - fd) / np.linalg.norm(fd) < 1e-6


def _family(rng, n, K):
    """A(q) = I + D diag(c + q-linear) D^T with D fixed; d_j A = D diag(sigma_j) D^T."""
    D = rng.standard_normal((n, K))
    c = 1.0 + rng.random(K)
    sigma = 0.3 * rng.standard_normal((n, K))
    return D, c, sigma


@pytest.mark.parametrize("seed", range(5))
def test_family_divergence_and_jacobian(seed):
    rng = np.random.default_rng(seed)
    n, K = 3, 5
    D, c, sigma = _family(rng, n, K)
    q0 = rng.standard_normal(n) * 0.1

    def B(q):
        return SqrtOperator(LowRankSPD(D, c + q @ sigma)).dense()

    op = SqrtOperator(LowRankSPD(D, c + q0 @ sigma))
    eps = 1e-6
    dBs = [(B(q0 + eps * e) - B(q0 - eps * e)) / (2 * eps) for e in np.eye(n)]
    div_ref = sum(dBs[j][:, j] for j in range(n))
    div = family_divergence(op, D, sigma)
    assert np.allclose(div, div_ref, rtol=1e-6, atol=1e-9)
    generic = divergence(op, lambda j: (D, np.diag(sigma[j])))
    assert np.allclose(generic, div, atol=1e-12)
    v = rng.standard_normal(n)
    J_ref = np.stack([dBs[j] @ v for j in range(n)], axis=1)
    J = family_jacobian(op, D, sigma, v)
    assert np.allclose(J, J_ref, rtol=1e-6, atol=1e-9)
    sign, ld = family_jacobian_logdet(op, D, sigma, v, 0.4)
    s_ref, ld_ref = np.linalg.slogdet(np.eye(n) + 0.4 * J)
    assert sign == s_ref and abs(ld - ld_ref) < 1e-12


def test_divergence_probe_is_exact_for_linear_fields():
    # M(x) v linear in x: the probe is unbiased for every eps
    rng = np.random.default_rng(4)
    n = 3
    T = rng.standard_normal((n, n, n))

    def field(x, v):
        return np.einsum("ijk,...k,...j->...i", T, x, v)

    exact = np.einsum("ijj->i", T)
    est = noisy_divergence(field, np.zeros(n), 0.5, 200000, rng)
    assert np.allclose(est, exact, atol=0.05)
    R = rng.standard_normal((4, n))
    assert divergence_probe(field, np.ones(n), 1.0, R).shape == (4, n)
    with pytest.raises(ValueError):
        noisy_divergence(field, np.zeros(n), 0.0, 1, rng)
