"""Identity-plus-low-rank SPD algebra with cost linear in the dimension.

Matrices of the form ``A = I + U diag(c) U^T`` (``U`` is ``N x K``) are
never densified. The principal square root ``B = A^{1/2}`` is obtained from
a QR factorisation of ``U`` and an eigendecomposition of the ``K x K``
reduced matrix, giving ``B = I + E diag(s - 1) E^T`` with ``E`` orthonormal.
All classes accept leading batch dimensions, so one object can hold the
operators for a whole block of walkers.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "LowRankSPD",
    "SqrtOperator",
    "LowRankSym",
    "sqrt_apply",
    "sqrt_derivative",
    "phi",
    "cholesky_factor_derivative",
    "divergence",
    "family_divergence",
    "family_jacobian",
    "family_jacobian_logdet",
    "divergence_probe",
    "noisy_divergence",
]

EIG_REL_TOL = 1e-12


def _T(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


def _mv(M: np.ndarray, v: np.ndarray) -> np.ndarray:
    """``M @ v`` over leading dims, ``M`` of shape ``(..., n, k)`` and ``v`` of ``(..., k)``."""
    if M.ndim == 2:
        return v @ M.T
    return (M @ v[..., None])[..., 0]


def _vm(v: np.ndarray, M: np.ndarray) -> np.ndarray:
    """``M^T @ v`` over leading dims."""
    if M.ndim == 2:
        return v @ M
    return (v[..., None, :] @ M)[..., 0, :]


class LowRankSPD:
    """``A = I + U diag(c) U^T`` with ``c >= 0``.

    Args:
        factors: ``U`` with shape ``(..., N, K)``.
        coeffs: ``c`` with shape ``(..., K)``.
    """

    def __init__(self, factors, coeffs):
        U = np.asarray(factors, dtype=float)
        c = np.asarray(coeffs, dtype=float)
        if U.ndim < 2 or c.shape[-1:] != U.shape[-1:]:
            raise ValueError(f"factor shape {U.shape} incompatible with coefficient shape {c.shape}")
        if np.any(c < 0):
            raise ValueError("coefficients must be nonnegative")
        self.factors = U
        self.coeffs = c

    @classmethod
    def identity(cls, dim: int) -> "LowRankSPD":
        return cls(np.zeros((dim, 0)), np.zeros(0))

    @property
    def dim(self) -> int:
        return self.factors.shape[-2]

    @property
    def rank(self) -> int:
        return self.factors.shape[-1]

    def matvec(self, v):
        v = np.asarray(v, dtype=float)
        return v + _mv(self.factors, _vm(v, self.factors) * self.coeffs)

    def dense(self) -> np.ndarray:
        U, c = self.factors, self.coeffs
        return np.eye(self.dim) + (U * c[..., None, :]) @ _T(U)


class SqrtOperator:
    """Principal square root of a :class:`LowRankSPD`, ``B = I + E diag(s - 1) E^T``.

    Reduced eigenvalues below ``rel_tol`` times the largest are set to zero,
    so rank-deficient ensembles map to roots equal to 1 in those directions.
    """

    def __init__(self, A: LowRankSPD, rel_tol: float = EIG_REL_TOL):
        self.A = A
        U, c = A.factors, A.coeffs
        if A.rank == 0:
            self.basis = np.zeros(U.shape[:-1] + (0,))
            self.eigs = np.zeros(U.shape[:-2] + (0,))
        else:
            Qm, R = np.linalg.qr(U)
            G = (R * c[..., None, :]) @ _T(R)
            G = 0.5 * (G + _T(G))
            lam, Z = np.linalg.eigh(G)
            top = np.max(lam, axis=-1, keepdims=True)
            lam = np.where(lam > rel_tol * np.maximum(top, 0.0), lam, 0.0)
            self.basis = Qm @ Z
            self.eigs = lam
        self.roots = np.sqrt(1.0 + self.eigs)

    @property
    def dim(self) -> int:
        return self.basis.shape[-2]

    def apply(self, v):
        """``B v``."""
        v = np.asarray(v, dtype=float)
        if self.basis.shape[-1] == 0:
            return v.copy()
        return v + _mv(self.basis, _vm(v, self.basis) * (self.roots - 1.0))

    # B is symmetric
    apply_transpose = apply

    def apply_inv(self, v):
        """``B^{-1} v``."""
        v = np.asarray(v, dtype=float)
        if self.basis.shape[-1] == 0:
            return v.copy()
        return v + _mv(self.basis, _vm(v, self.basis) * (1.0 / self.roots - 1.0))

    def dense(self) -> np.ndarray:
        E = self.basis
        return np.eye(self.dim) + (E * (self.roots - 1.0)[..., None, :]) @ _T(E)

    def dense_inv(self) -> np.ndarray:
        E = self.basis
        return np.eye(self.dim) + (E * (1.0 / self.roots - 1.0)[..., None, :]) @ _T(E)


def sqrt_apply(op: SqrtOperator, v) -> np.ndarray:
    """Apply the square root ``A^{1/2}`` to ``v``."""
    v = np.asarray(v, dtype=float)
    if v.shape[-1] != op.dim:
        raise ValueError(f"vector of length {v.shape[-1]} for operator of dimension {op.dim}")
    return op.apply(v)


class LowRankSym:
    """Symmetric ``Y S Y^T`` with ``Y`` of shape ``(..., N, M)``."""

    def __init__(self, basis, middle):
        self.basis = np.asarray(basis, dtype=float)
        self.middle = np.asarray(middle, dtype=float)

    def matvec(self, v):
        v = np.asarray(v, dtype=float)
        return _mv(self.basis, _mv(self.middle, _vm(v, self.basis)))

    def dense(self) -> np.ndarray:
        return self.basis @ self.middle @ _T(self.basis)


def _pair_inverse(roots: np.ndarray) -> np.ndarray:
    return 1.0 / (roots[..., :, None] + roots[..., None, :])


def sqrt_derivative(op: SqrtOperator, X, S) -> LowRankSym:
    """Derivative of ``B = A^{1/2}`` along a perturbation ``dA = X S X^T``.

    Solves ``B dB + dB B = dA`` in the eigenbasis of ``B``: the part of ``X``
    inside the span of ``op.basis`` is divided by pairwise root sums, the
    orthogonal remainder sees the unit eigenvalue of the complement.
    """
    X = np.asarray(X, dtype=float)
    S = np.asarray(S, dtype=float)
    E, s = op.basis, op.roots
    XE = _T(E) @ X
    Xp = X - E @ XE
    inv = _pair_inverse(s)
    top = (XE @ S @ _T(XE)) * inv
    cross = (XE @ S) / (1.0 + s)[..., :, None]
    middle = np.concatenate(
        [
            np.concatenate([top, cross], axis=-1),
            np.concatenate([_T(cross), 0.5 * S], axis=-1),
        ],
        axis=-2,
    )
    basis = np.concatenate([np.broadcast_to(E, Xp.shape[:-1] + E.shape[-1:]), Xp], axis=-1)
    return LowRankSym(basis, middle)


def phi(M) -> np.ndarray:
    """Strictly lower triangle plus half the diagonal."""
    M = np.asarray(M, dtype=float)
    return np.tril(M, -1) + 0.5 * np.diag(np.diag(M))


def cholesky_factor_derivative(L, dA) -> np.ndarray:
    """Derivative ``L Phi(L^{-1} dA L^{-T})`` of the lower Cholesky factor ``L`` of ``A``.

    This is exact for triangular factors; for the symmetric root use
    :func:`sqrt_derivative` instead.
    """
    L = np.asarray(L, dtype=float)
    W = np.linalg.solve(L, np.asarray(dA, dtype=float))
    W = np.linalg.solve(L, W.T).T
    return L @ phi(W)


def divergence(op: SqrtOperator, directions, dim: int | None = None) -> np.ndarray:
    """``sum_j d_j B e_j`` for ``d_j A = X_j S_j X_j^T`` given by ``directions(j)``.

    This equals ``div(B^T)`` for a symmetric position-dependent root. It loops
    over coordinates and is meant for small or irregular families; see
    :func:`family_divergence` for the vectorised diagonal-weight family.
    """
    n = op.dim if dim is None else dim
    out = np.zeros(op.basis.shape[:-1])
    for j in range(n):
        X, S = directions(j)
        e = np.zeros(n)
        e[j] = 1.0
        out += sqrt_derivative(op, X, S).matvec(np.broadcast_to(e, out.shape))
    return out


def family_divergence(op: SqrtOperator, D, sigma) -> np.ndarray:
    """Divergence for the family ``d_j A = D diag(sigma[j]) D^T``.

    ``D`` (``(..., N, K)``) must lie in the span of ``op.basis``, which holds
    whenever ``op`` was built from ``A = I + D diag(c) D^T``.
    """
    E, s = op.basis, op.roots
    T = _T(E) @ D
    Y = _T(sigma) @ E
    P = T @ (_T(T) * Y)
    t = np.sum(P * _pair_inverse(s), axis=-1)
    return _mv(E, t)


def _family_reduced_jacobian(op: SqrtOperator, D, sigma, v):
    E, s = op.basis, op.roots
    T = _T(E) @ D
    a = _vm(v, E)
    H = (_pair_inverse(s) * a[..., None, :]) @ T
    return (T * H) @ _T(sigma)


def family_jacobian(op: SqrtOperator, D, sigma, v) -> np.ndarray:
    """Dense Jacobian of ``q -> B(q) v`` at fixed ``v``: column ``j`` is ``d_j B v``."""
    return op.basis @ _family_reduced_jacobian(op, D, sigma, v)


def family_jacobian_logdet(op: SqrtOperator, D, sigma, v, scale: float):
    """Sign and ``log|det(I + scale * J)|`` for ``J`` from :func:`family_jacobian`.

    Uses the determinant lemma in the ``r``-dimensional reduced space.
    """
    Yv = _family_reduced_jacobian(op, D, sigma, v)
    r = Yv.shape[-2]
    M = np.eye(r) + scale * (Yv @ op.basis)
    return np.linalg.slogdet(M)


def divergence_probe(apply_field, q, eps: float, R) -> np.ndarray:
    """``[M(q + eps R) - M(q)] R / eps`` for each row of ``R``.

    ``apply_field(x, v)`` must return ``M(x) v`` for arrays of matching
    leading shape. ``q`` has shape ``(..., N)`` and ``R`` ``(..., n, N)``.
    """
    q = np.asarray(q, dtype=float)
    R = np.asarray(R, dtype=float)
    base = np.broadcast_to(q[..., None, :], R.shape)
    return (apply_field(base + eps * R, R) - apply_field(base, R)) / eps


def noisy_divergence(apply_field, q, eps: float, samples: int, rng) -> np.ndarray:
    """Randomised estimate of ``div(M)`` averaging :func:`divergence_probe` over Gaussian ``R``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    q = np.asarray(q, dtype=float)
    R = rng.standard_normal(q.shape[:-1] + (int(samples), q.shape[-1]))
    return divergence_probe(apply_field, q, eps, R).mean(axis=-2)
