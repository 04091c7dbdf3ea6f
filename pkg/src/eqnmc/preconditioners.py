"""Ensemble preconditioners ``B_i`` built from the positions of other walkers.

A preconditioner for one group of walkers is represented as a *field*: an
object mapping positions ``q`` (any leading batch shape) to an operator
``B(q)``. Identity, global and blended fields are constant in ``q``; the local
field reweights the complement ensemble around ``q`` and so carries analytic
derivatives for the divergence and Jacobian terms of the EQN step.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .linalg import (
    LowRankSPD,
    LowRankSym,
    SqrtOperator,
    family_divergence,
    family_jacobian,
    family_jacobian_logdet,
)

__all__ = [
    "MODES",
    "WEIGHT_METRICS",
    "ConfigurationError",
    "RankError",
    "PreconditionerSpec",
    "WeightedCov",
    "weights",
    "weight_scaling",
    "weighted_cov",
    "FixedOperator",
    "LocalOperator",
    "IdentityField",
    "FixedField",
    "LocalField",
    "make_field",
    "complement_indices",
    "build_B",
    "d_BBt",
]

MODES = ("identity", "global", "blended", "local")
WEIGHT_METRICS = ("inverse_covariance", "covariance", "euclidean")


class ConfigurationError(ValueError):
    """Invalid sampler, ensemble or preconditioner configuration."""


class RankError(ConfigurationError):
    """The complement ensemble cannot support a full-rank covariance."""


@dataclass(frozen=True)
class PreconditionerSpec:
    """How each walker's ``B_i`` is built.

    ``weight_coords`` restricts the locality distance to a subset of
    coordinates (``None`` uses all of them).
    """

    mode: str = "identity"
    mu: float = 1.0
    lam: float = 0.0
    weight_metric: str = "inverse_covariance"
    weight_coords: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown preconditioner mode {self.mode!r}; expected one of {MODES}")
        if self.weight_metric not in WEIGHT_METRICS:
            raise ConfigurationError(
                f"unknown weight_metric {self.weight_metric!r}; expected one of {WEIGHT_METRICS}"
            )
        if not self.mu >= 0:
            raise ConfigurationError(f"mu must be nonnegative, got {self.mu}")
        if not self.lam >= 0:
            raise ConfigurationError(f"lambda must be nonnegative, got {self.lam}")
        if self.weight_coords is not None:
            object.__setattr__(self, "weight_coords", tuple(int(c) for c in self.weight_coords))


@dataclass
class WeightedCov:
    """Weighted population covariance ``sum_k (w_k/W)(q_k - mean)(q_k - mean)^T``."""

    samples: np.ndarray
    weights: np.ndarray
    mean: np.ndarray = dc_field(init=False)
    centered: np.ndarray = dc_field(init=False)
    coeffs: np.ndarray = dc_field(init=False)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if np.any(w < 0):
            raise ValueError("weights must be nonnegative")
        W = w.sum(axis=-1, keepdims=True)
        if np.any(W <= 0):
            raise ValueError("weights sum to zero")
        self.coeffs = w / W
        self.mean = np.sum(self.coeffs[..., :, None] * self.samples, axis=-2)
        # (..., N, K)
        self.centered = np.swapaxes(self.samples - self.mean[..., None, :], -1, -2)

    def dense(self) -> np.ndarray:
        D = self.centered
        return (D * self.coeffs[..., None, :]) @ np.swapaxes(D, -1, -2)


def weighted_cov(samples, w) -> WeightedCov:
    return WeightedCov(np.asarray(samples, dtype=float), np.asarray(w, dtype=float))


def weight_scaling(samples, metric: str = "inverse_covariance") -> np.ndarray:
    """Scaling matrix ``S`` of the locality distance, from the complement samples."""
    samples = np.asarray(samples, dtype=float)
    n = samples.shape[-1]
    if metric == "euclidean":
        return np.eye(n)
    C = np.cov(samples, rowvar=False, bias=True).reshape(n, n)
    if metric == "covariance":
        return C
    if metric == "inverse_covariance":
        return np.linalg.pinv(C, hermitian=True)
    raise ConfigurationError(f"unknown weight_metric {metric!r}")


def _log_weights(samples, q, lam, S):
    diff = samples - q[..., None, :]
    return -0.5 * lam * np.einsum("...ki,ij,...kj->...k", diff, S, diff), diff


def weights(samples, q, lam: float, scaling) -> np.ndarray:
    """``w_k = exp(-(lam/2)(Q_k - q)^T S (Q_k - q))`` for every sample ``Q_k``."""
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    logw, _ = _log_weights(np.asarray(samples, float), np.asarray(q, float), lam, np.asarray(scaling, float))
    return np.exp(logw)


class FixedOperator:
    """A ``q``-independent ``B``: a :class:`SqrtOperator` or a dense matrix."""

    constant = True

    def __init__(self, B):
        self.B = B
        self._dense = isinstance(B, np.ndarray)

    def apply(self, v):
        v = np.asarray(v, dtype=float)
        if self._dense:
            return v @ self.B.T
        return self.B.apply(v)

    def apply_transpose(self, v):
        v = np.asarray(v, dtype=float)
        if self._dense:
            return v @ self.B
        return self.B.apply(v)

    def divergence(self):
        return None

    def jacobian_logdet(self, v, scale):
        shape = np.shape(v)[:-1]
        return np.ones(shape), np.zeros(shape)

    def dense(self):
        return self.B if self._dense else self.B.dense()


class _IdentityOperator(FixedOperator):
    def __init__(self, dim):
        self.dim = dim
        self.B = None
        self._dense = False

    def apply(self, v):
        return np.array(v, dtype=float, copy=True)

    apply_transpose = apply

    def dense(self):
        return np.eye(self.dim)


class LocalOperator:
    """``B(q)`` for the locality-weighted covariance, with its ``q``-derivatives."""

    constant = False

    def __init__(self, sqrt: SqrtOperator, centered, sigma):
        self.sqrt = sqrt
        self.centered = centered
        # sigma[..., j, k] = d_j of the k-th coefficient of A
        self.sigma = sigma

    def apply(self, v):
        return self.sqrt.apply(v)

    apply_transpose = apply

    def divergence(self):
        return family_divergence(self.sqrt, self.centered, self.sigma)

    def jacobian(self, v):
        return family_jacobian(self.sqrt, self.centered, self.sigma, v)

    def jacobian_logdet(self, v, scale):
        return family_jacobian_logdet(self.sqrt, self.centered, self.sigma, v, scale)

    def dBBt(self, j: int) -> LowRankSym:
        s = self.sigma[..., j, :]
        K = s.shape[-1]
        middle = np.zeros(s.shape + (K,))
        idx = np.arange(K)
        middle[..., idx, idx] = s
        return LowRankSym(self.centered, middle)

    def dense(self):
        return self.sqrt.dense()


class IdentityField:
    constant = True

    def __init__(self, dim: int):
        self.dim = dim
        self._op = _IdentityOperator(dim)

    def evaluate(self, q):
        return self._op

    def apply(self, q, v):
        return self._op.apply(v)


class FixedField:
    constant = True

    def __init__(self, B):
        self._op = FixedOperator(B)

    def evaluate(self, q):
        return self._op

    def apply(self, q, v):
        return self._op.apply(v)


class LocalField:
    """``B(q) = sqrt(I + mu * wcov(Q, w(Q, q)))`` for a fixed complement ``Q``."""

    constant = False

    def __init__(self, samples, mu: float, lam: float, metric: str = "inverse_covariance", coords=None):
        self.samples = np.asarray(samples, dtype=float)
        self.mu = float(mu)
        self.lam = float(lam)
        n = self.samples.shape[-1]
        self.coords = np.arange(n) if coords is None else np.asarray(coords, dtype=int)
        self.scaling = weight_scaling(self.samples[:, self.coords], metric)

    def evaluate(self, q) -> LocalOperator:
        q = np.asarray(q, dtype=float)
        Qs = self.samples[:, self.coords]
        logw, diff = _log_weights(Qs, q[..., self.coords], self.lam, self.scaling)
        w = np.exp(logw - np.max(logw, axis=-1, keepdims=True))
        wc = WeightedCov(np.broadcast_to(self.samples, q.shape[:-1] + self.samples.shape), w)
        sqrt = SqrtOperator(LowRankSPD(wc.centered, self.mu * wc.coeffs))
        W = np.sum(w, axis=-1, keepdims=True)
        # g[..., k, j] = d_j w_k restricted to the weight coordinates
        g_sub = self.lam * w[..., None] * (diff @ self.scaling)
        g = np.zeros(q.shape[:-1] + (self.samples.shape[0], q.shape[-1]))
        g[..., self.coords] = g_sub
        dcoef = (g - wc.coeffs[..., None] * np.sum(g, axis=-2, keepdims=True)) / W[..., None]
        sigma = self.mu * np.swapaxes(dcoef, -1, -2)
        return LocalOperator(sqrt, wc.centered, sigma)

    def apply(self, q, v):
        return self.evaluate(q).apply(v)


def _blended_sqrt(samples, mu):
    wc = WeightedCov(samples, np.ones(samples.shape[0]))
    return SqrtOperator(LowRankSPD(wc.centered, mu * wc.coeffs))


def _global_factor(samples, label: str):
    K, n = samples.shape
    if K <= n:
        raise RankError(f"global preconditioner for {label} needs more than {n} complement walkers, got {K}")
    C = np.cov(samples, rowvar=False, bias=True).reshape(n, n)
    G = (samples[:n] - samples.mean(axis=0)).T
    try:
        np.linalg.cholesky(C)
        M = G.T @ np.linalg.solve(C, G)
        lam, V = np.linalg.eigh(0.5 * (M + M.T))
    except np.linalg.LinAlgError as exc:
        raise RankError(f"rank-deficient complement covariance for {label}") from exc
    if lam[0] <= 1e-12 * lam[-1]:
        raise RankError(f"rank-deficient complement covariance for {label}")
    # B = G (G^T C^-1 G)^{-1/2}, so B B^T = C and B transforms covariantly
    return G @ (V / np.sqrt(lam)) @ V.T


def make_field(spec: PreconditionerSpec, samples, label: str = "walker group"):
    """Build the preconditioner field of one group from its complement ``samples`` (``K x N``)."""
    samples = np.asarray(samples, dtype=float)
    if samples.ndim != 2:
        raise ValueError("samples must be a K x N array")
    K, n = samples.shape
    if spec.mode == "identity":
        return IdentityField(n)
    if K < 2:
        raise ConfigurationError(f"{label} has {K} complement walkers; at least 2 are needed")
    if spec.mode == "global":
        return FixedField(_global_factor(samples, label))
    if spec.mode == "blended" or spec.lam == 0.0:
        # zero locality gives constant weights, identical to blending
        return FixedField(_blended_sqrt(samples, spec.mu))
    return LocalField(samples, spec.mu, spec.lam, spec.weight_metric, spec.weight_coords)


def complement_indices(groups, i: int) -> np.ndarray:
    groups = np.asarray(groups)
    return np.flatnonzero(groups != groups[i])


def build_B(spec: PreconditionerSpec, Q, i: int, groups):
    """Operator ``B_i`` at ``q_i`` built from walkers outside walker ``i``'s group.

    The result exposes ``apply``, ``apply_transpose``, ``dense`` and a
    ``divergence`` method returning ``div(B_i^T)`` (``None`` when constant).
    """
    Q = np.asarray(Q, dtype=float)
    field = make_field(spec, Q[complement_indices(groups, i)], label=f"walker {i}")
    return field.evaluate(Q[i])


def d_BBt(spec: PreconditionerSpec, Q, i: int, groups, j: int) -> LowRankSym:
    """``d/dq_{i,j}`` of ``B_i B_i^T`` as a low-rank symmetric operator."""
    Q = np.asarray(Q, dtype=float)
    n = Q.shape[1]
    if spec.mode != "local" or spec.lam == 0.0:
        return LowRankSym(np.zeros((n, 0)), np.zeros((0, 0)))
    op = build_B(spec, Q, i, groups)
    return op.dBBt(j)
