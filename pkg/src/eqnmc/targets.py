"""Target densities with analytic gradients.

Every target maps points of shape ``(..., dim)`` to log-densities of shape
``(...)`` and gradients of shape ``(..., dim)``, so a whole block of walkers
can be evaluated in one call. Targets are immutable after construction.
"""

from __future__ import annotations

import math
from abc import ABC, abstractmethod
from collections import OrderedDict
from dataclasses import dataclass
from itertools import permutations
from pathlib import Path
from threading import Lock

import numpy as np
from scipy import linalg as sla
from scipy.special import gammaln, logsumexp, softmax

__all__ = [
    "OutOfSupportError",
    "TargetDensity",
    "GaussianTarget",
    "RingTarget",
    "MixtureModelTarget",
    "MixtureParams",
    "LogGaussianCoxTarget",
    "AffineTransformedTarget",
    "ConditionalTarget",
    "mixture_generate_synthetic",
    "cox_generate_synthetic",
    "cox_covariance",
    "save_mixture_data",
    "load_mixture_data",
    "save_cox_data",
    "load_cox_data",
]


class OutOfSupportError(ValueError):
    """Raised when a gradient is requested outside the support of a target."""


class TargetDensity(ABC):
    """Unnormalised log-density on ``R^dim`` with its gradient."""

    name: str = "target"

    def __init__(self, dim: int):
        if int(dim) < 1:
            raise ValueError(f"dimension must be positive, got {dim}")
        self.dim = int(dim)

    def _check(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim == 0 or x.shape[-1] != self.dim:
            raise ValueError(
                f"{self.name}: expected points with trailing dimension {self.dim}, "
                f"got shape {x.shape}"
            )
        return x

    def log_density(self, x) -> np.ndarray | float:
        """Log-density up to a fixed additive constant; ``-inf`` off support."""
        x = self._check(x)
        out = np.asarray(self._log_density(x), dtype=float)
        bad = ~np.all(np.isfinite(x), axis=-1)
        if np.any(bad) or np.any(np.isnan(out)):
            out = np.where(bad | np.isnan(out), -np.inf, out)
        return out[()] if out.ndim == 0 else out

    def gradient(self, x) -> np.ndarray:
        """Gradient of the log-density; raises :class:`OutOfSupportError` off support."""
        x = self._check(x)
        if not np.all(np.isfinite(x)):
            raise OutOfSupportError(f"{self.name}: non-finite point")
        g = self._gradient(x)
        if not np.all(np.isfinite(g)):
            raise OutOfSupportError(f"{self.name}: gradient is not finite at the given point")
        return g

    def block_gradient(self, x, coords: np.ndarray) -> np.ndarray:
        """Gradient restricted to ``coords``; targets may override with a cheaper path."""
        return self.gradient(x)[..., coords]

    @abstractmethod
    def _log_density(self, x: np.ndarray) -> np.ndarray: ...

    @abstractmethod
    def _gradient(self, x: np.ndarray) -> np.ndarray: ...

    def describe(self) -> dict:
        """Plain-data description used for lineage hashing."""
        return {"name": self.name, "dim": self.dim}


class GaussianTarget(TargetDensity):
    """Centred Gaussian ``exp(-x^T M^{-1} x / 2)`` with mode value 0.

    Args:
        covariance: Either a full SPD matrix or a 1-d array holding its diagonal.
    """

    name = "gaussian"

    def __init__(self, covariance):
        cov = np.asarray(covariance, dtype=float)
        if cov.ndim == 1:
            if np.any(cov <= 0):
                raise ValueError("diagonal covariance entries must be positive")
            super().__init__(cov.size)
            self.diagonal = True
            self.covariance = np.diag(cov)
            self._prec_diag = 1.0 / cov
            prec_eigs = self._prec_diag
        elif cov.ndim == 2 and cov.shape[0] == cov.shape[1]:
            if not np.allclose(cov, cov.T, rtol=0, atol=1e-12 * np.abs(cov).max()):
                raise ValueError("covariance must be symmetric")
            super().__init__(cov.shape[0])
            self.diagonal = False
            self.covariance = cov.copy()
            self._precision = np.linalg.inv(cov)
            self._precision = 0.5 * (self._precision + self._precision.T)
            prec_eigs = np.linalg.eigvalsh(self._precision)
            if prec_eigs.min() <= 0:
                raise ValueError("covariance must be positive definite")
        else:
            raise ValueError(f"covariance must be 1-d or square, got shape {cov.shape}")
        self.precision_eigs = np.sort(prec_eigs)
        self.lambda_min = float(self.precision_eigs[0])
        self.lambda_max = float(self.precision_eigs[-1])

    @property
    def condition_number(self) -> float:
        return self.lambda_max / self.lambda_min

    @property
    def precision(self) -> np.ndarray:
        return np.diag(self._prec_diag) if self.diagonal else self._precision

    def _log_density(self, x):
        if self.diagonal:
            return -0.5 * np.sum(x * x * self._prec_diag, axis=-1)
        return -0.5 * np.einsum("...i,ij,...j->...", x, self._precision, x)

    def _gradient(self, x):
        if self.diagonal:
            return -x * self._prec_diag
        return -x @ self._precision

    def describe(self):
        return {"name": self.name, "covariance": self.covariance.tolist()}


class RingTarget(TargetDensity):
    """Ring-shaped density ``exp(-(|x| - r0)^2 / (2 s^2))``, maximal (value 0) on the circle.

    At the origin the gradient is taken to be zero; every direction is
    equivalent there by symmetry.
    """

    name = "ring"

    def __init__(self, radius: float = 1.0, width: float = 0.1, dim: int = 2):
        if radius <= 0 or width <= 0:
            raise ValueError("radius and width must be positive")
        super().__init__(dim)
        self.radius = float(radius)
        self.width = float(width)

    def _log_density(self, x):
        r = np.linalg.norm(x, axis=-1)
        return -0.5 * ((r - self.radius) / self.width) ** 2

    def _gradient(self, x):
        r = np.linalg.norm(x, axis=-1, keepdims=True)
        safe = np.where(r > 0, r, 1.0)
        return np.where(r > 0, -(r - self.radius) / self.width**2 * x / safe, 0.0)

    def describe(self):
        return {"name": self.name, "radius": self.radius, "width": self.width, "dim": self.dim}


class AffineTransformedTarget(TargetDensity):
    """The density ``x -> pi(A x + v)`` for an invertible ``A``."""

    name = "affine"

    def __init__(self, base: TargetDensity, A, v):
        A = np.asarray(A, dtype=float)
        v = np.asarray(v, dtype=float)
        if A.shape != (base.dim, base.dim) or v.shape != (base.dim,):
            raise ValueError("A must be dim x dim and v of length dim")
        super().__init__(base.dim)
        self.base, self.A, self.v = base, A, v
        self.name = f"affine({base.name})"

    def forward(self, x):
        return x @ self.A.T + self.v

    def _log_density(self, x):
        return self.base.log_density(self.forward(x))

    def _gradient(self, x):
        return self.base.gradient(self.forward(x)) @ self.A


class ConditionalTarget(TargetDensity):
    """Conditional of ``target`` on ``coords`` with the remaining coordinates held at ``context``.

    ``context`` has shape ``(..., target.dim)`` and broadcasts against the
    block points; only its entries outside ``coords`` are read.
    """

    def __init__(self, target: TargetDensity, coords, context):
        coords = np.asarray(coords, dtype=int)
        super().__init__(coords.size)
        self.target = target
        self.coords = coords
        self.context = np.asarray(context, dtype=float)
        self.name = f"{target.name}[{coords.size}]"

    def row(self, i: int) -> "ConditionalTarget":
        """The conditional for batch row ``i`` of a batched context."""
        ctx = self.context if self.context.ndim == 1 else self.context[i]
        return ConditionalTarget(self.target, self.coords, ctx)

    def assemble(self, xb):
        full = np.array(np.broadcast_to(self.context, xb.shape[:-1] + (self.target.dim,)))
        full[..., self.coords] = xb
        return full

    def _log_density(self, x):
        return self.target.log_density(self.assemble(x))

    def _gradient(self, x):
        return self.target.block_gradient(self.assemble(x), self.coords)


# ---------------------------------------------------------------------------
# Gaussian mixture posterior


def _lse(x, axis=-1, keepdims=False):
    """Log-sum-exp along ``axis`` for finite inputs (lean version for hot loops)."""
    m = np.max(x, axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True))
    return out if keepdims else np.squeeze(out, axis=axis)


@dataclass(frozen=True)
class MixtureParams:
    """Constrained parameters of the three-component mixture posterior."""

    means: tuple[float, float, float]
    precisions: tuple[float, float, float]
    weights: tuple[float, float, float]
    beta: float = 1.0

    def validate(self):
        if len(self.means) != 3 or len(self.precisions) != 3 or len(self.weights) != 3:
            raise ValueError("mixture parameters must have three components")
        if any(p <= 0 or not math.isfinite(p) for p in self.precisions):
            raise ValueError(f"precisions must be positive, got {self.precisions}")
        w = np.asarray(self.weights, dtype=float)
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-10:
            raise ValueError(f"weights must lie on the simplex, got {self.weights}")
        if self.beta <= 0:
            raise ValueError("beta must be positive")


# stamps-like scale: thickness data around 0.06-0.13 with overlapping components
DEFAULT_MIXTURE_TRUTH = MixtureParams(
    means=(0.072, 0.080, 0.100),
    precisions=(1.0 / 0.003**2, 1.0 / 0.004**2, 1.0 / 0.010**2),
    weights=(0.40, 0.35, 0.25),
)


class MixtureModelTarget(TargetDensity):
    """Posterior of a univariate three-component Gaussian mixture.

    Coordinates (9 in total) are unconstrained::

        [mu_1, mu_2, mu_3, log lam_1, log lam_2, log lam_3, a_1, a_2, log beta]

    with weights ``z = softmax(a_1, a_2, 0)``. The log-density is the fully
    normalised log prior plus log likelihood plus the log-Jacobian of the
    transform. Priors: ``mu_k ~ N(m, 1/kappa)``, ``lam_k ~ Gamma(alpha, rate=beta)``,
    ``z ~ Dirichlet(1, 1, 1)``, ``beta ~ Gamma(g, rate=h)`` with
    ``m = mean(y)``, ``r = range(y)``, ``kappa = 4 / r^2``, ``alpha = 2``,
    ``g = 0.2`` and ``h = 100 g / (alpha r^2)``.
    """

    name = "mixture"
    labels = ("mu1", "mu2", "mu3", "loglam1", "loglam2", "loglam3", "a1", "a2", "logbeta")

    def __init__(self, data, alpha: float = 2.0, g: float = 0.2):
        y = np.asarray(data, dtype=float).ravel()
        if y.size < 2:
            raise ValueError("mixture target needs at least two data points")
        super().__init__(9)
        self.data = y
        self.m = float(y.mean())
        self.r = float(y.max() - y.min())
        if self.r <= 0:
            raise ValueError("data range must be positive")
        self.kappa = 4.0 / self.r**2
        self.alpha = float(alpha)
        self.g = float(g)
        self.h = 100.0 * self.g / (self.alpha * self.r**2)
        n = y.size
        self._const = (
            3 * (0.5 * math.log(self.kappa) - 0.5 * math.log(2 * math.pi))
            - 3 * gammaln(self.alpha)
            + gammaln(3.0)
            + self.g * math.log(self.h)
            - gammaln(self.g)
            - 0.5 * n * math.log(2 * math.pi)
        )

    @staticmethod
    def unpack(theta):
        theta = np.asarray(theta, dtype=float)
        mu = theta[..., 0:3]
        loglam = theta[..., 3:6]
        a = np.concatenate([theta[..., 6:8], np.zeros(theta.shape[:-1] + (1,))], axis=-1)
        logbeta = theta[..., 8]
        return mu, loglam, a, logbeta

    @staticmethod
    def to_unconstrained(params: MixtureParams) -> np.ndarray:
        params.validate()
        z = np.asarray(params.weights, dtype=float)
        with np.errstate(divide="ignore"):
            a = np.log(z[:2]) - np.log(z[2])
        return np.concatenate(
            [params.means, np.log(params.precisions), a, [math.log(params.beta)]]
        )

    @classmethod
    def to_constrained(cls, theta) -> MixtureParams:
        mu, loglam, a, logbeta = cls.unpack(theta)
        z = softmax(a)
        return MixtureParams(
            tuple(float(v) for v in mu),
            tuple(float(v) for v in np.exp(loglam)),
            tuple(float(v) for v in z),
            float(np.exp(logbeta)),
        )

    @classmethod
    def permute_components(cls, theta, perm) -> np.ndarray:
        """Relabel components of an unconstrained point by ``perm``."""
        perm = list(perm)
        mu, loglam, a, logbeta = cls.unpack(theta)
        logz = a - logsumexp(a, axis=-1, keepdims=True)
        logz = logz[..., perm]
        return np.concatenate(
            [
                mu[..., perm],
                loglam[..., perm],
                logz[..., :2] - logz[..., 2:3],
                logbeta[..., None],
            ],
            axis=-1,
        )

    def _pieces(self, theta):
        mu, loglam, a, logbeta = self.unpack(theta)
        lam = np.exp(loglam)
        beta = np.exp(logbeta)
        logz = a - _lse(a, keepdims=True)
        diff = self.data[:, None] - mu[..., None, :]
        # per-datum, per-component log of z_k N(y | mu_k, 1/lam_k) without the 2pi term
        comp = logz[..., None, :] + 0.5 * loglam[..., None, :] - 0.5 * lam[..., None, :] * diff**2
        return mu, loglam, lam, logz, logbeta, beta, diff, comp

    def _log_density(self, theta):
        with np.errstate(over="ignore", invalid="ignore"):
            mu, loglam, lam, logz, logbeta, beta, diff, comp = self._pieces(theta)
            loglik = np.sum(_lse(comp), axis=-1)
            lp_mu = -0.5 * self.kappa * np.sum((mu - self.m) ** 2, axis=-1)
            # Gamma(alpha, rate beta) on lam, with the log-Jacobian log lam
            lp_lam = np.sum(
                self.alpha * logbeta[..., None] + self.alpha * loglam - beta[..., None] * lam,
                axis=-1,
            )
            lp_beta = self.g * logbeta - self.h * beta
            log_jac_z = np.sum(logz, axis=-1)
            out = self._const + loglik + lp_mu + lp_lam + lp_beta + log_jac_z
        return np.where(np.isfinite(out), out, -np.inf)

    def _gradient(self, theta):
        with np.errstate(over="ignore", invalid="ignore"):
            mu, loglam, lam, logz, logbeta, beta, diff, comp = self._pieces(theta)
            resp = np.exp(comp - _lse(comp, keepdims=True))
            nk = resp.sum(axis=-2)
            g_mu = lam * np.sum(resp * diff, axis=-2) - self.kappa * (mu - self.m)
            # d/dloglam of loglik is sum_i r_ik (1/2 - lam (y-mu)^2 / 2)
            g_loglam = 0.5 * nk - 0.5 * lam * np.sum(resp * diff**2, axis=-2)
            g_loglam += self.alpha - beta[..., None] * lam
            z = np.exp(logz)
            # sum_k (n_k + 1) log z_k through the softmax: d/da_j = (n_j + 1) - z_j (n + 3)
            tot = nk + 1.0
            g_a = tot[..., :2] - z[..., :2] * np.sum(tot, axis=-1, keepdims=True)
            g_logbeta = 3 * self.alpha - beta * np.sum(lam, axis=-1) + self.g - self.h * beta
            grad = np.concatenate([g_mu, g_loglam, g_a, g_logbeta[..., None]], axis=-1)
        return grad

    def describe(self):
        return {
            "name": self.name,
            "n": int(self.data.size),
            "data_sum": float(self.data.sum()),
            "data_sumsq": float(np.sum(self.data**2)),
            "alpha": self.alpha,
            "g": self.g,
        }


def mixture_generate_synthetic(n: int, params: MixtureParams = DEFAULT_MIXTURE_TRUTH, seed=None) -> np.ndarray:
    """Draw ``n`` i.i.d. points from the three-component mixture ``params``."""
    if int(n) < 1:
        raise ValueError(f"number of data points must be at least 1, got {n}")
    params.validate()
    rng = np.random.default_rng(seed)
    labels = rng.choice(3, size=int(n), p=np.asarray(params.weights, dtype=float))
    means = np.asarray(params.means)[labels]
    sds = 1.0 / np.sqrt(np.asarray(params.precisions))[labels]
    return means + sds * rng.standard_normal(int(n))


# ---------------------------------------------------------------------------
# Log-Gaussian Cox process


def _grid_distances(grid: int) -> np.ndarray:
    ii, jj = np.meshgrid(np.arange(grid), np.arange(grid), indexing="ij")
    pts = np.stack([ii.ravel(), jj.ravel()], axis=-1).astype(float)
    return np.sqrt(np.sum((pts[:, None, :] - pts[None, :, :]) ** 2, axis=-1))


def cox_covariance(grid: int, sigma2: float, beta: float) -> np.ndarray:
    """Prior covariance ``sigma2 * exp(-delta / (grid * beta))`` over grid cells (row-major)."""
    return sigma2 * np.exp(-_grid_distances(grid) / (grid * beta))


def cox_prior_mean(sigma2: float) -> float:
    return math.log(126.0) - 0.5 * sigma2


def cox_generate_synthetic(grid: int, sigma2: float = 1.91, beta: float = 1.0 / 33.0, seed=None):
    """Draw a latent field from the Gaussian prior and Poisson counts on top of it.

    Returns:
        ``(x, Y)``: the latent field as a vector of length ``grid**2`` and the
        ``grid x grid`` integer counts, both row-major.
    """
    if int(grid) < 2:
        raise ValueError(f"grid side must be at least 2, got {grid}")
    grid = int(grid)
    cov = cox_covariance(grid, sigma2, beta)
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise ValueError(
            f"Cox prior covariance is not positive definite for sigma2={sigma2}, beta={beta}"
        ) from exc
    rng = np.random.default_rng(seed)
    x = cox_prior_mean(sigma2) + chol @ rng.standard_normal(grid * grid)
    cell_area = 1.0 / grid**2
    counts = rng.poisson(cell_area * np.exp(x)).reshape(grid, grid)
    return x, counts.astype(np.int64)


class _KernelCache:
    """Thread-safe LRU cache of kernel factorisations keyed by the bits of ``beta``."""

    def __init__(self, dist: np.ndarray, grid: int, maxsize: int = 1024):
        self.dist = dist
        self.grid = grid
        self.maxsize = maxsize
        self._store: OrderedDict[float, dict] = OrderedDict()
        self._lock = Lock()

    def get(self, beta: float) -> dict:
        key = float(beta)
        with self._lock:
            hit = self._store.get(key)
            if hit is not None:
                self._store.move_to_end(key)
                return hit
        scaled = self.dist / (self.grid * key)
        K = np.exp(-scaled)
        try:
            cf = sla.cho_factor(K, lower=True, check_finite=False)
        except np.linalg.LinAlgError as exc:
            raise OutOfSupportError(f"kernel not positive definite for beta={beta}") from exc
        entry = {
            "cf": cf,
            "logdet": 2.0 * np.sum(np.log(np.diag(cf[0]))),
            "dK": K * scaled,
        }
        with self._lock:
            self._store[key] = entry
            while len(self._store) > self.maxsize:
                self._store.popitem(last=False)
        return entry

    @staticmethod
    def inverse(entry: dict) -> np.ndarray:
        Kinv = entry.get("Kinv")
        if Kinv is None:
            c, _ = entry["cf"]
            inv, info = sla.lapack.dpotri(c, lower=1)
            if info:
                raise OutOfSupportError("kernel inverse failed")
            Kinv = np.tril(inv) + np.tril(inv, -1).T
            entry["Kinv"] = Kinv
        return Kinv

    @staticmethod
    def trace_term(entry: dict) -> float:
        """``tr(K^-1 dK/dlog beta)``, computed on first use (only hyperparameter gradients need it)."""
        t = entry.get("trace_term")
        if t is None:
            t = entry["trace_term"] = float(np.sum(_KernelCache.inverse(entry) * entry["dK"]))
        return t


class LogGaussianCoxTarget(TargetDensity):
    """Posterior of a log-Gaussian Cox process on a ``grid x grid`` lattice.

    Coordinates are the latent field (``grid**2`` values, row-major) followed
    by ``log sigma2`` and ``log beta``. The prior mean is held at
    ``log(126) - sigma2 / 2``; ``sigma2`` and ``beta`` carry exponential
    priors with rates ``sigma2_rate`` and ``beta_rate``. The latent prior
    covariance is ``sigma2 * exp(-delta / (grid * beta))`` with ``delta`` the
    Euclidean distance between cell indices.
    """

    name = "cox"

    def __init__(self, counts, sigma2_rate: float = 1.0, beta_rate: float = 1.0):
        Y = np.asarray(counts)
        if Y.ndim != 2 or Y.shape[0] != Y.shape[1] or Y.shape[0] < 2:
            raise ValueError("counts must be a square grid of side at least 2")
        if np.any(Y < 0) or not np.all(np.equal(np.mod(Y, 1), 0)):
            raise ValueError("counts must be nonnegative integers")
        self.grid = Y.shape[0]
        self.n_cells = self.grid**2
        super().__init__(self.n_cells + 2)
        self.counts = Y.astype(np.int64)
        self._y = self.counts.ravel().astype(float)
        self.cell_area = 1.0 / self.n_cells
        self.sigma2_rate = float(sigma2_rate)
        self.beta_rate = float(beta_rate)
        self._kernels = _KernelCache(_grid_distances(self.grid), self.grid)
        self.latent = np.arange(self.n_cells)
        self.hyper = np.arange(self.n_cells, self.n_cells + 2)
        self._const = (
            -np.sum(gammaln(self._y + 1.0))
            + np.sum(self._y) * math.log(self.cell_area)
            - 0.5 * self.n_cells * math.log(2 * math.pi)
            + math.log(self.sigma2_rate)
            + math.log(self.beta_rate)
        )

    def kernel(self, beta: float) -> dict:
        return self._kernels.get(beta)

    def _point_terms(self, xi: np.ndarray):
        lat = xi[: self.n_cells]
        s, b = xi[self.n_cells], xi[self.n_cells + 1]
        sigma2, beta = math.exp(s), math.exp(b)
        ker = self.kernel(beta)
        r = lat - cox_prior_mean(sigma2)
        Kr = _KernelCache.inverse(ker) @ r
        return lat, s, b, sigma2, beta, ker, r, Kr

    def _log_density(self, x):
        flat = x.reshape(-1, self.dim)
        out = np.empty(flat.shape[0])
        for k, xi in enumerate(flat):
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    lat, s, b, sigma2, beta, ker, r, Kr = self._point_terms(xi)
                    lik = np.dot(self._y, lat) - self.cell_area * np.sum(np.exp(lat))
                    prior = -0.5 * (self.n_cells * s + ker["logdet"]) - 0.5 * np.dot(r, Kr) / sigma2
                    hyp = -self.sigma2_rate * sigma2 + s - self.beta_rate * beta + b
                    out[k] = self._const + lik + prior + hyp
            except (OutOfSupportError, OverflowError, ZeroDivisionError):
                out[k] = -np.inf
        return out.reshape(x.shape[:-1])

    def _grad_point(self, xi: np.ndarray, latent_only: bool = False) -> np.ndarray:
        lat, s, b, sigma2, beta, ker, r, Kr = self._point_terms(xi)
        g_lat = self._y - self.cell_area * np.exp(lat) - Kr / sigma2
        if latent_only:
            return g_lat
        n = self.n_cells
        quad = np.dot(r, Kr)
        # d/dsigma2 of the latent prior, including the sigma2-dependence of its mean
        d_sigma2 = -0.5 * n / sigma2 + 0.5 * quad / sigma2**2 - 0.5 * np.sum(Kr) / sigma2
        g_s = sigma2 * d_sigma2 - self.sigma2_rate * sigma2 + 1.0
        g_b = (
            -0.5 * _KernelCache.trace_term(ker)
            + 0.5 * np.dot(Kr, ker["dK"] @ Kr) / sigma2
            - self.beta_rate * beta
            + 1.0
        )
        return np.concatenate([g_lat, [g_s, g_b]])

    def _gradient(self, x):
        flat = x.reshape(-1, self.dim)
        try:
            with np.errstate(over="raise", invalid="raise"):
                out = np.stack([self._grad_point(xi) for xi in flat])
        except FloatingPointError as exc:
            raise OutOfSupportError(f"{self.name}: gradient overflow") from exc
        return out.reshape(x.shape)

    def block_gradient(self, x, coords):
        coords = np.asarray(coords)
        if coords.size == self.n_cells and np.array_equal(coords, self.latent):
            x = self._check(x)
            flat = x.reshape(-1, self.dim)
            out = np.stack([self._grad_point(xi, latent_only=True) for xi in flat])
            if not np.all(np.isfinite(out)):
                raise OutOfSupportError(f"{self.name}: gradient is not finite")
            return out.reshape(x.shape[:-1] + (self.n_cells,))
        return super().block_gradient(x, coords)

    def describe(self):
        return {
            "name": self.name,
            "grid": self.grid,
            "counts_sum": int(self.counts.sum()),
            "counts_hash": int(np.sum(self.counts.ravel() * np.arange(1, self.n_cells + 1))),
            "sigma2_rate": self.sigma2_rate,
            "beta_rate": self.beta_rate,
        }


# ---------------------------------------------------------------------------
# flat text import/export


def save_mixture_data(path, y) -> None:
    np.savetxt(Path(path), np.asarray(y, dtype=float).ravel(), fmt="%.17g")


def load_mixture_data(path) -> np.ndarray:
    return np.atleast_1d(np.loadtxt(Path(path), dtype=float))


def save_cox_data(path, counts) -> None:
    counts = np.asarray(counts)
    with open(path, "w") as fh:
        fh.write(f"{counts.shape[0]}\n")
        for v in counts.ravel():
            fh.write(f"{int(v)}\n")


def load_cox_data(path) -> np.ndarray:
    vals = np.loadtxt(Path(path), dtype=np.int64).ravel()
    grid = int(vals[0])
    if vals.size != grid * grid + 1:
        raise ValueError(f"{path}: expected {grid * grid} counts after the grid size")
    return vals[1:].reshape(grid, grid)


def all_label_permutations():
    return list(permutations(range(3)))
