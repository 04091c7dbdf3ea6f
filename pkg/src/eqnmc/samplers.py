"""Stepping kernels: overdamped Langevin, MALA, BAOAB, HMC and the EQN step.

Every kernel works on a single walker (arrays of shape ``(N,)``) or on a
batch of walkers (``(m, N)``). The ``rng`` argument is either one
``numpy.random.Generator`` or a sequence of generators, one per batch row;
the latter keeps each walker's noise independent of how walkers are batched.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .linalg import divergence_probe
from .preconditioners import ConfigurationError
from .targets import OutOfSupportError

__all__ = [
    "DIVERGENCE_MODES",
    "ImplicitSolveError",
    "SamplerConfig",
    "WalkerState",
    "StepRecord",
    "standard_normal",
    "uniform",
    "safe_gradient",
    "safe_log_density",
    "overdamped_step",
    "mala_step",
    "baoab_step",
    "hmc_step",
    "implicit_drift_solve",
    "eqn_step",
]

DIVERGENCE_MODES = ("analytic", "noisy", "omitted")


class ImplicitSolveError(RuntimeError):
    """The implicit half-drift did not converge."""

    def __init__(self, residual, iterations):
        self.residual = np.asarray(residual)
        self.iterations = iterations
        super().__init__(
            f"implicit drift failed after {iterations} iterations, residual {np.max(self.residual):.3e}"
        )


@dataclass(frozen=True)
class SamplerConfig:
    stepsize: float
    friction: float = 1.0
    steps_per_iteration: int = 1
    metropolize: bool = False
    divergence_mode: str = "analytic"
    implicit_tol: float = 1e-10
    implicit_max_iter: int = 50
    implicit_damping: float = 1.0
    noisy_eps: float = 1e-4
    noisy_samples: int = 1
    compact_divergence: bool = False
    seed: int | None = None

    def __post_init__(self):
        if not self.stepsize > 0:
            raise ConfigurationError(f"stepsize must be positive, got {self.stepsize}")
        if not self.friction >= 0:
            raise ConfigurationError(f"friction must be nonnegative, got {self.friction}")
        if int(self.steps_per_iteration) < 1:
            raise ConfigurationError("steps_per_iteration must be at least 1")
        if self.divergence_mode not in DIVERGENCE_MODES:
            raise ConfigurationError(
                f"unknown divergence_mode {self.divergence_mode!r}; expected one of {DIVERGENCE_MODES}"
            )
        if not 0 < self.implicit_damping <= 1:
            raise ConfigurationError("implicit_damping must lie in (0, 1]")
        if self.compact_divergence and self.metropolize:
            raise ConfigurationError("the compact divergence variant cannot be metropolized")

    @property
    def alpha(self) -> float:
        return math.exp(-self.friction * self.stepsize)

    @property
    def biased(self) -> bool:
        """True when the chain has a known non-vanishing bias in its stationary law."""
        return not self.metropolize and self.divergence_mode != "analytic"

    def with_(self, **changes) -> "SamplerConfig":
        return replace(self, **changes)


@dataclass
class WalkerState:
    """Position, momentum and the cached ``grad log pi(q)`` (``None`` when stale)."""

    q: np.ndarray
    p: np.ndarray
    grad: np.ndarray | None = None

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float)
        self.p = np.asarray(self.p, dtype=float)
        if self.q.shape != self.p.shape:
            raise ValueError(f"position shape {self.q.shape} differs from momentum shape {self.p.shape}")

    def copy(self) -> "WalkerState":
        g = None if self.grad is None else self.grad.copy()
        return WalkerState(self.q.copy(), self.p.copy(), g)


def _per_row(rng) -> bool:
    return isinstance(rng, (list, tuple))


def standard_normal(rng, shape) -> np.ndarray:
    """Gaussian noise of ``shape``, drawing row ``i`` from ``rng[i]`` when ``rng`` is a list."""
    shape = tuple(shape)
    if _per_row(rng):
        if len(rng) != shape[0]:
            raise ValueError(f"{len(rng)} generators for {shape[0]} rows")
        return np.stack([g.standard_normal(shape[1:]) for g in rng])
    return rng.standard_normal(shape)


def uniform(rng, shape) -> np.ndarray:
    shape = tuple(shape)
    if _per_row(rng):
        return np.stack([g.random(shape[1:]) for g in rng])
    return rng.random(shape)


def safe_gradient(target, q):
    """Gradient and a mask of rows where it exists; failed rows are NaN."""
    try:
        g = np.asarray(target.gradient(q), dtype=float)
        return g, np.all(np.isfinite(g), axis=-1)
    except OutOfSupportError:
        if q.ndim == 1:
            return np.full_like(q, np.nan), np.bool_(False)
    g = np.empty_like(q)
    for i in range(q.shape[0]):
        t = target.row(i) if hasattr(target, "row") else target
        try:
            g[i] = t.gradient(q[i])
        except OutOfSupportError:
            g[i] = np.nan
    return g, np.all(np.isfinite(g), axis=-1)


def safe_log_density(target, q):
    """Log density with ``-inf`` on rows outside the support."""
    try:
        return np.asarray(target.log_density(q), dtype=float)
    except OutOfSupportError:
        if q.ndim == 1:
            return np.float64(-np.inf)
    out = np.empty(q.shape[0])
    for i in range(q.shape[0]):
        t = target.row(i) if hasattr(target, "row") else target
        try:
            out[i] = t.log_density(q[i])
        except OutOfSupportError:
            out[i] = -np.inf
    return out


def _sqnorm(x):
    return np.sum(x * x, axis=-1)


def overdamped_step(target, x, h: float, rng, noise=None):
    """Euler-Maruyama step ``x + h grad log pi(x) + sqrt(2h) R``."""
    if not h > 0:
        raise ValueError("stepsize must be positive")
    x = np.asarray(x, dtype=float)
    R = standard_normal(rng, x.shape) if noise is None else np.asarray(noise, dtype=float)
    return x + h * target.gradient(x) + math.sqrt(2.0 * h) * R


def mala_step(target, x, h: float, rng, cache=None):
    """Metropolis-adjusted overdamped step. Returns ``(x', accepted)``.

    ``cache`` may hold ``(log_density, gradient)`` at ``x`` to skip their
    evaluation.
    """
    x1, acc, _ = _mala(target, np.asarray(x, dtype=float), h, rng, cache)
    return x1, acc


def _mala(target, x, h, rng, cache=None):
    if not h > 0:
        raise ValueError("stepsize must be positive")
    if cache is None:
        lp, g = target.log_density(x), target.gradient(x)
    else:
        lp, g = cache
    R = standard_normal(rng, x.shape)
    y = x + h * g + math.sqrt(2.0 * h) * R
    lpy = safe_log_density(target, y)
    gy, ok = safe_gradient(target, y)
    fwd = -_sqnorm(y - x - h * g) / (4.0 * h)
    with np.errstate(invalid="ignore"):
        rev = -_sqnorm(x - y - h * gy) / (4.0 * h)
        log_a = np.where(ok, lpy - lp + rev - fwd, -np.inf)
    u = uniform(rng, np.shape(log_a))
    acc = np.log(u) < log_a
    a = acc[..., None] if x.ndim > 1 else acc
    return np.where(a, y, x), acc, (np.where(acc, lpy, lp), np.where(a, gy, g))


def baoab_step(target, state: WalkerState, config: SamplerConfig, rng, noise=None) -> WalkerState:
    """One BAOAB step of unit-mass underdamped Langevin dynamics."""
    h = config.stepsize
    alpha = config.alpha
    c = 0.5 * h
    g = target.gradient(state.q) if state.grad is None else state.grad
    p = state.p + c * g
    q = state.q + c * p
    R = standard_normal(rng, q.shape) if noise is None else noise
    p = alpha * p + math.sqrt(1.0 - alpha * alpha) * R
    q = q + c * p
    g = target.gradient(q)
    p = p + c * g
    return WalkerState(q, p, g)


def hmc_step(target, q, h: float, n_leapfrog: int, rng):
    """Momentum refresh, ``n_leapfrog`` leapfrog steps and an energy accept test.

    Returns ``(q', accepted)``.
    """
    q1, acc, _ = _hmc(target, np.asarray(q, dtype=float), h, n_leapfrog, rng)
    return q1, acc


def _hmc(target, q, h, n_leapfrog, rng, grad=None, logp=None):
    if n_leapfrog < 1:
        raise ValueError("n_leapfrog must be at least 1")
    p0 = standard_normal(rng, q.shape)
    g0 = target.gradient(q) if grad is None else grad
    lp0 = target.log_density(q) if logp is None else logp
    x, p, g = q, p0 + 0.5 * h * g0, g0
    ok = np.ones(q.shape[:-1], dtype=bool)
    with np.errstate(invalid="ignore", over="ignore"):
        for k in range(n_leapfrog):
            x = x + h * p
            g, okk = safe_gradient(target, x)
            ok &= okk
            p = p + (h if k < n_leapfrog - 1 else 0.5 * h) * g
        lp1 = safe_log_density(target, x)
        log_a = np.where(ok, lp1 - 0.5 * _sqnorm(p) - lp0 + 0.5 * _sqnorm(p0), -np.inf)
    u = uniform(rng, np.shape(log_a))
    acc = np.log(u) < log_a
    a = acc[..., None] if q.ndim > 1 else acc
    return np.where(a, x, q), acc, (np.where(a, g, g0), np.where(acc, lp1, lp0))


def implicit_drift_solve(q, p, h: float, field, tol: float = 1e-10, max_iter: int = 50, damping: float = 1.0):
    """Solve ``q_half = q + (h/2) B(q_half) p`` by damped fixed-point iteration from ``q``.

    Returns ``(q_half, B(q_half))``. Raises :class:`ImplicitSolveError` when
    any walker's residual exceeds ``tol`` after ``max_iter`` iterations.
    """
    qh, op, conv, res, it = _implicit_solve(np.asarray(q, float), np.asarray(p, float), 0.5 * h, field,
                                            tol, max_iter, damping)
    if not np.all(conv):
        raise ImplicitSolveError(res, it)
    return qh, op


def _implicit_solve(q, p, c, field, tol, max_iter, damping):
    """Returns ``(q_half, op, converged, residual, iterations)``."""
    if field.constant:
        op = field.evaluate(q)
        conv = np.ones(q.shape[:-1], dtype=bool)
        return q + c * op.apply(p), op, conv, np.zeros(q.shape[:-1]), 1
    qk = q
    diverged = np.zeros(q.shape[:-1], dtype=bool)
    with np.errstate(invalid="ignore", over="ignore"):
        for it in range(max_iter + 1):
            op = field.evaluate(qk)
            target_q = q + c * op.apply(p)
            res = np.sqrt(_sqnorm(qk - target_q))
            diverged |= ~np.isfinite(res)
            conv = (res <= tol) & ~diverged
            if np.all(conv | diverged) or it == max_iter:
                break
            step = target_q if damping == 1.0 else (1.0 - damping) * qk + damping * target_q
            # converged walkers stay put so batch partners do not affect them;
            # diverged ones are frozen at their last finite iterate
            qk = _keep_rows(conv | diverged | ~np.all(np.isfinite(step), axis=-1), qk, step)
    return qk, op, conv, res, it


def _keep_rows(mask, old, new):
    if old.ndim == 1:
        return old if mask else new
    return np.where(mask[..., None], old, new)


@dataclass
class StepRecord:
    """Intermediate quantities of one EQN step, enough to assemble the transition ratio.

    ``noise`` is ``R``; the momenta are ``p_1/4``, ``p_2/4``, ``p_hat`` and
    ``p_3/4``; ``q_half`` is the implicit midpoint and ``op_half`` the
    operator there. ``failed`` marks walkers whose step is invalid.
    """

    noise: np.ndarray
    p14: np.ndarray
    p24: np.ndarray
    phat: np.ndarray
    p34: np.ndarray
    q_half: np.ndarray
    op_half: object
    alpha: float
    stepsize: float
    failed: np.ndarray
    constant: bool


def _noisy_draw(rng, shape, samples):
    if _per_row(rng):
        return np.stack([g.standard_normal((samples, shape[-1])) for g in rng])
    return rng.standard_normal(tuple(shape[:-1]) + (samples, shape[-1]))


def eqn_step(target, state: WalkerState, field, config: SamplerConfig, rng, noise=None):
    """One preconditioned EQN step from ``state`` with preconditioner ``field``.

    Returns ``(state', record)``. ``field`` is ``q``-independent for identity,
    global and blended preconditioners, in which case the implicit drift is
    explicit and the divergence vanishes. Walkers whose implicit solve or
    gradient fails are flagged in ``record.failed`` and returned unchanged.
    """
    h = config.stepsize
    c = 0.5 * h
    alpha = config.alpha
    q0 = state.q
    g0 = target.gradient(q0) if state.grad is None else state.grad
    op0 = field.evaluate(q0)
    p14 = state.p + c * op0.apply_transpose(g0)
    qh, op, conv, _, _ = _implicit_solve(q0, p14, c, field, config.implicit_tol,
                                          config.implicit_max_iter, config.implicit_damping)
    with np.errstate(invalid="ignore", over="ignore"):
        div = None
        if config.divergence_mode == "noisy" and not field.constant:
            nz = _noisy_draw(rng, qh.shape, config.noisy_samples)
            div = divergence_probe(field.apply, qh, config.noisy_eps, nz).mean(axis=-2)
        elif config.divergence_mode == "analytic" and not field.constant:
            div = op.divergence()
        R = standard_normal(rng, q0.shape) if noise is None else np.asarray(noise, dtype=float)
        s = math.sqrt(1.0 - alpha * alpha)
        if div is None:
            p24 = p14
            phat = alpha * p24 + s * R
            p34 = phat
        elif config.compact_divergence:
            p24 = p14
            phat = alpha * p24 + s * R + (alpha + 1.0) * c * div
            p34 = phat
        else:
            p24 = p14 + c * div
            phat = alpha * p24 + s * R
            p34 = phat + c * div
        q1 = qh + c * op.apply(p34)
        finite = np.all(np.isfinite(q1), axis=-1)
        q1 = _keep_rows(finite, q1, q0)
        g1, gok = safe_gradient(target, q1)
        gok = gok & finite
        op1 = field.evaluate(q1)
        p1 = p34 + c * op1.apply_transpose(g1)
    failed = ~(conv & gok & np.all(np.isfinite(p1), axis=-1))
    if np.any(failed):
        f = failed[..., None] if q0.ndim > 1 else failed
        q1 = np.where(f, q0, q1)
        p1 = np.where(f, state.p, p1)
        g1 = np.where(f, g0, g1)
    record = StepRecord(R, p14, p24, phat, p34, qh, op, alpha, h, failed, field.constant)
    return WalkerState(q1, p1, g1), record
