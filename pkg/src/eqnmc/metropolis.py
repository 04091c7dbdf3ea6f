"""Accept/reject correction for EQN steps and trajectories.

An EQN step is a deterministic map of ``(q, p, xi)`` where ``xi`` is the
Ornstein-Uhlenbeck noise. Its reversal from ``(q', -p')`` runs through the
same midpoint ``q_half`` with the roles of the momenta exchanged, so the
ratio of forward and reverse transition densities only needs the two noise
densities and the Jacobians of the two half-drifts.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .samplers import SamplerConfig, StepRecord, WalkerState, eqn_step, safe_log_density, uniform

__all__ = [
    "transition_log_ratio",
    "reverse_record",
    "metropolis_trajectory",
    "IterationResult",
    "run_iteration",
]


def _log_f(xi, alpha):
    return -0.5 * np.sum(xi * xi, axis=-1) / (1.0 - alpha * alpha)


def transition_log_ratio(record: StepRecord, config: SamplerConfig | None = None):
    """``log T(forward) / T(reverse)`` for one recorded step.

    The acceptance log-probability of a trajectory is the change of
    ``log pi(q) - |p|^2 / 2`` minus the sum of these ratios. Walkers whose
    Jacobian determinant has a non-positive sign get ``+inf`` (forcing a
    rejection).
    """
    alpha = record.alpha
    c = 0.5 * record.stepsize
    shape = record.p24.shape[:-1]
    out = np.zeros(shape)
    if alpha < 1.0:
        xi = record.phat - alpha * record.p24
        xi_rev = alpha * record.phat - record.p24
        out = out + _log_f(xi, alpha) - _log_f(xi_rev, alpha)
    if not record.constant:
        s_plus, ld_plus = record.op_half.jacobian_logdet(record.p34, c)
        s_minus, ld_minus = record.op_half.jacobian_logdet(record.p14, -c)
        with np.errstate(invalid="ignore"):
            out = out - ld_plus + ld_minus
        out = np.where((s_plus > 0) & (s_minus > 0), out, np.inf)
    return out


def reverse_record(record: StepRecord) -> StepRecord:
    """The record of the reversed step started from the forward end point with flipped momentum."""
    alpha = record.alpha
    noise = record.noise
    if alpha < 1.0:
        noise = (alpha * record.phat - record.p24) / np.sqrt(1.0 - alpha * alpha)
    return replace(
        record,
        noise=noise,
        p14=-record.p34,
        p24=-record.phat,
        phat=-record.p24,
        p34=-record.p14,
    )


def _hamiltonian(target, q, p):
    return safe_log_density(target, q) - 0.5 * np.sum(p * p, axis=-1)


def _select(mask, a, b):
    m = mask[..., None] if np.ndim(a) > np.ndim(mask) else mask
    return np.where(m, a, b)


@dataclass
class IterationResult:
    state: WalkerState
    accepted: np.ndarray
    failed: np.ndarray
    log_accept: np.ndarray | None = None


def metropolis_trajectory(target, state: WalkerState, field, n_steps: int, config: SamplerConfig, rng):
    """Run ``n_steps`` EQN steps and accept or reject the whole trajectory.

    Returns ``(state', accepted)``. A rejected walker returns to its start
    position with its momentum negated.
    """
    res = _metropolized(target, state, field, n_steps, config, rng)
    return res.state, res.accepted


def _metropolized(target, state, field, n_steps, config, rng):
    if n_steps < 1:
        raise ValueError("n_steps must be at least 1")
    h0 = _hamiltonian(target, state.q, state.p)
    total = np.zeros(state.q.shape[:-1])
    failed = np.zeros(state.q.shape[:-1], dtype=bool)
    cur = state
    for _ in range(n_steps):
        cur, rec = eqn_step(target, cur, field, config, rng)
        failed |= rec.failed
        with np.errstate(invalid="ignore"):
            total = total + transition_log_ratio(rec)
    with np.errstate(invalid="ignore", over="ignore"):
        log_a = _hamiltonian(target, cur.q, cur.p) - h0 - total
    log_a = np.where(failed | np.isnan(log_a), -np.inf, log_a)
    u = uniform(rng, np.shape(log_a))
    acc = np.log(u) < log_a
    g0 = state.grad if state.grad is not None else target.gradient(state.q)
    new = WalkerState(
        _select(acc, cur.q, state.q),
        _select(acc, cur.p, -state.p),
        _select(acc, cur.grad, g0),
    )
    return IterationResult(new, acc, failed, log_a)


def run_iteration(target, state: WalkerState, field, config: SamplerConfig, rng) -> IterationResult:
    """``config.steps_per_iteration`` EQN steps, metropolized as a trajectory if configured.

    Without metropolization a walker whose step fails is reset to its state
    at the start of the iteration and reported in ``failed``.
    """
    n = int(config.steps_per_iteration)
    if config.metropolize:
        return _metropolized(target, state, field, n, config, rng)
    failed = np.zeros(state.q.shape[:-1], dtype=bool)
    cur = state
    for _ in range(n):
        cur, rec = eqn_step(target, cur, field, config, rng)
        failed |= rec.failed
    if np.any(failed):
        g0 = state.grad if state.grad is not None else target.gradient(state.q)
        cur = WalkerState(
            _select(failed, state.q, cur.q),
            _select(failed, state.p, cur.p),
            _select(failed, g0, cur.grad),
        )
    return IterationResult(cur, ~failed, failed)
