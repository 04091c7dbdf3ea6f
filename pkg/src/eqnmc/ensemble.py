"""Ensemble state, group-sequential sweeps and Gibbs blocking.

Walkers are split into equal groups. A sweep visits the groups in ascending
order; every walker of the active group is moved using a preconditioner built
from a frozen snapshot of the walkers outside its group, and the group's new
states are committed before the next group starts.

Walkers of a group are processed in fixed-size chunks, each chunk as one
vectorised task. Chunk composition never depends on the number of worker
threads and every walker draws from its own random stream, so results are
bitwise identical for any worker count.
"""

from __future__ import annotations

import copy
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diagnostics import ChainTrace, stable_hash
from .metropolis import run_iteration
from .preconditioners import ConfigurationError, PreconditionerSpec, make_field
from .samplers import SamplerConfig, WalkerState, _hmc, _mala, overdamped_step
from .targets import ConditionalTarget

__all__ = [
    "KERNELS",
    "CHUNK_SIZE",
    "KernelSpec",
    "Block",
    "GibbsBlocks",
    "EnsembleState",
    "SweepStats",
    "initialize",
    "sweep",
    "gibbs_sweep",
    "run",
    "save_checkpoint",
    "load_checkpoint",
]

KERNELS = ("eqn", "hmc", "mala", "overdamped")
CHUNK_SIZE = 8
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class KernelSpec:
    """A stepping kernel with its preconditioner.

    ``kind`` is ``eqn`` (BAOAB-type Langevin with preconditioner
    ``precond``; identity gives plain underdamped Langevin), ``hmc``
    (``sampler.steps_per_iteration`` leapfrog steps), ``mala`` or
    ``overdamped``.
    """

    sampler: SamplerConfig
    precond: PreconditionerSpec = PreconditionerSpec()
    kind: str = "eqn"

    def __post_init__(self):
        if self.kind not in KERNELS:
            raise ConfigurationError(f"unknown kernel {self.kind!r}; expected one of {KERNELS}")

    @property
    def grads_per_iteration(self) -> int:
        return int(self.sampler.steps_per_iteration)

    def describe(self) -> dict:
        return {"kind": self.kind, "sampler": vars(self.sampler), "precond": vars(self.precond)}


@dataclass(frozen=True)
class Block:
    """A set of coordinates moved together, ``inner_steps`` sweeps per Gibbs iteration."""

    kernel: KernelSpec
    coords: tuple[int, ...] | None = None
    inner_steps: int = 1
    name: str = "all"

    def __post_init__(self):
        if self.coords is not None:
            object.__setattr__(self, "coords", tuple(int(c) for c in self.coords))
        if int(self.inner_steps) < 1:
            raise ConfigurationError(f"block {self.name!r}: inner_steps must be at least 1")


@dataclass(frozen=True)
class GibbsBlocks:
    blocks: tuple[Block, ...]

    def validate(self, dim: int) -> None:
        seen = []
        for b in self.blocks:
            seen.extend(range(dim) if b.coords is None else b.coords)
        if sorted(seen) != list(range(dim)):
            raise ConfigurationError("Gibbs blocks must partition the coordinates exactly")

    @property
    def grads_per_iteration(self) -> float:
        """Block-gradient evaluations per iteration, summed over blocks."""
        return float(sum(b.inner_steps * b.kernel.grads_per_iteration for b in self.blocks))

    def describe(self) -> list:
        return [
            {"name": b.name, "coords": b.coords, "inner_steps": b.inner_steps, "kernel": b.kernel.describe()}
            for b in self.blocks
        ]


def _as_blocks(kernel) -> GibbsBlocks:
    if isinstance(kernel, GibbsBlocks):
        return kernel
    if isinstance(kernel, Block):
        return GibbsBlocks((kernel,))
    if isinstance(kernel, KernelSpec):
        return GibbsBlocks((Block(kernel),))
    raise TypeError(f"expected KernelSpec, Block or GibbsBlocks, got {type(kernel).__name__}")


@dataclass
class EnsembleState:
    Q: np.ndarray
    P: np.ndarray
    n_groups: int
    rngs: list
    iteration: int = 0
    # per-block cached gradients, keyed by block index
    grads: dict = field(default_factory=dict)

    def __post_init__(self):
        L = self.Q.shape[0]
        if self.n_groups < 2:
            raise ConfigurationError(
                f"{self.n_groups} group(s) leave no complement walkers; at least 2 groups are needed"
            )
        if L % self.n_groups:
            raise ConfigurationError(f"{L} walkers cannot be split into {self.n_groups} equal groups")
        if len(self.rngs) != L:
            raise ValueError("one random generator per walker is required")

    @property
    def n_walkers(self) -> int:
        return self.Q.shape[0]

    @property
    def dim(self) -> int:
        return self.Q.shape[1]

    @property
    def group_size(self) -> int:
        return self.n_walkers // self.n_groups

    @property
    def complement_size(self) -> int:
        return self.n_walkers - self.group_size

    @property
    def groups(self) -> np.ndarray:
        return np.arange(self.n_walkers) // self.group_size

    def members(self, g: int) -> np.ndarray:
        return np.arange(g * self.group_size, (g + 1) * self.group_size)

    def complement(self, g: int) -> np.ndarray:
        return np.flatnonzero(self.groups != g)


def _walker_rngs(seed, L):
    return [np.random.Generator(np.random.PCG64(s)) for s in np.random.SeedSequence(seed).spawn(L)]


def initialize(
    n_walkers: int,
    n_groups: int,
    target,
    init: str = "ball",
    seed: int = 0,
    center=None,
    scale: float = 1.0,
    positions=None,
) -> EnsembleState:
    """Create an ensemble of ``n_walkers`` split into ``n_groups`` groups.

    ``init`` is ``ball`` (Gaussian ball around ``center``; ``scale`` is a
    scalar, per-coordinate scales or a matrix factor),
    ``prior`` (``target.sample_prior``) or ``positions`` (explicit array, or a
    path to a checkpoint or ``.npy`` file). Momenta are standard normal. All
    draws are deterministic in ``seed``.
    """
    L, G = int(n_walkers), int(n_groups)
    if G < 2:
        raise ConfigurationError(f"{G} group(s) leave no complement walkers; at least 2 are needed")
    if L % G:
        raise ConfigurationError(f"{L} walkers cannot be split into {G} equal groups")
    n = target.dim
    init_rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), 0x1217])))
    if init == "ball":
        c = np.zeros(n) if center is None else np.asarray(center, dtype=float)
        S = np.asarray(scale, dtype=float)
        Z = init_rng.standard_normal((L, n))
        Q = c + (Z @ S.T if S.ndim == 2 else S * Z)
    elif init == "prior":
        if not hasattr(target, "sample_prior"):
            raise ConfigurationError(f"target {target.name!r} has no prior sampler")
        Q = np.asarray(target.sample_prior(init_rng, L), dtype=float)
    elif init == "positions":
        if positions is None:
            raise ConfigurationError("init=positions needs positions")
        if isinstance(positions, (str, Path)):
            p = Path(positions)
            if p.suffix == ".npz":
                with np.load(p) as z:
                    Q = np.array(z["Q"])
            else:
                Q = np.load(p)
        else:
            Q = np.array(positions, dtype=float)
    else:
        raise ConfigurationError(f"unknown init {init!r}")
    if Q.shape != (L, n):
        raise ConfigurationError(f"initial positions have shape {Q.shape}, expected {(L, n)}")
    rngs = _walker_rngs(seed, L)
    P = np.stack([g.standard_normal(n) for g in rngs])
    return EnsembleState(Q, P, G, rngs)


@dataclass
class SweepStats:
    accepted: np.ndarray
    failed: np.ndarray
    steps: int = 0

    @property
    def acceptance(self) -> float:
        return float(self.accepted.sum() / max(self.steps, 1))


def _chunks(idx, size):
    return [idx[k : k + size] for k in range(0, len(idx), size)]


def _move_chunk(target, kernel: KernelSpec, fld, q, p, grad, rngs, repeats):
    """Move one chunk of walkers ``repeats`` times; returns ``(q, p, grad, accepted, failed)``."""
    acc = np.zeros(q.shape[0])
    fail = np.zeros(q.shape[0])
    cfg = kernel.sampler
    if kernel.kind == "eqn":
        state = WalkerState(q, p, grad)
        for _ in range(repeats):
            res = run_iteration(target, state, fld, cfg, rngs)
            state = res.state
            acc += res.accepted
            fail += res.failed
        return state.q, state.p, state.grad, acc, fail
    if kernel.kind == "hmc":
        lp = None
        for _ in range(repeats):
            q, a, (grad, lp) = _hmc(target, q, cfg.stepsize, cfg.steps_per_iteration, rngs, grad, lp)
            acc += a
        return q, p, grad, acc, fail
    if kernel.kind == "mala":
        cache = None if grad is None else (target.log_density(q), grad)
        for _ in range(repeats):
            for _ in range(cfg.steps_per_iteration):
                q, a, cache = _mala(target, q, cfg.stepsize, rngs, cache)
                acc += a / cfg.steps_per_iteration
        return q, p, cache[1], acc, fail
    for _ in range(repeats):
        for _ in range(cfg.steps_per_iteration):
            q = overdamped_step(target, q, cfg.stepsize, rngs)
        acc += 1
    return q, p, None, acc, fail


def sweep(
    ens: EnsembleState,
    target,
    kernel,
    coords=None,
    workers: int = 1,
    refresh_every: int = 1,
    executor: ThreadPoolExecutor | None = None,
    chunk_size: int = CHUNK_SIZE,
    cache_key=0,
) -> SweepStats:
    """Move every group once, ascending, each against a snapshot of the others.

    ``kernel`` is a :class:`KernelSpec`; ``coords`` restricts the move to a
    coordinate block (other coordinates held fixed). Each group runs
    ``refresh_every`` iterations against one snapshot before the next group
    starts. Mutates ``ens`` and returns acceptance and failure counts.
    """
    if isinstance(kernel, Block):
        kernel, coords = kernel.kernel, kernel.coords
    cidx = np.arange(ens.dim) if coords is None else np.asarray(coords, dtype=int)
    full = cidx.size == ens.dim and np.array_equal(cidx, np.arange(ens.dim))
    L = ens.n_walkers
    grads = ens.grads.get(cache_key)
    if grads is None:
        grads = np.full((L, cidx.size), np.nan)
        have = np.zeros(L, dtype=bool)
    else:
        grads, have = grads
    own_pool = executor is None and workers > 1
    pool = ThreadPoolExecutor(max_workers=workers) if own_pool else executor
    accepted = np.zeros(L)
    failed = np.zeros(L)
    try:
        for g in range(ens.n_groups):
            snap = ens.Q.copy()
            members = ens.members(g)
            comp = snap[ens.complement(g)][:, cidx]
            fld = None
            if kernel.kind == "eqn":
                first = int(members[0])
                fld = make_field(kernel.precond, comp, label=f"walker {first} (group {g})")

            def task(ch):
                sub = target if full else ConditionalTarget(target, cidx, snap[ch])
                gr = grads[ch] if np.all(have[ch]) else None
                return _move_chunk(
                    sub, kernel, fld, snap[ch][:, cidx], ens.P[ch][:, cidx], gr,
                    [ens.rngs[i] for i in ch], refresh_every,
                )

            chunks = _chunks(members, chunk_size)
            results = list(pool.map(task, chunks)) if pool is not None else [task(c) for c in chunks]
            for ch, (q, p, gr, acc, fail) in zip(chunks, results):
                ens.Q[np.ix_(ch, cidx)] = q
                ens.P[np.ix_(ch, cidx)] = p
                if gr is not None:
                    grads[ch] = gr
                    have[ch] = True
                else:
                    have[ch] = False
                accepted[ch] += acc
                failed[ch] += fail
    finally:
        if own_pool:
            pool.shutdown()
    ens.grads = {cache_key: (grads, have)}
    return SweepStats(accepted, failed, refresh_every)


def gibbs_sweep(ens: EnsembleState, target, blocks: GibbsBlocks, workers: int = 1, executor=None,
                refresh_every: int = 1, chunk_size: int = CHUNK_SIZE) -> SweepStats:
    """Sweep each block ``inner_steps`` times, in block order, each with its own kernel."""
    blocks = _as_blocks(blocks)
    blocks.validate(ens.dim)
    acc = np.zeros(ens.n_walkers)
    fail = np.zeros(ens.n_walkers)
    steps = 0
    for b_idx, b in enumerate(blocks.blocks):
        for _ in range(int(b.inner_steps)):
            st = sweep(ens, target, b.kernel, b.coords, workers, refresh_every, executor, chunk_size, b_idx)
            acc += st.accepted
            fail += st.failed
            steps += st.steps
    return SweepStats(acc, fail, steps)


def run(
    ens: EnsembleState,
    target,
    kernel,
    n_iterations: int,
    observe=None,
    columns=None,
    workers: int = 1,
    record: str = "mean",
    refresh_every: int = 1,
    chunk_size: int = CHUNK_SIZE,
    metadata: dict | None = None,
    checkpoint_path=None,
    checkpoint_every: int = 0,
    callback=None,
) -> ChainTrace:
    """Run ``n_iterations`` Gibbs iterations and record observables.

    ``observe`` maps the ``(L, N)`` positions to ``(L, d)`` observables
    (default: the coordinates). ``record`` is ``mean`` (ensemble mean per
    iteration) or ``walkers`` (every walker). A checkpoint is written every
    ``checkpoint_every`` iterations and at the end when ``checkpoint_path`` is
    given; if an iteration raises, the state from the start of that
    iteration is flushed before the error propagates.
    """
    blocks = _as_blocks(kernel)
    blocks.validate(ens.dim)
    if record not in ("mean", "walkers"):
        raise ConfigurationError(f"unknown record mode {record!r}")
    if observe is None:
        observe = lambda Q: Q  # noqa: E731
        columns = columns or [f"x{j}" for j in range(ens.dim)]
    vals, accs = [], []
    failures = 0
    t0 = time.perf_counter()
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for k in range(int(n_iterations)):
            backup = copy.deepcopy(ens) if checkpoint_path is not None else None
            try:
                st = gibbs_sweep(ens, target, blocks, workers, pool, refresh_every, chunk_size)
            except Exception:
                if backup is not None:
                    save_checkpoint(backup, checkpoint_path)
                raise
            ens.iteration += 1
            failures += int(st.failed.sum())
            obs = np.asarray(observe(ens.Q), dtype=float)
            vals.append(obs.mean(axis=0, keepdims=True) if record == "mean" else obs)
            accs.append(st.acceptance / ens.n_walkers)
            if callback is not None:
                callback(ens, k)
            if checkpoint_path is not None and checkpoint_every and ens.iteration % checkpoint_every == 0:
                save_checkpoint(ens, checkpoint_path)
    finally:
        if pool is not None:
            pool.shutdown()
    if checkpoint_path is not None:
        save_checkpoint(ens, checkpoint_path)
    meta = {
        "grads_per_iteration": blocks.grads_per_iteration,
        "walkers": ens.n_walkers,
        "groups": ens.n_groups,
        "failures": failures,
        "biased": any(b.kernel.kind == "eqn" and b.kernel.sampler.biased for b in blocks.blocks),
        "config_hash": stable_hash(blocks.describe()),
    }
    meta.update(metadata or {})
    if not vals:
        raise ConfigurationError("n_iterations must be at least 1")
    return ChainTrace(np.stack(vals), list(columns), np.array(accs), meta, time.perf_counter() - t0)


def save_checkpoint(ens: EnsembleState, path) -> Path:
    """Write positions, momenta, random states, gradient caches and the iteration counter."""
    path = Path(path)
    arrays = {
        "Q": ens.Q,
        "P": ens.P,
        "meta": np.array(json.dumps({
            "version": CHECKPOINT_VERSION,
            "n_groups": ens.n_groups,
            "iteration": ens.iteration,
            "rng_states": [g.bit_generator.state for g in ens.rngs],
            "grad_keys": [str(k) for k in ens.grads],
        })),
    }
    for k, (g, have) in ens.grads.items():
        arrays[f"grad_{k}"] = g
        arrays[f"have_{k}"] = have
    tmp = path.with_name(path.name + ".tmp.npz")
    np.savez(tmp, **arrays)
    tmp.replace(path)
    return path


def load_checkpoint(path) -> EnsembleState:
    path = Path(path)
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {meta.get('version')}")
        rngs = []
        for st in meta["rng_states"]:
            g = np.random.Generator(np.random.PCG64())
            g.bit_generator.state = st
            rngs.append(g)
        grads = {}
        for k in meta["grad_keys"]:
            grads[int(k)] = (np.array(z[f"grad_{k}"]), np.array(z[f"have_{k}"]))
        ens = EnsembleState(np.array(z["Q"]), np.array(z["P"]), int(meta["n_groups"]), rngs,
                            int(meta["iteration"]), grads)
    return ens
