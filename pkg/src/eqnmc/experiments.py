"""Experiment presets, step-size tuning and preset runs.

A preset is a set of studies, each a :class:`~eqnmc.config.RunConfig`
with a roster of samplers. :func:`run_preset` runs every roster entry from
the same seed, stores the traces, a comparison report and plot-ready CSV
files. A sampler that crashes is recorded in the report directory and the
roster continues.
"""

from __future__ import annotations

import copy
import csv
import json
import math
import time
import traceback
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import optimize
from scipy.special import softmax

from .config import ConfigError, RunConfig, SamplerSection, dump_studies, parse_studies
from .diagnostics import Report, autocorrelation, iat_empirical, save_trace, stable_hash, summarize
from .ensemble import Block, EnsembleState, GibbsBlocks, KernelSpec, initialize, run
from .preconditioners import PreconditionerSpec
from .samplers import SamplerConfig
from .targets import (
    DEFAULT_MIXTURE_TRUTH,
    GaussianTarget,
    LogGaussianCoxTarget,
    MixtureModelTarget,
    MixtureParams,
    RingTarget,
    cox_generate_synthetic,
    load_cox_data,
    load_mixture_data,
    mixture_generate_synthetic,
)

__all__ = [
    "TuningError",
    "TuneResult",
    "StudyResult",
    "build_target",
    "build_kernel",
    "resolve_coords",
    "observable_set",
    "find_mode",
    "initial_ensemble",
    "tune_stepsize",
    "tuned_stepsizes",
    "study_lineage",
    "iterations_for",
    "PRESETS",
    "list_presets",
    "get_preset",
    "run_study",
    "run_preset",
]


class TuningError(RuntimeError):
    """The acceptance band was not reached; ``curve`` holds the measured ``(h, acceptance)`` pairs."""

    def __init__(self, message: str, curve):
        self.curve = list(curve)
        pts = ", ".join(f"h={h:.4g}: {a:.3f}" for h, a in self.curve)
        super().__init__(f"{message}; measured {pts}")


# ---------------------------------------------------------------------------
# building blocks from configuration


def build_target(tcfg: dict):
    kind = tcfg["kind"]
    if kind == "gaussian":
        cov = np.asarray(tcfg["covariance"], dtype=float)
        if cov.size == 0:
            raise ConfigError("[target] gaussian needs 'covariance'", key="covariance")
        n = math.isqrt(cov.size)
        if n > 1 and n * n == cov.size:
            cov = cov.reshape(n, n)
        return GaussianTarget(cov)
    if kind == "ring":
        return RingTarget(tcfg["radius"], tcfg["width"], tcfg["dim"])
    if kind == "mixture":
        y = load_mixture_data(tcfg["data"]) if tcfg["data"] else mixture_generate_synthetic(
            tcfg["n"], seed=tcfg["data_seed"])
        return MixtureModelTarget(y, tcfg["alpha"], tcfg["g"])
    if kind == "cox":
        if tcfg["data"]:
            Y = load_cox_data(tcfg["data"])
        else:
            _, Y = cox_generate_synthetic(tcfg["grid"], tcfg["sigma2"], tcfg["beta"], seed=tcfg["data_seed"])
        return LogGaussianCoxTarget(Y)
    raise ConfigError(f"unknown target kind {kind!r}", key="kind")


def resolve_coords(spec: str, target):
    """``all``, a named block of the target (``latent``, ``hyper``), ``a:b`` or a comma list."""
    spec = spec.strip()
    if spec in ("", "all"):
        return None
    if isinstance(getattr(target, spec, None), np.ndarray):
        return tuple(int(i) for i in getattr(target, spec))
    try:
        if ":" in spec:
            a, b = (int(x) for x in spec.split(":"))
            return tuple(range(a, b))
        return tuple(int(x) for x in spec.replace(",", " ").split())
    except ValueError:
        raise ConfigError(f"cannot resolve coordinate block {spec!r}", key="coords") from None


def _kernel_spec(v: dict, stepsize: float | None = None) -> KernelSpec:
    sampler = SamplerConfig(
        stepsize=v["stepsize"] if stepsize is None else stepsize,
        friction=v["friction"],
        steps_per_iteration=v["steps_per_iteration"],
        metropolize=v["metropolize"],
        divergence_mode=v["divergence_mode"],
        implicit_tol=v["implicit_tol"],
        implicit_max_iter=v["implicit_max_iter"],
        implicit_damping=v["implicit_damping"],
        noisy_eps=v["noisy_eps"],
        noisy_samples=v["noisy_samples"],
        compact_divergence=v["compact_divergence"],
    )
    precond = PreconditionerSpec(
        mode=v["mode"],
        mu=v["mu"],
        lam=v["lambda"],
        weight_metric=v["weight_metric"],
        weight_coords=tuple(v["weight_coords"]) or None,
    )
    return KernelSpec(sampler, precond, v["kind"])


def build_kernel(sections: list[SamplerSection], target, stepsizes: dict | None = None):
    """A :class:`GibbsBlocks` for one roster entry; ``stepsizes`` overrides per block name."""
    stepsizes = stepsizes or {}
    blocks = []
    for s in sections:
        name = s.block or "all"
        blocks.append(Block(
            _kernel_spec(s.values, stepsizes.get(name)),
            resolve_coords(s.values["coords"], target),
            s.values["inner_steps"],
            name,
        ))
    gb = GibbsBlocks(tuple(blocks))
    try:
        gb.validate(target.dim)
    except ValueError as exc:
        raise ConfigError(f"sampler {sections[0].name!r}: {exc}") from None
    return gb


# ---------------------------------------------------------------------------
# observables


def mixture_observables(Q):
    """min(z), max(lambda), min(mu) and beta, plus mu1 and mu2 for marginal histograms."""
    mu, loglam, a, logbeta = MixtureModelTarget.unpack(Q)
    z = softmax(a, axis=-1)
    return np.stack(
        [z.min(-1), np.exp(loglam.max(-1)), mu.min(-1), np.exp(logbeta), mu[..., 0], mu[..., 1]], -1
    )


MIXTURE_COLUMNS = ["min_z", "max_lambda", "min_mu", "beta", "mu1", "mu2"]
MIXTURE_REPORT = MIXTURE_COLUMNS[:4]


def observable_set(name: str, target):
    """``(observe, columns, report_columns)`` for an observable set name."""
    if name == "coordinates":
        cols = [f"x{j}" for j in range(target.dim)]
        return (lambda Q: Q), cols, cols
    if name == "mixture":
        return mixture_observables, MIXTURE_COLUMNS, MIXTURE_REPORT
    if name == "cox":
        n = target.n_cells
        cells = np.unique(np.linspace(0, n - 1, min(n, 8)).astype(int))
        cols = [f"latent{c}" for c in cells] + ["latent_mean", "sigma2", "beta"]

        def observe(Q):
            return np.concatenate(
                [Q[:, cells], Q[:, :n].mean(axis=1, keepdims=True), np.exp(Q[:, n:n + 2])], axis=1
            )

        return observe, cols, cols
    raise ConfigError(f"unknown observable set {name!r}", key="observables")


# ---------------------------------------------------------------------------
# initial ensembles


def default_center(target, tcfg: dict) -> np.ndarray:
    if isinstance(target, MixtureModelTarget):
        truth = DEFAULT_MIXTURE_TRUTH
        beta = target.alpha / float(np.mean(truth.precisions))
        return MixtureModelTarget.to_unconstrained(
            MixtureParams(truth.means, truth.precisions, truth.weights, beta))
    if isinstance(target, LogGaussianCoxTarget):
        lat = np.log((target.counts.ravel() + 0.5) / target.cell_area)
        return np.concatenate([lat, [math.log(tcfg["sigma2"]), math.log(tcfg["beta"])]])
    if isinstance(target, RingTarget):
        c = np.zeros(target.dim)
        c[0] = target.radius
        return c
    return np.zeros(target.dim)


def find_mode(target, x0, hessian_step: float = 1e-5):
    """Posterior mode by BFGS and a Cholesky factor of the Laplace covariance at it."""
    res = optimize.minimize(
        lambda x: -float(target.log_density(x)),
        np.asarray(x0, dtype=float),
        jac=lambda x: -target.gradient(x),
        method="BFGS",
        options={"gtol": 1e-8, "maxiter": 10000},
    )
    x = res.x
    n = x.size
    H = np.empty((n, n))
    for j in range(n):
        d = np.zeros(n)
        d[j] = hessian_step * max(1.0, abs(x[j]))
        H[:, j] = (target.gradient(x + d) - target.gradient(x - d)) / (2 * d[j])
    H = 0.5 * (H + H.T)
    try:
        factor = np.linalg.cholesky(np.linalg.inv(-H))
    except np.linalg.LinAlgError as exc:
        raise RuntimeError("Laplace covariance at the mode is not positive definite") from exc
    return x, factor


def initial_ensemble(cfg: RunConfig, target, seed: int | None = None) -> EnsembleState:
    run_ = cfg.run
    init = cfg.init
    seed = run_["seed"] if seed is None else seed
    center = np.asarray(init["center"], dtype=float) if init["center"] else default_center(target, cfg.target)
    scale = np.asarray(init["scale"], dtype=float)
    if scale.size == 1:
        scale = float(scale[0])
    if init["kind"] == "mode":
        center, factor = find_mode(target, center)
        return initialize(run_["walkers"], run_["groups"], target, "ball", seed, center, init["spread"] * factor)
    if init["kind"] == "positions":
        return initialize(run_["walkers"], run_["groups"], target, "positions", seed, positions=init["path"])
    return initialize(run_["walkers"], run_["groups"], target, init["kind"], seed, center, scale)


# ---------------------------------------------------------------------------
# step-size tuning


@dataclass
class TuneResult:
    stepsize: float
    acceptance: float
    curve: list = field(default_factory=list)


def _pilot_acceptance(target, kernel: KernelSpec, make_ensemble, iterations, seed, coords=None) -> float:
    ens = make_ensemble(seed)
    tr = run(ens, target, Block(kernel, coords) if coords is not None else kernel, iterations,
             observe=lambda Q: Q[:, :1], columns=["x0"])
    return float(np.mean(tr.acceptance))


def tune_stepsize(
    target,
    kernel: KernelSpec,
    band=(0.75, 0.8),
    make_ensemble=None,
    bracket=(1e-6, 10.0),
    pilot_iterations: int = 20,
    seed: int = 12345,
    max_iter: int = 40,
    coords=None,
) -> TuneResult:
    """Bisection on ``log h`` until the pilot acceptance lies in ``band``.

    Non-metropolized EQN kernels are tuned through their metropolized
    counterpart. Pilot runs use a fixed ``seed`` so the measured acceptance is
    a deterministic function of ``h``. ``make_ensemble(seed)`` creates the
    pilot ensemble (default: 8 walkers in 2 groups around the origin).
    """
    lo_band, hi_band = band
    if not 0.0 < lo_band < hi_band < 1.0:
        raise ValueError(f"band must satisfy 0 < low < high < 1, got {band}")
    if kernel.kind == "overdamped":
        raise TuningError("the overdamped kernel has no acceptance step", [])
    if kernel.kind == "eqn" and not kernel.sampler.metropolize:
        kernel = KernelSpec(kernel.sampler.with_(metropolize=True), kernel.precond, kernel.kind)
    if make_ensemble is None:
        make_ensemble = lambda s: initialize(8, 2, target, "ball", s)  # noqa: E731
    curve = []

    def acc(h):
        k = KernelSpec(kernel.sampler.with_(stepsize=h), kernel.precond, kernel.kind)
        try:
            a = _pilot_acceptance(target, k, make_ensemble, pilot_iterations, seed, coords)
        except (ArithmeticError, ValueError, np.linalg.LinAlgError):
            a = 0.0
        curve.append((h, a))
        return a

    lo, hi = bracket
    a_lo = acc(lo)
    if a_lo < lo_band:
        raise TuningError(f"acceptance below the band {band} even at h={lo:g}", curve)
    if a_lo <= hi_band:
        return TuneResult(lo, a_lo, curve)
    a_hi = acc(hi)
    if a_hi > hi_band:
        raise TuningError(f"acceptance above the band {band} over the whole bracket", curve)
    if a_hi >= lo_band:
        return TuneResult(hi, a_hi, curve)
    for _ in range(max_iter):
        mid = math.sqrt(lo * hi)
        a = acc(mid)
        if lo_band <= a <= hi_band:
            return TuneResult(mid, a, curve)
        if a > hi_band:
            lo = mid
        else:
            hi = mid
    raise TuningError(f"band {band} not reached after {max_iter} bisection steps", curve)


# ---------------------------------------------------------------------------
# presets

_BASE_RUN = {
    "iterations": 100000,
    "gradient_budget": 0,
    "seed": 0,
    "workers": 1,
    "record": "mean",
    "refresh_every": 1,
    "chunk_size": 16,
    "checkpoint_every": 0,
    "burn_in": 0.2,
    "reference": "",
}


def _cfg(run_: dict, target: dict, init: dict, samplers: list[tuple[str, str, dict]]) -> RunConfig:
    """Assemble a config through the parser so presets obey the same schema as files."""
    lines = ["[run]"] + [f"{k} = {v}" for k, v in {**_BASE_RUN, **run_}.items()]
    lines += ["[target]"] + [f"{k} = {v}" for k, v in target.items()]
    lines += ["[init]"] + [f"{k} = {v}" for k, v in init.items()]
    for name, block, vals in samplers:
        lines.append(f"[sampler {name}{'.' + block if block else ''}]")
        lines += [f"{k} = {v}" for k, v in vals.items()]
    return next(iter(parse_studies("\n".join(lines), env=None, source="<preset>").values()))


def _gaussian_conditioning() -> dict[str, RunConfig]:
    out = {}
    for kappa in (10, 100):
        out[f"kappa{kappa}"] = _cfg(
            {"name": f"gaussian_kappa{kappa}", "walkers": 32, "groups": 4, "iterations": 20000,
             "observables": "coordinates", "reference": "baoab", "chunk_size": 8},
            {"kind": "gaussian", "covariance": f"1.0, {float(kappa)}"},
            {"kind": "ball", "scale": f"1.0, {math.sqrt(kappa)}"},
            [
                ("baoab", "", {"kind": "eqn", "stepsize": 0.8, "friction": 1.0}),
                ("eqn", "", {"kind": "eqn", "stepsize": 0.08, "friction": 1.0,
                             "mode": "blended", "mu": 100.0}),
            ],
        )
    return out


# step sizes tuned with tune_stepsize to the 0.75-0.80 acceptance band (pilot seed 12345)
MIXTURE_STEPSIZE = 4.3e-4


def _mixture() -> dict[str, RunConfig]:
    h = MIXTURE_STEPSIZE
    local = {"mode": "local", "mu": 100.0, "lambda": 12.0, "weight_metric": "euclidean",
             "weight_coords": "0, 1, 2"}
    return {"mixture": _cfg(
        {"name": "mixture", "walkers": 64, "groups": 4, "observables": "mixture", "record": "walkers",
         "reference": "hmc"},
        {"kind": "mixture", "n": 485, "data_seed": 0},
        {"kind": "mode"},
        [
            ("hmc", "", {"kind": "hmc", "stepsize": h, "steps_per_iteration": 50}),
            ("langevin", "", {"kind": "eqn", "stepsize": h, "friction": 0.01, "steps_per_iteration": 50,
                              "metropolize": True}),
            ("eqn_met", "", {"kind": "eqn", "stepsize": h, "friction": 0.01, "steps_per_iteration": 5,
                             "metropolize": True, **local}),
            ("eqn", "", {"kind": "eqn", "stepsize": h, "friction": 0.01, "steps_per_iteration": 5,
                         **local}),
        ],
    )}


COX_LATENT_STEPSIZE = 0.05
COX_HYPER_STEPSIZE = 0.05


def _cox_small(grid: int = 16) -> dict[str, RunConfig]:
    hl, hh = COX_LATENT_STEPSIZE, COX_HYPER_STEPSIZE
    roster = [("hmc", "latent", {"kind": "hmc", "stepsize": hl, "steps_per_iteration": 10,
                                 "coords": "latent", "inner_steps": 5}),
              ("hmc", "hyper", {"kind": "hmc", "stepsize": hh, "coords": "hyper"})]
    for name, met, precond in (
        ("langevin_met", True, None),
        ("langevin", False, None),
        ("eqn_met", True, (7.0, 1.0)),
        ("eqn", False, (7.0, 1.0)),
    ):
        for block, h, idx in (("latent", hl, 0), ("hyper", hh, 1)):
            v = {"kind": "eqn", "stepsize": h, "friction": 1.0, "metropolize": met, "coords": block,
                 "inner_steps": 50 if block == "latent" else 1}
            if precond is not None:
                v.update({"mode": "blended", "mu": precond[idx]})
            roster.append((name, block, v))
    return {"cox_small": _cfg(
        {"name": "cox_small", "walkers": 160, "groups": 5, "observables": "cox", "reference": "hmc",
         "chunk_size": 32},
        {"kind": "cox", "grid": grid, "data_seed": 0},
        {"kind": "ball", "scale": "0.1"},
        roster,
    )}


PRESETS = {
    "gaussian_conditioning": _gaussian_conditioning,
    "mixture": _mixture,
    "cox_small": _cox_small,
}


def list_presets() -> list[str]:
    return sorted(PRESETS)


def get_preset(name: str) -> dict[str, RunConfig]:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; available presets: {', '.join(list_presets())}", key=name)
    return PRESETS[name]()


# ---------------------------------------------------------------------------
# running


@dataclass
class StudyResult:
    name: str
    report: Report | None
    traces: dict
    errors: dict
    stepsizes: dict
    paths: dict = field(default_factory=dict)


def iterations_for(cfg: RunConfig, kernel: GibbsBlocks) -> int:
    budget = cfg.run["gradient_budget"]
    if budget > 0:
        return max(1, int(round(budget / kernel.grads_per_iteration)))
    return cfg.run["iterations"]


def study_lineage(cfg: RunConfig) -> str:
    """Hash shared by all traces of one study; traces with different hashes are not compared."""
    return stable_hash({"study": cfg.name, "target": cfg.target, "seed": cfg.run["seed"]})


def tuned_stepsizes(cfg: RunConfig, target, sections: list[SamplerSection]) -> dict:
    """Tune the blocks that ask for it; returns ``{block: stepsize}`` for those only."""
    steps = {}
    for s in sections:
        if s.values["tune"]:
            res = tune_stepsize(
                target, _kernel_spec(s.values), tuple(s.values["band"]),
                make_ensemble=lambda seed: initial_ensemble(cfg, target, seed),
                coords=resolve_coords(s.values["coords"], target),
            )
            steps[s.block or "all"] = res.stepsize
    return steps


def run_study(cfg: RunConfig, output_dir=None, workers: int | None = None, log=None) -> StudyResult:
    """Run every roster entry of one study from the same seed and summarize."""
    target = build_target(cfg.target)
    observe, columns, report_cols = observable_set(cfg.run["observables"], target)
    workers = cfg.run["workers"] if workers is None else workers
    out = Path(output_dir) if output_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.ini").write_text(cfg.to_text())
    lineage = study_lineage(cfg)
    ens0 = initial_ensemble(cfg, target)
    traces, errors, stepsizes = {}, {}, {}
    for name, sections in cfg.roster().items():
        try:
            steps = tuned_stepsizes(cfg, target, sections)
            stepsizes[name] = steps or {s.block or "all": s.values["stepsize"] for s in sections}
            kernel = build_kernel(sections, target, steps)
            ens = EnsembleState(ens0.Q.copy(), ens0.P.copy(), ens0.n_groups, copy.deepcopy(ens0.rngs))
            n_it = iterations_for(cfg, kernel)
            if log:
                log(f"{cfg.name}/{name}: {n_it} iterations")
            tr = run(
                ens, target, kernel, n_it, observe, columns, workers, cfg.run["record"],
                cfg.run["refresh_every"], cfg.run["chunk_size"],
                metadata={"sampler": name, "lineage": lineage, "seed": cfg.run["seed"],
                          "target": target.describe()},
                checkpoint_path=(out / f"{name}.ckpt.npz") if out is not None and cfg.run["checkpoint_every"] else None,
                checkpoint_every=cfg.run["checkpoint_every"],
            )
            traces[name] = tr
            if out is not None:
                save_trace(tr, out / f"{name}.trace.npz")
        except Exception as exc:  # a crashing sampler must not stop the roster
            errors[name] = f"{type(exc).__name__}: {exc}"
            if out is not None:
                (out / f"{name}.error.txt").write_text(traceback.format_exc())
            if log:
                log(f"{cfg.name}/{name}: failed ({errors[name]})")
    report = None
    if traces:
        ref = cfg.run["reference"] if cfg.run["reference"] in traces else next(iter(traces))
        report = summarize(traces, report_cols, reference=ref, burn_in=cfg.run["burn_in"])
    result = StudyResult(cfg.name, report, traces, errors, stepsizes)
    if out is not None:
        result.paths = _write_outputs(result, cfg, out)
    return result


def _write_outputs(result: StudyResult, cfg: RunConfig, out: Path) -> dict:
    paths = {}
    if result.report is not None:
        txt, js = result.report.save(out, "report")
        paths["report"] = txt
        paths["report_json"] = js
        comp = out / "comparison.csv"
        with comp.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sampler", "observable", "iat_iterations", "iat_gradients", "status", "mean", "stderr",
                        "acceptance", "cost", "efficiency", "biased"])
            for r in result.report.rows:
                for c in result.report.columns:
                    w.writerow([r.sampler, c, r.iat[c], r.iat_gradient_units[c], r.iat_status[c], r.mean[c],
                                r.stderr[c], r.acceptance, r.cost, r.efficiency, r.biased])
        paths["comparison"] = comp
    series = out / "series.csv"
    acf = out / "autocorrelation.csv"
    with series.open("w", newline="") as fs, acf.open("w", newline="") as fa:
        ws, wa = csv.writer(fs), csv.writer(fa)
        ws.writerow(["sampler", "iteration", *next(iter(result.traces.values())).columns]
                    if result.traces else ["sampler", "iteration"])
        wa.writerow(["sampler", "observable", "lag", "autocorrelation"])
        for name, tr in result.traces.items():
            m = tr.ensemble_mean()
            for t in range(m.shape[0]):
                ws.writerow([name, t + 1, *m[t]])
            burn = int(cfg.run["burn_in"] * m.shape[0])
            for j, c in enumerate(tr.columns):
                s = m[burn:, j]
                if s.size < 2 or np.ptp(s) == 0:
                    continue
                rho = autocorrelation(s)
                r = iat_empirical(s) if s.size >= 100 else None
                max_lag = min(rho.size, int(10 * r.value) + 1 if r is not None and np.isfinite(r.value) else 200)
                for lag in range(max_lag):
                    wa.writerow([name, c, lag, rho[lag]])
    paths["series"] = series
    paths["autocorrelation"] = acf
    if cfg.run["observables"] == "mixture":
        paths["free_energy"] = _mu_free_energy(result, cfg, out / "mu_free_energy.csv")
    summary = {
        "study": result.name,
        "errors": result.errors,
        "stepsizes": result.stepsizes,
        "wall_time": {n: tr.wall_time for n, tr in result.traces.items()},
        "iterations": {n: tr.n_iterations for n, tr in result.traces.items()},
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    paths["summary"] = out / "summary.json"
    return paths


def _mu_free_energy(result: StudyResult, cfg: RunConfig, path: Path, bins: int = 60) -> Path:
    """Histogram of (mu1, mu2) over walkers and iterations after burn-in, with ``-log`` density."""
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sampler", "mu1", "mu2", "count", "free_energy"])
        for name, tr in result.traces.items():
            burn = int(cfg.run["burn_in"] * tr.n_iterations)
            i1, i2 = tr.columns.index("mu1"), tr.columns.index("mu2")
            a = tr.values[burn:, :, i1].ravel()
            b = tr.values[burn:, :, i2].ravel()
            if a.size == 0:
                continue
            H, e1, e2 = np.histogram2d(a, b, bins=bins)
            dens = H / H.sum()
            c1 = 0.5 * (e1[1:] + e1[:-1])
            c2 = 0.5 * (e2[1:] + e2[:-1])
            for i in range(bins):
                for j in range(bins):
                    fe = -math.log(dens[i, j]) if H[i, j] > 0 else math.inf
                    w.writerow([name, c1[i], c2[j], int(H[i, j]), fe])
    return path


def run_preset(preset, output_dir, workers: int | None = None, log=None, **overrides) -> dict[str, StudyResult]:
    """Run a preset (name or ``{study: RunConfig}``) into ``output_dir``.

    ``overrides`` set ``[run]`` keys of every study (for example
    ``iterations=200``). Returns the per-study results.
    """
    studies = get_preset(preset) if isinstance(preset, str) else dict(preset)
    if overrides:
        studies = {k: v.with_run(**overrides) for k, v in studies.items()}
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "preset.ini").write_text(dump_studies(studies))
    results = {}
    t0 = time.perf_counter()
    for name, cfg in studies.items():
        sub = out / name if len(studies) > 1 else out
        results[name] = run_study(cfg, sub, workers, log)
    if log:
        log(f"preset finished in {time.perf_counter() - t0:.1f}s")
    return results
