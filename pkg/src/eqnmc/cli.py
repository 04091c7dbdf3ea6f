"""Command-line interface: ``eqnmc sample | diagnose | experiment | checkpoint``.

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, load_config, parse_studies
from .diagnostics import TraceError, load_trace, save_trace, summarize
from .ensemble import load_checkpoint, run, save_checkpoint
from .experiments import (
    TuningError,
    build_kernel,
    build_target,
    get_preset,
    initial_ensemble,
    iterations_for,
    list_presets,
    observable_set,
    run_preset,
    study_lineage,
    tuned_stepsizes,
)
from .preconditioners import ConfigurationError

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def _err(msg: str) -> None:
    print(f"eqnmc: {msg}", file=sys.stderr)


def _add_overrides(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, help="random seed")
    p.add_argument("--workers", type=int, help="worker threads per group update")
    p.add_argument("--walkers", type=int, help="number of walkers")
    p.add_argument("--iterations", type=int, help="iterations per sampler")
    p.add_argument("--grid", type=int, help="grid side of the Cox target")
    p.add_argument("--metropolize", dest="metropolize", action="store_true", default=None,
                   help="accept/reject EQN trajectories")
    p.add_argument("--no-metropolize", dest="metropolize", action="store_false")
    p.add_argument("--divergence", choices=("analytic", "noisy", "omitted"), help="divergence term handling")
    p.add_argument("--output", "-o", type=Path, help="output directory")


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    run_changes = {k: getattr(args, k) for k in ("seed", "workers", "walkers", "iterations")
                   if getattr(args, k) is not None}
    if run_changes:
        cfg = cfg.with_run(**run_changes)
    if args.grid is not None:
        if cfg.target["kind"] != "cox":
            raise ConfigError("--grid applies to Cox targets only", key="grid")
        cfg = cfg.with_target(grid=args.grid)
    sampler_changes = {}
    if args.metropolize is not None:
        sampler_changes["metropolize"] = args.metropolize
    if args.divergence is not None:
        sampler_changes["divergence_mode"] = args.divergence
    if sampler_changes:
        cfg = cfg.with_samplers(**sampler_changes)
    return cfg


# ---------------------------------------------------------------------------
# sample


def cmd_sample(args) -> int:
    cfg = _apply_overrides(load_config(args.config, env=os.environ), args)
    roster = cfg.roster()
    name = args.sampler
    if name is None:
        if len(roster) != 1:
            raise ConfigError(f"config defines samplers {', '.join(roster)}; choose one with --sampler")
        name = next(iter(roster))
    if name not in roster:
        raise ConfigError(f"no sampler {name!r} in config; available: {', '.join(roster)}", key=name)
    out = args.output or Path("eqnmc-out")
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(cfg.to_text())

    target = build_target(cfg.target)
    sections = roster[name]
    steps = tuned_stepsizes(cfg, target, sections)
    for block, h in steps.items():
        print(f"{name}/{block}: tuned stepsize {h:.6g}")
    kernel = build_kernel(sections, target, steps)
    observe, columns, _ = observable_set(cfg.run["observables"], target)
    meta = {
        "sampler": name,
        "seed": cfg.run["seed"],
        "lineage": study_lineage(cfg),
        "target": target.describe(),
    }
    trace_bin = out / f"{name}.trace.npz"
    trace_txt = out / f"{name}.trace.txt"
    ckpt = out / f"{name}.ckpt.npz"
    total = iterations_for(cfg, kernel)
    if args.resume is not None:
        ens = load_checkpoint(args.resume)
        if ens.n_walkers != cfg.run["walkers"] or ens.dim != target.dim:
            raise ConfigError(f"checkpoint {args.resume} does not match the configured ensemble")
        done = ens.iteration
        prior = load_trace(trace_bin) if done else None
        if prior is not None and prior.n_iterations != done:
            raise TraceError(f"{trace_bin} holds {prior.n_iterations} iterations, checkpoint is at {done}")
    else:
        ens = initial_ensemble(cfg, target)
        done, prior = 0, None
    every = cfg.run["checkpoint_every"] or max(total - done, 1)
    trace = prior
    try:
        while ens.iteration < total:
            seg = min(every - ens.iteration % every, total - ens.iteration)
            part = run(ens, target, kernel, seg, observe, columns, cfg.run["workers"], cfg.run["record"],
                       cfg.run["refresh_every"], cfg.run["chunk_size"], metadata=meta, checkpoint_path=ckpt)
            if trace is None:
                trace = part
            else:
                failures = trace.metadata["failures"] + part.metadata["failures"]
                trace = trace.concatenate(part)
                trace.metadata["failures"] = failures
            save_trace(trace, trace_bin)
    except Exception as exc:
        _err(f"run failed at iteration {ens.iteration}: {type(exc).__name__}: {exc}; "
             f"checkpoint {ckpt} holds the last consistent state")
        return EXIT_RUNTIME
    if trace is None:
        raise ConfigError(f"nothing to do: checkpoint is already at iteration {ens.iteration} of {total}")
    save_trace(trace, trace_txt)
    save_checkpoint(ens, ckpt)
    acc = float(np.mean(trace.acceptance))
    print(f"{name}: {trace.n_iterations} iterations, acceptance {acc:.3f}, "
          f"failures {trace.metadata['failures']}; traces in {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# diagnose


def cmd_diagnose(args) -> int:
    traces = {}
    for path in args.traces:
        try:
            tr = load_trace(path)
        except TraceError as exc:
            _err(str(exc))
            return EXIT_RUNTIME
        name = str(tr.metadata.get("sampler", Path(path).name.split(".")[0]))
        if name in traces:
            name = f"{name}:{Path(path).stem}"
        traces[name] = tr
    hashes = {str(t.metadata.get("lineage", "")) for t in traces.values()}
    if len(hashes) > 1:
        _err(f"traces come from different configurations (lineage hashes {', '.join(sorted(hashes))})")
        return EXIT_RUNTIME
    cols = args.observables.split(",") if args.observables else None
    report = summarize(traces, cols, reference=args.reference, burn_in=args.burn_in)
    out = args.output or Path(args.traces[0]).parent
    txt, js = report.save(out, args.stem)
    print(report.format_table())
    print(f"report written to {txt} and {js}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# experiment


def cmd_experiment(args) -> int:
    if args.config is not None:
        try:
            text = args.config.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read {args.config}: {exc.strerror}") from None
        studies = parse_studies(text, env=os.environ, source=str(args.config))
        label = args.config.stem
    elif args.preset is None:
        raise ConfigError(f"name a preset or pass --config; available presets: {', '.join(list_presets())}")
    else:
        studies = get_preset(args.preset)
        label = args.preset
    studies = {k: _apply_overrides(v, args) for k, v in studies.items()}
    if args.samplers:
        studies = {k: v.with_samplers(args.samplers.split(",")) for k, v in studies.items()}
    out = args.output or Path(f"eqnmc-{label}")
    results = run_preset(studies, out, log=lambda m: print(m, flush=True))
    failed = False
    for name, res in results.items():
        print(f"== {name}")
        if res.report is not None:
            print(res.report.format_table())
        for sampler, msg in res.errors.items():
            failed = True
            print(f"{sampler}: FAILED ({msg})")
    print(f"outputs in {out}")
    return EXIT_RUNTIME if failed else EXIT_OK


# ---------------------------------------------------------------------------
# checkpoint


def cmd_checkpoint(args) -> int:
    try:
        ens = load_checkpoint(args.path)
    except (OSError, ValueError, KeyError) as exc:
        _err(f"{args.path}: cannot read checkpoint ({exc})")
        return EXIT_RUNTIME
    if args.action == "show":
        print(f"iteration {ens.iteration}")
        print(f"walkers {ens.n_walkers} in {ens.n_groups} groups of {ens.group_size}")
        print(f"dimension {ens.dim}")
        print(f"gradient caches {sorted(ens.grads)}")
    else:
        if args.output is None:
            raise ConfigError("checkpoint positions needs --output FILE.npy")
        np.save(args.output, ens.Q)
        print(f"positions written to {args.output}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="eqnmc", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sample", help="run one sampler from a config file")
    p.add_argument("--config", "-c", type=Path, required=True)
    p.add_argument("--sampler", help="roster entry to run (required when the config has several)")
    p.add_argument("--resume", type=Path, help="continue from a checkpoint file")
    _add_overrides(p)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("diagnose", help="autocorrelation report for trace files")
    p.add_argument("traces", nargs="+", type=Path)
    p.add_argument("--observables", help="comma-separated columns (default: all)")
    p.add_argument("--reference", help="sampler used as efficiency reference")
    p.add_argument("--burn-in", type=float, default=0.0, help="fraction of each series to discard")
    p.add_argument("--output", "-o", type=Path)
    p.add_argument("--stem", default="report")
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("experiment", help="run a preset or a preset file")
    p.add_argument("preset", nargs="?", help=f"one of: {', '.join(list_presets())}")
    p.add_argument("--config", "-c", type=Path, help="preset file instead of a built-in preset")
    p.add_argument("--samplers", help="comma-separated subset of the roster")
    _add_overrides(p)
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("checkpoint", help="inspect a checkpoint or export its positions")
    p.add_argument("action", choices=("show", "positions"))
    p.add_argument("path", type=Path)
    p.add_argument("--output", "-o", type=Path)
    p.set_defaults(func=cmd_checkpoint)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ConfigurationError) as exc:
        _err(f"configuration error: {exc}")
        return EXIT_CONFIG
    except TraceError as exc:
        _err(str(exc))
        return EXIT_RUNTIME
    except TuningError as exc:
        _err(f"step-size tuning failed: {exc}")
        return EXIT_RUNTIME
    except Exception as exc:  # anything else is a runtime failure
        _err(f"{type(exc).__name__}: {exc}")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
