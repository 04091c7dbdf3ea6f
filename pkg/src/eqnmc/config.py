"""Run configuration files.

A configuration is sectioned ``key = value`` text read with
:mod:`configparser`::

    [run]
    iterations = 2000
    walkers = 64
    groups = 4

    [target]
    kind = mixture

    [init]
    kind = mode

    [sampler eqn]
    kind = eqn
    stepsize = 4.3e-4
    mode = local

A sampler with Gibbs blocks uses one section per block, ``[sampler NAME.BLOCK]``.
Files holding several studies suffix every section with ``@STUDY``.
Environment variables ``EQN_<SECTION>__<KEY>`` override values; the section
part is the section name upper-cased with every non-alphanumeric character
replaced by ``_`` (``EQN_SAMPLER_EQN__STEPSIZE``), and ``EQN_SAMPLER__<KEY>``
applies to every sampler section.
"""

from __future__ import annotations

import configparser
import os
import re
from dataclasses import dataclass, field
from pathlib import Path

from .ensemble import CHUNK_SIZE, KERNELS
from .preconditioners import MODES, WEIGHT_METRICS
from .samplers import DIVERGENCE_MODES

__all__ = [
    "ConfigError",
    "RunConfig",
    "SamplerSection",
    "ENV_PREFIX",
    "parse_config",
    "load_config",
    "parse_studies",
    "dump_studies",
    "RUN_KEYS",
    "TARGET_KEYS",
    "INIT_KEYS",
    "SAMPLER_KEYS",
]

ENV_PREFIX = "EQN_"


class ConfigError(ValueError):
    """Invalid configuration; ``key`` and ``line`` locate the problem when known."""

    def __init__(self, message: str, key: str | None = None, line: int | None = None):
        where = f"line {line}: " if line is not None else ""
        super().__init__(where + message)
        self.key = key
        self.line = line


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _floats(text: str) -> tuple[float, ...]:
    text = text.strip()
    return tuple(float(x) for x in re.split(r"[,\s]+", text) if x) if text else ()


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in _floats(text))


def _choice(options):
    def parse(text):
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return text

    return parse


REQUIRED = object()

# key -> (parser, default); REQUIRED marks mandatory keys
RUN_KEYS = {
    "name": (str, "run"),
    "iterations": (int, 1000),
    "gradient_budget": (int, 0),
    "seed": (int, 0),
    "walkers": (int, 32),
    "groups": (int, 2),
    "workers": (int, 1),
    "record": (_choice(("mean", "walkers")), "mean"),
    "refresh_every": (int, 1),
    "chunk_size": (int, CHUNK_SIZE),
    "checkpoint_every": (int, 0),
    "burn_in": (float, 0.2),
    "observables": (_choice(("coordinates", "mixture", "cox")), "coordinates"),
    "reference": (str, ""),
}

TARGET_KEYS = {
    "kind": (_choice(("gaussian", "ring", "mixture", "cox")), REQUIRED),
    # gaussian
    "covariance": (_floats, ()),
    # ring
    "radius": (float, 1.0),
    "width": (float, 0.1),
    "dim": (int, 2),
    # mixture and cox data
    "data": (str, ""),
    "data_seed": (int, 0),
    "n": (int, 485),
    "alpha": (float, 2.0),
    "g": (float, 0.2),
    "grid": (int, 16),
    "sigma2": (float, 1.91),
    "beta": (float, 1.0 / 33.0),
}

INIT_KEYS = {
    "kind": (_choice(("ball", "prior", "positions", "mode")), "ball"),
    "center": (_floats, ()),
    "scale": (_floats, (1.0,)),
    "spread": (float, 1.0),
    "path": (str, ""),
}

SAMPLER_KEYS = {
    "kind": (_choice(KERNELS), "eqn"),
    "stepsize": (float, REQUIRED),
    "friction": (float, 1.0),
    "steps_per_iteration": (int, 1),
    "metropolize": (_bool, False),
    "divergence_mode": (_choice(DIVERGENCE_MODES), "analytic"),
    "implicit_tol": (float, 1e-10),
    "implicit_max_iter": (int, 50),
    "implicit_damping": (float, 1.0),
    "noisy_eps": (float, 1e-4),
    "noisy_samples": (int, 1),
    "compact_divergence": (_bool, False),
    "mode": (_choice(MODES), "identity"),
    "mu": (float, 1.0),
    "lambda": (float, 0.0),
    "weight_metric": (_choice(WEIGHT_METRICS), "inverse_covariance"),
    "weight_coords": (_ints, ()),
    "coords": (str, "all"),
    "inner_steps": (int, 1),
    "tune": (_bool, False),
    "band": (_floats, (0.75, 0.8)),
}

_FIXED = {"run": RUN_KEYS, "target": TARGET_KEYS, "init": INIT_KEYS}


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    return str(value)


@dataclass
class SamplerSection:
    """One sampler block: ``name`` is the roster entry, ``block`` the Gibbs block ('' for a single block)."""

    name: str
    block: str
    values: dict

    @property
    def section(self) -> str:
        return f"sampler {self.name}" + (f".{self.block}" if self.block else "")


@dataclass
class RunConfig:
    run: dict
    target: dict
    init: dict
    samplers: list[SamplerSection] = field(default_factory=list)

    @property
    def name(self) -> str:
        return self.run["name"]

    def roster(self) -> dict[str, list[SamplerSection]]:
        """Sampler name -> its block sections, in file order."""
        out: dict[str, list[SamplerSection]] = {}
        for s in self.samplers:
            out.setdefault(s.name, []).append(s)
        return out

    def sections(self, suffix: str = "") -> list[tuple[str, dict]]:
        defaults = {"run": RUN_KEYS, "target": TARGET_KEYS, "init": INIT_KEYS}
        out = []
        for sec in ("run", "target", "init"):
            out.append((sec + suffix, _nondefault(getattr(self, sec), defaults[sec], keep=("kind", "name"))))
        for s in self.samplers:
            out.append((s.section + suffix, _nondefault(s.values, SAMPLER_KEYS, keep=("kind", "stepsize"))))
        return out

    def to_text(self, suffix: str = "") -> str:
        lines = []
        for sec, vals in self.sections(suffix):
            lines.append(f"[{sec}]")
            lines += [f"{k} = {_format(v)}" for k, v in vals.items()]
            lines.append("")
        return "\n".join(lines)

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_text())
        return path

    def with_run(self, **changes) -> "RunConfig":
        run = dict(self.run)
        for k, v in changes.items():
            if k not in RUN_KEYS:
                raise ConfigError(f"unknown key {k!r} in [run]", key=k)
            run[k] = v
        out = RunConfig(run, dict(self.target), dict(self.init),
                        [SamplerSection(s.name, s.block, dict(s.values)) for s in self.samplers])
        validate(out)
        return out

    def with_target(self, **changes) -> "RunConfig":
        out = self.with_run()
        for k, v in changes.items():
            if k not in TARGET_KEYS:
                raise ConfigError(f"unknown key {k!r} in [target]", key=k)
            out.target[k] = v
        validate(out)
        return out

    def with_samplers(self, names=None, **changes) -> "RunConfig":
        """Keep only roster entries in ``names`` (all when None) and set sampler keys on every block."""
        out = self.with_run()
        if names is not None:
            missing = set(names) - set(out.roster())
            if missing:
                raise ConfigError(f"unknown samplers {sorted(missing)}; available: {', '.join(out.roster())}")
            out.samplers = [s for s in out.samplers if s.name in names]
            if out.run["reference"] not in names:
                out.run["reference"] = ""  # first remaining entry
        for k, v in changes.items():
            if k not in SAMPLER_KEYS:
                raise ConfigError(f"unknown sampler key {k!r}", key=k)
            for s in out.samplers:
                s.values[k] = v
        validate(out)
        return out


def _nondefault(values: dict, schema: dict, keep=()) -> dict:
    return {k: v for k, v in values.items() if k in keep or schema[k][1] is REQUIRED or v != schema[k][1]}


def _line_index(text: str) -> dict:
    """Map ``(section, key)`` and ``(section, None)`` to 1-based line numbers."""
    index = {}
    section = None
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line[0] in "#;":
            continue
        m = re.fullmatch(r"\[(.+)\]", line)
        if m:
            section = m.group(1).strip()
            index[(section, None)] = n
            continue
        if section is not None:
            key = re.split(r"[=:]", line, maxsplit=1)[0].strip().lower()
            index.setdefault((section, key), n)
    return index


def _env_name(section: str) -> str:
    return re.sub(r"[^A-Z0-9]", "_", section.upper())


def _apply_env(parser: configparser.ConfigParser, env) -> None:
    if env is None:
        return
    for var, value in env.items():
        if not var.startswith(ENV_PREFIX) or "__" not in var:
            continue
        sec_part, key = var[len(ENV_PREFIX):].rsplit("__", 1)
        key = key.lower()
        hits = [s for s in parser.sections()
                if _env_name(s) == sec_part or (sec_part == "SAMPLER" and s.startswith("sampler "))]
        if not hits and sec_part in ("RUN", "TARGET", "INIT"):
            parser.add_section(sec_part.lower())
            hits = [sec_part.lower()]
        for s in hits:
            parser.set(s, key, value)


def _typed(section: str, raw: dict, schema: dict, index: dict) -> dict:
    out = {}
    for key, text in raw.items():
        line = index.get((section, key), index.get((section, None)))
        if key not in schema:
            raise ConfigError(f"unknown key {key!r} in [{section}]", key=key, line=line)
        parser = schema[key][0]
        try:
            out[key] = parser(text)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r} in [{section}]: {exc}", key=key, line=line) from None
    for key, (_, default) in schema.items():
        if key not in out:
            if default is REQUIRED:
                raise ConfigError(f"missing required key {key!r} in [{section}]", key=key,
                                  line=index.get((section, None)))
            out[key] = default
    return out


def _build(parser: configparser.ConfigParser, names: list[str], index: dict, suffix: str) -> RunConfig:
    fixed = {}
    samplers = []
    for sec in names:
        base = sec[: -len(suffix)] if suffix else sec
        raw = dict(parser.items(sec))
        if base in _FIXED:
            fixed[base] = _typed(sec, raw, _FIXED[base], index)
        elif base.startswith("sampler "):
            label = base[len("sampler "):].strip()
            name, _, block = label.partition(".")
            if not name:
                raise ConfigError(f"sampler section [{sec}] needs a name", line=index.get((sec, None)))
            samplers.append(SamplerSection(name, block, _typed(sec, raw, SAMPLER_KEYS, index)))
        else:
            raise ConfigError(f"unknown section [{sec}]", key=sec, line=index.get((sec, None)))
    if "target" not in fixed:
        raise ConfigError("missing required section [target]", key="target")
    for sec in ("run", "init"):
        if sec not in fixed:
            fixed[sec] = _typed(sec, {}, _FIXED[sec], index)
    if not samplers:
        raise ConfigError("at least one [sampler NAME] section is required", key="sampler")
    cfg = RunConfig(fixed["run"], fixed["target"], fixed["init"], samplers)
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    run = cfg.run
    for key in ("iterations", "walkers", "groups", "workers", "refresh_every", "chunk_size"):
        if run[key] < 1:
            raise ConfigError(f"[run] {key} must be at least 1", key=key)
    if run["groups"] < 2 or run["walkers"] % run["groups"]:
        raise ConfigError(
            f"[run] {run['walkers']} walkers cannot form {run['groups']} equal groups (need at least 2)",
            key="groups",
        )
    if not 0.0 <= run["burn_in"] < 1.0:
        raise ConfigError("[run] burn_in must lie in [0, 1)", key="burn_in")
    for name, blocks in cfg.roster().items():
        if len(blocks) > 1 and any(not b.block for b in blocks):
            raise ConfigError(f"sampler {name!r} mixes a whole-target section with block sections", key=name)
        for b in blocks:
            v = b.values
            if v["stepsize"] <= 0:
                raise ConfigError(f"[{b.section}] stepsize must be positive", key="stepsize")
            band = v["band"]
            if len(band) != 2 or not 0.0 < band[0] < band[1] < 1.0:
                raise ConfigError(f"[{b.section}] band must be two increasing numbers in (0, 1)", key="band")
    if run["reference"] and run["reference"] not in cfg.roster():
        raise ConfigError(f"[run] reference {run['reference']!r} is not a sampler", key="reference")


def _read(text: str, source: str):
    parser = configparser.ConfigParser(interpolation=None, default_section="__defaults__")
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        line = getattr(exc, "lineno", None)
        raise ConfigError(f"{source}: {exc.message if hasattr(exc, 'message') else exc}", line=line) from None
    return parser


def parse_studies(text: str, env=None, source: str = "<config>") -> dict[str, RunConfig]:
    """Parse text holding one or more studies (``@STUDY`` section suffixes)."""
    parser = _read(text, source)
    _apply_env(parser, env)
    index = _line_index(text)
    groups: dict[str, list[str]] = {}
    for sec in parser.sections():
        _, at, study = sec.partition("@")
        groups.setdefault(study if at else "", []).append(sec)
    if "" in groups and len(groups) > 1:
        raise ConfigError("either every section carries an @study suffix or none does")
    out = {}
    for study, names in groups.items():
        cfg = _build(parser, names, index, f"@{study}" if study else "")
        out[study or cfg.name] = cfg
    return out


def parse_config(text: str, env=None, source: str = "<config>") -> RunConfig:
    studies = parse_studies(text, env, source)
    if len(studies) != 1:
        raise ConfigError(f"expected a single study, found {', '.join(studies)}")
    return next(iter(studies.values()))


def load_config(path, env=os.environ) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, env, str(path))


def dump_studies(studies: dict[str, RunConfig]) -> str:
    if len(studies) == 1:
        return next(iter(studies.values())).to_text()
    return "\n".join(cfg.to_text(f"@{name}") for name, cfg in studies.items())
