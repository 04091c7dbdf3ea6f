"""Autocorrelation times, traces and comparison reports."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "IATResult",
    "TraceError",
    "LineageError",
    "autocorrelation",
    "iat_empirical",
    "iat_analytic_gaussian",
    "mean_with_error",
    "stable_hash",
    "ChainTrace",
    "save_trace",
    "load_trace",
    "SamplerRow",
    "Report",
    "summarize",
]

TRACE_MAGIC = "# eqnmc-trace v1"


class TraceError(ValueError):
    """A trace file is missing, unreadable or malformed."""


class LineageError(ValueError):
    """Traces that do not describe the same experiment were mixed."""


@dataclass
class IATResult:
    """Integrated autocorrelation time.

    ``status`` is ``"ok"``, ``"unconverged"`` (series too short for a
    self-consistent window; ``tau`` is NaN and ``bound`` holds the sum at the
    largest window tried, a lower-bound-like estimate) or ``"undefined"``
    (zero variance).
    """

    tau: float
    sigma: float
    window: int
    status: str = "ok"
    bound: float = math.nan

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    @property
    def value(self) -> float:
        """``tau`` when converged, otherwise the window bound."""
        return self.tau if self.ok else self.bound


def autocorrelation(series) -> np.ndarray:
    """Normalised autocorrelation function by FFT."""
    x = np.asarray(series, dtype=float)
    n = x.size
    x = x - x.mean()
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(x, size)
    acov = np.fft.irfft(f * np.conj(f), size)[:n]
    if acov[0] <= 0:
        return np.full(n, np.nan)
    return acov / acov[0]


def iat_empirical(series, c: float = 5.0, min_length: int = 100, min_ratio: float = 20.0) -> IATResult:
    """Self-consistent window estimate of the integrated autocorrelation time.

    The window ``M`` is the smallest lag with ``M >= c * tau(M)`` and
    ``tau(M) > 0``, where ``tau(M) = 1 + 2 sum_{t=1}^{M} rho(t)``. The result is unconverged when no
    such window exists or the series is shorter than ``min_ratio * tau``.
    """
    x = np.asarray(series, dtype=float).ravel()
    if x.size < min_length:
        raise ValueError(f"series of length {x.size} is shorter than {min_length}")
    if not np.all(np.isfinite(x)):
        raise ValueError("series contains non-finite values")
    if np.ptp(x) == 0.0:
        return IATResult(math.nan, math.nan, 0, "undefined")
    rho = autocorrelation(x)
    taus = 2.0 * np.cumsum(rho) - 1.0
    n = x.size
    # anticorrelated chains can push tau(M) below zero at small lags; a variance ratio cannot be
    ok = (np.arange(n) >= c * taus) & (taus > 0)
    hits = np.flatnonzero(ok[1:]) + 1
    if hits.size == 0:
        return IATResult(math.nan, math.nan, n - 1, "unconverged", float(np.max(taus)))
    M = int(hits[0])
    tau = float(taus[M])
    sigma = tau * math.sqrt(2.0 * (2 * M + 1) / n)
    if n < min_ratio * tau:
        return IATResult(math.nan, sigma, M, "unconverged", tau)
    return IATResult(tau, sigma, M, "ok", tau)


def iat_analytic_gaussian(M, v, h: float) -> float:
    """``2 v^T M^2 v / (h v^T M v) - 1`` for overdamped Langevin on ``N(0, M)``.

    Requires ``h < 2 / lambda_max(M^{-1})``, the linear stability bound of
    the Euler-Maruyama recursion.
    """
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.shape[0] != M.shape[1]:
        M = np.diag(M.ravel())
    v = np.asarray(v, dtype=float)
    lam_max_prec = 1.0 / np.min(np.linalg.eigvalsh(M))
    bound = 2.0 / lam_max_prec
    if not 0 < h < bound:
        raise ValueError(f"stepsize {h} violates the stability bound h < 2/lambda_max(M^-1) = {bound:.6g}")
    Mv = M @ v
    return float(2.0 * (Mv @ Mv) / (h * (v @ Mv)) - 1.0)


def mean_with_error(series, tau: float | None = None):
    """Mean and IAT-corrected standard error ``sqrt(var * tau / T)``."""
    x = np.asarray(series, dtype=float).ravel()
    if tau is None:
        r = iat_empirical(x)
        tau = r.value
    return float(x.mean()), float(math.sqrt(x.var() * max(tau, 1.0) / x.size))


def stable_hash(obj) -> str:
    """Short SHA-256 of a JSON-serialisable object with sorted keys."""
    text = json.dumps(obj, sort_keys=True, default=str)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


@dataclass
class ChainTrace:
    """Observable values per iteration and walker.

    ``values`` has shape ``(T, W, d)`` where ``W`` is the number of walkers
    recorded (1 when only the ensemble mean is kept). ``acceptance`` holds the
    mean acceptance of each iteration. ``wall_time`` is informational and is
    not written to disk, so reruns produce identical files.
    """

    values: np.ndarray
    columns: list[str]
    acceptance: np.ndarray
    metadata: dict = field(default_factory=dict)
    wall_time: float = field(default=math.nan, compare=False)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim == 2:
            self.values = self.values[:, None, :]
        if self.values.ndim != 3 or self.values.shape[0] < 1:
            raise ValueError("trace values must have shape (T, W, d) with T >= 1")
        if len(self.columns) != self.values.shape[2]:
            raise ValueError(f"{len(self.columns)} column labels for {self.values.shape[2]} observables")
        self.columns = [str(c) for c in self.columns]
        self.acceptance = np.asarray(self.acceptance, dtype=float).reshape(-1)
        if self.acceptance.size != self.values.shape[0]:
            raise ValueError("acceptance must have one entry per iteration")

    @property
    def n_iterations(self) -> int:
        return self.values.shape[0]

    def ensemble_mean(self) -> np.ndarray:
        """``(T, d)`` walker-averaged series."""
        return self.values.mean(axis=1)

    def column(self, name: str) -> np.ndarray:
        return self.ensemble_mean()[:, self.columns.index(name)]

    def concatenate(self, other: "ChainTrace") -> "ChainTrace":
        if other.columns != self.columns:
            raise ValueError("column mismatch")
        return ChainTrace(
            np.concatenate([self.values, other.values]),
            self.columns,
            np.concatenate([self.acceptance, other.acceptance]),
            dict(self.metadata),
            self.wall_time + other.wall_time,
        )

    def equals(self, other: "ChainTrace") -> bool:
        return (
            self.columns == other.columns
            and np.array_equal(self.values, other.values)
            and np.array_equal(self.acceptance, other.acceptance)
            and self.metadata.get("config_hash") == other.metadata.get("config_hash")
        )


def _save_text(trace: ChainTrace, path: Path):
    T, W, d = trace.values.shape
    header = [
        TRACE_MAGIC,
        "# metadata " + json.dumps(trace.metadata, sort_keys=True, default=str),
        f"# shape {T} {W} {d}",
        "\t".join(["iteration", "walker", *trace.columns, "acceptance"]),
    ]
    it = np.repeat(np.arange(T), W)
    wk = np.tile(np.arange(W), T)
    acc = np.repeat(trace.acceptance, W)
    rows = np.column_stack([it, wk, trace.values.reshape(T * W, d), acc])
    with open(path, "w") as fh:
        fh.write("\n".join(header) + "\n")
        np.savetxt(fh, rows, delimiter="\t", fmt=["%d", "%d"] + ["%.17g"] * (d + 1))


def _load_text(path: Path) -> ChainTrace:
    with open(path) as fh:
        magic = fh.readline().rstrip("\n")
        if magic != TRACE_MAGIC:
            raise TraceError(f"{path}: not a trace file")
        meta_line = fh.readline()
        shape_line = fh.readline()
        cols = fh.readline().rstrip("\n").split("\t")
        if not meta_line.startswith("# metadata ") or not shape_line.startswith("# shape "):
            raise TraceError(f"{path}: malformed trace header")
        meta = json.loads(meta_line[len("# metadata "):])
        T, W, d = (int(s) for s in shape_line.split()[2:5])
        rows = np.loadtxt(fh, delimiter="\t", ndmin=2)
    if rows.shape != (T * W, d + 3):
        raise TraceError(f"{path}: expected {T * W} rows of {d + 3} fields, found {rows.shape}")
    values = rows[:, 2 : 2 + d].reshape(T, W, d)
    acc = rows[::W, -1]
    return ChainTrace(values, cols[2:-1], acc, meta)


def save_trace(trace: ChainTrace, path) -> Path:
    """Write ``trace``; ``.npz`` gives the bit-exact binary form, anything else the text form."""
    path = Path(path)
    if path.suffix == ".npz":
        np.savez(
            path,
            values=trace.values,
            acceptance=trace.acceptance,
            columns=np.array(trace.columns),
            metadata=np.array(json.dumps(trace.metadata, sort_keys=True, default=str)),
        )
    else:
        _save_text(trace, path)
    return path


def load_trace(path) -> ChainTrace:
    path = Path(path)
    try:
        if path.suffix == ".npz":
            with np.load(path, allow_pickle=False) as z:
                return ChainTrace(
                    z["values"], list(z["columns"]), z["acceptance"], json.loads(str(z["metadata"]))
                )
        return _load_text(path)
    except TraceError:
        raise
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        raise TraceError(f"{path}: cannot read trace ({exc})") from exc


@dataclass
class SamplerRow:
    sampler: str
    iat: dict
    iat_status: dict
    iat_gradient_units: dict
    mean: dict
    stderr: dict
    acceptance: float
    cost: float
    efficiency: float = math.nan
    biased: bool = False
    config_hash: str = ""


@dataclass
class Report:
    columns: list[str]
    reference: str
    rows: list[SamplerRow]
    lineage: str = ""

    def row(self, sampler: str) -> SamplerRow:
        for r in self.rows:
            if r.sampler == sampler:
                return r
        raise KeyError(sampler)

    def to_dict(self) -> dict:
        return {
            "columns": self.columns,
            "reference": self.reference,
            "lineage": self.lineage,
            "rows": [asdict(r) for r in self.rows],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Report":
        return cls(d["columns"], d["reference"], [SamplerRow(**r) for r in d["rows"]], d.get("lineage", ""))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, allow_nan=True)

    @classmethod
    def from_json(cls, text: str) -> "Report":
        return cls.from_dict(json.loads(text))

    def format_table(self) -> str:
        head = ["sampler", *[f"IAT {c}" for c in self.columns], "accept", "cost", "efficiency"]
        lines = []
        for r in self.rows:
            cells = [r.sampler + (" (biased)" if r.biased else "")]
            for c in self.columns:
                if not math.isfinite(r.iat[c]):
                    cells.append(r.iat_status[c])
                    continue
                mark = "" if r.iat_status[c] == "ok" else ">"
                cells.append(f"{mark}{r.iat[c]:.4g} / {r.iat_gradient_units[c]:.4g}")
            cells += [f"{r.acceptance:.3f}", f"{r.cost:.4g}", f"{r.efficiency:.4g}"]
            lines.append(cells)
        widths = [max(len(x) for x in col) for col in zip(head, *lines)]
        fmt = lambda cells: "  ".join(x.rjust(w) for x, w in zip(cells, widths))
        out = [fmt(head), "  ".join("-" * w for w in widths)]
        out += [fmt(c) for c in lines]
        out.append("IAT as iterations / gradient evaluations; '>' marks an unconverged window bound.")
        return "\n".join(out)

    def save(self, directory, stem: str = "report") -> tuple[Path, Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        txt = directory / f"{stem}.txt"
        js = directory / f"{stem}.json"
        txt.write_text(self.format_table() + "\n")
        js.write_text(self.to_json() + "\n")
        return txt, js


def summarize(
    traces: dict,
    observables=None,
    reference: str | None = None,
    cost_key: str = "grads_per_iteration",
    burn_in: float = 0.0,
) -> Report:
    """Compare traces of several samplers on the same experiment.

    ``traces`` maps sampler names to :class:`ChainTrace`. IATs are computed on
    ensemble-mean series. The cost of one iteration is read from
    ``metadata[cost_key]`` (default 1); efficiency uses the largest IAT of
    each sampler relative to ``reference`` (default: the first sampler).
    The leading ``burn_in`` fraction of every series is discarded; series
    left with fewer than 100 points get status ``short`` and a NaN IAT.
    """
    if not 0.0 <= burn_in < 1.0:
        raise ValueError(f"burn_in must lie in [0, 1), got {burn_in}")
    if not traces:
        raise ValueError("no traces to summarize")
    names = list(traces)
    lineages = {traces[n].metadata.get("lineage", "") for n in names}
    if len(lineages) > 1:
        raise LineageError(f"traces come from different experiments: {sorted(lineages)}")
    first = traces[names[0]]
    cols = list(observables) if observables is not None else list(first.columns)
    rows = []
    for name in names:
        tr = traces[name]
        missing = [c for c in cols if c not in tr.columns]
        if missing:
            raise ValueError(f"trace {name!r} lacks observables {missing}")
        cost = float(tr.metadata.get(cost_key, 1.0))
        iat, status, iat_g, mean, se = {}, {}, {}, {}, {}
        for c in cols:
            s = tr.column(c)
            s = s[int(burn_in * s.size):]
            try:
                r = iat_empirical(s)
                iat[c] = r.value if r.status != "undefined" else math.nan
                status[c] = r.status
            except ValueError:
                iat[c], status[c] = math.nan, "short"
            iat_g[c] = iat[c] * cost
            mean[c], se[c] = mean_with_error(s, iat[c] if np.isfinite(iat[c]) else 1.0)
        rows.append(
            SamplerRow(
                name, iat, status, iat_g, mean, se,
                float(np.mean(tr.acceptance)), cost,
                biased=bool(tr.metadata.get("biased", False)),
                config_hash=str(tr.metadata.get("config_hash", "")),
            )
        )
    ref = reference if reference is not None else names[0]
    ref_row = next((r for r in rows if r.sampler == ref), None)
    if ref_row is None:
        raise KeyError(f"reference sampler {ref!r} not among {names}")
    ref_work = np.max(list(ref_row.iat.values())) * ref_row.cost
    for r in rows:
        r.efficiency = float(ref_work / (np.max(list(r.iat.values())) * r.cost))
    return Report(cols, ref, rows, lineages.pop())
