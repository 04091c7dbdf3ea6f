import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.signal import lfilter

from eqnmc.diagnostics import (
    ChainTrace,
    LineageError,
    Report,
    TraceError,
    autocorrelation,
    iat_analytic_gaussian,
    iat_empirical,
    load_trace,
    mean_with_error,
    save_trace,
    stable_hash,
    summarize,
)


def ar1(phi, n, rng, burn=1000):
    e = rng.standard_normal(n + burn)
    return lfilter([1.0], [1.0, -phi], e)[burn:]


def test_autocorrelation_matches_direct_sum():
    x = np.random.default_rng(0).standard_normal(300)
    d = x - x.mean()
    direct = np.array([np.dot(d[: d.size - k], d[k:]) for k in range(d.size)]) / np.dot(d, d)
    assert np.allclose(autocorrelation(x), direct, atol=1e-12)


@pytest.mark.parametrize("phi", [0.0, 0.5, 0.9, 0.99])
def test_iat_of_ar1(phi):
    exact = (1 + phi) / (1 - phi)
    r = iat_empirical(ar1(phi, 400_000, np.random.default_rng(1)))
    assert r.ok
    assert r.tau == pytest.approx(exact, rel=0.08)
    assert r.window >= 5 * r.tau - 1


def test_iat_statuses():
    with pytest.raises(ValueError):
        iat_empirical(np.arange(50.0))
    with pytest.raises(ValueError):
        iat_empirical(np.r_[np.zeros(200), np.nan])
    assert iat_empirical(np.ones(500)).status == "undefined"
    slow = iat_empirical(ar1(0.999, 2000, np.random.default_rng(0)))
    assert slow.status == "unconverged"
    assert math.isnan(slow.tau) and slow.bound > 50
    assert slow.value == slow.bound


def test_anticorrelated_chain_has_positive_iat():
    # partial sums oscillate around 1/9; the window stops early, on the high side
    r = iat_empirical(ar1(-0.8, 100_000, np.random.default_rng(2)))
    assert r.ok and 1 / 9 <= r.tau <= 1.0


def test_analytic_iat_values():
    assert iat_analytic_gaussian(np.diag([1.0, 100.0]), [0.0, 1.0], 1.0) == pytest.approx(199.0)
    assert iat_analytic_gaussian([1.0, 100.0], [1.0, 0.0], 1.0) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        iat_analytic_gaussian([1.0, 100.0], [0.0, 1.0], 2.5)


@pytest.mark.slow
def test_iat_estimator_variance_scales_inversely_with_length():
    rng = np.random.default_rng(3)
    lengths = [10_000, 100_000, 1_000_000]
    variances = []
    for n in lengths:
        reps = 300 if n < 1_000_000 else 60
        variances.append(np.var([iat_empirical(ar1(0.9, n, rng)).tau for _ in range(reps)], ddof=1))
    slope = -np.polyfit(np.log(lengths), np.log(variances), 1)[0]
    assert 0.7 <= slope <= 1.3, (variances, slope)


def test_mean_with_error():
    x = ar1(0.5, 100_000, np.random.default_rng(4))
    m, se = mean_with_error(x)
    assert abs(m) < 4 * se
    assert se == pytest.approx(math.sqrt(x.var() * 3.0 / x.size), rel=0.1)


def trace(seed=0, T=400, W=1, meta=None, phi=0.5):
    rng = np.random.default_rng(seed)
    vals = np.stack([ar1(phi, T * W, rng).reshape(T, W), rng.standard_normal((T, W))], axis=-1)
    return ChainTrace(vals, ["a", "b"], rng.random(T), {"grads_per_iteration": 2, **(meta or {})})


@pytest.mark.parametrize("suffix", [".npz", ".txt"])
def test_trace_roundtrip(tmp_path, suffix):
    tr = trace(W=3, meta={"sampler": "s", "lineage": "x"})
    back = load_trace(save_trace(tr, tmp_path / f"t{suffix}"))
    assert back.equals(tr)
    assert back.metadata == json.loads(json.dumps(tr.metadata))
    assert back.values.shape == (400, 3, 2)


def test_trace_validation_and_errors(tmp_path):
    with pytest.raises(ValueError):
        ChainTrace(np.zeros((3, 2)), ["a"], np.zeros(3))
    with pytest.raises(ValueError):
        ChainTrace(np.zeros((3, 2)), ["a", "b"], np.zeros(2))
    (tmp_path / "bad.txt").write_text("nonsense\n")
    with pytest.raises(TraceError, match="bad.txt"):
        load_trace(tmp_path / "bad.txt")
    with pytest.raises(TraceError, match="missing.npz"):
        load_trace(tmp_path / "missing.npz")
    good = save_trace(trace(), tmp_path / "g.txt")
    lines = good.read_text().splitlines()
    (tmp_path / "cut.txt").write_text("\n".join(lines[:-5]) + "\n")
    with pytest.raises(TraceError):
        load_trace(tmp_path / "cut.txt")


def test_concatenate():
    a, b = trace(0, 100), trace(1, 50)
    c = a.concatenate(b)
    assert c.n_iterations == 150
    assert np.array_equal(c.values[100:], b.values)
    with pytest.raises(ValueError):
        a.concatenate(ChainTrace(np.zeros((2, 1)), ["z"], np.zeros(2)))


def test_summarize_efficiency_and_reference():
    fast = trace(0, 5000, phi=0.0, meta={"sampler": "fast"})
    slow = trace(1, 5000, phi=0.9, meta={"sampler": "slow"})
    rep = summarize({"fast": fast, "slow": slow}, ["a"], reference="slow")
    assert rep.row("slow").efficiency == pytest.approx(1.0)
    assert rep.row("fast").efficiency == pytest.approx(rep.row("slow").iat["a"] / rep.row("fast").iat["a"])
    assert rep.row("fast").iat_gradient_units["a"] == pytest.approx(2 * rep.row("fast").iat["a"])
    with pytest.raises(KeyError):
        summarize({"fast": fast}, reference="nope")
    with pytest.raises(ValueError):
        summarize({"fast": fast}, ["zz"])


def test_summarize_refuses_mixed_lineage():
    with pytest.raises(LineageError):
        summarize({"x": trace(meta={"lineage": "1"}), "y": trace(meta={"lineage": "2"})})


def test_summarize_short_series_and_burn_in():
    rep = summarize({"s": trace(T=150)}, burn_in=0.5)
    assert rep.row("s").iat_status["a"] == "short"
    assert math.isnan(rep.row("s").efficiency)
    assert "short" in rep.format_table()
    with pytest.raises(ValueError):
        summarize({"s": trace()}, burn_in=1.0)


def test_report_json_roundtrip_and_table(tmp_path):
    rep = summarize({"x": trace(0, 3000), "y": trace(1, 3000, meta={"biased": True})})
    back = Report.from_json(rep.to_json())
    assert back.to_dict() == json.loads(rep.to_json())
    table = rep.format_table()
    assert "(biased)" in table and "/" in table
    txt, js = rep.save(tmp_path)
    assert txt.read_text().startswith(table.splitlines()[0])
    assert json.loads(js.read_text())["reference"] == "x"


@settings(max_examples=50, deadline=None)
@given(st.dictionaries(st.text(max_size=5), st.integers() | st.floats(allow_nan=False) | st.text(max_size=5)))
def test_stable_hash_ignores_key_order(d):
    assert stable_hash(d) == stable_hash(dict(reversed(list(d.items()))))
    assert len(stable_hash(d)) == 16
