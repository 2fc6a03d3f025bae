import math

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from ndscc import io
from ndscc.fitting import FitResult, ModelSelection
from ndscc.io import FormatError
from ndscc.model import MultiExpModel, Pump, TimeSeriesTrace
from ndscc.scc import SensitivitySurface

finite = st.floats(allow_nan=False, allow_infinity=False, width=64)


def _same_bits(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return a.shape == b.shape and np.array_equal(a.view(np.uint64), b.view(np.uint64))


def _same_fit(a: FitResult, b: FitResult):
    assert a.model == b.model
    assert _same_bits(a.residuals, b.residuals)
    for name in ("rss", "log_likelihood", "aic"):
        assert _same_bits(getattr(a, name), getattr(b, name))
    assert (a.n_points, a.n_params, a.converged, a.weighted) == (b.n_points, b.n_params, b.converged,
                                                               b.weighted)
    assert (a.covariance is None) == (b.covariance is None)
    if a.covariance is not None:
        assert _same_bits(a.covariance, b.covariance)
    assert a.diagnostics == b.diagnostics


@st.composite
def traces(draw):
    n = draw(st.integers(0, 40))
    width = draw(st.floats(1e-9, 1e-3))
    counts = draw(st.lists(st.integers(0, 2 ** 40), min_size=n, max_size=n))
    return TimeSeriesTrace(np.arange(n) * width, width, counts, draw(st.integers(1, 10 ** 9)),
                           draw(st.sampled_from(list(Pump))), draw(st.floats(1e-4, 10.0)),
                           {"seed": draw(st.integers(0, 2 ** 63 - 1)), "note": "x"})


@given(traces())
def test_trace_round_trip(trace):
    back = io.parse_trace(io.format_trace(trace))
    assert _same_bits(back.bin_starts, trace.bin_starts)
    assert np.array_equal(back.counts, trace.counts) and back.counts.dtype == np.int64
    assert _same_bits(back.bin_width, trace.bin_width) and back.shots == trace.shots
    assert back.pump_label is trace.pump_label and _same_bits(back.probe_power, trace.probe_power)
    assert back.metadata == trace.metadata


def test_trace_file_layout(tmp_path):
    tr = TimeSeriesTrace([0.0, 1e-6], 1e-6, [5, 3], 100, Pump.PUMP_592, 0.02)
    p = io.write_trace(tmp_path / io.trace_name(tr.pump_label, tr.probe_power), tr)
    assert p.name == "trace_592nm_0.02mW.txt"
    lines = p.read_text().splitlines()
    assert lines[:6] == ["# ndscc-trace", "# schema_version: 1.0", "# pump: 592nm",
                         "# probe_power_mW: 0.02", "# bin_width_s: 1e-06", "# shots: 100"]
    assert lines[-2:] == ["0.0 5", "1e-06 3"]
    assert io.read_trace(p).counts.tolist() == [5, 3]


@pytest.mark.parametrize("mutate, msg", [
    (lambda t: t.replace("# ndscc-trace", "# other"), "magic"),
    (lambda t: t.replace("schema_version: 1.0", "schema_version: 2.0"), "major version"),
    (lambda t: t.replace("# shots: 100\n", ""), "shots"),
    (lambda t: t.replace("592nm", "600nm"), "pump"),
    (lambda t: t + "1 2 3\n", "2 columns"),
    (lambda t: t + "2e-06 x\n", "line"),
    (lambda t: t + "1e-07 4\n", "invalid trace"),
])
def test_trace_format_errors(mutate, msg):
    text = io.format_trace(TimeSeriesTrace([0.0, 1e-6], 1e-6, [5, 3], 100, Pump.PUMP_592, 0.02))
    with pytest.raises(FormatError, match=msg):
        io.parse_trace(mutate(text))


@given(st.floats(0, 1e300), st.lists(st.tuples(finite, st.floats(1e-300, 1e300)), max_size=4,
                                     unique_by=lambda t: t[1]),
       st.lists(finite, min_size=1, max_size=10), st.booleans())
def test_fit_round_trip(c0, terms, resid, weighted):
    rates = sorted(g for _, g in terms)
    assume(all(b - a > 1e-9 * b for a, b in zip(rates, rates[1:])))
    k = 1 + 2 * len(terms)
    cov = np.arange(k * k, dtype=float).reshape(k, k) * math.pi
    fit = FitResult(MultiExpModel(c0, tuple(terms)), np.array(resid), 1.5e3, len(resid), k,
                    -12.25, 30.5, True, cov, weighted, {"nfev": 7, "reason": "ok"})
    back = io.fit_from_dict(io.loads(io.dumps(io.fit_document(fit))))
    _same_fit(fit, back)
    back_yaml = io.fit_from_dict(io.loads(io.dumps(io.fit_document(fit), "yaml"), "yaml"))
    _same_fit(fit, back_yaml)


def test_fit_without_covariance_and_nan():
    fit = FitResult(MultiExpModel(1.0), np.array([math.nan, 1.0]), math.inf, 2, 1, -math.inf,
                    math.inf, False, None, False, {"reason": "rank-deficient"})
    text = io.dumps(io.fit_document(fit))
    assert "NaN" in text and "Infinity" in text
    _same_fit(fit, io.fit_from_dict(io.loads(text)))


def test_selection_round_trip():
    f1 = FitResult(MultiExpModel(2.0, ((3.0, 4.0),)), np.array([0.1, -0.2]), 0.05, 2, 3, 1.0,
                   4.0, True, np.eye(3), False, {})
    f2 = FitResult(MultiExpModel(2.5), np.array([0.3, -0.1]), 0.1, 2, 1, 0.5, 1.0, True, None,
                   False, {})
    sel = ModelSelection({1: f1, 2: f2}, {1: 0.3, 2: 0.7}, 2, (3,))
    doc = io.loads(io.dumps(io.selection_to_dict(sel, "trace.txt")))
    assert doc["source"] == "trace.txt" and doc["kind"] == "selection"
    back = io.selection_from_dict(doc)
    assert back.chosen_n == 2 and back.weights == sel.weights and back.excluded == (3,)
    for n in (1, 2):
        _same_fit(sel.fits[n], back.fits[n])
    doc["kind"] = "fit"
    with pytest.raises(FormatError, match="selection"):
        io.selection_from_dict(doc)


@given(st.integers(1, 4), st.integers(1, 5), st.integers(0, 2 ** 32 - 1), st.booleans())
def test_surface_round_trip(n_p, n_t, seed, with_se):
    rng = np.random.default_rng(seed)
    snr = rng.standard_normal((n_p, n_t))
    s = SensitivitySurface(np.cumsum(rng.uniform(0.1, 1, n_p)), np.cumsum(rng.uniform(1e-6, 1e-5, n_t)),
                           snr, float(rng.uniform(0, 1e-5)), "MEASURED_FILE",
                           np.abs(snr) / 10 + 1e-3 if with_se else None)
    back = io.surface_from_dict(io.loads(io.dumps(io.surface_to_dict(s))))
    assert s.same_as(back)
    assert (back.snr_se is None) != with_se
    if with_se:
        assert _same_bits(s.snr_se, back.snr_se)


def test_table_round_trip(tmp_path):
    rows = [(1, 0.1, "a", None), (2, math.nan, "b", 1e-300)]
    p = io.write_table(tmp_path / "t.tsv", ["i", "x", "s", "y"], rows, comments=["units: s"])
    text = p.read_text()
    assert text.startswith("# units: s\ni\tx\ts\ty\n")
    cols, back = io.read_table(p)
    assert cols == ["i", "x", "s", "y"]
    assert back == [["1", "0.1", "a", ""], ["2", "nan", "b", "1e-300"]]
    assert float(back[1][3]) == 1e-300
    c = io.write_table(tmp_path / "t.csv", ["a", "b"], [(1, 2)])
    assert c.read_text() == "a,b\n1,2\n"
    with pytest.raises(ValueError):
        io.format_table(["a"], [(1, 2)])
    assert io.read_table(io.write_text(tmp_path / "e.tsv", "# nothing\n")) == ([], [])


def test_manifest_round_trip(tmp_path):
    out = tmp_path / "run"
    a = io.write_text(out / "a.txt", "alpha\n")
    b = io.write_text(out / "sub" / "b.txt", "beta\n")
    m = io.RunManifest("simulate", {"seed": 1, "x": [1.5]}, 1, "0.1.0", {"n_max": 3},
                       {}, io.digests(out, [b, a]), 0.25)
    assert list(m.outputs) == ["a.txt", "sub/b.txt"]
    assert m.outputs["a.txt"] == io.sha256_file(a)
    io.write_manifest(out, m)
    back = io.read_manifest(out)
    assert back == m
    doc = io.read_doc(out / io.MANIFEST_NAME)
    doc["schema_version"] = "9.0"
    io.write_doc(out / "bad.json", doc)
    with pytest.raises(FormatError, match="major version"):
        io.read_manifest(out / "bad.json")


def test_document_errors(tmp_path):
    with pytest.raises(FormatError):
        io.loads("[1, 2]")
    with pytest.raises(FormatError):
        io.loads("{oops")
    p = io.write_doc(tmp_path / "x.yaml", {"kind": "fit"})
    with pytest.raises(FormatError, match="schema_version"):
        io.read_doc(p)
    with pytest.raises(ValueError):
        io.dumps({}, "xml")


def test_plain_conversion():
    from ndscc.scc import SurfaceSource

    out = io.plain({1: np.float64(2.5), "a": (np.int64(3), np.bool_(True)), "e": SurfaceSource.MEASURED_FILE,
                    "arr": np.arange(2)})
    assert out == {"1": 2.5, "a": [3, True], "e": "MEASURED_FILE", "arr": [0, 1]}
    assert type(out["1"]) is float and type(out["a"][0]) is int
