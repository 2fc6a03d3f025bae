"""File formats: trace text files, structured results, tables and run manifests.

Traces are whitespace-delimited text with a ``#`` header block.  Structured
results are JSON (or YAML) mappings whose keys carry their unit as a suffix.
Floats are written with ``repr`` so a write/read cycle is bit-exact.  Every
file has a ``schema_version``; readers reject unknown major versions.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .config import SCHEMA_VERSION, ConfigError, check_version
from .fitting import FitResult, ModelSelection
from .model import MultiExpModel, Pump, TimeSeriesTrace
from .scc import SensitivitySurface, SurfaceSource

TRACE_MAGIC = "ndscc-trace"
_PUMP_TAG = {Pump.PUMP_532: "532nm", Pump.PUMP_592: "592nm"}
_TAG_PUMP = {v: k for k, v in _PUMP_TAG.items()}


class FormatError(ValueError):
    """Malformed or incompatible file content."""


# -- helpers --------------------------------------------------------------------------------


def plain(obj):
    """Convert numpy scalars/arrays, enums and tuples to JSON-ready builtins."""
    if isinstance(obj, dict):
        return {str(k): plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return plain(obj.tolist())
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if hasattr(obj, "value") and isinstance(getattr(obj, "value"), str):
        return obj.value
    return obj


def dumps(doc: dict, fmt: str = "json") -> str:
    doc = plain(doc)
    if fmt == "json":
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if fmt == "yaml":
        return yaml.safe_dump(doc, sort_keys=True, default_flow_style=None, width=100)
    raise ValueError(f"unknown format {fmt!r}")


def loads(text: str, fmt: str = "json") -> dict:
    try:
        doc = json.loads(text) if fmt == "json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise FormatError(f"cannot parse {fmt}: {exc}") from exc
    if not isinstance(doc, dict):
        raise FormatError("top level must be a mapping")
    return doc


def fmt_of(path) -> str:
    return "yaml" if Path(path).suffix.lower() in (".yaml", ".yml") else "json"


def write_text(path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    return path


def write_doc(path, doc: dict) -> Path:
    return write_text(path, dumps(doc, fmt_of(path)))


def read_doc(path, kind: str | None = None) -> dict:
    doc = loads(Path(path).read_text(encoding="utf-8"), fmt_of(path))
    _check_doc(doc, kind)
    return doc


def _check_doc(doc: dict, kind: str | None) -> None:
    if "schema_version" not in doc:
        raise FormatError("missing schema_version")
    try:
        check_version(doc["schema_version"])
    except ConfigError as exc:
        raise FormatError(str(exc)) from exc
    if kind is not None and doc.get("kind") != kind:
        raise FormatError(f"expected a {kind!r} document, found {doc.get('kind')!r}")


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


# -- traces ---------------------------------------------------------------------------------


def format_trace(trace: TimeSeriesTrace) -> str:
    lines = [
        f"# {TRACE_MAGIC}",
        f"# schema_version: {SCHEMA_VERSION}",
        f"# pump: {_PUMP_TAG[trace.pump_label]}",
        f"# probe_power_mW: {trace.probe_power!r}",
        f"# bin_width_s: {trace.bin_width!r}",
        f"# shots: {trace.shots}",
        f"# metadata: {json.dumps(plain(trace.metadata), sort_keys=True)}",
        "# columns: bin_start_s counts",
    ]
    lines += [f"{float(t)!r} {int(c)}" for t, c in zip(trace.bin_starts, trace.counts)]
    return "\n".join(lines) + "\n"


def parse_trace(text: str) -> TimeSeriesTrace:
    header = {}
    starts, counts = [], []
    lines = text.splitlines()
    if not lines or lines[0].strip() != f"# {TRACE_MAGIC}":
        raise FormatError("not a trace file (missing magic line)")
    for lineno, line in enumerate(lines[1:], start=2):
        s = line.strip()
        if not s:
            continue
        if s.startswith("#"):
            key, sep, value = s[1:].partition(":")
            if sep:
                header[key.strip()] = value.strip()
            continue
        parts = s.split()
        if len(parts) != 2:
            raise FormatError(f"line {lineno}: expected 2 columns, found {len(parts)}")
        try:
            starts.append(float(parts[0]))
            counts.append(int(parts[1]))
        except ValueError as exc:
            raise FormatError(f"line {lineno}: {exc}") from exc
    for key in ("schema_version", "pump", "probe_power_mW", "bin_width_s", "shots"):
        if key not in header:
            raise FormatError(f"header field {key!r} is missing")
    try:
        check_version(header["schema_version"])
    except ConfigError as exc:
        raise FormatError(str(exc)) from exc
    if header["pump"] not in _TAG_PUMP:
        raise FormatError(f"unknown pump {header['pump']!r}")
    meta = json.loads(header["metadata"]) if "metadata" in header else {}
    try:
        return TimeSeriesTrace(np.array(starts), float(header["bin_width_s"]),
                               np.array(counts, dtype=np.int64), int(header["shots"]),
                               _TAG_PUMP[header["pump"]], float(header["probe_power_mW"]), meta)
    except ValueError as exc:
        raise FormatError(f"invalid trace: {exc}") from exc


def write_trace(path, trace: TimeSeriesTrace) -> Path:
    return write_text(path, format_trace(trace))


def read_trace(path) -> TimeSeriesTrace:
    return parse_trace(Path(path).read_text(encoding="utf-8"))


def trace_name(pump: Pump, power: float) -> str:
    return f"trace_{_PUMP_TAG[Pump(pump)]}_{power!r}mW.txt"


# -- models and fits ------------------------------------------------------------------------


def model_to_dict(model: MultiExpModel) -> dict:
    return {"c0_per_s": model.c0,
            "terms": [{"amplitude_per_s": a, "rate_per_s": g} for a, g in model.terms]}


def model_from_dict(d: dict) -> MultiExpModel:
    return MultiExpModel(float(d["c0_per_s"]),
                         tuple((float(t["amplitude_per_s"]), float(t["rate_per_s"])) for t in d["terms"]))


def fit_to_dict(fit: FitResult) -> dict:
    return {
        "model": model_to_dict(fit.model),
        "residuals_per_s": [float(r) for r in fit.residuals],
        "rss_per_s2": fit.rss,
        "n_points": fit.n_points,
        "n_params": fit.n_params,
        "log_likelihood": fit.log_likelihood,
        "aic": fit.aic,
        "converged": fit.converged,
        # order (c0, c_1, gamma_1, ...), every entry in 1/s^2
        "covariance_per_s2": None if fit.covariance is None else np.asarray(fit.covariance).tolist(),
        "weighted": fit.weighted,
        "diagnostics": plain(fit.diagnostics),
    }


def fit_from_dict(d: dict) -> FitResult:
    cov = d.get("covariance_per_s2")
    return FitResult(model_from_dict(d["model"]), np.array(d["residuals_per_s"], dtype=float),
                     float(d["rss_per_s2"]), int(d["n_points"]), int(d["n_params"]),
                     float(d["log_likelihood"]), float(d["aic"]), bool(d["converged"]),
                     None if cov is None else np.array(cov, dtype=float), bool(d["weighted"]),
                     dict(d.get("diagnostics", {})))


def selection_to_dict(sel: ModelSelection, source: str = "") -> dict:
    return {
        "kind": "selection",
        "schema_version": SCHEMA_VERSION,
        "source": source,
        "chosen_n": sel.chosen_n,
        "weights": {str(n): w for n, w in sel.weights.items()},
        "excluded": list(sel.excluded),
        "fits": {str(n): fit_to_dict(f) for n, f in sel.fits.items()},
    }


def selection_from_dict(d: dict) -> ModelSelection:
    _check_doc(d, "selection")
    fits = {int(n): fit_from_dict(f) for n, f in d["fits"].items()}
    weights = {int(n): float(w) for n, w in d["weights"].items()}
    return ModelSelection(fits, weights, int(d["chosen_n"]), tuple(d.get("excluded", ())))


def fit_document(fit: FitResult, source: str = "") -> dict:
    return {"kind": "fit", "schema_version": SCHEMA_VERSION, "source": source, **fit_to_dict(fit)}


# -- surfaces -------------------------------------------------------------------------------


def surface_to_dict(surface: SensitivitySurface) -> dict:
    return {
        "kind": "surface",
        "schema_version": SCHEMA_VERSION,
        "source": surface.source.value,
        "power_grid_mW": surface.power_grid.tolist(),
        "tau_grid_s": surface.tau_grid.tolist(),
        "tau_i_s": surface.tau_i,
        "snr": surface.snr.tolist(),
        "snr_se": None if surface.snr_se is None else surface.snr_se.tolist(),
    }


def surface_from_dict(d: dict) -> SensitivitySurface:
    _check_doc(d, "surface")
    source = d["source"]
    se = d.get("snr_se")
    return SensitivitySurface(np.array(d["power_grid_mW"], dtype=float),
                              np.array(d["tau_grid_s"], dtype=float),
                              np.array(d["snr"], dtype=float), float(d["tau_i_s"]),
                              SurfaceSource(source), None if se is None else np.array(se, dtype=float))


# -- tables ---------------------------------------------------------------------------------


def _cell(v) -> str:
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return "nan"
        return repr(v)
    if v is None:
        return ""
    return str(v)


def format_table(columns, rows, comments=(), delimiter: str = "\t") -> str:
    """Delimited table with ``#`` comment lines and a header row."""
    out = [f"# {c}" for c in comments]
    out.append(delimiter.join(columns))
    for row in rows:
        if len(row) != len(columns):
            raise ValueError("row length does not match the header")
        out.append(delimiter.join(_cell(v) for v in row))
    return "\n".join(out) + "\n"


def write_table(path, columns, rows, comments=()) -> Path:
    delim = "," if Path(path).suffix.lower() == ".csv" else "\t"
    return write_text(path, format_table(columns, rows, comments, delim))


def read_table(path):
    """``(columns, rows)`` of a table written by :func:`write_table` (cells as strings)."""
    delim = "," if Path(path).suffix.lower() == ".csv" else "\t"
    lines = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines()
             if ln and not ln.startswith("#")]
    if not lines:
        return [], []
    cols = lines[0].split(delim)
    return cols, [ln.split(delim) for ln in lines[1:]]


# -- manifests ------------------------------------------------------------------------------


@dataclass
class RunManifest:
    """Provenance of one command run.

    ``config`` is the fully resolved configuration, enough to rerun the
    command bit-exactly; ``inputs`` and ``outputs`` map relative paths to
    SHA-256 digests.
    """

    command: str
    config: dict
    seed: int
    version: str
    args: dict = field(default_factory=dict)
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    wall_clock_s: float = 0.0

    def to_dict(self) -> dict:
        return {
            "kind": "manifest",
            "schema_version": SCHEMA_VERSION,
            "command": self.command,
            "config": self.config,
            "seed": self.seed,
            "tool_version": self.version,
            "args": self.args,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "wall_clock_s": self.wall_clock_s,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunManifest":
        _check_doc(d, "manifest")
        return cls(d["command"], d["config"], int(d["seed"]), d["tool_version"], d.get("args", {}),
                   d.get("inputs", {}), d.get("outputs", {}), float(d.get("wall_clock_s", 0.0)))


MANIFEST_NAME = "manifest.json"


def digests(base, paths) -> dict:
    base = Path(base)
    out = {}
    for p in sorted(Path(p) for p in paths):
        out[Path(os.path.relpath(p, base)).as_posix()] = sha256_file(p)
    return out


def write_manifest(out_dir, manifest: RunManifest) -> Path:
    return write_doc(Path(out_dir) / MANIFEST_NAME, manifest.to_dict())


def read_manifest(path) -> RunManifest:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    return RunManifest.from_dict(read_doc(path, "manifest"))
