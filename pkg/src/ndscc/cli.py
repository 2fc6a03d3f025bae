"""``ndscc`` command-line interface.

Every command resolves the layered config, writes its outputs under ``--out``
and finishes with a ``manifest.json`` holding the resolved config, the
command arguments and SHA-256 digests of inputs and outputs.  ``ndscc replay``
reruns a manifest and checks the digests.

Exit codes: 0 success, 1 replay mismatch, 2 validation error, 3 numerical
non-convergence, 4 I/O error.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, calibration, config, fitting, io, metrics, relaxometry, scc
from .model import Pump
from .simulator import (NVParams, expected_tunneling_fraction, power_scaling_fit,
                        scc_sequence, simulate_charge_trace, simulate_kmc)

log = logging.getLogger("ndscc")

EXIT_OK = 0
EXIT_MISMATCH = 1
EXIT_VALIDATION = 2
EXIT_NONCONVERGENCE = 3
EXIT_IO = 4
PUMPS = (Pump.PUMP_532, Pump.PUMP_592)


class UsageError(ValueError):
    """Bad command-line usage (exit code 2)."""


class Context:
    """Resolved inputs of one command run."""

    def __init__(self, cfg: dict, args: dict, out: Path, fmt: str, threads: int):
        self.cfg = cfg
        self.args = args
        self.out = out
        self.fmt = fmt
        self.threads = threads
        self.outputs: list[Path] = []
        self.inputs: list[Path] = []

    @property
    def seed(self) -> int:
        return int(self.cfg["seed"])

    def doc_path(self, stem: str) -> Path:
        return self.out / f"{stem}.{'yaml' if self.fmt == 'yaml' else 'json'}"

    def write_doc(self, stem: str, doc: dict) -> Path:
        p = io.write_doc(self.doc_path(stem), doc)
        self.outputs.append(p)
        return p

    def write_table(self, name: str, columns, rows, comments=()) -> Path:
        p = io.write_table(self.out / name, columns, rows, comments)
        self.outputs.append(p)
        return p

    def grid(self, dotted: str) -> np.ndarray:
        return config.grid(config.get(self.cfg, dotted), dotted)


def _doc(kind: str, **body) -> dict:
    return {"kind": kind, "schema_version": config.SCHEMA_VERSION, **body}


# -- builders shared by commands ----------------------------------------------------------


def nanodiamond(cfg: dict):
    return config.ensemble_config(cfg["nanodiamond"], int(cfg["seed"]))


def scc_ensemble(cfg: dict):
    return config.ensemble_config(cfg["scc"]["ensemble"], int(cfg["seed"])).sample()


def scc_template(cfg: dict, probe_power: float = 0.01, probe_duration: float = 100e-6):
    p = cfg["scc"]["pulses"]
    return scc_sequence(probe_power, probe_duration, init_duration=p["init_duration_s"],
                        shelve=p["shelve_s"], delay=p["delay_s"], ionize=p["ionize_s"],
                        scc_power=p["scc_power_mW"], init_power=p["init_power_mW"])


def readout_params(cfg: dict) -> relaxometry.ReadoutParams:
    r = cfg["relaxometry"]
    pl = cfg["pl_readout"]
    return relaxometry.ReadoutParams(config.pl_model(cfg), float(pl["power_mW"]),
                                     float(pl["duration_s"]), float(r["scc_power_mW"]),
                                     float(r["scc_duration_s"]),
                                     float(cfg["scc"]["pulses"]["init_duration_s"]),
                                     float(r["scc_overhead_s"]))


def survey_protocol(cfg: dict) -> calibration.SurveyProtocol:
    a = cfg["acquisition"]
    return calibration.SurveyProtocol(
        tuple(float(p) for p in a["probe_powers_mW"]), float(a["duration_s"]), int(a["n_bins"]),
        int(a["shots"]), tuple(config.grid(cfg["metrics"]["tau_grid_s"]).tolist()),
        int(cfg["fitting"]["n_max"]), bool(cfg["fitting"]["weighted"]))


# -- commands -----------------------------------------------------------------------------


def cmd_simulate(ctx: Context) -> int:
    """One trace file per pump and probe power."""
    cfg = ctx.cfg
    ens = nanodiamond(cfg).sample()
    acq = cfg["acquisition"]
    for ki, pump in enumerate(PUMPS):
        for pi, power in enumerate(acq["probe_powers_mW"]):
            trace = simulate_charge_trace(ens, pump, float(power), float(acq["duration_s"]),
                                          int(acq["n_bins"]), int(acq["shots"]), ctx.seed,
                                          stream=(ki, pi))
            p = io.write_trace(ctx.out / io.trace_name(pump, float(power)), trace)
            ctx.outputs.append(p)
    return EXIT_OK


def _trace_inputs(ctx: Context) -> list[Path]:
    paths = [Path(p) for p in ctx.args.get("inputs") or []]
    if not paths:
        raise UsageError("no input files given")
    return paths


def cmd_fit(ctx: Context) -> int:
    """Model selection per trace; unreadable traces become error records."""
    n_max = int(ctx.args.get("n_max") or ctx.cfg["fitting"]["n_max"])
    weighted = bool(ctx.cfg["fitting"]["weighted"])
    rows, errors = [], []
    n_ok = 0
    for path in _trace_inputs(ctx):
        stem = path.stem
        try:
            trace = io.read_trace(path)
            ctx.inputs.append(path)
        except (OSError, io.FormatError) as exc:
            errors.append({"source": str(path), "error": f"{type(exc).__name__}: {exc}"})
            continue
        try:
            sel = fitting.select_model(trace, n_max, weighted=weighted)
        except fitting.NonConvergenceError as exc:
            errors.append({"source": str(path), "error": f"NonConvergenceError: {exc}"})
            continue
        doc = io.selection_to_dict(sel, source=path.name)
        doc.update(pump=io._PUMP_TAG[trace.pump_label], probe_power_mW=trace.probe_power)
        ctx.write_doc(f"fit_{stem}", doc)
        n_ok += 1
        rows.append((path.name, doc["pump"], trace.probe_power, sel.chosen_n,
                     *(sel.weights.get(n, math.nan) for n in range(1, n_max + 1))))
    ctx.write_table("fit_summary.tsv",
                    ["source", "pump", "probe_power_mW", "chosen_n"] + [f"weight_n{n}" for n in range(1, n_max + 1)],
                    rows)
    if errors:
        ctx.write_doc("fit_errors", _doc("errors", errors=errors))
        for e in errors:
            print(f"ndscc: {e['source']}: {e['error']}", file=sys.stderr)
    if n_ok == 0:
        nonconv = [e for e in errors if e["error"].startswith("NonConvergenceError")]
        return EXIT_NONCONVERGENCE if nonconv and len(nonconv) == len(errors) else EXIT_IO
    return EXIT_OK


def _read_selections(ctx: Context):
    out = []
    for path in _trace_inputs(ctx):
        doc = io.read_doc(path, "selection")
        ctx.inputs.append(path)
        out.append((path, doc))
    return out


def cmd_select(ctx: Context) -> int:
    """Distribution of the chosen number of terms over selection results."""
    docs = _read_selections(ctx)
    rows = []
    counts: dict = {}
    for path, doc in docs:
        n = int(doc["chosen_n"])
        key = (doc.get("pump", ""), n)
        counts[key] = counts.get(key, 0) + 1
        rows.append((path.name, doc.get("pump", ""), doc.get("probe_power_mW", math.nan), n))
    ctx.write_table("chosen_n.tsv", ["source", "pump", "probe_power_mW", "chosen_n"], rows)
    ctx.write_table("chosen_n_histogram.tsv", ["pump", "chosen_n", "count"],
                    [(p, n, c) for (p, n), c in sorted(counts.items())])
    return EXIT_OK


def cmd_metrics(ctx: Context) -> int:
    """Charge readout figures of merit from selection results of one nanodiamond."""
    pairs: dict = {}
    for path, doc in _read_selections(ctx):
        sel = io.selection_from_dict(doc)
        power = float(doc["probe_power_mW"])
        pairs.setdefault(power, {})[doc["pump"]] = sel.chosen
    complete = {p: (v["532nm"], v["592nm"]) for p, v in pairs.items() if {"532nm", "592nm"} <= set(v)}
    if not complete:
        raise UsageError("need both pumps at one probe power at least")
    tau = ctx.grid("metrics.tau_grid_s")
    rep = metrics.charge_readout_report(complete, tau, int(ctx.cfg["metrics"]["n_fom"]))
    ctx.write_doc("metrics", _doc(
        "metrics",
        contrast_pct=rep.contrast_pct,
        peak={"tau_s": rep.peak.tau, "power_mW": rep.peak.power, "snr": rep.peak.snr},
        eta_c_per_sqrt_hz=rep.eta_c,
        fom_counts=list(rep.fom),
        degenerate=rep.degenerate,
        incomplete_powers_mW=sorted(set(pairs) - set(complete)),
        snr_curve={"tau_s": rep.tau_grid.tolist(), "snr": rep.snr_curve.tolist(),
                   "power_mW": rep.peak.power},
    ))
    ctx.write_table("snr_curve.tsv", ["tau_s", "snr"], list(zip(rep.tau_grid, rep.snr_curve)),
                    [f"probe_power_mW: {rep.peak.power!r}"])
    return EXIT_OK


def _surface(ctx: Context, expected: bool):
    cfg = ctx.cfg
    ens = scc_ensemble(cfg)
    spin = config.spin_params(cfg)
    tmpl = scc_template(cfg)
    p = ctx.grid("scc.power_grid_mW")
    t = ctx.grid("scc.tau_grid_s")
    if expected:
        return scc.spin_snr_surface_expected(ens, spin, tmpl, p, t)
    return scc.spin_snr_surface_from_sim(ens, spin, tmpl, p, t, int(cfg["scc"]["shots_per_point"]),
                                         ctx.seed, threads=ctx.threads)


def _write_surface(ctx: Context, surf) -> None:
    ctx.write_doc("surface", io.surface_to_dict(surf))
    se = surf.snr_se if surf.snr_se is not None else np.full_like(surf.snr, math.nan)
    rows = [(surf.power_grid[i], surf.tau_grid[j], surf.snr[i, j], se[i, j])
            for i in range(surf.power_grid.size) for j in range(surf.tau_grid.size)]
    ctx.write_table("surface.tsv", ["power_mW", "tau_s", "snr", "snr_se"], rows,
                    [f"source: {surf.source.value}", f"tau_i_s: {surf.tau_i!r}"])


def cmd_scc_surface(ctx: Context) -> int:
    _write_surface(ctx, _surface(ctx, bool(ctx.args.get("expected"))))
    return EXIT_OK


def cmd_scc_optimize(ctx: Context) -> int:
    """Speedup curve of SCC over PL readout and its break-even wait time."""
    src = ctx.args.get("surface")
    if src:
        path = Path(src)
        surf = io.surface_from_dict(io.read_doc(path, "surface"))
        ctx.inputs.append(path)
    else:
        surf = _surface(ctx, bool(ctx.args.get("expected")))
        _write_surface(ctx, surf)
    s = ctx.cfg["scc"]
    snr_pl, tau_r_pl = float(s["snr_pl"]), float(s["tau_r_pl_s"])
    tw = ctx.grid("scc.tau_w_grid_s")
    curve = scc.speedup_curve(surf, snr_pl, tw, tau_r_pl)
    probes = [100e-6, float(ctx.cfg["relaxometry"]["tau_w_s"])]
    checkpoints = []
    for x in probes:
        opt = scc.eta_scc(surf, x)
        f = (scc.eta_pl(snr_pl, tau_r_pl, surf.tau_i, x) / opt.eta) ** 2
        checkpoints.append({"tau_w_s": x, "speedup": f, "eta_scc_per_sqrt_hz": opt.eta,
                            "power_mW": opt.power, "tau_r_s": opt.tau_r,
                            "tau_r_refined_s": opt.tau_r_refined})
    ctx.write_doc("speedup", _doc(
        "speedup",
        snr_pl=snr_pl, tau_r_pl_s=tau_r_pl, best_snr_scc=surf.best_snr,
        asymptote=curve.asymptote, break_even_s=curve.break_even,
        checkpoints=checkpoints,
        tau_w_s=curve.tau_w_grid.tolist(), speedup=curve.f_values.tolist(),
    ))
    ctx.write_table("speedup.tsv", ["tau_w_s", "speedup"], list(zip(curve.tau_w_grid, curve.f_values)),
                    [f"break_even_s: {curve.break_even!r}", f"asymptote: {curve.asymptote!r}"])
    return EXIT_OK


def cmd_relaxometry(ctx: Context) -> int:
    """PL and SCC differential relaxometry over a bandwidth sweep."""
    cfg = ctx.cfg
    r = cfg["relaxometry"]
    ens = scc_ensemble(cfg)
    spin = config.spin_params(cfg)
    ro = readout_params(cfg)
    bws = ctx.grid("relaxometry.bandwidths_hz")
    rows = relaxometry.bandwidth_sweep(ens, spin, float(r["tau_w_s"]), ro, bws, int(r["repeats"]),
                                       ctx.seed, protocols=tuple(r["protocols"]))
    by = {}
    for row in rows:
        by.setdefault(row.protocol.value, []).append(row)
    slopes = {p: relaxometry.loglog_slope([x.bandwidth for x in v], [x.mean for x in v])
              for p, v in by.items() if len(v) > 1}
    table = []
    for row in rows:
        se = row.std / math.sqrt(row.repeats)
        table.append((row.protocol.value, row.bandwidth, row.mean, row.std, se, row.prediction,
                      (row.mean - row.prediction) / se if se > 0 else math.nan))
    ratios = []
    if "PL" in by and "SCC" in by:
        for a, b in zip(by["PL"], by["SCC"]):
            ratios.append({"bandwidth_hz": a.bandwidth, "scc_over_pl": b.mean / a.mean})
    ctx.write_doc("relaxometry", _doc(
        "relaxometry",
        tau_w_s=float(r["tau_w_s"]),
        cycle_time_s={p: ro.cycle_time(p, float(r["tau_w_s"])) for p in by},
        loglog_slope=slopes,
        ratio=ratios,
        rows=[dict(protocol=t[0], bandwidth_hz=t[1], snr_mean=t[2], snr_std=t[3], snr_se=t[4],
                   prediction=t[5], z_score=t[6]) for t in table],
    ))
    ctx.write_table("relaxometry.tsv",
                    ["protocol", "bandwidth_hz", "snr_mean", "snr_std", "snr_se", "prediction", "z_score"],
                    table)
    return EXIT_OK


def cmd_calibrate(ctx: Context) -> int:
    """SCC pulse sweeps, PL readout optimum, saturation and T1 fits, KMC checks."""
    cfg = ctx.cfg
    c = cfg["calibration"]
    seed = ctx.seed
    spin = config.spin_params(cfg)
    m = c["mapping"]
    ens = scc_ensemble(cfg)
    mapping = calibration.SCCPulseMapping.for_readout(
        spin, ens, float(c["sweep_probe_power_mW"]), float(c["sweep_probe_duration_s"]),
        shelve_anchor=m["shelve_anchor_s"], delay_anchor=m["delay_anchor_s"],
        ionize_anchor=m["ionize_anchor_s"], shelve_rise=m["shelve_rise_s"],
        isc_time=m["isc_time_s"])
    sweeps = {}
    for axis, key in ((calibration.SweepAxis.SHELVE, "shelve_grid_s"),
                      (calibration.SweepAxis.DELAY, "delay_grid_s"),
                      (calibration.SweepAxis.IONIZE, "ionize_grid_s")):
        res = calibration.scc_pulse_sweep(ens, spin, axis, ctx.grid(f"calibration.{key}"),
                                          int(c["sweep_shots"]), seed,
                                          float(c["sweep_probe_power_mW"]),
                                          float(c["sweep_probe_duration_s"]), mapping)
        ref = calibration.scc_pulse_sweep(ens, spin, axis, res.grid, int(c["sweep_shots"]), seed,
                                          float(c["sweep_probe_power_mW"]),
                                          float(c["sweep_probe_duration_s"]), mapping,
                                          expected=True)
        sweeps[axis.value.lower()] = {"argmax_s": res.argmax, "best_contrast": res.best,
                                      "expected_argmax_s": ref.argmax,
                                      "expected_best_contrast": ref.best}
        ctx.write_table(f"sweep_{axis.value.lower()}.tsv",
                        ["duration_s", "contrast", "contrast_se", "expected_contrast"],
                        list(zip(res.grid, res.response, res.error, ref.response)))
    pl = config.pl_model(cfg)
    con, snr = calibration.pl_readout_calibration(pl, spin, ctx.grid("calibration.pl_power_grid_mW"),
                                                  ctx.grid("calibration.pl_duration_grid_s"),
                                                  int(c["pl_shots"]), seed)
    p_grid, t_grid = snr.grid
    ctx.write_table("pl_readout_snr.tsv", ["power_mW", "duration_s", "snr", "contrast"],
                    [(p_grid[i], t_grid[j], snr.response[i, j], con.response[i, j])
                     for i in range(p_grid.size) for j in range(t_grid.size)])
    sat_p = ctx.grid("calibration.saturation_powers_mW")
    rates = calibration.saturation_measurement(pl, sat_p, int(c["saturation_shots"]), seed)
    sat = fitting.fit_saturation(sat_p, rates)
    ro = readout_params(cfg)
    delays = ctx.grid("relaxometry.t1_delays_s")
    decay = relaxometry.simulate_t1_decay(spin, delays, int(cfg["relaxometry"]["t1_shots"]), ro, seed)
    t1 = fitting.fit_t1(delays, decay)
    k = cfg["kmc"]
    median = nanodiamond(cfg).distributions
    nv = NVParams(**{name: d.median for name, d in median.items()})
    exc = float(cfg["nanodiamond"]["excitation_sat_rate_per_s"])
    kmc = simulate_kmc(nv, float(k["power_mW"]), float(k["duration_s"]), int(k["n_traj"]), seed,
                       excitation_sat_rate=exc)
    scaling = power_scaling_fit(nv, k["powers_mW"], int(k["events_per_power"]), seed,
                                excitation_sat_rate=exc)
    ctx.write_doc("calibration", _doc(
        "calibration",
        scc_sweeps=sweeps,
        scc_mapping_constants_s=mapping.constants,
        pl_readout={"snr_argmax": {"power_mW": snr.argmax[0], "duration_s": snr.argmax[1]},
                    "best_snr": snr.best, "i_sat_mW": pl.i_sat},
        saturation={"pl_sat_per_s": sat.pl_sat, "i_sat_mW": sat.i_sat,
                    "pl_sat_ci_per_s": list(sat.pl_sat_ci), "i_sat_ci_mW": list(sat.i_sat_ci),
                    "unbounded": sat.unbounded},
        t1={"t1_s": t1.t1, "t1_ci_s": list(t1.t1_ci), "unidentifiable": t1.unidentifiable},
        tunneling={"power_mW": float(k["power_mW"]), "measured": kmc.tunneling_fraction,
                   "stderr": kmc.tunneling_fraction_stderr,
                   "expected": expected_tunneling_fraction(nv, float(k["power_mW"]), exc)},
        power_scaling={"powers_mW": scaling["powers"].tolist(),
                       "total_lin_per_s_mW": float(scaling["total_coeffs"][0]),
                       "total_quad_per_s_mW2": float(scaling["total_coeffs"][1]),
                       "configured_lin_per_s_mW": nv.ion_lin + nv.rec_lin,
                       "configured_quad_per_s_mW2": nv.ion_quad + nv.rec_quad},
    ))
    return EXIT_OK


def cmd_survey(ctx: Context) -> int:
    """Full pipeline over a batch of simulated nanodiamonds."""
    cfg = ctx.cfg
    s = cfg["survey"]
    batch = calibration.default_batch(nanodiamond(cfg), int(s["n_items"]), ctx.seed,
                                      tuple(s["n_nv_range"]))
    res = calibration.survey(batch, survey_protocol(cfg))
    items = [{"index": it.index, "seed": it.seed, "n_nv": it.n_nv, "contrast_pct": it.contrast_pct,
              "peak_snr": it.peak_snr, "peak_tau_s": it.peak_tau, "peak_power_mW": it.peak_power,
              "eta_c_per_sqrt_hz": it.eta_c, "fom_counts": list(it.fom), "chosen_n": it.chosen_n}
             for it in res.items]
    ctx.write_doc("survey", _doc(
        "survey",
        n_items=len(batch),
        items=items,
        failures=[{"index": i, "seed": sd, "error": msg} for i, sd, msg in res.failures],
        stats={name: res.stats(name) for name in ("contrast_pct", "peak_snr", "eta_c")},
        fom_pearson_r={str(k): v for k, v in res.fom_correlations().items()},
    ))
    ctx.write_table("survey_items.tsv",
                    ["index", "seed", "n_nv", "contrast_pct", "peak_snr", "peak_tau_s",
                     "peak_power_mW", "eta_c_per_sqrt_hz", "fom1_counts", "fom2_counts", "fom3_counts"],
                    [(it.index, it.seed, it.n_nv, it.contrast_pct, it.peak_snr, it.peak_tau,
                      it.peak_power, it.eta_c, *it.fom) for it in res.items])
    return EXIT_OK


def cmd_report(ctx: Context) -> int:
    """Plot-ready tables gathered from a results directory."""
    src = Path(ctx.args.get("results") or ".")
    if not src.is_dir():
        raise OSError(f"results directory {src} does not exist")
    docs = []
    for path in sorted(src.rglob("*")):
        if path.suffix.lower() not in (".json", ".yaml", ".yml") or path.name.startswith("manifest"):
            continue
        try:
            doc = io.read_doc(path)
        except (io.FormatError, OSError):
            continue
        ctx.inputs.append(path)
        docs.append((path, doc))
    gaps = []
    cfg = ctx.cfg
    nbins = int(cfg["survey"]["histogram_bins"])
    surveys = [(p, d) for p, d in docs if d.get("kind") == "survey"]
    if surveys:
        items = [it for _, d in surveys for it in d["items"]]
        c_edges = ctx.grid("survey.contrast_bins_pct")
        for name, bins in (("contrast_pct", c_edges), ("peak_snr", nbins), ("eta_c_per_sqrt_hz", nbins)):
            vals = np.array([it[name] for it in items], dtype=float)
            vals = vals[np.isfinite(vals)]
            if vals.size == 0:
                gaps.append(f"histogram {name}: no finite values")
                continue
            ctx.write_table(f"hist_{name}.tsv", ["bin_lo", "bin_hi", "count"],
                            calibration.histogram_table(vals, bins))
        snr = np.array([it["peak_snr"] for it in items], dtype=float)
        rows, comments = [], []
        for i in range(3):
            f = np.array([it["fom_counts"][i] for it in items], dtype=float)
            ok = np.isfinite(f) & np.isfinite(snr)
            try:
                r = metrics.pearson(f[ok], snr[ok])
            except ValueError:
                r = math.nan
                gaps.append(f"fom{i + 1}: correlation undefined")
            comments.append(f"pearson_r_fom{i + 1}: {r!r}")
        for it in items:
            rows.append((it["index"], it["peak_snr"], *it["fom_counts"]))
        ctx.write_table("fom_scatter.tsv", ["index", "peak_snr", "fom1_counts", "fom2_counts", "fom3_counts"],
                        rows, comments)
        if any(d["failures"] for _, d in surveys):
            gaps.append("survey has quarantined items")
    else:
        gaps.append("no survey results")
    curves = [(p, d) for p, d in docs if d.get("kind") == "metrics"]
    for p, d in curves:
        c = d["snr_curve"]
        ctx.write_table(f"snr_curve_{p.stem}.tsv", ["tau_s", "snr"], list(zip(c["tau_s"], c["snr"])),
                        [f"probe_power_mW: {c['power_mW']!r}"])
    if not curves:
        gaps.append("no metrics results")
    surfaces = [(p, d) for p, d in docs if d.get("kind") == "surface"]
    for p, d in surfaces:
        surf = io.surface_from_dict(d)
        rows = [(surf.power_grid[i], surf.tau_grid[j], surf.snr[i, j])
                for i in range(surf.power_grid.size) for j in range(surf.tau_grid.size)]
        ctx.write_table(f"surface_{p.parent.name}_{p.stem}.tsv", ["power_mW", "tau_s", "snr"], rows)
    if not surfaces:
        gaps.append("no sensitivity surfaces")
    speedups = [(p, d) for p, d in docs if d.get("kind") == "speedup"]
    for p, d in speedups:
        ctx.write_table(f"speedup_{p.parent.name}_{p.stem}.tsv", ["tau_w_s", "speedup"],
                        list(zip(d["tau_w_s"], d["speedup"])),
                        [f"break_even_s: {d['break_even_s']!r}", f"asymptote: {d['asymptote']!r}"])
    if not speedups:
        gaps.append("no speedup curves")
    if not docs:
        log.warning("no results found in %s; writing an empty report", src)
    ctx.write_doc("report", _doc("report", documents=len(docs), gaps=gaps))
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "select": cmd_select,
    "metrics": cmd_metrics,
    "scc-surface": cmd_scc_surface,
    "scc-optimize": cmd_scc_optimize,
    "relaxometry": cmd_relaxometry,
    "calibrate": cmd_calibrate,
    "survey": cmd_survey,
    "report": cmd_report,
}


# -- driver -------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config layered over the defaults")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config field, e.g. acquisition.shots=10000")
    common.add_argument("--seed", type=int, help="override the master seed")
    common.add_argument("--out", default="ndscc_out", help="output directory")
    common.add_argument("--threads", type=int, help="worker threads (results do not depend on it)")
    common.add_argument("--format", choices=("json", "yaml"), default="json",
                        help="format of structured result files")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="ndscc", description="ndscc command-line interface")
    parser.add_argument("--version", action="version", version=f"ndscc {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="simulate pump/probe charge traces")
    p = sub.add_parser("fit", parents=[common], help="multi-exponential model selection per trace")
    p.add_argument("inputs", nargs="*", help="trace files")
    p.add_argument("--n-max", type=int, dest="n_max")
    p = sub.add_parser("select", parents=[common], help="distribution of chosen term counts")
    p.add_argument("inputs", nargs="*", help="fit result files")
    p = sub.add_parser("metrics", parents=[common], help="charge readout figures of merit")
    p.add_argument("inputs", nargs="*", help="fit result files of one nanodiamond")
    p = sub.add_parser("scc-surface", parents=[common], help="SCC spin SNR surface")
    p.add_argument("--expected", action="store_true", help="semi-analytic surface, no Monte Carlo")
    p = sub.add_parser("scc-optimize", parents=[common], help="SCC sensitivity and speedup over PL")
    p.add_argument("--surface", help="surface file from scc-surface")
    p.add_argument("--expected", action="store_true")
    sub.add_parser("relaxometry", parents=[common], help="differential T1 relaxometry sweep")
    sub.add_parser("calibrate", parents=[common], help="pulse, readout, saturation and T1 calibration")
    sub.add_parser("survey", parents=[common], help="full pipeline over a nanodiamond batch")
    p = sub.add_parser("report", parents=[common], help="plot tables from a results directory")
    p.add_argument("results", nargs="?", help="results directory")
    p = sub.add_parser("replay", help="rerun a manifest and compare output digests")
    p.add_argument("manifest", help="manifest file or directory containing one")
    p.add_argument("--out", required=True, help="directory for the replayed outputs")
    p.add_argument("--threads", type=int)
    p.add_argument("-v", "--verbose", action="store_true")
    return parser


_ARG_KEYS = ("inputs", "n_max", "expected", "surface", "results")


def _command_args(ns: argparse.Namespace) -> dict:
    out = {}
    for key in _ARG_KEYS:
        if hasattr(ns, key):
            v = getattr(ns, key)
            # absolute paths keep a manifest replayable from any working directory
            if key == "inputs":
                v = [str(Path(x).resolve()) for x in v]
            elif key in ("surface", "results") and v:
                v = str(Path(v).resolve())
            out[key] = v
    return out


def execute(command: str, cfg: dict, args: dict, out: Path, fmt: str = "json",
            threads: int | None = None) -> tuple[int, io.RunManifest]:
    """Run one command with a resolved config and write its manifest."""
    threads = int(threads or cfg.get("threads", 1))
    out.mkdir(parents=True, exist_ok=True)
    ctx = Context(cfg, dict(args), out, fmt, threads)
    t0 = time.perf_counter()
    code = COMMANDS[command](ctx)
    manifest = io.RunManifest(
        command=command, config=cfg, seed=ctx.seed, version=__version__,
        args={**args, "format": fmt},
        inputs={str(p): io.sha256_file(p) for p in sorted(set(ctx.inputs))},
        outputs=io.digests(out, ctx.outputs),
        wall_clock_s=time.perf_counter() - t0,
    )
    io.write_manifest(out, manifest)
    return code, manifest


def replay(manifest_path, out: Path, threads: int | None = None) -> tuple[int, list]:
    """Rerun a manifest into ``out``; returns the exit code and mismatching files."""
    man = io.read_manifest(manifest_path)
    cfg = config.validate(man.config)
    for src, digest in man.inputs.items():
        if io.sha256_file(src) != digest:
            raise io.FormatError(f"input {src} changed since the original run")
    args = dict(man.args)
    fmt = args.pop("format", "json")
    code, new = execute(man.command, cfg, args, out, fmt, threads)
    bad = sorted(k for k in set(man.outputs) | set(new.outputs)
                 if man.outputs.get(k) != new.outputs.get(k))
    if code == EXIT_OK and bad:
        code = EXIT_MISMATCH
    return code, bad


def main(argv=None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if ns.command == "replay":
            code, bad = replay(ns.manifest, Path(ns.out), ns.threads)
            for name in bad:
                print(f"mismatch: {name}", file=sys.stderr)
            if not bad:
                print("replay: all outputs identical")
            return code
        overrides = list(ns.overrides)
        if ns.seed is not None:
            overrides.append({"seed": int(ns.seed)})
        cfg = config.load(ns.config, overrides)
        code, man = execute(ns.command, cfg, _command_args(ns), Path(ns.out), ns.format, ns.threads)
        for name in man.outputs:
            log.info("wrote %s", name)
        return code
    except (config.ConfigError, UsageError) as exc:
        print(f"ndscc: validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except fitting.NonConvergenceError as exc:
        print(f"ndscc: numerical non-convergence: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGENCE
    except (OSError, io.FormatError) as exc:
        print(f"ndscc: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"ndscc: validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
