"""Experiment driver: cached stages and plot-ready CSV/JSON outputs.

Stages build on each other: ``simulate`` (propagators) -> ``lyapunov``
(BLV/FLV runs over the trusted window) -> ``psi``, ``benchmark`` and
``bounds``; ``report`` only reads what the others wrote.  Expensive arrays
live in the cache root, keyed by the stage hash of the configuration;
human-facing outputs go to ``config.output_dir``.

Step indices in every output are relative to the start of the trusted window
``[lyapunov.spinup, K - lyapunov.spinup]``.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .bounds import (criterion_ratio, epsilon_window_estimate, gramian_constants,
                     necessary_criterion_tv, sandwich_check, tv_bound_values)
from .cache import CacheError, cache_root, read_blocks, write_blocks
from .config import ExperimentConfig, RunManifest
from .kalman import NoiseModel, ObservationDesign, run_filter
from .l96 import PropagatorSequence, generate_propagators
from .lyapunov import (BACKWARD, FORWARD, LyapunovRun, _max_angles, blv_run, blv_spinup, flv_run,
                       lle_series, lyapunov_spectrum, orthonormality_errors, random_frame,
                       reconstruction_errors)
from .perturbation import psi_series

log = logging.getLogger("unstable_lab")

NOT_RUN = "not run"


def _cached(stage, config: ExperimentConfig, compute, valid=lambda blocks: True):
    """Return ``(blocks, meta)`` from the cache or from ``compute()``."""
    path = cache_root() / f"{stage}-{config.hash(stage)[:20]}.bin"
    if path.exists():
        try:
            blocks, meta = read_blocks(path)
            if valid(blocks):
                log.info("cache hit: %s", path)
                return blocks, meta
            raise CacheError("unexpected block shapes")
        except CacheError as exc:
            warnings.warn(f"corrupt cache {path} ({exc}); regenerating", RuntimeWarning, stacklevel=3)
    log.info("computing %s stage", stage)
    blocks, meta = compute()
    write_blocks(path, blocks, meta)
    RunManifest.create(stage, config, {"cache": path}).write(path.with_suffix(".json"))
    return blocks, meta


def _out(config: ExperimentConfig) -> Path:
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, np.generic):
        return v.item()
    raise TypeError(f"not serializable: {type(v)}")


def _finite(x):
    """JSON has no infinity; encode non-finite floats as strings."""
    x = float(x)
    return x if math.isfinite(x) else str(x)


# ---------------------------------------------------------------- simulate

def cmd_simulate(config: ExperimentConfig) -> PropagatorSequence:
    K, n = config.model.K, config.model.n

    def compute():
        props = generate_propagators(config.model)
        return {"mats": props.mats, "states": props.states}, {"model": config.model.to_dict()}

    blocks, _ = _cached("simulate", config, compute,
                        lambda b: b["mats"].shape == (K, n, n) and b["states"].shape == (K + 1, n))
    return PropagatorSequence(blocks["mats"], blocks["states"], config.model)


# ---------------------------------------------------------------- lyapunov

@dataclass
class LyapunovArtifacts:
    """BLV and FLV runs restricted to the trusted window."""

    props: PropagatorSequence
    blv: LyapunovRun
    flv: LyapunovRun
    pair_angles: np.ndarray
    meta: dict

    @property
    def spectrum(self):
        return lyapunov_spectrum(self.blv, neutral_tol=self.meta["neutral_tol"])

    @property
    def flv_spectrum(self):
        return lyapunov_spectrum(self.flv, neutral_tol=self.meta["neutral_tol"])


def lyapunov_artifacts(config: ExperimentConfig) -> LyapunovArtifacts:
    props = cmd_simulate(config)
    n, seed = props.n, config.seed
    s, e = config.window
    config.require_window(1, "the Lyapunov stage")
    W = e - s

    def compute():
        B_s, diag = blv_spinup(props, random_frame(n, [seed, 1]), s, config.lyapunov.angle_tol,
                               reference=random_frame(n, [seed, 2]))
        blv = blv_run(props.window(s, e), B_s)
        tail = props.window(e)
        F_e = flv_run(tail, random_frame(n, [seed, 3])).frames[0]
        F_ref = flv_run(tail, random_frame(n, [seed, 4])).frames[0]
        flv = flv_run(props.window(s, e), F_e)
        flv_angles = _max_angles(F_e, F_ref, range(1, n))
        meta = {"converged_step": diag.converged_step,
                "flv_final_pair_angle": float(flv_angles.max()),
                "angle_tol": config.lyapunov.angle_tol}
        return {"blv_frames": blv.frames, "blv_triangles": blv.triangles,
                "flv_frames": flv.frames, "flv_triangles": flv.triangles,
                "pair_angles": diag.pair_angles}, meta

    def valid(b):
        return b["blv_frames"].shape == (W + 1, n, n) and b["flv_triangles"].shape == (W, n, n)

    blocks, meta = _cached("lyapunov", config, compute, valid)
    meta = dict(meta, neutral_tol=config.lyapunov.neutral_tol, window=[s, e])
    blv = LyapunovRun(blocks["blv_frames"], blocks["blv_triangles"], FORWARD, s)
    flv = LyapunovRun(blocks["flv_frames"], blocks["flv_triangles"], BACKWARD, s)
    return LyapunovArtifacts(props.window(s, e), blv, flv, blocks["pair_angles"], meta)


def cmd_lyapunov(config: ExperimentConfig) -> dict:
    art = lyapunov_artifacts(config)
    sb, sf = art.spectrum, art.flv_spectrum
    delta = config.model.delta
    out = _out(config)
    rows = [(i + 1, sb.lambdas[i], sb.lambdas[i] / delta, sf.lambdas[i], sf.lambdas[i] / delta)
            for i in range(len(sb.lambdas))]
    _write_csv(out / "spectrum.csv", ["i", "lambda_per_step", "lambda_per_time",
                                      "flv_lambda_per_step", "flv_lambda_per_time"], rows)
    summary = {
        "config_hash": config.hash("lyapunov"),
        "window": art.meta["window"],
        "K_used": sb.K_used,
        "neutral_tol": sb.neutral_tol,
        "delta": delta,
        "n0": sb.n0,
        "n0_flv": sf.n0,
        "lambda_per_step": sb.lambdas,
        "lambda_per_time": sb.lambdas / delta,
        "flv_lambda_per_step": sf.lambdas,
        "max_blv_flv_difference": float(np.abs(sb.lambdas - sf.lambdas).max()),
        "spinup_converged_step": art.meta["converged_step"],
        "flv_final_pair_angle": art.meta["flv_final_pair_angle"],
        "angle_tol": art.meta["angle_tol"],
        "max_reconstruction_error": float(reconstruction_errors(art.props, art.blv).max()),
        "max_orthonormality_error": float(orthonormality_errors(art.blv).max()),
    }
    _write_json(out / "lyapunov.json", summary)
    return summary


# ---------------------------------------------------------------- psi

def cmd_psi(config: ExperimentConfig) -> dict:
    config.require_window(config.psi.K, "psi.K")
    art = lyapunov_artifacts(config)
    K = config.psi.K
    n0 = art.spectrum.n0
    run = art.blv.window(0, K)
    psi = psi_series(run.triangles, n0, config.psi.trunc_tol)
    lle = lle_series(run, config.lyapunov.lle_window)
    out = _out(config)
    modes = psi.modes
    _write_csv(out / "psi.csv", ["k"] + [f"psi_{i}" for i in modes],
               ([k, *psi.values[k]] for k in range(K + 1)))
    n = run.n
    _write_csv(out / "lle.csv", ["k"] + [f"lle_{i}" for i in range(1, n + 1)],
               ([lle.start + j, *lle.values[j]] for j in range(len(lle.values))))
    summary = {"config_hash": config.hash("psi"), "K": K, "n0": n0, "modes": modes,
               "trunc_tol": config.psi.trunc_tol, "lle_window": lle.window,
               "psi_min": float(psi.values.min())}
    for c, i in enumerate(modes):
        # step 0 is the prior (Psi = 1); statistics cover steps 1..K
        summary[f"mean_psi_{i}"] = float(psi.values[1:, c].mean())
        summary[f"max_psi_{i}"] = float(psi.values[1:, c].max())
    std = lle.std()
    for i in range(1, n + 1):
        summary[f"lle_std_{i}"] = float(std[i - 1])
        summary[f"lle_mean_{i}"] = float(lle.values[:, i - 1].mean())
    _write_json(out / "psi.json", summary)
    return summary


# ---------------------------------------------------------------- benchmark

def _noise(config: ExperimentConfig, n, d) -> NoiseModel:
    return NoiseModel.scaled_identity(n, d, config.filter.Q_scale, config.filter.R_scale)


def _run_cell(args):
    kind, d, props, frames, seed, noise, P0, spinup, K_avg = args
    design = ObservationDesign(kind, d, props.n, frames=frames, seed=seed)
    stats = run_filter(props, design, noise, P0=P0, spinup=spinup, K_avg=K_avg)
    return kind, design.d, stats


def cmd_benchmark(config: ExperimentConfig, jobs: int = 1) -> dict:
    f = config.filter
    total = f.spinup + f.K_avg
    config.require_window(total, "filter.spinup + filter.K_avg")
    art = lyapunov_artifacts(config)
    n = art.props.n
    props = art.props.window(0, total)
    P0 = f.P0_scale * np.eye(n)
    tasks = []
    for kind, d in f.designs:
        frames = {"blv": art.blv.frames, "flv": art.flv.frames}.get(kind)
        frames = None if frames is None else frames[:total + 1]
        d_eff = n if kind == "full" else (0 if kind == "none" else d)
        tasks.append((kind, d, props, frames, config.seed, _noise(config, n, d_eff), P0,
                      f.spinup, f.K_avg))
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            results = list(pool.map(_run_cell, tasks))
    else:
        results = [_run_cell(t) for t in tasks]

    out = _out(config)
    cells = out / "cells"
    cells.mkdir(exist_ok=True)
    rows = []
    for kind, d, stats in results:
        _write_csv(cells / f"{kind}_d{d}.csv", ["k", "frobenius", "alpha_running", "beta_running"],
                   zip(range(total), stats.frobenius, stats.alpha_running, stats.beta_running))
        rows.append((kind, d, stats.frobenius_mean))

    n0 = art.spectrum.n0
    psi = psi_series(art.blv.triangles[:total], n0, config.psi.trunc_tol)
    # Psi_k pairs with the forecast P_k, so it is averaged over the same steps
    psi_means = {i: float(psi.mode(i)[f.spinup:total].mean()) for i in psi.modes}
    rows += [(f"psi_{i}", 0, m) for i, m in psi_means.items()]
    _write_csv(out / "benchmark.csv", ["kind", "d", "mean_frobenius"], rows)
    summary = {"config_hash": config.hash("benchmark"), "spinup": f.spinup, "K_avg": f.K_avg,
               "n0": n0, "cells": [{"kind": k, "d": d, "mean_frobenius": m} for k, d, m in rows]}
    _write_json(out / "benchmark.json", summary)
    return summary


def read_benchmark(path) -> dict:
    """``{(kind, d): mean_frobenius}`` from a benchmark CSV."""
    with open(path, newline="") as fh:
        return {(r["kind"], int(r["d"])): float(r["mean_frobenius"]) for r in csv.DictReader(fh)}


# ---------------------------------------------------------------- bounds

def cmd_bounds(config: ExperimentConfig) -> dict:
    f, b = config.filter, config.bounds
    total = f.spinup + f.K_avg
    config.require_window(max(total, b.horizon, b.growth_steps, b.max_window), "the bounds stage")
    art = lyapunov_artifacts(config)
    props, n = art.props, art.props.n
    spec = art.spectrum
    P0 = f.P0_scale * np.eye(n)
    Q = f.Q_scale * np.eye(n)
    out = _out(config)

    full = ObservationDesign("full", n, n)
    none = ObservationDesign("none", 0, n)
    full_run = run_filter(props.window(0, total), full, _noise(config, n, n), P0=P0,
                          spinup=f.spinup, K_avg=f.K_avg)
    crit_full = necessary_criterion_tv(full_run, spec)
    free = run_filter(props.window(0, b.growth_steps), none, _noise(config, n, 0), P0=P0)
    crit_none = necessary_criterion_tv(free, spec)
    growth = np.diff(free.frobenius)
    monotone = bool(np.all(growth > 0))
    rate = float(np.polyfit(np.arange(b.growth_steps), np.log(free.frobenius), 1)[0])

    # sandwich margins over the configured horizon
    rows = []
    sandwich = {}
    for design, noise in ((none, _noise(config, n, 0)), (full, _noise(config, n, n))):
        short = run_filter(props.window(0, b.horizon), design, noise, P0=P0, store_forecasts=True)
        a, bt = (0.0, 0.0) if design.kind == "none" else (short.alpha, short.beta)
        rep = sandwich_check(short.forecasts, props, P0, a, bt, Q, b.horizon)
        sandwich[design.label] = {"alpha": a, "beta": bt, "worst_relative_margin": rep.worst()}
        rows += [(design.label, k + 1, rep.lower_margin[k], rep.upper_margin[k], rep.scale[k])
                 for k in range(b.horizon)]
    _write_csv(out / "sandwich.csv", ["design", "k", "lower_margin", "upper_margin", "scale"], rows)

    # epsilon windows and the resulting asymptotic bounds along each BLV
    rng = np.random.default_rng([config.seed, 5])
    modes = []
    for i in range(1, n + 1):
        est = epsilon_window_estimate(art.blv, i, b.epsilon, b.samples, b.max_window,
                                      lam=spec.lambdas[i - 1], seed=config.seed)
        N = est.N
        anchors = np.sort(rng.choice(np.arange(N, len(props) + 1), size=b.anchors, replace=False))
        entry = {"mode": i, "lambda": spec.lambdas[i - 1], "N": N, "saturated": est.saturated}
        for label, alpha, beta in (("unfiltered", 0.0, 0.0),
                                   ("full", full_run.alpha, full_run.beta)):
            c_a, c_b = gramian_constants(props, Q, alpha, beta, N, anchors)
            up, lo = tv_bound_values(spec.lambdas[i - 1], b.epsilon, N, alpha, beta,
                                     f.Q_scale, f.Q_scale, c_a, c_b)
            p_a, p_b = gramian_constants(props, Q, alpha, beta, N, anchors,
                                         frames=art.blv.frames, mode=i)
            p_up, p_lo = tv_bound_values(spec.lambdas[i - 1], b.epsilon, N, alpha, beta,
                                         f.Q_scale, f.Q_scale, p_a, p_b)
            entry[label] = {"C_alpha": c_a, "C_beta": c_b, "upper": _finite(up),
                            "lower": _finite(lo), "C_alpha_projected": p_a,
                            "C_beta_projected": p_b, "upper_projected": _finite(p_up),
                            "lower_projected": _finite(p_lo)}
        modes.append(entry)

    summary = {
        "config_hash": config.hash("bounds"),
        "criterion_full": {"lambda1": crit_full.lambda1, "sup_sigma1_sq": crit_full.sup_sigma1_sq,
                           "ratio": crit_full.ratio, "satisfied": crit_full.satisfied,
                           "alpha": full_run.alpha, "beta": full_run.beta},
        "criterion_unobserved": {"lambda1": crit_none.lambda1,
                                 "sup_sigma1_sq": crit_none.sup_sigma1_sq,
                                 "ratio": crit_none.ratio, "satisfied": crit_none.satisfied,
                                 "growth_steps": b.growth_steps,
                                 "monotone_growth": monotone,
                                 "decreasing_steps": int(np.sum(growth <= 0)),
                                 "log_growth_rate": rate,
                                 "unbounded_growth_flag": rate > 0 and not crit_none.satisfied,
                                 "final_frobenius": float(free.frobenius[-1])},
        "sandwich": sandwich,
        "epsilon": b.epsilon,
        "modes": modes,
    }
    _write_json(out / "bounds.json", summary)
    return summary


# ---------------------------------------------------------------- report

def _load(path):
    try:
        return json.loads(Path(path).read_text())
    except (OSError, ValueError):
        return None


def _benchmark_checks(table):
    designs = {}
    for (kind, d), m in table.items():
        if not kind.startswith("psi_") and kind not in ("full", "none"):
            designs.setdefault(kind, []).append((d, m))
    monotone = all(all(a[1] >= b[1] for a, b in zip(sorted(v), sorted(v)[1:]))
                   for v in designs.values())
    filtered = [m for (k, _), m in table.items() if not k.startswith("psi_")]
    psi = {int(k[4:]): m for (k, _), m in table.items() if k.startswith("psi_")}
    checks = {"benchmark_monotone": monotone}
    blv = dict(designs.get("blv", []))
    rnd = dict(designs.get("random", []))
    common = sorted(set(blv) & set(rnd))
    checks["blv_le_random"] = all(blv[d] <= rnd[d] for d in common) if common else None
    if psi and filtered:
        lead = min(psi)
        checks["psi_exceeds_filtered"] = psi[lead] > max(filtered)
    return checks


def cmd_report(config: ExperimentConfig) -> tuple[dict, int]:
    """Collect stage outputs; exit code 1 if a required check evaluated false."""
    out = _out(config)
    lyap = _load(out / "lyapunov.json")
    psi = _load(out / "psi.json")
    bounds = _load(out / "bounds.json")
    bench = read_benchmark(out / "benchmark.csv") if (out / "benchmark.csv").exists() else None

    checks = {}
    if lyap is not None:
        checks["n0_matches"] = lyap["n0"] == lyap["n0_flv"]
        checks["blv_flv_agree"] = lyap["max_blv_flv_difference"] <= lyap["neutral_tol"]
    if psi is not None:
        checks["psi_min_ge_1"] = psi["psi_min"] >= 1.0
    if bench is not None:
        checks.update(_benchmark_checks(bench))
    if bounds is not None:
        checks["criterion_full_satisfied"] = bounds["criterion_full"]["satisfied"]
        checks["criterion_unobserved_violated"] = not bounds["criterion_unobserved"]["satisfied"]
        checks["unbounded_growth_flag"] = bounds["criterion_unobserved"]["unbounded_growth_flag"]
        checks["sandwich_ok"] = all(v["worst_relative_margin"] >= -1e-8
                                    for v in bounds["sandwich"].values())
    known = ["n0_matches", "blv_flv_agree", "psi_min_ge_1", "benchmark_monotone", "blv_le_random",
             "psi_exceeds_filtered", "criterion_full_satisfied", "criterion_unobserved_violated",
             "unbounded_growth_flag", "sandwich_ok"]
    status = {k: (NOT_RUN if checks.get(k) is None else bool(checks[k])) for k in known}
    failed = [k for k in config.required if status.get(k, NOT_RUN) is False]
    report = {
        "lyapunov": lyap if lyap is not None else NOT_RUN,
        "psi": psi if psi is not None else NOT_RUN,
        "benchmark": ({f"{k}_{d}": m for (k, d), m in bench.items()} if bench is not None
                      else NOT_RUN),
        "bounds": bounds if bounds is not None else NOT_RUN,
        "checks": status,
        "required": list(config.required),
        "failed_required": failed,
    }
    _write_json(out / "report.json", report)
    lines = [f"{'check':32s} {'status':8s} required"]
    for k in known:
        v = status[k]
        text = v if v == NOT_RUN else ("PASS" if v else "FAIL")
        lines.append(f"{k:32s} {text:8s} {'yes' if k in config.required else ''}")
    if lyap is not None:
        lines.append("")
        lines.append(f"n0 = {lyap['n0']}; lambda per step: "
                     + " ".join(f"{x:.4f}" for x in lyap["lambda_per_step"]))
    (out / "report.txt").write_text("\n".join(lines) + "\n")
    return report, (1 if failed else 0)
