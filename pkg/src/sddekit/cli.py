"""Config-driven experiment runner with deterministic CSV artifacts.

Usage:
    sddekit run <config.toml> [--seed N] [--out DIR] [--workers K]
    sddekit list-models

Every experiment writes one CSV: ``#``-prefixed metadata lines (config hash,
effective master seed, toolkit version), a header row, then one row per
result unit.  Floats are serialized with 17 significant digits and per-path
randomness is keyed by (seed, path index), so identical configs and seeds
produce byte-identical files at any worker count.
"""

from __future__ import annotations

import argparse
import sys
from concurrent.futures import ProcessPoolExecutor
from typing import Sequence

import numpy as np

from . import __version__
from .config import ConfigError, ExperimentConfig, parse_config
from .core import Segment, SimulationError
from .coupling import (
    CouplingControl,
    MetricSpec,
    approximation_paths,
    calibrate_upsilon,
    maximize_mass_bound,
    run_controlled_batch,
    run_synchronous_batch,
    support_probe_paths,
)
from .diagnostics import (
    TailBoundSpec,
    drift_only_driver,
    squared_ou_driver,
    squared_ou_spec,
    summarize_tail_check,
    tail_statistics,
)
from .ergodicity import PhiFunction, fit_rate_envelope, rate_bound, skeleton_distance_curve
from .models import (
    catalog_ids,
    CATALOG,
    default_approximation_levels,
    level_probe_segments,
    make_model,
    mollify_holder_drift,
)
from .seeding import derive_seed, path_noise
from .sensitivity import fd_samples, gradient_samples
from .core import _simulate_states

__all__ = ["main", "run", "list_models", "derive_seed", "write_csv"]


# ---------------------------------------------------------------------------
# CSV emission

def _fmt(value):
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.17g}"
    return str(value)


def write_csv(path, metadata, header, rows):
    """Write `# key: value` metadata lines, a header row, and data rows."""
    import os

    parent = os.path.dirname(str(path))
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for key, value in metadata.items():
            fh.write(f"# {key}: {_fmt(value)}\n")
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


# ---------------------------------------------------------------------------
# worker-pool plumbing

def _chunk_ranges(n, workers):
    workers = max(1, min(workers, n)) if n else 1
    base, extra = divmod(n, workers)
    ranges = []
    start = 0
    for i in range(workers):
        stop = start + base + (1 if i < extra else 0)
        if stop > start:
            ranges.append((start, stop))
        start = stop
    return ranges


def _chunk_entry(payload):
    cfg, start, stop = payload
    return _KIND_CHUNKS[cfg.kind](cfg, start, stop)


def _map_paths(cfg, n_paths, workers):
    """Chunked per-path computation; results concatenate in index order."""
    if n_paths < 1:
        raise ConfigError("params.paths must be >= 1")
    ranges = _chunk_ranges(n_paths, workers)
    if len(ranges) <= 1 or workers <= 1:
        parts = [_KIND_CHUNKS[cfg.kind](cfg, s, e) for s, e in ranges]
    else:
        with ProcessPoolExecutor(max_workers=len(ranges)) as pool:
            parts = list(pool.map(_chunk_entry, [(cfg, s, e) for s, e in ranges]))
    merged = {}
    for key in parts[0]:
        merged[key] = np.concatenate([p[key] for p in parts])
    return merged


# ---------------------------------------------------------------------------
# shared construction helpers

def _build_model(cfg):
    return make_model(cfg.model_id, **cfg.model_params)


def _const_segment(cfg, level):
    return Segment.constant(cfg.grid, float(level))


_FUNCTIONALS = {
    "endpoint": (
        lambda w: w[..., -1, 0],
        lambda xw, uw: uw[..., -1, 0],
    ),
}


# ---------------------------------------------------------------------------
# per-kind chunk computations (pure functions of (cfg, start, stop))

def _simulate_chunk(cfg, start, stop):
    model = _build_model(cfg)
    init = _const_segment(cfg, cfg.params["init_level"])
    steps = cfg.grid.horizon_steps
    increments = path_noise(cfg.seed, range(start, stop), steps, model.dim_noise, cfg.grid.dt)
    block = np.broadcast_to(init.values, (stop - start,) + init.values.shape)
    states, _, _, _ = _simulate_states(model, block, increments, cfg.grid.dt)
    return {"states": states}


def _couple_chunk(cfg, start, stop):
    model = _build_model(cfg)
    p = cfg.params
    x = _const_segment(cfg, p["init_level_x"])
    y = _const_segment(cfg, p["init_level_y"])
    steps = cfg.grid.horizon_steps
    if p["mode"] == "synchronous":
        runs = run_synchronous_batch(model, x, y, steps, stop - start, cfg.seed,
                                     path_indices=range(start, stop))
    elif p["mode"] == "controlled":
        spec = CouplingControl(
            gamma=p["gamma"],
            threshold_mult=p["threshold_mult"],
            mode="with_ledger" if p["with_ledger"] else "plain",
        )
        runs = run_controlled_batch(model, x, y, spec, steps, stop - start, cfg.seed,
                                    path_indices=range(start, stop))
    else:
        raise ConfigError(f"params.mode must be 'synchronous' or 'controlled', got {p['mode']!r}")
    k = steps
    return {
        "gap": np.array([r.gap_at(k) for r in runs]),
        "kl": np.array([r.ledger.kl_half_integral for r in runs]),
        "log_weight": np.array([r.ledger.log_exponent for r in runs]),
        "tau": np.array([-1 if r.tau_step is None else r.tau_step for r in runs]),
        "upsilon": np.array([r.upsilon for r in runs]),
    }


def _approx_chunk(cfg, start, stop):
    model = _build_model(cfg)
    p = cfg.params
    x0 = _const_segment(cfg, p["init_level"])
    horizon = cfg.grid.horizon_steps * cfg.grid.dt
    probe_cloud = level_probe_segments(cfg.grid, default_approximation_levels())
    success_cols = []
    kl_cols = []
    inv_cols = []
    for eps in p["eps_values"]:
        approx = mollify_holder_drift(float(eps), **cfg.model_params)
        upsilon, _ = calibrate_upsilon(model, approx, probe_cloud)
        success, kl, inv_max = approximation_paths(
            model, approx, x0, horizon, p["gamma"], upsilon,
            range(start, stop), cfg.seed, stream_tag=f"approx-{float(eps):.9g}",
        )
        success_cols.append(success)
        kl_cols.append(kl)
        inv_cols.append(inv_max)
    return {
        "success": np.column_stack(success_cols),
        "kl": np.column_stack(kl_cols),
        "inv_max": np.asarray(inv_cols)[None, :],
    }


def _support_chunk(cfg, start, stop):
    model = _build_model(cfg)
    p = cfg.params
    x = _const_segment(cfg, p["init_level"])
    z = _const_segment(cfg, p["target_level"])
    h = cfg.grid.horizon_steps * cfg.grid.dt
    success, kl = support_probe_paths(model, x, z, h, p["delta"], p["lam"],
                                      range(start, stop), cfg.seed)
    return {"success": success, "kl": kl}


def _sensitivity_chunk(cfg, start, stop):
    model = _build_model(cfg)
    p = cfg.params
    x = _const_segment(cfg, p["init_level"])
    z = _const_segment(cfg, p["z_level"])
    if p["f_id"] not in _FUNCTIONALS:
        raise ConfigError(f"unknown functional {p['f_id']!r}; known: {sorted(_FUNCTIONALS)}")
    f, grad_f = _FUNCTIONALS[p["f_id"]]
    cols = {}
    for lam in p["lam_values"]:
        for t in p["t_values"]:
            steps = cfg.grid.step_index(float(t), what="t")
            samples = gradient_samples(model, x, z, f, grad_f, steps, float(lam),
                                       range(start, stop), cfg.seed,
                                       stream_tag=f"sens-{float(lam):.9g}")
            cols[f"g_{lam}_{t}"] = samples
    if p["fd_eps"]:
        for t in p["t_values"]:
            steps = cfg.grid.step_index(float(t), what="t")
            cols[f"fd_{t}"] = fd_samples(model, x, z, f, steps, float(p["fd_eps"]),
                                         range(start, stop), cfg.seed)
    return cols


def _tail_driver_and_spec(cfg):
    p = cfg.params
    dt = cfg.grid.dt
    horizon = cfg.grid.horizon_steps * dt
    if p["driver"] == "sq-ou":
        spec = squared_ou_spec(p["theta"], p["noise_scale"], p["x_cap"], p["delta"], horizon)
        driver = squared_ou_driver(p["theta"], p["noise_scale"], p["x0"], p["x_cap"], dt, horizon)
    else:
        spec = TailBoundSpec(A=p["a_offset"], B=1.0, lam=p["lam_decay"], delta=p["delta"], T=horizon)
        driver = drift_only_driver(spec, p["v0"], dt)
    return driver, spec


def _tail_chunk(cfg, start, stop):
    driver, spec = _tail_driver_and_spec(cfg)
    stats_vals, kept = tail_statistics(driver, spec, range(start, stop), cfg.seed)
    return {"stat": stats_vals, "kept": kept}


_KIND_CHUNKS = {
    "simulate": _simulate_chunk,
    "couple": _couple_chunk,
    "approx-study": _approx_chunk,
    "support-probe": _support_chunk,
    "sensitivity": _sensitivity_chunk,
    "tailcheck": _tail_chunk,
}


# ---------------------------------------------------------------------------
# per-kind row assembly

def _simulate_rows(cfg, workers):
    arrays = _map_paths(cfg, cfg.params["paths"], workers)
    states = arrays["states"]
    grid = cfg.grid
    dim = states.shape[2]
    header = ["path", "step", "t"] + [f"x{j}" for j in range(dim)]
    rows = []
    for i in range(states.shape[0]):
        for k in range(grid.n_states):
            t = (k - grid.delay_steps) * grid.dt
            rows.append((i, k - grid.delay_steps, t, *states[i, k]))
    return {}, header, rows


def _couple_rows(cfg, workers):
    arrays = _map_paths(cfg, cfg.params["paths"], workers)
    upsilon = float(arrays["upsilon"][0]) if len(arrays["upsilon"]) else 0.0
    theta = cfg.params["theta"]
    header = ["path", "gap_h", "ratio", "exceed", "kl", "log_weight", "tau_step"]
    rows = []
    for i, (gap, kl, lw, tau) in enumerate(
        zip(arrays["gap"], arrays["kl"], arrays["log_weight"], arrays["tau"])
    ):
        ratio = gap / upsilon if upsilon > 0 else 0.0
        exceed = bool(upsilon > 0 and gap >= theta * upsilon)
        rows.append((i, float(gap), float(ratio), exceed, float(kl), float(lw), int(tau)))
    meta = {"upsilon": upsilon, "theta": theta,
            "exceed_freq": float(np.mean([r[3] for r in rows])) if rows else 0.0}
    return meta, header, rows


def _approx_rows(cfg, workers):
    if cfg.model_id != "holder-drift":
        raise ConfigError("approx-study runs against model 'holder-drift'")
    model = _build_model(cfg)
    p = cfg.params
    horizon = cfg.grid.horizon_steps * cfg.grid.dt
    probe_cloud = level_probe_segments(cfg.grid, default_approximation_levels())
    probe_values = np.stack([s.values for s in probe_cloud])
    arrays = _map_paths(cfg, p["paths"], workers)
    header = ["eps", "upsilon", "success_freq", "kl_mean", "kl_max", "kl_bound", "paths"]
    rows = []
    for j, eps in enumerate(p["eps_values"]):
        approx = mollify_holder_drift(float(eps), **cfg.model_params)
        upsilon, _ = calibrate_upsilon(model, approx, probe_cloud)
        rinv = np.asarray(approx.diffusion_right_inverse(probe_values), dtype=float)
        inv_sup = max(
            float(np.linalg.norm(rinv, axis=(-2, -1)).max()),
            float(arrays["inv_max"][:, j].max()),
        )
        success = arrays["success"][:, j]
        kl = arrays["kl"][:, j]
        rows.append((
            float(eps), upsilon, float(np.mean(success)), float(np.mean(kl)),
            float(np.max(kl)), 0.5 * horizon * inv_sup**2 * upsilon ** (2 * p["gamma"]),
            p["paths"],
        ))
    return {"gamma": p["gamma"], "horizon": horizon}, header, rows


def _support_rows(cfg, workers):
    p = cfg.params
    arrays = _map_paths(cfg, p["paths"], workers)
    success_prob = float(np.mean(arrays["success"]))
    kl_mean = float(np.mean(arrays["kl"])) if p["lam"] > 0 else 0.0
    lower, best_n = maximize_mass_bound(success_prob, kl_mean)
    header = ["success_prob", "kl_mean", "lower_bound", "best_n", "paths"]
    rows = [(success_prob, kl_mean, lower, best_n, p["paths"])]
    return {"lam": p["lam"], "delta": p["delta"]}, header, rows


def _sensitivity_rows(cfg, workers):
    p = cfg.params
    arrays = _map_paths(cfg, p["paths"], workers)
    header = ["estimator", "lam", "t", "value", "std_error", "paths"]
    rows = []
    for lam in p["lam_values"]:
        for t in p["t_values"]:
            samples = arrays[f"g_{lam}_{t}"]
            se = float(samples.std(ddof=1)) / np.sqrt(len(samples)) if len(samples) > 1 else float("nan")
            rows.append(("representation", float(lam), float(t), float(samples.mean()), se, len(samples)))
    if p["fd_eps"]:
        for t in p["t_values"]:
            samples = arrays[f"fd_{t}"]
            se = float(samples.std(ddof=1)) / np.sqrt(len(samples)) if len(samples) > 1 else float("nan")
            rows.append(("finite-difference", 0.0, float(t), float(samples.mean()), se, len(samples)))
    return {"f_id": p["f_id"]}, header, rows


def _tail_rows(cfg, workers):
    p = cfg.params
    arrays = _map_paths(cfg, p["paths"], workers)
    _, spec = _tail_driver_and_spec(cfg)
    report = summarize_tail_check(arrays["stat"], arrays["kept"], spec, p["r_values"])
    header = ["r", "threshold", "exceed_freq", "n_kept"]
    rows = [
        (r, thr, freq, report.n_kept)
        for r, thr, freq in zip(report.r_grid, report.thresholds, report.frequencies)
    ]
    meta = {
        "driver": p["driver"],
        "n_discarded": report.n_discarded,
        "slope": float("nan") if report.slope is None else report.slope,
        "slope_ci_halfwidth": float("nan") if report.slope_ci_halfwidth is None else report.slope_ci_halfwidth,
    }
    return meta, header, rows


def _ergodic_rows(cfg, workers):
    # the long-run chain is sequential by nature; workers are ignored here
    model = _build_model(cfg)
    p = cfg.params
    x0 = _const_segment(cfg, p["init_level"])
    times = [float(t) for t in p["times"]]
    if times and max(times) > cfg.grid.horizon_steps * cfg.grid.dt + 1e-12:
        raise ConfigError("ergodic times exceed the configured horizon")
    spec = MetricSpec(N=p["metric_n"], gamma=p["metric_gamma"])
    curve = skeleton_distance_curve(
        model, x0, times, p["n_samples"], p["spacing"], p["burn_in"], spec,
        cfg.seed, n_boot=p["bootstrap"],
    )
    phi = PhiFunction("linear", 1.0)
    v_x = float(np.exp(0.5 * np.linalg.norm(x0.values[-1])))
    c_fit, big_c = fit_rate_envelope(
        [row.t for row in curve.rows], [row.distance for row in curve.rows], phi, v_x, 0.5
    )
    header = ["t", "distance", "boot_std", "envelope"]
    rows = [
        (row.t, row.distance, row.boot_std, rate_bound(row.t, v_x, phi, 0.5, c_fit, big_c))
        for row in curve.rows
    ]
    meta = {"fit_c": c_fit, "fit_C": big_c, "n_samples": p["n_samples"]}
    return meta, header, rows


_KIND_ROWS = {
    "simulate": _simulate_rows,
    "couple": _couple_rows,
    "approx-study": _approx_rows,
    "support-probe": _support_rows,
    "sensitivity": _sensitivity_rows,
    "tailcheck": _tail_rows,
    "ergodic": _ergodic_rows,
}


def run(cfg: ExperimentConfig, out_path, workers: int = 1) -> str:
    """Execute one experiment config and write its CSV; returns the path."""
    if cfg.model_id is not None and cfg.model_id not in CATALOG:
        raise ConfigError(
            f"unknown model id {cfg.model_id!r}; known ids: {', '.join(catalog_ids())}"
        )
    extra_meta, header, rows = _KIND_ROWS[cfg.kind](cfg, workers)
    metadata = {
        "toolkit": "sddekit",
        "version": __version__,
        "kind": cfg.kind,
        "model": cfg.model_id if cfg.model_id else "-",
        "config_sha256": cfg.source_sha256,
        "master_seed": cfg.seed,
    }
    metadata.update(extra_meta)
    write_csv(out_path, metadata, header, rows)
    return str(out_path)


def list_models(stream=None):
    stream = stream or sys.stdout
    for mid in catalog_ids():
        entry = CATALOG[mid]
        model = make_model(mid)
        stream.write(
            f"{mid:14s} alpha={model.holder_alpha:<4g} beta={model.holder_beta:<4g} {entry.description}\n"
        )


def _resolve_out(cfg, config_path, out_dir):
    import os

    name = cfg.out if cfg.out else os.path.splitext(os.path.basename(config_path))[0] + ".csv"
    if out_dir:
        return os.path.join(out_dir, os.path.basename(name))
    return name


def main(argv: Sequence[str] = None) -> int:
    parser = argparse.ArgumentParser(prog="sddekit", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    runp = sub.add_parser("run", help="run an experiment config and write its CSV")
    runp.add_argument("config", help="TOML experiment config")
    runp.add_argument("--seed", type=int, default=None, help="override the master seed")
    runp.add_argument("--out", default=None, help="directory for the CSV artifact")
    runp.add_argument("--workers", type=int, default=1, help="worker processes for path batches")
    sub.add_parser("list-models", help="print the built-in model catalog")
    args = parser.parse_args(argv)

    if args.command == "list-models":
        list_models()
        return 0

    try:
        cfg = parse_config(args.config)
        if args.seed is not None:
            from dataclasses import replace

            if args.seed < 0:
                raise ConfigError("--seed must be non-negative")
            cfg = replace(cfg, seed=args.seed)
        out_path = _resolve_out(cfg, args.config, args.out)
        run(cfg, out_path, workers=max(1, args.workers))
    except (ConfigError, ValueError, OSError, SimulationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
