"""Synchronous and drift-controlled pairings of delay-equation paths.

Two constructions share one engine: the *synchronous* pairing drives two
solutions with the identical Brownian path, and the *controlled* pairing adds
to the second leg a pull ``upsilon^(gamma-1) (X - Y)`` that is switched off
from the first grid time at which ``|X - Y|`` reaches a threshold multiple of
the initial gap ``upsilon``.  Switching off at (not after) the crossing step
keeps every recorded control below ``threshold_mult * upsilon^gamma`` in
magnitude, and caps the ledger KL at
``(1/2) T sup|sigma^-1|^2 (threshold_mult * upsilon^gamma)^2`` pathwise.

On top of the runs sit the truncated Holder metric, contraction estimates
with their Pinsker total-variation companion, the threshold arithmetic for
metric contraction constants, the drift-mollification study, and the bridge
probe that lower-bounds the mass the uncontrolled law puts near a target
segment.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .core import (
    GridMismatchError,
    PathGrid,
    Segment,
    SddeModel,
    TimeGrid,
    _as_increments,
    _advance,
    _eval_diffusion,
    _eval_drift,
    _simulate_states,
    sup_dist,
)
from .girsanov import GirsanovLedger, pinsker_tv_bound
from .seeding import path_noise

__all__ = [
    "MetricSpec",
    "CouplingControl",
    "CoupledRun",
    "ContractionReport",
    "ApproximationRow",
    "ApproximationReport",
    "SupportProbeReport",
    "d_metric",
    "run_synchronous",
    "run_synchronous_batch",
    "run_controlled",
    "run_controlled_batch",
    "contraction_estimate",
    "n0_bound",
    "calibrate_upsilon",
    "approximation_paths",
    "approximation_study",
    "support_probe_paths",
    "maximize_mass_bound",
    "support_probe",
]


@dataclass(frozen=True)
class MetricSpec:
    """Truncated Holder metric ``min(N * dist^gamma, 1)`` on segments."""

    N: float = 1.0
    gamma: float = 1.0

    def __post_init__(self):
        if not self.N >= 1.0:
            raise ValueError(f"N must be >= 1, got {self.N}")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in (0, 1], got {self.gamma}")


def d_metric(x: Segment, y: Segment, spec: MetricSpec) -> float:
    """Value of the truncated metric, always in [0, 1]."""
    return min(spec.N * sup_dist(x, y) ** spec.gamma, 1.0)


@dataclass(frozen=True)
class CouplingControl:
    """Control law for the second leg of a coupled run.

    ``gamma`` sets the pull strength ``upsilon^(gamma-1)``; the pull is armed
    while ``|X - Y| < threshold_mult * upsilon``.  Mode ``with_ledger`` also
    prices the pull through the diffusion right inverse into a Girsanov
    ledger.
    """

    gamma: float
    threshold_mult: float = 2.0
    mode: str = "plain"

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in (0, 1], got {self.gamma}")
        if not self.threshold_mult > 0:
            raise ValueError("threshold_mult must be positive")
        if self.mode not in ("plain", "with_ledger"):
            raise ValueError(f"mode must be 'plain' or 'with_ledger', got {self.mode!r}")


@dataclass(frozen=True)
class CoupledRun:
    """One pair of trajectories driven by the identical noise stream.

    ``tau_step`` is the first grid index at which the gap reached the
    stopping threshold (None if it never did); ``control_record[k]`` is the
    drift pull applied on step k and is zero from ``tau_step`` on.
    """

    path_x: PathGrid
    path_y: PathGrid
    control_record: np.ndarray
    tau_step: Optional[int]
    upsilon: float
    ledger: GirsanovLedger

    def gap_at(self, k):
        return sup_dist(self.path_x.segment_at(k), self.path_y.segment_at(k))


def _coupled_states(model_x, model_y, x_values, y_values, increments, dt,
                    coef, threshold, with_ledger):
    """Two-leg Euler recursion under shared noise with an armed drift pull.

    Returns (states_x, states_y, control_record, tau, kl, log_exp, inv_max);
    tau is -1 where the threshold was never reached.
    """
    b, steps, _ = increments.shape
    n_window = x_values.shape[-2]
    lag = n_window - 1
    n = x_values.shape[-1]
    if with_ledger and model_y.diffusion_right_inverse is None:
        raise ValueError("mode 'with_ledger' requires the model to declare diffusion_right_inverse")
    sx = np.empty((b, n_window + steps, n))
    sy = np.empty_like(sx)
    sx[:, :n_window] = x_values
    sy[:, :n_window] = y_values
    record = np.zeros((b, steps, n))
    tau = np.full(b, -1, dtype=int)
    armed = np.ones(b, dtype=bool)
    kl = np.zeros(b)
    log_exp = np.zeros(b)
    inv_max = 0.0
    controlled = coef != 0.0
    for k in range(steps):
        wx = sx[:, k : k + n_window]
        wy = sy[:, k : k + n_window]
        chi = None
        if controlled:
            gap = sx[:, lag + k] - sy[:, lag + k]
            crossed = armed & (np.linalg.norm(gap, axis=1) >= threshold)
            tau[crossed] = k
            armed &= ~crossed
            chi = np.where(armed[:, None], coef * gap, 0.0)
            record[:, k] = chi
        ax = _eval_drift(model_x, wx, k)
        gx = _eval_diffusion(model_x, wx, k)
        ay = _eval_drift(model_y, wy, k)
        gy = _eval_diffusion(model_y, wy, k)
        dw = increments[:, k]
        dw_col = dw[..., None]
        sx[:, n_window + k] = _advance(sx[:, lag + k], ax, gx, dw_col, dt)
        sy[:, n_window + k] = _advance(sy[:, lag + k], ay, gy, dw_col, dt, chi)
        if with_ledger and chi is not None:
            rinv = np.asarray(model_y.diffusion_right_inverse(wy), dtype=float)
            inv_max = max(inv_max, float(np.linalg.norm(rinv, axis=(-2, -1)).max()))
            eta = (rinv @ chi[..., None])[..., 0]
            quad = 0.5 * np.einsum("bm,bm->b", eta, eta) * dt
            kl += quad
            log_exp += np.einsum("bm,bm->b", eta, dw) - quad
    if controlled:
        gap = sx[:, -1] - sy[:, -1]
        crossed = armed & (np.linalg.norm(gap, axis=1) >= threshold)
        tau[crossed] = steps
    return sx, sy, record, tau, kl, log_exp, inv_max


def _materialize_runs(grid, sx, sy, increments, record, tau, kl, log_exp, upsilon, t_elapsed):
    runs = []
    for i in range(sx.shape[0]):
        runs.append(
            CoupledRun(
                path_x=PathGrid(grid, sx[i], increments[i]),
                path_y=PathGrid(grid, sy[i], increments[i]),
                control_record=record[i],
                tau_step=None if tau[i] < 0 else int(tau[i]),
                upsilon=upsilon,
                ledger=GirsanovLedger(float(kl[i]), float(log_exp[i]), t_elapsed),
            )
        )
    return runs


def _check_pair(model, x, y):
    if not x.grid.segment_compatible(y.grid):
        raise GridMismatchError("coupled initial segments live on different grids")
    if x.dim != model.dim_state or y.dim != model.dim_state:
        raise ValueError("initial segment dimension does not match the model")


def run_synchronous(model: SddeModel, x: Segment, y: Segment, steps: int, noise) -> CoupledRun:
    """Drive both initial segments with one Brownian path and no control."""
    _check_pair(model, x, y)
    dt = x.grid.dt
    increments = _as_increments(noise, steps, model.dim_noise, dt)[None]
    sx, sy, record, tau, kl, le, _ = _coupled_states(
        model, model, x.values[None], y.values[None], increments, dt, 0.0, math.inf, False
    )
    grid = TimeGrid(dt, x.grid.delay_steps, steps)
    return _materialize_runs(grid, sx, sy, increments, record, tau, kl, le,
                             sup_dist(x, y), steps * dt)[0]


def run_synchronous_batch(model, x, y, steps, n_paths, master_seed, stream_tag="couple",
                          path_indices=None):
    """Independent synchronous runs with per-path derived noise streams."""
    _check_pair(model, x, y)
    dt = x.grid.dt
    idx = range(n_paths) if path_indices is None else list(path_indices)
    increments = path_noise(master_seed, idx, steps, model.dim_noise, dt, stream_tag)
    b = increments.shape[0]
    xb = np.broadcast_to(x.values, (b,) + x.values.shape)
    yb = np.broadcast_to(y.values, (b,) + y.values.shape)
    sx, sy, record, tau, kl, le, _ = _coupled_states(
        model, model, xb, yb, increments, dt, 0.0, math.inf, False
    )
    grid = TimeGrid(dt, x.grid.delay_steps, steps)
    return _materialize_runs(grid, sx, sy, increments, record, tau, kl, le,
                             sup_dist(x, y), steps * dt)


def _controlled_setup(model, x, y, spec):
    _check_pair(model, x, y)
    cap = min(model.holder_alpha, 2.0 * model.holder_beta - 1.0)
    if spec.gamma >= cap:
        warnings.warn(
            f"gamma={spec.gamma} is not below min(alpha, 2*beta - 1)={cap:.3g}; "
            "the contraction construction is outside its declared regime",
            stacklevel=3,
        )
    upsilon = sup_dist(x, y)
    if upsilon == 0.0:
        warnings.warn("initial segments coincide; running the synchronous pairing", stacklevel=3)
        return 0.0, 0.0, math.inf
    return upsilon, upsilon ** (spec.gamma - 1.0), spec.threshold_mult * upsilon


def run_controlled(model: SddeModel, x: Segment, y: Segment, spec: CouplingControl,
                   steps: int, noise) -> CoupledRun:
    """Controlled pairing: same noise plus an armed pull of Y toward X."""
    upsilon, coef, threshold = _controlled_setup(model, x, y, spec)
    dt = x.grid.dt
    increments = _as_increments(noise, steps, model.dim_noise, dt)[None]
    sx, sy, record, tau, kl, le, _ = _coupled_states(
        model, model, x.values[None], y.values[None], increments, dt,
        coef, threshold, spec.mode == "with_ledger",
    )
    grid = TimeGrid(dt, x.grid.delay_steps, steps)
    return _materialize_runs(grid, sx, sy, increments, record, tau, kl, le,
                             upsilon, steps * dt)[0]


def run_controlled_batch(model, x, y, spec, steps, n_paths, master_seed, stream_tag="couple",
                         path_indices=None):
    """Independent controlled runs with per-path derived noise streams."""
    upsilon, coef, threshold = _controlled_setup(model, x, y, spec)
    dt = x.grid.dt
    idx = range(n_paths) if path_indices is None else list(path_indices)
    increments = path_noise(master_seed, idx, steps, model.dim_noise, dt, stream_tag)
    b = increments.shape[0]
    xb = np.broadcast_to(x.values, (b,) + x.values.shape)
    yb = np.broadcast_to(y.values, (b,) + y.values.shape)
    sx, sy, record, tau, kl, le, _ = _coupled_states(
        model, model, xb, yb, increments, dt, coef, threshold, spec.mode == "with_ledger"
    )
    grid = TimeGrid(dt, x.grid.delay_steps, steps)
    return _materialize_runs(grid, sx, sy, increments, record, tau, kl, le,
                             upsilon, steps * dt)


@dataclass(frozen=True)
class ContractionReport:
    """Batch summary at one measurement time.

    ``exceed_prob`` is the fraction of runs whose segment gap at time h is at
    least ``theta * upsilon``; ``mean_ratio`` averages gap/upsilon;
    ``tv_bound`` is the Pinsker bound from the mean ledger KL.  A batch
    started from coinciding segments is flagged ``degenerate`` and reports
    zeros.
    """

    exceed_prob: float
    mean_ratio: float
    tv_bound: float
    n_runs: int
    degenerate: bool = False


def contraction_estimate(runs: Sequence[CoupledRun], h: float, theta: float) -> ContractionReport:
    """Exceedance frequency and mean contraction ratio of a coupled batch."""
    if not runs:
        raise ValueError("empty batch of coupled runs")
    first = runs[0]
    for r in runs[1:]:
        if not (
            np.array_equal(r.path_x.initial_segment().values, first.path_x.initial_segment().values)
            and np.array_equal(r.path_y.initial_segment().values, first.path_y.initial_segment().values)
        ):
            raise ValueError("all runs in a contraction batch must share the initial pair")
    k = first.path_x.grid.step_index(h, what="h")
    upsilon = first.upsilon
    kl_mean = float(np.mean([r.ledger.kl_half_integral for r in runs]))
    if upsilon == 0.0:
        return ContractionReport(0.0, 0.0, pinsker_tv_bound(kl_mean), len(runs), degenerate=True)
    gaps = np.array([r.gap_at(k) for r in runs])
    return ContractionReport(
        exceed_prob=float(np.mean(gaps >= theta * upsilon)),
        mean_ratio=float(np.mean(gaps / upsilon)),
        tv_bound=pinsker_tv_bound(kl_mean),
        n_runs=len(runs),
    )


def n0_bound(theta: float, theta1: float, gamma: float, c_tv: float, c_p: float,
             upsilon0: float) -> float:
    """Metric truncation level above which the contraction factor theta1 holds.

    Combines the gap-threshold level ``upsilon0^(-gamma)`` with the
    total-variation and exceedance budget ``(c_p + c_tv) / (theta1 - theta^gamma)``.
    """
    if not 0.0 < theta < 1.0:
        raise ValueError(f"theta must lie in (0, 1), got {theta}")
    if not 0.0 < gamma <= 1.0:
        raise ValueError(f"gamma must lie in (0, 1], got {gamma}")
    if c_tv < 0 or c_p < 0:
        raise ValueError("budget constants must be non-negative")
    if not upsilon0 > 0:
        raise ValueError("upsilon0 must be positive")
    base = theta**gamma
    if not base < theta1 < 1.0:
        raise ValueError(f"theta1 must lie in (theta^gamma, 1) = ({base:.6g}, 1), got {theta1}")
    n1 = upsilon0 ** (-gamma)
    n2 = (c_p + c_tv) / (theta1 - base)
    return max(n1, n2)


@dataclass(frozen=True)
class ApproximationRow:
    eps: float
    upsilon: float
    floored: bool
    success_freq: float
    kl_mean: float
    kl_max: float
    kl_bound: float
    n_paths: int


@dataclass(frozen=True)
class ApproximationReport:
    """Per-epsilon tube-tracking frequencies for a mollified family."""

    rows: tuple
    gamma: float
    horizon: float


def _family_gap(model, approx, probe_values):
    a0 = np.asarray(model.drift(probe_values), dtype=float)
    a1 = np.asarray(approx.drift(probe_values), dtype=float)
    s0 = np.asarray(model.diffusion(probe_values), dtype=float)
    s1 = np.asarray(approx.diffusion(probe_values), dtype=float)
    da = float(np.linalg.norm(a1 - a0, axis=-1).max())
    ds = float(np.linalg.norm(s1 - s0, axis=(-2, -1)).max())
    return da, ds


def calibrate_upsilon(model: SddeModel, approx: SddeModel, probe_cloud: Sequence[Segment],
                      floor: float = 1e-12):
    """Tube radius from coefficient gaps over a probe cloud.

    Drift gap enters at power 1/alpha, diffusion gap at power 1/beta; the
    radius is floored to keep the pull strength finite when the family
    coincides with the model.  Returns (upsilon, floored).
    """
    probe_values = np.stack([s.values for s in probe_cloud])
    da, ds = _family_gap(model, approx, probe_values)
    upsilon = max(da ** (1.0 / model.holder_alpha), ds ** (1.0 / model.holder_beta))
    if upsilon < floor:
        return floor, True
    return upsilon, False


def approximation_paths(model: SddeModel, approx: SddeModel, x0: Segment, horizon: float,
                        gamma: float, upsilon: float, path_indices, master_seed: int,
                        stream_tag: str):
    """Per-path tube outcomes for one smoothing level.

    Returns (success flags, ledger KL, max inverse norm seen) for the given
    path indices; every quantity depends only on the per-path stream, so
    chunked calls compose.
    """
    dt = x0.grid.dt
    steps = x0.grid.step_index(horizon, what="horizon")
    coef = upsilon ** (gamma - 1.0)
    idx = list(path_indices)
    increments = path_noise(master_seed, idx, steps, model.dim_noise, dt, stream_tag)
    block = np.broadcast_to(x0.values, (len(idx),) + x0.values.shape)
    sx, sy, _, _, kl, _, inv_max = _coupled_states(
        model, approx, block, block, increments, dt, coef, upsilon, True
    )
    lag = x0.grid.delay_steps
    gaps = np.linalg.norm(sx[:, lag:] - sy[:, lag:], axis=2)
    return gaps.max(axis=1) <= upsilon, kl, inv_max


def approximation_study(model: SddeModel, mollified, x0: Segment, horizon: float,
                        gamma: float, paths: int, probe_cloud: Sequence[Segment],
                        master_seed: int, upsilon_floor: float = 1e-12) -> ApproximationReport:
    """Tube-tracking study of a Lipschitz family against the original model.

    ``mollified`` maps each smoothing level eps to an approximating model.
    For each eps the controlled leg runs the approximating coefficients under
    the original path's noise, pulled toward it with strength
    ``upsilon^(gamma-1)`` inside the tube of radius ``upsilon``, where
    upsilon is calibrated from the coefficient gaps over the probe cloud
    (drift gap to the power 1/alpha, diffusion gap to the power 1/beta).
    Reports the frequency of staying in the tube over the whole horizon and
    the ledger KL against its pathwise cap.
    """
    if not probe_cloud:
        raise ValueError("probe cloud must be nonempty")
    if x0.dim != model.dim_state:
        raise ValueError("initial segment dimension does not match the model")
    items = sorted(mollified.items(), reverse=True) if isinstance(mollified, dict) else list(mollified)
    probe_values = np.stack([s.values for s in probe_cloud])
    rows = []
    for eps, approx in items:
        if approx.diffusion_right_inverse is None:
            raise ValueError("the mollified family must declare diffusion_right_inverse")
        upsilon, floored = calibrate_upsilon(model, approx, probe_cloud, upsilon_floor)
        success, kl, inv_max = approximation_paths(
            model, approx, x0, horizon, gamma, upsilon, range(paths), master_seed,
            stream_tag=f"approx-{eps:.9g}",
        )
        rinv_probe = np.asarray(approx.diffusion_right_inverse(probe_values), dtype=float)
        inv_sup = max(inv_max, float(np.linalg.norm(rinv_probe, axis=(-2, -1)).max()))
        rows.append(
            ApproximationRow(
                eps=float(eps),
                upsilon=float(upsilon),
                floored=floored,
                success_freq=float(np.mean(success)),
                kl_mean=float(np.mean(kl)),
                kl_max=float(np.max(kl)),
                kl_bound=0.5 * horizon * inv_sup**2 * upsilon ** (2.0 * gamma),
                n_paths=paths,
            )
        )
    return ApproximationReport(rows=tuple(rows), gamma=gamma, horizon=horizon)


@dataclass(frozen=True)
class SupportProbeReport:
    """Bridge-probe outcome: hit frequency, mean KL cost, and the mass bound."""

    success_prob: float
    kl_mean: float
    lower_bound: float
    best_n: float
    n_paths: int


def bridge_target(x_grid: TimeGrid, z: Segment, h: float):
    """Piecewise target for the bridge pull: ramp to z(-r), then z itself.

    Returns the target values on grid steps 0..h/dt.
    """
    steps = x_grid.step_index(h, what="h")
    if h <= x_grid.delay:
        raise ValueError(f"bridge horizon h={h} must exceed the delay {x_grid.delay}")
    lead = steps - x_grid.delay_steps
    target = np.empty((steps + 1, z.dim))
    ramp = np.arange(lead) / lead
    target[:lead] = ramp[:, None] * z.values[0]
    target[lead:] = z.values
    return target


def support_probe_paths(model: SddeModel, x: Segment, z: Segment, h: float, delta: float,
                        lam: float, path_indices, master_seed: int):
    """Per-path bridge outcomes: (hit flags, ledger KL) for the given indices."""
    if delta <= 0:
        raise ValueError(f"delta must be positive, got {delta}")
    if lam < 0:
        raise ValueError(f"lam must be non-negative, got {lam}")
    if not x.grid.segment_compatible(z.grid):
        raise GridMismatchError("start and target segments live on different grids")
    dt = x.grid.dt
    steps = x.grid.step_index(h, what="h")
    target = bridge_target(x.grid, z, h)
    use_ledger = lam > 0
    if use_ledger and model.diffusion_right_inverse is None:
        raise ValueError("support probe with lam > 0 requires diffusion_right_inverse")

    def control(k, window):
        return -lam * (window[:, -1, :] - target[k])

    idx = list(path_indices)
    increments = path_noise(master_seed, idx, steps, model.dim_noise, dt, "support")
    x_block = np.broadcast_to(x.values, (len(idx),) + x.values.shape)
    states, kl, _, _ = _simulate_states(
        model, x_block, increments, dt,
        control=control if lam != 0 else None,
        ledger=use_ledger,
    )
    final = states[:, steps:]
    gaps = np.linalg.norm(final - z.values, axis=2).max(axis=1)
    return gaps <= delta, kl


def maximize_mass_bound(success_prob: float, kl: float, log_n_grid=None):
    """Maximize the mass lower bound over a log-spaced grid of levels N."""
    if log_n_grid is None:
        log_n_grid = np.linspace(0.05, 250.0, 2000)
    ns = np.exp(np.asarray(log_n_grid, dtype=float))
    vals = success_prob / ns - (kl + math.log(2.0)) / (ns * np.log(ns))
    best = int(np.argmax(vals))
    return float(vals[best]), float(ns[best])


def support_probe(model: SddeModel, x: Segment, z: Segment, h: float, delta: float,
                  lam: float, paths: int, master_seed: int,
                  log_n_grid=None) -> SupportProbeReport:
    """Pull paths toward a bridge ending at segment z and price the pull.

    Runs ``paths`` independent copies of the equation with the extra drift
    ``-lam (X - target)``, counts how often the final segment lands within
    ``delta`` of z in sup-distance, averages the ledger KL of the pull, and
    maximizes the mass lower bound over a log-spaced grid of truncation
    levels N.
    """
    success, kl = support_probe_paths(model, x, z, h, delta, lam, range(paths), master_seed)
    success_prob = float(np.mean(success))
    kl_mean = float(np.mean(kl)) if lam > 0 else 0.0
    lower, best_n = maximize_mass_bound(success_prob, kl_mean, log_n_grid)
    return SupportProbeReport(
        success_prob=success_prob,
        kl_mean=kl_mean,
        lower_bound=lower,
        best_n=best_n,
        n_paths=paths,
    )
