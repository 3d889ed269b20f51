"""Initial-condition sensitivities via a damped derivative process.

The derivative process U tracks, along a fixed base path, the linearized
response to an initial perturbation z, with an extra damping ``-lam * U`` in
its drift.  The damping pushes U to zero exponentially fast at a tunable
rate; the price is a correction term: the gradient of ``E f`` in direction z
equals the mean of ``<grad f, U-window>`` plus ``lam`` times the covariance
of ``f`` with the accumulated stochastic integral of ``sigma^-1 U``.

U is always integrated on the base path's grid with the base path's stored
noise increments; the representation requires the same Brownian path, never
fresh noise.  The estimator centers f by its value at the zero segment; the
weight factor has zero mean, so centering changes no expectation, only the
variance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import stats

from .core import PathGrid, Segment, SddeModel, SimulationError, _simulate_states
from .seeding import path_noise

__all__ = [
    "SensitivityRun",
    "GradientEstimate",
    "DecayFit",
    "solve_U",
    "weight_integral",
    "gradient_samples",
    "estimate_gradient",
    "fd_samples",
    "fd_oracle",
    "decay_diagnostic",
]


@dataclass(frozen=True)
class SensitivityRun:
    """Derivative path for one base path and one direction.

    ``u_path`` starts from the direction segment exactly;
    ``weight_integral`` holds the accumulated ``sigma^-1 U . dW`` (zero when
    a zero-damping run was asked to skip it).
    """

    u_path: PathGrid
    weight_integral: float
    lam: float
    direction: Segment


@dataclass(frozen=True)
class GradientEstimate:
    """Monte Carlo directional-derivative estimate with its standard error."""

    value: float
    std_error: float
    n_paths: int
    lam: float
    t: float


def _require_gradients(model):
    if model.drift_gradient is None or model.diffusion_gradient is None:
        raise ValueError("model must supply drift_gradient and diffusion_gradient")


def _checked_pair_eval(fn, xw, uw, want_shape, step, label):
    out = np.asarray(fn(xw, uw), dtype=float)
    if out.shape != want_shape:
        raise SimulationError(f"{label} returned shape {out.shape}, expected {want_shape}", step=step)
    if not np.all(np.isfinite(out)):
        raise SimulationError(f"{label} returned non-finite values at step {step}", step=step)
    return out


def _integrate_u(model, x_states, increments, dt, lam, z_values):
    b, steps, m = increments.shape
    n = x_states.shape[-1]
    n_window = z_values.shape[-2]
    lag = n_window - 1
    u = np.empty_like(x_states)
    u[:, :n_window] = z_values
    for k in range(steps):
        xw = x_states[:, k : k + n_window]
        uw = u[:, k : k + n_window]
        ga = _checked_pair_eval(model.drift_gradient, xw, uw, (b, n), k, "drift_gradient")
        gs = _checked_pair_eval(model.diffusion_gradient, xw, uw, (b, n, m), k, "diffusion_gradient")
        u_now = u[:, lag + k]
        u[:, n_window + k] = (
            u_now + (ga - lam * u_now) * dt + (gs @ increments[:, k, :, None])[..., 0]
        )
    return u


def _weight_integrals(model, x_states, u_states, increments, dt, n_window):
    if model.diffusion_right_inverse is None:
        raise ValueError("weight integrals require diffusion_right_inverse")
    b, steps, _ = increments.shape
    lag = n_window - 1
    out = np.zeros(b)
    for k in range(steps):
        xw = x_states[:, k : k + n_window]
        rinv = np.asarray(model.diffusion_right_inverse(xw), dtype=float)
        eta = (rinv @ u_states[:, lag + k, :, None])[..., 0]
        out += np.einsum("bm,bm->b", eta, increments[:, k])
    return out


def solve_U(model: SddeModel, x_path: PathGrid, lam: float, z: Segment,
            skip_weight: bool = False) -> SensitivityRun:
    """Integrate the damped derivative process along one recorded base path.

    Reuses the base path's stored noise increments.  The weight integral is
    always recorded for lam > 0; ``skip_weight`` short-circuits it only on
    the lam = 0 fast path.
    """
    _require_gradients(model)
    if lam < 0:
        raise ValueError(f"lam must be non-negative, got {lam}")
    if not z.grid.segment_compatible(x_path.grid):
        raise ValueError("direction segment is on a different grid than the base path")
    grid = x_path.grid
    u = _integrate_u(model, x_path.states[None], x_path.noise_increments[None],
                     grid.dt, lam, z.values[None])
    if lam == 0 and skip_weight:
        weight = 0.0
    else:
        weight = float(_weight_integrals(model, x_path.states[None], u,
                                         x_path.noise_increments[None], grid.dt, grid.n_window)[0])
    u_path = PathGrid(grid, u[0], x_path.noise_increments)
    return SensitivityRun(u_path=u_path, weight_integral=weight, lam=lam, direction=z)


def weight_integral(model: SddeModel, x_path: PathGrid, run: SensitivityRun) -> float:
    """Left-endpoint stochastic integral of ``sigma(base)^-1 U`` against the noise."""
    grid = x_path.grid
    return float(
        _weight_integrals(model, x_path.states[None], run.u_path.states[None],
                          x_path.noise_increments[None], grid.dt, grid.n_window)[0]
    )


def gradient_samples(model, x, z, f, grad_f, steps, lam, path_indices, master_seed,
                     stream_tag="sens"):
    """Per-path terms of the damped representation for the given indices."""
    grid = x.grid
    n_window = grid.n_window
    idx = list(path_indices)
    b = len(idx)
    increments = path_noise(master_seed, idx, steps, model.dim_noise, grid.dt, stream_tag)
    block = np.broadcast_to(x.values, (b,) + x.values.shape)
    x_states, _, _, _ = _simulate_states(model, block, increments, grid.dt)
    u_states = _integrate_u(model, x_states, increments, grid.dt, lam,
                            np.broadcast_to(z.values, (b,) + z.values.shape))
    xw = x_states[:, steps : steps + n_window]
    uw = u_states[:, steps : steps + n_window]
    samples = np.asarray(grad_f(xw, uw), dtype=float).reshape(b)
    if lam > 0:
        weights = _weight_integrals(model, x_states, u_states, increments, grid.dt, n_window)
        f_end = np.asarray(f(xw), dtype=float).reshape(b)
        center = np.asarray(f(np.zeros((1, n_window, model.dim_state))), dtype=float)
        samples = samples + lam * (f_end - float(center.reshape(1)[0])) * weights
    return samples


def estimate_gradient(model: SddeModel, x: Segment, z: Segment, f: Callable,
                      grad_f: Callable, t: float, lam: float, n_paths: int,
                      master_seed: int, stream_tag: str = "sens") -> GradientEstimate:
    """Directional derivative of ``E_x f`` at time t by the damped representation.

    ``f`` maps a window array to a scalar per path; ``grad_f(x_window,
    u_window)`` returns the pairing of the gradient of f at the base window
    with the derivative window.  Requires the diffusion right inverse
    whenever lam > 0.
    """
    _require_gradients(model)
    if lam < 0:
        raise ValueError(f"lam must be non-negative, got {lam}")
    if lam > 0 and model.diffusion_right_inverse is None:
        raise ValueError("lam > 0 requires the model to declare diffusion_right_inverse")
    steps = x.grid.step_index(t, what="t")
    samples = gradient_samples(model, x, z, f, grad_f, steps, lam, range(n_paths),
                               master_seed, stream_tag)
    se = float(samples.std(ddof=1)) / math.sqrt(n_paths) if n_paths > 1 else float("nan")
    return GradientEstimate(float(samples.mean()), se, n_paths, lam, t)


def fd_samples(model, x, z, f, steps, eps, path_indices, master_seed, stream_tag="fd"):
    """Per-path common-random-number difference quotients for the given indices."""
    if eps == 0:
        raise ValueError("eps must be nonzero")
    grid = x.grid
    n_window = grid.n_window
    idx = list(path_indices)
    b = len(idx)
    increments = path_noise(master_seed, idx, steps, model.dim_noise, grid.dt, stream_tag)
    base = np.broadcast_to(x.values, (b,) + x.values.shape)
    bumped = np.broadcast_to(x.values + eps * z.values, (b,) + x.values.shape)
    s0, _, _, _ = _simulate_states(model, base, increments, grid.dt)
    s1, _, _, _ = _simulate_states(model, bumped, increments, grid.dt)
    f0 = np.asarray(f(s0[:, steps : steps + n_window]), dtype=float).reshape(b)
    f1 = np.asarray(f(s1[:, steps : steps + n_window]), dtype=float).reshape(b)
    return (f1 - f0) / eps


def fd_oracle(model: SddeModel, x: Segment, z: Segment, f: Callable, t: float,
              eps: float, n_paths: int, master_seed: int,
              stream_tag: str = "fd") -> GradientEstimate:
    """Common-random-number finite difference ``(f(X^(x+eps z)) - f(X^x)) / eps``.

    Both initial conditions ride identical noise streams path by path, so the
    standard error is that of the per-path differences.
    """
    steps = x.grid.step_index(t, what="t")
    diffs = fd_samples(model, x, z, f, steps, eps, range(n_paths), master_seed, stream_tag)
    se = float(diffs.std(ddof=1)) / math.sqrt(n_paths) if n_paths > 1 else float("nan")
    return GradientEstimate(float(diffs.mean()), se, n_paths, 0.0, t)


@dataclass(frozen=True)
class DecayFit:
    """Least-squares decay rate of the mean squared derivative norm.

    ``rate`` is the slope of log E||U-window||^2 against time; ``degenerate``
    flags an identically zero batch, where no rate exists.
    """

    rate: Optional[float]
    ci_halfwidth: Optional[float]
    intercept: Optional[float]
    degenerate: bool
    n_runs: int


def decay_diagnostic(runs: Sequence[SensitivityRun], times: Sequence[float]) -> DecayFit:
    """Fit the exponential decay rate of a batch of derivative paths."""
    if len(times) < 2:
        raise ValueError("need at least two time points")
    if len(runs) < 100:
        raise ValueError(f"need at least 100 runs for the decay fit, got {len(runs)}")
    grid = runs[0].u_path.grid
    ks = [grid.step_index(t, what="t") for t in times]
    means = []
    for k in ks:
        norms = np.array([
            np.linalg.norm(r.u_path.states[k : k + grid.n_window], axis=1).max() for r in runs
        ])
        means.append(float(np.mean(norms**2)))
    means = np.asarray(means)
    if np.all(means == 0.0):
        return DecayFit(None, None, None, True, len(runs))
    if np.any(means <= 0.0):
        raise ValueError("mean squared norm vanished at some times but not all; rate undefined")
    tt = np.asarray(times, dtype=float)
    y = np.log(means)
    design = np.column_stack([tt, np.ones_like(tt)])
    coef, res, _, _ = np.linalg.lstsq(design, y, rcond=None)
    slope, intercept = float(coef[0]), float(coef[1])
    dof = len(tt) - 2
    if dof > 0:
        rss = float(res[0]) if len(res) else float(np.sum((y - design @ coef) ** 2))
        s2 = rss / dof
        sxx = float(np.sum((tt - tt.mean()) ** 2))
        half = stats.t.ppf(0.975, dof) * math.sqrt(s2 / sxx)
    else:
        half = float("inf")
    return DecayFit(slope, half, intercept, False, len(runs))
