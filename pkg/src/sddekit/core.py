"""Time grids, delay segments, SDDE models, and the Euler-Maruyama segment integrator.

The state of a delay equation is a *segment*: the trailing window of the path
over one delay length, sampled on a uniform grid.  Model callbacks receive the
raw window array of shape ``(..., L + 1, n)`` (trailing axes: grid point,
state component) and must accept leading batch axes; plain numpy arithmetic on
the window taps gives this for free, and every catalog model does it.

Segment sup-norms are grid maxima of pointwise Euclidean norms, a discrete
proxy for the continuous supremum with O(dt) bias for paths of bounded
modulus.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "GridMismatchError",
    "SimulationError",
    "TimeGrid",
    "Segment",
    "PathGrid",
    "SddeModel",
    "AssumptionReport",
    "sup_dist",
    "segment_at",
    "em_step",
    "em_simulate",
    "em_simulate_batch",
    "verify_assumptions",
]

_REL_TOL = 1e-9


class GridMismatchError(ValueError):
    """Two objects live on incompatible time grids."""


class SimulationError(RuntimeError):
    """An integrator step produced non-finite output.

    Carries ``step`` (the step index) and ``segment_values`` (the window that
    was fed to the offending coefficient callback).
    """

    def __init__(self, message, step=None, segment_values=None):
        super().__init__(message)
        self.step = step
        self.segment_values = segment_values


def _is_multiple(value, dt):
    k = value / dt
    return abs(k - round(k)) <= _REL_TOL * max(1.0, abs(k))


@dataclass(frozen=True)
class TimeGrid:
    """Uniform time grid with step ``dt``.

    The delay equals ``delay_steps * dt`` exactly; every segment holds
    ``delay_steps + 1`` grid points.  ``horizon_steps`` is the number of
    integration steps past time zero.
    """

    dt: float
    delay_steps: int
    horizon_steps: int

    def __post_init__(self):
        if not (np.isfinite(self.dt) and self.dt > 0):
            raise ValueError(f"dt must be a positive real, got {self.dt}")
        if int(self.delay_steps) != self.delay_steps or self.delay_steps < 1:
            raise ValueError(f"delay_steps must be a positive integer, got {self.delay_steps}")
        if int(self.horizon_steps) != self.horizon_steps or self.horizon_steps < 1:
            raise ValueError(f"horizon_steps must be a positive integer, got {self.horizon_steps}")

    @classmethod
    def from_durations(cls, dt, delay, horizon):
        """Build a grid from time lengths, rejecting non-multiples of dt."""
        if not _is_multiple(delay, dt):
            raise GridMismatchError(f"delay {delay} is not an integer multiple of dt={dt}")
        if not _is_multiple(horizon, dt):
            raise GridMismatchError(f"horizon {horizon} is not an integer multiple of dt={dt}")
        return cls(dt=float(dt), delay_steps=round(delay / dt), horizon_steps=round(horizon / dt))

    @property
    def delay(self):
        return self.delay_steps * self.dt

    @property
    def horizon(self):
        return self.horizon_steps * self.dt

    @property
    def n_window(self):
        return self.delay_steps + 1

    @property
    def n_states(self):
        return self.delay_steps + self.horizon_steps + 1

    def window_times(self):
        """Times of the segment grid points, from -delay to 0."""
        return (np.arange(self.n_window) - self.delay_steps) * self.dt

    def step_index(self, t, what="time"):
        """Grid index of time ``t``, rejecting off-grid values."""
        if not _is_multiple(t, self.dt):
            raise GridMismatchError(f"{what}={t} is not an integer multiple of dt={self.dt}")
        return round(t / self.dt)

    def segment_compatible(self, other):
        return self.delay_steps == other.delay_steps and abs(self.dt - other.dt) <= _REL_TOL * self.dt


@dataclass(frozen=True)
class Segment:
    """One delay window: ``values[i]`` is the state at time ``-delay + i*dt``."""

    grid: TimeGrid
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if v.ndim != 2 or v.shape[0] != self.grid.n_window:
            raise ValueError(
                f"segment values must have shape ({self.grid.n_window}, n), got {np.shape(self.values)}"
            )
        object.__setattr__(self, "values", v)

    @property
    def dim(self):
        return self.values.shape[1]

    def end_value(self):
        """State at time 0 (the right end of the window)."""
        return self.values[-1]

    def sup_norm(self):
        return float(np.linalg.norm(self.values, axis=1).max())

    @classmethod
    def constant(cls, grid, value):
        value = np.atleast_1d(np.asarray(value, dtype=float))
        return cls(grid, np.tile(value, (grid.n_window, 1)))

    @classmethod
    def from_function(cls, grid, fn):
        """Sample ``fn(t)`` on the window grid; fn returns a scalar or (n,) vector."""
        rows = [np.atleast_1d(np.asarray(fn(t), dtype=float)) for t in grid.window_times()]
        return cls(grid, np.stack(rows))


def sup_dist(x: Segment, y: Segment) -> float:
    """Largest pointwise Euclidean distance between two segments on a shared grid."""
    if not x.grid.segment_compatible(y.grid):
        raise GridMismatchError("segments live on different grids")
    if x.dim != y.dim:
        raise GridMismatchError(f"segment dimensions differ: {x.dim} vs {y.dim}")
    return float(np.linalg.norm(x.values - y.values, axis=1).max())


@dataclass(frozen=True)
class PathGrid:
    """A simulated path from time ``-delay`` to the horizon, plus its noise.

    ``states[k]`` is the state at time ``(k - delay_steps) * dt``; the first
    ``delay_steps + 1`` rows are the initial segment.  ``noise_increments[k]``
    is the Brownian increment that drove the step from ``k*dt`` to
    ``(k+1)*dt``.  Replaying the stored increments through ``em_simulate``
    (with the same control) reproduces ``states`` bit-exactly.
    """

    grid: TimeGrid
    states: np.ndarray
    noise_increments: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.states, dtype=float)
        w = np.asarray(self.noise_increments, dtype=float)
        if s.ndim != 2 or s.shape[0] != self.grid.n_states:
            raise ValueError(f"states must have shape ({self.grid.n_states}, n), got {s.shape}")
        if w.ndim != 2 or w.shape[0] != self.grid.horizon_steps:
            raise ValueError(
                f"noise_increments must have shape ({self.grid.horizon_steps}, m), got {w.shape}"
            )
        object.__setattr__(self, "states", s)
        object.__setattr__(self, "noise_increments", w)

    @property
    def dim(self):
        return self.states.shape[1]

    def initial_segment(self):
        return self.segment_at(0)

    def terminal_segment(self):
        return self.segment_at(self.grid.horizon_steps)

    def segment_at(self, k):
        if not 0 <= k <= self.grid.horizon_steps:
            raise IndexError(
                f"step index {k} outside [0, {self.grid.horizon_steps}]"
            )
        return Segment(self.grid, self.states[k : k + self.grid.n_window])

    def state_at_step(self, k):
        """State value at time ``k*dt`` (k may be 0..horizon_steps)."""
        return self.states[self.grid.delay_steps + k]

    def times(self):
        return (np.arange(self.grid.n_states) - self.grid.delay_steps) * self.grid.dt


def segment_at(path: PathGrid, k: int) -> Segment:
    """Segment of ``path`` ending at step ``k`` (time ``k*dt``)."""
    return path.segment_at(k)


@dataclass
class SddeModel:
    """Coefficients of a delay equation ``dX = a(window) dt + sigma(window) dW``.

    ``drift`` maps a window array ``(..., L+1, n)`` to ``(..., n)``;
    ``diffusion`` to ``(..., n, m)``.  ``diffusion_right_inverse`` maps to
    ``(..., m, n)`` and must satisfy ``sigma @ inverse = identity``.  The
    directional gradients take ``(x_window, direction_window)`` pairs and
    return the same shapes as drift/diffusion; they are only needed by the
    sensitivity machinery.

    ``holder_alpha``, ``holder_beta`` and ``holder_constant`` declare the
    regularity the coefficients are supposed to satisfy (one-sided exponent
    for the drift, exponent for the diffusion, shared constant); see
    ``verify_assumptions`` for the empirical probe.
    """

    dim_state: int
    dim_noise: int
    drift: Callable[[np.ndarray], np.ndarray]
    diffusion: Callable[[np.ndarray], np.ndarray]
    diffusion_right_inverse: Optional[Callable[[np.ndarray], np.ndarray]] = None
    drift_gradient: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None
    diffusion_gradient: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None
    holder_alpha: float = 1.0
    holder_beta: float = 1.0
    holder_constant: float = 1.0

    def __post_init__(self):
        if self.dim_state < 1 or self.dim_noise < 1:
            raise ValueError("dim_state and dim_noise must be >= 1")
        if not 0 < self.holder_alpha <= 1:
            raise ValueError(f"holder_alpha must lie in (0, 1], got {self.holder_alpha}")
        if not 0.5 < self.holder_beta <= 1:
            raise ValueError(f"holder_beta must lie in (1/2, 1], got {self.holder_beta}")
        if not self.holder_constant > 0:
            raise ValueError("holder_constant must be positive")


def _check_finite(out, step, window, label):
    if not np.all(np.isfinite(out)):
        flat = np.isfinite(out).reshape(out.shape[0], -1).all(axis=1)
        bad = int(np.argmin(flat))
        raise SimulationError(
            f"{label} returned non-finite values at step {step}",
            step=step,
            segment_values=np.array(window[bad]),
        )


def _eval_drift(model, window, step):
    out = np.asarray(model.drift(window), dtype=float)
    want = window.shape[:-2] + (model.dim_state,)
    if out.shape != want:
        raise SimulationError(
            f"drift returned shape {out.shape}, expected {want}", step=step
        )
    _check_finite(out, step, window, "drift")
    return out


def _eval_diffusion(model, window, step):
    out = np.asarray(model.diffusion(window), dtype=float)
    want = window.shape[:-2] + (model.dim_state, model.dim_noise)
    if out.shape != want:
        raise SimulationError(
            f"diffusion returned shape {out.shape}, expected {want}", step=step
        )
    _check_finite(out, step, window, "diffusion")
    return out


def _advance(prev, drift, diff, dw_col, dt, extra=None):
    # Shared update kernel so single-step and batched paths are bit-identical.
    total = drift if extra is None else drift + extra
    return prev + total * dt + (diff @ dw_col)[..., 0]


def _simulate_states(model, init_values, increments, dt, control=None, ledger=False):
    """Batched Euler-Maruyama recursion over stored increments.

    ``init_values`` has shape (B, L+1, n) and ``increments`` (B, steps, m).
    When ``ledger`` is true the control is priced through the diffusion right
    inverse and the accumulated KL half-integral and log-density exponent are
    returned per path.  Returns (states, kl, log_exponent, max_inverse_norm).
    """
    b, steps, m = increments.shape
    n = init_values.shape[-1]
    n_window = init_values.shape[-2]
    lag = n_window - 1
    if ledger and model.diffusion_right_inverse is None:
        raise ValueError("ledger accumulation requires diffusion_right_inverse")
    states = np.empty((b, n_window + steps, n))
    states[:, :n_window] = init_values
    kl = np.zeros(b)
    log_exp = np.zeros(b)
    inv_max = 0.0
    for k in range(steps):
        window = states[:, k : k + n_window]
        drift = _eval_drift(model, window, k)
        diff = _eval_diffusion(model, window, k)
        extra = None
        if control is not None:
            extra = np.asarray(control(k, window), dtype=float)
            extra = np.broadcast_to(extra, (b, n))
            _check_finite(extra, k, window, "control")
        dw = increments[:, k]
        states[:, n_window + k] = _advance(states[:, lag + k], drift, diff, dw[..., None], dt, extra)
        if ledger and extra is not None:
            rinv = np.asarray(model.diffusion_right_inverse(window), dtype=float)
            inv_max = max(inv_max, float(np.linalg.norm(rinv, axis=(-2, -1)).max()))
            eta = (rinv @ extra[..., None])[..., 0]
            quad = 0.5 * np.einsum("bm,bm->b", eta, eta) * dt
            kl += quad
            log_exp += np.einsum("bm,bm->b", eta, dw) - quad
    return states, kl, log_exp, inv_max


def _as_increments(noise, steps, dim_noise, dt):
    if isinstance(noise, np.random.Generator):
        return noise.normal(0.0, np.sqrt(dt), size=(steps, dim_noise))
    arr = np.asarray(noise, dtype=float)
    if arr.shape != (steps, dim_noise):
        raise ValueError(
            f"noise increments must have shape ({steps}, {dim_noise}), got {arr.shape}"
        )
    return arr


def em_step(model: SddeModel, seg: Segment, dw, dt, extra_drift=None):
    """One Euler-Maruyama update from the segment endpoint.

    Returns ``seg(0) + [a(seg) + extra_drift] * dt + sigma(seg) @ dw``.
    """
    if abs(dt - seg.grid.dt) > _REL_TOL * seg.grid.dt:
        raise GridMismatchError(f"dt={dt} does not match the segment grid dt={seg.grid.dt}")
    dw = np.asarray(dw, dtype=float).reshape(model.dim_noise)
    window = seg.values[None]
    drift = _eval_drift(model, window, 0)
    diff = _eval_diffusion(model, window, 0)
    extra = None
    if extra_drift is not None:
        extra = np.broadcast_to(np.asarray(extra_drift, dtype=float), (1, model.dim_state))
    out = _advance(window[:, -1], drift, diff, dw[None, :, None], dt, extra)
    return out[0]


def em_simulate(model: SddeModel, init: Segment, steps: int, noise, control=None) -> PathGrid:
    """Drive the segment process ``steps`` Euler-Maruyama steps forward.

    ``noise`` is either a numpy Generator (fresh N(0, dt*I) increments are
    drawn and stored on the returned path) or a ``(steps, m)`` array of
    increments to replay.  ``control``, if given, is called per step as
    ``control(k, window)`` with the batched window ``(..., L+1, n)`` and its
    value is added to the drift.
    """
    if init.dim != model.dim_state:
        raise ValueError(f"initial segment dimension {init.dim} != model dim_state {model.dim_state}")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    dt = init.grid.dt
    increments = _as_increments(noise, steps, model.dim_noise, dt)
    states, _, _, _ = _simulate_states(model, init.values[None], increments[None], dt, control=control)
    grid = TimeGrid(dt, init.grid.delay_steps, steps)
    return PathGrid(grid, states[0], increments)


def em_simulate_batch(model: SddeModel, init: Segment, steps: int, increments, control=None):
    """Simulate a batch of paths from one initial segment.

    ``increments`` has shape (B, steps, m); returns a list of ``PathGrid``
    (views into one shared state array).
    """
    increments = np.asarray(increments, dtype=float)
    if increments.ndim != 3 or increments.shape[1:] != (steps, model.dim_noise):
        raise ValueError(
            f"increments must have shape (B, {steps}, {model.dim_noise}), got {increments.shape}"
        )
    dt = init.grid.dt
    b = increments.shape[0]
    init_block = np.broadcast_to(init.values, (b,) + init.values.shape)
    states, _, _, _ = _simulate_states(model, init_block, increments, dt, control=control)
    grid = TimeGrid(dt, init.grid.delay_steps, steps)
    return [PathGrid(grid, states[i], increments[i]) for i in range(b)]


@dataclass(frozen=True)
class AssumptionReport:
    """Empirical violation counts for the declared coefficient regularity.

    Advisory only: the probe reports, it never raises.  ``None`` for the
    inverse fields means the model declares no right inverse.
    """

    n_pairs: int
    n_holder_pairs: int
    drift_holder_violations: int
    diffusion_holder_violations: int
    inverse_identity_violations: Optional[int]
    growth_violations: int
    max_inverse_norm: Optional[float]
    worst_drift_residual: float
    worst_diffusion_residual: float
    worst_growth_residual: float

    @property
    def ok(self):
        counts = [self.drift_holder_violations, self.diffusion_holder_violations, self.growth_violations]
        if self.inverse_identity_violations is not None:
            counts.append(self.inverse_identity_violations)
        return all(c == 0 for c in counts)


def verify_assumptions(model: SddeModel, probes: Sequence[tuple]) -> AssumptionReport:
    """Probe the declared one-sided Holder drift bound, diffusion Holder
    bound, right-inverse identity, and one-sided linear growth on a sample of
    segment pairs.

    Pairs farther apart than 1 in sup-distance are skipped for the Holder
    checks (the declared conditions are finite-range).
    """
    if not probes:
        raise ValueError("need at least one probe pair")
    xs = np.stack([p[0].values for p in probes])
    ys = np.stack([p[1].values for p in probes])
    dists = np.linalg.norm(xs - ys, axis=2).max(axis=1)
    alpha, beta, c = model.holder_alpha, model.holder_beta, model.holder_constant

    a_x = np.asarray(model.drift(xs), dtype=float)
    a_y = np.asarray(model.drift(ys), dtype=float)
    s_x = np.asarray(model.diffusion(xs), dtype=float)
    s_y = np.asarray(model.diffusion(ys), dtype=float)

    in_range = dists <= 1.0
    end_gap = xs[:, -1] - ys[:, -1]
    one_sided = np.einsum("pi,pi->p", a_x - a_y, end_gap)
    drift_rhs = c * dists ** (alpha + 1.0)
    drift_res = one_sided - drift_rhs
    drift_viol = in_range & (drift_res > _REL_TOL * (1.0 + np.abs(drift_rhs)))

    sig_gap = np.linalg.norm(s_x - s_y, axis=(1, 2))
    diff_rhs = c * dists**beta
    diff_res = sig_gap - diff_rhs
    diff_viol = in_range & (diff_res > _REL_TOL * (1.0 + diff_rhs))

    all_segments = np.concatenate([xs, ys])
    a_all = np.concatenate([a_x, a_y])
    growth_lhs = np.einsum("pi,pi->p", a_all, all_segments[:, -1])
    growth_rhs = c * (1.0 + np.linalg.norm(all_segments, axis=2).max(axis=1) ** 2)
    growth_res = growth_lhs - growth_rhs
    growth_viol = growth_res > _REL_TOL * (1.0 + growth_rhs)

    inverse_viol = None
    inv_norm = None
    if model.diffusion_right_inverse is not None:
        sig = np.concatenate([s_x, s_y])
        rinv = np.asarray(model.diffusion_right_inverse(all_segments), dtype=float)
        eye = np.eye(model.dim_state)
        ident_err = np.linalg.norm(sig @ rinv - eye, axis=(1, 2))
        inverse_viol = int(np.sum(ident_err > 1e-10))
        inv_norm = float(np.linalg.norm(rinv, axis=(1, 2)).max())

    return AssumptionReport(
        n_pairs=len(probes),
        n_holder_pairs=int(in_range.sum()),
        drift_holder_violations=int(drift_viol.sum()),
        diffusion_holder_violations=int(diff_viol.sum()),
        inverse_identity_violations=inverse_viol,
        growth_violations=int(growth_viol.sum()),
        max_inverse_norm=inv_norm,
        worst_drift_residual=float(drift_res[in_range].max()) if in_range.any() else float("-inf"),
        worst_diffusion_residual=float(diff_res[in_range].max()) if in_range.any() else float("-inf"),
        worst_growth_residual=float(growth_res.max()),
    )
