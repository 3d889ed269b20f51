"""Skeleton chains, empirical transport distances, Lyapunov drift checks, and
convergence-rate envelopes.

The transport distance between empirical segment samples is solved exactly:
equal-size samples through the assignment problem, unequal sizes through the
transportation linear program.  Sample sizes are capped at 512, the regime
where exactness is affordable; subsample above that.

Long-run samples stand in for the invariant law: one trajectory, burned in
and thinned at a fixed spacing.  That is a proxy (thinned draws remain weakly
dependent), not an unbiased sample, and is documented as such wherever it is
consumed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import optimize, sparse
from scipy.integrate import quad

from .core import (
    GridMismatchError,
    PathGrid,
    Segment,
    SddeModel,
    TimeGrid,
    _simulate_states,
)
from .coupling import MetricSpec
from .seeding import path_noise, rng_for

__all__ = [
    "LyapunovSpec",
    "PhiFunction",
    "RateFunctions",
    "DriftCheckRow",
    "DriftCheckReport",
    "skeleton",
    "empirical_coupling_distance",
    "kr_dual_value",
    "lyapunov_drift_check",
    "lyapunov_catalog",
    "rate_functions",
    "rate_bound",
    "stationary_estimate",
    "skeleton_distance_curve",
    "fit_rate_envelope",
]

_MAX_SAMPLE = 512


def skeleton(path: PathGrid, h: float):
    """Segments of ``path`` at times h, 2h, ... up to the horizon."""
    k = path.grid.step_index(h, what="h")
    if k < 1:
        raise ValueError(f"spacing h={h} is below the grid step")
    count = path.grid.horizon_steps // k
    return [path.segment_at(j * k) for j in range(1, count + 1)]


def _stack(sample: Sequence[Segment]):
    if not sample:
        raise ValueError("empty segment sample")
    grid = sample[0].grid
    for s in sample[1:]:
        if not s.grid.segment_compatible(grid):
            raise GridMismatchError("segments in one sample live on different grids")
    return np.stack([s.values for s in sample]), grid


def _pairwise_metric(values_a, values_b, spec: MetricSpec, block: int = 64):
    p = values_a.shape[0]
    out = np.empty((p, values_b.shape[0]))
    for i0 in range(0, p, block):
        diff = values_a[i0 : i0 + block, None] - values_b[None]
        dist = np.linalg.norm(diff, axis=3).max(axis=2)
        out[i0 : i0 + block] = np.minimum(spec.N * dist**spec.gamma, 1.0)
    return out


def empirical_coupling_distance(sample_a: Sequence[Segment], sample_b: Sequence[Segment],
                                spec: MetricSpec) -> float:
    """Exact transport distance between uniform empirical measures.

    Cost is the truncated Holder metric.  Equal sizes reduce to an optimal
    assignment; unequal sizes solve the transportation LP.
    """
    va, grid_a = _stack(sample_a)
    vb, grid_b = _stack(sample_b)
    if not grid_a.segment_compatible(grid_b):
        raise GridMismatchError("samples live on different grids")
    p, q = va.shape[0], vb.shape[0]
    if p > _MAX_SAMPLE or q > _MAX_SAMPLE:
        raise ValueError(
            f"sample sizes ({p}, {q}) exceed the exact-solver cap {_MAX_SAMPLE}; subsample first"
        )
    cost = _pairwise_metric(va, vb, spec)
    if p == q:
        rows, cols = optimize.linear_sum_assignment(cost)
        return float(cost[rows, cols].sum() / p)
    return _transport_lp(cost, p, q)


def _transport_lp(cost, p, q):
    row_idx = np.repeat(np.arange(p), q)
    col_idx = p + np.tile(np.arange(q), p)
    var = np.arange(p * q)
    a_eq = sparse.coo_matrix(
        (np.ones(2 * p * q), (np.concatenate([row_idx, col_idx]), np.concatenate([var, var]))),
        shape=(p + q, p * q),
    ).tocsr()
    b_eq = np.concatenate([np.full(p, 1.0 / p), np.full(q, 1.0 / q)])
    res = optimize.linprog(cost.ravel(), A_eq=a_eq, b_eq=b_eq, bounds=(0, None), method="highs")
    if not res.success:
        raise RuntimeError(f"transport LP failed: {res.message}")
    return float(res.fun)


def kr_dual_value(f: Callable, sample_a: Sequence[Segment], sample_b: Sequence[Segment],
                  spec: MetricSpec, tol: float = 1e-12) -> float:
    """Duality witness ``|mean_a f - mean_b f|`` for a declared 1-Lipschitz f.

    The Lipschitz declaration is probed on every pair drawn from the two
    samples; a violating pair is reported by name.  The returned value never
    exceeds the exact transport distance.
    """
    va, grid_a = _stack(sample_a)
    vb, grid_b = _stack(sample_b)
    if not grid_a.segment_compatible(grid_b):
        raise GridMismatchError("samples live on different grids")
    stacked = np.concatenate([va, vb])
    fv = np.asarray(f(stacked), dtype=float).reshape(len(stacked))
    labels = [f"a[{i}]" for i in range(len(va))] + [f"b[{j}]" for j in range(len(vb))]
    dmat = _pairwise_metric(stacked, stacked, spec)
    gap = np.abs(fv[:, None] - fv[None, :]) - dmat
    bad = np.argwhere(gap > tol)
    if len(bad):
        i, j = bad[0]
        raise ValueError(
            f"functional violates its declared Lipschitz bound on pair ({labels[i]}, {labels[j]}): "
            f"|f(x)-f(y)| = {abs(fv[i]-fv[j]):.6g} > d = {dmat[i, j]:.6g}"
        )
    return float(abs(fv[: len(va)].mean() - fv[len(va) :].mean()))


@dataclass(frozen=True)
class PhiFunction:
    """Concave increasing recurrence-speed function with closed-form families.

    kinds: ``linear`` is ``scale * v``; ``power`` is ``scale * v**exponent``
    with exponent in (0, 1); ``log_damped`` is
    ``scale * v * (log v + offset)**exponent`` with a negative exponent.
    """

    kind: str
    scale: float
    exponent: float = 1.0
    offset: float = 0.0

    def __post_init__(self):
        if self.kind not in ("linear", "power", "log_damped"):
            raise ValueError(f"unknown phi kind {self.kind!r}")
        if not self.scale > 0:
            raise ValueError("phi scale must be positive")
        if self.kind == "power" and not 0 < self.exponent < 1:
            raise ValueError("power kind needs exponent in (0, 1)")

    def __call__(self, v):
        v = np.asarray(v, dtype=float)
        if self.kind == "linear":
            out = self.scale * v
        elif self.kind == "power":
            out = self.scale * v**self.exponent
        else:
            out = self.scale * v * (np.log(v) + self.offset) ** self.exponent
        return out if out.ndim else float(out)


@dataclass(frozen=True)
class LyapunovSpec:
    """Drift condition data: map V >= 1, speed function phi, slack C_V, lag h.

    The condition under test is
    ``E_x V(segment at h) - V(x) <= -phi(V(x)) + C_V``.
    """

    V: Callable
    phi: Callable
    C_V: float
    h: float


@dataclass(frozen=True)
class DriftCheckRow:
    probe_index: int
    v_start: float
    mean_drift: float
    ci_halfwidth: float
    bound_rhs: float
    passes: bool


@dataclass(frozen=True)
class DriftCheckReport:
    rows: tuple
    paths_per_point: int

    @property
    def all_pass(self):
        return all(r.passes for r in self.rows)


def lyapunov_drift_check(model: SddeModel, spec: LyapunovSpec,
                         probe_points: Sequence[Segment], paths_per_point: int,
                         master_seed: int) -> DriftCheckReport:
    """Monte Carlo probe of the drift condition at each starting segment.

    A probe passes when the estimate plus its 95% half-width sits below
    ``-phi(V(x)) + C_V``.
    """
    rows = []
    for idx, probe in enumerate(probe_points):
        grid = probe.grid
        steps = grid.step_index(spec.h, what="h")
        v0 = float(np.asarray(spec.V(probe.values)))
        if v0 < 1.0:
            raise ValueError(f"Lyapunov map returned {v0} < 1 at probe {idx}")
        increments = path_noise(master_seed, range(paths_per_point), steps,
                                model.dim_noise, grid.dt, stream_tag=f"lyap-{idx}")
        block = np.broadcast_to(probe.values, (paths_per_point,) + probe.values.shape)
        states, _, _, _ = _simulate_states(model, block, increments, grid.dt)
        v_end = np.asarray(spec.V(states[:, steps:]), dtype=float)
        if np.any(v_end < 1.0):
            raise ValueError(f"Lyapunov map returned values below 1 on paths from probe {idx}")
        drift = v_end - v0
        mean = float(drift.mean())
        half = 1.96 * float(drift.std(ddof=1)) / math.sqrt(paths_per_point)
        rhs = -float(spec.phi(v0)) + spec.C_V
        rows.append(DriftCheckRow(idx, v0, mean, half, rhs, mean + half <= rhs))
    return DriftCheckReport(rows=tuple(rows), paths_per_point=paths_per_point)


def lyapunov_catalog(kappa: float, *, c: float = 0.5, alpha: float = 0.5,
                     b: Optional[float] = None, C_V: float = 2.0, h: float = 1.0,
                     p: Optional[float] = None, A_minus1: Optional[float] = None,
                     Lambda: Optional[float] = None,
                     sigma_sq_sup: Optional[float] = None) -> LyapunovSpec:
    """Ready-made (V, phi) pairs for drifts with polynomial inward pull.

    ``kappa`` classifies the pull strength ``-A |x(0)|^(kappa+1)`` at large
    states: kappa >= 0 gives an exponential V with linear phi; kappa in
    (-1, 0) an exponential of a fractional power with a log-damped phi;
    kappa = -1 a polynomial V = max(|x(0)|, 1)^p (clamped so V >= 1) with a
    power phi, admissible only for
    2 < p < 2 + (2*A_minus1 - Lambda) / sigma_sq_sup.
    """
    if kappa < -1:
        raise ValueError(f"kappa must be >= -1, got {kappa}")

    def end_norm(values):
        values = np.asarray(values, dtype=float)
        return np.linalg.norm(values[..., -1, :], axis=-1)

    if kappa >= 0:
        phi = PhiFunction("linear", c)

        def v_map(values):
            return np.exp(alpha * end_norm(values))

    elif kappa > -1:
        exponent = 2.0 * kappa / (kappa + 1.0)
        offset = b if b is not None else -exponent + 1.0
        if math.log(1.0) + offset + exponent <= 0:
            raise ValueError("offset b too small for phi to increase on [1, inf)")
        phi = PhiFunction("log_damped", c, exponent=exponent, offset=offset)
        power = kappa + 1.0

        def v_map(values):
            return np.exp(alpha * end_norm(values) ** power)

    else:
        if p is None or A_minus1 is None or Lambda is None:
            raise ValueError("kappa = -1 requires p, A_minus1 and Lambda")
        sig_sq = Lambda if sigma_sq_sup is None else sigma_sq_sup
        if not 2.0 * A_minus1 > Lambda:
            raise ValueError(f"kappa = -1 requires 2*A_minus1 > Lambda, got {2*A_minus1} <= {Lambda}")
        p_cap = 2.0 + (2.0 * A_minus1 - Lambda) / sig_sq
        if not 2.0 < p < p_cap:
            raise ValueError(f"p must lie in (2, {p_cap:.6g}), got {p}")
        phi = PhiFunction("power", c, exponent=1.0 - 2.0 / p)

        def v_map(values, _p=p):
            return np.maximum(end_norm(values), 1.0) ** _p

    return LyapunovSpec(V=v_map, phi=phi, C_V=C_V, h=h)


@dataclass(frozen=True)
class RateFunctions:
    """Integrated speed Phi, its inverse, and the rate map r(t) = phi(Phi^-1(t))."""

    Phi: Callable[[float], float]
    Phi_inv: Callable[[float], float]
    r: Callable[[float], float]


def _check_phi(phi):
    probe = np.exp(np.linspace(0.0, math.log(1e6), 25))
    vals = np.asarray([float(phi(v)) for v in probe])
    if np.any(vals <= 0):
        bad = probe[int(np.argmax(vals <= 0))]
        raise ValueError(f"phi must be positive on [1, inf); phi({bad:.6g}) <= 0")
    if np.any(np.diff(vals) < -1e-12 * np.abs(vals[:-1])):
        raise ValueError("phi must be non-decreasing on [1, inf)")


def rate_functions(phi) -> RateFunctions:
    """Build Phi(v) = int_1^v dw/phi(w), its inverse, and r = phi o Phi^-1.

    Closed forms for the catalog families, adaptive quadrature plus monotone
    bisection otherwise.  Phi(1) = 0 and the round trip Phi(Phi_inv(t)) = t
    holds to 1e-8 over the catalog range.
    """
    _check_phi(phi)
    if isinstance(phi, PhiFunction) and phi.kind == "linear":
        c = phi.scale

        def big_phi(v):
            return math.log(v) / c

        def big_phi_inv(t):
            return math.exp(c * t)

        return RateFunctions(big_phi, big_phi_inv, lambda t: c * math.exp(c * t))
    if isinstance(phi, PhiFunction) and phi.kind == "power":
        a, s = phi.scale, phi.exponent
        w = 1.0 - s

        def big_phi(v):
            return (v**w - 1.0) / (a * w)

        def big_phi_inv(t):
            return (1.0 + a * w * t) ** (1.0 / w)

        return RateFunctions(big_phi, big_phi_inv, lambda t: a * (1.0 + a * w * t) ** (s / w))

    def big_phi(v):
        if v < 1.0:
            raise ValueError(f"Phi is defined on [1, inf), got {v}")
        if v == 1.0:
            return 0.0
        val, _ = quad(lambda w: 1.0 / float(phi(w)), 1.0, v, epsabs=1e-12, epsrel=1e-12, limit=500)
        return val

    def big_phi_inv(t):
        if t < 0:
            raise ValueError(f"Phi^-1 is defined on [0, inf), got {t}")
        if t == 0:
            return 1.0
        hi = 2.0
        while big_phi(hi) < t:
            hi *= 2.0
            if hi > 1e300:
                raise OverflowError("Phi^-1 bracket exceeded float range")
        lo = hi / 2.0 if hi > 2.0 else 1.0
        for _ in range(200):
            mid = math.sqrt(lo * hi)
            val = big_phi(mid)
            if abs(val - t) <= 1e-12 * max(1.0, t):
                return mid
            if val < t:
                lo = mid
            else:
                hi = mid
            if hi - lo <= 1e-14 * hi:
                break
        return math.sqrt(lo * hi)

    return RateFunctions(big_phi, big_phi_inv, lambda t: float(phi(big_phi_inv(t))))


def rate_bound(t: float, v_x: float, phi, delta: float, c: float, big_c: float) -> float:
    """Envelope ``C * phi(V(x))^delta / r(c t)^delta`` for distance decay curves."""
    if not 0.0 < delta < 1.0:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    if not (c > 0 and big_c > 0):
        raise ValueError("c and C must be positive")
    rf = rate_functions(phi)
    return big_c * float(phi(v_x)) ** delta / rf.r(c * t) ** delta


def stationary_estimate(model: SddeModel, x0: Segment, burn_in: float, h: float,
                        n_samples: int, master_seed: int):
    """Thinned long-run segment samples standing in for the invariant law.

    One trajectory is burned in for ``burn_in`` time units and then sampled
    every ``h`` units.  The draws are weakly dependent; treat them as a
    proxy, not an independent sample.
    """
    if n_samples < 0:
        raise ValueError("n_samples must be non-negative")
    if n_samples == 0:
        return []
    grid = x0.grid
    burn_steps = grid.step_index(burn_in, what="burn_in")
    h_steps = grid.step_index(h, what="h")
    if h_steps < 1:
        raise ValueError("spacing h must be at least one grid step")
    total = burn_steps + n_samples * h_steps
    if total > 100_000_000:
        raise OverflowError(f"horizon of {total} steps exceeds the supported range")
    increments = path_noise(master_seed, [0], total, model.dim_noise, grid.dt, "stationary")
    states, _, _, _ = _simulate_states(model, x0.values[None], increments, grid.dt)
    long_grid = TimeGrid(grid.dt, grid.delay_steps, total)
    path = PathGrid(long_grid, states[0], increments[0])
    return [path.segment_at(burn_steps + j * h_steps) for j in range(1, n_samples + 1)]


@dataclass(frozen=True)
class DecayCurveRow:
    t: float
    distance: float
    boot_std: float


@dataclass(frozen=True)
class DecayCurve:
    rows: tuple
    terminal_values: np.ndarray

    def monotone_within_noise(self, z: float = 2.0):
        """True when each step down the curve is non-increasing up to z
        combined bootstrap deviations."""
        for prev, nxt in zip(self.rows, self.rows[1:]):
            slack = z * math.hypot(prev.boot_std, nxt.boot_std)
            if nxt.distance > prev.distance + slack:
                return False
        return True


def skeleton_distance_curve(model: SddeModel, x0: Segment, times: Sequence[float],
                            n_samples: int, spacing: float, burn_in: float,
                            spec: MetricSpec, master_seed: int,
                            n_boot: int = 32) -> DecayCurve:
    """Empirical transport distance to the long-run sample at each time.

    For each t, ``n_samples`` independent paths started at ``x0`` supply the
    time-t segment sample; the long-run sample is shared.  Bootstrap
    deviations resample both sides on the cached cost matrix.
    """
    if n_samples > _MAX_SAMPLE:
        raise ValueError(f"n_samples exceeds the exact-solver cap {_MAX_SAMPLE}")
    grid = x0.grid
    stationary = stationary_estimate(model, x0, burn_in, spacing, n_samples, master_seed)
    vb = np.stack([s.values for s in stationary])
    terminal = vb[:, -1, :]
    boot_rng = rng_for(master_seed, 0, "boot")
    rows = []
    for t in sorted(times):
        steps = grid.step_index(t, what="t")
        increments = path_noise(master_seed, range(n_samples), steps, model.dim_noise,
                                grid.dt, stream_tag=f"skel-{t:.9g}")
        block = np.broadcast_to(x0.values, (n_samples,) + x0.values.shape)
        states, _, _, _ = _simulate_states(model, block, increments, grid.dt)
        va = states[:, steps:]
        cost = _pairwise_metric(va, vb, spec)
        r, cidx = optimize.linear_sum_assignment(cost)
        dist = float(cost[r, cidx].sum() / n_samples)
        boots = []
        for _ in range(n_boot):
            ia = boot_rng.integers(0, n_samples, n_samples)
            ib = boot_rng.integers(0, n_samples, n_samples)
            sub = cost[np.ix_(ia, ib)]
            rr, cc = optimize.linear_sum_assignment(sub)
            boots.append(sub[rr, cc].sum() / n_samples)
        rows.append(DecayCurveRow(t=float(t), distance=dist,
                                  boot_std=float(np.std(boots, ddof=1)) if n_boot > 1 else 0.0))
    return DecayCurve(rows=tuple(rows), terminal_values=terminal)


def fit_rate_envelope(times, values, phi: PhiFunction, v_x: float, delta: float,
                      saturation: float = 0.95):
    """Fit (c, C) so the decay envelope dominates an empirical curve.

    The slope is read off the log-linear part of the curve (points below the
    ``saturation`` level of the truncated metric); C is then lifted until the
    envelope clears every point.  Only the linear phi family is supported,
    where the envelope is ``C phi(V)^delta exp(-delta c_phi c t)``.
    """
    if not (isinstance(phi, PhiFunction) and phi.kind == "linear"):
        raise ValueError("envelope fitting supports the linear phi family only")
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    usable = (values > 0) & (values < saturation)
    if usable.sum() >= 2:
        slope = np.polyfit(times[usable], np.log(values[usable]), 1)[0]
    else:
        slope = -phi.scale * delta
    c = max(-slope / (delta * phi.scale), 1e-6)
    rf = rate_functions(phi)
    big_c = 0.0
    for t, val in zip(times, values):
        need = val * rf.r(c * t) ** delta / float(phi(v_x)) ** delta
        big_c = max(big_c, need)
    return c, big_c * (1.0 + 1e-12)
