"""Built-in scalar model catalog and probe-cloud helpers.

Every entry builds a one-dimensional ``SddeModel`` (state and noise both
scalar) whose callbacks accept windows with arbitrary leading batch axes.
Entries declare the regularity exponents and constant they are supposed to
satisfy; the test suite probes each declaration on the standard cloud.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict

import numpy as np

from .core import Segment, SddeModel, TimeGrid

__all__ = [
    "ModelCatalogEntry",
    "CATALOG",
    "catalog_ids",
    "make_model",
    "mollify_holder_drift",
    "standard_probe_cloud",
    "level_probe_segments",
    "default_approximation_levels",
]


def _end(w):
    return w[..., -1, :]


def _oldest(w):
    return w[..., 0, :]


def _const_matrix(w, mat):
    return np.broadcast_to(mat, w.shape[:-2] + mat.shape)


def _scalar_matrix(values):
    # (...,) -> (..., 1, 1)
    return values[..., None, None]


def _sech2(v):
    return 1.0 / np.cosh(np.clip(v, -30.0, 30.0)) ** 2


def _linear_delay(kappa0=1.0, kappa1=0.5, sigma=1.0):
    # sigma = 0 gives the deterministic pure-delay configuration; no inverse then
    mat = np.array([[float(sigma)]])
    inv = np.array([[1.0 / float(sigma)]]) if sigma != 0 else None

    def drift(w):
        return -kappa0 * _end(w) - kappa1 * _oldest(w)

    def diffusion(w):
        return _const_matrix(w, mat)

    def right_inverse(w):
        return _const_matrix(w, inv)

    def drift_grad(xw, uw):
        return -kappa0 * _end(uw) - kappa1 * _oldest(uw)

    def diffusion_grad(xw, uw):
        return np.zeros(uw.shape[:-2] + (1, 1))

    return SddeModel(
        dim_state=1,
        dim_noise=1,
        drift=drift,
        diffusion=diffusion,
        diffusion_right_inverse=right_inverse if sigma != 0 else None,
        drift_gradient=drift_grad,
        diffusion_gradient=diffusion_grad,
        holder_alpha=1.0,
        holder_beta=1.0,
        holder_constant=abs(kappa0) + abs(kappa1) + 0.5,
    )


def _bounded_sigma_callbacks(sigma0, sigma1):
    if not sigma0 > abs(sigma1):
        raise ValueError("need sigma0 > |sigma1| so the diffusion stays invertible")

    def diffusion(w):
        return _scalar_matrix(sigma0 + sigma1 * np.tanh(_end(w)[..., 0]))

    def right_inverse(w):
        return _scalar_matrix(1.0 / (sigma0 + sigma1 * np.tanh(_end(w)[..., 0])))

    return diffusion, right_inverse


def _holder_drift(c_root=1.0, b_delay=0.5, sigma0=1.0, sigma1=0.2):
    diffusion, right_inverse = _bounded_sigma_callbacks(sigma0, sigma1)

    def drift(w):
        v = _end(w)
        return -c_root * np.sign(v) * np.sqrt(np.abs(v)) + b_delay * np.tanh(_oldest(w))

    return SddeModel(
        dim_state=1,
        dim_noise=1,
        drift=drift,
        diffusion=diffusion,
        diffusion_right_inverse=right_inverse,
        holder_alpha=0.5,
        holder_beta=1.0,
        holder_constant=max(b_delay, abs(sigma1)) + 0.5,
    )


def mollify_holder_drift(eps, c_root=1.0, b_delay=0.5, sigma0=1.0, sigma1=0.2):
    """Lipschitz smoothing of the square-root drift at scale eps.

    Inside |x(0)| < eps the root kink is replaced by the chord through the
    matching points, leaving the coefficients untouched elsewhere; the drift
    gap against the unsmoothed model is of order sqrt(eps).
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    diffusion, right_inverse = _bounded_sigma_callbacks(sigma0, sigma1)
    slope = 1.0 / np.sqrt(eps)

    def drift(w):
        v = _end(w)
        root = np.where(np.abs(v) < eps, slope * v, np.sign(v) * np.sqrt(np.abs(v)))
        return -c_root * root + b_delay * np.tanh(_oldest(w))

    return SddeModel(
        dim_state=1,
        dim_noise=1,
        drift=drift,
        diffusion=diffusion,
        diffusion_right_inverse=right_inverse,
        holder_alpha=0.5,
        holder_beta=1.0,
        holder_constant=max(b_delay, abs(sigma1)) + 0.5,
    )


def _tanh_smooth(kappa=1.0, b_delay=0.5, sigma0=0.5, sigma1=0.2):
    diffusion, right_inverse = _bounded_sigma_callbacks(sigma0, sigma1)

    def drift(w):
        return -kappa * _end(w) + b_delay * np.tanh(_oldest(w))

    def drift_grad(xw, uw):
        return -kappa * _end(uw) + b_delay * _sech2(_oldest(xw)) * _oldest(uw)

    def diffusion_grad(xw, uw):
        return _scalar_matrix(sigma1 * _sech2(_end(xw)[..., 0]) * _end(uw)[..., 0])

    return SddeModel(
        dim_state=1,
        dim_noise=1,
        drift=drift,
        diffusion=diffusion,
        diffusion_right_inverse=right_inverse,
        drift_gradient=drift_grad,
        diffusion_gradient=diffusion_grad,
        holder_alpha=1.0,
        holder_beta=1.0,
        holder_constant=abs(kappa) + b_delay + abs(sigma1) + 0.5,
    )


def _prop_kappa(kappa=1.0, A=1.0, R=1.0, sigma=0.5):
    if kappa < -1:
        raise ValueError(f"kappa must be >= -1, got {kappa}")
    if not (A > 0 and R > 0):
        raise ValueError("A and R must be positive")
    mat = np.array([[float(sigma)]])
    inv = np.array([[1.0 / float(sigma)]])

    def pull(v):
        return v * (R**2 + v**2) ** ((kappa - 1.0) / 2.0)

    def drift(w):
        return -A * pull(_end(w))

    def diffusion(w):
        return _const_matrix(w, mat)

    def right_inverse(w):
        return _const_matrix(w, inv)

    # declared one-sided constant from the steepest descent of the pull
    grid = np.linspace(-60.0, 60.0, 24001)
    slopes = np.gradient(pull(grid), grid)
    c_decl = max(1.2 * A * max(0.0, float(-slopes.min())), 0.01)

    grad_mat = None
    if kappa == 1.0:

        def drift_grad(xw, uw):
            return -A * _end(uw)

        def diffusion_grad(xw, uw):
            return np.zeros(uw.shape[:-2] + (1, 1))

        grad_mat = (drift_grad, diffusion_grad)

    return SddeModel(
        dim_state=1,
        dim_noise=1,
        drift=drift,
        diffusion=diffusion,
        diffusion_right_inverse=right_inverse,
        drift_gradient=grad_mat[0] if grad_mat else None,
        diffusion_gradient=grad_mat[1] if grad_mat else None,
        holder_alpha=1.0,
        holder_beta=1.0,
        holder_constant=c_decl,
    )


def _ou_nodelay(kappa=1.0, sigma=1.0):
    return _linear_delay(kappa0=kappa, kappa1=0.0, sigma=sigma)


@dataclass(frozen=True)
class ModelCatalogEntry:
    id: str
    description: str
    constructor: Callable[..., SddeModel]
    defaults: Dict[str, float]


CATALOG: Dict[str, ModelCatalogEntry] = {
    e.id: e
    for e in [
        ModelCatalogEntry(
            "linear-delay",
            "linear drift on the endpoint and the delayed tap, constant diffusion",
            _linear_delay,
            {"kappa0": 1.0, "kappa1": 0.5, "sigma": 1.0},
        ),
        ModelCatalogEntry(
            "holder-drift",
            "one-sided square-root drift plus bounded delay feedback, bounded state-dependent diffusion",
            _holder_drift,
            {"c_root": 1.0, "b_delay": 0.5, "sigma0": 1.0, "sigma1": 0.2},
        ),
        ModelCatalogEntry(
            "tanh-smooth",
            "smooth saturated-delay drift with differentiable bounded diffusion",
            _tanh_smooth,
            {"kappa": 1.0, "b_delay": 0.5, "sigma0": 0.5, "sigma1": 0.2},
        ),
        ModelCatalogEntry(
            "prop-kappa",
            "polynomial inward pull of tunable exponent kappa, constant diffusion",
            _prop_kappa,
            {"kappa": 1.0, "A": 1.0, "R": 1.0, "sigma": 0.5},
        ),
        ModelCatalogEntry(
            "ou-nodelay",
            "delay-free mean reversion embedded as a segment process",
            _ou_nodelay,
            {"kappa": 1.0, "sigma": 1.0},
        ),
    ]
}


def catalog_ids():
    return sorted(CATALOG)


def make_model(model_id: str, **params) -> SddeModel:
    """Construct a catalog model, rejecting unknown ids and parameters."""
    if model_id not in CATALOG:
        raise ValueError(f"unknown model id {model_id!r}; known ids: {', '.join(catalog_ids())}")
    entry = CATALOG[model_id]
    unknown = set(params) - set(entry.defaults)
    if unknown:
        raise ValueError(
            f"unknown parameter(s) {sorted(unknown)} for model {model_id!r}; "
            f"accepted: {sorted(entry.defaults)}"
        )
    merged = {**entry.defaults, **params}
    return entry.constructor(**merged)


def level_probe_segments(grid: TimeGrid, levels):
    """Constant segments at the given endpoint levels."""
    return [Segment.constant(grid, v) for v in levels]


def default_approximation_levels():
    """Signed log-spaced levels, dense near zero, for coefficient-gap scans."""
    mags = np.concatenate([[0.0], np.exp(np.linspace(np.log(1e-4), np.log(2.0), 60))])
    return np.concatenate([-mags[:0:-1], mags])


def standard_probe_cloud(grid: TimeGrid, rng, n_pairs: int = 80):
    """Segment pairs exercising the declared-regularity probes.

    Mixes constant, ramped, oscillating and rough shapes at levels from well
    inside the unit ball out to |x(0)| = 8, with perturbation sizes spread
    over several decades so the close-range conditions are genuinely probed.
    """
    times = grid.window_times()
    shapes = [
        np.ones_like(times),
        np.linspace(0.3, 1.0, grid.n_window),
        np.sin(2.0 * np.pi * times / max(grid.delay, grid.dt)),
    ]
    pairs = []
    levels = np.concatenate([
        np.array([0.0, 0.05, -0.05, 0.3, -0.7, 1.0, 2.0, -2.0, 4.0, 8.0]),
        rng.uniform(-3.0, 3.0, size=max(0, n_pairs - 10)),
    ])[:n_pairs]
    gaps = np.exp(rng.uniform(np.log(1e-4), np.log(0.9), size=n_pairs))
    for level, gap in zip(levels, gaps):
        base_shape = shapes[rng.integers(len(shapes))]
        bump = rng.normal(size=grid.n_window)
        bump /= max(np.abs(bump).max(), 1e-12)
        x = Segment(grid, (level * base_shape)[:, None])
        y = Segment(grid, (level * base_shape + gap * bump)[:, None])
        pairs.append((x, y))
    return pairs
