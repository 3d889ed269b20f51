"""Two-dimensional state and noise through every engine path.

The catalog models are scalar; these checks pin down that nothing in the
coupled kernel, the ledger pricing, or the derivative machinery assumes
one-dimensional states.
"""

import math

import numpy as np
import pytest

from sddekit import (
    CouplingControl,
    Segment,
    SddeModel,
    TimeGrid,
    em_simulate,
    estimate_gradient,
    fd_oracle,
    importance_weight,
    run_controlled_batch,
    run_synchronous,
    verify_assumptions,
)

A_MAT = np.array([[-1.0, 0.3], [-0.2, -1.5]])
B_MAT = np.array([[0.1, 0.0], [0.05, -0.1]])
S_MAT = np.array([[1.0, 0.1], [0.0, 0.8]])
S_INV = np.linalg.inv(S_MAT)


def planar_model():
    def drift(w):
        return w[..., -1, :] @ A_MAT.T + w[..., 0, :] @ B_MAT.T

    def diffusion(w):
        return np.broadcast_to(S_MAT, w.shape[:-2] + (2, 2))

    def right_inverse(w):
        return np.broadcast_to(S_INV, w.shape[:-2] + (2, 2))

    def drift_grad(xw, uw):
        return drift(uw)

    def diffusion_grad(xw, uw):
        return np.zeros(uw.shape[:-2] + (2, 2))

    return SddeModel(
        dim_state=2,
        dim_noise=2,
        drift=drift,
        diffusion=diffusion,
        diffusion_right_inverse=right_inverse,
        drift_gradient=drift_grad,
        diffusion_gradient=diffusion_grad,
        holder_constant=3.0,
    )


def grid(dt=0.01, delay_steps=20, horizon_steps=100):
    return TimeGrid(dt, delay_steps, horizon_steps)


def test_declared_regularity_holds():
    g = grid()
    rng = np.random.default_rng(0)
    pairs = []
    for _ in range(60):
        base = rng.normal(size=(g.n_window, 2))
        gap = np.exp(rng.uniform(np.log(1e-4), np.log(0.8)))
        bump = rng.normal(size=(g.n_window, 2))
        bump /= max(np.linalg.norm(bump, axis=1).max(), 1e-12)
        pairs.append((Segment(g, base), Segment(g, base + gap * bump)))
    report = verify_assumptions(planar_model(), pairs)
    assert report.ok
    assert report.max_inverse_norm == pytest.approx(np.linalg.norm(S_INV))


def test_synchronous_leg_matches_plain_simulation():
    g = grid()
    model = planar_model()
    x = Segment.constant(g, np.array([1.0, -0.5]))
    y = Segment.constant(g, np.array([0.0, 0.0]))
    run = run_synchronous(model, x, y, 100, np.random.default_rng(1))
    direct = em_simulate(model, x, 100, run.path_x.noise_increments)
    assert np.array_equal(run.path_x.states, direct.states)


def test_controlled_ledger_weights_mean_one():
    g = grid()
    model = planar_model()
    x = Segment.constant(g, np.array([0.0, 0.0]))
    y = Segment.constant(g, np.array([0.1, -0.05]))
    runs = run_controlled_batch(model, x, y, CouplingControl(gamma=0.5, mode="with_ledger"),
                                100, 2000, master_seed=2)
    weights = np.array([importance_weight(r.ledger) for r in runs])
    se = weights.std(ddof=1) / math.sqrt(len(weights))
    assert abs(weights.mean() - 1.0) <= 4 * se
    for r in runs[:50]:
        assert r.control_record.shape == (100, 2)
        assert r.ledger.kl_half_integral >= 0.0


def test_gradient_estimator_cross_validates_in_two_dimensions():
    g = grid()
    model = planar_model()
    x = Segment.constant(g, np.array([0.4, -0.2]))
    z = Segment.constant(g, np.array([1.0, 0.5]))

    def f(w):
        return w[..., -1, 0] + 0.5 * w[..., -1, 1]

    def pairing(xw, uw):
        return uw[..., -1, 0] + 0.5 * uw[..., -1, 1]

    fd = fd_oracle(model, x, z, f, t=0.5, eps=1e-4, n_paths=2000, master_seed=3)
    for lam in (0.0, 2.0):
        est = estimate_gradient(model, x, z, f, pairing, t=0.5, lam=lam,
                                n_paths=2000, master_seed=3)
        combined = math.hypot(est.std_error, fd.std_error)
        assert abs(est.value - fd.value) <= 3 * combined + 1e-9
