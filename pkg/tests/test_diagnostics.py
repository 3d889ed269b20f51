import math

import numpy as np
import pytest

from sddekit import TailBoundSpec, tail_bound_check, tail_excess_threshold
from sddekit.diagnostics import (
    TailPath,
    drift_only_driver,
    squared_ou_driver,
    squared_ou_spec,
)


class TestThreshold:
    def test_zero_r(self):
        spec = TailBoundSpec(A=2.0, B=1.0, lam=4.0, delta=0.4, T=1.0)
        assert tail_excess_threshold(spec, 0.0) == pytest.approx(0.5)

    def test_reference_arithmetic(self):
        spec = TailBoundSpec(A=2.0, B=1.0, lam=4.0, delta=0.4, T=1.0)
        val = tail_excess_threshold(spec, 2.0)
        assert val == pytest.approx(0.5 + 2.0 * 4.0 ** (-0.4), abs=1e-15)
        assert val == pytest.approx(1.649, abs=1e-3)

    def test_monotonicity(self):
        spec = TailBoundSpec(A=2.0, B=1.0, lam=4.0, delta=0.4, T=1.0)
        stronger = TailBoundSpec(A=2.0, B=1.0, lam=8.0, delta=0.4, T=1.0)
        assert tail_excess_threshold(spec, 2.0) > tail_excess_threshold(spec, 1.0)
        assert tail_excess_threshold(stronger, 1.0) < tail_excess_threshold(spec, 1.0)

    def test_negative_r_rejected(self):
        spec = TailBoundSpec(A=2.0, B=1.0, lam=4.0, delta=0.4, T=1.0)
        with pytest.raises(ValueError):
            tail_excess_threshold(spec, -0.1)

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            TailBoundSpec(A=-1.0, B=1.0, lam=1.0, delta=0.25, T=1.0)
        with pytest.raises(ValueError):
            TailBoundSpec(A=1.0, B=1.0, lam=1.0, delta=0.6, T=1.0)


class TestDriftOnlyDriver:
    def test_zero_exceedances_for_positive_r(self):
        spec = TailBoundSpec(A=1.0, B=1.0, lam=2.0, delta=0.25, T=1.0)
        driver = drift_only_driver(spec, v0=0.25, dt=0.005)
        report = tail_bound_check(driver, spec, [0.0, 0.25, 0.5, 1.0], 100, master_seed=0)
        assert report.n_discarded == 0
        assert all(f == 0.0 for r, f in zip(report.r_grid, report.frequencies) if r > 0)

    def test_pathwise_drift_cap_exact(self):
        # with no martingale part the running excess never reaches A/lam
        spec = TailBoundSpec(A=1.0, B=1.0, lam=2.0, delta=0.25, T=2.0)
        driver = drift_only_driver(spec, v0=3.0, dt=0.01)
        path = driver(np.random.default_rng(0))
        tt = np.arange(len(path.v)) * path.dt
        excess = path.v - np.exp(-spec.lam * tt) * path.v[0]
        assert np.max(excess) < spec.A / spec.lam


class TestSquaredOuDriver:
    def test_declared_caps_hold_to_stop(self):
        spec = squared_ou_spec(1.0, 1.0, 2.0, 0.25, 1.0)
        driver = squared_ou_driver(1.0, 1.0, 0.5, 2.0, 0.005, 1.0)
        for i in range(50):
            path = driver(np.random.default_rng(i))
            k = path.stop_index
            assert np.all(path.drift[:k] <= -spec.lam * path.v[:k] + spec.A + 1e-12)
            assert np.all(path.mvar_rate[:k] <= spec.B + 1e-12)

    def test_negative_slope_with_ci(self):
        spec = squared_ou_spec(1.0, 1.0, 2.0, 0.25, 1.0)
        driver = squared_ou_driver(1.0, 1.0, 0.5, 2.0, 0.005, 1.0)
        report = tail_bound_check(driver, spec, [0.2, 0.4, 0.6, 0.8, 1.0], 4000,
                                      master_seed=1)
        assert report.n_discarded == 0
        assert report.slope is not None and report.slope < 0
        assert report.slope_excludes_zero

    def test_doubling_decay_shifts_exceedances_down(self):
        # frequency of clearing a fixed absolute level drops when the pull doubles
        level = 1.5
        freqs = []
        for theta in (1.0, 2.0):
            driver = squared_ou_driver(theta, 1.0, 0.5, 4.0, 0.005, 1.0)
            spec = squared_ou_spec(theta, 1.0, 4.0, 0.25, 1.0)
            stats = []
            for i in range(2000):
                path = driver(np.random.default_rng(1000 + i))
                k = path.stop_index
                tt = np.arange(k + 1) * path.dt
                stats.append(np.max(path.v[: k + 1] - np.exp(-spec.lam * tt) * path.v[0]))
            freqs.append(np.mean(np.asarray(stats) >= level))
        assert freqs[1] < freqs[0]

    def test_misdeclared_variation_cap_discards_some(self):
        driver = squared_ou_driver(1.0, 1.0, 0.5, 2.0, 0.005, 1.0)
        tight = TailBoundSpec(A=1.0, B=4.0 * (0.8 * 2.0) ** 2, lam=2.0, delta=0.25, T=1.0)
        report = tail_bound_check(driver, tight, [0.5], 500, master_seed=2)
        assert 0 < report.n_discarded < 500

    def test_misdeclared_drift_cap_discards_all(self):
        driver = squared_ou_driver(1.0, 1.0, 0.5, 2.0, 0.005, 1.0)
        wrong = TailBoundSpec(A=0.5, B=16.0, lam=2.0, delta=0.25, T=1.0)
        with pytest.raises(RuntimeError, match="discarded"):
            tail_bound_check(driver, wrong, [0.5], 50, master_seed=3)

    def test_driver_stop_index_validated(self):
        spec = TailBoundSpec(A=1.0, B=1.0, lam=2.0, delta=0.25, T=1.0)

        def bad_driver(rng):
            return TailPath(v=np.ones(3), drift=np.zeros(2), mvar_rate=np.zeros(2),
                            dt=0.5, stop_index=5)

        with pytest.raises(ValueError, match="stop_index"):
            tail_bound_check(bad_driver, spec, [0.5], 5, master_seed=4)
