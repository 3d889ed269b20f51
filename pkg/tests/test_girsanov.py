import math

import numpy as np
import pytest

from sddekit import (
    GirsanovLedger,
    accumulate,
    diff_lower_bound,
    importance_weight,
    pinsker_tv_bound,
)

from oracles import gaussian_shift_tv


class TestAccumulate:
    def test_zero_distortion(self):
        ledger = GirsanovLedger()
        for _ in range(10):
            ledger = accumulate(ledger, 0.0, 0.3, 0.2)
        assert ledger.kl_half_integral == 0.0
        assert ledger.log_exponent == 0.0
        assert ledger.t_elapsed == pytest.approx(2.0)

    def test_unit_distortion_two_time_units(self):
        ledger = GirsanovLedger()
        for _ in range(200):
            ledger = accumulate(ledger, 1.0, 0.0, 0.01)
        assert ledger.kl_half_integral == pytest.approx(1.0, abs=1e-12)

    def test_front_loaded_distortion(self):
        ledger = GirsanovLedger()
        for _ in range(50):
            ledger = accumulate(ledger, 2.0, 0.0, 0.01)
        for _ in range(50):
            ledger = accumulate(ledger, 0.0, 0.0, 0.01)
        assert ledger.kl_half_integral == pytest.approx(1.0, abs=1e-12)

    def test_kl_monotone(self):
        rng = np.random.default_rng(0)
        ledger = GirsanovLedger()
        last = 0.0
        for _ in range(100):
            ledger = accumulate(ledger, rng.normal(), rng.normal() * 0.1, 0.05)
            assert ledger.kl_half_integral >= last
            last = ledger.kl_half_integral

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            accumulate(GirsanovLedger(), np.nan, 0.0, 0.1)
        with pytest.raises(ValueError):
            accumulate(GirsanovLedger(), 1.0, 0.0, 0.0)


class TestPinsker:
    def test_trivial_values(self):
        assert pinsker_tv_bound(0.0) == 0.0
        assert pinsker_tv_bound(1.0) == pytest.approx(0.7071067811865476, abs=1e-15)

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            pinsker_tv_bound(-1e-9)

    def test_dominates_exact_gaussian_tv_single(self):
        # constant unit drift over two time units: terminal laws N(0,2), N(2,2)
        kl = 1.0
        exact = gaussian_shift_tv(2.0, 2.0)
        assert exact == pytest.approx(0.5204998778130465, abs=1e-12)
        assert pinsker_tv_bound(kl) >= exact

    def test_dominates_exact_gaussian_tv_grid(self):
        for beta in np.linspace(0.25, 2.0, 5):
            for horizon in np.linspace(0.5, 4.0, 5):
                kl = 0.5 * beta**2 * horizon
                exact = gaussian_shift_tv(beta * horizon, horizon)
                assert pinsker_tv_bound(kl) >= exact


class TestDiffLowerBound:
    def test_boundary_case_vanishes(self):
        assert diff_lower_bound(1.0, 0.0, 2.0) == pytest.approx(0.0, abs=1e-15)

    def test_reference_value(self):
        n = math.exp(4.0) * 16.0
        val = diff_lower_bound(0.5, 1.0, n)
        # direct arithmetic: 0.5/N - (1 + ln 2)/(N ln N)
        direct = 0.5 / n - (1.0 + math.log(2.0)) / (n * math.log(n))
        assert val == pytest.approx(direct, abs=1e-18)
        assert val == pytest.approx(2.8618e-4, rel=2e-4)
        # ln N = 4 (kl + ln 2) makes the subtraction cancel to a quarter of 1/N
        assert val == pytest.approx(1.0 / (4.0 * n), rel=1e-12)

    def test_can_go_negative(self):
        assert diff_lower_bound(0.1, 5.0, 2.0) < 0.0

    def test_monotone_in_kl_and_mass(self):
        base = diff_lower_bound(0.5, 1.0, 50.0)
        assert diff_lower_bound(0.5, 2.0, 50.0) < base
        assert diff_lower_bound(0.6, 1.0, 50.0) > base

    def test_domain_errors(self):
        with pytest.raises(ValueError):
            diff_lower_bound(1.5, 1.0, 2.0)
        with pytest.raises(ValueError):
            diff_lower_bound(0.5, 1.0, 1.0)
        with pytest.raises(ValueError):
            diff_lower_bound(0.5, -0.1, 2.0)


class TestImportanceWeight:
    def test_zero_ledger(self):
        assert importance_weight(GirsanovLedger()) == 1.0

    def test_hand_computed_exponent(self):
        etas = [0.5, -1.0, 2.0]
        dws = [0.1, 0.2, -0.3]
        dt = 0.5
        ledger = GirsanovLedger()
        for e, w in zip(etas, dws):
            ledger = accumulate(ledger, e, w, dt)
        # quadrature by hand: kl = 0.5*(0.25 + 1 + 4)*0.5 = 1.3125
        # exponent = (0.05 - 0.2 - 0.6) - 1.3125 = -2.0625
        assert ledger.kl_half_integral == pytest.approx(1.3125, abs=1e-15)
        assert ledger.log_exponent == pytest.approx(-2.0625, abs=1e-15)
        assert importance_weight(ledger) == pytest.approx(math.exp(-2.0625), rel=1e-15)

    def test_overflow_reports_exponent(self):
        with pytest.raises(OverflowError) as err:
            importance_weight(GirsanovLedger(0.0, 1000.0, 1.0))
        assert "1000" in str(err.value)

    def test_mean_weight_is_one(self):
        # predictable bounded distortion: the exponential weight has mean one
        # exactly, in discrete time too
        rng = np.random.default_rng(42)
        n, steps, dt = 10_000, 50, 0.02
        dw = rng.normal(0.0, math.sqrt(dt), size=(n, steps))
        state = np.zeros(n)
        kl = np.zeros(n)
        log_exp = np.zeros(n)
        for k in range(steps):
            eta = np.tanh(state)  # depends only on increments before step k
            quad = 0.5 * eta**2 * dt
            kl += quad
            log_exp += eta * dw[:, k] - quad
            state += dw[:, k]
        weights = np.array([
            importance_weight(GirsanovLedger(kl[i], log_exp[i], steps * dt)) for i in range(n)
        ])
        se = weights.std(ddof=1) / math.sqrt(n)
        assert abs(weights.mean() - 1.0) <= 3 * se
