import math

import numpy as np
import pytest
from scipy import stats

from sddekit import (
    LyapunovSpec,
    MetricSpec,
    Segment,
    SddeModel,
    TimeGrid,
    d_metric,
    em_simulate,
    empirical_coupling_distance,
    kr_dual_value,
    lyapunov_catalog,
    lyapunov_drift_check,
    rate_bound,
    rate_functions,
    skeleton,
    stationary_estimate,
)
from sddekit.ergodicity import PhiFunction, fit_rate_envelope, skeleton_distance_curve
from sddekit.models import make_model

from oracles import linear_em_flow, transport_bruteforce


def grid(dt=0.1, delay_steps=5, horizon_steps=40):
    return TimeGrid(dt, delay_steps, horizon_steps)


def random_segments(g, count, rng, dim=1, scale=1.0):
    return [Segment(g, scale * rng.normal(size=(g.n_window, dim))) for _ in range(count)]


class TestSkeleton:
    def test_single_segment_when_horizon_equals_spacing(self):
        g = TimeGrid(0.1, 5, 10)
        model = make_model("linear-delay", kappa0=0.0, kappa1=0.0, sigma=0.0)
        path = em_simulate(model, Segment.constant(g, 1.0), 10, np.zeros((10, 1)))
        segs = skeleton(path, 1.0)
        assert len(segs) == 1
        assert np.all(segs[0].values == 1.0)

    def test_constant_path_identical_segments(self):
        g = TimeGrid(0.1, 5, 40)
        model = make_model("linear-delay", kappa0=0.0, kappa1=0.0, sigma=0.0)
        path = em_simulate(model, Segment.constant(g, 2.0), 40, np.zeros((40, 1)))
        segs = skeleton(path, 1.0)
        assert len(segs) == 4
        for seg in segs:
            assert np.all(seg.values == 2.0)

    def test_off_grid_spacing_rejected(self):
        g = TimeGrid(0.1, 5, 40)
        model = make_model("linear-delay", kappa0=0.0, kappa1=0.0, sigma=0.0)
        path = em_simulate(model, Segment.constant(g, 1.0), 40, np.zeros((40, 1)))
        with pytest.raises(Exception):
            skeleton(path, 0.55)

    def test_linear_decay_across_skeleton_steps(self):
        g = TimeGrid(0.01, 10, 400)
        model = make_model("ou-nodelay", kappa=1.0, sigma=0.0)
        path = em_simulate(model, Segment.constant(g, 1.0), 400, np.zeros((400, 1)))
        segs = skeleton(path, 1.0)
        ends = [s.end_value()[0] for s in segs]
        for k, v in enumerate(ends, start=1):
            assert v == pytest.approx(linear_em_flow(1.0, 0.01, 100 * k), rel=1e-12)
        ratios = [b / a for a, b in zip(ends, ends[1:])]
        assert np.allclose(ratios, ratios[0], rtol=1e-10)


class TestTransportDistance:
    def test_identical_samples(self):
        g = grid()
        rng = np.random.default_rng(1)
        sample = random_segments(g, 6, rng)
        assert empirical_coupling_distance(sample, list(sample), MetricSpec(2.0, 0.5)) == 0.0

    def test_single_points(self):
        g = grid()
        x = Segment.constant(g, 0.3)
        y = Segment.constant(g, 0.0)
        spec = MetricSpec(2.0, 0.5)
        assert empirical_coupling_distance([x], [y], spec) == pytest.approx(
            d_metric(x, y, spec)
        )

    def test_three_by_three_matches_bruteforce(self):
        g = grid()
        spec = MetricSpec(3.0, 0.7)
        rng = np.random.default_rng(2)
        for _ in range(100):
            a = random_segments(g, 3, rng)
            b = random_segments(g, 3, rng)
            cost = np.array([[d_metric(x, y, spec) for y in b] for x in a])
            assert empirical_coupling_distance(a, b, spec) == pytest.approx(
                transport_bruteforce(cost), abs=1e-12
            )

    def test_unequal_sizes_match_duplicate_expansion(self):
        # 2-vs-3 transport equals the assignment on the lcm expansion (6 vs 6)
        g = grid()
        spec = MetricSpec(2.0, 1.0)
        rng = np.random.default_rng(3)
        a = random_segments(g, 2, rng)
        b = random_segments(g, 3, rng)
        lp = empirical_coupling_distance(a, b, spec)
        expanded = empirical_coupling_distance(a * 3, b * 2, spec)
        assert lp == pytest.approx(expanded, abs=1e-9)

    def test_size_cap(self):
        g = TimeGrid(0.1, 1, 2)
        seg = Segment.constant(g, 0.0)
        with pytest.raises(ValueError, match="subsample"):
            empirical_coupling_distance([seg] * 513, [seg], MetricSpec(1.0, 1.0))


class TestKrDual:
    def test_constant_functional(self):
        g = grid()
        rng = np.random.default_rng(4)
        a = random_segments(g, 4, rng)
        b = random_segments(g, 4, rng)
        assert kr_dual_value(lambda w: np.full(w.shape[0], 2.5), a, b,
                             MetricSpec(1.0, 1.0)) == 0.0

    def test_two_point_duality_tight(self):
        g = grid()
        spec = MetricSpec(2.0, 0.5)
        x = Segment.constant(g, 0.4)
        y = Segment.constant(g, 0.0)

        def f(w):
            gap = np.linalg.norm(w - y.values, axis=-1).max(axis=-1)
            return np.minimum(spec.N * gap**spec.gamma, 1.0)

        dual = kr_dual_value(f, [x], [y], spec)
        assert dual == pytest.approx(d_metric(x, y, spec), abs=1e-12)
        assert dual == pytest.approx(empirical_coupling_distance([x], [y], spec), abs=1e-12)

    def test_dual_never_exceeds_transport(self):
        g = grid()
        spec = MetricSpec(2.0, 0.5)
        rng = np.random.default_rng(5)
        anchor = Segment.constant(g, 0.0)

        def f(w):
            gap = np.linalg.norm(w - anchor.values, axis=-1).max(axis=-1)
            return np.minimum(spec.N * gap**spec.gamma, 1.0)

        for _ in range(25):
            a = random_segments(g, 3, rng)
            b = random_segments(g, 3, rng)
            assert kr_dual_value(f, a, b, spec) <= (
                empirical_coupling_distance(a, b, spec) + 1e-12
            )

    def test_lipschitz_violation_names_pair(self):
        g = grid()
        rng = np.random.default_rng(6)
        a = random_segments(g, 3, rng)
        b = random_segments(g, 3, rng)
        with pytest.raises(ValueError, match=r"pair \((a|b)\[\d\], (a|b)\[\d\]\)"):
            kr_dual_value(lambda w: 10.0 * w[:, -1, 0], a, b, MetricSpec(1.0, 1.0))


class TestLyapunovDriftCheck:
    def test_vacuous_condition_passes(self):
        g = TimeGrid(0.05, 4, 20)
        model = make_model("linear-delay")
        spec = LyapunovSpec(
            V=lambda w: 1.0 + np.linalg.norm(w[..., -1, :], axis=-1) ** 2,
            phi=lambda v: 0.0,
            C_V=1e6,
            h=1.0,
        )
        probes = [Segment.constant(g, v) for v in (0.0, 1.0, 3.0)]
        report = lyapunov_drift_check(model, spec, probes, 200, master_seed=1)
        assert report.all_pass

    def test_deterministic_flow_drift_exact(self):
        g = TimeGrid(0.01, 10, 100)
        model = SddeModel(
            1, 1,
            drift=lambda w: -w[..., -1, :],
            diffusion=lambda w: np.zeros(w.shape[:-2] + (1, 1)),
        )
        spec = LyapunovSpec(
            V=lambda w: 1.0 + np.linalg.norm(w[..., -1, :], axis=-1) ** 2,
            phi=lambda v: 0.1 * v,
            C_V=1.0,
            h=1.0,
        )
        probe = Segment.constant(g, 2.0)
        report = lyapunov_drift_check(model, spec, [probe], 50, master_seed=2)
        row = report.rows[0]
        flow_end = 2.0 * linear_em_flow(1.0, 0.01, 100)
        expected = (1.0 + flow_end**2) - 5.0
        assert row.mean_drift == pytest.approx(expected, abs=1e-12)
        assert row.ci_halfwidth == pytest.approx(0.0, abs=1e-12)
        assert row.passes == (expected <= -0.1 * 5.0 + 1.0)

    def test_rejects_v_below_one(self):
        g = TimeGrid(0.05, 4, 20)
        model = make_model("linear-delay")
        spec = LyapunovSpec(
            V=lambda w: np.linalg.norm(w[..., -1, :], axis=-1) ** 2,  # 0 at the origin
            phi=lambda v: 0.0,
            C_V=1.0,
            h=1.0,
        )
        with pytest.raises(ValueError, match="below 1|< 1"):
            lyapunov_drift_check(model, spec, [Segment.constant(g, 0.0)], 10, master_seed=3)

    def test_prop_kappa_case_one_passes_at_probes(self):
        g = TimeGrid(0.01, 50, 100)
        model = make_model("prop-kappa", kappa=1.0, A=1.0, R=1.0, sigma=0.5)
        spec = lyapunov_catalog(1.0, c=0.5, alpha=0.5, C_V=2.0, h=1.0)
        probes = [Segment.constant(g, v) for v in (2.0, 4.0, 8.0)]
        report = lyapunov_drift_check(model, spec, probes, 2000, master_seed=4)
        assert report.all_pass

    def test_mean_reverting_with_delay_feedback_passes(self):
        g = TimeGrid(0.01, 50, 100)
        model = make_model("linear-delay", kappa0=1.0, kappa1=0.2, sigma=0.5)
        spec = lyapunov_catalog(1.0, c=0.4, alpha=0.5, C_V=2.0, h=1.0)
        probes = [Segment.constant(g, v) for v in (2.0, 4.0, 8.0)]
        report = lyapunov_drift_check(model, spec, probes, 2000, master_seed=14)
        assert report.all_pass


class TestLyapunovCatalog:
    def test_case_positive_kappa_shapes(self):
        spec = lyapunov_catalog(1.0, c=0.7, alpha=0.5, h=1.0)
        assert isinstance(spec.phi, PhiFunction) and spec.phi.kind == "linear"
        assert spec.phi(2.0) == pytest.approx(1.4)
        g = grid()
        assert spec.V(Segment.constant(g, 2.0).values) == pytest.approx(math.exp(1.0))

    def test_case_fractional_kappa_exponent(self):
        spec = lyapunov_catalog(-0.5, c=1.0, alpha=0.5, h=1.0)
        assert spec.phi.kind == "log_damped"
        assert spec.phi.exponent == pytest.approx(-2.0)
        g = grid()
        # V = exp(alpha |x(0)|^(kappa+1)) with kappa + 1 = 1/2
        assert spec.V(Segment.constant(g, 4.0).values) == pytest.approx(math.exp(0.5 * 2.0))

    def test_case_minus_one_admissible_range(self):
        spec = lyapunov_catalog(-1.0, c=1.0, h=1.0, p=4.9, A_minus1=2.0, Lambda=1.0)
        assert spec.phi.kind == "power"
        assert spec.phi.exponent == pytest.approx(1.0 - 2.0 / 4.9)
        with pytest.raises(ValueError, match=r"p must lie in \(2, 5\)"):
            lyapunov_catalog(-1.0, c=1.0, h=1.0, p=5.1, A_minus1=2.0, Lambda=1.0)
        with pytest.raises(ValueError, match="2\\*A_minus1 > Lambda"):
            lyapunov_catalog(-1.0, c=1.0, h=1.0, p=2.5, A_minus1=0.4, Lambda=1.0)

    def test_case_minus_one_clamps_v_at_one(self):
        spec = lyapunov_catalog(-1.0, c=1.0, h=1.0, p=3.0, A_minus1=2.0, Lambda=1.0)
        g = grid()
        assert spec.V(Segment.constant(g, 0.1).values) == 1.0
        assert spec.V(Segment.constant(g, 2.0).values) == pytest.approx(8.0)

    def test_kappa_below_minus_one_rejected(self):
        with pytest.raises(ValueError):
            lyapunov_catalog(-1.5)


class TestRateFunctions:
    def test_identity_speed(self):
        rf = rate_functions(PhiFunction("linear", 1.0))
        assert rf.Phi(1.0) == 0.0
        assert rf.Phi(math.e) == pytest.approx(1.0, abs=1e-12)
        assert rf.r(0.0) == pytest.approx(1.0)
        assert rf.r(1.0) == pytest.approx(math.e)

    def test_doubled_speed_closed_form(self):
        rf = rate_functions(PhiFunction("linear", 2.0))
        assert rf.Phi(4.0) == pytest.approx(0.5 * math.log(4.0))
        assert rf.r(1.0) == pytest.approx(2.0 * math.e**2, rel=1e-12)
        assert rf.r(1.0) == pytest.approx(14.7781121978613, rel=1e-10)

    def test_square_root_speed_closed_form(self):
        rf = rate_functions(PhiFunction("power", 1.0, exponent=0.5))
        assert rf.Phi(9.0) == pytest.approx(2.0 * (3.0 - 1.0))
        assert rf.Phi_inv(3.0) == pytest.approx((1.0 + 1.5) ** 2)
        assert rf.r(3.0) == pytest.approx(1.0 + 1.5)

    def test_roundtrip_catalog_families(self):
        for phi in (
            PhiFunction("linear", 0.5),
            PhiFunction("power", 0.8, exponent=1.0 - 2.0 / 3.0),
            PhiFunction("log_damped", 0.5, exponent=-2.0, offset=3.0),
        ):
            rf = rate_functions(phi)
            for v in np.exp(np.linspace(0.0, math.log(1e6), 9)):
                t = rf.Phi(float(v))
                assert rf.Phi(rf.Phi_inv(t)) == pytest.approx(t, abs=1e-8)
                assert rf.Phi_inv(t) == pytest.approx(v, rel=1e-6)

    def test_rejects_nonpositive_speed(self):
        with pytest.raises(ValueError, match="positive"):
            rate_functions(lambda v: -1.0)


class TestRateBound:
    def test_at_time_zero(self):
        val = rate_bound(0.0, 4.0, PhiFunction("linear", 1.0), 0.5, 1.0, 1.0)
        assert val == pytest.approx(2.0)

    def test_linear_speed_closed_form(self):
        phi = PhiFunction("linear", 1.0)
        for t in (0.5, 1.0, 2.0):
            val = rate_bound(t, 4.0, phi, 0.5, 1.0, 3.0)
            assert val == pytest.approx(3.0 * 2.0 * math.exp(-0.5 * t), rel=1e-12)

    def test_sharper_exponent_decays_faster(self):
        phi = PhiFunction("linear", 1.0)
        slow = rate_bound(4.0, 4.0, phi, 0.3, 1.0, 1.0)
        fast = rate_bound(4.0, 4.0, phi, 0.9, 1.0, 1.0)
        assert fast < slow

    def test_domain(self):
        with pytest.raises(ValueError):
            rate_bound(1.0, 4.0, PhiFunction("linear", 1.0), 1.5, 1.0, 1.0)


class TestStationaryEstimate:
    def test_empty_request(self):
        g = grid()
        model = make_model("ou-nodelay")
        assert stationary_estimate(model, Segment.constant(g, 0.0), 1.0, 1.0, 0, 1) == []

    def test_deterministic_attractor(self):
        g = TimeGrid(0.01, 10, 10)
        model = make_model("ou-nodelay", kappa=1.0, sigma=0.0)
        samples = stationary_estimate(model, Segment.constant(g, 3.0), 20.0, 1.0, 5, 2)
        for seg in samples:
            assert seg.sup_norm() < 1e-6

    def test_ou_terminal_matches_gaussian(self):
        g = TimeGrid(0.01, 50, 100)
        model = make_model("ou-nodelay", kappa=1.0, sigma=1.0)
        samples = stationary_estimate(model, Segment.constant(g, 0.0), 10.0, 2.0, 256, 3)
        terminal = np.array([s.end_value()[0] for s in samples])
        _, pval = stats.kstest(terminal, "norm", args=(0.0, math.sqrt(0.5)))
        assert pval > 0.01

    def test_overflow_guard(self):
        g = grid(dt=0.001)
        model = make_model("ou-nodelay")
        with pytest.raises(OverflowError):
            stationary_estimate(model, Segment.constant(g, 0.0), 1.0, 1.0, 10**9, 4)


class TestDecayCurveAndEnvelope:
    def test_ou_curve_decays_and_envelope_dominates(self):
        g = TimeGrid(0.01, 50, 400)
        model = make_model("ou-nodelay", kappa=1.0, sigma=1.0)
        x0 = Segment.constant(g, 4.0)
        curve = skeleton_distance_curve(
            model, x0, [1.0, 2.0, 4.0], 96, spacing=2.0, burn_in=10.0,
            spec=MetricSpec(1.0, 1.0), master_seed=5, n_boot=16,
        )
        dists = [row.distance for row in curve.rows]
        assert curve.monotone_within_noise()
        assert dists[-1] < dists[0]
        phi = PhiFunction("linear", 1.0)
        v_x = math.exp(0.5 * 4.0)
        c_fit, big_c = fit_rate_envelope([r.t for r in curve.rows], dists, phi, v_x, 0.5)
        for row in curve.rows:
            assert rate_bound(row.t, v_x, phi, 0.5, c_fit, big_c) >= row.distance - 1e-12

    def test_envelope_fit_requires_linear_speed(self):
        with pytest.raises(ValueError, match="linear"):
            fit_rate_envelope([1.0, 2.0], [0.5, 0.3], PhiFunction("power", 1.0, exponent=0.5),
                              4.0, 0.5)
