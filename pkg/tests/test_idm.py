"""Illness-death model: closed-form oracles, identities, alternative construction."""

import numpy as np
import pytest

from survadapt.errors import InfeasibleAlternativeError, InvalidArgumentError
from survadapt.idm import (
    ContiguousAlternative,
    IllnessDeathSpec,
    _occupancy,
    apply_contiguous_alternative,
    cumulative_hazard,
    os_identity_residual,
    survival_curves,
)


def random_spec(rng):
    n_seg = int(rng.integers(1, 5))
    gaps = rng.uniform(0.5, 8.0, size=n_seg - 1)
    breaks = (0.0,) + tuple(np.cumsum(gaps))
    draw = lambda: tuple(rng.uniform(0.0, 0.5, size=n_seg))
    return IllnessDeathSpec(breaks, draw(), draw(), draw())


class TestValidation:
    def test_breakpoints_must_start_at_zero(self):
        with pytest.raises(InvalidArgumentError):
            IllnessDeathSpec((1.0,), (0.1,), (0.1,), (0.1,))

    def test_breakpoints_strictly_increasing(self):
        with pytest.raises(InvalidArgumentError):
            IllnessDeathSpec((0.0, 2.0, 2.0), (0.1,) * 3, (0.1,) * 3, (0.1,) * 3)

    def test_rate_length_mismatch(self):
        with pytest.raises(InvalidArgumentError):
            IllnessDeathSpec((0.0, 1.0), (0.1,), (0.1, 0.2), (0.1, 0.2))

    def test_negative_rate(self):
        with pytest.raises(InvalidArgumentError):
            IllnessDeathSpec((0.0,), (-0.1,), (0.1,), (0.1,))

    def test_unknown_transition_label(self):
        spec = IllnessDeathSpec.homogeneous(0.1, 0.05, 0.3)
        with pytest.raises(InvalidArgumentError):
            cumulative_hazard(spec, "21", 1.0)


class TestCumulativeHazard:
    def test_piecewise_hand_integral(self):
        # 0.05 on [0,5), 0.10 after: integral to 8 is 0.25 + 0.30
        spec = IllnessDeathSpec((0.0, 5.0), (0.0, 0.0), (0.05, 0.10), (0.0, 0.0))
        assert cumulative_hazard(spec, "02", 8.0) == pytest.approx(0.55, abs=1e-15)

    def test_homogeneous_is_linear(self):
        spec = IllnessDeathSpec.homogeneous(0.1, 0.05, 0.3)
        t = np.array([0.0, 1.0, 7.5])
        np.testing.assert_allclose(cumulative_hazard(spec, "12", t), 0.3 * t, rtol=1e-15)

    def test_star_is_sum_of_channels(self):
        rng = np.random.default_rng(7)
        spec = random_spec(rng)
        t = rng.uniform(0.0, 20.0, size=11)
        np.testing.assert_allclose(
            cumulative_hazard(spec, "0*", t),
            cumulative_hazard(spec, "01", t) + cumulative_hazard(spec, "02", t),
            rtol=1e-14,
        )

    def test_value_applies_on_left_closed_interval(self):
        spec = IllnessDeathSpec((0.0, 2.0), (0.1, 0.4), (0.0, 0.0), (0.0, 0.0))
        assert spec.rate_at("01", 2.0) == 0.4
        assert spec.rate_at("01", 1.999999) == 0.1


class TestSurvivalCurves:
    def test_homogeneous_os_closed_form(self):
        # (a01,a02,a12) = (0.10,0.05,0.30): s_os = (5/3)e^{-0.15t} - (2/3)e^{-0.30t}
        spec = IllnessDeathSpec.homogeneous(0.10, 0.05, 0.30)
        curves = survival_curves(spec, t_max=60.0)
        t = np.linspace(0.0, 60.0, 241)
        expected = (5.0 / 3.0) * np.exp(-0.15 * t) - (2.0 / 3.0) * np.exp(-0.30 * t)
        np.testing.assert_allclose(curves.s_os(t), expected, atol=1e-14)
        np.testing.assert_allclose(curves.s_pfs(t), np.exp(-0.15 * t), rtol=1e-14)

    def test_rate_collapse_series_limit(self):
        # a12 = a01 + a02 exactly: P01 = a01 * t * exp(-(a01+a02) t)
        spec = IllnessDeathSpec.homogeneous(0.10, 0.05, 0.15)
        t = np.array([0.5, 3.0, 12.0])
        _, p01 = _occupancy(spec, t)
        np.testing.assert_allclose(p01, 0.10 * t * np.exp(-0.15 * t), rtol=1e-12)
        # continuity of the guard: a nearby non-collapsed model agrees closely
        near = IllnessDeathSpec.homogeneous(0.10, 0.05, 0.15 + 1e-9)
        _, p01_near = _occupancy(near, t)
        np.testing.assert_allclose(p01_near, p01, atol=1e-9)

    def test_no_progression_reduces_to_exponential_of_lambda02(self):
        spec = IllnessDeathSpec((0.0, 4.0), (0.0, 0.0), (0.08, 0.2), (0.5, 0.1))
        curves = survival_curves(spec, t_max=30.0)
        t = np.linspace(0.0, 30.0, 101)
        np.testing.assert_allclose(
            curves.s_os(t), np.exp(-cumulative_hazard(spec, "02", t)), atol=1e-13
        )

    def test_equal_death_rates_collapse_os_hazard(self):
        # a12 == a02 pointwise makes death exposure independent of progression
        spec = IllnessDeathSpec((0.0, 3.0), (0.2, 0.05), (0.06, 0.14), (0.06, 0.14))
        curves = survival_curves(spec, t_max=30.0)
        t = np.linspace(0.0, 30.0, 101)
        np.testing.assert_allclose(
            curves.s_os(t), np.exp(-cumulative_hazard(spec, "02", t)), atol=1e-13
        )

    def test_identity_residual_and_form_agreement(self):
        rng = np.random.default_rng(20260814)
        for _ in range(25):
            spec = random_spec(rng)
            curves = survival_curves(spec, t_max=40.0)
            t = float(rng.uniform(1.0, 40.0))
            assert os_identity_residual(spec, curves, t) <= 2e-8
            p00, p01 = _occupancy(spec, t)
            assert abs(curves.s_os(t) - (p00 + p01)) <= 2e-8

    def test_gap_identity(self):
        # s_os - s_pfs = e^{-L12(t)} int e^{-(L0*-L12)(u)} dL01(u)
        rng = np.random.default_rng(11)
        spec = random_spec(rng)
        curves = survival_curves(spec, t_max=25.0)
        t = 17.3
        u = np.linspace(0.0, t, 20001)
        integrand = np.exp(
            -(cumulative_hazard(spec, "0*", u) - cumulative_hazard(spec, "12", u))
        ) * spec.rate_at("01", u)
        gap = np.exp(-cumulative_hazard(spec, "12", t)) * np.trapezoid(integrand, u)
        assert curves.s_os(t) - curves.s_pfs(t) == pytest.approx(gap, abs=5e-7)

    def test_pfs_never_exceeds_os(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            spec = random_spec(rng)
            curves = survival_curves(spec, t_max=50.0)
            t = np.linspace(0.0, 50.0, 201)
            assert np.all(curves.s_os(t) - curves.s_pfs(t) >= -1e-14)

    def test_lambda_os_matches_minus_log(self):
        spec = IllnessDeathSpec.homogeneous(0.10, 0.05, 0.30)
        curves = survival_curves(spec, t_max=30.0)
        assert curves.lambda_os(10.0) == pytest.approx(-np.log(curves.s_os(10.0)), rel=1e-14)


class TestSerialization:
    def test_json_round_trip(self):
        rng = np.random.default_rng(5)
        spec = random_spec(rng)
        assert IllnessDeathSpec.from_json(spec.to_json()) == spec

    def test_missing_key_raises(self):
        with pytest.raises(InvalidArgumentError):
            IllnessDeathSpec.from_dict({"breakpoints": [0.0], "alpha01": [0.1]})


class TestContiguousAlternative:
    def test_omega_values(self):
        alt = ContiguousAlternative(gamma_pfs=2.0, gamma_os=2.0, stage_sample_size=400)
        assert alt.omega_pfs == pytest.approx(np.exp(-0.1), rel=1e-15)

    def test_zero_gamma_returns_reference(self):
        ref = IllnessDeathSpec.homogeneous(0.10, 0.05, 0.30)
        alt = ContiguousAlternative(0.0, 0.0, 400)
        assert apply_contiguous_alternative(ref, alt, "no_treatment_mortality") is ref

    def test_ph_margins_under_no_treatment_mortality(self):
        ref = IllnessDeathSpec.homogeneous(0.10, 0.05, 0.30)
        alt = ContiguousAlternative(2.0, 2.0, 400)
        shifted = apply_contiguous_alternative(ref, alt, "no_treatment_mortality")
        ref_curves = survival_curves(ref, t_max=60.0)
        alt_curves = survival_curves(shifted, t_max=60.0)
        omega = np.exp(-0.1)
        for t in (3.0, 6.0, 12.0):
            pfs_ratio = np.log(alt_curves.s_pfs(t)) / np.log(ref_curves.s_pfs(t))
            os_ratio = np.log(alt_curves.s_os(t)) / np.log(ref_curves.s_os(t))
            assert pfs_ratio == pytest.approx(omega, abs=1e-4)
            assert os_ratio == pytest.approx(omega, abs=1e-4)

    def test_pinned_channel_is_scaled_reference(self):
        ref = IllnessDeathSpec.homogeneous(0.10, 0.05, 0.30)
        alt = ContiguousAlternative(2.0, 2.0, 400)
        shifted = apply_contiguous_alternative(ref, alt, "no_treatment_mortality")
        omega = np.exp(-0.1)
        np.testing.assert_allclose(np.asarray(shifted.alpha02), omega * 0.05, rtol=1e-10)

    def test_scale_alpha12_infeasible_for_pure_os_effect(self):
        # a12 pinned at omega*0.30 cannot carry a large OS effect alone, so the
        # solved a02 crosses zero (near t ~ 7 for this reference)
        ref = IllnessDeathSpec.homogeneous(0.10, 0.05, 0.30)
        alt = ContiguousAlternative(0.0, 6.0, 400)
        with pytest.raises(InfeasibleAlternativeError) as exc_info:
            apply_contiguous_alternative(ref, alt, "scale_alpha12")
        assert 0.0 < exc_info.value.offending_time < 120.0

    def test_scale_alpha12_feasible_case_has_ph_margins(self):
        # slow progression and high a12 leave room for the solved a02
        ref = IllnessDeathSpec.homogeneous(0.03, 0.10, 0.60)
        alt = ContiguousAlternative(1.0, 1.0, 400)
        shifted = apply_contiguous_alternative(ref, alt, "scale_alpha12")
        ref_curves = survival_curves(ref, t_max=60.0)
        alt_curves = survival_curves(shifted, t_max=60.0)
        omega = np.exp(-0.05)
        for t in (3.0, 6.0, 12.0):
            pfs_ratio = np.log(alt_curves.s_pfs(t)) / np.log(ref_curves.s_pfs(t))
            os_ratio = np.log(alt_curves.s_os(t)) / np.log(ref_curves.s_os(t))
            assert pfs_ratio == pytest.approx(omega, abs=1e-4)
            assert os_ratio == pytest.approx(omega, abs=1e-4)

    def test_unknown_relation(self):
        ref = IllnessDeathSpec.homogeneous(0.10, 0.05, 0.30)
        alt = ContiguousAlternative(1.0, 1.0, 100)
        with pytest.raises(InvalidArgumentError):
            apply_contiguous_alternative(ref, alt, "frailty")

    def test_negative_gamma_rejected(self):
        with pytest.raises(InvalidArgumentError):
            ContiguousAlternative(-1.0, 0.0, 100)
