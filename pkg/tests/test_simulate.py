"""Simulation: marginal laws vs closed forms, observables, serialization."""

import numpy as np
import pytest

from survadapt.errors import InvalidArgumentError
from survadapt.idm import IllnessDeathSpec, survival_curves
from survadapt.simulate import (
    Cohort,
    TrialTimeline,
    administrative_censor,
    cohort_from_csv,
    cohort_to_csv,
    sample_paths,
    simulate_cohort,
)


def within_3se(p_hat, p, n):
    return abs(p_hat - p) <= 3.0 * np.sqrt(p * (1.0 - p) / n)


class TestSamplePaths:
    def test_pfs_marginal_homogeneous(self):
        # P(T1 ^ T2 > 6) = exp(-0.15*6) = e^{-0.9}
        spec = IllnessDeathSpec.homogeneous(0.10, 0.05, 0.30)
        rng = np.random.default_rng(42)
        n = 200_000
        t1, t2 = sample_paths(spec, n, rng)
        p_hat = np.mean(np.minimum(t1, t2) > 6.0)
        assert within_3se(p_hat, np.exp(-0.9), n)

    def test_os_marginal_matches_closed_form(self):
        spec = IllnessDeathSpec.homogeneous(0.10, 0.05, 0.30)
        rng = np.random.default_rng(7)
        n = 200_000
        _, t2 = sample_paths(spec, n, rng)
        s_os_6 = (5.0 / 3.0) * np.exp(-0.9) - (2.0 / 3.0) * np.exp(-1.8)
        assert within_3se(np.mean(t2 > 6.0), s_os_6, n)

    def test_channel_split_fraction(self):
        # among exits from state 0, a01/(a01+a02) = 2/3 progress first
        spec = IllnessDeathSpec.homogeneous(0.10, 0.05, 0.30)
        rng = np.random.default_rng(3)
        n = 100_000
        t1, _ = sample_paths(spec, n, rng)
        assert within_3se(np.mean(np.isfinite(t1)), 2.0 / 3.0, n)

    def test_piecewise_os_marginal(self):
        # end-to-end check of the inverse-hazard sampler on a time-varying model
        spec = IllnessDeathSpec(
            (0.0, 2.0, 8.0),
            (0.05, 0.20, 0.02),
            (0.02, 0.08, 0.04),
            (0.40, 0.10, 0.25),
        )
        rng = np.random.default_rng(11)
        n = 200_000
        _, t2 = sample_paths(spec, n, rng)
        curves = survival_curves(spec, t_max=30.0)
        for t in (1.5, 5.0, 12.0):
            assert within_3se(np.mean(t2 > t), curves.s_os(t), n)

    def test_zero_hazard_tail_gives_immortals(self):
        spec = IllnessDeathSpec((0.0, 1.0), (0.2, 0.0), (0.1, 0.0), (0.3, 0.0))
        rng = np.random.default_rng(5)
        t1, t2 = sample_paths(spec, 50_000, rng)
        survivors = ~np.isfinite(t2) & ~np.isfinite(t1)
        assert within_3se(np.mean(survivors), np.exp(-0.3), 50_000)
        # progressed patients with the zero a12 tail never die
        stuck = np.isfinite(t1) & ~np.isfinite(t2)
        assert np.all(t1[np.isfinite(t1)] <= 1.0 + 1e-12)
        assert np.any(stuck)

    def test_progression_strictly_before_death(self):
        spec = IllnessDeathSpec.homogeneous(0.10, 0.05, 0.30)
        rng = np.random.default_rng(9)
        t1, t2 = sample_paths(spec, 10_000, rng)
        prog = np.isfinite(t1)
        assert np.all(t2[prog] > t1[prog])


class TestTimeline:
    def test_calendar_arithmetic(self):
        tl = TrialTimeline(accrual1=12.0, accrual2=12.0, followup=18.0, s1=9.0)
        assert tl.interim_calendar == 21.0
        assert tl.final_calendar() == 42.0
        assert tl.final_calendar(extension=36.0) == 78.0

    def test_invalid_s1(self):
        with pytest.raises(InvalidArgumentError):
            TrialTimeline(12.0, 12.0, 18.0, 0.0)


class TestSimulateCohort:
    def test_layout_and_determinism(self):
        spec_c = IllnessDeathSpec.homogeneous(0.10, 0.05, 0.30)
        spec_e = IllnessDeathSpec.homogeneous(0.08, 0.04, 0.25)
        tl = TrialTimeline(12.0, 12.0, 18.0, 9.0)
        sizes = {"C": (150, 150), "E": (150, 150)}
        kw = dict(specs={"C": spec_c, "E": spec_e}, timeline=tl, stage_sizes=sizes)
        a = simulate_cohort(rng=np.random.default_rng(123), **kw)
        b = simulate_cohort(rng=np.random.default_rng(123), **kw)
        assert a.n == 600
        np.testing.assert_array_equal(a.entry, b.entry)
        np.testing.assert_array_equal(a.t2, b.t2)
        s1_mask = a.stage == 1
        assert np.all(a.entry[s1_mask] <= 12.0)
        assert np.all(a.entry[~s1_mask] > 12.0)
        assert np.all(a.entry <= 24.0)
        assert set(np.unique(a.arm)) == {"C", "E"}
        assert a.ids.size == np.unique(a.ids).size

    def test_label_mismatch_rejected(self):
        spec = IllnessDeathSpec.homogeneous(0.1, 0.05, 0.3)
        tl = TrialTimeline(12.0, 12.0, 18.0, 9.0)
        with pytest.raises(InvalidArgumentError):
            simulate_cohort({"C": spec}, tl, {"E": (10, 10)}, np.random.default_rng(0))


class TestAdministrativeCensor:
    def _tiny_cohort(self):
        # one patient: entry 2, progression 5, death 9, no dropout
        return Cohort(
            ids=np.array([0]),
            arm=np.array(["A"]),
            stage=np.array([1]),
            entry=np.array([2.0]),
            t1=np.array([5.0]),
            t2=np.array([9.0]),
            c=np.array([np.inf]),
        )

    def test_observables_at_calendar_10(self):
        # admin cap C = 10 - 2 = 8: progression seen at 5, death unseen, censored at 8
        snap = administrative_censor(self._tiny_cohort(), 10.0)
        assert snap.prog_ind[0] and snap.prog_time[0] == 5.0
        assert not snap.death_ind[0] and snap.death_time[0] == 0.0
        assert snap.cens_ind[0] and snap.cens_time[0] == 8.0

    def test_observables_at_calendar_12(self):
        # C = 10 now exceeds the death time: full path observed
        snap = administrative_censor(self._tiny_cohort(), 12.0)
        assert snap.prog_ind[0] and snap.death_ind[0] and not snap.cens_ind[0]
        assert snap.death_time[0] == 9.0

    def test_not_yet_enrolled_excluded(self):
        snap = administrative_censor(self._tiny_cohort(), 1.0)
        assert snap.n == 0

    def test_stage_filter_and_interim_followup_floor(self):
        spec = IllnessDeathSpec.homogeneous(0.10, 0.05, 0.30)
        tl = TrialTimeline(12.0, 12.0, 18.0, 9.0)
        cohort = simulate_cohort({"A": spec}, tl, {"A": (200, 200)}, np.random.default_rng(1))
        snap = administrative_censor(cohort, tl.interim_calendar, stage=1)
        assert snap.n == 200
        # every stage-1 patient carries at least s1 of potential follow-up
        cens = snap.cens_ind & (snap.cens_time < tl.s1 - 1e-12)
        assert not np.any(cens)

    def test_interim_and_final_agree_below_s1(self):
        spec = IllnessDeathSpec.homogeneous(0.10, 0.05, 0.30)
        tl = TrialTimeline(12.0, 12.0, 18.0, 9.0)
        cohort = simulate_cohort({"A": spec}, tl, {"A": (200, 200)}, np.random.default_rng(2))
        interim = administrative_censor(cohort, tl.interim_calendar, stage=1)
        final = administrative_censor(cohort, tl.final_calendar(), stage=1)
        s1 = tl.s1
        # events on [0, s1] are identical in both looks
        np.testing.assert_array_equal(
            interim.prog_ind & (interim.prog_time <= s1),
            final.prog_ind & (final.prog_time <= s1),
        )
        np.testing.assert_array_equal(
            interim.death_ind & (interim.death_time <= s1),
            final.death_ind & (final.death_time <= s1),
        )

    def test_arm_subset(self):
        spec = IllnessDeathSpec.homogeneous(0.10, 0.05, 0.30)
        tl = TrialTimeline(12.0, 0.0, 18.0, 9.0)
        cohort = simulate_cohort(
            {"C": spec, "E": spec}, tl, {"C": (50, 0), "E": (70, 0)}, np.random.default_rng(3)
        )
        snap = administrative_censor(cohort, 40.0)
        assert snap.for_arm("C").n == 50
        assert snap.for_arm("E").n == 70


class TestCsv:
    def test_round_trip_with_inf(self):
        spec = IllnessDeathSpec.homogeneous(0.10, 0.05, 0.30)
        tl = TrialTimeline(12.0, 12.0, 18.0, 9.0)
        cohort = simulate_cohort({"A": spec}, tl, {"A": (40, 40)}, np.random.default_rng(4))
        text = cohort_to_csv(cohort)
        assert text.splitlines()[0] == "id,arm,stage,entry,t1,t2,c"
        assert "inf" in text  # t1 of direct deaths and c without dropout
        back = cohort_from_csv(text)
        for f in ("ids", "arm", "stage", "entry", "t1", "t2", "c"):
            np.testing.assert_array_equal(getattr(back, f), getattr(cohort, f))

    def test_bad_row_rejected(self):
        with pytest.raises(InvalidArgumentError):
            cohort_from_csv("id,arm,stage,entry,t1,t2,c\n0,A,1,0.0,1.0\n")
