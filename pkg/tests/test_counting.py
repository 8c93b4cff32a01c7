"""Counting layer: hand-computed risk sets, estimators, compensator identity."""

import numpy as np
import pytest

from survadapt.counting import CohortCounting
from survadapt.errors import InvalidArgumentError
from survadapt.idm import IllnessDeathSpec, cumulative_hazard
from survadapt.simulate import (
    Snapshot,
    TrialTimeline,
    administrative_censor,
    simulate_cohort,
)


def hand_snapshot():
    """Four patients, horizon 10, no administrative truncation in range.

    P0 dies at 2 from state 0; P1 progresses at 1 and dies at 3; P2 progresses
    at 2.5 and is censored at 4; P3 is censored in state 0 at 1.5.
    """
    return Snapshot(
        n=4,
        s=10.0,
        arm=np.array(["A"] * 4),
        prog_ind=np.array([False, True, True, False]),
        prog_time=np.array([0.0, 1.0, 2.5, 0.0]),
        death_ind=np.array([True, True, False, False]),
        death_time=np.array([2.0, 3.0, 0.0, 0.0]),
        cens_ind=np.array([False, False, True, True]),
        cens_time=np.array([0.0, 0.0, 4.0, 1.5]),
    )


class TestRiskSets:
    def test_state0_risk_set(self):
        cc = CohortCounting(hand_snapshot())
        np.testing.assert_array_equal(cc.y02_at(np.array([0.5, 1.0, 1.5, 2.0, 2.5, 3.0])), [4, 4, 3, 2, 1, 0])

    def test_state1_risk_set(self):
        cc = CohortCounting(hand_snapshot())
        # (1,3] for P1, (2.5,4] for P2; at-risk starts strictly after entry
        np.testing.assert_array_equal(cc.y12_at(np.array([1.0, 1.5, 2.5, 3.0, 3.5, 4.0, 4.5])), [0, 1, 1, 2, 1, 1, 0])

    def test_mutually_exclusive_states(self):
        cc = CohortCounting(hand_snapshot())
        u = np.linspace(0.0, 6.0, 601)
        assert np.all(cc.y02_at(u) + cc.y12_at(u) <= cc.n)


class TestNelsonAalen:
    def test_hand_values(self):
        cc = CohortCounting(hand_snapshot())
        assert cc.lambda_0star(10.0) == pytest.approx(0.25 + 0.5 + 1.0, abs=1e-15)
        assert cc.lambda_02(10.0) == pytest.approx(0.5, abs=1e-15)
        assert cc.lambda_01(10.0) == pytest.approx(1.25, abs=1e-15)
        assert cc.lambda_12(10.0) == pytest.approx(0.5, abs=1e-15)

    def test_difference_definition_of_lambda01(self):
        cc = CohortCounting(hand_snapshot())
        t = np.array([0.5, 1.0, 2.0, 2.5, 3.0, 9.0])
        np.testing.assert_allclose(
            cc.lambda_01(t), cc.lambda_0star(t) - cc.lambda_02(t), atol=1e-15
        )

    def test_relabeling_invariance(self):
        snap = hand_snapshot()
        perm = np.array([2, 0, 3, 1])
        shuffled = Snapshot(
            snap.n, snap.s, snap.arm[perm],
            snap.prog_ind[perm], snap.prog_time[perm],
            snap.death_ind[perm], snap.death_time[perm],
            snap.cens_ind[perm], snap.cens_time[perm],
        )
        a, b = CohortCounting(snap), CohortCounting(shuffled)
        np.testing.assert_array_equal(a.lambda_0star.times, b.lambda_0star.times)
        np.testing.assert_array_equal(a.lambda_0star.cum, b.lambda_0star.cum)
        np.testing.assert_array_equal(a._m12.cum, b._m12.cum)

    def test_no_events_gives_zero_estimators(self):
        snap = Snapshot(
            n=2, s=5.0, arm=np.array(["A", "A"]),
            prog_ind=np.zeros(2, bool), prog_time=np.zeros(2),
            death_ind=np.zeros(2, bool), death_time=np.zeros(2),
            cens_ind=np.ones(2, bool), cens_time=np.array([5.0, 5.0]),
        )
        cc = CohortCounting(snap)
        assert cc.lambda_0star(5.0) == 0.0
        assert cc.bracket("12", "12")(5.0) == 0.0


class TestBrackets:
    def test_hand_values(self):
        cc = CohortCounting(hand_snapshot())
        assert cc.bracket("0*", "0*")(10.0) == pytest.approx(4 * (1 / 16 + 1 / 4 + 1), abs=1e-14)
        assert cc.bracket("02", "02")(10.0) == pytest.approx(1.0, abs=1e-14)
        assert cc.bracket("12", "12")(10.0) == pytest.approx(1.0, abs=1e-14)

    def test_state0_cross_bracket_is_smaller_marginal(self):
        cc = CohortCounting(hand_snapshot())
        t = np.array([1.0, 2.0, 3.0, 10.0])
        np.testing.assert_array_equal(cc.bracket("02", "0*")(t), cc.bracket("02", "02")(t))
        np.testing.assert_array_equal(cc.bracket("0*", "02")(t), cc.bracket("02", "02")(t))

    def test_state1_orthogonality(self):
        cc = CohortCounting(hand_snapshot())
        assert cc.bracket("12", "02")(10.0) == 0.0
        assert cc.bracket("12", "0*")(10.0) == 0.0

    def test_no_rule_for_lambda01(self):
        cc = CohortCounting(hand_snapshot())
        with pytest.raises(InvalidArgumentError):
            cc.bracket("01", "02")


class TestCompensator:
    def test_state0_interval(self):
        cc = CohortCounting(hand_snapshot())
        truth = IllnessDeathSpec.homogeneous(0.1, 0.05, 0.3)
        # J02 lives on (0, 2.5]
        assert cc.compensator(truth, "02", 5.0) == pytest.approx(0.05 * 2.5, abs=1e-14)
        assert cc.compensator(truth, "0*", 5.0) == pytest.approx(0.15 * 2.5, abs=1e-14)

    def test_state1_overlapping_intervals_merge(self):
        cc = CohortCounting(hand_snapshot())
        truth = IllnessDeathSpec.homogeneous(0.1, 0.05, 0.3)
        # (1,3] and (2.5,4] merge into (1,4]
        assert cc.risk_intervals("12") == [(1.0, 4.0)]
        assert cc.compensator(truth, "12", 5.0) == pytest.approx(0.3 * 3.0, abs=1e-14)
        assert cc.compensator(truth, "12", 3.5) == pytest.approx(0.3 * 2.5, abs=1e-14)

    def test_disjoint_state1_intervals(self):
        snap = Snapshot(
            n=2, s=20.0, arm=np.array(["A", "A"]),
            prog_ind=np.array([True, True]), prog_time=np.array([1.0, 6.0]),
            death_ind=np.array([True, False]), death_time=np.array([2.0, 0.0]),
            cens_ind=np.array([False, True]), cens_time=np.array([0.0, 9.0]),
        )
        cc = CohortCounting(snap)
        assert cc.risk_intervals("12") == [(1.0, 2.0), (6.0, 9.0)]

    def test_martingale_value(self):
        cc = CohortCounting(hand_snapshot())
        truth = IllnessDeathSpec.homogeneous(0.1, 0.05, 0.3)
        expected = np.sqrt(4) * (0.5 - 0.05 * 2.5)
        assert cc.martingale(truth, "02", 5.0) == pytest.approx(expected, abs=1e-14)

    def test_per_patient_decomposition_matches_interval_arithmetic(self):
        # sum_i int (J/Y12) Y12_i dLambda12 telescopes back to int J dLambda12;
        # computing it patient by patient exercises a different code path
        spec = IllnessDeathSpec((0.0, 3.0), (0.15, 0.05), (0.05, 0.1), (0.4, 0.2))
        tl = TrialTimeline(6.0, 0.0, 24.0, 4.0)
        cohort = simulate_cohort({"A": spec}, tl, {"A": (60, 0)}, np.random.default_rng(8))
        cc = CohortCounting(administrative_censor(cohort, 30.0))
        s = 12.0
        change_pts = np.unique(np.concatenate((cc.state1_start, cc.state1_end, [s])))
        total = 0.0
        for t1, end1 in zip(cc.state1_start, cc.state1_end):
            hi = min(end1, s)
            if hi <= t1:
                continue
            pts = np.concatenate(([t1], change_pts[(change_pts > t1) & (change_pts < hi)], [hi]))
            for a, b in zip(pts[:-1], pts[1:]):
                y = cc.y12_at(b)
                if y > 0:
                    total += (
                        cumulative_hazard(spec, "12", b) - cumulative_hazard(spec, "12", a)
                    ) / y
        assert total == pytest.approx(cc.compensator(spec, "12", s), abs=1e-10)


class TestMartingaleProperty:
    def test_mean_near_zero_under_truth(self):
        # loose 4-sigma sanity run; the acceptance suite runs the strict version
        spec = IllnessDeathSpec.homogeneous(0.10, 0.05, 0.30)
        tl = TrialTimeline(6.0, 0.0, 18.0, 6.0)
        vals = []
        for rep in range(400):
            rng = np.random.default_rng(1000 + rep)
            cohort = simulate_cohort({"A": spec}, tl, {"A": (80, 0)}, rng)
            cc = CohortCounting(administrative_censor(cohort, tl.interim_calendar))
            vals.append(cc.martingale(spec, "12", 6.0))
        vals = np.asarray(vals)
        assert abs(vals.mean()) <= 4.0 * vals.std(ddof=1) / np.sqrt(vals.size)


class TestWeightedMartingale:
    def test_constant_weight_reduces_to_plain(self):
        spec = IllnessDeathSpec.homogeneous(0.10, 0.05, 0.30)
        tl = TrialTimeline(6.0, 0.0, 18.0, 6.0)
        cohort = simulate_cohort({"A": spec}, tl, {"A": (70, 0)}, np.random.default_rng(3))
        cc = CohortCounting(administrative_censor(cohort, 20.0))
        one = lambda u: np.ones_like(np.asarray(u, dtype=float))
        for which in ("01", "02", "12", "0*"):
            assert cc.weighted_martingale(spec, which, one, one, 9.0) == pytest.approx(
                cc.martingale(spec, which, 9.0), abs=1e-12
            )

    def test_hand_value_with_linear_weight(self):
        # hand fixture: single merged state-1 risk interval (1, 4], 12-events
        # at 3 with Y=2; weight w(u) = u
        cc = CohortCounting(hand_snapshot())
        truth = IllnessDeathSpec.homogeneous(0.0, 0.0, 0.2)
        w = lambda u: np.asarray(u, dtype=float)
        jump = 3.0 * 0.5
        # cells split at every grid point inside (1,4]: lefts 1, 2, 2.5, 3
        comp = 0.2 * (1.0 * 1.0 + 2.0 * 0.5 + 2.5 * 0.5 + 3.0 * 1.0)
        expected = np.sqrt(4) * (jump - comp)
        assert cc.weighted_martingale(truth, "12", w, w, 5.0) == pytest.approx(expected, abs=1e-12)

    def test_mean_near_zero_with_plugin_weight(self):
        # weight estimated from the data itself stays predictable, so the
        # weighted compensated process still centers at zero
        spec = IllnessDeathSpec.homogeneous(0.10, 0.05, 0.30)
        tl = TrialTimeline(6.0, 0.0, 18.0, 6.0)
        vals = []
        for rep in range(300):
            rng = np.random.default_rng(7000 + rep)
            cohort = simulate_cohort({"A": spec}, tl, {"A": (60, 0)}, rng)
            cc = CohortCounting(administrative_censor(cohort, tl.interim_calendar))
            w_left = lambda u: np.exp(-cc.lambda_0star.left(u))
            w_right = lambda u: np.exp(-cc.lambda_0star(u))
            vals.append(cc.weighted_martingale(spec, "02", w_left, w_right, 6.0))
        vals = np.asarray(vals)
        assert abs(vals.mean()) <= 4.0 * vals.std(ddof=1) / np.sqrt(vals.size)
