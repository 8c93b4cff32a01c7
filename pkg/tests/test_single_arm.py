"""Plug-in OS statistics: single-death oracle, matrix structure, increments."""

import numpy as np
import pytest

from survadapt.errors import DegenerateInterimError, ProtocolViolationError
from survadapt.idm import IllnessDeathSpec, survival_curves
from survadapt.simulate import Snapshot, TrialTimeline, administrative_censor, simulate_cohort
from survadapt.single_arm import PluginStatistics, interim_summary

REF_SPEC = IllnessDeathSpec.homogeneous(0.10, 0.05, 0.30)
REF = survival_curves(REF_SPEC, t_max=80.0)


class UnitReference:
    """s_os identically 1: isolates the stochastic-integral parts."""

    def s_os(self, t):
        return np.ones_like(np.asarray(t, dtype=float))


def single_death_snapshot():
    return Snapshot(
        n=1,
        s=5.0,
        arm=np.array(["A"]),
        prog_ind=np.array([False]),
        prog_time=np.array([0.0]),
        death_ind=np.array([True]),
        death_time=np.array([2.0]),
        cens_ind=np.array([False]),
        cens_time=np.array([0.0]),
    )


def sim_stats(seed, n=200, spec=REF_SPEC, calendar=30.0, reference=REF):
    tl = TrialTimeline(6.0, 0.0, 24.0, 6.0)
    cohort = simulate_cohort({"A": spec}, tl, {"A": (n, 0)}, np.random.default_rng(seed))
    return PluginStatistics(administrative_censor(cohort, calendar), reference)


class TestSingleDeathOracle:
    def setup_method(self):
        self.ps = PluginStatistics(single_death_snapshot(), UnitReference())

    def test_vhat_entries(self):
        v = self.ps.vhat(5.0)
        n = 1.0
        # the lone death is a first event too: S-hat(2-)=1, F02 jumps to 1 at 2
        expected = np.zeros((4, 4))
        for i, j in ((0, 0), (0, 2), (0, 3), (2, 2), (2, 3), (3, 3)):
            expected[i, j] = expected[j, i] = n
        np.testing.assert_allclose(v, expected, atol=1e-14)

    def test_structural_zeros(self):
        v = self.ps.vhat(5.0)
        assert v[0, 1] == v[1, 2] == v[1, 3] == 0.0

    def test_contrast_and_sigma(self):
        np.testing.assert_allclose(self.ps.lhat(5.0), [1.0, 1.0, -1.0, 1.0])
        assert self.ps.sigma2(5.0) == pytest.approx(1.0, abs=1e-14)

    def test_jump_inclusive_f_in_integrands(self):
        # with F at u- instead, V14 and V34 would vanish and sigma2 would be 3
        v = self.ps.vhat(5.0)
        assert v[0, 3] == pytest.approx(1.0, abs=1e-14)
        assert v[2, 3] == pytest.approx(1.0, abs=1e-14)

    def test_left_limit_survival_in_f(self):
        # S-hat at 2- must ignore the jump at 2 itself
        assert self.ps.f02(5.0) == pytest.approx(1.0, abs=1e-14)
        assert self.ps.s_pfs_hat_left(2.0) == 1.0


class TestMatrixStructure:
    def test_positive_semidefinite(self):
        for seed in range(6):
            ps = sim_stats(seed)
            eigvals = np.linalg.eigvalsh(ps.vhat(12.0))
            assert eigvals.min() >= -1e-10

    def test_monotone_in_s(self):
        ps = sim_stats(3)
        d = ps.vhat(18.0) - ps.vhat(9.0)
        assert np.linalg.eigvalsh(d).min() >= -1e-10

    def test_increment_additivity_with_common_contrast(self):
        ps = sim_stats(5)
        l = ps.lhat(18.0)
        total = l @ (ps.vhat(18.0) - ps.vhat(6.0)) @ l
        split = l @ (ps.vhat(18.0) - ps.vhat(12.0)) @ l + l @ (ps.vhat(12.0) - ps.vhat(6.0)) @ l
        assert total == pytest.approx(split, rel=1e-12)
        assert ps.varsigma2(18.0, 6.0) == pytest.approx(total, rel=1e-12)

    def test_psi_matches_joint_form_when_plugin_is_exact(self):
        # a cohort with no progressions and no censoring before s: the plug-in
        # PFS curve is the empirical one; psi is still finite and centered-ish
        ps = sim_stats(7)
        assert np.isfinite(ps.psi(12.0))


class TestStatisticalBehavior:
    def test_z11_mean_and_scale_under_null(self):
        z = np.array([sim_stats(1000 + r).z11(9.0) for r in range(300)])
        assert abs(z.mean()) <= 4.0 / np.sqrt(z.size)
        assert 0.8 <= z.var(ddof=1) <= 1.25

    def test_compensated_increment_nearly_uncorrelated(self):
        # the raw increment carries (delta_f(s2)-delta_f(s1)) * M0*(s1) from the
        # plug-in curve; once that stage-one term is removed the remainder is
        # independent of the first look
        z1, dz_raw, dz_comp = [], [], []
        for r in range(300):
            ps = sim_stats(5000 + r)
            z1.append(ps.z11(9.0))
            dz_raw.append(ps.z12(9.0, 20.0))
            m = ps._cc.martingale(REF_SPEC, "0*", 9.0)
            dz_comp.append(ps.compensated_z12(9.0, 20.0, m))
        c_raw = np.corrcoef(z1, dz_raw)[0, 1]
        c_comp = np.corrcoef(z1, dz_comp)[0, 1]
        assert abs(c_comp) <= 0.12
        assert abs(c_raw) > abs(c_comp)


class TestInterimSummary:
    def test_contract(self):
        tl = TrialTimeline(6.0, 0.0, 24.0, 6.0)
        cohort = simulate_cohort({"A": REF_SPEC}, tl, {"A": (300, 0)}, np.random.default_rng(77))
        snap = administrative_censor(cohort, 30.0)
        s1 = 9.0
        summ = interim_summary(snap, REF, s1)
        ps = PluginStatistics(snap, REF)
        assert summ.z11 == pytest.approx(ps.z11(s1), rel=1e-12)
        assert summ.lambda0star_s1 == pytest.approx(ps._cc.lambda_0star(s1), rel=1e-12)
        assert summ.delta_f(s1) == pytest.approx(ps.delta_f(s1), rel=1e-12)
        v = ps.vhat(s1)
        l = ps.lhat(s1)
        assert summ.sigma.sigma1 == pytest.approx(np.sqrt(ps.sigma2(s1)), rel=1e-12)
        assert summ.sigma.v33 == pytest.approx(v[2, 2], rel=1e-12)
        expected_cov = (v[0, 2] + ps.delta_f(s1) * v[2, 2] + v[2, 3]) / summ.sigma.sigma1
        assert summ.sigma.cov_z_m == pytest.approx(expected_cov, rel=1e-12)
        assert summ.sigma.varsigma(20.0) == pytest.approx(np.sqrt(ps.varsigma2(20.0, s1)), rel=1e-12)
        assert -1.0 <= summ.sigma.correlation() <= 1.0

    def test_no_events_raises(self):
        snap = Snapshot(
            n=2, s=10.0, arm=np.array(["A", "A"]),
            prog_ind=np.zeros(2, bool), prog_time=np.zeros(2),
            death_ind=np.zeros(2, bool), death_time=np.zeros(2),
            cens_ind=np.ones(2, bool), cens_time=np.full(2, 10.0),
        )
        with pytest.raises(DegenerateInterimError):
            interim_summary(snap, REF, 6.0)

    def test_backwards_looks_rejected(self):
        ps = sim_stats(11)
        with pytest.raises(ProtocolViolationError):
            ps.varsigma2(6.0, 9.0)
