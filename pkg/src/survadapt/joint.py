"""One-sample joint PFS/OS tests against a known reference.

The reference survival curves enter as deterministic integrands, so both test
processes are sums of stochastic integrals against the Nelson-Aalen
estimators plus a smooth drift, and their optional covariations give the
variance and correlation estimates directly. Small one-sided p-values
Phi(Z) reject: improvements push the processes negative.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq
from scipy.special import xlogy
from scipy.stats import norm

from .counting import CohortCounting
from .errors import (
    DegenerateInterimError,
    DegenerateVarianceError,
    EstimateUnavailableError,
    InvalidArgumentError,
    InvalidConfigError,
    NonIncreasingInformationError,
    ProtocolViolationError,
)
from .simulate import Snapshot
from .stepfn import DriftedStepFn, StepFn, stieltjes, stieltjes_cum

__all__ = [
    "JointStatistics",
    "ConditionalErrorFunction",
    "MinPDesign",
    "run_joint_two_stage",
]

_CEF_INTEGRAL_TOL = 1e-6


class JointStatistics:
    """Joint test processes of one cohort against reference curves.

    reference must expose vectorized s_pfs(t) and s_os(t).
    """

    def __init__(self, snapshot: Snapshot, reference):
        self._cc = CohortCounting(snapshot)
        self.n = snapshot.n
        self.reference = reference

    @functools.cached_property
    def psi_pfs(self) -> DriftedStepFn:
        rt = np.sqrt(self.n)
        s_p = self.reference.s_pfs
        step = rt * stieltjes_cum(s_p, self._cc.lambda_0star)
        return DriftedStepFn(step, lambda t: rt * (s_p(t) - 1.0))

    @functools.cached_property
    def psi_os(self) -> DriftedStepFn:
        rt = np.sqrt(self.n)
        s_p, s_o = self.reference.s_pfs, self.reference.s_os
        step = rt * (
            stieltjes_cum(s_p, self._cc.lambda_02)
            + stieltjes_cum(lambda t: s_o(t) - s_p(t), self._cc.lambda_12)
        )
        return DriftedStepFn(step, lambda t: rt * (s_o(t) - 1.0))

    @functools.cached_property
    def bracket_pfs(self) -> StepFn:
        s_p = self.reference.s_pfs
        return stieltjes_cum(lambda t: s_p(t) ** 2, self._cc.bracket("0*", "0*"))

    @functools.cached_property
    def _bracket_os_state0(self) -> StepFn:
        s_p = self.reference.s_pfs
        return stieltjes_cum(lambda t: s_p(t) ** 2, self._cc.bracket("02", "02"))

    @functools.cached_property
    def bracket_os(self) -> StepFn:
        s_p, s_o = self.reference.s_pfs, self.reference.s_os
        state1 = stieltjes_cum(lambda t: (s_o(t) - s_p(t)) ** 2, self._cc.bracket("12", "12"))
        return self._bracket_os_state0 + state1

    def rho(self, s: float) -> float:
        """Estimated correlation of the PFS and OS processes at s, in [0, 1]."""
        v_os = self.bracket_os(s)
        v_pfs = self.bracket_pfs(s)
        if v_os <= 0 or v_pfs <= 0:
            raise DegenerateVarianceError(f"zero variance at s={s}")
        return self._bracket_os_state0(s) / np.sqrt(v_os * v_pfs)

    def standardized(self, endpoint: str, s: float) -> float:
        psi, bracket = self._pick(endpoint)
        v = bracket(s)
        if v <= 0:
            raise DegenerateVarianceError(f"zero {endpoint} variance at s={s}")
        return psi(s) / np.sqrt(v)

    def standardized_increment(self, endpoint: str, s1: float, s2: float) -> float:
        if s2 <= s1:
            raise ProtocolViolationError("second look must come after the first")
        psi, bracket = self._pick(endpoint)
        dv = bracket(s2) - bracket(s1)
        if dv <= 0:
            raise NonIncreasingInformationError(
                f"no {endpoint} information accrued on ({s1}, {s2}]"
            )
        return (psi(s2) - psi(s1)) / np.sqrt(dv)

    def _pick(self, endpoint: str):
        if endpoint == "pfs":
            return self.psi_pfs, self.bracket_pfs
        if endpoint == "os":
            return self.psi_os, self.bracket_os
        raise InvalidArgumentError(f"unknown endpoint {endpoint!r}")

    def mu_a(self, s: float) -> float:
        """OS drift coefficient of gamma_os (reference curve against lambda12)."""
        s_o = self.reference.s_os
        val = float(s_o(s))
        return float(xlogy(val, val)) + stieltjes(
            lambda t: xlogy(s_o(t), s_o(t)), self._cc.lambda_12, s
        )

    def mu_b(self, s: float) -> float:
        """OS drift coefficient of gamma_pfs."""
        s_p = self.reference.s_pfs
        f = lambda t: xlogy(s_p(t), s_p(t))
        return stieltjes(f, self._cc.lambda_02, s) - stieltjes(f, self._cc.lambda_12, s)

    def omega_hat_pfs(self, s: float) -> float:
        """Plug-in PFS hazard-ratio estimate, centered at 1 under the reference."""
        depletion = 1.0 - float(self.reference.s_pfs(s))
        if depletion <= 1e-12:
            raise EstimateUnavailableError("reference PFS must deplete before s")
        return 1.0 + self.psi_pfs(s) / (np.sqrt(self.n) * depletion)

    def omega_hat_os(self, s: float) -> float:
        """Plug-in OS hazard-ratio estimate, corrected for the PFS effect."""
        mu_a = self.mu_a(s)
        if abs(mu_a) <= 1e-12:
            raise EstimateUnavailableError("OS drift scale is degenerate at s")
        shift = self.psi_os(s) / np.sqrt(self.n) + self.mu_b(s) * (self.omega_hat_pfs(s) - 1.0)
        return 1.0 - shift / mu_a


class ConditionalErrorFunction:
    """Tabulated conditional-error allocation on the continuation region.

    Stores (p1, value) nodes with linear interpolation; any instance must be
    nonincreasing, [0, 1]-valued, and integrate to alpha - alpha1 over
    (alpha1, alpha0] within 1e-6.
    """

    def __init__(self, grid, values, alpha: float, alpha1: float, alpha0: float):
        grid = np.asarray(grid, dtype=float)
        values = np.asarray(values, dtype=float)
        if grid.ndim != 1 or grid.shape != values.shape or grid.size < 2:
            raise InvalidConfigError("grid and values must be equal-length 1-d arrays")
        if not np.all(np.diff(grid) > 0):
            raise InvalidConfigError("grid must be strictly increasing")
        if grid[0] > alpha1 or grid[-1] < alpha0:
            raise InvalidConfigError("grid must cover [alpha1, alpha0]")
        if np.any(values < 0) or np.any(values > 1):
            raise InvalidConfigError("conditional error values must lie in [0, 1]")
        if np.any(np.diff(values) > 1e-12):
            raise InvalidConfigError("conditional error must be nonincreasing in p1")
        self.grid = grid
        self.values = values
        self.alpha = float(alpha)
        self.alpha1 = float(alpha1)
        self.alpha0 = float(alpha0)
        gap = abs(self._integral() - (alpha - alpha1))
        if gap > _CEF_INTEGRAL_TOL:
            raise InvalidConfigError(
                f"conditional error integrates to alpha - alpha1 off by {gap:.2e}"
            )

    def _integral(self) -> float:
        pts = np.unique(np.concatenate((self.grid, [self.alpha1, self.alpha0])))
        pts = pts[(pts >= self.alpha1) & (pts <= self.alpha0)]
        return float(np.trapezoid(np.interp(pts, self.grid, self.values), pts))

    def __call__(self, p1: float) -> float:
        return float(np.interp(p1, self.grid, self.values))

    @classmethod
    def constant(cls, alpha: float, alpha1: float, alpha0: float) -> "ConditionalErrorFunction":
        level = (alpha - alpha1) / (alpha0 - alpha1)
        return cls([alpha1, alpha0], [level, level], alpha, alpha1, alpha0)

    @classmethod
    def inverse_p(cls, alpha: float, alpha1: float, alpha0: float) -> "ConditionalErrorFunction":
        """Shape min(1, k/p1), with k set so the quadrature integral is exact."""
        base = np.geomspace(alpha1, alpha0, 513)

        def integral(k):
            pts = np.unique(np.concatenate((base, [min(max(k, alpha1), alpha0)])))
            return np.trapezoid(np.minimum(1.0, k / pts), pts)

        target = alpha - alpha1
        if target <= 0 or target > alpha0 - alpha1:
            raise InvalidConfigError("alpha must satisfy alpha1 < alpha <= alpha0")
        k = brentq(lambda kk: integral(kk) - target, 1e-300, alpha0, xtol=1e-15)
        pts = np.unique(np.concatenate((base, [min(max(k, alpha1), alpha0)])))
        return cls(pts, np.minimum(1.0, k / pts), alpha, alpha1, alpha0)

    @classmethod
    def tabulated(cls, grid, values, alpha: float, alpha1: float, alpha0: float) -> "ConditionalErrorFunction":
        return cls(grid, values, alpha, alpha1, alpha0)


@dataclass(frozen=True)
class MinPDesign:
    """Two-stage min-p combination design for the joint test."""

    alpha: float
    alpha1: float
    alpha0: float
    w1: float
    w2: float
    eta_pfs: tuple
    eta_os: tuple
    cef: ConditionalErrorFunction = field(repr=False)

    def __post_init__(self):
        if not (0.0 < self.alpha1 < self.alpha <= self.alpha0 <= 1.0):
            raise InvalidConfigError("need 0 < alpha1 < alpha <= alpha0 <= 1")
        if abs(self.w1**2 + self.w2**2 - 1.0) > 1e-12:
            raise InvalidConfigError("stage weights must satisfy w1^2 + w2^2 = 1")
        if self.w1 < 0 or self.w2 < 0:
            raise InvalidConfigError("stage weights must be nonnegative")
        for j in (0, 1):
            ep, eo = self.eta_pfs[j], self.eta_os[j]
            if ep <= 0 or eo <= 0 or ep + eo > 1.0 + 1e-12:
                raise InvalidConfigError("min-p weights must be positive and sum to at most 1")

    def min_p(self, p_pfs: float, p_os: float, stage: int) -> float:
        j = stage - 1
        return min(p_pfs / self.eta_pfs[j], p_os / self.eta_os[j])


def run_joint_two_stage(
    reference,
    design: MinPDesign,
    interim: Snapshot,
    final_stage1: Snapshot,
    final_stage2: Snapshot,
    s1: float,
    s2: float,
) -> dict:
    """Full two-stage min-p decision from the three snapshots.

    interim and final_stage1 view the same stage-1 cohort at the two looks;
    the stage-one statistics are recomputed from both and must agree, since
    events on [0, s1] are fully observed at either look.
    """
    if s2 <= s1:
        raise ProtocolViolationError("final look patient time must exceed s1")
    js1 = JointStatistics(interim, reference)
    if js1._cc.grid.size == 0:
        raise DegenerateInterimError("no events observed by the interim look")

    z_pfs_1 = js1.standardized("pfs", s1)
    z_os_1 = js1.standardized("os", s1)
    p1 = design.min_p(norm.cdf(z_pfs_1), norm.cdf(z_os_1), stage=1)

    record = {
        "z_pfs_1": z_pfs_1,
        "z_os_1": z_os_1,
        "p1": p1,
        "decision_stage1": "continue",
        "z_pfs_2": None,
        "z_os_2": None,
        "p2": None,
        "decision_final": None,
    }
    if p1 <= design.alpha1:
        record["decision_stage1"] = "reject"
        record["decision_final"] = "reject"
        return record
    if p1 > design.alpha0:
        record["decision_stage1"] = "accept"
        record["decision_final"] = "accept"
        return record

    js1_final = JointStatistics(final_stage1, reference)
    for endpoint, z_first in (("pfs", z_pfs_1), ("os", z_os_1)):
        if abs(js1_final.standardized(endpoint, s1) - z_first) > 1e-9:
            raise ProtocolViolationError(
                "stage-one statistics changed between looks; snapshots disagree on [0, s1]"
            )
    js2 = JointStatistics(final_stage2, reference)

    z_pfs_2 = design.w1 * js1_final.standardized_increment("pfs", s1, s2) + design.w2 * js2.standardized("pfs", s2)
    z_os_2 = design.w1 * js1_final.standardized_increment("os", s1, s2) + design.w2 * js2.standardized("os", s2)
    p2 = design.min_p(norm.cdf(z_pfs_2), norm.cdf(z_os_2), stage=2)

    record["z_pfs_2"] = z_pfs_2
    record["z_os_2"] = z_os_2
    record["p2"] = p2
    record["decision_final"] = "reject" if p2 <= design.cef(p1) else "accept"
    return record
