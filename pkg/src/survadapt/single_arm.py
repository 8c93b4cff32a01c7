"""One-sample OS test with the PFS nuisance curve estimated from the data.

Replacing the reference PFS curve by exp(-Lambda_hat_0*(u-)) adds two
estimation-noise coordinates to the test process. The variance estimator
tracks four coordinate martingales (state-0 deaths, state-1 deaths, first
events, first events weighted by the plug-in distribution functions); every
observed event contributes a rank-one outer product, so the 4x4 matrix is
positive semidefinite by construction.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np

from .counting import CohortCounting
from .errors import (
    DegenerateInterimError,
    DegenerateVarianceError,
    NonIncreasingInformationError,
    ProtocolViolationError,
)
from .simulate import Snapshot
from .stepfn import DriftedStepFn, StepFn, stieltjes_cum

__all__ = ["PluginStatistics", "StageCovariance", "InterimSummary", "interim_summary"]


class PluginStatistics:
    """Plug-in OS test process and covariance entries for one cohort.

    reference must expose a vectorized s_os(t); the PFS curve is estimated.
    Distribution-function integrands enter jump-inclusively, the estimated
    survival curve through strict left limits.
    """

    def __init__(self, snapshot: Snapshot, reference):
        self._cc = CohortCounting(snapshot)
        self.n = snapshot.n
        self.reference = reference

    def s_pfs_hat_left(self, u):
        """exp(-Lambda_hat_0*(u-)), the predictable plug-in PFS curve."""
        return np.exp(-self._cc.lambda_0star.left(u))

    @functools.cached_property
    def f02(self) -> StepFn:
        return stieltjes_cum(self.s_pfs_hat_left, self._cc.lambda_02)

    @functools.cached_property
    def f12(self) -> StepFn:
        return stieltjes_cum(self.s_pfs_hat_left, self._cc.lambda_12)

    def delta_f(self, s):
        """F_hat_12(s) - F_hat_02(s), the third entry of the contrast vector."""
        return self.f12(s) - self.f02(s)

    @functools.cached_property
    def psi(self) -> DriftedStepFn:
        rt = np.sqrt(self.n)
        s_o = self.reference.s_os
        step = rt * (
            stieltjes_cum(self.s_pfs_hat_left, self._cc.lambda_02)
            + stieltjes_cum(lambda u: s_o(u) - self.s_pfs_hat_left(u), self._cc.lambda_12)
        )
        return DriftedStepFn(step, lambda t: rt * (s_o(t) - 1.0))

    @functools.cached_property
    def _entries(self) -> dict:
        cc = self._cc
        s_hat = self.s_pfs_hat_left
        s_o = self.reference.s_os
        m02 = cc.bracket("02", "02")
        m12 = cc.bracket("12", "12")
        m0s = cc.bracket("0*", "0*")
        # F-hat difference enters jump-inclusively at each event time
        df = lambda u: self.f02(u) - self.f12(u)
        return {
            (0, 0): stieltjes_cum(lambda u: s_hat(u) ** 2, m02),
            (0, 2): stieltjes_cum(s_hat, m02),
            (0, 3): stieltjes_cum(lambda u: s_hat(u) * df(u), m02),
            (1, 1): stieltjes_cum(lambda u: (s_o(u) - s_hat(u)) ** 2, m12),
            (2, 2): m0s,
            (2, 3): stieltjes_cum(df, m0s),
            (3, 3): stieltjes_cum(lambda u: df(u) ** 2, m0s),
        }

    def vhat(self, s: float) -> np.ndarray:
        """4x4 covariance matrix estimate at s; (1,2), (2,3), (2,4) vanish."""
        v = np.zeros((4, 4))
        for (i, j), fn in self._entries.items():
            v[i, j] = fn(s)
            v[j, i] = v[i, j]
        return v

    def lhat(self, s: float) -> np.ndarray:
        """Contrast vector collapsing the four coordinates onto the OS process."""
        return np.array([1.0, 1.0, self.delta_f(s), 1.0])

    def sigma2(self, s: float) -> float:
        l = self.lhat(s)
        return float(l @ self.vhat(s) @ l)

    def varsigma2(self, s2: float, s1: float) -> float:
        """Variance of the process increment over (s1, s2], final-look contrast."""
        if s2 <= s1:
            raise ProtocolViolationError("second look must come after the first")
        l = self.lhat(s2)
        return float(l @ (self.vhat(s2) - self.vhat(s1)) @ l)

    def z11(self, s1: float) -> float:
        v = self.sigma2(s1)
        if v <= 0:
            raise DegenerateVarianceError(f"zero plug-in variance at s={s1}")
        return self.psi(s1) / np.sqrt(v)

    def z12(self, s1: float, s2: float) -> float:
        dv = self.varsigma2(s2, s1)
        if dv <= 0:
            raise NonIncreasingInformationError(f"no information accrued on ({s1}, {s2}]")
        return (self.psi(s2) - self.psi(s1)) / np.sqrt(dv)

    def z2(self, s2: float) -> float:
        v = self.sigma2(s2)
        if v <= 0:
            raise DegenerateVarianceError(f"zero plug-in variance at s={s2}")
        return self.psi(s2) / np.sqrt(v)

    def compensated_z12(self, s1: float, s2: float, m0star_s1: float) -> float:
        """Standardized increment with the plug-in carry-over removed.

        The raw increment contains (delta_f(s2) - delta_f(s1)) * M0*(s1), a
        stage-one-measurable term whose effect the boundary equation absorbs
        as a conditional mean shift. Removing it with the known-truth
        martingale m0star_s1 leaves the part that is independent of the first
        look; this is a simulation diagnostic, not a trial statistic.
        """
        dv = self.varsigma2(s2, s1)
        if dv <= 0:
            raise NonIncreasingInformationError(f"no information accrued on ({s1}, {s2}]")
        carry = (self.delta_f(s2) - self.delta_f(s1)) * m0star_s1
        return (self.psi(s2) - self.psi(s1) - carry) / np.sqrt(dv)


@dataclass(frozen=True)
class StageCovariance:
    """Joint law pieces of (Z11, root-n first-event martingale at s1).

    cov_z_m = L-hat V-hat e3 / sigma-hat is the covariance of the
    standardized Z11 with the martingale coordinate; varsigma maps a final
    patient time s2 to the increment standard deviation over (s1, s2].
    """

    sigma1: float
    v33: float
    cov_z_m: float
    varsigma: object

    def correlation(self) -> float:
        return self.cov_z_m / np.sqrt(self.v33)


@dataclass(frozen=True)
class InterimSummary:
    """Everything the conditional-error boundary needs from one look."""

    z11: float
    lambda0star_s1: float
    delta_f: object
    sigma: StageCovariance


def interim_summary(snapshot: Snapshot, reference, s1: float) -> InterimSummary:
    ps = PluginStatistics(snapshot, reference)
    if ps._cc.grid.size == 0 or ps._cc.grid[0] > s1:
        raise DegenerateInterimError(f"no events observed by s1={s1}")
    sigma1_sq = ps.sigma2(s1)
    if sigma1_sq <= 0:
        raise DegenerateInterimError(f"degenerate plug-in variance at s1={s1}")
    sigma1 = float(np.sqrt(sigma1_sq))
    v = ps.vhat(s1)
    lvec = ps.lhat(s1)
    cov_z_m = float(lvec @ v[:, 2]) / sigma1
    sigma = StageCovariance(
        sigma1=sigma1,
        v33=float(v[2, 2]),
        cov_z_m=cov_z_m,
        varsigma=lambda s2: float(np.sqrt(max(ps.varsigma2(s2, s1), 0.0))),
    )
    return InterimSummary(
        z11=ps.z11(s1),
        lambda0star_s1=float(ps._cc.lambda_0star(s1)),
        delta_f=ps.delta_f,
        sigma=sigma,
    )
