"""Nonparametric two-sample survival contrasts from transition estimators.

Both randomized comparisons share one integral form per arm,

    Psi(s) = exp(-L3(s)) * (c + int_0^s exp(-L1(u-)) dL2(u)),

with L1 = Lambda_hat_0* - Lambda_hat_12 and L3 = Lambda_hat_12 in both cases.
The flavors differ only in the constant c and the inner integrator L2:

    "os":  c = 1, L2 = Lambda_hat_12 - Lambda_hat_02,  Psi estimates S_OS
    "gap": c = 0, L2 = Lambda_hat_01,                  Psi estimates P01

No reference curves enter anywhere; the arm contrast is fully nonparametric.
Each arm's variance tracks four coordinate martingales (F-weighted state
drift, exp-weighted inner integrator, first events, state-1 deaths), combined
through a contrast vector whose entries change with the analysis time.
"""

from __future__ import annotations

import functools

import numpy as np

from .counting import CohortCounting
from .errors import (
    DegenerateVarianceError,
    InvalidArgumentError,
    ProtocolViolationError,
)
from .idm import IllnessDeathSpec
from .simulate import Snapshot
from .stepfn import StepFn, stieltjes, stieltjes_cum

__all__ = ["StructuredPsi", "TwoArmContrast"]

FLAVORS = ("os", "gap")
DISCRETIZATIONS = ("exponential", "product")


class StructuredPsi:
    """One arm's survival-scale process, plug-in mean and covariance pieces.

    discretization selects how the integral form is discretized on the event
    grid. "exponential" keeps the exp(-L3) outer factor and is the default
    for inference; "product" replaces both the outer factor and the inner
    integrand by product-limit recursions, which reproduces the empirical
    occupancy estimators exactly (state 0 plus state 1 for "os", state 1
    alone for "gap"). The covariance machinery is shared.
    """

    def __init__(self, snapshot: Snapshot, flavor: str, discretization: str = "exponential"):
        if flavor not in FLAVORS:
            raise InvalidArgumentError(f"flavor must be one of {FLAVORS}, got {flavor!r}")
        if discretization not in DISCRETIZATIONS:
            raise InvalidArgumentError(
                f"discretization must be one of {DISCRETIZATIONS}, got {discretization!r}"
            )
        self.counting = CohortCounting(snapshot)
        self.n = snapshot.n
        self.flavor = flavor
        self.c = 1.0 if flavor == "os" else 0.0
        self.discretization = discretization

    @functools.cached_property
    def lam1(self) -> StepFn:
        cc = self.counting
        return cc.lambda_0star - cc.lambda_12

    @functools.cached_property
    def lam2(self) -> StepFn:
        cc = self.counting
        if self.flavor == "os":
            return cc.lambda_12 - cc.lambda_02
        return cc.lambda_01

    @functools.cached_property
    def lam3(self) -> StepFn:
        return self.counting.lambda_12

    def _exp_lam1_left(self, u):
        return np.exp(-self.lam1.left(u))

    @functools.cached_property
    def f_hat(self) -> StepFn:
        """int_0^s exp(-L1(u-)) dL2(u), jump-inclusive at its own jumps."""
        return stieltjes_cum(self._exp_lam1_left, self.lam2)

    def _jumps_on(self, f: StepFn, grid: np.ndarray) -> np.ndarray:
        return np.asarray(f(grid), dtype=float) - np.asarray(f.left(grid), dtype=float)

    @functools.cached_property
    def psi(self) -> StepFn:
        grid = self.counting.grid
        if grid.size == 0:
            return StepFn(np.empty(0), np.empty(0), self.c)
        if self.discretization == "exponential":
            vals = np.exp(-self.lam3(grid)) * (self.c + self.f_hat(grid))
            return StepFn(grid, vals, self.c)
        d3 = self._jumps_on(self.lam3, grid)
        d2 = self._jumps_on(self.lam2, grid)
        d0s = self._jumps_on(self.counting.lambda_0star, grid)
        # G_0*(u-): product-limit state-0 survival entering predictably
        g_left = np.concatenate(([1.0], np.cumprod(1.0 - d0s)[:-1]))
        a = np.cumprod(1.0 - d3)
        b = np.empty_like(a)
        acc = 0.0
        for k in range(grid.size):
            acc = acc * (1.0 - d3[k]) + g_left[k] * d2[k]
            b[k] = acc
        return StepFn(grid, self.c * a + b, self.c)

    @functools.cached_property
    def _differentials(self) -> dict:
        """Optional covariations of the four coordinate martingales.

        Coordinates: 1 = int F dM1, 2 = int exp(-L1(u-)) dM2, 3 = M_0*,
        4 = M_12, with M1 = M_0* - M_12 and M2 matching lam2's flavor. All
        entries reduce to the three base brackets by bilinearity; state-0 and
        state-1 base martingales are orthogonal.
        """
        cc = self.counting
        m02 = cc.bracket("02", "02")
        m12 = cc.bracket("12", "12")
        m0s = cc.bracket("0*", "0*")
        if self.flavor == "os":
            return {
                "m1m1": m0s + m12,
                "m1m2": -(m02 + m12),
                "m1m3": m0s,
                "m1m4": -1.0 * m12,
                "m2m2": m12 + m02,
                "m2m3": -1.0 * m02,
                "m2m4": m12,
                "m3m3": m0s,
                "m4m4": m12,
            }
        prog = m0s - m02
        return {
            "m1m1": m0s + m12,
            "m1m2": prog,
            "m1m3": m0s,
            "m1m4": -1.0 * m12,
            "m2m2": prog,
            "m2m3": prog,
            "m2m4": StepFn.zero(),
            "m3m3": m0s,
            "m4m4": m12,
        }

    def theta_bracket(self, s: float) -> np.ndarray:
        """4x4 optional-covariation matrix of the coordinates at s."""
        d = self._differentials
        wf = self.f_hat
        we = self._exp_lam1_left
        t = np.zeros((4, 4))
        t[0, 0] = stieltjes(lambda u: wf(u) ** 2, d["m1m1"], s)
        t[0, 1] = stieltjes(lambda u: wf(u) * we(u), d["m1m2"], s)
        t[0, 2] = stieltjes(wf, d["m1m3"], s)
        t[0, 3] = stieltjes(wf, d["m1m4"], s)
        t[1, 1] = stieltjes(lambda u: we(u) ** 2, d["m2m2"], s)
        t[1, 2] = stieltjes(we, d["m2m3"], s)
        t[1, 3] = stieltjes(we, d["m2m4"], s)
        t[2, 2] = d["m3m3"](s)
        t[3, 3] = d["m4m4"](s)
        return t + np.triu(t, 1).T

    def lhat(self, s: float) -> np.ndarray:
        """Contrast vector collapsing the coordinates onto the process scale."""
        return np.exp(-self.lam3(s)) * np.array([1.0, 1.0, -self.f_hat(s), -self.c])

    def sigma2(self, s: float) -> float:
        l = self.lhat(s)
        return float(l @ self.theta_bracket(s) @ l)

    def theta_martingales(self, true_spec: IllnessDeathSpec, s: float) -> np.ndarray:
        """Realized coordinate martingales at s under a known truth.

        Diagnostic only: compensators need the generating intensities, so
        this is available in simulations, never from data alone.
        """
        cc = self.counting
        wf = self.f_hat
        we = self._exp_lam1_left
        we_cell = lambda u: np.exp(-self.lam1(u))
        th1 = cc.weighted_martingale(true_spec, "0*", wf, wf, s) - cc.weighted_martingale(
            true_spec, "12", wf, wf, s
        )
        if self.flavor == "os":
            th2 = cc.weighted_martingale(true_spec, "12", we, we_cell, s) - cc.weighted_martingale(
                true_spec, "02", we, we_cell, s
            )
        else:
            th2 = cc.weighted_martingale(true_spec, "0*", we, we_cell, s) - cc.weighted_martingale(
                true_spec, "02", we, we_cell, s
            )
        th3 = cc.martingale(true_spec, "0*", s)
        th4 = cc.martingale(true_spec, "12", s)
        return np.array([th1, th2, th3, th4])


class TwoArmContrast:
    """Pooled control-minus-experimental statistic for one flavor.

    The pooled scaling follows the allocation ratio r = n_E / n_C: the
    control contrast vector is inflated by sqrt(1 + r) and the experimental
    one by sqrt(1 + 1/r), so that the summed quadratic forms estimate the
    variance of sqrt(n) * (Psi_C - Psi_E) with n the total sample size.
    """

    def __init__(
        self,
        control: Snapshot,
        experimental: Snapshot,
        flavor: str,
        discretization: str = "exponential",
    ):
        if control.n == 0 or experimental.n == 0:
            raise InvalidArgumentError("both arms need at least one enrolled patient")
        self.control = StructuredPsi(control, flavor, discretization)
        self.experimental = StructuredPsi(experimental, flavor, discretization)
        self.flavor = flavor
        self.n = control.n + experimental.n
        self.r = experimental.n / control.n

    def delta_psi(self, s: float) -> float:
        return self.control.psi(s) - self.experimental.psi(s)

    def scaled_lhat(self, arm: str, s: float) -> np.ndarray:
        if arm == "control":
            return np.sqrt(1.0 + self.r) * self.control.lhat(s)
        if arm == "experimental":
            return np.sqrt(1.0 + 1.0 / self.r) * self.experimental.lhat(s)
        raise InvalidArgumentError(f"arm must be 'control' or 'experimental', got {arm!r}")

    def sigma2(self, s: float) -> float:
        out = 0.0
        for arm, ps in (("control", self.control), ("experimental", self.experimental)):
            l = self.scaled_lhat(arm, s)
            out += float(l @ ps.theta_bracket(s) @ l)
        return out

    def varsigma2(self, s2: float, s1: float) -> float:
        """Variance of the pooled increment over (s1, s2], final-look contrast."""
        if s2 <= s1:
            raise ProtocolViolationError("second look must come after the first")
        out = 0.0
        for arm, ps in (("control", self.control), ("experimental", self.experimental)):
            l = self.scaled_lhat(arm, s2)
            out += float(l @ (ps.theta_bracket(s2) - ps.theta_bracket(s1)) @ l)
        return out

    def z(self, s: float) -> float:
        v = self.sigma2(s)
        if v <= 0:
            raise DegenerateVarianceError(f"zero pooled variance at s={s}")
        return float(np.sqrt(self.n) * self.delta_psi(s) / np.sqrt(v))

    def z_increment(self, s1: float, s2: float) -> float:
        dv = self.varsigma2(s2, s1)
        if dv <= 0:
            raise DegenerateVarianceError(f"no pooled information gained on ({s1}, {s2}]")
        num = np.sqrt(self.n) * (self.delta_psi(s2) - self.delta_psi(s1))
        return float(num / np.sqrt(dv))

    def compensated_z_increment(
        self,
        s1: float,
        s2: float,
        true_control: IllnessDeathSpec,
        true_experimental: IllnessDeathSpec,
    ) -> float:
        """Increment with the stage-one carry-over removed, for simulations.

        The raw increment keeps a stage-one measurable term because the
        contrast vector moves between looks; conditioning on the stage-one
        coordinates absorbs (scaled_lhat(s2) - scaled_lhat(s1)) . theta(s1)
        per arm into the conditional mean. Removing it here isolates the
        part that should be independent of the first stage.
        """
        dv = self.varsigma2(s2, s1)
        if dv <= 0:
            raise DegenerateVarianceError(f"no pooled information gained on ({s1}, {s2}]")
        carry = 0.0
        for arm, ps, true_spec in (
            ("control", self.control, true_control),
            ("experimental", self.experimental, true_experimental),
        ):
            dl = self.scaled_lhat(arm, s2) - self.scaled_lhat(arm, s1)
            sign = 1.0 if arm == "control" else -1.0
            carry += sign * float(dl @ ps.theta_martingales(true_spec, s1))
        num = np.sqrt(self.n) * (self.delta_psi(s2) - self.delta_psi(s1)) - carry
        return float(num / np.sqrt(dv))
