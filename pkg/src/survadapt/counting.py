"""Counting processes, Nelson-Aalen estimators, and optional covariations.

Everything aggregates over one cohort snapshot on its observed event grid.
At-risk conventions: state 0 holds a patient until their first transition,
I02(u) = I(exit0 >= u); state 1 holds them on the half-open interval
I12(u) = I(t1 < u <= end1). A patient is at risk at their own transition time
and can never occupy both states at once.
"""

from __future__ import annotations

import functools

import numpy as np

from .errors import InvalidArgumentError
from .idm import IllnessDeathSpec, cumulative_hazard
from .simulate import Snapshot
from .stepfn import StepFn, stieltjes

__all__ = ["CohortCounting"]

_BASE = ("01", "02", "12", "0*")


def _counts_on(grid: np.ndarray, times: np.ndarray) -> np.ndarray:
    out = np.zeros(grid.size)
    if times.size:
        np.add.at(out, np.searchsorted(grid, times), 1.0)
    return out


class CohortCounting:
    """Event-grid view of one snapshot with all transition estimators."""

    def __init__(self, snapshot: Snapshot):
        self.snapshot = snapshot
        self.n = snapshot.n
        self.s = snapshot.s

        prog = snapshot.prog_ind
        death = snapshot.death_ind
        cens = snapshot.cens_ind & ~death  # a tied death takes precedence
        direct_death = death & ~prog

        self.exit0_time = np.where(
            prog, snapshot.prog_time, np.where(direct_death, snapshot.death_time, snapshot.cens_time)
        )
        self.exit0_type = np.where(prog, 1, np.where(direct_death, 2, 0))
        self.state1_start = snapshot.prog_time[prog]
        self.state1_end = np.where(death[prog], snapshot.death_time[prog], snapshot.cens_time[prog])
        self.state1_death = death[prog]

        self._sorted_exit0 = np.sort(self.exit0_time)
        self._sorted_starts = np.sort(self.state1_start)
        self._sorted_ends = np.sort(self.state1_end)

        t01 = snapshot.prog_time[prog]
        t02 = snapshot.death_time[direct_death]
        t12 = snapshot.death_time[prog & death]
        grid = np.unique(np.concatenate((t01, t02, t12)))
        self.grid = grid
        self.d01 = _counts_on(grid, t01)
        self.d02 = _counts_on(grid, t02)
        self.d12 = _counts_on(grid, t12)
        self.y02 = self.y02_at(grid)
        self.y12 = self.y12_at(grid)

    def y02_at(self, u) -> np.ndarray:
        """State-0 risk-set size, predictable in u."""
        return self.n - np.searchsorted(self._sorted_exit0, np.asarray(u, dtype=float), side="left")

    def y12_at(self, u) -> np.ndarray:
        """State-1 risk-set size on (t1, end1]."""
        u = np.asarray(u, dtype=float)
        return np.searchsorted(self._sorted_starts, u, side="left") - np.searchsorted(
            self._sorted_ends, u, side="left"
        )

    def _ratio(self, num: np.ndarray, den: np.ndarray) -> np.ndarray:
        out = np.zeros_like(num)
        np.divide(num, den, out=out, where=num > 0)
        return out

    @functools.cached_property
    def lambda_02(self) -> StepFn:
        return StepFn.from_jumps(self.grid, self._ratio(self.d02, self.y02))

    @functools.cached_property
    def lambda_0star(self) -> StepFn:
        return StepFn.from_jumps(self.grid, self._ratio(self.d01 + self.d02, self.y02))

    @functools.cached_property
    def lambda_12(self) -> StepFn:
        return StepFn.from_jumps(self.grid, self._ratio(self.d12, self.y12))

    @functools.cached_property
    def lambda_01(self) -> StepFn:
        """Defined as lambda_0star - lambda_02, not estimated separately."""
        return StepFn.from_jumps(self.grid, self._ratio(self.d01, self.y02))

    def nelson_aalen(self, which: str) -> StepFn:
        if which == "01":
            return self.lambda_01
        if which == "02":
            return self.lambda_02
        if which == "12":
            return self.lambda_12
        if which == "0*":
            return self.lambda_0star
        raise InvalidArgumentError(f"unknown transition label {which!r}")

    @functools.cached_property
    def _m02(self) -> StepFn:
        return StepFn.from_jumps(self.grid, self.n * self._ratio(self.d02, self.y02**2))

    @functools.cached_property
    def _m0star(self) -> StepFn:
        return StepFn.from_jumps(self.grid, self.n * self._ratio(self.d01 + self.d02, self.y02**2))

    @functools.cached_property
    def _m12(self) -> StepFn:
        return StepFn.from_jumps(self.grid, self.n * self._ratio(self.d12, self.y12**2))

    def bracket(self, a: str, b: str) -> StepFn:
        """Optional covariation of the root-n compensated estimator martingales.

        The state-0 processes share every jump, so [M02, M0*] equals [M02];
        the state-1 martingale is orthogonal to both.
        """
        if a not in _BASE or b not in _BASE or a == "01" or b == "01":
            raise InvalidArgumentError(f"no covariation rule for pair ({a!r}, {b!r})")
        pair = frozenset((a, b))
        if pair == frozenset(("02",)):
            return self._m02
        if pair == frozenset(("0*",)):
            return self._m0star
        if pair == frozenset(("12",)):
            return self._m12
        if pair == frozenset(("02", "0*")):
            return self._m02
        return StepFn.zero()

    def risk_intervals(self, which: str) -> list[tuple[float, float]]:
        """Maximal intervals on which the relevant risk set is nonempty."""
        if which in ("02", "0*", "01"):
            if self.n == 0:
                return []
            return [(0.0, float(np.max(self.exit0_time)))]
        if which != "12":
            raise InvalidArgumentError(f"unknown transition label {which!r}")
        if self.state1_start.size == 0:
            return []
        order = np.argsort(self.state1_start, kind="stable")
        merged = []
        for lo, hi in zip(self.state1_start[order], self.state1_end[order]):
            if merged and lo < merged[-1][1]:
                merged[-1][1] = max(merged[-1][1], hi)
            else:
                merged.append([float(lo), float(hi)])
        return [tuple(iv) for iv in merged]

    def compensator(self, true_spec: IllnessDeathSpec, which: str, s: float | None = None) -> float:
        """int_0^s J(u) dLambda(u) with J = I(risk set nonempty), exactly.

        The nonempty-risk region is a finite union of intervals, so the
        integral reduces to differences of the true cumulative hazard.
        """
        if s is None:
            s = self.s
        total = 0.0
        for lo, hi in self.risk_intervals(which):
            lo, hi = min(lo, s), min(hi, s)
            if hi > lo:
                total += cumulative_hazard(true_spec, which, hi) - cumulative_hazard(true_spec, which, lo)
        return total

    def martingale(self, true_spec: IllnessDeathSpec, which: str, s: float | None = None) -> float:
        """root-n compensated estimator at s under a known truth."""
        if s is None:
            s = self.s
        return float(np.sqrt(self.n) * (self.nelson_aalen(which)(s) - self.compensator(true_spec, which, s)))

    def weighted_martingale(
        self,
        true_spec: IllnessDeathSpec,
        which: str,
        w_jump,
        w_cell,
        s: float,
    ) -> float:
        """root-n * (int w dLambda_hat - int w J dLambda) up to s, exactly.

        w_jump evaluates the integrand at the estimator's jump times; w_cell
        evaluates it right-continuously at cell left endpoints for the
        compensator (any plug-in weight is constant between event times, so
        splitting the risk intervals at the event grid makes this exact).
        """
        jump_part = stieltjes(w_jump, self.nelson_aalen(which), s)
        comp = 0.0
        for lo, hi in self.risk_intervals(which):
            lo, hi = min(lo, s), min(hi, s)
            if hi <= lo:
                continue
            inside = self.grid[(self.grid > lo) & (self.grid < hi)]
            cuts = np.concatenate(([lo], inside, [hi]))
            lam = cumulative_hazard(true_spec, which, cuts)
            comp += float(np.sum(np.asarray(w_cell(cuts[:-1]), dtype=float) * np.diff(lam)))
        return float(np.sqrt(self.n) * (jump_part - comp))
