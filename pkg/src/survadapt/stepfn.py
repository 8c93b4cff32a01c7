"""Right-continuous step functions over event times.

All estimators in this package (cumulative hazards, covariation processes,
plug-in integrals) are finite-jump cadlag step functions; this module is the
single representation used for them. Evaluation is exact: no grids, no
interpolation, summation order fixed by time order for determinism.
"""

from __future__ import annotations

import io
from typing import Iterable, Sequence

import numpy as np

from .errors import InvalidArgumentError

__all__ = ["StepFn", "DriftedStepFn", "union_times", "stieltjes", "stieltjes_cum"]


class StepFn:
    """A right-continuous piecewise-constant function with finitely many jumps.

    value(t) = init + sum of jump sizes at jump times <= t. The left limit
    value(t-) excludes a jump exactly at t.
    """

    __slots__ = ("times", "cum", "init")

    def __init__(self, times: Sequence[float], cum: Sequence[float], init: float = 0.0):
        t = np.asarray(times, dtype=float)
        c = np.asarray(cum, dtype=float)
        if t.ndim != 1 or c.shape != t.shape:
            raise InvalidArgumentError("times and cum must be 1-d arrays of equal length")
        if t.size and not np.all(np.diff(t) > 0):
            raise InvalidArgumentError("jump times must be strictly increasing")
        self.times = t
        self.cum = c
        self.init = float(init)

    @classmethod
    def zero(cls) -> "StepFn":
        return cls(np.empty(0), np.empty(0), 0.0)

    @classmethod
    def from_jumps(cls, times: Sequence[float], jumps: Sequence[float], init: float = 0.0) -> "StepFn":
        t = np.asarray(times, dtype=float)
        j = np.asarray(jumps, dtype=float)
        return cls(t, init + np.cumsum(j), init)

    @property
    def jumps(self) -> np.ndarray:
        """Jump sizes at each jump time."""
        if self.times.size == 0:
            return np.empty(0)
        return np.diff(np.concatenate(([self.init], self.cum)))

    def _eval(self, t, side: str):
        t = np.asarray(t, dtype=float)
        if self.times.size == 0:
            out = np.full(t.shape, self.init)
        else:
            idx = np.searchsorted(self.times, t, side=side) - 1
            out = np.where(idx >= 0, self.cum[np.clip(idx, 0, None)], self.init)
        if out.ndim == 0:
            return float(out)
        return out

    def __call__(self, t):
        """Right-continuous evaluation, vectorized over t."""
        return self._eval(t, "right")

    def left(self, t):
        """Left limit value(t-), vectorized over t."""
        return self._eval(t, "left")

    def final(self) -> float:
        """Value after the last jump."""
        return float(self.cum[-1]) if self.cum.size else self.init

    def restrict(self, t_max: float) -> "StepFn":
        """The same function with jumps after t_max discarded."""
        k = int(np.searchsorted(self.times, t_max, side="right"))
        return StepFn(self.times[:k], self.cum[:k], self.init)

    def _binary(self, other, op) -> "StepFn":
        if isinstance(other, StepFn):
            t = np.union1d(self.times, other.times)
            return StepFn(t, op(self(t), other(t)), op(self.init, other.init))
        return StepFn(self.times, op(self.cum, other), op(self.init, other))

    def __add__(self, other) -> "StepFn":
        return self._binary(other, np.add)

    def __sub__(self, other) -> "StepFn":
        return self._binary(other, np.subtract)

    def __mul__(self, scalar: float) -> "StepFn":
        return StepFn(self.times, self.cum * scalar, self.init * scalar)

    __rmul__ = __mul__

    def __neg__(self) -> "StepFn":
        return self * (-1.0)

    def to_rows(self) -> str:
        """Serialize as `time,cum_value` rows (one per jump time)."""
        buf = io.StringIO()
        buf.write("time,cum_value\n")
        for t, c in zip(self.times, self.cum):
            buf.write(f"{t:.17g},{c:.17g}\n")
        return buf.getvalue()

    @classmethod
    def from_rows(cls, text: str) -> "StepFn":
        lines = [ln for ln in text.strip().splitlines() if ln]
        if not lines or lines[0].replace(" ", "") != "time,cum_value":
            raise InvalidArgumentError("expected header 'time,cum_value'")
        times, cum = [], []
        for ln in lines[1:]:
            a, b = ln.split(",")
            times.append(float(a))
            cum.append(float(b))
        return cls(np.asarray(times), np.asarray(cum))

    def __repr__(self) -> str:
        return f"StepFn({self.times.size} jumps, init={self.init}, final={self.final()})"


class DriftedStepFn:
    """A step function plus a deterministic continuous drift term.

    Represents processes of the form step(t) + drift(t) where the drift is a
    smooth reference-curve term (so the total is not itself a step function).
    """

    __slots__ = ("step", "drift")

    def __init__(self, step: StepFn, drift):
        self.step = step
        self.drift = drift

    def __call__(self, t):
        t_arr = np.asarray(t, dtype=float)
        out = self.step(t_arr) + self.drift(t_arr)
        if np.ndim(t) == 0:
            return float(out)
        return out


def union_times(fns: Iterable[StepFn]) -> np.ndarray:
    """Sorted union of all jump times of the given step functions."""
    arrays = [f.times for f in fns if f.times.size]
    if not arrays:
        return np.empty(0)
    return np.unique(np.concatenate(arrays))


def stieltjes(f, g: StepFn, s: float | None = None) -> float:
    """int_0^s f(u) dg(u) = sum of f at jump times weighted by jump sizes.

    f must be vectorized over arrays of times. With s None the full support
    of g is used.
    """
    t = g.times
    j = g.jumps
    if s is not None:
        k = np.searchsorted(t, s, side="right")
        t, j = t[:k], j[:k]
    if t.size == 0:
        return 0.0
    return float(np.sum(np.asarray(f(t), dtype=float) * j))


def stieltjes_cum(f, g: StepFn) -> StepFn:
    """The process s -> int_0^s f(u) dg(u) as a StepFn on g's jump times."""
    if g.times.size == 0:
        return StepFn.zero()
    return StepFn.from_jumps(g.times, np.asarray(f(g.times), dtype=float) * g.jumps)
