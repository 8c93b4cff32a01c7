"""Markovian illness-death models with piecewise-constant intensities.

States: 0 (event-free), 1 (progressed), 2 (dead); transitions 0->1, 0->2,
1->2 with intensities alpha01, alpha02, alpha12. The class of
piecewise-constant intensities keeps every integral either closed-form or a
cheap per-segment composite rule, and makes path sampling exact.
"""

from __future__ import annotations

import functools
import json
from dataclasses import dataclass

import numpy as np

from .errors import InfeasibleAlternativeError, InvalidArgumentError

__all__ = [
    "IllnessDeathSpec",
    "ContiguousAlternative",
    "SurvivalCurves",
    "cumulative_hazard",
    "survival_curves",
    "apply_contiguous_alternative",
    "os_identity_residual",
]

# Collapse guard for the homogeneous occupancy closed form when c ~ a+b.
RATE_COLLAPSE_EPS = 1e-10
DEFAULT_IDENTITY_TOL = 1e-8
# Refinement and horizon used when a solved alternative intensity is tabulated.
ALTERNATIVE_GRID_STEP = 0.0625
ALTERNATIVE_HORIZON = 120.0

_TRANSITIONS = ("01", "02", "12", "0*")

# 5-point Gauss-Legendre on [0, 1]; enough for smooth per-cell averages.
_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(5)
_GL_NODES = 0.5 * (_GL_NODES + 1.0)
_GL_WEIGHTS = 0.5 * _GL_WEIGHTS


@dataclass(frozen=True)
class IllnessDeathSpec:
    """Piecewise-constant intensities of one treatment arm.

    Value i of each intensity applies on [breakpoints[i], breakpoints[i+1]),
    the last value on [breakpoints[-1], inf). breakpoints[0] must be 0.
    """

    breakpoints: tuple
    alpha01: tuple
    alpha02: tuple
    alpha12: tuple

    def __post_init__(self):
        b = np.asarray(self.breakpoints, dtype=float)
        if b.size == 0 or b[0] != 0.0:
            raise InvalidArgumentError("breakpoints must start at 0")
        if not np.all(np.diff(b) > 0):
            raise InvalidArgumentError("breakpoints must be strictly increasing")
        for name in ("alpha01", "alpha02", "alpha12"):
            v = np.asarray(getattr(self, name), dtype=float)
            if v.shape != b.shape:
                raise InvalidArgumentError(f"{name} must match breakpoints in length")
            if not np.all(np.isfinite(v)) or np.any(v < 0):
                raise InvalidArgumentError(f"{name} values must be finite and nonnegative")
        object.__setattr__(self, "breakpoints", tuple(float(x) for x in b))
        object.__setattr__(self, "alpha01", tuple(float(x) for x in self.alpha01))
        object.__setattr__(self, "alpha02", tuple(float(x) for x in self.alpha02))
        object.__setattr__(self, "alpha12", tuple(float(x) for x in self.alpha12))

    @classmethod
    def homogeneous(cls, alpha01: float, alpha02: float, alpha12: float) -> "IllnessDeathSpec":
        return cls((0.0,), (alpha01,), (alpha02,), (alpha12,))

    def rates(self, which: str) -> np.ndarray:
        if which == "01":
            return np.asarray(self.alpha01)
        if which == "02":
            return np.asarray(self.alpha02)
        if which == "12":
            return np.asarray(self.alpha12)
        if which == "0*":
            return np.asarray(self.alpha01) + np.asarray(self.alpha02)
        raise InvalidArgumentError(f"unknown transition label {which!r}")

    def rate_at(self, which: str, t) -> np.ndarray:
        """Intensity value at time(s) t."""
        b = np.asarray(self.breakpoints)
        idx = np.clip(np.searchsorted(b, np.asarray(t, dtype=float), side="right") - 1, 0, b.size - 1)
        return self.rates(which)[idx]

    def to_dict(self) -> dict:
        return {
            "breakpoints": list(self.breakpoints),
            "alpha01": list(self.alpha01),
            "alpha02": list(self.alpha02),
            "alpha12": list(self.alpha12),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "IllnessDeathSpec":
        try:
            return cls(
                tuple(d["breakpoints"]),
                tuple(d["alpha01"]),
                tuple(d["alpha02"]),
                tuple(d["alpha12"]),
            )
        except KeyError as exc:
            raise InvalidArgumentError(f"missing spec key: {exc}") from exc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "IllnessDeathSpec":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class ContiguousAlternative:
    """Local alternative with hazard ratios omega = exp(-gamma/sqrt(n))."""

    gamma_pfs: float
    gamma_os: float
    stage_sample_size: int

    def __post_init__(self):
        if self.gamma_pfs < 0 or self.gamma_os < 0:
            raise InvalidArgumentError("gamma parameters must be nonnegative")
        if self.stage_sample_size < 1:
            raise InvalidArgumentError("stage_sample_size must be a positive integer")

    @property
    def omega_pfs(self) -> float:
        return float(np.exp(-self.gamma_pfs / np.sqrt(self.stage_sample_size)))

    @property
    def omega_os(self) -> float:
        return float(np.exp(-self.gamma_os / np.sqrt(self.stage_sample_size)))


def cumulative_hazard(spec: IllnessDeathSpec, which: str, t) -> float | np.ndarray:
    """Exact integral of the piecewise-constant intensity on [0, t]."""
    if which not in _TRANSITIONS:
        raise InvalidArgumentError(f"unknown transition label {which!r}")
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr < 0):
        raise InvalidArgumentError("t must be nonnegative")
    b = np.asarray(spec.breakpoints)
    rates = spec.rates(which).astype(float)
    seg_len = np.diff(b)
    cum_at_b = np.concatenate(([0.0], np.cumsum(rates[:-1] * seg_len)))
    idx = np.clip(np.searchsorted(b, t_arr, side="right") - 1, 0, b.size - 1)
    out = cum_at_b[idx] + rates[idx] * (t_arr - b[idx])
    if out.ndim == 0:
        return float(out)
    return out


@functools.lru_cache(maxsize=64)
def _occupancy_at_breakpoints(spec: IllnessDeathSpec) -> tuple[np.ndarray, np.ndarray]:
    """(P00, P01) at each breakpoint, stepped through segments in closed form."""
    b = np.asarray(spec.breakpoints)
    a01 = np.asarray(spec.alpha01)
    a02 = np.asarray(spec.alpha02)
    a12 = np.asarray(spec.alpha12)
    p00 = np.empty(b.size)
    p01 = np.empty(b.size)
    p00[0], p01[0] = 1.0, 0.0
    for k in range(b.size - 1):
        tau = b[k + 1] - b[k]
        p00[k + 1], p01[k + 1] = _occupancy_step(
            p00[k], p01[k], a01[k], a02[k], a12[k], tau
        )
    return p00, p01


def _occupancy_step(p00, p01, a, bb, c, tau):
    """Advance (P00, P01) by tau under constant rates (a, bb, c) = (a01, a02, a12)."""
    decay0 = np.exp(-(a + bb) * tau)
    decay1 = np.exp(-c * tau)
    gap = c - a - bb
    # series limit a*tau*exp(-(a+b)tau) when the exponents collide
    transfer = np.where(
        np.abs(gap) < RATE_COLLAPSE_EPS,
        a * tau * decay0,
        a * (decay0 - decay1) / np.where(np.abs(gap) < RATE_COLLAPSE_EPS, 1.0, gap),
    )
    return p00 * decay0, p01 * decay1 + p00 * transfer


def _occupancy(spec: IllnessDeathSpec, t) -> tuple[np.ndarray, np.ndarray]:
    """(P00(t), P01(t)) for arrays t >= 0, closed form."""
    t_arr = np.asarray(t, dtype=float)
    b = np.asarray(spec.breakpoints)
    p00_b, p01_b = _occupancy_at_breakpoints(spec)
    idx = np.clip(np.searchsorted(b, t_arr, side="right") - 1, 0, b.size - 1)
    tau = t_arr - b[idx]
    a01 = np.asarray(spec.alpha01)[idx]
    a02 = np.asarray(spec.alpha02)[idx]
    a12 = np.asarray(spec.alpha12)[idx]
    return _occupancy_step(p00_b[idx], p01_b[idx], a01, a02, a12, tau)


def _marginal_os_hazard(spec: IllnessDeathSpec, t) -> np.ndarray:
    """Marginal OS hazard: (a02*P00 + a12*P01) / (P00 + P01)."""
    p00, p01 = _occupancy(spec, t)
    a02 = spec.rate_at("02", t)
    a12 = spec.rate_at("12", t)
    return (a02 * p00 + a12 * p01) / (p00 + p01)


@dataclass(frozen=True)
class SurvivalCurves:
    """Induced PFS/OS survival functions and their cumulative hazards."""

    spec: IllnessDeathSpec
    t_max: float
    tol: float

    def s_pfs(self, t):
        return np.exp(-cumulative_hazard(self.spec, "0*", t))

    def s_os(self, t):
        """Variation-of-constants form, integrated exactly per segment.

        s_os(t) = e^{-L12(t)} (1 + int_0^t e^{-(L0*(u)-L12(u))} d(L12-L02)(u));
        on each segment the integrand is exp(linear), so the composite rule on
        the breakpoint grid has zero quadrature error (well under tol).
        """
        spec = self.spec
        t_arr = np.asarray(t, dtype=float)
        b = np.asarray(spec.breakpoints)
        a0s = spec.rates("0*").astype(float)
        a02 = np.asarray(spec.alpha02, dtype=float)
        a12 = np.asarray(spec.alpha12, dtype=float)
        seg_len = np.diff(b)
        l0s_b = np.concatenate(([0.0], np.cumsum(a0s[:-1] * seg_len)))
        l12_b = np.concatenate(([0.0], np.cumsum(a12[:-1] * seg_len)))

        def seg_integral(k, tau):
            # int_0^tau exp(-(start + slope*u)) * height du, exact
            start = l0s_b[k] - l12_b[k]
            slope = a0s[k] - a12[k]
            height = a12[k] - a02[k]
            small = np.abs(slope) < RATE_COLLAPSE_EPS
            safe = np.where(small, 1.0, slope)
            core = np.where(small, tau, (1.0 - np.exp(-safe * tau)) / safe)
            return height * np.exp(-start) * core

        inner_b = np.zeros(b.size)
        for k in range(b.size - 1):
            inner_b[k + 1] = inner_b[k] + seg_integral(k, seg_len[k])

        idx = np.clip(np.searchsorted(b, t_arr, side="right") - 1, 0, b.size - 1)
        tau = t_arr - b[idx]
        inner = inner_b[idx] + seg_integral(idx, tau)
        l12 = l12_b[idx] + a12[idx] * tau
        out = np.exp(-l12) * (1.0 + inner)
        if out.ndim == 0:
            return float(out)
        return out

    def lambda_pfs(self, t):
        return cumulative_hazard(self.spec, "0*", t)

    def lambda_os(self, t):
        return -np.log(self.s_os(t))


def survival_curves(spec: IllnessDeathSpec, t_max: float, tol: float = DEFAULT_IDENTITY_TOL) -> SurvivalCurves:
    if tol <= 0:
        raise InvalidArgumentError("tol must be positive")
    return SurvivalCurves(spec=spec, t_max=float(t_max), tol=float(tol))


def os_identity_residual(spec: IllnessDeathSpec, curves: SurvivalCurves, t: float) -> float:
    """|S_OS(t) - 1 + int S_PFS dL02 + int (S_OS - S_PFS) dL12|.

    The integrals run over the curves' own values with a fixed-order composite
    Gauss rule per segment, so the residual isolates errors in s_os itself.
    """
    b = np.asarray(spec.breakpoints)
    edges = np.unique(np.concatenate((b[b < t], [0.0, t])))
    total = 0.0
    for seg_lo, seg_hi in zip(edges[:-1], edges[1:]):
        # composite cells keep the Gauss error orders below the identity tol
        n_cells = max(1, int(np.ceil((seg_hi - seg_lo) / 0.25)))
        cell = np.linspace(seg_lo, seg_hi, n_cells + 1)
        lo, hi = cell[:-1, None], cell[1:, None]
        u = (lo + (hi - lo) * _GL_NODES[None, :]).ravel()
        w = ((hi - lo) * _GL_WEIGHTS[None, :]).ravel()
        s_pfs = curves.s_pfs(u)
        s_os = curves.s_os(u)
        total += float(np.sum(w * (s_pfs * spec.rate_at("02", u) + (s_os - s_pfs) * spec.rate_at("12", u))))
    return abs(float(curves.s_os(t)) - 1.0 + total)


def _solved_alternative_rate(
    reference: IllnessDeathSpec,
    omega_pfs: float,
    omega_os: float,
    third_relation: str,
    t: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pointwise (a01, a02, a12) of the alternative model at interior times t > 0.

    Both proportional-hazards margins are enforced exactly through the linear
    relation a12*(R-1) - a02*R = -omega_os*h_os0 with R = S_PFS^w / S_OS^w and
    the PFS constraint a01 + a02 = omega_pfs*(a01_0 + a02_0); the third
    relation pins one death-channel intensity.
    """
    l_pfs0 = cumulative_hazard(reference, "0*", t)
    p00, p01 = _occupancy(reference, t)
    s_os0 = p00 + p01
    h_os0 = _marginal_os_hazard(reference, t)
    log_r = -omega_pfs * l_pfs0 - omega_os * np.log(s_os0)
    r = np.exp(log_r)
    denom = r - 1.0
    a0s = omega_pfs * reference.rate_at("0*", t)
    if third_relation == "no_treatment_mortality":
        a02 = omega_os * reference.rate_at("02", t)
        if np.any(np.abs(denom) < 1e-13):
            bad = float(t[np.abs(denom) < 1e-13][0])
            raise InfeasibleAlternativeError(
                f"PH system ill-conditioned (R=1) at t={bad:.6g}", bad
            )
        a12 = (a02 * r - omega_os * h_os0) / denom
    elif third_relation == "scale_alpha12":
        a12 = omega_os * reference.rate_at("12", t)
        a02 = (a12 * denom + omega_os * h_os0) / r
    else:
        raise InvalidArgumentError(f"unknown third relation {third_relation!r}")
    a01 = a0s - a02
    return a01, a02, a12


def apply_contiguous_alternative(
    reference: IllnessDeathSpec,
    alt: ContiguousAlternative,
    third_relation: str,
    grid_step: float = ALTERNATIVE_GRID_STEP,
    horizon: float = ALTERNATIVE_HORIZON,
) -> IllnessDeathSpec:
    """Construct the model whose margins are S_PFS,0^w_PFS and S_OS,0^w_OS.

    The solved time-varying intensity is tabulated piecewise-constant on the
    reference breakpoints refined to cells of width <= grid_step up to
    `horizon` (cell averages via a fixed Gauss rule), then held constant.
    A negative solved intensity raises InfeasibleAlternativeError carrying the
    first offending time.
    """
    if third_relation not in ("no_treatment_mortality", "scale_alpha12"):
        raise InvalidArgumentError(f"unknown third relation {third_relation!r}")
    if alt.gamma_pfs == 0.0 and alt.gamma_os == 0.0:
        return reference

    omega_pfs, omega_os = alt.omega_pfs, alt.omega_os
    b = np.asarray(reference.breakpoints)
    edges = [np.asarray([0.0])]
    interior = np.unique(np.concatenate((b[(b > 0) & (b < horizon)], [horizon])))
    prev = 0.0
    for e in interior:
        n_cells = max(1, int(np.ceil((e - prev) / grid_step)))
        edges.append(np.linspace(prev, e, n_cells + 1)[1:])
        prev = e
    edges = np.concatenate(edges)
    lo, hi = edges[:-1], edges[1:]

    # Cell-average the solved rates from Gauss nodes strictly inside each cell;
    # the t=0 removable singularity of the solve is never touched.
    nodes = lo[:, None] + (hi - lo)[:, None] * _GL_NODES[None, :]
    flat = nodes.ravel()
    a01_n, a02_n, a12_n = _solved_alternative_rate(
        reference, omega_pfs, omega_os, third_relation, flat
    )
    for name, vals in (("alpha01", a01_n), ("alpha02", a02_n), ("alpha12", a12_n)):
        neg = vals < -1e-9
        if np.any(neg):
            bad = float(flat[neg][0])
            raise InfeasibleAlternativeError(
                f"{name} turns negative at t={bad:.6g} under {third_relation}", bad
            )
    shape = nodes.shape
    avg = lambda v: np.clip((v.reshape(shape) * _GL_WEIGHTS[None, :]).sum(axis=1), 0.0, None)
    a01, a02, a12 = avg(a01_n), avg(a02_n), avg(a12_n)

    # hold the last cell's value on [horizon, inf)
    return IllnessDeathSpec(tuple(lo), tuple(a01), tuple(a02), tuple(a12))
