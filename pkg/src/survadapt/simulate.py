"""Cohort simulation and administrative censoring for two-stage designs.

Patients enter uniformly over stage-specific accrual windows on the calendar
scale; event processes run on the patient-time scale. Sampling inverts the
piecewise-linear cumulative hazards exactly, so simulated laws match the model
to machine precision (no discretization).
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError
from .idm import IllnessDeathSpec, cumulative_hazard

__all__ = [
    "TrialTimeline",
    "Cohort",
    "Snapshot",
    "sample_paths",
    "simulate_cohort",
    "administrative_censor",
    "cohort_to_csv",
    "cohort_from_csv",
]

_COHORT_HEADER = "id,arm,stage,entry,t1,t2,c"


@dataclass(frozen=True)
class TrialTimeline:
    """Calendar-scale layout of a two-stage trial.

    Stage-1 entries are uniform on [0, accrual1], stage-2 entries on
    (accrual1, accrual1 + accrual2]. The interim look happens at calendar time
    accrual1 + s1, so every stage-1 patient has at least s1 of follow-up; the
    final look at accrual1 + accrual2 + followup (plus any rule extension).
    """

    accrual1: float
    accrual2: float
    followup: float
    s1: float

    def __post_init__(self):
        if self.accrual1 < 0 or self.accrual2 < 0 or self.followup < 0:
            raise InvalidArgumentError("accrual and follow-up durations must be nonnegative")
        if self.s1 <= 0:
            raise InvalidArgumentError("interim patient time s1 must be positive")

    @property
    def interim_calendar(self) -> float:
        return self.accrual1 + self.s1

    def final_calendar(self, extension: float = 0.0) -> float:
        return self.accrual1 + self.accrual2 + self.followup + extension


@dataclass(frozen=True, eq=False)
class Cohort:
    """Raw simulated trial data before any censoring is applied.

    t1 is the progression time (inf when death occurs directly from state 0),
    t2 the death time, c the dropout time (inf when no dropout); all on the
    patient-time scale. entry is on the calendar scale.
    """

    ids: np.ndarray
    arm: np.ndarray
    stage: np.ndarray
    entry: np.ndarray
    t1: np.ndarray
    t2: np.ndarray
    c: np.ndarray

    @property
    def n(self) -> int:
        return int(self.ids.size)

    def subset(self, mask: np.ndarray) -> "Cohort":
        return Cohort(*(getattr(self, f)[mask] for f in ("ids", "arm", "stage", "entry", "t1", "t2", "c")))


@dataclass(frozen=True, eq=False)
class Snapshot:
    """Observables of one administrative look at patient-time horizon s.

    Per patient: progression observed iff T1 <= min(s, C, T2), death iff
    T2 <= min(s, C), censoring iff C <= min(s, T2); each *_time array is the
    event time when observed and 0 otherwise. C already folds dropout and the
    entry-staggered administrative cap together.
    """

    n: int
    s: float
    arm: np.ndarray
    prog_ind: np.ndarray
    prog_time: np.ndarray
    death_ind: np.ndarray
    death_time: np.ndarray
    cens_ind: np.ndarray
    cens_time: np.ndarray

    def for_arm(self, label: str) -> "Snapshot":
        mask = self.arm == label
        return Snapshot(
            int(mask.sum()),
            self.s,
            self.arm[mask],
            self.prog_ind[mask],
            self.prog_time[mask],
            self.death_ind[mask],
            self.death_time[mask],
            self.cens_ind[mask],
            self.cens_time[mask],
        )


def _inverse_cumhaz(spec: IllnessDeathSpec, which: str, y: np.ndarray) -> np.ndarray:
    """Smallest t with cumulative hazard(t) >= y; inf when never reached."""
    b = np.asarray(spec.breakpoints)
    rates = spec.rates(which).astype(float)
    cum_at_b = np.concatenate(([0.0], np.cumsum(rates[:-1] * np.diff(b))))
    y = np.asarray(y, dtype=float)
    k = np.clip(np.searchsorted(cum_at_b, y, side="right") - 1, 0, b.size - 1)
    rate = rates[k]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = b[k] + (y - cum_at_b[k]) / rate
    # zero-rate tail: the level y is reached exactly at the segment start or never
    t = np.where(rate > 0, t, np.where(y <= cum_at_b[k], b[k], np.inf))
    return t


def sample_paths(spec: IllnessDeathSpec, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Exact (T1, T2) paths; T1 = inf when death occurs straight from state 0.

    Three fixed draws per patient (exit clock, channel split, post-progression
    clock) keep the consumption of the random stream independent of outcomes.
    """
    e0 = rng.exponential(size=n)
    u = rng.uniform(size=n)
    e1 = rng.exponential(size=n)

    exit0 = _inverse_cumhaz(spec, "0*", e0)
    finite = np.isfinite(exit0)
    a01 = np.where(finite, spec.rate_at("01", np.where(finite, exit0, 0.0)), 0.0)
    a0s = np.where(finite, spec.rate_at("0*", np.where(finite, exit0, 0.0)), 1.0)
    prog = finite & (u * a0s < a01)

    t1 = np.where(prog, exit0, np.inf)
    t2 = np.where(finite, exit0, np.inf)
    if np.any(prog):
        # the 1->2 clock runs on absolute patient time (Markov, not semi-Markov)
        base = cumulative_hazard(spec, "12", np.where(prog, exit0, 0.0))
        t2_prog = _inverse_cumhaz(spec, "12", base + e1)
        t2 = np.where(prog, t2_prog, t2)
    return t1, t2


def simulate_cohort(
    specs: dict,
    timeline: TrialTimeline,
    stage_sizes: dict,
    rng: np.random.Generator,
    dropout_rate: float = 0.0,
) -> Cohort:
    """Simulate all arms and stages of one trial.

    specs maps arm label to IllnessDeathSpec; stage_sizes maps arm label to
    (n_stage1, n_stage2). Arms are drawn in sorted label order, stage 1 before
    stage 2, so the random stream layout is reproducible.
    """
    if set(specs) != set(stage_sizes):
        raise InvalidArgumentError("specs and stage_sizes must have identical arm labels")
    if dropout_rate < 0:
        raise InvalidArgumentError("dropout_rate must be nonnegative")
    ids, arms, stages, entries, t1s, t2s, cs = [], [], [], [], [], [], []
    next_id = 0
    for label in sorted(specs):
        n1, n2 = stage_sizes[label]
        for stage, n_stage in ((1, int(n1)), (2, int(n2))):
            if n_stage == 0:
                continue
            if stage == 1:
                entry = rng.uniform(0.0, timeline.accrual1, size=n_stage)
            else:
                entry = timeline.accrual1 + rng.uniform(0.0, timeline.accrual2, size=n_stage)
            t1, t2 = sample_paths(specs[label], n_stage, rng)
            if dropout_rate > 0:
                c = rng.exponential(1.0 / dropout_rate, size=n_stage)
            else:
                c = np.full(n_stage, np.inf)
            ids.append(np.arange(next_id, next_id + n_stage))
            next_id += n_stage
            arms.append(np.full(n_stage, label, dtype="U8"))
            stages.append(np.full(n_stage, stage, dtype=int))
            entries.append(entry)
            t1s.append(t1)
            t2s.append(t2)
            cs.append(c)
    cat = lambda parts: np.concatenate(parts) if parts else np.empty(0)
    return Cohort(
        cat(ids).astype(int) if ids else np.empty(0, dtype=int),
        cat(arms) if arms else np.empty(0, dtype="U8"),
        cat(stages).astype(int) if stages else np.empty(0, dtype=int),
        cat(entries), cat(t1s), cat(t2s), cat(cs),
    )


def administrative_censor(cohort: Cohort, calendar_time: float, stage: int | None = None) -> Snapshot:
    """Freeze the observables available at a calendar look.

    Only patients already enrolled are included; an optional stage filter
    restricts to one accrual cohort. Follow-up of patient i is capped at
    calendar_time - entry_i and at the dropout time.
    """
    mask = cohort.entry <= calendar_time
    if stage is not None:
        mask &= cohort.stage == stage
    sub = cohort.subset(mask)
    c_admin = calendar_time - sub.entry
    c_total = np.minimum(sub.c, c_admin)
    s = float(calendar_time)

    prog_ind = sub.t1 <= np.minimum(s, np.minimum(c_total, sub.t2))
    death_ind = sub.t2 <= np.minimum(s, c_total)
    cens_ind = c_total <= np.minimum(s, sub.t2)
    return Snapshot(
        n=sub.n,
        s=s,
        arm=sub.arm,
        prog_ind=prog_ind,
        prog_time=np.where(prog_ind, sub.t1, 0.0),
        death_ind=death_ind,
        death_time=np.where(death_ind, sub.t2, 0.0),
        cens_ind=cens_ind,
        cens_time=np.where(cens_ind, c_total, 0.0),
    )


def cohort_to_csv(cohort: Cohort) -> str:
    buf = io.StringIO()
    buf.write(_COHORT_HEADER + "\n")
    for i in range(cohort.n):
        buf.write(
            f"{cohort.ids[i]},{cohort.arm[i]},{cohort.stage[i]},"
            f"{cohort.entry[i]:.17g},{cohort.t1[i]:.17g},{cohort.t2[i]:.17g},{cohort.c[i]:.17g}\n"
        )
    return buf.getvalue()


def cohort_from_csv(text: str) -> Cohort:
    lines = [ln for ln in text.strip().splitlines() if ln]
    if not lines or lines[0].replace(" ", "") != _COHORT_HEADER:
        raise InvalidArgumentError(f"expected header '{_COHORT_HEADER}'")
    rows = [ln.split(",") for ln in lines[1:]]
    if any(len(r) != 7 for r in rows):
        raise InvalidArgumentError("each cohort row needs 7 fields")
    cols = list(zip(*rows)) if rows else [[]] * 7
    return Cohort(
        np.asarray([int(x) for x in cols[0]], dtype=int),
        np.asarray(cols[1], dtype="U8"),
        np.asarray([int(x) for x in cols[2]], dtype=int),
        np.asarray([float(x) for x in cols[3]]),
        np.asarray([float(x) for x in cols[4]]),
        np.asarray([float(x) for x in cols[5]]),
        np.asarray([float(x) for x in cols[6]]),
    )
