"""Aalen-Johansen estimation and adaptive tests on general Markov logs.

One engine per log turns the ordered factor product over (s, t] into
prefix/suffix scans, so transition matrices and every covariance query cost
one pass over the event times. In the covariance quadruple sum over matrix
components, elementary transition-count martingales are orthogonal (no two
jump together under continuous intensities), so after substituting the
diagonal intensity rows the sum collapses to a single sum over observed
transitions with left weight P(s,u-) and a right-weight difference between
the destination and origin rows of P(u,t).
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import stats

from .errors import DegenerateVarianceError, InvalidArgumentError

__all__ = [
    "MultiStateLog",
    "TransitionMatrixEstimate",
    "TransitionTestResult",
    "aalen_johansen",
    "adaptive_transition_test",
    "conditional_error_bound",
    "q_covariance",
    "q_cross_covariance",
    "snapshot_to_log",
]

_CENSOR_TOKEN = "censor"
_CSV_HEADER = "subject,time,from,to"


@dataclass(frozen=True)
class MultiStateLog:
    """Per-subject transition records on a finite state space {0, ..., D}.

    Every subject starts in state 0 at time 0. paths maps subject id to its
    ordered transitions (time, from, to); censoring maps subject id to the
    end of observation for subjects that never reach an absorbing state.
    Subjects are ordered by id, which is the enrollment order in simulated
    data; head() relies on that.
    """

    n_states: int
    adjacency: frozenset
    subjects: tuple
    paths: dict
    censoring: dict

    def __post_init__(self):
        if self.n_states < 2:
            raise InvalidArgumentError("need at least two states")
        for g, h in self.adjacency:
            if not (0 <= g < self.n_states and 0 <= h < self.n_states) or g == h:
                raise InvalidArgumentError(f"adjacency pair ({g},{h}) is not a valid transition")
        absorbing = self.absorbing_states()
        for subj in self.subjects:
            state, clock = 0, 0.0
            for time, frm, to in self.paths.get(subj, ()):
                if not np.isfinite(time) or time <= clock:
                    raise InvalidArgumentError(
                        f"subject {subj}: transition times must be finite and strictly increasing"
                    )
                if frm != state:
                    raise InvalidArgumentError(
                        f"subject {subj}: transition from state {frm} but subject is in {state}"
                    )
                if (frm, to) not in self.adjacency:
                    raise InvalidArgumentError(f"subject {subj}: transition ({frm},{to}) not allowed")
                state, clock = to, time
            if subj in self.censoring:
                if state in absorbing:
                    raise InvalidArgumentError(f"subject {subj}: absorbed subjects cannot be censored")
                if self.censoring[subj] < clock:
                    raise InvalidArgumentError(f"subject {subj}: censored before its last transition")
            elif state not in absorbing:
                raise InvalidArgumentError(
                    f"subject {subj}: open-ended observation needs a censoring time"
                )

    @property
    def n(self) -> int:
        return len(self.subjects)

    def absorbing_states(self) -> frozenset:
        return frozenset(range(self.n_states)) - frozenset(g for g, _ in self.adjacency)

    @classmethod
    def from_records(cls, n_states, adjacency, transitions, censors) -> "MultiStateLog":
        paths: dict = {}
        for subj, time, frm, to in transitions:
            paths.setdefault(subj, []).append((float(time), int(frm), int(to)))
        censoring = {subj: float(time) for subj, time in censors}
        subjects = tuple(sorted(set(paths) | set(censoring)))
        paths = {s: tuple(sorted(paths.get(s, ()))) for s in subjects}
        return cls(int(n_states), frozenset((int(g), int(h)) for g, h in adjacency),
                   subjects, paths, censoring)

    @classmethod
    def from_csv(cls, source, n_states, adjacency) -> "MultiStateLog":
        """Parse `subject,time,from,to` rows plus `subject,time,censor` rows.

        A str is CSV content, a pathlib.Path names a file to read, anything
        else is an iterable of lines; one optional header line is skipped.
        """
        if isinstance(source, Path):
            lines = source.read_text().splitlines()
        elif isinstance(source, str):
            lines = source.splitlines()
        else:
            lines = list(source)
        transitions, censors = [], []
        for k, row in enumerate(csv.reader(lines)):
            if not row:
                continue
            if k == 0 and [c.strip() for c in row] == _CSV_HEADER.split(","):
                continue
            try:
                if len(row) == 3 and row[2].strip() == _CENSOR_TOKEN:
                    censors.append((row[0].strip(), float(row[1])))
                elif len(row) == 4:
                    transitions.append((row[0].strip(), float(row[1]), int(row[2]), int(row[3])))
                else:
                    raise ValueError(f"row {row}")
            except ValueError as exc:
                raise InvalidArgumentError(f"malformed log row: {exc}") from exc
        return cls.from_records(n_states, adjacency, transitions, censors)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(_CSV_HEADER + "\n")
        for subj in self.subjects:
            for time, frm, to in self.paths[subj]:
                buf.write(f"{subj},{time:.17g},{frm},{to}\n")
            if subj in self.censoring:
                buf.write(f"{subj},{self.censoring[subj]:.17g},{_CENSOR_TOKEN}\n")
        return buf.getvalue()

    def head(self, n: int) -> "MultiStateLog":
        if not 0 < n <= self.n:
            raise InvalidArgumentError(f"cannot take {n} of {self.n} subjects")
        keep = self.subjects[:n]
        return MultiStateLog(
            self.n_states, self.adjacency, keep,
            {s: self.paths[s] for s in keep},
            {s: t for s, t in self.censoring.items() if s in set(keep)},
        )

    def truncate(self, time: float) -> "MultiStateLog":
        """Administratively end observation at `time` for every subject."""
        if time <= 0:
            raise InvalidArgumentError("truncation time must be positive")
        absorbing = self.absorbing_states()
        paths, censoring = {}, {}
        for subj in self.subjects:
            kept = tuple(rec for rec in self.paths[subj] if rec[0] <= time)
            paths[subj] = kept
            state = kept[-1][2] if kept else 0
            if state not in absorbing:
                censoring[subj] = min(self.censoring.get(subj, np.inf), time)
        return MultiStateLog(self.n_states, self.adjacency, self.subjects, paths, censoring)


def snapshot_to_log(snapshot) -> MultiStateLog:
    """Rewrite an illness-death snapshot as a 3-state log (0 -> 1 -> 2, 0 -> 2)."""
    transitions, censors = [], []
    for i in range(snapshot.n):
        state = 0
        if snapshot.prog_ind[i]:
            transitions.append((i, float(snapshot.prog_time[i]), 0, 1))
            state = 1
        if snapshot.death_ind[i]:
            transitions.append((i, float(snapshot.death_time[i]), state, 2))
        elif snapshot.cens_ind[i]:
            censors.append((i, float(snapshot.cens_time[i])))
        else:
            raise InvalidArgumentError(f"patient {i} is neither absorbed nor censored")
    return MultiStateLog.from_records(3, ((0, 1), (0, 2), (1, 2)), transitions, censors)


class _Engine:
    """Sorted event table, at-risk counts, and one factor matrix per event time."""

    def __init__(self, log: MultiStateLog):
        self.log = log
        d = log.n_states
        enters: list = [[] for _ in range(d)]
        exits: list = [[] for _ in range(d)]
        events: dict = {}
        for subj in log.subjects:
            state, clock = 0, 0.0
            for time, frm, to in log.paths[subj]:
                enters[state].append(clock)
                exits[state].append(time)
                events.setdefault(time, {})
                events[time][(frm, to)] = events[time].get((frm, to), 0) + 1
                state, clock = to, time
            if subj in log.censoring:
                enters[state].append(clock)
                exits[state].append(log.censoring[subj])
        self._enters = [np.sort(np.array(e)) for e in enters]
        self._exits = [np.sort(np.array(e)) for e in exits]
        self.times = np.array(sorted(events))
        self.moves = []
        self.factors = []
        for u in self.times:
            delta = np.zeros((d, d))
            rows = []
            for (i, j), count in sorted(events[u].items()):
                y = self.at_risk(i, u)
                # the movers themselves are at risk just before u
                if y < count:
                    raise InvalidArgumentError(f"at-risk count {y} below jump size {count} at {u}")
                delta[i, j] += count / y
                rows.append((i, j, count, y))
            fac = np.eye(d) + delta
            # diagonal as the exact complement of the off-diagonal mass
            np.fill_diagonal(fac, 1.0 - delta.sum(axis=1))
            self.moves.append(rows)
            self.factors.append(fac)

    def at_risk(self, state: int, u: float) -> float:
        started = np.searchsorted(self._enters[state], u, side="left")
        gone = np.searchsorted(self._exits[state], u, side="left")
        return float(started - gone)

    def _window(self, s: float, t: float) -> np.ndarray:
        return np.nonzero((self.times > s) & (self.times <= t))[0]

    def matrix(self, s: float, t: float) -> np.ndarray:
        if s > t:
            raise InvalidArgumentError(f"need s <= t, got ({s}, {t})")
        out = np.eye(self.log.n_states)
        for k in self._window(s, t):
            out = out @ self.factors[k]
        return out

    def a_hat(self, t: float) -> np.ndarray:
        out = np.zeros((self.log.n_states, self.log.n_states))
        for k in self._window(0.0, t):
            for i, j, count, y in self.moves[k]:
                out[i, j] += count / y
        np.fill_diagonal(out, -out.sum(axis=1))
        return out

    def q_cross(self, s, t_a, t_b, comp_a, comp_b) -> float:
        """Estimated Cov(Q_a(s, t_a), Q_b(s, t_b)) on the n-rescaled scale.

        Both error processes share the martingale increments on the common
        window (s, min(t_a, t_b)]; each keeps its own right weight P(u, t).
        """
        ga, ha = comp_a
        gb, hb = comp_b
        for g, h in (comp_a, comp_b):
            if not (0 <= g < self.log.n_states and 0 <= h < self.log.n_states):
                raise InvalidArgumentError(f"component ({g},{h}) outside the state space")
        if s > min(t_a, t_b):
            raise InvalidArgumentError("window start must precede both end points")
        idx = self._window(s, min(t_a, t_b))
        if idx.size == 0:
            return 0.0
        suffix_a = self.matrix(self.times[idx[-1]], t_a)
        suffix_b = self.matrix(self.times[idx[-1]], t_b)
        suffixes_a = [suffix_a]
        suffixes_b = [suffix_b]
        for k in idx[:0:-1]:
            suffixes_a.append(self.factors[k] @ suffixes_a[-1])
            suffixes_b.append(self.factors[k] @ suffixes_b[-1])
        suffixes_a.reverse()
        suffixes_b.reverse()
        prefix = np.eye(self.log.n_states)
        acc = 0.0
        for pos, k in enumerate(idx):
            sa, sb = suffixes_a[pos], suffixes_b[pos]
            for i, j, count, y in self.moves[k]:
                wa = prefix[ga, i] * (sa[j, ha] - sa[i, ha])
                wb = prefix[gb, i] * (sb[j, hb] - sb[i, hb])
                acc += wa * wb * count / y**2
            prefix = prefix @ self.factors[k]
        return self.log.n * acc


class TransitionMatrixEstimate:
    """Product-integral estimate over (s, t] with its covariance accessor."""

    def __init__(self, log: MultiStateLog, s: float, t: float):
        self._engine = _Engine(log)
        self.s = float(s)
        self.t = float(t)
        self.matrix = self._engine.matrix(self.s, self.t)
        self.a_hat = self._engine.a_hat(self.t)

    def at(self, t: float) -> np.ndarray:
        return self._engine.matrix(self.s, t)

    def q_cov(self, comp_a, comp_b) -> float:
        return self._engine.q_cross(self.s, self.t, self.t, comp_a, comp_b)


def aalen_johansen(log: MultiStateLog, s: float, t: float) -> TransitionMatrixEstimate:
    if s > t:
        raise InvalidArgumentError(f"need s <= t, got ({s}, {t})")
    return TransitionMatrixEstimate(log, s, t)


def q_covariance(log: MultiStateLog, s, t, comp_a, comp_b) -> float:
    """Plug-in covariance of the rescaled errors Q_a(s,t), Q_b(s,t)."""
    return _Engine(log).q_cross(s, t, t, comp_a, comp_b)


def q_cross_covariance(log: MultiStateLog, s, t_a, t_b, comp_a, comp_b) -> float:
    return _Engine(log).q_cross(s, t_a, t_b, comp_a, comp_b)


def conditional_error_bound(psi0, c, v00, v01, v11, v01_mod, v11_mod) -> float:
    """Critical bound preserving the conditional rejection probability.

    The interim estimate psi0 and each final statistic are jointly Gaussian
    with Var(psi0) = v00 and the given covariances; equating the two
    conditional tail probabilities at psi0 gives the modified bound in
    closed form. An unmodified design (same covariances) returns c itself
    rather than routing the identity through the arithmetic.
    """
    if v00 <= 0:
        raise DegenerateVarianceError("interim variance must be positive")
    if v01 == v01_mod and v11 == v11_mod:
        return float(c)
    tau2 = v11 - v01**2 / v00
    tau2_mod = v11_mod - v01_mod**2 / v00
    if tau2 <= 0 or tau2_mod <= 0:
        raise DegenerateVarianceError(
            f"conditional variances must be positive, got {tau2} and {tau2_mod}"
        )
    z = (c - (v01 / v00) * psi0) / np.sqrt(tau2)
    return float((v01_mod / v00) * psi0 + np.sqrt(tau2_mod) * z)


@dataclass(frozen=True)
class TransitionTestResult:
    psi_interim: float
    psi_final: float
    c: float
    c_prime: float
    reject: bool
    v00: float
    v11: float
    v01_mod: float
    v11_mod: float


def adaptive_transition_test(
    control: MultiStateLog,
    experimental: MultiStateLog,
    component,
    window,
    t0: float,
    interim_sizes,
    planning_q: dict,
    alpha: float,
    t_prime: float | None = None,
) -> TransitionTestResult:
    """Two-arm test of equal transition probabilities with one interim change.

    The hypothesis concerns P_gh over (s, t]. At the interim the first
    interim_sizes subjects per arm are observed up to t0, giving the
    surrogate difference psi0 and the plug-in interim variance; everything
    entering the conditional law is frozen there. The error Q(s,tau) of the
    product-integral estimate shares its martingale increments on (s, t0]
    with Q(s,t0) but carries right weights P(u,tau) that no interim data can
    supply, so every second moment involving a horizon past t0 comes from a
    prespecified planning surface: planning_q maps the arm labels
    "control"/"experimental" to callables (tau_a, tau_b) -> Cov(Q(s,tau_a),
    Q(s,tau_b)) on the n-rescaled scale, as estimated by q_cross_covariance
    on pilot data. t_prime is the modified window end (defaults to t); the
    modified sample sizes are read off the logs. Rejects when the final
    difference reaches the modified bound.
    """
    s, t = window
    t_mod = t if t_prime is None else float(t_prime)
    if not s < t0 < t:
        raise InvalidArgumentError(f"interim time {t0} must lie inside ({s}, {t})")
    if t_mod <= t0:
        raise InvalidArgumentError("the modified window must end after the interim")
    if not 0 < alpha < 1:
        raise InvalidArgumentError(f"alpha must lie in (0,1), got {alpha}")
    n1_c, n1_e = (int(k) for k in interim_sizes)
    arms = {"control": control, "experimental": experimental}
    g, h = component
    if not (0 <= g < control.n_states and 0 <= h < control.n_states):
        raise InvalidArgumentError(f"component ({g},{h}) outside the state space")

    psi0, v00, v01, v11, v01_mod, v11_mod = 0.0, 0.0, 0.0, 0.0, 0.0, 0.0
    for label, sign, n1 in (("experimental", 1.0, n1_e), ("control", -1.0, n1_c)):
        cut = _Engine(arms[label].head(n1).truncate(t0))
        psi0 += sign * cut.matrix(s, t0)[g, h]
        plan = planning_q[label]
        n_mod = arms[label].n
        v00 += cut.q_cross(s, t0, t0, component, component) / n1
        v01 += plan(t0, t) / n1
        v11 += plan(t, t) / n1
        v01_mod += plan(t0, t_mod) / n_mod
        v11_mod += plan(t_mod, t_mod) / n_mod
    if v00 <= 0:
        raise DegenerateVarianceError("interim variance estimate is zero")
    c = float(stats.norm.ppf(1.0 - alpha) * np.sqrt(v11))
    c_prime = conditional_error_bound(psi0, c, v00, v01, v11, v01_mod, v11_mod)
    psi_final = (
        _Engine(experimental.truncate(t_mod)).matrix(s, t_mod)[g, h]
        - _Engine(control.truncate(t_mod)).matrix(s, t_mod)[g, h]
    )
    return TransitionTestResult(
        psi_interim=float(psi0),
        psi_final=float(psi_final),
        c=c,
        c_prime=float(c_prime),
        reject=bool(psi_final >= c_prime),
        v00=float(v00),
        v11=float(v11),
        v01_mod=float(v01_mod),
        v11_mod=float(v11_mod),
    )
