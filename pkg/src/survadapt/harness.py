"""Scenario-driven Monte Carlo harness over the adaptive survival tests.

One ScenarioConfig fixes everything a replication needs: generating
intensities per arm, accrual geometry, reference curves, design levels, an
adaptation rule, a replication count and a master seed. Per-replication
seeds are spawned once from the master seed and results are reduced in
replication order, so the worker count never changes any number. Results
persist as one records file plus one summary file named by the hash of the
effective config; every aggregate is recomputable from the records, which
verify_files checks.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy import stats

from .boundary import (
    AdaptationRule,
    RctBoundaryProblem,
    SingleBoundaryProblem,
    TwoStageDesign,
    run_plugin_two_stage,
    run_rct_two_stage,
    solve_c1,
    solve_c2_cells,
)
from .counting import CohortCounting
from .errors import (
    DegenerateInterimError,
    InvalidConfigError,
    NonIncreasingInformationError,
    ProtocolViolationError,
    SurvAdaptError,
)
from .idm import IllnessDeathSpec, survival_curves
from .joint import ConditionalErrorFunction, JointStatistics, MinPDesign, run_joint_two_stage
from .multistate import (
    aalen_johansen,
    adaptive_transition_test,
    q_cross_covariance,
    snapshot_to_log,
)
from .simulate import TrialTimeline, administrative_censor, simulate_cohort
from .single_arm import PluginStatistics, interim_summary
from .two_arm import TwoArmContrast

__all__ = [
    "FAMILIES",
    "RuleSpec",
    "AccrualPlan",
    "DesignSettings",
    "MultiStateSettings",
    "ScenarioConfig",
    "ExperimentResult",
    "DiagnosticsResult",
    "run_experiment",
    "naive_logrank_control",
    "diagnostics",
    "build_cohort",
    "design_report",
    "write_result",
    "write_diagnostics",
    "verify_files",
    "records_to_csv",
    "records_from_csv",
]

FAMILIES = ("joint", "single_arm_os", "rct_os", "rct_gap", "multistate", "naive_logrank")

_Z_FAMILIES = ("single_arm_os", "rct_os", "rct_gap", "naive_logrank")
_TWO_ARM_FAMILIES = ("rct_os", "rct_gap", "multistate")
_REFERENCE_FAMILIES = ("joint", "single_arm_os", "naive_logrank")
_RCT_FLAVOR = {"rct_os": "os", "rct_gap": "gap"}

_Z_COLUMNS = (
    "rep", "z11", "x2", "decision_stage1", "s2", "c2",
    "z12", "z2", "z_combined", "decision_final", "reject",
)
_RECORD_COLUMNS = {
    "joint": (
        "rep", "z_pfs_1", "z_os_1", "p1", "decision_stage1", "s2",
        "z_pfs_2", "z_os_2", "p2", "decision_final", "reject",
    ),
    "single_arm_os": _Z_COLUMNS,
    "rct_os": _Z_COLUMNS,
    "rct_gap": _Z_COLUMNS,
    "naive_logrank": _Z_COLUMNS,
    "multistate": ("rep", "psi_interim", "t_mod", "psi_final", "c", "c_prime", "reject"),
}


# ---------------------------------------------------------------------------
# configuration


def _require_keys(d: dict, required, optional, where: str) -> None:
    missing = sorted(k for k in required if k not in d)
    unknown = sorted(k for k in d if k not in required and k not in optional)
    if missing:
        raise InvalidConfigError(f"{where}: missing keys {missing}")
    if unknown:
        raise InvalidConfigError(f"{where}: unknown keys {unknown}")


def _opt_float(d: dict, key: str):
    return None if d.get(key) is None else float(d[key])


@dataclass(frozen=True)
class RuleSpec:
    """Named adaptation rule plus its parameters; ids live in _RULE_FAMILIES."""

    id: str
    parameters: dict

    @classmethod
    def from_dict(cls, d: dict) -> "RuleSpec":
        _require_keys(d, ("id", "parameters"), (), "rule")
        if not isinstance(d["parameters"], dict):
            raise InvalidConfigError("rule parameters must be a mapping")
        return cls(str(d["id"]), dict(d["parameters"]))

    def to_canonical(self) -> dict:
        return {"id": self.id, "parameters": {k: self.parameters[k] for k in sorted(self.parameters)}}


@dataclass(frozen=True)
class AccrualPlan:
    """Uniform accrual durations per stage and an exponential dropout rate."""

    stage1: float
    stage2: float
    dropout_rate: float = 0.0

    @classmethod
    def from_dict(cls, d: dict) -> "AccrualPlan":
        _require_keys(d, ("stage1", "stage2"), ("dropout_rate",), "accrual")
        return cls(float(d["stage1"]), float(d["stage2"]), float(d.get("dropout_rate", 0.0)))

    def to_canonical(self) -> dict:
        return {"stage1": self.stage1, "stage2": self.stage2, "dropout_rate": self.dropout_rate}


@dataclass(frozen=True)
class DesignSettings:
    """Level, stage weights, interim time and orientation of the test.

    Fields a family does not use must stay None; validate() enforces the
    split so a config cannot silently carry ignored settings.
    """

    alpha: float
    s1: float
    alpha1: float = None
    alpha0: float = None
    futility_c0: float = None
    w1: float = None
    w2: float = None
    orientation: str = "as_written"
    eta_pfs: tuple = None
    eta_os: tuple = None
    cef: str = None

    @classmethod
    def from_dict(cls, d: dict) -> "DesignSettings":
        _require_keys(
            d,
            ("alpha", "s1"),
            ("alpha1", "alpha0", "futility_c0", "w1", "w2", "orientation", "eta_pfs", "eta_os", "cef"),
            "design",
        )
        eta_p = d.get("eta_pfs")
        eta_o = d.get("eta_os")
        return cls(
            alpha=float(d["alpha"]),
            s1=float(d["s1"]),
            alpha1=_opt_float(d, "alpha1"),
            alpha0=_opt_float(d, "alpha0"),
            futility_c0=_opt_float(d, "futility_c0"),
            w1=_opt_float(d, "w1"),
            w2=_opt_float(d, "w2"),
            orientation=str(d.get("orientation", "as_written")),
            eta_pfs=None if eta_p is None else tuple(float(x) for x in eta_p),
            eta_os=None if eta_o is None else tuple(float(x) for x in eta_o),
            cef=None if d.get("cef") is None else str(d["cef"]),
        )

    def to_canonical(self) -> dict:
        return {
            "alpha": self.alpha,
            "s1": self.s1,
            "alpha1": self.alpha1,
            "alpha0": self.alpha0,
            "futility_c0": self.futility_c0,
            "w1": self.w1,
            "w2": self.w2,
            "orientation": self.orientation,
            "eta_pfs": None if self.eta_pfs is None else list(self.eta_pfs),
            "eta_os": None if self.eta_os is None else list(self.eta_os),
            "cef": self.cef,
        }


@dataclass(frozen=True)
class MultiStateSettings:
    """Window and planning inputs of the transition-probability test.

    The interim patient time doubles as the design's s1; the window is
    (window_start, horizon] and the planning surface is estimated once from
    planning_n pilot subjects per arm.
    """

    component: tuple
    window_start: float
    horizon: float
    planning_n: int

    @classmethod
    def from_dict(cls, d: dict) -> "MultiStateSettings":
        _require_keys(d, ("component", "window_start", "horizon", "planning_n"), (), "multistate")
        comp = d["component"]
        if not isinstance(comp, (list, tuple)) or len(comp) != 2:
            raise InvalidConfigError("multistate component must be a pair of states")
        return cls(
            component=(int(comp[0]), int(comp[1])),
            window_start=float(d["window_start"]),
            horizon=float(d["horizon"]),
            planning_n=int(d["planning_n"]),
        )

    def to_canonical(self) -> dict:
        return {
            "component": list(self.component),
            "window_start": self.window_start,
            "horizon": self.horizon,
            "planning_n": self.planning_n,
        }


@dataclass(frozen=True)
class ScenarioConfig:
    """Complete, hashable description of one simulation experiment."""

    family: str
    arms: dict
    stage_sizes: dict
    accrual: AccrualPlan
    design: DesignSettings
    rule: RuleSpec
    replications: int
    seed: int
    reference: dict = None
    multistate: MultiStateSettings = None
    name: str = ""

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        _require_keys(
            d,
            ("family", "arms", "stage_sizes", "accrual", "design", "rule", "replications", "seed"),
            ("reference", "multistate", "name"),
            "config",
        )
        if not isinstance(d["arms"], dict) or not d["arms"]:
            raise InvalidConfigError("arms must be a nonempty mapping of label to intensity spec")
        if not isinstance(d["stage_sizes"], dict):
            raise InvalidConfigError("stage_sizes must map arm label to a (stage1, stage2) pair")
        ms = d.get("multistate")
        return cls(
            family=str(d["family"]),
            arms={str(k): dict(v) for k, v in d["arms"].items()},
            stage_sizes={str(k): tuple(int(x) for x in v) for k, v in d["stage_sizes"].items()},
            accrual=AccrualPlan.from_dict(d["accrual"]),
            design=DesignSettings.from_dict(d["design"]),
            rule=RuleSpec.from_dict(d["rule"]),
            replications=int(d["replications"]),
            seed=int(d["seed"]),
            reference=None if d.get("reference") is None else dict(d["reference"]),
            multistate=None if ms is None else MultiStateSettings.from_dict(ms),
            name=str(d.get("name", "")),
        )

    @classmethod
    def from_json(cls, text: str) -> "ScenarioConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise InvalidConfigError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise InvalidConfigError("config JSON must be an object")
        return cls.from_dict(data)

    def with_overrides(self, seed=None, replications=None) -> "ScenarioConfig":
        out = self
        if seed is not None:
            out = replace(out, seed=int(seed))
        if replications is not None:
            out = replace(out, replications=int(replications))
        return out

    def to_canonical(self) -> dict:
        arms = {k: IllnessDeathSpec.from_dict(self.arms[k]).to_dict() for k in sorted(self.arms)}
        return {
            "family": self.family,
            "name": self.name,
            "arms": arms,
            "stage_sizes": {k: list(self.stage_sizes[k]) for k in sorted(self.stage_sizes)},
            "accrual": self.accrual.to_canonical(),
            "design": self.design.to_canonical(),
            "rule": self.rule.to_canonical(),
            "replications": self.replications,
            "seed": self.seed,
            "reference": None if self.reference is None else IllnessDeathSpec.from_dict(self.reference).to_dict(),
            "multistate": None if self.multistate is None else self.multistate.to_canonical(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_canonical(), sort_keys=True)

    def config_hash(self) -> str:
        payload = json.dumps(self.to_canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode()).hexdigest()[:12]

    def validate(self) -> None:
        if self.family not in FAMILIES:
            raise InvalidConfigError(f"unknown family {self.family!r}; choose one of {FAMILIES}")
        if self.replications < 1:
            raise InvalidConfigError("replications must be at least 1")
        if self.seed < 0:
            raise InvalidConfigError("seed must be a nonnegative integer")

        labels = sorted(self.arms)
        if self.family in _TWO_ARM_FAMILIES and labels != ["control", "experimental"]:
            raise InvalidConfigError(
                f"family {self.family!r} needs exactly the arms 'control' and 'experimental'"
            )
        if self.family not in _TWO_ARM_FAMILIES and len(labels) != 1:
            raise InvalidConfigError(f"family {self.family!r} needs exactly one arm")
        if sorted(self.stage_sizes) != labels:
            raise InvalidConfigError("stage_sizes must cover exactly the configured arms")
        for label in labels:
            sizes = self.stage_sizes[label]
            if len(sizes) != 2 or sizes[0] < 1 or sizes[1] < 0:
                raise InvalidConfigError(
                    f"arm {label!r}: stage sizes must be (stage1 >= 1, stage2 >= 0)"
                )
            try:
                IllnessDeathSpec.from_dict(self.arms[label])
            except SurvAdaptError as exc:
                raise InvalidConfigError(f"arm {label!r}: {exc}") from exc

        if self.family in _REFERENCE_FAMILIES:
            if self.reference is None:
                raise InvalidConfigError(f"family {self.family!r} needs reference curves")
            try:
                IllnessDeathSpec.from_dict(self.reference)
            except SurvAdaptError as exc:
                raise InvalidConfigError(f"reference: {exc}") from exc
        elif self.reference is not None:
            raise InvalidConfigError(f"family {self.family!r} does not take reference curves")

        acc = self.accrual
        if acc.stage1 <= 0 or acc.stage2 < 0 or acc.dropout_rate < 0:
            raise InvalidConfigError("accrual needs stage1 > 0, stage2 >= 0, dropout_rate >= 0")

        self._validate_design()

        if self.rule.id not in _RULE_FAMILIES:
            raise InvalidConfigError(
                f"unknown rule id {self.rule.id!r}; choose one of {sorted(_RULE_FAMILIES)}"
            )
        if self.family not in _RULE_FAMILIES[self.rule.id]:
            raise InvalidConfigError(
                f"rule {self.rule.id!r} is not defined for family {self.family!r}"
            )
        _RULE_VALIDATORS[self.rule.id](self.rule)
        outputs = _rule_outputs(self.rule)
        if any(not math.isfinite(o) or o <= self.design.s1 for o in outputs):
            raise InvalidConfigError(
                f"every rule output must be a finite time beyond s1={self.design.s1}, got {outputs}"
            )

        if self.family == "multistate":
            if self.multistate is None:
                raise InvalidConfigError("family 'multistate' needs a multistate block")
            self._validate_multistate()
        elif self.multistate is not None:
            raise InvalidConfigError(f"family {self.family!r} does not take a multistate block")

    def _validate_design(self) -> None:
        d = self.design
        if not 0.0 < d.alpha < 1.0:
            raise InvalidConfigError("design alpha must lie in (0, 1)")
        if d.s1 <= 0:
            raise InvalidConfigError("design s1 must be positive")
        if d.orientation not in ("as_written", "improvement"):
            raise InvalidConfigError(f"unknown orientation {d.orientation!r}")

        def forbid(fields):
            for f in fields:
                if getattr(d, f) is not None:
                    raise InvalidConfigError(f"design field {f!r} is not used by family {self.family!r}")

        if self.family in _Z_FAMILIES:
            for f in ("alpha1", "futility_c0", "w1", "w2"):
                if getattr(d, f) is None:
                    raise InvalidConfigError(f"family {self.family!r} needs design field {f!r}")
            if not 0.0 < d.alpha1 < d.alpha:
                raise InvalidConfigError("need 0 < alpha1 < alpha")
            if d.w1 < 0 or d.w2 < 0 or abs(d.w1**2 + d.w2**2 - 1.0) > 1e-12:
                raise InvalidConfigError("stage weights must be nonnegative with w1^2 + w2^2 = 1")
            forbid(("alpha0", "eta_pfs", "eta_os", "cef"))
        elif self.family == "joint":
            for f in ("alpha1", "alpha0", "w1", "w2", "eta_pfs", "eta_os", "cef"):
                if getattr(d, f) is None:
                    raise InvalidConfigError(f"family 'joint' needs design field {f!r}")
            if len(d.eta_pfs) != 2 or len(d.eta_os) != 2:
                raise InvalidConfigError("eta_pfs and eta_os must give one weight per stage")
            if d.orientation != "as_written":
                raise InvalidConfigError("the joint test has no orientation switch")
            forbid(("futility_c0",))
            _build_minp_design(d)
        else:
            if d.orientation != "as_written":
                raise InvalidConfigError("the multistate test has no orientation switch")
            forbid(("alpha1", "alpha0", "futility_c0", "w1", "w2", "eta_pfs", "eta_os", "cef"))

    def _validate_multistate(self) -> None:
        ms = self.multistate
        g, h = ms.component
        if not (0 <= g < 3 and 0 <= h < 3):
            raise InvalidConfigError("component states must index the three-state space")
        if ms.window_start < 0:
            raise InvalidConfigError("window_start must be nonnegative")
        if not ms.window_start < self.design.s1 < ms.horizon:
            raise InvalidConfigError("need window_start < s1 < horizon")
        if ms.planning_n < 2:
            raise InvalidConfigError("planning_n must be at least 2")


# ---------------------------------------------------------------------------
# adaptation rules


def _validate_constant(rule: RuleSpec) -> None:
    _require_keys(rule.parameters, ("s2",), (), "rule 'constant'")
    float(rule.parameters["s2"])


def _validate_indicator(rule: RuleSpec) -> None:
    _require_keys(
        rule.parameters,
        ("base", "extension", "x2_threshold", "x2_direction"),
        ("z_threshold", "z_direction"),
        "rule 'indicator_extension'",
    )
    p = rule.parameters
    if float(p["extension"]) < 0:
        raise InvalidConfigError("indicator extension must be nonnegative")
    if p["x2_direction"] not in ("le", "ge"):
        raise InvalidConfigError("x2_direction must be 'le' or 'ge'")
    if p.get("z_direction", "le") not in ("le", "ge"):
        raise InvalidConfigError("z_direction must be 'le' or 'ge'")


def _validate_pvalue(rule: RuleSpec) -> None:
    _require_keys(rule.parameters, ("base", "extension", "p1_threshold"), (), "rule 'pvalue_extension'")
    p = rule.parameters
    if float(p["extension"]) < 0:
        raise InvalidConfigError("p-value extension must be nonnegative")
    if not 0.0 < float(p["p1_threshold"]) < 1.0:
        raise InvalidConfigError("p1_threshold must lie in (0, 1)")


def _validate_psi(rule: RuleSpec) -> None:
    _require_keys(
        rule.parameters,
        ("base", "extension", "threshold", "direction"),
        (),
        "rule 'psi_extension'",
    )
    p = rule.parameters
    if float(p["extension"]) < 0:
        raise InvalidConfigError("psi extension must be nonnegative")
    if p["direction"] not in ("le", "ge"):
        raise InvalidConfigError("direction must be 'le' or 'ge'")


_RULE_VALIDATORS = {
    "constant": _validate_constant,
    "indicator_extension": _validate_indicator,
    "pvalue_extension": _validate_pvalue,
    "psi_extension": _validate_psi,
}
_RULE_FAMILIES = {
    "constant": FAMILIES,
    "indicator_extension": _Z_FAMILIES,
    "pvalue_extension": ("joint",),
    "psi_extension": ("multistate",),
}


def _rule_outputs(rule: RuleSpec) -> tuple:
    p = rule.parameters
    if rule.id == "constant":
        return (float(p["s2"]),)
    base, ext = float(p["base"]), float(p["extension"])
    return tuple(sorted({base, base + ext}))


def _build_adaptation_rule(rule: RuleSpec) -> AdaptationRule:
    p = rule.parameters
    if rule.id == "constant":
        s2 = float(p["s2"])

        def ev(x1, x2):
            return np.full(np.broadcast(np.asarray(x1), np.asarray(x2)).shape, s2)

        return AdaptationRule(ev)
    base, ext = float(p["base"]), float(p["extension"])
    thr = float(p["x2_threshold"])
    x2_ge = p["x2_direction"] == "ge"
    z_thr = None if p.get("z_threshold") is None else float(p["z_threshold"])
    z_ge = p.get("z_direction", "le") == "ge"

    def ev(x1, x2):
        x1 = np.asarray(x1, dtype=float)
        x2 = np.asarray(x2, dtype=float)
        ind = (x2 >= thr) if x2_ge else (x2 <= thr)
        if z_thr is not None:
            ind = ind & ((x1 >= z_thr) if z_ge else (x1 <= z_thr))
        return base + ext * ind

    x1_cuts = () if z_thr is None else (z_thr,)
    return AdaptationRule(ev, x1_breakpoints=x1_cuts, x2_breakpoints=(thr,))


def _build_scalar_rule(rule: RuleSpec):
    """Interim-summary rule for the joint and multistate families."""
    p = rule.parameters
    if rule.id == "constant":
        s2 = float(p["s2"])
        return lambda value: s2
    base, ext = float(p["base"]), float(p["extension"])
    if rule.id == "pvalue_extension":
        thr = float(p["p1_threshold"])
        return lambda p1: base + ext * (p1 > thr)
    thr = float(p["threshold"])
    if p["direction"] == "ge":
        return lambda psi0: base + ext * (psi0 >= thr)
    return lambda psi0: base + ext * (psi0 <= thr)


def _rule_scalar(rule: AdaptationRule, z: float, x2: float) -> float:
    val = np.asarray(rule(np.asarray([z], dtype=float), np.asarray([x2], dtype=float)), dtype=float)
    return float(val.reshape(-1)[0])


def _build_minp_design(d: DesignSettings) -> MinPDesign:
    if d.cef == "constant":
        cef = ConditionalErrorFunction.constant(d.alpha, d.alpha1, d.alpha0)
    elif d.cef == "inverse_p":
        cef = ConditionalErrorFunction.inverse_p(d.alpha, d.alpha1, d.alpha0)
    else:
        raise InvalidConfigError(f"unknown conditional error shape {d.cef!r}")
    return MinPDesign(
        alpha=d.alpha, alpha1=d.alpha1, alpha0=d.alpha0, w1=d.w1, w2=d.w2,
        eta_pfs=d.eta_pfs, eta_os=d.eta_os, cef=cef,
    )


# ---------------------------------------------------------------------------
# per-scenario context


def _negated(fn):
    def flipped(s):
        return -fn(s)

    return flipped


def _scaled_lhat_closure(contrast: TwoArmContrast, arm: str, sign: float):
    def lhat(s):
        return sign * contrast.scaled_lhat(arm, s)

    return lhat


def _increment_sd_closure(contrast: TwoArmContrast, s1: float):
    def varsigma(s2):
        return math.sqrt(max(contrast.varsigma2(s2, s1), 0.0))

    return varsigma


class _Context:
    """Deterministic per-scenario objects shared by every replication.

    Built once per process from the canonical config text; the planning
    pilot for the multistate family draws from its own seed child, so the
    context is identical no matter where or how often it is rebuilt.
    """

    def __init__(self, config: ScenarioConfig):
        config.validate()
        self.config = config
        self.family = config.family
        d = config.design
        self.timeline = TrialTimeline(config.accrual.stage1, config.accrual.stage2, 0.0, d.s1)
        self.specs = {k: IllnessDeathSpec.from_dict(v) for k, v in config.arms.items()}
        self.stage_sizes = dict(config.stage_sizes)
        self.dropout = config.accrual.dropout_rate
        horizon = max(_rule_outputs(config.rule) + (d.s1,))
        self.reference = None
        if config.reference is not None:
            self.reference = survival_curves(IllnessDeathSpec.from_dict(config.reference), horizon + 1.0)
        self.sign = -1.0 if d.orientation == "improvement" else 1.0

        if self.family in _Z_FAMILIES:
            self.rule = _build_adaptation_rule(config.rule)
            self.c1 = solve_c1(d.alpha1)
            self.c0 = d.futility_c0
            if self.c0 >= self.c1:
                raise InvalidConfigError("futility_c0 must lie below the stage-one bound c1")
        if self.family == "naive_logrank":
            mass = stats.norm.cdf(self.c1) - stats.norm.cdf(self.c0)
            budget = (d.alpha - d.alpha1) / mass
            if not 0.0 < budget < 1.0:
                raise InvalidConfigError("stage-two error budget is not attainable at these bounds")
            # fixed bound from pretending the increment is independent of stage one
            self.naive_c2 = float(stats.norm.isf(budget))
        if self.family == "joint":
            self.minp = _build_minp_design(d)
            self.joint_rule = _build_scalar_rule(config.rule)
        if self.family == "multistate":
            self.ms_rule = _build_scalar_rule(config.rule)
            self.planning = _planning_surfaces(config)


def _planning_surfaces(config: ScenarioConfig) -> dict:
    """Per-arm second-moment surfaces of the rescaled estimation error.

    Simulated once from the scenario's own intensities at the planning
    size, under the arms' dropout law, with every pilot subject followed to
    the deepest horizon a rule can choose. Keyed lookups keep surface use
    restricted to the horizons enumerated here.
    """
    ms = config.multistate
    comp = ms.component
    taus = sorted({config.design.s1, ms.horizon, *(_rule_outputs(config.rule))})
    rng = np.random.default_rng(np.random.SeedSequence(config.seed).spawn(1)[0])
    pilot_timeline = TrialTimeline(1.0, 0.0, 0.0, 1.0)
    out = {}
    for label in sorted(config.arms):
        spec = IllnessDeathSpec.from_dict(config.arms[label])
        cohort = simulate_cohort(
            {label: spec}, pilot_timeline, {label: (ms.planning_n, 0)}, rng, config.accrual.dropout_rate
        )
        log = snapshot_to_log(administrative_censor(cohort, 1.0 + max(taus)))
        table = {}
        for a in taus:
            for b in taus:
                if a <= b:
                    table[(round(a, 9), round(b, 9))] = q_cross_covariance(
                        log, ms.window_start, a, b, comp, comp
                    )
        out[label] = _SurfaceLookup(table)
    return out


class _SurfaceLookup:
    def __init__(self, table: dict):
        self._table = table

    def __call__(self, tau_a: float, tau_b: float) -> float:
        lo, hi = sorted((round(float(tau_a), 9), round(float(tau_b), 9)))
        try:
            return self._table[(lo, hi)]
        except KeyError:
            raise InvalidConfigError(
                f"planning surface has no entry for horizons ({tau_a}, {tau_b})"
            ) from None


# ---------------------------------------------------------------------------
# replication bodies


def _final_calendar(ctx: _Context, s2: float) -> float:
    # the final look waits until the youngest stage-two patient reaches s2
    return ctx.timeline.final_calendar(s2)


def _replicate(ctx: _Context, seed, idx: int) -> dict:
    rng = np.random.default_rng(seed)
    cohort = simulate_cohort(ctx.specs, ctx.timeline, ctx.stage_sizes, rng, ctx.dropout)
    if ctx.family == "joint":
        return _replicate_joint(ctx, cohort, idx)
    if ctx.family == "multistate":
        return _replicate_multistate(ctx, cohort, idx)
    if ctx.family == "naive_logrank":
        return _replicate_naive(ctx, cohort, idx)
    if ctx.family == "single_arm_os":
        return _replicate_single(ctx, cohort, idx)
    return _replicate_rct(ctx, cohort, idx)


def _replicate_single(ctx: _Context, cohort, idx: int) -> dict:
    d = ctx.config.design
    s1 = d.s1
    interim = administrative_censor(cohort, ctx.timeline.interim_calendar, stage=1)
    summ = interim_summary(interim, ctx.reference, s1)
    z11 = ctx.sign * summ.z11
    x2 = c2 = None
    s2 = s1 + 1.0
    final1 = final2 = interim  # placeholders; never read when stage one stops
    if ctx.c0 <= z11 < ctx.c1:
        x2 = summ.lambda0star_s1
        s2 = _rule_scalar(ctx.rule, z11, x2)
        problem = SingleBoundaryProblem(
            alpha=d.alpha,
            alpha1=d.alpha1,
            c0=ctx.c0,
            w1=d.w1,
            w2=d.w2,
            s1=s1,
            n_stage1=interim.n,
            lambda0star_s1=summ.lambda0star_s1,
            delta_f=summ.delta_f if ctx.sign > 0 else _negated(summ.delta_f),
            varsigma=summ.sigma.varsigma,
            cov_z_m=ctx.sign * summ.sigma.cov_z_m,
            v33=summ.sigma.v33,
            rule=ctx.rule,
        )
        c2 = solve_c2_cells(problem).c2
        final_cal = _final_calendar(ctx, s2)
        final1 = administrative_censor(cohort, final_cal, stage=1)
        final2 = administrative_censor(cohort, final_cal, stage=2)
    design = TwoStageDesign(ctx.c0, ctx.c1, 0.0 if c2 is None else c2, d.w1, d.w2, d.orientation)
    rec = run_plugin_two_stage(ctx.reference, design, interim, final1, final2, s1, s2)
    rec.update(rep=idx, x2=x2, c2=c2, reject=int(rec["decision_final"] == "reject"))
    return rec


def _replicate_rct(ctx: _Context, cohort, idx: int) -> dict:
    d = ctx.config.design
    s1 = d.s1
    flavor = _RCT_FLAVOR[ctx.family]
    interim = administrative_censor(cohort, ctx.timeline.interim_calendar, stage=1)
    pair_interim = (interim.for_arm("control"), interim.for_arm("experimental"))
    contrast = TwoArmContrast(*pair_interim, flavor)
    z11 = ctx.sign * contrast.z(s1)
    x2 = c2 = None
    s2 = s1 + 1.0
    pair_final1 = pair_final2 = pair_interim
    if ctx.c0 <= z11 < ctx.c1:
        lam_c = float(contrast.control.counting.lambda_0star(s1))
        lam_e = float(contrast.experimental.counting.lambda_0star(s1))
        x2 = lam_c - lam_e
        s2 = _rule_scalar(ctx.rule, z11, x2)
        problem = RctBoundaryProblem(
            alpha=d.alpha,
            alpha1=d.alpha1,
            c0=ctx.c0,
            w1=d.w1,
            w2=d.w2,
            s1=s1,
            n_c1=pair_interim[0].n,
            n_e1=pair_interim[1].n,
            lambda0star_c1=lam_c,
            lambda0star_e1=lam_e,
            lhat_c=_scaled_lhat_closure(contrast, "control", ctx.sign),
            lhat_e=_scaled_lhat_closure(contrast, "experimental", ctx.sign),
            varsigma=_increment_sd_closure(contrast, s1),
            vhat_c=contrast.control.theta_bracket(s1),
            vhat_e=contrast.experimental.theta_bracket(s1),
            sigma1=math.sqrt(contrast.sigma2(s1)),
            rule=ctx.rule,
        )
        c2 = solve_c2_cells(problem).c2
        final_cal = _final_calendar(ctx, s2)
        final1 = administrative_censor(cohort, final_cal, stage=1)
        final2 = administrative_censor(cohort, final_cal, stage=2)
        pair_final1 = (final1.for_arm("control"), final1.for_arm("experimental"))
        pair_final2 = (final2.for_arm("control"), final2.for_arm("experimental"))
    design = TwoStageDesign(ctx.c0, ctx.c1, 0.0 if c2 is None else c2, d.w1, d.w2, d.orientation)
    rec = run_rct_two_stage(design, flavor, pair_interim, pair_final1, pair_final2, s1, s2)
    rec.update(rep=idx, x2=x2, c2=c2, reject=int(rec["decision_final"] == "reject"))
    return rec


def _replicate_joint(ctx: _Context, cohort, idx: int) -> dict:
    d = ctx.config.design
    s1 = d.s1
    interim = administrative_censor(cohort, ctx.timeline.interim_calendar, stage=1)
    js = JointStatistics(interim, ctx.reference)
    p1 = ctx.minp.min_p(
        stats.norm.cdf(js.standardized("pfs", s1)), stats.norm.cdf(js.standardized("os", s1)), stage=1
    )
    s2 = ctx.joint_rule(p1)
    final1 = final2 = interim
    continuing = d.alpha1 < p1 <= d.alpha0
    if continuing:
        final_cal = _final_calendar(ctx, s2)
        final1 = administrative_censor(cohort, final_cal, stage=1)
        final2 = administrative_censor(cohort, final_cal, stage=2)
    rec = run_joint_two_stage(ctx.reference, ctx.minp, interim, final1, final2, s1, s2)
    rec.update(
        rep=idx,
        s2=s2 if continuing else None,
        reject=int(rec["decision_final"] == "reject"),
    )
    return rec


def _replicate_multistate(ctx: _Context, cohort, idx: int) -> dict:
    d = ctx.config.design
    ms = ctx.config.multistate
    g, h = ms.component
    s, t0 = ms.window_start, d.s1
    interim = administrative_censor(cohort, ctx.timeline.interim_calendar, stage=1)
    psi0 = float(
        aalen_johansen(snapshot_to_log(interim.for_arm("experimental")), s, t0).matrix[g, h]
        - aalen_johansen(snapshot_to_log(interim.for_arm("control")), s, t0).matrix[g, h]
    )
    t_mod = ctx.ms_rule(psi0)
    final = administrative_censor(cohort, _final_calendar(ctx, t_mod))
    result = adaptive_transition_test(
        control=snapshot_to_log(final.for_arm("control")),
        experimental=snapshot_to_log(final.for_arm("experimental")),
        component=ms.component,
        window=(s, ms.horizon),
        t0=t0,
        interim_sizes=(ctx.stage_sizes["control"][0], ctx.stage_sizes["experimental"][0]),
        planning_q=ctx.planning,
        alpha=d.alpha,
        t_prime=t_mod,
    )
    return {
        "rep": idx,
        "psi_interim": result.psi_interim,
        "t_mod": t_mod,
        "psi_final": result.psi_final,
        "c": result.c,
        "c_prime": result.c_prime,
        "reject": int(result.reject),
    }


def _os_logrank_terms(snapshot, reference, s: float) -> tuple:
    """Observed deaths by patient time s and their reference compensator."""
    end = np.where(snapshot.death_ind, snapshot.death_time, snapshot.cens_time)
    observed = float(np.sum(snapshot.death_ind & (end <= s)))
    expected = float(np.sum(reference.lambda_os(np.minimum(end, s))))
    return observed, expected


def _replicate_naive(ctx: _Context, cohort, idx: int) -> dict:
    d = ctx.config.design
    s1 = d.s1
    interim = administrative_censor(cohort, ctx.timeline.interim_calendar, stage=1)
    o1, e1 = _os_logrank_terms(interim, ctx.reference, s1)
    if e1 <= 0:
        raise DegenerateInterimError(f"no expected deaths by s1={s1}")
    z11 = ctx.sign * (o1 - e1) / math.sqrt(e1)
    rec = {
        "rep": idx, "z11": z11, "x2": None, "decision_stage1": "continue", "s2": None,
        "c2": None, "z12": None, "z2": None, "z_combined": None, "decision_final": None,
    }
    if z11 >= ctx.c1:
        rec.update(decision_stage1="reject", decision_final="reject")
    elif z11 < ctx.c0:
        rec.update(decision_stage1="futility", decision_final="accept")
    else:
        x2 = float(CohortCounting(interim).lambda_0star(s1))
        s2 = _rule_scalar(ctx.rule, z11, x2)
        final_cal = _final_calendar(ctx, s2)
        final1 = administrative_censor(cohort, final_cal, stage=1)
        final2 = administrative_censor(cohort, final_cal, stage=2)
        o1f, e1f = _os_logrank_terms(final1, ctx.reference, s1)
        if abs(o1f - o1) > 1e-9 or abs(e1f - e1) > 1e-9:
            raise ProtocolViolationError("stage-one data changed between the interim and final look")
        o2, e2 = _os_logrank_terms(final1, ctx.reference, s2)
        if e2 - e1 <= 0:
            raise NonIncreasingInformationError(f"no expected deaths accrued on ({s1}, {s2}]")
        z12 = ctx.sign * ((o2 - o1) - (e2 - e1)) / math.sqrt(e2 - e1)
        o2s, e2s = _os_logrank_terms(final2, ctx.reference, s2)
        if e2s <= 0:
            raise DegenerateInterimError(f"no expected stage-two deaths by s2={s2}")
        z2 = ctx.sign * (o2s - e2s) / math.sqrt(e2s)
        z_comb = d.w1 * z12 + d.w2 * z2
        rec.update(
            x2=x2, s2=s2, c2=ctx.naive_c2, z12=z12, z2=z2, z_combined=z_comb,
            decision_final="reject" if z_comb >= ctx.naive_c2 else "accept",
        )
    rec["reject"] = int(rec["decision_final"] == "reject")
    return rec


# ---------------------------------------------------------------------------
# diagnostics replication bodies

_DIAG_COLUMNS = {
    "joint": (
        "rep", "psi_pfs_1", "psi_os_1", "psi_pfs_2", "psi_os_2",
        "var_pfs_1", "var_os_1", "var_pfs_2", "var_os_2",
        "z_pfs_1", "z_os_1", "z_pfs_inc", "z_os_inc",
    ),
    "single_arm_os": ("rep", "psi_1", "psi_2", "var_1", "var_2", "z_1", "z_inc", "z_inc_comp"),
    "rct_os": ("rep", "dpsi_1", "dpsi_2", "var_1", "var_2", "z_1", "z_inc", "z_inc_comp"),
    "rct_gap": ("rep", "dpsi_1", "dpsi_2", "var_1", "var_2", "z_1", "z_inc", "z_inc_comp"),
    "naive_logrank": ("rep", "ome_1", "ome_2", "e_1", "e_2", "z_1", "z_inc"),
    "multistate": ("rep", "psi_t0", "psi_t", "var_t0", "var_t", "cross_plug"),
}

_DIAG_PLAN = {
    "joint": {
        "mean_zero": ("psi_pfs_1", "psi_os_1", "psi_pfs_2", "psi_os_2", "z_pfs_1", "z_os_1", "z_pfs_inc", "z_os_inc"),
        "variance": {
            "pfs_1": ("psi_pfs_1", "psi_pfs_1", "var_pfs_1"),
            "os_1": ("psi_os_1", "psi_os_1", "var_os_1"),
            "pfs_2": ("psi_pfs_2", "psi_pfs_2", "var_pfs_2"),
            "os_2": ("psi_os_2", "psi_os_2", "var_os_2"),
        },
        "correlations": {"pfs": ("z_pfs_1", "z_pfs_inc"), "os": ("z_os_1", "z_os_inc")},
        "normality": ("z_pfs_1", "z_os_1", "z_pfs_inc", "z_os_inc"),
    },
    "single_arm_os": {
        "mean_zero": ("psi_1", "psi_2", "z_1", "z_inc", "z_inc_comp"),
        "variance": {"look_1": ("psi_1", "psi_1", "var_1"), "look_2": ("psi_2", "psi_2", "var_2")},
        "correlations": {"raw": ("z_1", "z_inc"), "compensated": ("z_1", "z_inc_comp")},
        "normality": ("z_1", "z_inc_comp"),
    },
    "rct_os": {
        "mean_zero": ("dpsi_1", "dpsi_2", "z_1", "z_inc", "z_inc_comp"),
        "variance": {"look_1": ("dpsi_1", "dpsi_1", "var_1"), "look_2": ("dpsi_2", "dpsi_2", "var_2")},
        "correlations": {"raw": ("z_1", "z_inc"), "compensated": ("z_1", "z_inc_comp")},
        "normality": ("z_1", "z_inc_comp"),
    },
    "naive_logrank": {
        "mean_zero": ("ome_1", "ome_2", "z_1", "z_inc"),
        "variance": {"look_1": ("ome_1", "ome_1", "e_1"), "look_2": ("ome_2", "ome_2", "e_2")},
        "correlations": {"raw": ("z_1", "z_inc")},
        "normality": ("z_1", "z_inc"),
    },
    "multistate": {
        "mean_zero": ("psi_t0", "psi_t"),
        "variance": {
            "t0": ("psi_t0", "psi_t0", "var_t0"),
            "t": ("psi_t", "psi_t", "var_t"),
            "cross": ("psi_t0", "psi_t", "cross_plug"),
        },
        "correlations": {},
        "normality": ("psi_t0", "psi_t"),
    },
}
_DIAG_PLAN["rct_gap"] = _DIAG_PLAN["rct_os"]


def _diag_replicate(ctx: _Context, seed, idx: int, looks: tuple) -> dict:
    rng = np.random.default_rng(seed)
    cohort = simulate_cohort(ctx.specs, ctx.timeline, ctx.stage_sizes, rng, ctx.dropout)
    l1, l2 = looks
    snap = administrative_censor(cohort, _final_calendar(ctx, l2))
    if ctx.family == "joint":
        js = JointStatistics(snap, ctx.reference)
        row = {"rep": idx}
        for tag, s in (("1", l1), ("2", l2)):
            row[f"psi_pfs_{tag}"] = float(js.psi_pfs(s))
            row[f"psi_os_{tag}"] = float(js.psi_os(s))
            row[f"var_pfs_{tag}"] = float(js.bracket_pfs(s))
            row[f"var_os_{tag}"] = float(js.bracket_os(s))
        row["z_pfs_1"] = float(js.standardized("pfs", l1))
        row["z_os_1"] = float(js.standardized("os", l1))
        row["z_pfs_inc"] = float(js.standardized_increment("pfs", l1, l2))
        row["z_os_inc"] = float(js.standardized_increment("os", l1, l2))
        return row
    if ctx.family == "single_arm_os":
        label = next(iter(ctx.specs))
        ps = PluginStatistics(snap, ctx.reference)
        m0star = CohortCounting(snap).martingale(ctx.specs[label], "0*", l1)
        return {
            "rep": idx,
            "psi_1": float(ps.psi(l1)),
            "psi_2": float(ps.psi(l2)),
            "var_1": float(ps.sigma2(l1)),
            "var_2": float(ps.sigma2(l2)),
            "z_1": float(ps.z11(l1)),
            "z_inc": float(ps.z12(l1, l2)),
            "z_inc_comp": float(ps.compensated_z12(l1, l2, m0star)),
        }
    if ctx.family in _RCT_FLAVOR:
        contrast = TwoArmContrast(
            snap.for_arm("control"), snap.for_arm("experimental"), _RCT_FLAVOR[ctx.family]
        )
        rt = math.sqrt(contrast.n)
        return {
            "rep": idx,
            "dpsi_1": float(rt * contrast.delta_psi(l1)),
            "dpsi_2": float(rt * contrast.delta_psi(l2)),
            "var_1": float(contrast.sigma2(l1)),
            "var_2": float(contrast.sigma2(l2)),
            "z_1": float(contrast.z(l1)),
            "z_inc": float(contrast.z_increment(l1, l2)),
            "z_inc_comp": float(
                contrast.compensated_z_increment(
                    l1, l2, ctx.specs["control"], ctx.specs["experimental"]
                )
            ),
        }
    if ctx.family == "naive_logrank":
        o1, e1 = _os_logrank_terms(snap, ctx.reference, l1)
        o2, e2 = _os_logrank_terms(snap, ctx.reference, l2)
        if e1 <= 0 or e2 - e1 <= 0:
            raise DegenerateInterimError("the naive compensator does not grow between the looks")
        return {
            "rep": idx,
            "ome_1": o1 - e1,
            "ome_2": o2 - e2,
            "e_1": e1,
            "e_2": e2,
            "z_1": (o1 - e1) / math.sqrt(e1),
            "z_inc": ((o2 - o1) - (e2 - e1)) / math.sqrt(e2 - e1),
        }
    ms = ctx.config.multistate
    s, t0, t = ms.window_start, ctx.config.design.s1, ms.horizon
    row = {"rep": idx, "psi_t0": 0.0, "psi_t": 0.0, "var_t0": 0.0, "var_t": 0.0, "cross_plug": 0.0}
    for label, sign in (("experimental", 1.0), ("control", -1.0)):
        log = snapshot_to_log(snap.for_arm(label))
        est = aalen_johansen(log, s, t)
        g, h = ms.component
        row["psi_t0"] += sign * float(est.at(t0)[g, h])
        row["psi_t"] += sign * float(est.matrix[g, h])
        row["var_t0"] += q_cross_covariance(log, s, t0, t0, ms.component, ms.component) / log.n
        row["var_t"] += q_cross_covariance(log, s, t, t, ms.component, ms.component) / log.n
        row["cross_plug"] += q_cross_covariance(log, s, t0, t, ms.component, ms.component) / log.n
    return row


# ---------------------------------------------------------------------------
# execution

_CTX_CACHE: dict = {}


def _ctx_for(cfg_json: str) -> _Context:
    ctx = _CTX_CACHE.get(cfg_json)
    if ctx is None:
        ctx = _Context(ScenarioConfig.from_json(cfg_json))
        _CTX_CACHE[cfg_json] = ctx
    return ctx


def _pool_task(args) -> dict:
    cfg_json, op, idx, seed, looks = args
    ctx = _ctx_for(cfg_json)
    if op == "diagnose":
        return _diag_replicate(ctx, seed, idx, looks)
    return _replicate(ctx, seed, idx)


def _map_replications(config: ScenarioConfig, threads: int, op: str, looks=None) -> list:
    if threads < 1:
        raise InvalidConfigError("threads must be a positive integer")
    reps = config.replications
    seeds = np.random.SeedSequence(config.seed).spawn(reps + 1)[1:]
    cfg_json = config.to_json()
    args = [(cfg_json, op, i, seeds[i], looks) for i in range(reps)]
    if threads == 1:
        return [_pool_task(a) for a in args]
    _ctx_for(cfg_json)  # warm the parent cache so forked workers inherit it
    chunk = max(1, reps // (threads * 8))
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(_pool_task, args, chunksize=chunk))


def _with_scenario_context(config: ScenarioConfig, exc: SurvAdaptError) -> SurvAdaptError:
    detail = exc.args[0] if exc.args else repr(exc)
    exc.args = (f"{config.family} scenario {config.config_hash()}: {detail}",) + exc.args[1:]
    return exc


def _aggregate(records: list, columns: tuple) -> tuple:
    n = len(records)
    n_reject = sum(int(r["reject"]) for r in records)
    rate = n_reject / n
    se = math.sqrt(rate * (1.0 - rate) / n)
    means = {}
    counts = {}
    for col in columns:
        if col in ("rep", "reject"):
            continue
        numeric = [
            float(r[col])
            for r in records
            if isinstance(r[col], (int, float)) and not isinstance(r[col], bool)
        ]
        if numeric:
            means[col] = float(np.mean(numeric))
        labels = [r[col] for r in records if isinstance(r[col], str)]
        if labels:
            tally: dict = {}
            for v in labels:
                tally[v] = tally.get(v, 0) + 1
            counts[col] = {k: tally[k] for k in sorted(tally)}
    return n_reject, rate, se, means, counts


@dataclass(frozen=True)
class ExperimentResult:
    """Per-replication records plus aggregates recomputable from them."""

    config: ScenarioConfig
    columns: tuple
    records: tuple
    n_reject: int
    rejection_rate: float
    binomial_se: float
    column_means: dict
    value_counts: dict
    runtime_seconds: float
    threads: int

    def summary_dict(self, records_file: str) -> dict:
        # wall-clock and worker count stay out: summaries must be byte-identical
        return {
            "kind": "experiment-summary",
            "family": self.config.family,
            "name": self.config.name,
            "config": self.config.to_canonical(),
            "config_hash": self.config.config_hash(),
            "replications": len(self.records),
            "records_file": records_file,
            "aggregates": {
                "n_reject": self.n_reject,
                "rejection_rate": self.rejection_rate,
                "binomial_se": self.binomial_se,
                "column_means": self.column_means,
                "value_counts": self.value_counts,
            },
        }


def run_experiment(config: ScenarioConfig, threads: int = 1) -> ExperimentResult:
    """Execute every replication of a scenario and aggregate the decisions.

    Deterministic given the config (whose seed and replication count are
    part of the hash); errors raised inside a replication propagate with
    the scenario identity prefixed.
    """
    config.validate()
    start = time.perf_counter()
    try:
        records = _map_replications(config, threads, "run")
    except SurvAdaptError as exc:
        raise _with_scenario_context(config, exc)
    columns = _RECORD_COLUMNS[config.family]
    n_reject, rate, se, means, counts = _aggregate(records, columns)
    return ExperimentResult(
        config=config,
        columns=columns,
        records=tuple(records),
        n_reject=n_reject,
        rejection_rate=rate,
        binomial_se=se,
        column_means=means,
        value_counts=counts,
        runtime_seconds=time.perf_counter() - start,
        threads=threads,
    )


def naive_logrank_control(config: ScenarioConfig, threads: int = 1) -> ExperimentResult:
    """Run the deliberately wrong fixed-boundary control experiment."""
    if config.family != "naive_logrank":
        raise InvalidConfigError("the control experiment needs family 'naive_logrank'")
    return run_experiment(config, threads)


# ---------------------------------------------------------------------------
# diagnostics


@dataclass(frozen=True)
class DiagnosticsResult:
    config: ScenarioConfig
    columns: tuple
    records: tuple
    report: dict
    runtime_seconds: float
    threads: int


def _zero_intensity(config: ScenarioConfig) -> bool:
    for label in sorted(config.arms):
        spec = IllnessDeathSpec.from_dict(config.arms[label])
        for which in ("01", "02", "12"):
            if np.any(spec.rates(which) != 0):
                return False
    return True


def _diag_report(family: str, columns: dict, looks: tuple) -> dict:
    plan = _DIAG_PLAN[family]
    n = len(next(iter(columns.values()))) if columns else 0
    means = {}
    for col in plan["mean_zero"]:
        v = np.asarray(columns[col], dtype=float)
        m = float(np.mean(v))
        se = float(np.std(v, ddof=1) / math.sqrt(n)) if n > 1 else 0.0
        means[col] = {"mean": m, "se": se, "within_three_se": bool(abs(m) <= 3.0 * se)}
    variance = {}
    for name in sorted(plan["variance"]):
        ca, cb, cv = plan["variance"][name]
        a = np.asarray(columns[ca], dtype=float)
        b = np.asarray(columns[cb], dtype=float)
        empirical = float(np.cov(a, b, ddof=1)[0, 1]) if n > 1 else 0.0
        estimated = float(np.mean(np.asarray(columns[cv], dtype=float)))
        variance[name] = {
            "empirical": empirical,
            "estimated_mean": estimated,
            "ratio": None if estimated == 0.0 else empirical / estimated,
        }
    correlations = {}
    bound = 3.0 / math.sqrt(n) if n else None
    for name in sorted(plan["correlations"]):
        ca, cb = plan["correlations"][name]
        a = np.asarray(columns[ca], dtype=float)
        b = np.asarray(columns[cb], dtype=float)
        sa, sb = float(np.std(a)), float(np.std(b))
        if sa == 0.0 or sb == 0.0:
            correlations[name] = {"correlation": None, "bound": bound, "within_bound": False}
            continue
        r = float(np.corrcoef(a, b)[0, 1])
        correlations[name] = {"correlation": r, "bound": bound, "within_bound": bool(abs(r) < bound)}
    normality = {}
    for col in plan["normality"]:
        v = np.asarray(columns[col], dtype=float)
        if n < 2 or float(np.std(v)) == 0.0:
            normality[col] = {"skewness": None, "excess_kurtosis": None}
            continue
        normality[col] = {
            "skewness": float(stats.skew(v)),
            "excess_kurtosis": float(stats.kurtosis(v)),
        }
    return {
        "kind": "diagnostics-report",
        "family": family,
        "replications": n,
        "looks": list(looks),
        "degenerate": False,
        "martingale_means": means,
        "variance_consistency": variance,
        "increment_correlations": correlations,
        "normality": normality,
    }


def _resolve_looks(config: ScenarioConfig, looks) -> tuple:
    if config.family == "multistate":
        return (config.design.s1, config.multistate.horizon)
    if looks is None:
        return (config.design.s1, max(_rule_outputs(config.rule)))
    l1, l2 = (float(x) for x in looks)
    if not 0.0 < l1 < l2:
        raise InvalidConfigError("diagnostic looks must satisfy 0 < first < second")
    return (l1, l2)


def diagnostics(config: ScenarioConfig, threads: int = 1, looks=None) -> DiagnosticsResult:
    """Simulate the raw test processes and report their martingale health.

    Means, variance ratios against the plug-in estimates, stage-increment
    correlations and shape moments are computed from per-replication
    columns that are persisted alongside the report, so the report can be
    recomputed from disk. A scenario whose intensities are all zero is
    flagged degenerate instead of simulated.
    """
    config.validate()
    start = time.perf_counter()
    looks = _resolve_looks(config, looks)
    if _zero_intensity(config):
        report = {
            "kind": "diagnostics-report",
            "family": config.family,
            "replications": 0,
            "looks": list(looks),
            "degenerate": True,
            "reason": "every transition intensity is zero; no events can occur",
            "martingale_means": {},
            "variance_consistency": {},
            "increment_correlations": {},
            "normality": {},
        }
        return DiagnosticsResult(
            config=config, columns=_DIAG_COLUMNS[config.family], records=(),
            report=report, runtime_seconds=time.perf_counter() - start, threads=threads,
        )
    try:
        records = _map_replications(config, threads, "diagnose", looks)
    except SurvAdaptError as exc:
        raise _with_scenario_context(config, exc)
    columns = _DIAG_COLUMNS[config.family]
    arrays = {c: np.asarray([r[c] for r in records], dtype=float) for c in columns if c != "rep"}
    report = _diag_report(config.family, arrays, looks)
    return DiagnosticsResult(
        config=config, columns=columns, records=tuple(records),
        report=report, runtime_seconds=time.perf_counter() - start, threads=threads,
    )


# ---------------------------------------------------------------------------
# persistence


def _format_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, str):
        return value
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return format(float(value), ".17g")


def records_to_csv(records, columns: tuple) -> str:
    lines = [",".join(columns)]
    for rec in records:
        lines.append(",".join(_format_cell(rec[c]) for c in columns))
    return "\n".join(lines) + "\n"


def _parse_cell(cell: str):
    if cell == "":
        return None
    try:
        return int(cell)
    except ValueError:
        pass
    try:
        return float(cell)
    except ValueError:
        return cell


def records_from_csv(text: str) -> tuple:
    lines = [ln for ln in text.splitlines() if ln]
    if not lines:
        raise InvalidConfigError("records file is empty")
    columns = tuple(lines[0].split(","))
    records = []
    for ln in lines[1:]:
        cells = ln.split(",")
        if len(cells) != len(columns):
            raise InvalidConfigError(f"records row has {len(cells)} cells, expected {len(columns)}")
        records.append({c: _parse_cell(v) for c, v in zip(columns, cells)})
    return columns, records


def _dump_json(payload: dict) -> str:
    return json.dumps(payload, sort_keys=True, indent=2, allow_nan=False) + "\n"


def write_result(result: ExperimentResult, out_dir) -> tuple:
    """Persist one experiment as a records file plus a summary file.

    Both files are named by the effective config hash and contain nothing
    run-dependent beyond the records, so repeated runs are byte-identical.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    base = f"{result.config.family}-{result.config.config_hash()}"
    records_name = f"{base}-records.csv"
    (out / records_name).write_text(records_to_csv(result.records, result.columns))
    summary_path = out / f"{base}-summary.json"
    summary_path.write_text(_dump_json(result.summary_dict(records_name)))
    return out / records_name, summary_path


def write_diagnostics(result: DiagnosticsResult, out_dir) -> tuple:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    base = f"{result.config.family}-{result.config.config_hash()}-diagnostics"
    records_name = f"{base}-records.csv"
    (out / records_name).write_text(records_to_csv(result.records, result.columns))
    payload = dict(result.report)
    payload["config"] = result.config.to_canonical()
    payload["config_hash"] = result.config.config_hash()
    payload["records_file"] = records_name
    report_path = out / f"{base}-report.json"
    report_path.write_text(_dump_json(payload))
    return out / records_name, report_path


def _close(a, b, tol=1e-12) -> bool:
    if a is None or b is None:
        return a is None and b is None
    return abs(float(a) - float(b)) <= tol


def verify_files(summary_path) -> dict:
    """Recompute a persisted summary from its records and compare.

    Returns {"ok": bool, "mismatches": [...]}; any disagreement between the
    stored aggregates (or report) and the values recomputed from the
    records file is listed, as is a config hash that no longer matches the
    embedded config.
    """
    summary_path = Path(summary_path)
    data = json.loads(summary_path.read_text())
    mismatches = []
    config = ScenarioConfig.from_dict(data["config"])
    if config.config_hash() != data.get("config_hash"):
        mismatches.append("config_hash does not match the embedded config")
    kind = data.get("kind")
    if kind == "experiment-summary":
        columns, records = records_from_csv((summary_path.parent / data["records_file"]).read_text())
        if tuple(columns) != _RECORD_COLUMNS[config.family]:
            mismatches.append("records file has unexpected columns")
        if len(records) != data["replications"]:
            mismatches.append(f"summary claims {data['replications']} replications, records hold {len(records)}")
        if records:
            n_reject, rate, se, means, counts = _aggregate(records, columns)
            agg = data["aggregates"]
            if n_reject != agg["n_reject"]:
                mismatches.append(f"n_reject recomputes to {n_reject}, stored {agg['n_reject']}")
            if not _close(rate, agg["rejection_rate"]):
                mismatches.append("rejection_rate does not recompute from the records")
            if not _close(se, agg["binomial_se"]):
                mismatches.append("binomial_se does not recompute from the records")
            stored_means = agg["column_means"]
            if sorted(means) != sorted(stored_means):
                mismatches.append("column_means keys differ")
            else:
                for k in means:
                    if not _close(means[k], stored_means[k]):
                        mismatches.append(f"column mean {k!r} does not recompute")
            if counts != agg["value_counts"]:
                mismatches.append("value_counts do not recompute from the records")
    elif kind == "diagnostics-report":
        columns, records = records_from_csv((summary_path.parent / data["records_file"]).read_text())
        if data.get("degenerate"):
            if records:
                mismatches.append("degenerate report should carry no records")
        else:
            arrays = {c: np.asarray([r[c] for r in records], dtype=float) for c in columns if c != "rep"}
            recomputed = _diag_report(config.family, arrays, tuple(data["looks"]))
            stored = {k: data[k] for k in recomputed}
            if json.loads(_dump_json(recomputed)) != stored:
                mismatches.append("diagnostics report does not recompute from the records")
    else:
        mismatches.append(f"unknown summary kind {kind!r}")
    return {
        "ok": not mismatches,
        "kind": kind,
        "family": config.family,
        "config_hash": data.get("config_hash"),
        "mismatches": mismatches,
    }


# ---------------------------------------------------------------------------
# design-time helpers


def build_cohort(config: ScenarioConfig, seed=None):
    """One full trial draw under the scenario, for inspection or export."""
    config.validate()
    if seed is None:
        seed = np.random.SeedSequence(config.seed).spawn(1)[0]
    rng = np.random.default_rng(seed)
    specs = {k: IllnessDeathSpec.from_dict(v) for k, v in config.arms.items()}
    timeline = TrialTimeline(config.accrual.stage1, config.accrual.stage2, 0.0, config.design.s1)
    return simulate_cohort(specs, timeline, config.stage_sizes, rng, config.accrual.dropout_rate)


def design_report(config: ScenarioConfig) -> dict:
    """Boundary constants for one scenario, from a deterministic pilot draw.

    The adaptive families solve their stage-two bound on a pilot interim
    drawn from the scenario's own seed; the fixed-bound and combination
    families report their closed-form constants.
    """
    config.validate()
    d = config.design
    out = {"kind": "design-report", "family": config.family, "config_hash": config.config_hash()}
    if config.family == "joint":
        minp = _build_minp_design(d)
        out.update(
            alpha=d.alpha, alpha1=d.alpha1, alpha0=d.alpha0, cef=d.cef,
            cef_at_alpha1=minp.cef(d.alpha1), cef_at_alpha0=minp.cef(d.alpha0),
        )
        return out
    if config.family == "multistate":
        ctx = _ctx_for(config.to_json())
        ms = config.multistate
        v11 = sum(
            ctx.planning[label](ms.horizon, ms.horizon) / config.stage_sizes[label][0]
            for label in ("control", "experimental")
        )
        out.update(alpha=d.alpha, horizon=ms.horizon, planned_bound=float(stats.norm.isf(d.alpha) * math.sqrt(v11)))
        return out
    ctx = _ctx_for(config.to_json())
    out.update(alpha=d.alpha, alpha1=d.alpha1, c1=ctx.c1, c0=ctx.c0)
    if config.family == "naive_logrank":
        out["c2"] = ctx.naive_c2
        out["method"] = "fixed-normal-increment"
        return out
    cohort = build_cohort(config)
    interim = administrative_censor(cohort, ctx.timeline.interim_calendar, stage=1)
    if config.family == "single_arm_os":
        summ = interim_summary(interim, ctx.reference, d.s1)
        z11 = ctx.sign * summ.z11
        problem = SingleBoundaryProblem(
            alpha=d.alpha, alpha1=d.alpha1, c0=ctx.c0, w1=d.w1, w2=d.w2, s1=d.s1,
            n_stage1=interim.n, lambda0star_s1=summ.lambda0star_s1,
            delta_f=summ.delta_f if ctx.sign > 0 else _negated(summ.delta_f),
            varsigma=summ.sigma.varsigma,
            cov_z_m=ctx.sign * summ.sigma.cov_z_m,
            v33=summ.sigma.v33, rule=ctx.rule,
        )
    else:
        pair = (interim.for_arm("control"), interim.for_arm("experimental"))
        contrast = TwoArmContrast(*pair, _RCT_FLAVOR[config.family])
        z11 = ctx.sign * contrast.z(d.s1)
        problem = RctBoundaryProblem(
            alpha=d.alpha, alpha1=d.alpha1, c0=ctx.c0, w1=d.w1, w2=d.w2, s1=d.s1,
            n_c1=pair[0].n, n_e1=pair[1].n,
            lambda0star_c1=float(contrast.control.counting.lambda_0star(d.s1)),
            lambda0star_e1=float(contrast.experimental.counting.lambda_0star(d.s1)),
            lhat_c=_scaled_lhat_closure(contrast, "control", ctx.sign),
            lhat_e=_scaled_lhat_closure(contrast, "experimental", ctx.sign),
            varsigma=_increment_sd_closure(contrast, d.s1),
            vhat_c=contrast.control.theta_bracket(d.s1),
            vhat_e=contrast.experimental.theta_bracket(d.s1),
            sigma1=math.sqrt(contrast.sigma2(d.s1)),
            rule=ctx.rule,
        )
    solution = solve_c2_cells(problem)
    out.update(
        pilot_z11=float(z11), c2=solution.c2, achieved_level=solution.achieved_level,
        method=solution.integration_meta.get("method"),
        evaluations=solution.integration_meta.get("evaluations"),
    )
    return out
