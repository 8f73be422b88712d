"""Declarative parametric reward functions over named execution features.

A reward function is a weighted sum of terms drawn from a closed grammar
(feature, negated feature, gated constants, thresholded negated feature).
Every numeric weight is a named parameter with an explicit domain, so the
whole function is linear in its parameter vector and can be re-evaluated
("relabeled") from stored features without re-simulation.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence, Union

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

import numpy as np

FeatureValue = Union[float, bool, None]

TERM_SUFFIXES = ("_reward", "_penalty")

TERM_KINDS = (
    "feature",
    "negated_feature",
    "gated_constant",
    "gated_negated_constant",
    "thresholded_negated_feature",
)

GATE_TESTS = ("truthy", "falsy", "gt", "ge", "lt", "le")


class RewardError(Exception):
    """Base class for reward-spec construction and evaluation failures."""


class SpecValidationError(RewardError):
    """Raised when a reward spec violates a structural rule."""

    def __init__(self, problems: Sequence[str]):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class MissingFeatureError(RewardError):
    """A term referenced a feature that is missing or absent (None)."""

    def __init__(self, feature: str, term: str, step: int | None = None):
        self.feature = feature
        self.term = term
        self.step = step
        where = f" at step {step}" if step is not None else ""
        super().__init__(f"feature '{feature}' required by term '{term}' is unavailable{where}")


class ParamOutOfDomainError(RewardError):
    def __init__(self, name: str, value: float, lo: float, hi: float):
        self.name = name
        super().__init__(f"parameter '{name}' = {value!r} outside active domain [{lo}, {hi}]")


@dataclass(frozen=True)
class FeatureRecord:
    """Named feature values observed at one execution step.

    Values are real scalars, booleans, or None (absent). Absent is distinct
    from zero: it renders as "None" in execution descriptions and is only
    tolerated inside gated terms whose gate is off.
    """

    values: Mapping[str, FeatureValue]
    step: int = 0

    def __post_init__(self):
        for name in self.values:
            if not name:
                raise RewardError("feature names must be nonempty")
        if self.step < 0:
            raise RewardError("step index must be >= 0")

    def get(self, name: str) -> FeatureValue:
        try:
            return self.values[name]
        except KeyError:
            raise MissingFeatureError(name, term="<lookup>") from None

    def names(self) -> tuple[str, ...]:
        return tuple(self.values)


@dataclass(frozen=True)
class Trajectory:
    """One finite-horizon execution: per-step states, actions and features."""

    tid: int
    states: tuple[tuple[float, ...], ...]
    actions: tuple[tuple[float, ...], ...]
    features: tuple[FeatureRecord, ...]
    success: bool

    def __post_init__(self):
        if len(self.features) < 1:
            raise RewardError("trajectory must have at least one step")
        if not (len(self.states) == len(self.features) == len(self.actions)):
            raise RewardError("states, actions and features must have equal length")

    @property
    def horizon(self) -> int:
        return len(self.features)

    @property
    def last_features(self) -> FeatureRecord:
        return self.features[-1]


@dataclass(frozen=True)
class ParamDomain:
    """Full [lo, hi] parameter domain plus a possibly-restricted active window."""

    lo: float
    hi: float
    active_lo: float = None  # type: ignore[assignment]
    active_hi: float = None  # type: ignore[assignment]

    def __post_init__(self):
        if self.active_lo is None:
            object.__setattr__(self, "active_lo", self.lo)
        if self.active_hi is None:
            object.__setattr__(self, "active_hi", self.hi)
        if not (self.lo < self.hi):
            raise SpecValidationError([f"degenerate domain [{self.lo}, {self.hi}]"])
        if not (self.lo <= self.active_lo <= self.active_hi <= self.hi):
            raise SpecValidationError(
                [f"active window [{self.active_lo}, {self.active_hi}] not inside [{self.lo}, {self.hi}]"]
            )

    @property
    def span(self) -> float:
        return self.hi - self.lo

    def contains(self, value: float, active: bool = True) -> bool:
        lo, hi = (self.active_lo, self.active_hi) if active else (self.lo, self.hi)
        return lo <= value <= hi

    def restricted_above(self, value: float) -> "ParamDomain":
        """Active window (value, hi]; the open edge is a hair above `value`."""
        eps = 1e-9 * self.span
        lo = min(value + eps, self.hi)
        return ParamDomain(self.lo, self.hi, active_lo=lo, active_hi=self.hi)

    def restricted_below(self, value: float) -> "ParamDomain":
        """Active window [lo, value); the open edge is a hair below `value`."""
        eps = 1e-9 * self.span
        hi = max(value - eps, self.lo)
        return ParamDomain(self.lo, self.hi, active_lo=self.lo, active_hi=hi)


@dataclass(frozen=True)
class ParamVector:
    """Ordered named parameter values, each paired with its domain.

    Order is fixed at construction and identical everywhere in a run; all
    normalization and distance computations rely on it.
    """

    names: tuple[str, ...]
    values: tuple[float, ...]
    domains: tuple[ParamDomain, ...]

    def __post_init__(self):
        if not (len(self.names) == len(self.values) == len(self.domains)):
            raise RewardError("names, values and domains must align")

    def __len__(self) -> int:
        return len(self.names)

    def __getitem__(self, name: str) -> float:
        try:
            return self.values[self.names.index(name)]
        except ValueError:
            raise KeyError(name) from None

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.names, self.values))

    def replace(self, **updates: float) -> "ParamVector":
        unknown = set(updates) - set(self.names)
        if unknown:
            raise KeyError(f"unknown parameters: {sorted(unknown)}")
        vals = tuple(updates.get(n, v) for n, v in zip(self.names, self.values))
        return ParamVector(self.names, vals, self.domains)

    def with_values(self, values: Iterable[float]) -> "ParamVector":
        vals = tuple(float(v) for v in values)
        return ParamVector(self.names, vals, self.domains)

    def distance_to(self, other: "ParamVector") -> float:
        """Euclidean distance in raw (unnormalized) parameter units."""
        return math.sqrt(sum((a - b) ** 2 for a, b in zip(self.values, other.values)))

    def validate_active(self, domains: Mapping[str, ParamDomain] | None = None) -> None:
        for name, value, dom in zip(self.names, self.values, self.domains):
            if domains is not None and name in domains:
                dom = domains[name]
            if not dom.contains(value, active=True):
                raise ParamOutOfDomainError(name, value, dom.active_lo, dom.active_hi)


@dataclass(frozen=True)
class GateCondition:
    """One atomic condition of a term gate; gates AND their conditions."""

    feature: str
    test: str
    value: float | None = None

    def __post_init__(self):
        if self.test not in GATE_TESTS:
            raise SpecValidationError([f"unknown gate test '{self.test}'"])
        if self.test in ("gt", "ge", "lt", "le") and self.value is None:
            raise SpecValidationError([f"gate test '{self.test}' on '{self.feature}' needs a value"])

    def holds(self, features: FeatureRecord, term: str) -> bool:
        v = features.values.get(self.feature, None)
        if v is None:
            if self.feature not in features.values:
                raise MissingFeatureError(self.feature, term)
            raise MissingFeatureError(self.feature, term)
        if self.test == "truthy":
            return bool(v)
        if self.test == "falsy":
            return not bool(v)
        x = float(v)
        if self.test == "gt":
            return x > self.value
        if self.test == "ge":
            return x >= self.value
        if self.test == "lt":
            return x < self.value
        return x <= self.value


@dataclass(frozen=True)
class RewardTerm:
    """One weighted term. The weight parameter multiplies a base expression.

    Base expressions by kind:
      feature                       f
      negated_feature              -f
      gated_constant                c if gate else 0
      gated_negated_constant       -c if gate else 0
      thresholded_negated_feature  -f if f > threshold else 0
    """

    name: str
    weight_param: str
    kind: str
    feature: str | None = None
    constant: float = 1.0
    threshold: float | None = None
    gate: tuple[GateCondition, ...] = ()

    def __post_init__(self):
        problems = []
        if not self.name.endswith(TERM_SUFFIXES):
            problems.append(f"term '{self.name}' must end with '_reward' or '_penalty'")
        if self.kind not in TERM_KINDS:
            problems.append(f"term '{self.name}' has unknown kind '{self.kind}'")
        if self.kind in ("feature", "negated_feature", "thresholded_negated_feature"):
            if self.feature is None:
                problems.append(f"term '{self.name}' of kind '{self.kind}' needs a feature")
        if self.kind == "thresholded_negated_feature" and self.threshold is None:
            problems.append(f"term '{self.name}' needs a threshold")
        if self.kind in ("gated_constant", "gated_negated_constant") and not self.gate:
            problems.append(f"term '{self.name}' of kind '{self.kind}' needs a gate")
        if problems:
            raise SpecValidationError(problems)

    def referenced_features(self) -> tuple[str, ...]:
        names = []
        if self.feature is not None:
            names.append(self.feature)
        names.extend(c.feature for c in self.gate)
        return tuple(dict.fromkeys(names))

    def base_value(self, features: FeatureRecord) -> float:
        """The term value before weighting. Gates short-circuit left to right,
        so an absent feature behind an off gate never raises."""
        if self.kind in ("gated_constant", "gated_negated_constant"):
            for cond in self.gate:
                if not cond.holds(features, self.name):
                    return 0.0
            return self.constant if self.kind == "gated_constant" else -self.constant
        v = features.values.get(self.feature, None)
        if v is None:
            raise MissingFeatureError(self.feature, self.name, features.step)
        x = float(v)
        if self.kind == "feature":
            return x
        if self.kind == "negated_feature":
            return -x
        # thresholded_negated_feature
        return -x if x > self.threshold else 0.0


@dataclass(frozen=True)
class ParamSpec:
    name: str
    default: float
    domain: ParamDomain


@dataclass(frozen=True)
class RewardSpec:
    """A named collection of reward terms over a parameter list."""

    name: str
    terms: tuple[RewardTerm, ...]
    params: tuple[ParamSpec, ...]
    _index: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        problems = []
        seen_terms = set()
        for t in self.terms:
            if t.name in seen_terms:
                problems.append(f"duplicate term name '{t.name}'")
            seen_terms.add(t.name)
        param_names = [p.name for p in self.params]
        if len(set(param_names)) != len(param_names):
            problems.append("duplicate parameter names")
        known = set(param_names)
        for t in self.terms:
            if t.weight_param not in known:
                problems.append(f"term '{t.name}' references unknown parameter '{t.weight_param}'")
        for p in self.params:
            if not (math.isfinite(p.domain.lo) and math.isfinite(p.domain.hi)):
                problems.append(f"parameter '{p.name}' needs a finite domain")
            if not p.domain.contains(p.default, active=False):
                problems.append(f"parameter '{p.name}' default {p.default} outside its domain")
        if problems:
            raise SpecValidationError(problems)
        object.__setattr__(self, "_index", {p.name: p for p in self.params})

    @property
    def param_names(self) -> tuple[str, ...]:
        return tuple(p.name for p in self.params)

    @property
    def feature_names(self) -> tuple[str, ...]:
        names: list[str] = []
        for t in self.terms:
            names.extend(t.referenced_features())
        return tuple(dict.fromkeys(names))

    def default_params(self) -> ParamVector:
        return ParamVector(
            self.param_names,
            tuple(p.default for p in self.params),
            tuple(p.domain for p in self.params),
        )

    def make_params(self, overrides: Mapping[str, float] | None = None) -> ParamVector:
        params = self.default_params()
        return params.replace(**{k: float(v) for k, v in (overrides or {}).items()})

    def check_features_declared(self, schema: Iterable[str]) -> None:
        declared = set(schema)
        unknown = [f for f in self.feature_names if f not in declared]
        if unknown:
            raise SpecValidationError(
                [f"feature '{f}' not declared by the environment schema" for f in unknown]
            )

    def conforms(self, params: ParamVector) -> None:
        if params.names != self.param_names:
            raise RewardError(
                f"parameter vector {params.names} does not match spec parameters {self.param_names}"
            )


def evaluate_reward(spec: RewardSpec, params: ParamVector, features: FeatureRecord) -> float:
    """Weighted sum of term values on one feature record. Pure and deterministic."""
    spec.conforms(params)
    params.validate_active()
    total = 0.0
    for term in spec.terms:
        total += params[term.weight_param] * term.base_value(features)
    return total


def evaluate_return(spec: RewardSpec, params: ParamVector, traj: Trajectory) -> float:
    """Sum of per-step rewards over the trajectory's horizon.

    Accumulates one subtotal per step so that summing per-step relabels
    reproduces this value bit-exactly.
    """
    spec.conforms(params)
    params.validate_active()
    total = 0.0
    for rec in traj.features:
        step_total = 0.0
        for term in spec.terms:
            try:
                step_total += params[term.weight_param] * term.base_value(rec)
            except MissingFeatureError as err:
                raise MissingFeatureError(err.feature, err.term, rec.step) from None
        total += step_total
    return total


def relabel(features: FeatureRecord, spec: RewardSpec, new_params: ParamVector) -> float:
    """Recompute the reward for stored features under new parameters.

    Identical to evaluate_reward; exists so replay-buffer relabeling reads as
    what it is at call sites.
    """
    return evaluate_reward(spec, new_params, features)


def term_base_sums(spec: RewardSpec, traj: Trajectory) -> tuple[float, ...]:
    """Per-term base values summed over steps.

    Returns are linear in the weights, so ``dot(base_sums, weights)`` equals
    the trajectory return up to float re-association. Used by samplers that
    re-evaluate many parameter vectors against a fixed batch.
    """
    sums = [0.0] * len(spec.terms)
    for rec in traj.features:
        for i, term in enumerate(spec.terms):
            sums[i] += term.base_value(rec)
    return tuple(sums)


def base_matrix(spec: RewardSpec, trajectories: Sequence[Trajectory]) -> np.ndarray:
    """Rows of term base sums, one per trajectory; columns follow spec.params.

    Column j aggregates every term weighted by parameter j, so the matrix
    already accounts for parameters shared across terms.
    """
    idx = {name: j for j, name in enumerate(spec.param_names)}
    out = np.zeros((len(trajectories), len(spec.params)))
    for i, traj in enumerate(trajectories):
        sums = term_base_sums(spec, traj)
        for term, s in zip(spec.terms, sums):
            out[i, idx[term.weight_param]] += s
    return out


def normalize(params: ParamVector) -> np.ndarray:
    """Map parameter values onto the unit cube using the full domains."""
    out = np.empty(len(params))
    for i, (v, d) in enumerate(zip(params.values, params.domains)):
        if not d.contains(v, active=False):
            raise ParamOutOfDomainError(params.names[i], v, d.lo, d.hi)
        out[i] = (v - d.lo) / d.span
    return out


def denormalize(template: ParamVector, unit: np.ndarray) -> ParamVector:
    """Exact inverse of normalize, using the template's domains and order."""
    vals = tuple(d.lo + float(u) * d.span for u, d in zip(unit, template.domains))
    return template.with_values(vals)


# ---------------------------------------------------------------------------
# Serialization: TOML (canonical, matches the shipped spec files) and JSON.


def spec_from_dict(data: Mapping, name: str = "spec") -> RewardSpec:
    problems: list[str] = []
    params: list[ParamSpec] = []
    raw_params = data.get("parameters", {})
    if not isinstance(raw_params, Mapping):
        raise SpecValidationError(["[parameters] must be a table of name -> {default, min, max}"])
    for pname, p in raw_params.items():
        try:
            params.append(
                ParamSpec(
                    pname,
                    float(p["default"]),
                    ParamDomain(float(p["min"]), float(p["max"])),
                )
            )
        except (KeyError, TypeError, ValueError) as err:
            problems.append(f"parameter '{pname}': {err}")
        except SpecValidationError as err:
            problems.extend(f"parameter '{pname}': {p}" for p in err.problems)
    terms: list[RewardTerm] = []
    for t in data.get("terms", []):
        try:
            gate = tuple(
                GateCondition(g["feature"], g["test"], g.get("value")) for g in t.get("gate", [])
            )
            terms.append(
                RewardTerm(
                    name=t["name"],
                    weight_param=t["weight_param"],
                    kind=t["kind"],
                    feature=t.get("feature"),
                    constant=float(t.get("constant", 1.0)),
                    threshold=t.get("threshold"),
                    gate=gate,
                )
            )
        except (KeyError, TypeError, ValueError) as err:
            problems.append(f"term {t.get('name', '<unnamed>')!r}: {err}")
        except SpecValidationError as err:
            problems.extend(err.problems)
    if problems:
        raise SpecValidationError(problems)
    return RewardSpec(data.get("name", name), tuple(terms), tuple(params))


def spec_to_dict(spec: RewardSpec) -> dict:
    data: dict = {"name": spec.name, "parameters": {}, "terms": []}
    for p in spec.params:
        data["parameters"][p.name] = {"default": p.default, "min": p.domain.lo, "max": p.domain.hi}
    for t in spec.terms:
        entry: dict = {"name": t.name, "weight_param": t.weight_param, "kind": t.kind}
        if t.feature is not None:
            entry["feature"] = t.feature
        if t.kind in ("gated_constant", "gated_negated_constant"):
            entry["constant"] = t.constant
        if t.threshold is not None:
            entry["threshold"] = t.threshold
        if t.gate:
            entry["gate"] = [
                {"feature": c.feature, "test": c.test, **({"value": c.value} if c.value is not None else {})}
                for c in t.gate
            ]
        data["terms"].append(entry)
    return data


def _toml_scalar(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, int):
        return str(v)
    return json.dumps(v)


def _toml_inline(d: Mapping) -> str:
    return "{" + ", ".join(f"{k} = {_toml_scalar(v)}" for k, v in d.items()) + "}"


def spec_to_toml(spec: RewardSpec) -> str:
    """Render a spec in the reward-spec file format (round-trips via tomllib)."""
    data = spec_to_dict(spec)
    lines = [f"name = {_toml_scalar(data['name'])}", ""]
    for pname, p in data["parameters"].items():
        lines.append(f"[parameters.{pname}]")
        for k, v in p.items():
            lines.append(f"{k} = {_toml_scalar(v)}")
        lines.append("")
    for t in data["terms"]:
        lines.append("[[terms]]")
        for k, v in t.items():
            if k == "gate":
                lines.append("gate = [" + ", ".join(_toml_inline(g) for g in v) + "]")
            else:
                lines.append(f"{k} = {_toml_scalar(v)}")
        lines.append("")
    return "\n".join(lines)


def load_spec(path: str | Path) -> RewardSpec:
    path = Path(path)
    text = path.read_text()
    if path.suffix == ".json":
        data = json.loads(text)
    else:
        data = tomllib.loads(text)
    return spec_from_dict(data, name=path.stem.replace("_", "-"))


def spec_to_json(spec: RewardSpec) -> str:
    return json.dumps(spec_to_dict(spec), indent=2)


BUILTIN_SPECS = ("open-drawer", "push-chair", "pick-carry")


def builtin_spec(name: str) -> RewardSpec:
    if name not in BUILTIN_SPECS:
        raise KeyError(f"unknown built-in reward spec '{name}' (have {', '.join(BUILTIN_SPECS)})")
    fname = name.replace("-", "_") + ".toml"
    text = resources.files("rankalign.specs").joinpath(fname).read_text()
    return spec_from_dict(tomllib.loads(text), name=name)
