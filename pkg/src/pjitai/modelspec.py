"""Data-adaptive logistic-regression term lists.

A :class:`ModelSpec` is an ordered list of :class:`ModelTerm` objects plus
the categorical encoding the terms expand against.  Terms are symbolic
(``main(weather)``, ``treatment_x(time_of_day)`` ...) and each carries a
study-period round: 0 for all data, 1 for terms multiplied by S1 and 2 for
terms multiplied by S2.
"""
from __future__ import annotations

import itertools
import json
from collections import Counter
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .domain import UNKNOWN, CovariateSchema, DecisionRecord

FIXED = "fixed"
RANDOM = "random"

# number of non-constant factors before the period indicator
_BASE_ORDER = {
    "intercept": 0,
    "main": 1,
    "two_way": 2,
    "treatment": 1,
    "treatment_x": 2,
    "treatment_xx": 3,
    "baseline_main": 1,
    "baseline_x_treatment": 2,
    "baseline_three_way": 3,
}
_KIND_RANK = {k: i for i, k in enumerate(_BASE_ORDER)}
_N_FACTORS = {
    "intercept": 0,
    "main": 1,
    "two_way": 2,
    "treatment": 0,
    "treatment_x": 1,
    "treatment_xx": 2,
    "baseline_main": 1,
    "baseline_x_treatment": 1,
    "baseline_three_way": 2,
}
RANDOM_KINDS = frozenset({"intercept", "main", "treatment", "treatment_x"})
TREATMENT_KINDS = frozenset(
    {"treatment", "treatment_x", "treatment_xx", "baseline_x_treatment", "baseline_three_way"}
)


@dataclass(frozen=True)
class ModelTerm:
    kind: str
    factors: tuple[str, ...] = ()
    period_round: int = 0
    scope: str = FIXED

    def __post_init__(self):
        object.__setattr__(self, "factors", tuple(self.factors))
        if self.kind not in _BASE_ORDER:
            raise ValueError(f"unknown term kind {self.kind!r}")
        if len(self.factors) != _N_FACTORS[self.kind]:
            raise ValueError(f"{self.kind} takes {_N_FACTORS[self.kind]} factors, got {self.factors}")
        if self.period_round not in (0, 1, 2):
            raise ValueError(f"period_round must be 0, 1 or 2, got {self.period_round}")
        if self.scope not in (FIXED, RANDOM):
            raise ValueError(f"scope must be fixed or random, got {self.scope!r}")
        if self.scope == RANDOM and self.kind not in RANDOM_KINDS:
            raise ValueError(f"{self.kind} cannot have participant-random scope")

    @property
    def interaction_order(self) -> int:
        n = _BASE_ORDER[self.kind] + (1 if self.period_round else 0)
        return max(n, 1)

    @property
    def has_treatment(self) -> bool:
        return self.kind in TREATMENT_KINDS

    @property
    def label(self) -> str:
        inner = ",".join(self.factors)
        s = f"{self.kind}({inner})" if inner else self.kind
        if self.period_round:
            s += f"*S{self.period_round}"
        return s

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "factors": list(self.factors),
            "period_round": self.period_round,
            "scope": self.scope,
            "interaction_order": self.interaction_order,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelTerm":
        return cls(d["kind"], tuple(d["factors"]), int(d["period_round"]), d["scope"])


@dataclass(frozen=True)
class SpecConfig:
    min_cell_size: int = 5
    max_interaction_terms: int = 20
    enable_baseline_rules: bool = False
    random_effects: bool = True

    def __post_init__(self):
        if self.min_cell_size < 1:
            raise ValueError("min_cell_size must be >= 1")
        if self.max_interaction_terms < 0:
            raise ValueError("max_interaction_terms must be >= 0")


@dataclass(frozen=True)
class Encoding:
    """Reference level and indicator levels for one categorical variable."""

    variable: str
    reference: str
    levels: tuple[str, ...]


@dataclass(frozen=True)
class BaselineEncoding:
    age_mean: float = 0.0
    gender_reference: str | None = None
    gender_levels: tuple[str, ...] = ()


@dataclass(frozen=True)
class ModelSpec:
    terms: tuple[ModelTerm, ...]
    encoding: tuple[Encoding, ...]
    baseline: BaselineEncoding | None = None

    def __post_init__(self):
        object.__setattr__(self, "terms", tuple(self.terms))
        object.__setattr__(self, "encoding", tuple(self.encoding))
        intercepts = [t for t in self.terms if t.kind == "intercept" and t.period_round == 0 and t.scope == FIXED]
        if len(intercepts) != 1:
            raise ValueError("a model spec needs exactly one population intercept")
        keys = [(t.kind, t.factors, t.period_round, t.scope) for t in self.terms]
        if len(set(keys)) != len(keys):
            dup = [k for k, c in Counter(keys).items() if c > 1]
            raise ValueError(f"duplicate terms: {dup}")

    @property
    def fixed_terms(self) -> tuple[ModelTerm, ...]:
        return tuple(t for t in self.terms if t.scope == FIXED)

    @property
    def random_terms(self) -> tuple[ModelTerm, ...]:
        return tuple(t for t in self.terms if t.scope == RANDOM)

    def n_interactions(self) -> int:
        return sum(1 for t in self.fixed_terms if t.interaction_order >= 2)

    def encoding_for(self, variable: str) -> Encoding:
        for e in self.encoding:
            if e.variable == variable:
                return e
        raise KeyError(variable)

    def term_columns(self, term: ModelTerm) -> list[str]:
        """Expanded column names for one term, in design-matrix order."""
        pieces: list[list[str]] = []
        if term.kind in ("main", "two_way", "treatment_x", "treatment_xx"):
            for var in term.factors:
                enc = self.encoding_for(var)
                pieces.append([f"{var}={lv}" for lv in enc.levels])
        elif term.kind.startswith("baseline"):
            for var in term.factors:
                pieces.append(self._baseline_tokens(var))
        cols = []
        for combo in itertools.product(*pieces):
            tokens = (["A"] if term.has_treatment else []) + list(combo)
            if term.period_round:
                tokens.append(f"S{term.period_round}")
            cols.append(":".join(tokens) if tokens else "1")
        return cols

    def _baseline_tokens(self, var: str) -> list[str]:
        if self.baseline is None:
            raise ValueError("spec has baseline terms but no baseline encoding")
        if var == "age":
            return ["age"]
        return [f"gender={g}" for g in self.baseline.gender_levels]

    def fixed_columns(self) -> list[str]:
        return [c for t in self.fixed_terms for c in self.term_columns(t)]

    def random_columns(self) -> list[tuple[int, str]]:
        """(random-term index, column name) pairs."""
        return [(k, c) for k, t in enumerate(self.random_terms) for c in self.term_columns(t)]

    def to_dict(self) -> dict:
        d = {
            "terms": [t.to_dict() for t in self.terms],
            "encoding": [
                {"variable": e.variable, "reference": e.reference, "levels": list(e.levels)}
                for e in self.encoding
            ],
        }
        if self.baseline is not None:
            d["baseline"] = {
                "age_mean": self.baseline.age_mean,
                "gender_reference": self.baseline.gender_reference,
                "gender_levels": list(self.baseline.gender_levels),
            }
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelSpec":
        base = d.get("baseline")
        return cls(
            tuple(ModelTerm.from_dict(t) for t in d["terms"]),
            tuple(Encoding(e["variable"], e["reference"], tuple(e["levels"])) for e in d["encoding"]),
            BaselineEncoding(base["age_mean"], base["gender_reference"], tuple(base["gender_levels"]))
            if base
            else None,
        )

    @classmethod
    def from_json(cls, text: str) -> "ModelSpec":
        return cls.from_dict(json.loads(text))


# --- encoding --------------------------------------------------------------

def encoding_from_data(data: Sequence[DecisionRecord], schema: CovariateSchema) -> tuple[Encoding, ...]:
    """One-hot encoding restricted to levels present in the data.

    Levels never observed get no column: they cannot be estimated and the
    policy table flags them instead.  "Unknown" gets its own column when
    observed.
    """
    seen = [set() for _ in schema.variables]
    for rec in data:
        for j, lv in enumerate(rec.context.levels):
            seen[j].add(lv)
    out = []
    for var, obs in zip(schema.variables, seen):
        if var.reference in obs:
            ref = var.reference
        else:
            known = [lv for lv in var.known_levels if lv in obs]
            ref = known[0] if known else var.reference
        out.append(Encoding(var.name, ref, tuple(lv for lv in var.levels if lv in obs and lv != ref)))
    return tuple(out)


def full_encoding(schema: CovariateSchema, include_unknown: bool = False) -> tuple[Encoding, ...]:
    return tuple(
        Encoding(
            v.name,
            v.reference,
            tuple(lv for lv in v.levels if lv != v.reference and (include_unknown or lv != UNKNOWN)),
        )
        for v in schema.variables
    )


# --- fixed term sets -------------------------------------------------------

def _block(schema: CovariateSchema, r: int, interactions: bool, treatment_in_period: bool = True) -> list[ModelTerm]:
    names = schema.names
    terms = [ModelTerm("intercept", (), r)]
    if r == 0 or treatment_in_period:
        terms.append(ModelTerm("treatment", (), r))
    terms += [ModelTerm("main", (v,), r) for v in names]
    if interactions:
        pairs = list(itertools.combinations(names, 2))
        terms += [ModelTerm("two_way", p, r) for p in pairs]
        terms += [ModelTerm("treatment_x", (v,), r) for v in names]
        terms += [ModelTerm("treatment_xx", p, r) for p in pairs]
    return terms


def _default_random() -> list[ModelTerm]:
    return [ModelTerm("intercept", (), 0, RANDOM), ModelTerm("treatment", (), 0, RANDOM)]


def simple_terms(schema: CovariateSchema, random_effects: bool = True) -> tuple[ModelTerm, ...]:
    """Main effects for treatment and context, repeated in each study period."""
    terms = [t for r in (0, 1, 2) for t in _block(schema, r, interactions=False)]
    return tuple(terms + (_default_random() if random_effects else []))


def complicated_terms(schema: CovariateSchema, random_effects: bool = True) -> tuple[ModelTerm, ...]:
    """The maximal model: pairwise context and treatment interactions in each period."""
    terms = [t for r in (0, 1, 2) for t in _block(schema, r, interactions=True)]
    return tuple(terms + (_default_random() if random_effects else []))


def setting1_terms(schema: CovariateSchema) -> tuple[ModelTerm, ...]:
    """Generative terms with a context-free treatment effect and no treatment-by-period terms."""
    terms = []
    for r in (0, 1, 2):
        terms += [t for t in _block(schema, r, interactions=True, treatment_in_period=False)
                  if t.kind not in ("treatment_x", "treatment_xx")]
    return tuple(terms)


def model_a_terms(schema: CovariateSchema) -> tuple[ModelTerm, ...]:
    return tuple(_block(schema, 0, interactions=False))


def model_b_terms(schema: CovariateSchema) -> tuple[ModelTerm, ...]:
    return tuple(_block(schema, 0, interactions=True))


def fixed_spec(terms: Sequence[ModelTerm], data: Sequence[DecisionRecord], schema: CovariateSchema) -> ModelSpec:
    return ModelSpec(tuple(terms), encoding_from_data(data, schema))


# --- data-adaptive rules -----------------------------------------------------

class _Cells:
    """Cell counts over known (non-Unknown) levels for one data subset."""

    def __init__(self, data: Sequence[DecisionRecord], schema: CovariateSchema):
        self.n = len(data)
        self.names = schema.names
        self.ctx = [rec.context.levels for rec in data]
        self.actions = [rec.action for rec in data]

    def action_counts(self) -> Counter:
        return Counter(self.actions)

    def table(self, idx: tuple[int, ...], with_action: bool) -> Counter:
        c = Counter()
        for levels, a in zip(self.ctx, self.actions):
            key = tuple(levels[i] for i in idx)
            if UNKNOWN in key:
                continue
            c[key + ((a,) if with_action else ())] += 1
        return c

    def passes(self, idx: tuple[int, ...], with_action: bool, m: int) -> bool:
        """Every combination of observed known levels (and actions) has >= m rows.

        Each variable involved needs at least two observed known levels.
        """
        tab = self.table(idx, with_action)
        if not tab:
            return False
        per_var = [sorted({k[p] for k in tab}) for p in range(len(idx))]
        if any(len(lv) < 2 for lv in per_var):
            return False
        axes = per_var + ([[0, 1]] if with_action else [])
        return all(tab.get(combo, 0) >= m for combo in itertools.product(*axes))

    def main_passes(self, j: int, m: int) -> bool:
        tab = self.table((j,), False)
        return sum(1 for c in tab.values() if c >= m) >= 2


def _round_candidates(schema: CovariateSchema, r: int) -> list[ModelTerm]:
    names = schema.names
    pairs = list(itertools.combinations(names, 2))
    cands = [ModelTerm("main", (v,), r) for v in names]
    cands += [ModelTerm("two_way", p, r) for p in pairs]
    cands += [ModelTerm("treatment_x", (v,), r) for v in names]
    cands += [ModelTerm("treatment_xx", p, r) for p in pairs]
    if r:
        cands += [ModelTerm("intercept", (), r), ModelTerm("treatment", (), r)]
    pos = {v: i for i, v in enumerate(names)}
    return sorted(cands, key=lambda t: (t.interaction_order, _KIND_RANK[t.kind], [pos[f] for f in t.factors]))


def _term_passes(term: ModelTerm, cells: _Cells, schema: CovariateSchema, m: int) -> bool:
    pos = {v: i for i, v in enumerate(schema.names)}
    idx = tuple(pos[f] for f in term.factors)
    if term.kind == "intercept":
        return cells.n >= m
    if term.kind == "treatment":
        counts = cells.action_counts()
        return counts[0] >= m and counts[1] >= m
    if term.kind == "main":
        return cells.main_passes(idx[0], m)
    if term.kind == "two_way":
        return cells.passes(idx, False, m)
    if term.kind in ("treatment_x", "treatment_xx"):
        return cells.passes(idx, True, m)
    raise ValueError(term.kind)


def _participant_rows(data: Sequence[DecisionRecord], participants) -> list[DecisionRecord]:
    wanted = set(participants)
    return [rec for rec in data if rec.participant_id in wanted]


def build_model_spec(
    data: Sequence[DecisionRecord],
    schema: CovariateSchema,
    config: SpecConfig = SpecConfig(),
    random_participants: Sequence[str] | None = None,
    baseline: Mapping[str, tuple[float, str]] | None = None,
) -> ModelSpec:
    """Run the three inclusion rounds and return the admitted terms.

    Round 0 uses all rows, round 1 the rows with S1 = 1 and round 2 the
    rows with S2 = 1.  Unknown levels never count toward a cell.  Terms of
    order >= 2 are admitted lowest order first, then in schema order,
    until ``config.max_interaction_terms`` is reached.

    Participant-random terms are judged on the rows of
    ``random_participants`` (all rows when None), in round 0 only, and only
    where the matching population term was admitted.
    """
    m = config.min_cell_size
    terms: list[ModelTerm] = [ModelTerm("intercept"), ModelTerm("treatment")]
    n_inter = 0
    subsets = (
        list(data),
        [rec for rec in data if rec.s1 == 1],
        [rec for rec in data if rec.s2 == 1],
    )
    for r, subset in enumerate(subsets):
        if not subset:
            continue
        cells = _Cells(subset, schema)
        for cand in _round_candidates(schema, r):
            if cand.interaction_order >= 2 and n_inter >= config.max_interaction_terms:
                continue
            if _term_passes(cand, cells, schema, m):
                terms.append(cand)
                if cand.interaction_order >= 2:
                    n_inter += 1

    if config.random_effects and data:
        rows = list(data) if random_participants is None else _participant_rows(data, random_participants)
        admitted = {(t.kind, t.factors) for t in terms if t.period_round == 0}
        rand = [ModelTerm("intercept", (), 0, RANDOM), ModelTerm("treatment", (), 0, RANDOM)]
        if rows:
            cells = _Cells(rows, schema)
            for v in schema.names:
                for kind in ("main", "treatment_x"):
                    t = ModelTerm(kind, (v,), 0, RANDOM)
                    if (kind, (v,)) in admitted and _term_passes(t, cells, schema, m):
                        rand.append(t)
        terms += rand

    base_enc = None
    if config.enable_baseline_rules and baseline is not None:
        present = sorted({rec.participant_id for rec in data} & set(baseline))
        roster = [baseline[p] for p in present]
        terms += baseline_terms(roster, config)
        base_enc = baseline_encoding(roster)

    return ModelSpec(tuple(terms), encoding_from_data(data, schema), base_enc)


def baseline_encoding(participants: Sequence[tuple[float, str]]) -> BaselineEncoding:
    if not participants:
        return BaselineEncoding()
    ages = [float(a) for a, _ in participants]
    genders = sorted({str(g) for _, g in participants})
    return BaselineEncoding(sum(ages) / len(ages), genders[0], tuple(genders[1:]))


def baseline_terms(participants: Sequence[tuple[float, str]], config: SpecConfig = SpecConfig()) -> list[ModelTerm]:
    """Inclusion rules for age and gender, judged on the participant roster."""
    if not participants:
        return []
    ages = [float(a) for a, _ in participants]
    genders = [str(g) for _, g in participants]
    terms = []
    for name, values in (("age", ages), ("gender", genders)):
        distinct = len(set(values))
        if distinct >= 2:
            terms.append(ModelTerm("baseline_main", (name,)))
        if distinct >= 4:
            terms.append(ModelTerm("baseline_x_treatment", (name,)))
    if len(set(ages)) >= 2 and len(set(genders)) >= 2:
        mean = sum(ages) / len(ages)
        cells = Counter((a > mean, g) for a, g in zip(ages, genders))
        if any(c >= 4 for c in cells.values()):
            terms.append(ModelTerm("baseline_three_way", ("age", "gender")))
    return terms


def count_parameters(spec: ModelSpec, schema: CovariateSchema | None = None, include_intercept: bool = True) -> int:
    """Number of population-level scalar coefficients after one-hot expansion."""
    n = 0
    for t in spec.fixed_terms:
        if t.kind == "intercept" and t.period_round == 0 and not include_intercept:
            continue
        n += len(spec.term_columns(t))
    return n
