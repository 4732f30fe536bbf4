"""Trial vocabulary: covariate schema, contexts, study clock and decision records."""
from __future__ import annotations

import csv
import io
import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

UNKNOWN = "Unknown"

# daysInStudy thresholds for the 2- and 4-month updates
PERIOD1_DAY = 56
PERIOD2_DAY = 112

# valid (s1, s2) combinations; s2 implies s1
PERIOD_PAIRS = ((0, 0), (1, 0), (1, 1))


class ValidationError(ValueError):
    pass


@dataclass(frozen=True)
class Variable:
    name: str
    levels: tuple[str, ...]
    reference: str | None = None

    def __post_init__(self):
        levels = tuple(self.levels)
        if UNKNOWN not in levels:
            levels = levels + (UNKNOWN,)
        object.__setattr__(self, "levels", levels)
        if len(set(levels)) != len(levels):
            raise ValidationError(f"duplicate levels for {self.name}: {levels}")
        if levels.count(UNKNOWN) != 1:
            raise ValidationError(f"{self.name}: '{UNKNOWN}' must appear exactly once")
        if len(levels) < 2:
            raise ValidationError(f"{self.name}: needs at least one level besides '{UNKNOWN}'")
        ref = self.reference if self.reference is not None else levels[0]
        if ref not in levels or ref == UNKNOWN:
            raise ValidationError(f"{self.name}: bad reference level {ref!r}")
        object.__setattr__(self, "reference", ref)

    @property
    def known_levels(self) -> tuple[str, ...]:
        return tuple(lv for lv in self.levels if lv != UNKNOWN)

    def index(self, level: str) -> int:
        return self.levels.index(level)


@dataclass(frozen=True)
class CovariateSchema:
    variables: tuple[Variable, ...]
    baseline_variables: tuple[tuple[str, str], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "variables", tuple(self.variables))
        names = [v.name for v in self.variables]
        if len(set(names)) != len(names):
            raise ValidationError(f"duplicate variable names: {names}")
        for name, kind in self.baseline_variables:
            if kind not in ("numeric-age", "categorical-gender"):
                raise ValidationError(f"baseline variable {name}: unknown kind {kind!r}")

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(v.name for v in self.variables)

    def __getitem__(self, name: str) -> Variable:
        for v in self.variables:
            if v.name == name:
                return v
        raise KeyError(name)

    def __len__(self):
        return len(self.variables)

    def enumerate_contexts(self) -> Iterator["ContextVector"]:
        for combo in itertools.product(*(v.levels for v in self.variables)):
            yield ContextVector(combo)

    def n_contexts(self) -> int:
        n = 1
        for v in self.variables:
            n *= len(v.levels)
        return n

    def to_dict(self) -> dict:
        return {
            "variables": [
                {"name": v.name, "levels": list(v.levels), "reference": v.reference}
                for v in self.variables
            ],
            "baseline_variables": [list(b) for b in self.baseline_variables],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CovariateSchema":
        return cls(
            tuple(Variable(v["name"], tuple(v["levels"]), v.get("reference")) for v in d["variables"]),
            tuple(tuple(b) for b in d.get("baseline_variables", ())),
        )


def default_schema() -> CovariateSchema:
    """The five passively sensed LS4L2 context variables with example level sets."""
    return CovariateSchema(
        (
            Variable("time_of_week", ("weekday", "weekend", "holiday")),
            Variable("time_of_day", ("morning", "afternoon", "evening", "night")),
            Variable("situation", ("shopping", "social", "working_out", "other")),
            Variable("weather", ("very_cold", "cold", "cool", "warm", "hot"), reference="cool"),
            Variable("past_engagement", ("0", "1")),
        ),
        baseline_variables=(("age", "numeric-age"), ("gender", "categorical-gender")),
    )


def binary_schema(n: int = 3) -> CovariateSchema:
    """Desk-scale schema of binary covariates.

    The first three carry the setting-2 moderator names so the generative
    model can attach its treatment shifts to them.
    """
    named = [
        Variable("time_of_week", ("weekday", "weekend")),
        Variable("time_of_day", ("day", "night")),
        Variable("past_engagement", ("0", "1")),
    ]
    extra = [Variable(f"x{j}", ("0", "1")) for j in range(len(named), n)]
    return CovariateSchema(tuple((named + extra)[:n]))


@dataclass(frozen=True)
class ContextVector:
    """One level name per schema variable, in schema order."""

    levels: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(self.levels))

    def __getitem__(self, i):
        return self.levels[i]

    def __len__(self):
        return len(self.levels)

    def as_dict(self, schema: CovariateSchema) -> dict[str, str]:
        return dict(zip(schema.names, self.levels))


@dataclass(frozen=True)
class ValidationResult:
    ok: bool
    variable: str | None = None
    level: str | None = None

    def __bool__(self):
        return self.ok


def validate_context(ctx: ContextVector, schema: CovariateSchema) -> ValidationResult:
    if len(ctx) != len(schema):
        return ValidationResult(False, None, None)
    for var, level in zip(schema.variables, ctx.levels):
        if level not in var.levels:
            return ValidationResult(False, var.name, level)
    return ValidationResult(True)


def period_indicators(days_in_study: int) -> tuple[int, int]:
    if days_in_study < 0:
        raise ValueError(f"days_in_study must be non-negative, got {days_in_study}")
    return int(days_in_study > PERIOD1_DAY), int(days_in_study > PERIOD2_DAY)


@dataclass(frozen=True)
class StudyClock:
    days_in_study: int

    def __post_init__(self):
        if self.days_in_study < 0:
            raise ValueError("days_in_study must be non-negative")

    @property
    def s1(self) -> int:
        return period_indicators(self.days_in_study)[0]

    @property
    def s2(self) -> int:
        return period_indicators(self.days_in_study)[1]

    @classmethod
    def from_periods(cls, s1: int, s2: int) -> "StudyClock":
        if (s1, s2) not in PERIOD_PAIRS:
            raise ValueError(f"invalid period pair {(s1, s2)}")
        return cls({(0, 0): 0, (1, 0): PERIOD1_DAY + 1, (1, 1): PERIOD2_DAY + 1}[(s1, s2)])


@dataclass(frozen=True)
class DecisionRecord:
    participant_id: str
    decision_index: int
    days_in_study: int
    context: ContextVector
    policy_prob: float
    action: int
    reward: int
    true_prob_send: float | None = None
    true_prob_nosend: float | None = None

    def __post_init__(self):
        if not 0.0 <= self.policy_prob <= 1.0:
            raise ValidationError(f"policy_prob out of range: {self.policy_prob}")
        if self.action not in (0, 1) or self.reward not in (0, 1):
            raise ValidationError("action and reward must be 0 or 1")
        if (self.true_prob_send is None) != (self.true_prob_nosend is None):
            raise ValidationError("true probabilities must be both present or both absent")
        if self.days_in_study < 0:
            raise ValidationError("days_in_study must be non-negative")

    @property
    def s1(self) -> int:
        return period_indicators(self.days_in_study)[0]

    @property
    def s2(self) -> int:
        return period_indicators(self.days_in_study)[1]

    @property
    def has_truth(self) -> bool:
        return self.true_prob_send is not None


# --- decision-log serialization -------------------------------------------

def log_columns(schema: CovariateSchema) -> list[str]:
    return (
        ["participant_id", "decision_index", "days_in_study"]
        + list(schema.names)
        + ["s1", "s2", "policy_prob", "action", "reward", "true_prob_send", "true_prob_nosend"]
    )


def _fmt(x: float | None) -> str:
    return "" if x is None else repr(float(x))


def record_to_row(rec: DecisionRecord, schema: CovariateSchema) -> dict:
    row = {
        "participant_id": rec.participant_id,
        "decision_index": rec.decision_index,
        "days_in_study": rec.days_in_study,
    }
    row.update(rec.context.as_dict(schema))
    row.update(
        s1=rec.s1,
        s2=rec.s2,
        policy_prob=repr(float(rec.policy_prob)),
        action=rec.action,
        reward=rec.reward,
        true_prob_send=_fmt(rec.true_prob_send),
        true_prob_nosend=_fmt(rec.true_prob_nosend),
    )
    return row


def _opt_float(v) -> float | None:
    if v is None or v == "":
        return None
    return float(v)


def row_to_record(row: dict, schema: CovariateSchema) -> DecisionRecord:
    ctx = ContextVector(tuple(str(row[name]) for name in schema.names))
    check = validate_context(ctx, schema)
    if not check:
        raise ValidationError(f"invalid level {check.level!r} for variable {check.variable!r}")
    rec = DecisionRecord(
        participant_id=str(row["participant_id"]),
        decision_index=int(row["decision_index"]),
        days_in_study=int(row["days_in_study"]),
        context=ctx,
        policy_prob=float(row["policy_prob"]),
        action=int(row["action"]),
        reward=int(row["reward"]),
        true_prob_send=_opt_float(row.get("true_prob_send")),
        true_prob_nosend=_opt_float(row.get("true_prob_nosend")),
    )
    if "s1" in row and row["s1"] != "" and (int(row["s1"]), int(row["s2"])) != (rec.s1, rec.s2):
        raise ValidationError(f"row {rec.decision_index}: s1/s2 disagree with days_in_study")
    return rec


def records_to_csv(records: Iterable[DecisionRecord], schema: CovariateSchema) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=log_columns(schema), lineterminator="\n")
    writer.writeheader()
    for rec in records:
        writer.writerow(record_to_row(rec, schema))
    return buf.getvalue()


def records_from_csv(text: str, schema: CovariateSchema) -> list[DecisionRecord]:
    reader = csv.DictReader(io.StringIO(text))
    missing = [c for c in log_columns(schema) if c not in (reader.fieldnames or [])]
    if missing:
        raise ValidationError(f"decision log is missing columns: {missing}")
    return [row_to_record(row, schema) for row in reader]


def records_to_jsonl(records: Iterable[DecisionRecord], schema: CovariateSchema) -> str:
    lines = []
    for rec in records:
        row = record_to_row(rec, schema)
        for k in ("policy_prob", "true_prob_send", "true_prob_nosend"):
            row[k] = None if row[k] == "" else float(row[k])
        lines.append(json.dumps(row))
    return "".join(line + "\n" for line in lines)


def records_from_jsonl(text: str, schema: CovariateSchema) -> list[DecisionRecord]:
    return [row_to_record(json.loads(line), schema) for line in text.splitlines() if line.strip()]


def read_log(path: str | Path, schema: CovariateSchema) -> list[DecisionRecord]:
    path = Path(path)
    text = path.read_text()
    if path.suffix == ".jsonl":
        return records_from_jsonl(text, schema)
    return records_from_csv(text, schema)


def observed_levels(records: Sequence[DecisionRecord], schema: CovariateSchema) -> dict[str, set[str]]:
    seen = {name: set() for name in schema.names}
    for rec in records:
        for name, level in zip(schema.names, rec.context.levels):
            seen[name].add(level)
    return seen
