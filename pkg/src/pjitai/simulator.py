"""Synthetic trials: ground-truth reward models and closed-loop execution."""
from __future__ import annotations

import csv
import enum
import io
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .design import design_matrix, rows_for
from .domain import (
    PERIOD1_DAY,
    PERIOD2_DAY,
    PERIOD_PAIRS,
    UNKNOWN,
    ContextVector,
    CovariateSchema,
    DecisionRecord,
    StudyClock,
    Variable,
)
from .learner import PriorSpec, SamplerConfig, fit_posterior, prior_scale
from .modelspec import (
    FIXED,
    ModelSpec,
    ModelTerm,
    SpecConfig,
    build_model_spec,
    complicated_terms,
    encoding_from_data,
    full_encoding,
    setting1_terms,
    simple_terms,
)
from .policy import ClipBounds, PolicyTable, build_policy_table

# Treatment moderators of the second setting: (variable, level)
SETTING2_MODERATORS = (("past_engagement", "1"), ("time_of_day", "night"), ("time_of_week", "weekend"))


@dataclass(frozen=True)
class GenerativeModel:
    setting: int
    spec: ModelSpec
    coefficients: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "coefficients", np.asarray(self.coefficients, dtype=float))
        if len(self.coefficients) != len(self.spec.fixed_columns()):
            raise ValueError("one coefficient per expanded column required")

    @property
    def columns(self) -> list[str]:
        return self.spec.fixed_columns()

    def coefficient(self, column: str) -> float:
        return float(self.coefficients[self.columns.index(column)])

    def column_meta(self) -> list[tuple[str, ModelTerm]]:
        return [(c, t) for t in self.spec.fixed_terms for c in self.spec.term_columns(t)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["term_id", "factors", "interaction_order", "period_round", "value"])
        for (col, term), v in zip(self.column_meta(), self.coefficients):
            factors = "" if col == "1" else col.replace(":", ";")
            w.writerow([col, factors, term.interaction_order, term.period_round, repr(float(v))])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, setting: int, schema: CovariateSchema) -> "GenerativeModel":
        model = generative_spec(setting, schema)
        values = {row["term_id"]: float(row["value"]) for row in csv.DictReader(io.StringIO(text))}
        cols = model.fixed_columns()
        if set(values) != set(cols):
            raise ValueError("coefficient file does not match the setting's term set")
        return cls(setting, model, np.array([values[c] for c in cols]))


def generative_spec(setting: int, schema: CovariateSchema) -> ModelSpec:
    if setting == 1:
        terms = setting1_terms(schema)
    elif setting == 2:
        terms = complicated_terms(schema, random_effects=False)
    else:
        raise ValueError(f"unknown setting {setting!r}; expected 1 or 2")
    return ModelSpec(terms, full_encoding(schema))


def sample_coefficients(
    setting: int,
    schema: CovariateSchema,
    seed: int,
    moderators: Sequence[tuple[str, str]] = SETTING2_MODERATORS,
) -> GenerativeModel:
    """Draw ground-truth coefficients.

    Everything is centred at zero with the order-dependent prior SD except
    the treatment terms.  Setting 1 has a single treatment effect
    N(0.4, 1/8).  Setting 2 has a baseline treatment effect N(-0.4, 1/8),
    shifts N(0.5, 1/16) on the moderator columns and treatment-by-period
    terms N(-0.1, 1/32).
    """
    spec = generative_spec(setting, schema)
    rng = np.random.default_rng(seed)
    mod_cols = {f"A:{v}={lv}" for v, lv in moderators}
    values = []
    for t in spec.fixed_terms:
        for col in spec.term_columns(t):
            if t.kind == "treatment" and t.period_round == 0:
                mean, sd = (0.4 if setting == 1 else -0.4), 1 / 8
            elif setting == 2 and t.kind == "treatment":
                mean, sd = -0.1, 1 / 32
            elif setting == 2 and t.kind == "treatment_x" and t.period_round == 0 and col in mod_cols:
                mean, sd = 0.5, 1 / 16
            else:
                mean, sd = 0.0, prior_scale(t.interaction_order)
            values.append(rng.normal(mean, sd))
    return GenerativeModel(setting, spec, np.array(values))


def _logit_rows(model: GenerativeModel, schema, contexts, actions, periods) -> np.ndarray:
    rows = rows_for(contexts, actions, periods, schema)
    return design_matrix(model.spec, rows, schema, FIXED) @ model.coefficients


def true_success_prob(
    model: GenerativeModel, schema: CovariateSchema, ctx: ContextVector, action: int, clock: StudyClock
) -> float:
    if UNKNOWN in ctx.levels:
        raise ValueError("ground truth needs a fully observed context")
    eta = _logit_rows(model, schema, [ctx], [action], [(clock.s1, clock.s2)])[0]
    return float(1.0 / (1.0 + np.exp(-eta)))


def truth_table(model: GenerativeModel, schema: CovariateSchema) -> dict[tuple, float]:
    """(context levels, s1, s2, action) -> success probability for every known context."""
    known = CovariateSchema(tuple(_known_only(v) for v in schema.variables))
    ctxs = list(known.enumerate_contexts())
    out = {}
    for s1, s2 in PERIOD_PAIRS:
        for a in (0, 1):
            eta = _logit_rows(model, schema, ctxs, [a] * len(ctxs), [(s1, s2)] * len(ctxs))
            for ctx, e in zip(ctxs, eta):
                out[(ctx.levels, s1, s2, a)] = float(1.0 / (1.0 + np.exp(-e)))
    return out


def _known_only(var):
    return Variable(var.name, var.known_levels, var.reference)


# --- trial execution -------------------------------------------------------

class AlgorithmKind(str, enum.Enum):
    SIMPLE = "simple"
    LS4L2 = "ls4l2"
    COMPLICATED = "complicated"


@dataclass(frozen=True)
class TrialConfig:
    participants: int = 20
    stagger_weeks: int = 8
    study_length: int = 168
    decisions_per_week: tuple[int, ...] = (2, 3, 4)
    update_days: tuple[int, ...] = (PERIOD1_DAY, PERIOD2_DAY)
    initial_send_prob: float = 0.8
    context_weights: Mapping[str, Sequence[float]] = field(default_factory=dict)
    missing_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "decisions_per_week", tuple(self.decisions_per_week))
        object.__setattr__(self, "update_days", tuple(self.update_days))
        if self.participants < 1:
            raise ValueError("participants must be >= 1")
        if self.stagger_weeks < 1:
            raise ValueError("stagger_weeks must be >= 1")
        if self.study_length < 1:
            raise ValueError("study_length must be >= 1")
        if not self.decisions_per_week or min(self.decisions_per_week) < 1 or max(self.decisions_per_week) > 7:
            raise ValueError("decisions_per_week entries must lie in 1..7")
        if any(b <= a for a, b in zip(self.update_days, self.update_days[1:])):
            raise ValueError("update_days must be strictly increasing")
        if not 0.0 <= self.initial_send_prob <= 1.0:
            raise ValueError("initial_send_prob must be a probability")
        if not 0.0 <= self.missing_rate < 1.0:
            raise ValueError("missing_rate must be in [0, 1)")


@dataclass(frozen=True)
class UpdateEvent:
    participant_id: str
    scheduled_day: int
    calendar_day: int
    executed: bool
    health: object  # FitHealth
    checksum: str | None


@dataclass
class TrialResult:
    records: list[DecisionRecord]
    updates: list[UpdateEvent]


class TrialAborted(RuntimeError):
    def __init__(self, message: str, result: TrialResult):
        super().__init__(message)
        self.result = result


@dataclass(frozen=True)
class _Slot:
    calendar_day: int
    participant: int
    day: int
    ctx: tuple[str, ...]
    logged: tuple[str, ...]
    u_action: float
    u_reward: float


def _schedule(cfg: TrialConfig, schema: CovariateSchema) -> tuple[list[int], list[_Slot]]:
    """Enrollment days and every decision slot, drawn from the environment stream."""
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(1,)))
    enroll = [7 * int(w) for w in rng.integers(0, cfg.stagger_weeks, cfg.participants)]
    weights = []
    for v in schema.variables:
        w = np.asarray(cfg.context_weights.get(v.name, np.ones(len(v.known_levels))), dtype=float)
        if len(w) != len(v.known_levels) or np.any(w < 0) or w.sum() <= 0:
            raise ValueError(f"bad context weights for {v.name}")
        weights.append(w / w.sum())
    slots = []
    n_weeks = -(-cfg.study_length // 7)
    for i in range(cfg.participants):
        for wk in range(n_weeks):
            k = int(rng.choice(cfg.decisions_per_week))
            days = sorted(7 * wk + int(d) for d in rng.choice(7, size=k, replace=False))
            for d in days:
                ctx = tuple(v.known_levels[int(rng.choice(len(w), p=w))] for v, w in zip(schema.variables, weights))
                mask = rng.random(len(ctx)) < cfg.missing_rate
                logged = tuple(UNKNOWN if m else lv for lv, m in zip(ctx, mask))
                ua, ur = rng.random(), rng.random()
                if d < cfg.study_length:
                    slots.append(_Slot(enroll[i] + d, i, d, ctx, logged, ua, ur))
    slots.sort(key=lambda s: (s.calendar_day, s.participant, s.day))
    return enroll, slots


def algorithm_spec(
    algo: AlgorithmKind, data: Sequence[DecisionRecord], schema: CovariateSchema, spec_cfg: SpecConfig, cohort
) -> ModelSpec:
    algo = AlgorithmKind(algo)
    if algo is AlgorithmKind.LS4L2:
        return build_model_spec(data, schema, spec_cfg, random_participants=cohort)
    terms = simple_terms if algo is AlgorithmKind.SIMPLE else complicated_terms
    return ModelSpec(terms(schema, random_effects=spec_cfg.random_effects), encoding_from_data(data, schema))


def participant_name(i: int) -> str:
    return f"p{i:03d}"


def simulate_trial(
    cfg: TrialConfig,
    algo: AlgorithmKind | str,
    model: GenerativeModel,
    schema: CovariateSchema,
    spec_cfg: SpecConfig = SpecConfig(),
    prior: PriorSpec = PriorSpec(),
    sampler: SamplerConfig = SamplerConfig(warmup_draws=300, kept_draws=500),
    clip: ClipBounds = ClipBounds(),
    learner_seed: int = 0,
    raise_on_broken: bool = True,
) -> TrialResult:
    """Run one closed-loop trial.

    Participants enrol in weekly cohorts.  When a cohort reaches an update
    day the learner refits on every record logged before that calendar
    day, and each cohort member gets a personal policy table from the
    participant-level posterior.  Before the first update every
    participant sends with ``cfg.initial_send_prob``.

    Actions and rewards use pre-drawn uniforms from the environment
    stream, so different algorithms face identical contexts and coupled
    outcomes under the same ``cfg.seed``.
    """
    algo = AlgorithmKind(algo)
    truth = truth_table(model, schema)
    enroll, slots = _schedule(cfg, schema)
    names = [participant_name(i) for i in range(cfg.participants)]

    # update events keyed by calendar day, grouped by cohort
    events: dict[int, list[tuple[int, int]]] = {}
    for i, e in enumerate(enroll):
        for d in cfg.update_days:
            if d < cfg.study_length:
                events.setdefault(e + d, []).append((i, d))

    tables: dict[int, PolicyTable] = {}
    records: list[DecisionRecord] = []
    updates: list[UpdateEvent] = []
    fit_no = 0
    pending = sorted(events)
    for slot in slots:
        while pending and pending[0] <= slot.calendar_day:
            day = pending.pop(0)
            members = events[day]
            fit_no += 1
            broken = _run_update(
                day, members, names, records, schema, algo, spec_cfg, prior, sampler, clip,
                learner_seed, fit_no, tables, updates,
            )
            if broken is not None and raise_on_broken:
                raise TrialAborted(broken, TrialResult(records, updates))
        ctx = ContextVector(slot.logged)
        s1, s2 = int(slot.day > PERIOD1_DAY), int(slot.day > PERIOD2_DAY)
        table = tables.get(slot.participant)
        prob = cfg.initial_send_prob if table is None else table.row(ctx, s1, s2).send_prob
        action = int(slot.u_action < prob)
        p1 = truth[(slot.ctx, s1, s2, 1)]
        p0 = truth[(slot.ctx, s1, s2, 0)]
        reward = int(slot.u_reward < (p1 if action else p0))
        records.append(
            DecisionRecord(names[slot.participant], len(records), slot.day, ctx, float(prob), action, reward, p1, p0)
        )
    # updates scheduled after the last decision still count as executed events
    for day in pending:
        fit_no += 1
        broken = _run_update(
            day, events[day], names, records, schema, algo, spec_cfg, prior, sampler, clip,
            learner_seed, fit_no, tables, updates,
        )
        if broken is not None and raise_on_broken:
            raise TrialAborted(broken, TrialResult(records, updates))
    return TrialResult(records, updates)


def _run_update(day, members, names, records, schema, algo, spec_cfg, prior, sampler, clip,
                learner_seed, fit_no, tables, updates) -> str | None:
    cohort = [names[i] for i, _ in members]
    data = list(records)
    health, checksum, failure = None, None, None
    if not data:
        failure = f"no data available for the update on calendar day {day}"
    else:
        spec = algorithm_spec(algo, data, schema, spec_cfg, cohort)
        cfg = SamplerConfig(
            chains=sampler.chains,
            warmup_draws=sampler.warmup_draws,
            kept_draws=sampler.kept_draws,
            seed=int(np.random.SeedSequence(learner_seed, spawn_key=(fit_no,)).generate_state(1)[0]),
            target_acceptance=sampler.target_acceptance,
            trajectory_length=sampler.trajectory_length,
            max_leapfrog=sampler.max_leapfrog,
        )
        draws, health = fit_posterior(data, spec, schema, prior, cfg)
        if health.ok:
            checksum = draws.checksum()
            present = set(draws.participants)
            for i, _ in members:
                pid = names[i]
                tables[i] = build_policy_table(
                    draws, spec, schema, clip=clip, participant=pid if pid in present else None
                )
        else:
            failure = f"learner broke on calendar day {day}: {health.status} {list(health.offending)[:5]}"
    for i, d in members:
        updates.append(UpdateEvent(names[i], d, day, failure is None, health, checksum))
    return failure
