"""Design matrices for a ModelSpec."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .domain import CovariateSchema, ContextVector, DecisionRecord, period_indicators
from .modelspec import FIXED, RANDOM, ModelSpec, ModelTerm


@dataclass
class DesignData:
    """Column-oriented view of decision rows.

    ``codes[n, j]`` is the schema level index of variable j in row n.
    """

    codes: np.ndarray
    actions: np.ndarray
    s1: np.ndarray
    s2: np.ndarray
    rewards: np.ndarray
    pid: np.ndarray
    participants: list[str]

    @property
    def n(self) -> int:
        return len(self.actions)


def encode_contexts(contexts: Sequence[ContextVector], schema: CovariateSchema) -> np.ndarray:
    lookup = [{lv: i for i, lv in enumerate(v.levels)} for v in schema.variables]
    codes = np.empty((len(contexts), len(schema)), dtype=np.int64)
    for n, ctx in enumerate(contexts):
        for j, lv in enumerate(ctx.levels):
            codes[n, j] = lookup[j][lv]
    return codes


def from_records(records: Sequence[DecisionRecord], schema: CovariateSchema) -> DesignData:
    participants = sorted({r.participant_id for r in records})
    index = {p: i for i, p in enumerate(participants)}
    periods = np.array([period_indicators(r.days_in_study) for r in records], dtype=float).reshape(-1, 2)
    return DesignData(
        codes=encode_contexts([r.context for r in records], schema).reshape(len(records), len(schema)),
        actions=np.array([r.action for r in records], dtype=float),
        s1=periods[:, 0],
        s2=periods[:, 1],
        rewards=np.array([r.reward for r in records], dtype=float),
        pid=np.array([index[r.participant_id] for r in records], dtype=np.int64),
        participants=participants,
    )


def _indicators(spec: ModelSpec, schema: CovariateSchema, codes: np.ndarray) -> dict[str, np.ndarray]:
    out = {}
    for j, var in enumerate(schema.variables):
        enc = spec.encoding_for(var.name)
        idx = np.array([var.index(lv) for lv in enc.levels], dtype=np.int64)
        out[var.name] = (codes[:, j][:, None] == idx[None, :]).astype(float)
    return out


def _baseline_factors(spec: ModelSpec, data: DesignData, baseline: Mapping[str, tuple[float, str]]):
    if spec.baseline is None:
        raise ValueError("spec has baseline terms but no baseline encoding")
    try:
        rows = [baseline[data.participants[i]] for i in data.pid]
    except KeyError as exc:
        raise ValueError(f"no baseline covariates for participant {exc.args[0]}") from None
    age = np.array([float(a) for a, _ in rows]) - spec.baseline.age_mean
    gender = np.array([str(g) for _, g in rows])
    g_cols = np.stack([(gender == lv).astype(float) for lv in spec.baseline.gender_levels], axis=1) \
        if spec.baseline.gender_levels else np.zeros((len(rows), 0))
    return {"age": age[:, None], "gender": g_cols}


def term_matrix(
    term: ModelTerm,
    ind: dict[str, np.ndarray],
    actions: np.ndarray,
    s1: np.ndarray,
    s2: np.ndarray,
) -> np.ndarray:
    n = len(actions)
    base = np.ones(n)
    if term.has_treatment:
        base = base * actions
    if term.period_round == 1:
        base = base * s1
    elif term.period_round == 2:
        base = base * s2
    m = np.ones((n, 1))
    for f in term.factors:
        fm = ind[f]
        m = (m[:, :, None] * fm[:, None, :]).reshape(n, -1)
    return m * base[:, None]


def design_matrix(
    spec: ModelSpec,
    data: DesignData,
    schema: CovariateSchema,
    scope: str = FIXED,
    baseline: Mapping[str, tuple[float, str]] | None = None,
) -> np.ndarray:
    terms = spec.fixed_terms if scope == FIXED else spec.random_terms
    ind = _indicators(spec, schema, data.codes)
    if any(t.kind.startswith("baseline") for t in terms):
        if baseline is None:
            raise ValueError("baseline covariates required for this spec")
        ind.update(_baseline_factors(spec, data, baseline))
    blocks = [term_matrix(t, ind, data.actions, data.s1, data.s2) for t in terms]
    if not blocks:
        return np.zeros((data.n, 0))
    return np.concatenate(blocks, axis=1)


def random_term_index(spec: ModelSpec) -> np.ndarray:
    """Random-term index of each random design column."""
    return np.array([k for k, _ in spec.random_columns()], dtype=np.int64)


def rows_for(
    contexts: Sequence[ContextVector],
    actions: Sequence[int],
    periods: Sequence[tuple[int, int]],
    schema: CovariateSchema,
    participant: str | None = None,
) -> DesignData:
    """DesignData for prediction inputs (no rewards)."""
    n = len(contexts)
    per = np.array(periods, dtype=float).reshape(n, 2)
    return DesignData(
        codes=encode_contexts(contexts, schema).reshape(n, len(schema)),
        actions=np.asarray(actions, dtype=float).reshape(n),
        s1=per[:, 0],
        s2=per[:, 1],
        rewards=np.zeros(n),
        pid=np.zeros(n, dtype=np.int64),
        participants=[participant if participant is not None else ""],
    )
