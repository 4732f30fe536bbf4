"""Posterior -> clipped send probabilities for every enumerable context."""
from __future__ import annotations

import csv
import io
import itertools
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .design import rows_for
from .domain import (
    PERIOD_PAIRS,
    UNKNOWN,
    CovariateSchema,
    ContextVector,
    StudyClock,
)
from .learner import PosteriorDraws, linear_predictor
from .modelspec import ModelSpec

FITTED = "fitted"
SCENARIO1 = "scenario1-imputed"
SCENARIO2 = "scenario2-imputed"


@dataclass(frozen=True)
class ClipBounds:
    lower_clip: float = 0.05
    upper_clip: float = 0.95

    def __post_init__(self):
        if not 0.0 < self.lower_clip < self.upper_clip < 1.0:
            raise ValueError(f"need 0 < lower < upper < 1, got {self.lower_clip}, {self.upper_clip}")

    def clip(self, p):
        return np.clip(p, self.lower_clip, self.upper_clip)


@dataclass(frozen=True)
class PolicyRow:
    context: ContextVector
    s1: int
    s2: int
    send_prob: float
    provenance: str = FITTED
    flags: tuple[str, ...] = ()


@dataclass
class PolicyTable:
    schema: CovariateSchema
    rows: list[PolicyRow]
    clip: ClipBounds = field(default_factory=ClipBounds)

    def __post_init__(self):
        self._index = {(r.context.levels, r.s1, r.s2): i for i, r in enumerate(self.rows)}

    def lookup(self, ctx: ContextVector, clock: StudyClock) -> float:
        return self.rows[self._index[(tuple(ctx.levels), clock.s1, clock.s2)]].send_prob

    def row(self, ctx: ContextVector, s1: int, s2: int) -> PolicyRow:
        return self.rows[self._index[(tuple(ctx.levels), s1, s2)]]

    def __len__(self):
        return len(self.rows)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(list(self.schema.names) + ["s1", "s2", "send_prob", "provenance", "flags"])
        for r in self.rows:
            w.writerow(list(r.context.levels) + [r.s1, r.s2, repr(float(r.send_prob)), r.provenance, ";".join(r.flags)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, schema: CovariateSchema, clip: ClipBounds = ClipBounds()) -> "PolicyTable":
        rows = []
        for rec in csv.DictReader(io.StringIO(text)):
            flags = tuple(f for f in rec.get("flags", "").split(";") if f)
            rows.append(
                PolicyRow(
                    ContextVector(tuple(rec[n] for n in schema.names)),
                    int(rec["s1"]),
                    int(rec["s2"]),
                    float(rec["send_prob"]),
                    rec["provenance"],
                    flags,
                )
            )
        return cls(schema, rows, clip)


def constant_table(schema: CovariateSchema, prob: float) -> PolicyTable:
    rows = [PolicyRow(ctx, s1, s2, prob) for ctx in schema.enumerate_contexts() for s1, s2 in PERIOD_PAIRS]
    return PolicyTable(schema, rows)


def send_fraction(eta_send: np.ndarray, eta_nosend: np.ndarray) -> np.ndarray:
    """Fraction of draws (axis 0) where sending has strictly higher success probability."""
    return np.mean(eta_send > eta_nosend, axis=0)


def thompson_probability(
    draws: PosteriorDraws,
    spec: ModelSpec,
    schema: CovariateSchema,
    ctx: ContextVector,
    clock: StudyClock,
    participant: str | None = None,
    clip: ClipBounds = ClipBounds(),
) -> float:
    """Posterior probability that sending beats not sending, clipped.

    Ties within a draw count as not favouring sending.
    """
    if draws.n_draws == 0:
        raise ValueError("posterior has no draws")
    rows = rows_for([ctx, ctx], [1, 0], [(clock.s1, clock.s2)] * 2, schema, participant)
    eta = linear_predictor(draws, spec, schema, rows, participant)
    raw = float(send_fraction(eta[:, :1], eta[:, 1:2])[0])
    return float(clip.clip(raw))


def _fitted_probs(draws, spec, schema, contexts, participant, clip) -> np.ndarray:
    """Clipped Thompson probabilities for fitted contexts, one column per period pair."""
    n = len(contexts)
    out = np.empty((n, len(PERIOD_PAIRS)))
    if n == 0:
        return out
    for k, per in enumerate(PERIOD_PAIRS):
        send = rows_for(contexts, [1] * n, [per] * n, schema, participant)
        nosend = rows_for(contexts, [0] * n, [per] * n, schema, participant)
        e1 = linear_predictor(draws, spec, schema, send, participant)
        e0 = linear_predictor(draws, spec, schema, nosend, participant)
        out[:, k] = clip.clip(send_fraction(e1, e0))
    return out


def impute_scenario1(sibling_probs: Sequence[float], clip: ClipBounds = ClipBounds()) -> float:
    """Unweighted mean of the fitted sibling probabilities, clipped."""
    if len(sibling_probs) == 0:
        raise ValueError("no fitted siblings to average")
    return float(clip.clip(float(np.mean(sibling_probs))))


def nearest_level(variable, level: str, observed: set[str], level_map: Mapping[str, str] | None = None) -> str:
    """Observed stand-in for an unobserved level.

    An explicit map entry wins and must point at an observed level.  Without
    one, the closest observed known level in schema order is used, ties
    going to the earlier level.
    """
    if level_map and level in level_map:
        target = level_map[level]
        if target not in observed:
            raise ValueError(
                f"nearest level {target!r} for {variable.name}={level!r} is also unobserved; use average mode"
            )
        return target
    pos = variable.index(level)
    cands = [lv for lv in variable.known_levels if lv in observed]
    if not cands:
        raise ValueError(f"{variable.name} has no observed levels; use average mode")
    return min(cands, key=lambda lv: (abs(variable.index(lv) - pos), variable.index(lv)))


def impute_scenario2(
    fitted: Mapping[tuple, float],
    variable,
    var_pos: int,
    missing_level: str,
    observed: set[str],
    rows: Sequence[tuple],
    mode: str = "average",
    level_map: Mapping[str, str] | None = None,
    clip: ClipBounds = ClipBounds(),
) -> dict[tuple, float]:
    """Probabilities for ``rows`` (level tuples) carrying ``missing_level``.

    ``fitted`` maps fitted level tuples to probabilities.  Average mode
    takes the mean over observed known levels of the variable; nearest mode
    copies the row with the mapped level.
    """
    out = {}
    if mode == "nearest":
        target = nearest_level(variable, missing_level, observed, level_map)
        for key in rows:
            sub = key[:var_pos] + (target,) + key[var_pos + 1 :]
            out[key] = float(clip.clip(fitted[sub]))
    elif mode == "average":
        levels = [lv for lv in variable.known_levels if lv in observed]
        for key in rows:
            sibs = [fitted[key[:var_pos] + (lv,) + key[var_pos + 1 :]] for lv in levels]
            out[key] = impute_scenario1(sibs, clip)
    else:
        raise ValueError(f"unknown imputation mode {mode!r}")
    return out


def build_policy_table(
    draws: PosteriorDraws,
    spec: ModelSpec,
    schema: CovariateSchema,
    observed: Mapping[str, set[str]] | None = None,
    clip: ClipBounds = ClipBounds(),
    participant: str | None = None,
    scenario2_mode: str = "average",
    level_maps: Mapping[str, Mapping[str, str]] | None = None,
) -> PolicyTable:
    """Enumerate every context and period pair and assign a send probability.

    Rows whose levels were all seen in training get Thompson probabilities
    from the posterior.  Other rows are imputed: an unseen "Unknown" level
    (scenario 1) is averaged over the seen levels of that variable; an
    unseen regular level (scenario 2) is averaged or mapped to its nearest
    seen level according to ``scenario2_mode``.
    """
    observed = {k: set(v) for k, v in (observed if observed is not None else draws.observed).items()}
    level_maps = level_maps or {}
    all_keys = [ctx.levels for ctx in schema.enumerate_contexts()]

    def is_fitted(key):
        return all(lv in observed[v.name] for v, lv in zip(schema.variables, key))

    fitted_keys = [k for k in all_keys if is_fitted(k)]
    probs = _fitted_probs(draws, spec, schema, [ContextVector(k) for k in fitted_keys], participant, clip)

    rows = []
    for k, (s1, s2) in enumerate(PERIOD_PAIRS):
        fitted = {key: probs[i, k] for i, key in enumerate(fitted_keys)}
        global_mean = float(np.mean(probs[:, k])) if fitted_keys else 0.5
        for key in all_keys:
            if key in fitted:
                rows.append(PolicyRow(ContextVector(key), s1, s2, float(fitted[key])))
                continue
            choices, flags, scen1 = [], [], False
            for v, lv in zip(schema.variables, key):
                seen_known = [x for x in v.known_levels if x in observed[v.name]]
                if lv in observed[v.name]:
                    choices.append([lv])
                elif lv == UNKNOWN:
                    scen1 = True
                    flags.append(f"{v.name}={lv}:scenario1")
                    choices.append(seen_known)
                else:
                    flags.append(f"{v.name}={lv}:scenario2")
                    if scenario2_mode == "nearest" and seen_known:
                        choices.append([nearest_level(v, lv, observed[v.name], level_maps.get(v.name))])
                    elif scenario2_mode in ("nearest", "average"):
                        choices.append(seen_known)
                    else:
                        raise ValueError(f"unknown imputation mode {scenario2_mode!r}")
            sibs = [fitted[c] for c in itertools.product(*choices)]
            if sibs:
                p = impute_scenario1(sibs, clip)
            else:
                p = float(clip.clip(global_mean))
                flags.append("fallback:global-mean")
            rows.append(PolicyRow(ContextVector(key), s1, s2, p, SCENARIO1 if scen1 else SCENARIO2, tuple(flags)))
    return PolicyTable(schema, rows, clip)
