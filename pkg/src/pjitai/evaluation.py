"""Regret scoring, replicate aggregation, calibration and failure monitoring."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .domain import DecisionRecord

Z95 = 1.959963984540054


def _check_prob(name: str, p: float):
    if not (0.0 <= p <= 1.0):
        raise ValueError(f"{name} must be a probability, got {p}")


def step_regret(p_opt: float, p_other: float, p_chosen: float, upper: float = 0.95) -> float:
    """Regret of one decision against the clipped-optimal benchmark."""
    for n, p in (("p_opt", p_opt), ("p_other", p_other), ("p_chosen", p_chosen)):
        _check_prob(n, p)
    return upper * p_opt + (1.0 - upper) * p_other - p_chosen


@dataclass(frozen=True)
class RegretTrace:
    step: np.ndarray

    @property
    def cumulative(self) -> np.ndarray:
        return np.cumsum(self.step)

    def __len__(self):
        return len(self.step)


def optimal_action(rec: DecisionRecord) -> int:
    """Action with the higher true success probability; ties go to not sending."""
    return 1 if rec.true_prob_send > rec.true_prob_nosend else 0


def cumulative_regret(records: Sequence[DecisionRecord], expected: bool = False, upper: float = 0.95) -> RegretTrace:
    """Per-decision regret in decision-time order.

    With ``expected=True`` the realized action is replaced by its
    expectation under the logged policy probability.
    """
    steps = []
    for rec in sorted(records, key=lambda r: r.decision_index):
        if not rec.has_truth:
            raise ValueError(f"record {rec.decision_index} has no true success probabilities")
        a_star = optimal_action(rec)
        p_opt = rec.true_prob_send if a_star else rec.true_prob_nosend
        p_oth = rec.true_prob_nosend if a_star else rec.true_prob_send
        if expected:
            chosen = rec.policy_prob * rec.true_prob_send + (1 - rec.policy_prob) * rec.true_prob_nosend
        else:
            chosen = rec.true_prob_send if rec.action else rec.true_prob_nosend
        steps.append(step_regret(p_opt, p_oth, chosen, upper))
    return RegretTrace(np.array(steps, dtype=float))


@dataclass(frozen=True)
class AggregateCurve:
    mean: np.ndarray
    q25: np.ndarray
    q75: np.ndarray
    n_replicates: int
    truncated: bool

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["decision_index", "mean", "q25", "q75"])
        for t, (m, a, b) in enumerate(zip(self.mean, self.q25, self.q75)):
            w.writerow([t, repr(float(m)), repr(float(a)), repr(float(b))])
        return buf.getvalue()


def aggregate_replicates(traces: Sequence[RegretTrace]) -> AggregateCurve:
    """Pointwise mean and interquartile band of cumulative regret, truncated to the shortest trace."""
    if not traces:
        raise ValueError("no traces to aggregate")
    n = min(len(t) for t in traces)
    mat = np.stack([t.cumulative[:n] for t in traces])
    # sort first so the result cannot depend on input order
    mat = np.sort(mat, axis=0)
    return AggregateCurve(
        mean=mat.mean(axis=0),
        q25=np.quantile(mat, 0.25, axis=0),
        q75=np.quantile(mat, 0.75, axis=0),
        n_replicates=len(traces),
        truncated=any(len(t) != n for t in traces),
    )


# --- calibration -------------------------------------------------------------

@dataclass(frozen=True)
class CalibrationBin:
    low: float
    high: float
    n: int
    p_hat: float | None
    ci_low: float | None
    ci_high: float | None
    target: float | None
    covers: bool | None


@dataclass(frozen=True)
class CalibrationReport:
    bins: tuple[CalibrationBin, ...]
    bin_width: float

    @property
    def occupied(self) -> list[CalibrationBin]:
        return [b for b in self.bins if b.n > 0]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bin_low", "bin_high", "n", "p_hat", "ci_low", "ci_high", "covers"])
        for b in self.bins:
            fmt = lambda x: "" if x is None else repr(float(x))  # noqa: E731
            w.writerow([repr(b.low), repr(b.high), b.n, fmt(b.p_hat), fmt(b.ci_low), fmt(b.ci_high),
                        "" if b.covers is None else int(b.covers)])
        return buf.getvalue()


def wald_interval(successes: int, n: int) -> tuple[float, float, float]:
    p = successes / n
    half = Z95 * math.sqrt(p * (1 - p) / n)
    return p, p - half, p + half


def calibration_report(
    records: Iterable[DecisionRecord], bin_width: float = 0.05, target: str = "midpoint"
) -> CalibrationReport:
    """Bin decisions by logged send probability and compare with realized sends.

    Bins are left-closed; probability 1 falls into the last bin.  ``target``
    selects what the interval should cover: the geometric bin midpoint, or
    the mean logged probability inside the bin.
    """
    k = round(1.0 / bin_width)
    if k < 1 or abs(k * bin_width - 1.0) > 1e-9:
        raise ValueError(f"bin width {bin_width} does not divide [0, 1] evenly")
    if target not in ("midpoint", "mean"):
        raise ValueError("target must be 'midpoint' or 'mean'")
    n = np.zeros(k, dtype=int)
    sent = np.zeros(k, dtype=int)
    psum = np.zeros(k)
    for rec in records:
        # small tolerance so 0.8 lands in [0.80, 0.85) despite float error
        j = min(int(math.floor(rec.policy_prob * k + 1e-9)), k - 1)
        n[j] += 1
        sent[j] += rec.action
        psum[j] += rec.policy_prob
    bins = []
    for j in range(k):
        low, high = round(j / k, 12), round((j + 1) / k, 12)
        if n[j] == 0:
            bins.append(CalibrationBin(low, high, 0, None, None, None, None, None))
            continue
        p, lo, hi = wald_interval(int(sent[j]), int(n[j]))
        tgt = (low + high) / 2 if target == "midpoint" else psum[j] / n[j]
        bins.append(CalibrationBin(low, high, int(n[j]), p, lo, hi, float(tgt), bool(lo <= tgt <= hi)))
    return CalibrationReport(tuple(bins), bin_width)


# --- failure monitoring --------------------------------------------------------

@dataclass(frozen=True)
class FailureEntry:
    participant_id: str
    scheduled_day: int
    executed: bool
    status: str
    checksum: str | None
    flags: tuple[str, ...]


@dataclass(frozen=True)
class FailureReport:
    entries: tuple[FailureEntry, ...]

    @property
    def flags(self) -> list[str]:
        return [f for e in self.entries for f in e.flags]

    @property
    def ok(self) -> bool:
        return not self.flags

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["participant_id", "scheduled_day", "executed", "status", "checksum", "flags"])
        for e in self.entries:
            w.writerow([e.participant_id, e.scheduled_day, int(e.executed), e.status, e.checksum or "", ";".join(e.flags)])
        return buf.getvalue()


def failure_report(schedule: Iterable[tuple[str, int]], events: Iterable) -> FailureReport:
    """Compare scheduled (participant, day) updates with executed update events.

    ``events`` are objects with participant_id, scheduled_day, executed,
    health and checksum attributes.
    """
    seen = {}
    for ev in events:
        seen[(ev.participant_id, ev.scheduled_day)] = ev
    entries = []
    for pid, day in schedule:
        ev = seen.get((pid, day))
        if ev is None:
            entries.append(FailureEntry(pid, day, False, "missing", None, (f"{pid}@{day}:missing-update",)))
            continue
        status = "not-run" if ev.health is None else ev.health.status
        flags = []
        if not ev.executed or status != "ok":
            detail = "" if ev.health is None else ",".join(ev.health.offending)
            flags.append(f"{pid}@{day}:{status}" + (f"[{detail}]" if detail else ""))
        entries.append(FailureEntry(pid, day, bool(ev.executed), status, ev.checksum, tuple(flags)))
    return FailureReport(tuple(entries))
