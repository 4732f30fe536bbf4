import csv
import io
import math
from collections import Counter

import numpy as np
import pytest

from pjitai.domain import ContextVector, StudyClock, binary_schema, default_schema
from pjitai.learner import PosteriorDraws, SamplerConfig, predict_success
from pjitai.modelspec import complicated_terms
from pjitai.simulator import (
    GenerativeModel,
    TrialAborted,
    TrialConfig,
    generative_spec,
    sample_coefficients,
    simulate_trial,
    true_success_prob,
)

FAST = SamplerConfig(chains=4, warmup_draws=200, kept_draws=300)


def csv_logit(text, ctx_map, action, s1, s2):
    """Evaluate a coefficient file by matching its factor tokens against the inputs."""
    total = 0.0
    for row in csv.DictReader(io.StringIO(text)):
        ok = True
        for tok in filter(None, row["factors"].split(";")):
            if tok == "A":
                ok &= action == 1
            elif tok == "S1":
                ok &= s1 == 1
            elif tok == "S2":
                ok &= s2 == 1
            else:
                var, lv = tok.split("=", 1)
                ok &= ctx_map[var] == lv
        if ok:
            total += float(row["value"])
    return total


def test_setting1_treatment_mean_over_seeds():
    schema = binary_schema(3)
    vals = [sample_coefficients(1, schema, s).coefficient("A") for s in range(10_000)]
    assert abs(np.mean(vals) - 0.4) < 0.005


def test_setting1_has_no_treatment_interactions():
    for schema in (binary_schema(3), default_schema()):
        m = sample_coefficients(1, schema, 3)
        treat_cols = [c for c in m.columns if c.startswith("A")]
        assert treat_cols == ["A"]


def test_setting2_term_set_and_order4_bounds():
    schema = default_schema()
    for seed in range(20):
        m = sample_coefficients(2, schema, seed)
        assert set(m.spec.fixed_terms) == set(complicated_terms(schema, random_effects=False))
        order4 = [v for (c, t), v in zip(m.column_meta(), m.coefficients) if t.interaction_order == 4]
        assert order4 and max(abs(v) for v in order4) < 0.1


def test_setting2_special_means():
    schema = binary_schema(3)
    draws = np.array([sample_coefficients(2, schema, s).coefficients for s in range(3000)])
    cols = sample_coefficients(2, schema, 0).columns
    mean = dict(zip(cols, draws.mean(0)))
    assert mean["A"] == pytest.approx(-0.4, abs=0.01)
    for c in ("A:time_of_week=weekend", "A:time_of_day=night", "A:past_engagement=1"):
        assert mean[c] == pytest.approx(0.5, abs=0.005)
    assert mean["A:S1"] == pytest.approx(-0.1, abs=0.003)
    assert mean["A:S2"] == pytest.approx(-0.1, abs=0.003)


def test_unknown_setting():
    with pytest.raises(ValueError):
        sample_coefficients(3, binary_schema(3), 0)


def test_zero_model_gives_half():
    schema = default_schema()
    spec = generative_spec(2, schema)
    m = GenerativeModel(2, spec, np.zeros(len(spec.fixed_columns())))
    for ctx in list(m_ctx for m_ctx in schema.enumerate_contexts() if "Unknown" not in m_ctx.levels)[:50]:
        assert true_success_prob(m, schema, ctx, 1, StudyClock(100)) == 0.5


def test_setting1_contrast_is_treatment_coefficient():
    schema = default_schema()
    m = sample_coefficients(1, schema, 11)
    b1 = m.coefficient("A")
    logit = lambda p: math.log(p / (1 - p))  # noqa: E731
    for i, ctx in enumerate(c for c in schema.enumerate_contexts() if "Unknown" not in c.levels):
        if i % 37:
            continue
        for day in (0, 60, 120):
            d = logit(true_success_prob(m, schema, ctx, 1, StudyClock(day))) - logit(
                true_success_prob(m, schema, ctx, 0, StudyClock(day)))
            assert d == pytest.approx(b1, abs=1e-9)


def test_coefficient_file_independent_evaluation():
    schema = default_schema()
    m = sample_coefficients(2, schema, 5)
    text = m.to_csv()
    assert text.splitlines()[0] == "term_id,factors,interaction_order,period_round,value"
    assert GenerativeModel.from_csv(text, 2, schema).coefficients.tolist() == m.coefficients.tolist()
    ctx = ContextVector(("weekend", "night", "social", "cold", "1"))
    for action in (0, 1):
        for day, (s1, s2) in ((10, (0, 0)), (70, (1, 0)), (150, (1, 1))):
            eta = csv_logit(text, ctx.as_dict(schema), action, s1, s2)
            assert true_success_prob(m, schema, ctx, action, StudyClock(day)) == pytest.approx(
                1 / (1 + math.exp(-eta)), abs=1e-12)


def test_learner_prediction_matches_truth():
    schema = default_schema()
    m = sample_coefficients(2, schema, 8)
    k = len(m.coefficients)
    draws = PosteriorDraws(m.coefficients[None, :], tuple(m.columns), k, 0, (), 0, np.ones(k), np.ones(k), 0, 2,
                           m.spec, {})
    ctx = ContextVector(("holiday", "morning", "working_out", "hot", "0"))
    for day in (3, 80, 140):
        p = predict_success(draws, m.spec, schema, ctx, 1, StudyClock(day))[0]
        assert p == pytest.approx(true_success_prob(m, schema, ctx, 1, StudyClock(day)), abs=1e-12)


def test_before_first_update_everything_is_initial():
    schema = binary_schema(3)
    res = simulate_trial(TrialConfig(participants=5, study_length=55, seed=1), "ls4l2", sample_coefficients(1, schema, 0),
                         schema, sampler=FAST)
    assert res.records and all(r.policy_prob == 0.8 for r in res.records)
    assert res.updates == []


def test_send_fraction_without_updates():
    schema = binary_schema(3)
    res = simulate_trial(TrialConfig(participants=20, update_days=(), seed=2), "simple",
                         sample_coefficients(1, schema, 0), schema)
    n = len(res.records)
    frac = sum(r.action for r in res.records) / n
    assert abs(frac - 0.8) < 3 * math.sqrt(0.8 * 0.2 / n)


def test_zero_model_reward_rate():
    schema = binary_schema(3)
    spec = generative_spec(1, schema)
    zero = GenerativeModel(1, spec, np.zeros(len(spec.fixed_columns())))
    res = simulate_trial(TrialConfig(participants=40, update_days=(), seed=3), "simple", zero, schema)
    n = len(res.records)
    assert abs(sum(r.reward for r in res.records) / n - 0.5) < 3 * math.sqrt(0.25 / n)


def test_schedule_shape():
    schema = binary_schema(3)
    res = simulate_trial(TrialConfig(participants=6, update_days=(), seed=4), "simple", sample_coefficients(1, schema, 0),
                         schema)
    per_week = Counter((r.participant_id, r.days_in_study // 7) for r in res.records)
    assert set(per_week.values()) <= {2, 3, 4}
    assert len({(r.participant_id, r.days_in_study) for r in res.records}) == len(res.records)
    assert [r.decision_index for r in res.records] == list(range(len(res.records)))


@pytest.fixture(scope="module")
def small_trial():
    schema = binary_schema(3)
    cfg = TrialConfig(participants=6, stagger_weeks=2, study_length=130, seed=7)
    model = sample_coefficients(2, schema, 1)
    return schema, cfg, model, simulate_trial(cfg, "ls4l2", model, schema, sampler=FAST, learner_seed=5)


def test_two_updates_per_participant(small_trial):
    _, cfg, _, res = small_trial
    by_pid = Counter(e.participant_id for e in res.updates)
    assert set(by_pid.values()) == {2} and len(by_pid) == cfg.participants
    assert {e.scheduled_day for e in res.updates} == {56, 112}
    assert all(e.executed and e.checksum for e in res.updates)


def test_policy_changes_only_after_update(small_trial):
    _, _, _, res = small_trial
    for r in res.records:
        if r.days_in_study < 56:
            assert r.policy_prob == 0.8
        else:
            assert 0.05 <= r.policy_prob <= 0.95


def test_records_carry_truth(small_trial):
    schema, _, model, res = small_trial
    for r in res.records[::25]:
        assert r.true_prob_send == pytest.approx(true_success_prob(model, schema, r.context, 1, StudyClock(r.days_in_study)))


def test_trial_reproducible(small_trial):
    schema, cfg, model, res = small_trial
    again = simulate_trial(cfg, "ls4l2", model, schema, sampler=FAST, learner_seed=5)
    assert again.records == res.records


def test_broken_learner_aborts(monkeypatch):
    from pjitai import simulator
    from pjitai.learner import FitHealth

    monkeypatch.setattr(simulator, "fit_posterior", lambda *a, **k: (None, FitHealth("broken-no-draws", ("boom",))))
    schema = binary_schema(3)
    with pytest.raises(TrialAborted) as info:
        simulate_trial(TrialConfig(participants=3, study_length=70, seed=1), "simple", sample_coefficients(1, schema, 0),
                       schema)
    assert info.value.result.updates and not info.value.result.updates[0].executed


def test_config_validation():
    with pytest.raises(ValueError):
        TrialConfig(update_days=(112, 56))
    with pytest.raises(ValueError):
        TrialConfig(decisions_per_week=(0,))
