import pytest
from hypothesis import given
from hypothesis import strategies as st

from pjitai.domain import (
    UNKNOWN,
    ContextVector,
    CovariateSchema,
    DecisionRecord,
    StudyClock,
    ValidationError,
    Variable,
    binary_schema,
    default_schema,
    log_columns,
    observed_levels,
    period_indicators,
    records_from_csv,
    records_from_jsonl,
    records_to_csv,
    records_to_jsonl,
    validate_context,
)


@pytest.mark.parametrize("day,expected", [(0, (0, 0)), (56, (0, 0)), (57, (1, 0)), (112, (1, 0)), (113, (1, 1))])
def test_period_boundaries(day, expected):
    assert period_indicators(day) == expected


def test_negative_day_rejected():
    with pytest.raises(ValueError):
        period_indicators(-1)


@given(st.integers(0, 10_000))
def test_s2_implies_s1(day):
    s1, s2 = period_indicators(day)
    assert s2 <= s1
    assert StudyClock(day).s1 == s1 and StudyClock(day).s2 == s2


def test_unknown_reserved_once():
    v = Variable("w", ("a", "b"))
    assert v.levels.count(UNKNOWN) == 1
    assert v.known_levels == ("a", "b")
    assert Variable("w", ("a", UNKNOWN, "b")).levels.count(UNKNOWN) == 1
    with pytest.raises(ValidationError):
        Variable("w", ("a", "a"))
    with pytest.raises(ValidationError):
        Variable("w", ())


def test_default_schema_shape():
    s = default_schema()
    assert s.names == ("time_of_week", "time_of_day", "situation", "weather", "past_engagement")
    assert all(UNKNOWN in v.levels for v in s.variables)
    assert s["weather"].reference == "cool"
    assert s.n_contexts() == 4 * 5 * 5 * 6 * 3
    assert CovariateSchema.from_dict(s.to_dict()) == s


def test_validate_context_reports_offender():
    s = default_schema()
    ok = ContextVector(("weekend", "night", "social", "cold", "1"))
    assert validate_context(ok, s)
    bad = ContextVector(("weekend", "night", "social", "freezing", "1"))
    res = validate_context(bad, s)
    assert not res and res.variable == "weather" and res.level == "freezing"
    assert not validate_context(ContextVector(("weekend",)), s)


def test_decision_record_invariants():
    ctx = ContextVector(("weekday",))
    with pytest.raises(ValidationError):
        DecisionRecord("p", 0, 0, ctx, 1.2, 1, 1)
    with pytest.raises(ValidationError):
        DecisionRecord("p", 0, 0, ctx, 0.5, 2, 1)
    with pytest.raises(ValidationError):
        DecisionRecord("p", 0, 0, ctx, 0.5, 1, 1, true_prob_send=0.3)


records_strategy = st.lists(
    st.tuples(
        st.integers(0, 200),
        st.sampled_from(["weekday", "weekend", UNKNOWN]),
        st.sampled_from(["day", "night"]),
        st.floats(0, 1),
        st.integers(0, 1),
        st.integers(0, 1),
        st.one_of(st.none(), st.tuples(st.floats(0, 1), st.floats(0, 1))),
    ),
    max_size=20,
)


@given(records_strategy)
def test_log_round_trip(rows):
    schema = binary_schema(2)
    recs = [
        DecisionRecord(f"p{i % 3}", i, d, ContextVector((w, t)), p, a, y, *(truth or (None, None)))
        for i, (d, w, t, p, a, y, truth) in enumerate(rows)
    ]
    assert records_from_csv(records_to_csv(recs, schema), schema) == recs
    assert records_from_jsonl(records_to_jsonl(recs, schema), schema) == recs


def test_log_rejects_inconsistent_periods():
    schema = binary_schema(1)
    rec = DecisionRecord("p", 0, 100, ContextVector(("weekday",)), 0.5, 1, 0)
    text = records_to_csv([rec], schema).replace(",1,0,0.5", ",0,0,0.5")
    with pytest.raises(ValidationError):
        records_from_csv(text, schema)


def test_log_columns_order():
    cols = log_columns(binary_schema(2))
    assert cols[:3] == ["participant_id", "decision_index", "days_in_study"]
    assert cols[3:5] == ["time_of_week", "time_of_day"]


def test_observed_levels():
    schema = binary_schema(1)
    recs = [DecisionRecord("p", i, 0, ContextVector((lv,)), 0.5, 0, 0) for i, lv in enumerate(["weekday", UNKNOWN])]
    assert observed_levels(recs, schema) == {"time_of_week": {"weekday", UNKNOWN}}
