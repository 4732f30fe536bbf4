import itertools
from math import comb

import pytest
from hypothesis import given
from hypothesis import strategies as st

from pjitai.domain import UNKNOWN, ContextVector, DecisionRecord, binary_schema, default_schema
from pjitai.modelspec import (
    RANDOM,
    ModelSpec,
    ModelTerm,
    SpecConfig,
    baseline_terms,
    build_model_spec,
    complicated_terms,
    count_parameters,
    fixed_spec,
    full_encoding,
    model_a_terms,
    model_b_terms,
    simple_terms,
)


def rec(ctx, action, day=0, pid="p0", i=0):
    return DecisionRecord(pid, i, day, ContextVector(ctx), 0.5, action, 0)


def balanced(schema, reps, day=0, pids=("p0",)):
    """Every known context x action combination repeated ``reps`` times."""
    out = []
    known = [v.known_levels for v in schema.variables]
    for ctx in itertools.product(*known):
        for a in (0, 1):
            for r in range(reps):
                out.append(rec(ctx, a, day, pids[r % len(pids)], len(out)))
    return out


def kinds(spec, r=None):
    return [(t.kind, t.factors) for t in spec.fixed_terms if r is None or t.period_round == r]


def test_empty_data_gives_intercept_and_treatment():
    spec = build_model_spec([], default_schema())
    assert [(t.kind, t.period_round) for t in spec.terms] == [("intercept", 0), ("treatment", 0)]


@pytest.mark.parametrize("order_kind", [("intercept", 1), ("main", 1), ("treatment", 1), ("two_way", 2),
                                        ("treatment_x", 2), ("treatment_xx", 3)])
def test_interaction_order(order_kind):
    kind, order = order_kind
    n = {"intercept": 0, "treatment": 0, "main": 1, "treatment_x": 1}.get(kind, 2)
    factors = ("a", "b")[:n]
    assert ModelTerm(kind, factors).interaction_order == order
    assert ModelTerm(kind, factors, 1).interaction_order == (order + 1 if kind != "intercept" else 1)


def test_random_scope_restricted():
    with pytest.raises(ValueError):
        ModelTerm("two_way", ("a", "b"), 0, RANDOM)
    ModelTerm("treatment_x", ("a",), 0, RANDOM)


def test_spec_invariants():
    enc = full_encoding(binary_schema(1))
    with pytest.raises(ValueError):
        ModelSpec((ModelTerm("treatment"),), enc)
    with pytest.raises(ValueError):
        ModelSpec((ModelTerm("intercept"), ModelTerm("treatment"), ModelTerm("treatment")), enc)


def test_full_data_admits_all_round0_terms():
    schema = binary_schema(3)
    spec = build_model_spec(balanced(schema, 5), schema, SpecConfig(random_effects=False))
    expected = set((t.kind, t.factors) for t in complicated_terms(schema, random_effects=False) if t.period_round == 0)
    assert set(kinds(spec, 0)) == expected
    # no S1/S2 rows, so nothing in later rounds
    assert kinds(spec, 1) == [] and kinds(spec, 2) == []


def test_cell_below_threshold_excludes_interaction():
    schema = binary_schema(2)
    data = balanced(schema, 5)
    # drop one (weekend, night, action 1) row: that cell falls to 4
    drop = next(i for i, r in enumerate(data) if r.context.levels == ("weekend", "night") and r.action == 1)
    data = data[:drop] + data[drop + 1 :]
    got = kinds(build_model_spec(data, schema, SpecConfig(random_effects=False)), 0)
    assert ("treatment_xx", ("time_of_week", "time_of_day")) not in got
    assert ("two_way", ("time_of_week", "time_of_day")) in got
    assert ("treatment_x", ("time_of_week",)) in got


def test_unknown_rows_do_not_count():
    schema = binary_schema(1)
    data = [rec(("weekday",), a, i=i) for i, a in enumerate([0, 1] * 5)]
    data += [rec((UNKNOWN,), a, i=100 + i) for i, a in enumerate([0, 1] * 50)]
    got = kinds(build_model_spec(data, schema, SpecConfig(random_effects=False)), 0)
    assert ("main", ("time_of_week",)) not in got


def test_interaction_cap_and_priority():
    schema = binary_schema(3)
    spec = build_model_spec(balanced(schema, 5), schema, SpecConfig(max_interaction_terms=2, random_effects=False))
    inter = [(t.kind, t.factors) for t in spec.fixed_terms if t.interaction_order >= 2]
    assert inter == [("two_way", ("time_of_week", "time_of_day")), ("two_way", ("time_of_week", "past_engagement"))]


def test_rounds_use_period_subsets():
    schema = binary_schema(1)
    early = balanced(schema, 5, day=10)
    late = balanced(schema, 5, day=60)
    spec = build_model_spec(early + late, schema, SpecConfig(random_effects=False))
    r1 = kinds(spec, 1)
    assert ("intercept", ()) in r1 and ("treatment", ()) in r1 and ("main", ("time_of_week",)) in r1
    assert kinds(spec, 2) == []
    for t in spec.fixed_terms:
        if t.period_round == 1 and t.kind == "main":
            assert t.interaction_order == 2


def test_random_terms_follow_fixed_and_cohort():
    schema = binary_schema(1)
    data = balanced(schema, 10, pids=("a", "b"))
    spec = build_model_spec(data, schema, SpecConfig(), random_participants=["a"])
    rand = [(t.kind, t.factors) for t in spec.random_terms]
    assert rand == [("intercept", ()), ("treatment", ()), ("main", ("time_of_week",)), ("treatment_x", ("time_of_week",))]
    # cohort with too few rows gets only the default deviations
    thin = data + [rec(("weekday",), 0, pid="c", i=999)]
    spec = build_model_spec(thin, schema, SpecConfig(), random_participants=["c"])
    assert [(t.kind, t.factors) for t in spec.random_terms] == [("intercept", ()), ("treatment", ())]


def test_simple_and_complicated_reachable():
    schema = binary_schema(3)
    data = balanced(schema, 5, day=0) + balanced(schema, 5, day=80) + balanced(schema, 5, day=130)
    spec = build_model_spec(data, schema, SpecConfig(max_interaction_terms=100, random_effects=False))
    assert set(spec.fixed_terms) == set(complicated_terms(schema, random_effects=False))
    # confounded contexts and actions leave empty interaction cells, so only mains pass
    confounded = [
        rec(ctx, a, day, i=i)
        for i, (ctx, a, day) in enumerate(
            [(("weekday", "day", "0"), 0, d) for d in (0, 80, 130)] * 6
            + [(("weekend", "night", "1"), 1, d) for d in (0, 80, 130)] * 6
        )
    ]
    spec_simple = build_model_spec(confounded, schema, SpecConfig(max_interaction_terms=100, random_effects=False))
    assert set(spec_simple.fixed_terms) == set(simple_terms(schema, random_effects=False))


@given(st.lists(st.tuples(st.sampled_from(["weekday", "weekend", UNKNOWN]), st.sampled_from(["day", "night", UNKNOWN]),
                          st.integers(0, 1), st.integers(0, 170)), max_size=80),
       st.integers(1, 6), st.integers(0, 5))
def test_spec_properties(rows, m, cap):
    schema = binary_schema(2)
    data = [rec((w, t), a, d, i=i) for i, (w, t, a, d) in enumerate(rows)]
    cfg = SpecConfig(min_cell_size=m, max_interaction_terms=cap, random_effects=False)
    spec = build_model_spec(data, schema, cfg)
    assert spec.n_interactions() <= cap
    assert build_model_spec(data, schema, cfg) == spec
    assert ModelSpec.from_json(spec.to_json()) == spec
    if cap >= 20:
        # cell counts only grow when rows are added
        more = build_model_spec(data + data, schema, cfg)
        assert set(spec.terms) <= set(more.terms)


@given(st.lists(st.tuples(st.sampled_from(["weekday", "weekend"]), st.sampled_from(["day", "night"]),
                          st.integers(0, 1)), max_size=60), st.integers(1, 4))
def test_monotone_in_data_without_cap(rows, m):
    schema = binary_schema(2)
    data = [rec((w, t), a, i=i) for i, (w, t, a) in enumerate(rows)]
    cfg = SpecConfig(min_cell_size=m, max_interaction_terms=100, random_effects=False)
    small = build_model_spec(data[: len(data) // 2], schema, cfg)
    big = build_model_spec(data, schema, cfg)
    assert set(small.fixed_terms) <= set(big.fixed_terms)


def test_parameter_counts_five_binary():
    schema = binary_schema(5)
    a = ModelSpec(model_a_terms(schema), full_encoding(schema))
    b = ModelSpec(model_b_terms(schema), full_encoding(schema))
    # independent tally: treatment + mains + unordered pairs + treatment-by-covariate + treatment-by-pair
    assert count_parameters(a, include_intercept=False) == 1 + 5
    assert count_parameters(b, include_intercept=False) == 1 + 5 + comb(5, 2) + 5 + comb(5, 2)
    assert count_parameters(ModelSpec((ModelTerm("intercept"),), full_encoding(schema))) == 1


def test_one_hot_expansion_counts_levels():
    schema = default_schema()
    spec = ModelSpec((ModelTerm("intercept"), ModelTerm("main", ("weather",)),
                      ModelTerm("treatment_xx", ("time_of_week", "weather"))), full_encoding(schema))
    assert count_parameters(spec) == 1 + 4 + 2 * 4
    assert "A:time_of_week=weekend:weather=cold" in spec.fixed_columns()


def test_encoding_only_observed_levels():
    schema = binary_schema(1)
    spec = fixed_spec((ModelTerm("intercept"), ModelTerm("main", ("time_of_week",))),
                      [rec(("weekday",), 0), rec((UNKNOWN,), 0)], schema)
    assert spec.encoding_for("time_of_week").levels == (UNKNOWN,)


@pytest.mark.parametrize("roster,expected", [
    ([(50, "F"), (50, "F")], []),
    ([(40, "F"), (50, "M")], [("baseline_main", ("age",)), ("baseline_main", ("gender",))]),
    ([(40, "F"), (45, "F"), (50, "F"), (55, "F")], [("baseline_main", ("age",)), ("baseline_x_treatment", ("age",))]),
])
def test_baseline_rules(roster, expected):
    got = [(t.kind, t.factors) for t in baseline_terms(roster, SpecConfig(enable_baseline_rules=True))]
    assert got == expected


def test_baseline_three_way_needs_cell_of_four():
    roster = [(30, "F")] * 4 + [(60, "M")] * 4
    got = [t.kind for t in baseline_terms(roster)]
    assert "baseline_three_way" in got
