import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from rdmediation.core import (
    DatasetError,
    DesignMatrixSpec,
    IntervalSummary,
    Schema,
    SubjectRecord,
    design_matrix,
    enumerate_strata,
    expand_design,
    load_dataset,
    outcome_blocks,
    spec_from_dict,
    spec_to_dict,
    stratum_index,
    stratum_of,
    write_dataset,
)

SCHEMA = Schema.from_dict({
    "age": ["age50_65", "lt50", "gt65"],
    "sex": ["male", "female"],
    "income": ["inc40_60", "lt40", "inc60_80", "gt80"],
    "stage": ["stageII", "stageI", "stageIII", "stageIV"],
})


def test_strata_counts():
    assert len(enumerate_strata(Schema.from_dict({"sex": "ab", "stage": "1234"}))) == 8
    assert len(enumerate_strata(SCHEMA)) == 96
    only = enumerate_strata(Schema())
    assert len(only) == 1 and only[0].levels == () and only[0].label == "all"


def test_stratum_index_bijection():
    strata = enumerate_strata(SCHEMA)
    assert [s.index for s in strata] == list(range(96))
    for s in strata:
        assert stratum_index(SCHEMA, s.levels) == s.index
    assert strata[0].levels == ("age50_65", "male", "inc40_60", "stageII")
    assert strata[1].levels == ("age50_65", "male", "inc40_60", "stageI")


def test_load_row(tmp_path):
    f = tmp_path / "d.csv"
    f.write_text("time,event,group,mediator,age,sex,income,stage\n1200,1,0,27.3,age50_65,male,inc40_60,stageII\n")
    (r,) = load_dataset(f, SCHEMA)
    assert r == SubjectRecord(1200.0, True, 0, 27.3, ("age50_65", "male", "inc40_60", "stageII"))
    assert stratum_of(SCHEMA, r).index == 0


def test_load_errors_name_rows(tmp_path):
    f = tmp_path / "d.csv"
    f.write_text(
        "time,event,group,mediator,age,sex,income,stage\n"
        "1200,1,0,27.3,age50_65,male,inc40_60,stageII\n"
        "-5,1,0,27.3,age50_65,male,inc40_60,stageII\n"
        "10,1,0,27.3,age50_65,other,inc40_60,stageII\n"
        "10,1,0,abc,age50_65,male,inc40_60,stageII\n"
    )
    with pytest.raises(DatasetError) as exc:
        load_dataset(f, SCHEMA)
    msg = str(exc.value)
    assert "row 2" in msg and "'time'" in msg
    assert "row 3" in msg and "'sex'" in msg
    assert "row 4" in msg and "'mediator'" in msg
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path / "missing.csv", SCHEMA)
    g = tmp_path / "h.csv"
    g.write_text("time,event,group,mediator\n1,1,0,20\n")
    with pytest.raises(DatasetError, match="header"):
        load_dataset(g, SCHEMA)


def test_empty_dataset_warns(tmp_path, caplog):
    f = tmp_path / "d.csv"
    f.write_text("time,event,group,mediator\n")
    with caplog.at_level(logging.WARNING):
        assert load_dataset(f, Schema()) == []
    assert "no rows" in caplog.text


def test_record_invariants():
    with pytest.raises(DatasetError):
        SubjectRecord(0.0, True, 0, 25.0)
    with pytest.raises(DatasetError):
        SubjectRecord(1.0, True, 0, -1.0)
    with pytest.raises(DatasetError):
        SubjectRecord(1.0, True, 2, 25.0)


def test_interval_summary_kind():
    with pytest.raises(ValueError):
        IntervalSummary(1.0, 0.5, 1.5, "bayes")


def test_expand_linear():
    schema = Schema.from_dict({"sex": ["male", "female"]})
    spec = DesignMatrixSpec(schema=schema, degree=1, center=25.0)
    x = expand_design(SubjectRecord(10.0, True, 1, 27.0, ("female",)), spec)
    assert_array_equal(x, [1, 1, 2.0, 1])
    assert spec.column_names() == ["(intercept)", "group", "med", "sex=female"]


def test_expand_quadratic_interactions():
    schema = Schema.from_dict({"sex": ["male", "female"]})
    spec = DesignMatrixSpec(schema=schema, degree=2, center=25.0, group_mediator=True,
                            group_covariate=("sex",), mediator_covariate=("sex",))
    m = 27.5
    x0 = expand_design(SubjectRecord(10.0, True, 0, m, ("female",)), spec)
    b = spec.blocks()
    assert_array_equal(x0[b["group_med"]], 0.0)
    assert_array_equal(x0[b["group_cov"]], 0.0)
    assert x0[b["med"][0]] == 2.5 and x0[b["med"][1]] == 6.25
    assert_array_equal(x0[b["med_cov"]].ravel(), [2.5, 6.25])
    x1 = expand_design(SubjectRecord(10.0, True, 1, m, ("female",)), spec)
    assert_array_equal(x1[b["group_med"]], [2.5, 6.25])
    assert spec.n_columns == len(x1) == 1 + 1 + 2 + 2 + 1 + 1 + 2


def test_no_intercept_variant():
    spec = DesignMatrixSpec(intercept=False, degree=1)
    assert spec.column_names() == ["group", "med"]


@settings(max_examples=50, deadline=None)
@given(
    st.lists(st.tuples(st.integers(0, 2), st.integers(0, 1)), min_size=1, max_size=20),
    st.floats(15, 50),
)
def test_dummy_coding_property(idx, m):
    schema = Schema.from_dict({"a": ["x", "y", "z"], "b": ["u", "v"]})
    spec = DesignMatrixSpec(schema=schema, degree=1)
    levels = [(schema.factors[0].levels[i], schema.factors[1].levels[j]) for i, j in idx]
    X = spec.matrix(np.zeros(len(idx)), np.full(len(idx), m), levels)
    cov = X[:, spec.blocks()["cov"]]
    # each factor contributes at most one active dummy, none for its reference level
    for r, (i, j) in enumerate(idx):
        assert cov[r, :2].sum() == (i > 0) and cov[r, 2:].sum() == (j > 0)
    assert_array_equal(X, spec.matrix(np.zeros(len(idx)), np.full(len(idx), m), levels))


def test_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    recs = [
        SubjectRecord(float(rng.exponential(500)), bool(rng.integers(2)), int(rng.integers(2)),
                      float(rng.normal(27, 3)), (str(rng.choice(["lt50", "gt65"])), "male", "lt40", "stageI"))
        for _ in range(30)
    ]
    f = tmp_path / "d.csv"
    write_dataset(recs, f, SCHEMA)
    back = load_dataset(f, SCHEMA)
    assert back == recs
    g = tmp_path / "e.csv"
    write_dataset(back, g, SCHEMA)
    assert f.read_bytes() == g.read_bytes()


def test_spec_serialization():
    spec = DesignMatrixSpec(schema=SCHEMA, degree=2, center=27.1, group_mediator=True, group_covariate=("age",))
    assert spec_from_dict(spec_to_dict(spec)) == spec


def test_outcome_blocks_stratum():
    schema = Schema.from_dict({"age": ["y", "o"]})
    spec = DesignMatrixSpec(schema=schema, degree=1, group_mediator=True,
                            group_covariate=("age",), mediator_covariate=("age",))
    names = spec.column_names()
    coef = np.arange(1.0, len(names) + 1)
    b = outcome_blocks(coef, spec, ("o",))
    c = dict(zip(names, coef))
    assert_allclose(b.group_effect, c["group"] + c["group:age=o"])
    assert_allclose(b.med, [c["med"] + c["med:age=o"]])
    assert_allclose(b.group_med, [c["group:med"]])
    draws = np.vstack([coef, 2 * coef])
    assert outcome_blocks(draws, spec, ("y",)).group_effect.shape == (2,)


def test_design_matrix_matches_rows():
    recs = [SubjectRecord(1.0, True, g, m) for g, m in [(0, 20.0), (1, 30.0)]]
    spec = DesignMatrixSpec(degree=2, center=25.0, group_mediator=True)
    X = design_matrix(recs, spec)
    assert_array_equal(X[1], expand_design(recs[1], spec))
    assert_array_equal(X[1], [1, 1, 5, 25, 5, 25])
