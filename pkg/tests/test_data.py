import io
import math
import warnings

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dynsurv.data import (
    DataError,
    Dataset,
    Schema,
    StepFunction,
    apply_landmark,
    kaplan_meier,
    load_dataset,
    log_transform,
    write_dataset,
)


def _csv(text):
    return io.StringIO(text)


def test_minimal_dataset():
    ds = load_dataset(_csv("id,time,event\n1,5,1\n"), _csv("id,fuptime,y\n1,0,2.5\n"))
    assert ds.n == 1
    assert len(ds.longitudinal) == 1
    assert ds.longitudinal_vars == ("y",)
    assert ds.baseline == ()


def test_pbc2_shape(pbc2_config):
    schema = Schema.from_dict(pbc2_config.schema)
    ds = load_dataset(pbc2_config.survival, pbc2_config.longitudinal, schema)
    assert ds.baseline == ("baselineAge", "sex", "treatment")
    assert len(ds.longitudinal_vars) == 7
    assert ds.levels["sex"] == ("male", "female")


def test_unknown_longitudinal_id():
    with pytest.raises(DataError, match="'99'"):
        load_dataset(_csv("id,time,event\n1,5,1\n"), _csv("id,fuptime,y\n1,0,1\n99,0,2\n"))


@pytest.mark.parametrize(
    "surv, match",
    [
        ("id,time,event\n1,5,2\n", "outside"),
        ("id,time,event\n1,-1,1\n", "negative"),
        ("id,time,event\n1,5,1\n1,6,0\n", "duplicated"),
        ("id,time,event\n1,abc,1\n", "non-numeric"),
        ("id,time\n1,5\n", "missing mandatory column 'event'"),
    ],
)
def test_survival_validation(surv, match):
    with pytest.raises(DataError, match=match):
        load_dataset(_csv(surv), _csv("id,fuptime,y\n1,0,1\n"))


def test_missing_cells_kept():
    ds = load_dataset(_csv("id,time,event\n1,5,1\n"), _csv("id,fuptime,y,z\n1,0,,1\n1,1,2,\n"))
    assert np.isnan(ds.longitudinal["y"].iloc[0])
    assert np.isnan(ds.longitudinal["z"].iloc[1])


def test_categorical_levels_default_alphabetical():
    ds = load_dataset(
        _csv("id,time,event,sex\n1,5,1,male\n2,3,0,female\n"), _csv("id,fuptime,y\n1,0,1\n2,0,1\n")
    )
    assert ds.levels == {"sex": ("female", "male")}


def test_log_transform():
    ds = load_dataset(_csv("id,time,event\n1,5,1\n"), _csv("id,fuptime,serBilir\n1,0,14.5\n1,1,1.0\n1,2,\n1,3,3.4\n"))
    out = log_transform(ds, ["serBilir"])
    v = out.longitudinal["logSerBilir"].to_numpy()
    assert round(v[0], 4) == 2.6741
    assert v[1] == 0.0
    assert np.isnan(v[2])
    assert v[3] == pytest.approx(1.2237754, abs=1e-7)
    assert out.longitudinal_vars == ("logSerBilir",)


def test_log_transform_rejects_zero():
    ds = load_dataset(_csv("id,time,event\n1,5,1\n"), _csv("id,fuptime,serBilir\n1,0,0.0\n"))
    with pytest.raises(DataError, match="nonpositive"):
        log_transform(ds, ["serBilir"])


def _three_subjects():
    surv = "id,time,event\n1,1.5,1\n2,2.5,0\n3,3.0,1\n"
    long = "id,fuptime,y\n1,0,1\n1,1,2\n2,0,1\n2,1.5,2\n2,2.2,3\n3,0,1\n3,2,2\n3,2.9,3\n"
    return load_dataset(_csv(surv), _csv(long))


def test_landmark_three_subjects():
    lm = apply_landmark(_three_subjects(), 2.0)
    assert list(lm.ids) == ["2", "3"]
    assert lm.longitudinal[["id", "fuptime"]].values.tolist() == [["2", 0.0], ["2", 1.5], ["3", 0.0], ["3", 2.0]]
    assert lm.landmark == 2.0


def test_landmark_early_keeps_baseline_rows():
    lm = apply_landmark(_three_subjects(), 0.5)
    assert (lm.longitudinal["fuptime"] == 0).all()
    assert lm.n == 3


def test_landmark_idempotent_and_errors():
    lm = apply_landmark(_three_subjects(), 2.0)
    assert apply_landmark(lm, 2.0) is lm
    with pytest.raises(DataError):
        apply_landmark(lm, 1.0)
    with pytest.raises(DataError, match="empty risk set"):
        apply_landmark(_three_subjects(), 10.0)


def test_landmark_drops_subjects_without_rows():
    ds = load_dataset(_csv("id,time,event\n1,5,1\n2,5,0\n"), _csv("id,fuptime,y\n1,0,1\n2,3,1\n"))
    with pytest.warns(UserWarning, match="dropping 1 subject"):
        lm = apply_landmark(ds, 2.0)
    assert list(lm.ids) == ["1"]


def test_pbc2_landmark_counts(pbc2):
    assert pbc2.n == 278
    assert int(pbc2.survival["event"].sum()) == 107


def test_km_examples():
    km = kaplan_meier([1, 2, 3, 4], [1, 1, 1, 1])
    assert np.allclose(km([1, 2, 3, 4]), [0.75, 0.5, 0.25, 0.0])
    km = kaplan_meier([1, 2, 3, 4], [0, 0, 0, 0])
    assert np.all(km([0, 1, 5]) == 1.0)
    km = kaplan_meier([1, 2, 3, 4], [1, 0, 1, 1])
    assert np.allclose(km([0.5, 1, 2.5, 3, 3.9, 4]), [1, 0.75, 0.75, 0.375, 0.375, 0.0])


def test_km_ties_events_first():
    # event and censoring tied at 2: the censored subject is still at risk
    km = kaplan_meier([1, 2, 2, 3], [1, 1, 0, 1])
    assert km(2.0) == pytest.approx(0.75 * (1 - 1 / 3))
    km_c = kaplan_meier([1, 2, 2, 3], [1, 1, 0, 1], censored_first=True)
    assert km_c(2.0) == pytest.approx(0.75 * (1 - 1 / 2))


def test_step_function_left_limit():
    f = StepFunction([1.0, 2.0], [0.5, 0.2], 1.0)
    assert f(1.0) == 0.5 and f.left_limit(1.0) == 1.0
    assert f.left_limit(2.0) == 0.5 and f(0.3) == 1.0


surv_data = st.lists(
    st.tuples(st.integers(1, 20).map(float), st.integers(0, 1)), min_size=1, max_size=30
)


@given(surv_data)
def test_km_properties(obs):
    t = np.array([o[0] for o in obs])
    e = np.array([o[1] for o in obs], dtype=float)
    km = kaplan_meier(t, e)
    grid = np.linspace(0, 21, 50)
    v = km(grid)
    assert np.all(np.diff(v) <= 1e-15)
    assert np.all((v >= 0) & (v <= 1))
    if e.all():
        emp = np.array([(t > g).mean() for g in grid])
        assert np.allclose(v, emp, atol=1e-12)


@settings(deadline=None, max_examples=40)
@given(
    st.lists(st.tuples(st.floats(0.1, 10), st.integers(0, 1), st.integers(1, 4)), min_size=1, max_size=8),
    st.floats(0.2, 9.0),
)
def test_landmark_invariants(subjects, tl):
    surv = pd.DataFrame({
        "id": [str(i) for i in range(len(subjects))],
        "time": [s[0] for s in subjects],
        "event": [s[1] for s in subjects],
    })
    long = pd.DataFrame(
        [(str(i), k * s[0] / s[2], float(k)) for i, s in enumerate(subjects) for k in range(s[2])],
        columns=["id", "fuptime", "y"],
    )
    ds = Dataset(surv, long, (), ("y",), ())
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            lm = apply_landmark(ds, tl)
    except DataError:
        assert (surv["time"] <= tl).all()
        return
    assert lm.survival["time"].min() > tl
    assert lm.longitudinal["fuptime"].max() <= tl
    assert set(lm.longitudinal["id"]) == set(lm.ids)
    assert apply_landmark(lm, tl).equals(lm)


def test_round_trip(tmp_path, pbc2_config):
    schema = Schema.from_dict(pbc2_config.schema)
    ds = load_dataset(pbc2_config.survival, pbc2_config.longitudinal, schema)
    sp, lp = tmp_path / "s.csv", tmp_path / "l.csv"
    write_dataset(ds, sp, lp)
    again = load_dataset(sp, lp, ds.schema())
    assert again.equals(ds)


@settings(deadline=None, max_examples=30)
@given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=1, max_size=6))
def test_round_trip_floats(values):
    surv = pd.DataFrame({"id": ["a"], "time": [1.0], "event": [1], "x": [values[0]]})
    long = pd.DataFrame({"id": ["a"] * len(values), "fuptime": [float(k) for k in range(len(values))], "y": values})
    ds = Dataset(surv, long, ("x",), ("y",), ())
    s, l = io.StringIO(), io.StringIO()
    write_dataset(ds, s, l)
    again = load_dataset(io.StringIO(s.getvalue()), io.StringIO(l.getvalue()), ds.schema())
    assert again.equals(ds)
    assert all(math.isclose(a, b, rel_tol=0, abs_tol=0) for a, b in zip(again.longitudinal["y"], values))
