import pandas as pd
import pytest

from dynsurv.bench import AXES, COLUMNS, BenchSettings, environment, run_bench, summarize

SMALL = BenchSettings(n=30, p=2, B=2, eval_times=(3.0,), metrics=("c",))


def test_single_value_grid_gives_one_row(tmp_path):
    out = tmp_path / "bench.csv"
    frame = run_bench("n", [30], reps=1, settings=SMALL, warmup=False, out=out)
    assert list(frame.columns) == COLUMNS
    assert len(frame) == 1
    row = frame.iloc[0]
    assert row["axis"] == "n" and row["value"] == 30
    steps = row[["step1_s", "step2_s", "step3_s", "metrics_s"]]
    assert (steps > 0).all() and row["total_s"] > 0
    assert row["total_s"] >= steps.sum() * 0.9
    pd.testing.assert_frame_equal(pd.read_csv(out), frame, check_dtype=False)


def test_rows_per_grid_and_rep():
    frame = run_bench("B", [1, 2], reps=2, settings=SMALL, warmup=True)
    assert len(frame) == 4
    assert list(frame["value"]) == [1, 1, 2, 2] and list(frame["rep"]) == [0, 1, 0, 1]
    s = summarize(frame)
    assert list(s["count"]) == [2, 2]


def test_bad_arguments():
    with pytest.raises(ValueError, match="axis"):
        run_bench("lambda", [1])
    with pytest.raises(ValueError, match="nonempty"):
        run_bench("n", [])
    with pytest.raises(ValueError, match="reps"):
        run_bench("n", [30], reps=0)


def test_environment_descriptor():
    env = environment()
    assert env["cpu_count"] >= 1 and env["backend"] in ("compiled", "python")
    assert set(AXES) == {"n", "p", "B", "cores"}
