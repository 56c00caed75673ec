"""Wall-time benchmarks of the pipeline along one axis (n, p, B or cores).

Step times are summed over every pipeline fit in a cell: the fit on the
original data plus one per bootstrap replicate. With several workers the
replicates overlap in time, so their summed step times can exceed the
cell's wall time.
"""

from __future__ import annotations

import os
import platform
import time
import warnings
from dataclasses import dataclass, replace

import numpy as np
import pandas as pd

from dynsurv._backend import BACKEND
from dynsurv.data import apply_landmark
from dynsurv.pipeline import PipelineConfig
from dynsurv.simulate import SimConfig, simulate_prclmm_data
from dynsurv.validation import run_cbocp

AXES = ("n", "p", "B", "cores")
COLUMNS = ["axis", "value", "rep", "step1_s", "step2_s", "step3_s", "metrics_s", "total_s"]


@dataclass(frozen=True)
class BenchSettings:
    n: int = 200
    p: int = 10
    B: int = 50
    cores: int = 1
    eval_times: tuple = (3.0, 4.0, 5.0)
    metrics: tuple = ("tdauc", "c", "brier")
    seed: int = 0


def environment():
    return {
        "cpu_count": os.cpu_count(),
        "usable_cpus": len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else os.cpu_count(),
        "backend": BACKEND,
        "python": platform.python_version(),
        "numpy": np.__version__,
    }


def _cell(axis, value, rep, settings, sim, pipeline):
    s = replace(settings, **{axis: int(value)})
    data, _ = simulate_prclmm_data(replace(sim, n=s.n, p=s.p, p_relevant=min(sim.p_relevant, s.p), seed=s.seed + rep))
    data = apply_landmark(data, sim.landmark)
    n_boots = s.B if axis in ("B", "cores") else 0
    timings = {}
    t0 = time.perf_counter()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        run_cbocp(
            data, pipeline, s.metrics, s.eval_times, n_boots=n_boots,
            seed=s.seed + rep, workers=s.cores, timings=timings,
        )
    total = time.perf_counter() - t0
    return {
        "axis": axis, "value": value, "rep": rep,
        **{k: timings.get(k, 0.0) for k in ("step1_s", "step2_s", "step3_s", "metrics_s")},
        "total_s": total,
    }


def run_bench(axis, grid, reps=1, settings=None, sim=None, pipeline=None, warmup=True, out=None):
    """Time the pipeline for each value of ``grid`` along ``axis``.

    The CBOCP runs only when ``axis`` is ``"B"`` or ``"cores"``. A warm-up
    cell (not recorded) precedes the measurements when ``warmup`` is set.
    Returns a frame with the columns of :data:`COLUMNS`, also written to
    ``out`` when given.
    """
    if axis not in AXES:
        raise ValueError(f"axis must be one of {AXES}, got {axis!r}")
    grid = list(grid)
    if not grid or reps < 1:
        raise ValueError("grid must be nonempty and reps >= 1")
    settings = settings or BenchSettings()
    sim = sim or SimConfig()
    pipeline = pipeline or PipelineConfig(fixed_terms=("fuptime",), random_terms=("fuptime",))
    if warmup:
        small = replace(settings, n=min(settings.n, 50), p=min(settings.p, 2), B=min(settings.B, 1), cores=1)
        _cell("n", small.n, 0, small, sim, pipeline)
    rows = [_cell(axis, v, r, settings, sim, pipeline) for v in grid for r in range(reps)]
    frame = pd.DataFrame(rows, columns=COLUMNS)
    if out is not None:
        frame.to_csv(out, index=False)
    return frame


def summarize(frame):
    """Mean and median total time per grid value."""
    return frame.groupby(["axis", "value"])["total_s"].agg(["mean", "median", "count"]).reset_index()
