"""Cluster bootstrap optimism correction of predictive performance.

Subjects are resampled with replacement, the whole pipeline (including the
tuning of the penalty) is refitted on every replicate, and the average gap
between the replicate model's performance on the original data and on its own
replicate is added to the apparent performance.
"""

from __future__ import annotations

import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

from dynsurv.metrics import METRICS, evaluate
from dynsurv.pipeline import PipelineConfig, fit_prc

NO_BOOT_WARNING = (
    "n_boots = 0: the bootstrap optimism correction was not computed, "
    "so only the apparent values of the performance measures are reported"
)


def replicate_rng(seed, b):
    """Independent generator for replicate ``b`` under root ``seed``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(b)]))


def resample_clusters(dataset, rng):
    """Draw ``n`` subjects with replacement; each draw becomes a new cluster.

    Copies are renamed ``<source id>#<draw index>`` so that repeated subjects
    stay distinct in risk sets and mixed-model grouping.
    """
    ids = dataset.ids
    n = len(ids)
    if n == 0:
        raise ValueError("cannot resample an empty dataset")
    draws = rng.integers(0, n, size=n)
    new_ids = np.array([f"{ids[i]}#{k}" for k, i in enumerate(draws)], dtype=object)
    surv = dataset.survival.iloc[draws].copy()
    surv["id"] = new_ids
    long = dataset.longitudinal
    pos = pd.Index(ids).get_indexer(long["id"])
    by_subject = np.argsort(pos, kind="stable")  # rows grouped by subject, original order within
    counts = np.bincount(pos, minlength=n)
    first = np.r_[0, np.cumsum(counts)[:-1]]
    lengths = counts[draws]
    out_start = np.r_[0, np.cumsum(lengths)[:-1]]
    within = np.arange(lengths.sum()) - np.repeat(out_start, lengths)
    take = by_subject[np.repeat(first[draws], lengths) + within]
    long = long.iloc[take].copy()
    long["id"] = np.repeat(new_ids, lengths)
    return replace(dataset, survival=surv.reset_index(drop=True), longitudinal=long.reset_index(drop=True))


@dataclass(frozen=True)
class PerformanceReport:
    table: pd.DataFrame
    n_boots: int
    effective_b: int
    seed: int
    config_hash: str
    n_failed: int = 0
    failures: list = field(default_factory=list)

    def to_csv(self, path_or_buf=None):
        return self.table.to_csv(path_or_buf, index=False, float_format="%.17g", na_rep="")

    def wide(self, metric):
        """One metric as ``pred_time, naive, optimism, adjusted``."""
        t = self.table[self.table["metric"] == metric]
        return t[["pred_time", "naive", "optimism", "adjusted"]].reset_index(drop=True)


def _evaluate_model(model, dataset, eval_times, metrics):
    _, surv = model.predict(dataset, eval_times)
    s = dataset.survival
    return evaluate(surv, s["time"].to_numpy(float), s["event"].to_numpy(float), eval_times, metrics)["value"].to_numpy()


_SHARED = {}


def _init_worker(dataset, config, eval_times, metrics, seed):
    _SHARED.update(dataset=dataset, config=config, eval_times=eval_times, metrics=metrics, seed=seed)


def _run_replicate(b):
    ds, config = _SHARED["dataset"], _SHARED["config"]
    eval_times, metrics = _SHARED["eval_times"], _SHARED["metrics"]
    timings = {}
    try:
        boot = resample_clusters(ds, replicate_rng(_SHARED["seed"], b))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            model = fit_prc(boot, config, timings=timings)
            t0 = time.perf_counter()
            apparent = _evaluate_model(model, boot, eval_times, metrics)
            test = _evaluate_model(model, ds, eval_times, metrics)
            timings["metrics_s"] = time.perf_counter() - t0
    except Exception as exc:  # counted and skipped by the caller
        return b, None, f"{type(exc).__name__}: {exc}", timings
    return b, test - apparent, None, timings


def run_cbocp(dataset, config=None, metrics=("tdauc",), eval_times=(3.0,), n_boots=0, seed=0, workers=1, timings=None):
    """Naive and optimism-corrected performance of the pipeline.

    Parameters
    ----------
    dataset : landmarked Dataset
    config : PipelineConfig
    metrics : subset of ``("tdauc", "c", "brier")``
    eval_times : prediction times
    n_boots : number of bootstrap replicates B (>= 0)
    seed : root seed; replicate ``b`` draws from ``SeedSequence([seed, b])``
    workers : processes used for the replicates
    timings : optional dict receiving per-step seconds summed over all fits

    Returns
    -------
    PerformanceReport
    """
    config = config or PipelineConfig()
    metrics = tuple(metrics)
    bad = set(metrics) - set(METRICS)
    if bad:
        raise ValueError(f"unknown metric(s) {sorted(bad)}; choose from {METRICS}")
    eval_times = tuple(float(t) for t in eval_times)
    if n_boots < 0:
        raise ValueError("n_boots must be >= 0")
    if workers < 1:
        raise ValueError("workers must be >= 1")

    t_local = {}
    model = fit_prc(dataset, config, timings=t_local)
    t0 = time.perf_counter()
    naive = _evaluate_model(model, dataset, eval_times, metrics)
    t_local["metrics_s"] = time.perf_counter() - t0

    results = []
    if n_boots == 0:
        warnings.warn(NO_BOOT_WARNING, stacklevel=2)
    elif workers == 1:
        _init_worker(dataset, config, eval_times, metrics, seed)
        try:
            results = [_run_replicate(b) for b in range(n_boots)]
        finally:
            _SHARED.clear()
    else:
        with ProcessPoolExecutor(
            max_workers=workers, initializer=_init_worker, initargs=(dataset, config, eval_times, metrics, seed)
        ) as ex:
            results = list(ex.map(_run_replicate, range(n_boots)))

    results.sort(key=lambda r: r[0])
    diffs = [r[1] for r in results if r[1] is not None]
    failures = [(r[0], r[2]) for r in results if r[1] is None]
    for _, _, _, tm in results:
        for k, v in tm.items():
            t_local[k] = t_local.get(k, 0.0) + v
    if timings is not None:
        timings.update(t_local)
    if failures:
        warnings.warn(f"{len(failures)} of {n_boots} bootstrap replicate(s) failed and were skipped", stacklevel=2)

    eff = len(diffs)
    if eff:
        total = np.zeros_like(naive)
        for d in diffs:
            total = total + d
        optimism = total / eff
        adjusted = naive + optimism
    else:
        if n_boots:
            warnings.warn("no bootstrap replicate succeeded; " + NO_BOOT_WARNING.split(", ", 1)[1], stacklevel=2)
        optimism = np.full_like(naive, np.nan)
        adjusted = np.full_like(naive, np.nan)
    rows = [(m, t) for m in metrics for t in eval_times]
    table = pd.DataFrame(rows, columns=["metric", "pred_time"])
    table["naive"] = naive
    table["optimism"] = optimism
    table["adjusted"] = adjusted
    table["effective_B"] = eff
    return PerformanceReport(table, n_boots, eff, seed, config.digest(), len(failures), failures)
