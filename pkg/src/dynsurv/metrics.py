"""Predictive accuracy measures for right-censored survival data.

Risk scores follow the convention "higher means higher risk"; at a given
evaluation time the score used for a fitted model is ``1 - S_i(t)``.
"""

from __future__ import annotations

import numpy as np
import pandas as pd

from dynsurv.data import kaplan_meier

METRICS = ("tdauc", "c", "brier")


def _check(risk, times, events):
    risk = np.asarray(risk, dtype=float)
    times = np.asarray(times, dtype=float)
    events = np.asarray(events, dtype=float)
    if not (risk.shape == times.shape == events.shape) or risk.ndim != 1:
        raise ValueError("risk, times and events must be 1-d arrays of equal length")
    if np.isnan(risk).any():
        raise ValueError("risk scores contain NaN")
    return risk, times, events


def concordance_index(risk, times, events):
    """Harrell's C.

    A pair is usable when the subject with the shorter time had the event;
    at tied times only an event paired with a censoring counts (the event is
    taken to come first). Tied scores contribute one half.
    """
    risk, times, events = _check(risk, times, events)
    order = np.argsort(times, kind="stable")
    t, d, r = times[order], events[order], risk[order]
    num = 0.0
    den = 0.0
    for i in np.flatnonzero(d == 1):
        later = (t > t[i]) | ((t == t[i]) & (d == 0))
        if not later.any():
            continue
        rj = r[later]
        num += np.sum(r[i] > rj) + 0.5 * np.sum(r[i] == rj)
        den += rj.size
    if den == 0:
        raise ValueError("no comparable pairs for the concordance index")
    return float(num / den)


def td_auc(risk, times, events, eval_time):
    """Cumulative/dynamic AUC at ``eval_time`` with KM-weighted sensitivity.

    For each threshold ``c`` over the sorted distinct scores, with ``p`` the
    share of subjects scoring above ``c`` and ``S_c`` the Kaplan-Meier
    survival at ``eval_time`` among them,

        TP(c) = (1 - S_c) p / (1 - S),   FP(c) = S_c p / S,

    ``S`` being the pooled Kaplan-Meier value. The ROC polygon runs from
    (1, 1) through the thresholds to (0, 0) and is integrated by trapezoids.
    """
    risk, times, events = _check(risk, times, events)
    cases = (times <= eval_time) & (events == 1)
    controls = times > eval_time
    if not cases.any() or not controls.any():
        raise ValueError(f"td_auc at t={eval_time}: need at least one case and one control")
    n = risk.size
    S = float(kaplan_meier(times, events)(eval_time))
    cuts = np.unique(risk)
    # the sets {risk > c} are nested: prefixes of the subjects sorted by
    # decreasing risk, so KM counts for every cut come from cumulative sums
    order = np.argsort(-risk, kind="stable")
    t_o, e_o = times[order], events[order]
    ev_times = np.unique(times[(events == 1) & (times <= eval_time)])
    d = np.cumsum((t_o[:, None] == ev_times[None, :]) & (e_o[:, None] == 1), axis=0)
    r = np.cumsum(t_o[:, None] >= ev_times[None, :], axis=0)
    m = np.searchsorted(-risk[order], -cuts, side="left")  # subjects with risk > c
    p = m / n
    with np.errstate(invalid="ignore", divide="ignore"):
        rows = np.maximum(m - 1, 0)
        frac = np.where(r[rows] > 0, d[rows] / r[rows], 0.0)
    sc = np.prod(1.0 - frac, axis=1) if ev_times.size else np.ones(cuts.size)
    sc = np.where(m > 0, sc, 0.0)
    tp = (1.0 - sc) * p / (1.0 - S)
    fp = sc * p / S
    x = np.r_[1.0, fp]
    y = np.r_[1.0, tp]
    return float(np.sum((x[:-1] - x[1:]) * (y[:-1] + y[1:]) / 2.0))


def censoring_survival(times, events):
    """Reverse Kaplan-Meier estimate of the censoring distribution.

    Censorings tied with events are placed after them.
    """
    times = np.asarray(times, dtype=float)
    events = np.asarray(events, dtype=float)
    return kaplan_meier(times, 1.0 - events, censored_first=True)


def brier_score(surv_at_t, times, events, eval_time):
    """IPCW Brier score of predicted survival probabilities at ``eval_time``."""
    surv_at_t, times, events = _check(surv_at_t, times, events)
    G = censoring_survival(times, events)
    failed = (times <= eval_time) & (events == 1)
    alive = times > eval_time
    g_fail = G.left_limit(times[failed])
    g_alive = float(G(eval_time))
    if np.any(g_fail <= 0) or (alive.any() and g_alive <= 0):
        raise ValueError(f"brier_score at t={eval_time}: censoring survival estimate is zero where a weight is needed")
    total = np.sum(surv_at_t[failed] ** 2 / g_fail)
    if alive.any():
        total += np.sum((1.0 - surv_at_t[alive]) ** 2) / g_alive
    return float(total / times.size)


def evaluate(surv, times, events, eval_times, metrics=METRICS):
    """Metric values for a matrix of predicted survival (subjects x eval_times).

    Returns a frame with columns ``metric, pred_time, value``.
    """
    surv = np.atleast_2d(np.asarray(surv, dtype=float))
    unknown = set(metrics) - set(METRICS)
    if unknown:
        raise ValueError(f"unknown metric(s) {sorted(unknown)}; choose from {METRICS}")
    rows = []
    for m in metrics:
        for k, t in enumerate(eval_times):
            s = surv[:, k]
            if m == "tdauc":
                v = td_auc(1.0 - s, times, events, t)
            elif m == "c":
                v = concordance_index(1.0 - s, times, events)
            else:
                v = brier_score(s, times, events, t)
            rows.append((m, float(t), v))
    return pd.DataFrame(rows, columns=["metric", "pred_time", "value"])
