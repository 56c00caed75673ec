"""Penalized Cox regression on baseline covariates and random-effect summaries.

The model is fitted by minimizing

    -loglik(beta) / n + lam * (alpha * |beta|_1 + (1 - alpha) / 2 * |beta|_2^2)

with Breslow ties over a decreasing path of ``lam``; the tuning parameters are
chosen by cross-validated partial-likelihood deviance.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from dynsurv import _pykernels
from dynsurv._backend import kernels
from dynsurv.data import Dataset, StepFunction, earliest_or_latest
from dynsurv.lmm import RandomEffectSummary, predict_random_effects

KINDS = ("ridge", "lasso", "elnet")
CD_TOL = 1e-10
MAX_OUTER = 200
MAX_INNER = 10000


@dataclass(frozen=True)
class PenaltySpec:
    """Penalty family and tuning controls.

    ``lambda_fixed`` skips cross-validation and fits at that single value
    (for elnet ``alpha_grid`` must then hold exactly one value).
    """

    kind: str = "ridge"
    alpha_grid: tuple = tuple(np.round(np.linspace(0.1, 0.9, 9), 10))
    n_lambda: int = 100
    n_folds: int = 10
    n_folds_elnet: int = 5
    seed: int = 0
    lambda_fixed: float | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"penalty must be one of {KINDS}, got {self.kind!r}")
        grid = tuple(float(a) for a in self.alpha_grid)
        if not grid or any(a < 0 or a > 1 for a in grid):
            raise ValueError("alpha_grid values must lie in [0, 1]")
        object.__setattr__(self, "alpha_grid", grid)
        if self.n_lambda < 1 or self.n_folds < 2 or self.n_folds_elnet < 2:
            raise ValueError("n_lambda must be >= 1 and fold counts >= 2")

    @property
    def alphas(self):
        if self.kind == "ridge":
            return (0.0,)
        if self.kind == "lasso":
            return (1.0,)
        return self.alpha_grid


@dataclass(frozen=True)
class DesignMatrix:
    subject_ids: np.ndarray
    columns: list
    raw: np.ndarray
    center: np.ndarray
    scale: np.ndarray
    standardized: np.ndarray  # bool per column
    baseline: tuple = ()
    levels: dict = field(default_factory=dict)
    n_baseline_columns: int = 0

    @property
    def values(self):
        return (self.raw - self.center) / self.scale

    def to_frame(self, scaled=False):
        return pd.DataFrame(
            self.values if scaled else self.raw,
            index=pd.Index(self.subject_ids, name="id"),
            columns=self.columns,
        )


@dataclass(frozen=True)
class CoxFit:
    columns: list
    coef: np.ndarray
    coef_scaled: np.ndarray
    lambda_star: float
    alpha_star: float
    lambdas: np.ndarray
    cv_curve: np.ndarray | None
    baseline_hazard: StepFunction
    center: np.ndarray
    scale: np.ndarray
    standardized: np.ndarray
    penalty: PenaltySpec
    baseline: tuple = ()
    levels: dict = field(default_factory=dict)
    n_baseline_columns: int = 0
    landmark: float | None = None
    alpha_cv: dict = field(default_factory=dict)

    @property
    def gamma(self):
        return pd.Series(self.coef[: self.n_baseline_columns], index=self.columns[: self.n_baseline_columns])

    @property
    def delta(self):
        return pd.Series(self.coef[self.n_baseline_columns :], index=self.columns[self.n_baseline_columns :])

    def coefficients(self):
        return pd.DataFrame({"term": self.columns, "estimate": self.coef, "scaled_estimate": self.coef_scaled})

    def linear_predictor(self, raw):
        raw = np.atleast_2d(np.asarray(raw, dtype=float))
        if raw.shape[1] != len(self.columns):
            raise ValueError(f"design has {raw.shape[1]} columns, model expects {len(self.columns)}")
        return raw @ self.coef


def dummy_names(var, levels):
    return [f"{var}{lv}" for lv in levels[1:]]


def _baseline_block(frame, baseline, levels):
    cols, names = [], []
    for b in baseline:
        if b not in frame.columns:
            raise KeyError(f"baseline covariate {b!r} is missing")
        vals = frame[b]
        if b in levels:
            lv = list(levels[b])
            present = vals.dropna()
            unseen = sorted(set(present) - set(lv))
            if unseen:
                raise ValueError(f"unseen level(s) {unseen} for categorical covariate {b!r}")
            if vals.isna().any():
                bad = frame.index[vals.isna().to_numpy()][0]
                raise ValueError(f"missing value of {b!r} for subject {bad!r}")
            for lvl, nm in zip(lv[1:], dummy_names(b, lv)):
                cols.append((vals == lvl).to_numpy(dtype=float))
                names.append(nm)
        else:
            x = pd.to_numeric(vals, errors="coerce").to_numpy(dtype=float)
            if np.isnan(x).any():
                bad = frame.index[np.isnan(x)][0]
                raise ValueError(f"missing value of {b!r} for subject {bad!r}")
            cols.append(x)
            names.append(b)
    block = np.column_stack(cols) if cols else np.zeros((len(frame), 0))
    return block, names


def _as_frame(summaries):
    if isinstance(summaries, RandomEffectSummary):
        return summaries.to_frame()
    if summaries is None:
        return pd.DataFrame()
    return summaries


def assemble_design(summaries, dataset, baseline=None, standardize=True):
    """Design matrix of dummy-coded baseline covariates then summary columns.

    ``summaries`` is a :class:`RandomEffectSummary` or a frame indexed by
    subject id. Categorical covariates are coded against their first level.
    With ``standardize`` every non-constant column is centered and scaled to
    unit sample SD; constant columns are left as they are, with a warning.
    """
    surv = dataset.survival.set_index("id")
    baseline = tuple(dataset.baseline if baseline is None else baseline)
    extra = _as_frame(summaries)
    ids = surv.index.to_numpy()
    if len(extra.columns):
        if set(map(str, extra.index)) != set(ids) or len(extra) != len(ids):
            raise ValueError("subject ids of the summaries and the survival table do not match")
        extra = extra.loc[ids]
    levels = {b: tuple(dataset.levels[b]) for b in baseline if b in dataset.levels}
    block, names = _baseline_block(surv, baseline, levels)
    raw = np.hstack([block, extra.to_numpy(dtype=float)]) if len(extra.columns) else block
    if np.isnan(raw).any():
        raise ValueError("design matrix has missing cells")
    columns = names + list(extra.columns)
    p = raw.shape[1]
    center, scale = np.zeros(p), np.ones(p)
    standardized = np.zeros(p, dtype=bool)
    if standardize and len(raw) > 1:
        sd = raw.std(axis=0, ddof=1)
        const = ~(sd > 0)
        if const.any():
            warnings.warn(f"constant design column(s) left unscaled: {[columns[j] for j in np.flatnonzero(const)]}", stacklevel=2)
        standardized = ~const
        center = np.where(standardized, raw.mean(axis=0), 0.0)
        scale = np.where(standardized, sd, 1.0)
    return DesignMatrix(ids, columns, raw, center, scale, standardized, baseline, levels, len(names))


def design_rows(fit, summaries, baseline_frame):
    """Raw design rows in a fitted model's column order for new subjects."""
    extra = _as_frame(summaries)
    frame = baseline_frame.set_index("id") if "id" in baseline_frame.columns else baseline_frame
    frame.index = frame.index.astype(str)
    block, names = _baseline_block(frame, fit.baseline, fit.levels)
    ids = frame.index.to_numpy()
    n_extra = len(fit.columns) - fit.n_baseline_columns
    if n_extra:
        missing = [c for c in fit.columns[fit.n_baseline_columns :] if c not in extra.columns]
        if missing:
            raise KeyError(f"summary columns missing: {missing}")
        extra = extra.loc[ids, fit.columns[fit.n_baseline_columns :]]
        raw = np.hstack([block, extra.to_numpy(dtype=float)])
    else:
        raw = block
    if names != list(fit.columns[: fit.n_baseline_columns]):
        raise ValueError(f"baseline columns {names} do not match the model's {fit.columns[: fit.n_baseline_columns]}")
    return ids, raw


def _survival_arrays(survival, ids=None):
    if isinstance(survival, Dataset):
        survival = survival.survival
    surv = survival.set_index("id") if "id" in survival.columns else survival
    if ids is not None:
        surv = surv.loc[ids]
    return surv["time"].to_numpy(dtype=float), surv["event"].to_numpy(dtype=float)


def _sorted(time, event):
    order = np.argsort(time, kind="stable")
    ts = time[order]
    gstart = np.searchsorted(ts, ts, side="left").astype(np.int64)
    return order, np.ascontiguousarray(event[order], dtype=float), gstart


def cox_partial_loglik(coef, X, time, event):
    """Breslow log partial likelihood of coefficients ``coef`` for design ``X``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    coef = np.asarray(coef, dtype=float)
    if X.shape[1] != coef.shape[0]:
        raise ValueError(f"design has {X.shape[1]} columns, got {coef.shape[0]} coefficients")
    time = np.asarray(time, dtype=float)
    event = np.asarray(event, dtype=float)
    order, ev, gstart = _sorted(time, event)
    eta = np.ascontiguousarray((X @ coef)[order][:, None])
    return float(kernels.cox_loglik(eta, ev, gstart)[0])


def _score_at_zero(x, ev, gstart):
    e, A, _, _, _ = _pykernels._risk_terms(np.zeros(len(ev)), ev, gstart)
    return x.T @ (ev - e * A)


def lambda_path(x, ev, gstart, alpha, n_lambda):
    n, p = x.shape
    lam_max = np.max(np.abs(_score_at_zero(x, ev, gstart))) / (n * max(alpha, 1e-3))
    if not lam_max > 0:
        lam_max = 1.0
    ratio = 1e-3 if n > p else 1e-2
    return np.geomspace(lam_max, lam_max * ratio, n_lambda)


def _path(x, ev, gstart, lambdas, alpha):
    x = np.asfortranarray(x)
    betas, iters = kernels.cox_path(
        x, ev, gstart, np.asarray(lambdas, dtype=float), float(alpha),
        np.zeros(x.shape[1]), CD_TOL, MAX_OUTER, MAX_INNER,
    )
    if np.any(iters < 0):
        warnings.warn(f"coordinate descent hit the iteration cap at {int((iters < 0).sum())} lambda value(s)", stacklevel=3)
    return betas


def stratified_folds(event, n_folds, seed):
    """Fold label per subject, balancing events across folds."""
    rng = np.random.default_rng(seed)
    folds = np.empty(len(event), dtype=int)
    offset = 0
    for group in (np.flatnonzero(event == 1), np.flatnonzero(event != 1)):
        perm = rng.permutation(group)
        folds[perm] = (np.arange(len(perm)) + offset) % n_folds
        offset += len(perm)
    return folds


def cv_deviance(x, time, event, lambdas, alpha, folds):
    """Cross-validated deviance per lambda ("full minus leave-out" form).

    Normalized by the total number of events.
    """
    order, ev, gstart = _sorted(time, event)
    xs = x[order]
    fs = folds[order]
    total = np.zeros(len(lambdas))
    for k in np.unique(fs):
        tr = fs != k
        o_tr, ev_tr, g_tr = _sorted(time[order][tr], ev[tr])
        betas = _path(xs[tr][o_tr], ev_tr, g_tr, lambdas, alpha)
        eta = np.ascontiguousarray(xs @ betas.T)
        ll_full = kernels.cox_loglik(eta, ev, gstart)
        ll_tr = kernels.cox_loglik(np.ascontiguousarray(eta[tr][o_tr]), ev_tr, g_tr)
        total += ll_full - ll_tr
    return -2.0 * total / max(event.sum(), 1.0)


def breslow_baseline(coef, X, time, event):
    """Cumulative Breslow baseline hazard as a right-continuous step function."""
    time = np.asarray(time, dtype=float)
    event = np.asarray(event, dtype=float)
    eta = np.asarray(X, dtype=float) @ np.asarray(coef, dtype=float)
    if not event.any():
        return StepFunction(np.zeros(0), np.zeros(0), 0.0)
    m = eta.max()
    w = np.exp(eta - m)
    uniq, inv = np.unique(time, return_inverse=True)
    d = np.bincount(inv, weights=event, minlength=uniq.size)
    wsum = np.bincount(inv, weights=w, minlength=uniq.size)
    risk = wsum[::-1].cumsum()[::-1]
    mask = d > 0
    jumps = d[mask] / risk[mask] * np.exp(-m)
    return StepFunction(uniq[mask], np.cumsum(jumps), 0.0)


def fit_penalized_cox(design, survival, penalty=None, landmark=None):
    """Penalized Cox fit with cross-validated tuning.

    Parameters
    ----------
    design : DesignMatrix
    survival : Dataset or DataFrame with ``id``, ``time``, ``event``
    penalty : PenaltySpec, default ridge
    landmark : float, optional
        Stored on the fit so that predictions before it can be refused.
    """
    penalty = penalty or PenaltySpec()
    time, event = _survival_arrays(survival, design.subject_ids)
    n, p = design.raw.shape
    if event.sum() == 0:
        raise ValueError("no events: the Cox model is not estimable")
    if p == 0 or not np.any(np.ptp(design.raw, axis=0) > 0):
        raise ValueError("all design columns are constant")
    if penalty.lambda_fixed is None and n < penalty.n_folds:
        raise ValueError(f"{n} subjects for {penalty.n_folds} folds")
    x = design.values
    order, ev, gstart = _sorted(time, event)
    xs = x[order]

    alpha_cv = {}
    if penalty.lambda_fixed is not None:
        if len(penalty.alphas) != 1:
            raise ValueError("lambda_fixed with elnet needs a single alpha in alpha_grid")
        alpha = penalty.alphas[0]
        lam_star = float(penalty.lambda_fixed)
        lambdas = lambda_path(xs, ev, gstart, alpha, penalty.n_lambda)
        lambdas = np.r_[lambdas[lambdas > lam_star], lam_star]
        cv = None
        idx = len(lambdas) - 1
    else:
        if len(penalty.alphas) > 1:
            folds_in = stratified_folds(event, penalty.n_folds_elnet, penalty.seed)
            for a in penalty.alphas:
                lam_a = lambda_path(xs, ev, gstart, a, penalty.n_lambda)
                alpha_cv[a] = float(cv_deviance(x, time, event, lam_a, a, folds_in).min())
            alpha = min(alpha_cv, key=lambda a: (alpha_cv[a], a))
        else:
            alpha = penalty.alphas[0]
        lambdas = lambda_path(xs, ev, gstart, alpha, penalty.n_lambda)
        folds = stratified_folds(event, penalty.n_folds, penalty.seed + 1 if alpha_cv else penalty.seed)
        cv = cv_deviance(x, time, event, lambdas, alpha, folds)
        idx = int(np.argmin(cv))
        lam_star = float(lambdas[idx])

    betas = _path(xs, ev, gstart, lambdas[: idx + 1], alpha)
    coef_scaled = betas[-1]
    coef = coef_scaled / design.scale
    H0 = breslow_baseline(coef, design.raw, time, event)
    return CoxFit(
        columns=list(design.columns), coef=coef, coef_scaled=coef_scaled,
        lambda_star=lam_star, alpha_star=float(alpha), lambdas=lambdas, cv_curve=cv,
        baseline_hazard=H0, center=design.center, scale=design.scale,
        standardized=design.standardized, penalty=penalty, baseline=design.baseline,
        levels=dict(design.levels), n_baseline_columns=design.n_baseline_columns,
        landmark=landmark, alpha_cv=alpha_cv,
    )


def predict_survival(fit, raw, times):
    """Survival probabilities ``exp(-H0(t) exp(eta))``, one row per subject."""
    times = np.atleast_1d(np.asarray(times, dtype=float))
    if fit.landmark is not None and np.any(times < fit.landmark):
        raise ValueError(f"prediction times {times[times < fit.landmark].tolist()} precede the landmark {fit.landmark}")
    eta = fit.linear_predictor(raw)
    H = fit.baseline_hazard(times)
    return np.exp(-np.outer(np.exp(eta), H))


def survival_frame(ids, surv, times):
    frame = pd.DataFrame(surv, columns=[f"S({t:g})" for t in np.atleast_1d(times)])
    frame.insert(0, "id", list(ids))
    return frame


def predict_survival_new_subjects(lmm_fits, cox_fit, new_longitudinal, new_baseline, times):
    """Predicted survival for subjects outside the training data.

    ``new_longitudinal`` holds the subjects' measurements up to the landmark
    (already transformed like the training covariates) and ``new_baseline``
    one row per subject with ``id`` and the baseline covariates.
    """
    new_longitudinal = new_longitudinal.copy()
    new_longitudinal["id"] = new_longitudinal["id"].astype(str)
    base = new_baseline.copy()
    base["id"] = base["id"].astype(str)
    ids = base["id"].tolist()
    rows = {i: g for i, g in new_longitudinal.groupby("id", sort=False)}
    summaries = np.zeros((len(ids), sum(f.spec.q for f in lmm_fits)))
    columns = [c for f in lmm_fits for c in f.spec.ranef_columns]
    for r, sid in enumerate(ids):
        if sid not in rows:
            raise ValueError(f"subject {sid!r} has no longitudinal rows")
        pos = 0
        for f in lmm_fits:
            sub = rows[sid]
            if f.spec.response not in sub.columns or sub[f.spec.response].notna().sum() == 0:
                raise ValueError(f"subject {sid!r} has no observations of {f.spec.response!r}")
            summaries[r, pos : pos + f.spec.q] = predict_random_effects(f, sub)
            pos += f.spec.q
    extra = pd.DataFrame(summaries, index=pd.Index(ids, name="id"), columns=columns)
    ids, raw = design_rows(cox_fit, extra, base)
    return survival_frame(ids, predict_survival(cox_fit, raw, times), times)


def summary_covariates(dataset, mode):
    """Earliest (``"baseline"``) or last (``"locf"``) value per covariate.

    Covariates missing for some subject are dropped with a warning.
    """
    if mode not in ("baseline", "locf"):
        raise ValueError(f"mode must be 'baseline' or 'locf', got {mode!r}")
    ids = dataset.ids
    cols = {}
    for var in dataset.longitudinal_vars:
        s = earliest_or_latest(dataset, var, latest=(mode == "locf"))
        if len(s.index.intersection(ids)) < len(ids):
            warnings.warn(f"{var}: missing for some subjects, dropped from the {mode} model", stacklevel=2)
            continue
        cols[var] = s.loc[ids].to_numpy(dtype=float)
    return pd.DataFrame(cols, index=pd.Index(ids, name="id"))


def fit_locf_baseline_cox(dataset, mode="locf", penalty=None, standardize=True):
    """Comparator model using each covariate's first or last value."""
    extra = summary_covariates(dataset, mode)
    design = assemble_design(extra, dataset, standardize=standardize)
    return fit_penalized_cox(design, dataset, penalty, landmark=dataset.landmark), design
