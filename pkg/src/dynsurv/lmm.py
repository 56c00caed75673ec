"""Per-covariate linear mixed models and predicted random effects.

Each longitudinal covariate ``y`` gets its own model

    y_i = W_i beta + Z_i u_i + e_i,   u_i ~ N(0, D),   e_i ~ N(0, sigma2 I)

fitted by maximum likelihood. ``W`` holds an intercept plus the fixed-effect
regressors and ``Z`` an intercept plus the random-effect regressors, all taken
row-wise from the longitudinal table. The random effects are then summarized
per subject by their conditional means ``D Z' V^-1 (y - W beta)``.
"""

from __future__ import annotations

import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import linalg, optimize, stats

from dynsurv._backend import kernels

LOG_2PI = np.log(2.0 * np.pi)


class LmmFitError(RuntimeError):
    """One or more covariate fits failed.

    ``errors`` maps covariate name to the exception; ``fits`` holds the
    successful fits in input order with ``None`` where a fit failed.
    """

    def __init__(self, errors, fits):
        self.errors = errors
        self.fits = fits
        detail = "; ".join(f"{k}: {v}" for k, v in errors.items())
        super().__init__(f"LMM fit failed for {len(errors)} covariate(s): {detail}")


class SingularCovarianceError(np.linalg.LinAlgError):
    def __init__(self, cond):
        self.cond = cond
        super().__init__(f"marginal covariance is numerically singular (condition number {cond:.3g})")


@dataclass(frozen=True)
class LmmSpec:
    response: str
    fixed_terms: tuple = ()
    random_terms: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "fixed_terms", tuple(self.fixed_terms))
        object.__setattr__(self, "random_terms", tuple(self.random_terms))

    @property
    def fixed_names(self):
        return ("(Intercept)",) + self.fixed_terms

    @property
    def random_names(self):
        return ("(Intercept)",) + self.random_terms

    @property
    def ranef_columns(self):
        return [f"{self.response}_b_int"] + [f"{self.response}_b_{t}" for t in self.random_terms]

    @property
    def q(self):
        return 1 + len(self.random_terms)


@dataclass(frozen=True)
class LmmFit:
    spec: LmmSpec
    beta: np.ndarray
    D: np.ndarray
    sigma2: float
    loglik: float
    n_obs: int
    n_subjects: int
    converged: bool = True
    iterations: int = 0
    grad_norm: float = 0.0
    boundary: bool = False
    message: str = ""
    cov_beta: np.ndarray = field(default=None, repr=False)

    @property
    def df(self):
        return self.n_obs - self.n_subjects - (len(self.beta) - 1)

    @property
    def t_table(self):
        se = np.sqrt(np.diag(self.cov_beta))
        with np.errstate(divide="ignore", invalid="ignore"):
            tval = self.beta / se
        return pd.DataFrame(
            {
                "Value": self.beta,
                "Std.Error": se,
                "DF": self.df,
                "t-value": tval,
                "p-value": 2.0 * stats.t.sf(np.abs(tval), self.df),
            },
            index=list(self.spec.fixed_names),
        )

    def variances(self):
        """Random-effect and residual variances, SDs and correlations."""
        sd = np.sqrt(np.diag(self.D))
        with np.errstate(divide="ignore", invalid="ignore"):
            corr = self.D / np.outer(sd, sd)
        names = list(self.spec.random_names) + ["Residual"]
        frame = pd.DataFrame(
            {
                "Variance": np.r_[np.diag(self.D), self.sigma2],
                "StdDev": np.r_[sd, np.sqrt(self.sigma2)],
            },
            index=names,
        )
        for j, nm in enumerate(self.spec.random_names[:-1]):
            frame[f"Corr[{nm}]"] = np.r_[corr[:, j], np.nan]
        return frame


@dataclass(frozen=True)
class RandomEffectSummary:
    subject_ids: np.ndarray
    columns: list
    values: np.ndarray

    def to_frame(self):
        return pd.DataFrame(self.values, index=pd.Index(self.subject_ids, name="id"), columns=self.columns)


def _rows(spec, longitudinal):
    needed = list(dict.fromkeys(spec.fixed_terms + spec.random_terms))
    missing = [c for c in [spec.response] + needed if c not in longitudinal.columns]
    if missing:
        raise KeyError(f"columns {missing} not found in the longitudinal table")
    return longitudinal[["id", spec.response] + needed].dropna()


def _design_arrays(spec, rows):
    y = rows[spec.response].to_numpy(dtype=float)
    ones = np.ones((len(rows), 1))
    W = np.hstack([ones] + [rows[[t]].to_numpy(dtype=float) for t in spec.fixed_terms])
    Z = np.hstack([ones] + [rows[[t]].to_numpy(dtype=float) for t in spec.random_terms])
    return y, W, Z


@dataclass
class _Stats:
    present: np.ndarray  # indices into the requested subject order
    counts: np.ndarray
    ztz: np.ndarray
    ztw: np.ndarray
    zty: np.ndarray
    wtw: np.ndarray
    wty: np.ndarray
    yty: np.ndarray

    @property
    def nobs(self):
        return int(self.counts.sum())


def _subject_stats(spec, longitudinal, ids):
    needed = list(dict.fromkeys(spec.fixed_terms + spec.random_terms))
    _rows(spec, longitudinal.iloc[:0])  # column check only
    vals = longitudinal[[spec.response] + needed].to_numpy(dtype=float)
    codes = pd.Index(ids).get_indexer(longitudinal["id"].to_numpy())
    keep = (codes >= 0) & ~np.isnan(vals).any(axis=1)
    vals, codes = vals[keep], codes[keep]
    order = np.argsort(codes, kind="stable")
    vals, codes = vals[order], codes[order]
    col = {c: vals[:, k + 1] for k, c in enumerate(needed)}
    y = vals[:, 0]
    ones = np.ones((len(y), 1))
    W = np.column_stack([ones] + [col[t] for t in spec.fixed_terms])
    Z = np.column_stack([ones] + [col[t] for t in spec.random_terms])
    if len(codes) == 0:
        present = np.zeros(0, dtype=int)
        starts = np.zeros(0, dtype=int)
    else:
        starts = np.flatnonzero(np.r_[True, codes[1:] != codes[:-1]])
        present = codes[starts].astype(int)

    def red(a):
        if len(starts) == 0:
            return np.zeros((0,) + a.shape[1:])
        return np.ascontiguousarray(np.add.reduceat(a, starts, axis=0))

    return _Stats(
        present=present,
        counts=np.diff(np.r_[starts, len(codes)]).astype(int),
        ztz=red(Z[:, :, None] * Z[:, None, :]),
        ztw=red(Z[:, :, None] * W[:, None, :]),
        zty=red(Z * y[:, None]),
        wtw=red(W[:, :, None] * W[:, None, :]),
        wty=red(W * y[:, None]),
        yty=red(y * y),
    )


def _theta_to_lam(theta, q):
    lam = np.zeros((q, q))
    lam[np.tril_indices(q)] = theta
    d = np.diag_indices(q)
    lam[d] = np.exp(lam[d])
    return lam


def _start_theta(spec, rows, q):
    lam = np.eye(q)
    for j, t in enumerate(spec.random_terms, start=1):
        sd = rows[t].std()
        lam[j, j] = 1.0 / sd if sd > 0 else 1.0
    ti = np.tril_indices(q)
    theta = lam[ti].copy()
    on_diag = ti[0] == ti[1]
    theta[on_diag] = np.log(theta[on_diag])
    return theta


def _gls_cov(st, lam, sigma2):
    q = lam.shape[0]
    M = np.einsum("ji,njk,kl->nil", lam, st.ztz, lam) + np.eye(q)
    P = np.einsum("ji,njf->nif", lam, st.ztw)
    A = st.wtw.sum(axis=0) - np.einsum("nqf,nqg->fg", P, np.linalg.solve(M, P))
    return sigma2 * np.linalg.inv(A)


def _newton_polish(objective, theta, dev, max_steps=5):
    """Newton steps with a finite-difference Hessian of the analytic gradient.

    BFGS stalls short of the optimum along flat directions; a handful of
    Newton steps recovers the last digits. Steps are only taken while the
    Hessian is positive definite and the deviance decreases. Returns the
    point, its deviance, the step count and the last relative change.
    """
    k = theta.size
    rel = np.inf
    for step in range(max_steps):
        _, g = objective(theta)
        if np.max(np.abs(g)) < 1e-10:
            return theta, dev, step, 0.0
        H = np.empty((k, k))
        for j in range(k):
            h = 1e-5 * max(1.0, abs(theta[j]))
            e = np.zeros(k)
            e[j] = h
            H[:, j] = (objective(theta + e)[1] - objective(theta - e)[1]) / (2.0 * h)
        H = 0.5 * (H + H.T)
        try:
            direction = -linalg.cho_solve(linalg.cho_factor(H), g)
        except linalg.LinAlgError:
            return theta, dev, step, rel
        t = 1.0
        while t > 1e-4:
            cand = theta + t * direction
            d_new = objective(cand)[0]
            if d_new <= dev:
                break
            t *= 0.5
        else:
            return theta, dev, step, rel
        rel = (dev - d_new) / max(1.0, abs(dev))
        theta, dev = cand, d_new
        if rel <= 1e-13:
            return theta, dev, step + 1, rel
    return theta, dev, max_steps, rel


def fit_lmm(spec, dataset, max_iter=200, tol=1e-8):
    """Maximum likelihood fit of one covariate's mixed model.

    The fixed effects and residual variance are profiled out; the relative
    random-effect covariance factor is optimized by BFGS in log-Cholesky
    coordinates, then refined by a few Newton steps. ``tol`` is the relative
    deviance change below which a fit counts as converged. Fits that drift to a singular ``D`` are kept and flagged
    through ``boundary``.
    """
    spec = spec if isinstance(spec, LmmSpec) else LmmSpec(*spec)
    ids = dataset.ids
    st = _subject_stats(spec, dataset.longitudinal, ids)
    q, f = spec.q, 1 + len(spec.fixed_terms)
    n_sub, nobs = len(st.present), st.nobs
    if n_sub < 2:
        raise ValueError(f"{spec.response}: need at least 2 subjects with observations, got {n_sub}")
    ti = np.tril_indices(q)
    on_diag = ti[0] == ti[1]

    # exact linear fit: the likelihood is unbounded, report the boundary limit
    A0 = st.wtw.sum(axis=0)
    b0 = st.wty.sum(axis=0)
    beta_ols = np.linalg.lstsq(A0, b0, rcond=None)[0]
    rss_ols = st.yty.sum() - b0 @ beta_ols
    # rss comes from a difference of sums, so allow for cancellation
    if rss_ols <= 1e-12 * max(st.yty.sum(), 1.0):
        sigma2 = max(rss_ols / nobs, np.finfo(float).tiny)
        loglik = -0.5 * nobs * (LOG_2PI + 1.0 + np.log(sigma2))
        return LmmFit(
            spec, beta_ols, np.zeros((q, q)), sigma2, loglik, nobs, n_sub,
            converged=True, iterations=0, grad_norm=0.0, boundary=True,
            message="responses fitted exactly by the fixed effects",
            cov_beta=np.zeros((f, f)),
        )

    n_par = f + q * (q + 1) // 2 + 1
    if nobs <= n_par:
        raise ValueError(f"{spec.response}: {nobs} observations for {n_par} parameters")

    def objective(theta):
        lam = _theta_to_lam(theta, q)
        dev, grad, _, _ = kernels.lmm_profile(st.ztz, st.ztw, st.zty, st.wtw, st.wty, st.yty, float(nobs), lam)
        if not np.isfinite(dev):
            return np.inf, np.zeros_like(theta)
        g = grad[ti]
        g[on_diag] *= lam[ti][on_diag]
        return dev, g

    rows = _rows(spec, dataset.longitudinal)
    theta0 = _start_theta(spec, rows, q)
    res = optimize.minimize(objective, theta0, jac=True, method="BFGS", options={"maxiter": max_iter, "gtol": 1e-6})
    theta, _, n_newton, rel = _newton_polish(objective, res.x, res.fun)
    iterations = res.nit + n_newton

    lam = _theta_to_lam(theta, q)
    dev, grad, beta, sigma2 = kernels.lmm_profile(
        st.ztz, st.ztw, st.zty, st.wtw, st.wty, st.yty, float(nobs), lam
    )
    g = grad[ti]
    g[on_diag] *= lam[ti][on_diag]
    grad_norm = float(np.max(np.abs(g)))
    D = sigma2 * lam @ lam.T
    D = 0.5 * (D + D.T)
    eig = np.linalg.eigvalsh(lam @ lam.T)
    boundary = bool(eig.min() < 1e-8 * max(eig.max(), 1e-300))
    converged = bool(np.isfinite(dev) and (grad_norm < 1e-3 or boundary or rel <= tol) and res.nit < max_iter)
    return LmmFit(
        spec, beta, D, float(sigma2), float(-0.5 * dev), nobs, n_sub,
        converged=converged, iterations=int(iterations), grad_norm=grad_norm,
        boundary=boundary, message=str(res.message),
        cov_beta=_gls_cov(st, lam, sigma2),
    )


def _fit_one(args):
    spec, dataset = args
    try:
        return fit_lmm(spec, dataset)
    except Exception as exc:  # reported per covariate by fit_all_lmms
        return exc


def fit_all_lmms(dataset, y_names, fixed_terms=(), random_terms=(), workers=1):
    """Fit one mixed model per covariate in ``y_names``, optionally in parallel.

    Raises :class:`LmmFitError` carrying the successful fits if any covariate
    fails.
    """
    specs = [LmmSpec(y, fixed_terms, random_terms) for y in y_names]
    for s in specs:
        if s.response not in dataset.longitudinal_vars:
            raise KeyError(f"{s.response!r} is not a longitudinal covariate")
    jobs = [(s, dataset) for s in specs]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_fit_one, jobs))
    else:
        results = [_fit_one(j) for j in jobs]
    errors = {s.response: r for s, r in zip(specs, results) if isinstance(r, Exception)}
    if errors:
        raise LmmFitError(errors, [None if isinstance(r, Exception) else r for r in results])
    return results


def predict_random_effects(fit, subject_rows):
    """Conditional mean of one subject's random effects given their rows."""
    rows = _rows(fit.spec, subject_rows)
    if len(rows) == 0:
        raise ValueError(f"{fit.spec.response}: subject has no non-missing observations")
    y, W, Z = _design_arrays(fit.spec, rows)
    V = Z @ fit.D @ Z.T + fit.sigma2 * np.eye(len(y))
    cond = np.linalg.cond(V)
    if not np.isfinite(cond) or cond > 1e12:
        raise SingularCovarianceError(cond)
    return fit.D @ Z.T @ np.linalg.solve(V, y - W @ fit.beta)


def summarize_lmms(fits, dataset, allow_flagged=False):
    """Predicted random effects for every subject of ``dataset``.

    Subjects with no observation of a covariate get zeros (the prior mean)
    for that covariate's columns, with a warning.
    """
    if not fits:
        raise ValueError("summarize_lmms needs at least one fit")
    if not allow_flagged:
        bad = [f.spec.response for f in fits if not f.converged]
        if bad:
            raise ValueError(f"fits did not converge for {bad}; pass allow_flagged=True to use them")
    ids = dataset.ids
    blocks, columns = [], []
    for fit in fits:
        st = _subject_stats(fit.spec, dataset.longitudinal, ids)
        U = np.zeros((len(ids), fit.spec.q))
        if len(st.present):
            ztr = st.zty - np.einsum("nqf,f->nq", st.ztw, fit.beta)
            U[st.present] = kernels.blup_batch(st.ztz, np.ascontiguousarray(ztr), np.ascontiguousarray(fit.D), float(fit.sigma2))
        if len(st.present) < len(ids):
            absent = np.setdiff1d(np.arange(len(ids)), st.present)
            warnings.warn(
                f"{fit.spec.response}: no observations for subject(s) {list(ids[absent])}; using zero random effects",
                stacklevel=2,
            )
        blocks.append(U)
        columns.extend(fit.spec.ranef_columns)
    return RandomEffectSummary(np.asarray(ids), columns, np.hstack(blocks))


def marginal_loglik(spec, dataset, beta, D, sigma2, with_grad=False):
    """Marginal log-likelihood evaluated subject by subject with explicit V_i.

    With ``with_grad`` also returns the gradient with respect to
    ``(beta, log-Cholesky parameters of D, log sigma2)``; the log-Cholesky
    vector lists the lower triangle row by row with log-diagonal entries.
    """
    spec = spec if isinstance(spec, LmmSpec) else LmmSpec(*spec)
    rows = _rows(spec, dataset.longitudinal)
    q = spec.q
    ll = 0.0
    g_beta = np.zeros(len(beta))
    G = np.zeros((q, q))
    g_s2 = 0.0
    for _, grp in rows.groupby("id", sort=False):
        y, W, Z = _design_arrays(spec, grp)
        V = Z @ D @ Z.T + sigma2 * np.eye(len(y))
        r = y - W @ beta
        sign, logdet = np.linalg.slogdet(V)
        Vi = np.linalg.inv(V)
        Vir = Vi @ r
        ll -= 0.5 * (len(y) * LOG_2PI + logdet + r @ Vir)
        if with_grad:
            g_beta += W.T @ Vir
            G += Z.T @ (np.outer(Vir, Vir) - Vi) @ Z
            g_s2 += 0.5 * (Vir @ Vir - np.trace(Vi))
    if not with_grad:
        return ll
    L = np.linalg.cholesky(D)
    gL = G @ L  # d ll / d L for D = L L'
    ti = np.tril_indices(q)
    g_theta = gL[ti].copy()
    on_diag = ti[0] == ti[1]
    g_theta[on_diag] *= L[ti][on_diag]
    return ll, np.r_[g_beta, g_theta, g_s2 * sigma2]


def fits_to_frame(fits):
    """Coefficient table rows ``covariate, term, estimate, SE, df, t, p``."""
    frames = []
    for fit in fits:
        tt = fit.t_table
        frames.append(
            pd.DataFrame(
                {
                    "covariate": fit.spec.response,
                    "term": tt.index,
                    "estimate": tt["Value"].to_numpy(),
                    "SE": tt["Std.Error"].to_numpy(),
                    "df": tt["DF"].to_numpy(),
                    "t": tt["t-value"].to_numpy(),
                    "p": tt["p-value"].to_numpy(),
                }
            )
        )
    return pd.concat(frames, ignore_index=True)
