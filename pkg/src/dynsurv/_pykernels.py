"""Pure numpy implementations of the numerical kernels.

These are the reference versions. ``dynsurv._ckernels`` provides compiled
equivalents with identical signatures; :mod:`dynsurv._backend` picks one at
import time.

Conventions shared by both backends
-----------------------------------
LMM sufficient statistics are stacked per subject: ``ztz`` (n, q, q),
``ztw`` (n, q, f), ``zty`` (n, q), ``wtw`` (n, f, f), ``wty`` (n, f) and
``yty`` (n,). ``lam`` is the lower-triangular relative covariance factor,
so that ``D = sigma2 * lam @ lam.T``.

Cox kernels expect rows sorted by ascending time. ``gstart[i]`` is the index
of the first row sharing row ``i``'s time, which encodes the Breslow tie
groups.
"""

import numpy as np

LOG_2PI = np.log(2.0 * np.pi)


def lmm_profile(ztz, ztw, zty, wtw, wty, yty, nobs, lam, want_grad=True):
    """Profiled ML deviance ``-2 * loglik`` at relative factor ``lam``.

    Returns ``(dev, grad, beta, sigma2)`` where ``grad`` is the derivative of
    ``dev`` with respect to every entry of ``lam`` (only the lower triangle is
    meaningful). ``dev`` is ``inf`` when the profiled residual variance is not
    positive.
    """
    q = lam.shape[0]
    M = np.einsum("ji,njk,kl->nil", lam, ztz, lam) + np.eye(q)
    chol = np.linalg.cholesky(M)
    logdet = 2.0 * np.log(np.diagonal(chol, axis1=1, axis2=2)).sum()

    P = np.einsum("ji,njf->nif", lam, ztw)
    pv = np.einsum("ji,nj->ni", lam, zty)
    MiP = np.linalg.solve(M, P)
    Mipv = np.linalg.solve(M, pv[..., None])[..., 0]

    A = wtw.sum(axis=0) - np.einsum("nqf,nqg->fg", P, MiP)
    b = wty.sum(axis=0) - np.einsum("nqf,nq->f", P, Mipv)
    c = yty.sum() - np.einsum("nq,nq->", pv, Mipv)

    beta = np.linalg.solve(A, b)
    rss = c - b @ beta
    if not rss > 0.0:
        return np.inf, np.zeros((q, q)), beta, 0.0
    sigma2 = rss / nobs
    dev = nobs * (LOG_2PI + 1.0 + np.log(sigma2)) + logdet
    if not want_grad:
        return dev, np.zeros((q, q)), beta, sigma2

    ztr = zty - np.einsum("nqf,f->nq", ztw, beta)
    v = np.linalg.solve(M, np.einsum("ji,nj->ni", lam, ztr)[..., None])[..., 0]
    s = ztr - np.einsum("nij,jk,nk->ni", ztz, lam, v)
    Q = np.einsum("ji,njk->nik", lam, ztz)
    K = ztz - np.einsum("nji,njk->nik", Q, np.linalg.solve(M, Q))
    G = np.einsum("ni,nj->ij", s, s) / sigma2 - K.sum(axis=0)
    grad = -2.0 * G @ lam
    return dev, grad, beta, sigma2


def blup_batch(ztz, ztr, D, sigma2):
    """Conditional means ``D (sigma2 I + Z'Z D)^-1 Z'r`` for every subject."""
    q = D.shape[0]
    M = sigma2 * np.eye(q) + ztz @ D
    sol = np.linalg.solve(M, ztr[..., None])[..., 0]
    return sol @ D.T


def _risk_terms(eta, event, gstart):
    """Scaled exp(eta), and per-row cumulative Breslow sums A and B."""
    n = eta.shape[0]
    e = np.exp(eta - eta.max())
    suffix = np.cumsum(e[::-1])[::-1]
    d = np.zeros(n)
    np.add.at(d, gstart, event)
    first = gstart == np.arange(n)
    h = np.zeros(n)
    h2 = np.zeros(n)
    sel = first & (d > 0)
    S = suffix[sel]
    h[sel] = d[sel] / S
    h2[sel] = d[sel] / (S * S)
    return e, np.cumsum(h), np.cumsum(h2), d, suffix


def cox_loglik(eta, event, gstart):
    """Breslow log partial likelihood for each column of ``eta`` (n, k)."""
    eta = np.atleast_2d(np.asarray(eta, dtype=float).T).T
    n, k = eta.shape
    d = np.zeros(n)
    np.add.at(d, gstart, event)
    sel = (gstart == np.arange(n)) & (d > 0)
    out = np.empty(k)
    for col in range(k):
        et = eta[:, col]
        m = et.max()
        suffix = np.cumsum(np.exp(et - m)[::-1])[::-1]
        out[col] = event @ et - (d[sel] * (m + np.log(suffix[sel]))).sum()
    return out


def _objective(x, beta, event, gstart, lam, alpha):
    n = x.shape[0]
    ll = cox_loglik(x @ beta, event, gstart)[0]
    pen = lam * (alpha * np.abs(beta).sum() + 0.5 * (1.0 - alpha) * (beta @ beta))
    return -ll / n + pen


def cox_path(x, event, gstart, lambdas, alpha, beta_init, tol, max_outer, max_inner):
    """Penalized Cox coefficients along ``lambdas`` by IRLS + coordinate descent.

    Minimizes ``-loglik/n + lam * (alpha |b|_1 + (1 - alpha)/2 |b|_2^2)`` at
    each ``lam`` with warm starts. Returns ``(betas, iters)`` with ``betas`` of
    shape (len(lambdas), p) and the IRLS iteration count per lambda (negative
    when the iteration cap was hit).
    """
    n, p = x.shape
    beta = np.array(beta_init, dtype=float)
    betas = np.empty((len(lambdas), p))
    iters = np.empty(len(lambdas), dtype=np.int64)
    for li, lam in enumerate(lambdas):
        l1 = lam * alpha
        l2 = lam * (1.0 - alpha)
        f_old = _objective(x, beta, event, gstart, lam, alpha)
        done = -max_outer
        for it in range(max_outer):
            e, A, B, _, _ = _risk_terms(x @ beta, event, gstart)
            grad = event - e * A
            w = e * A - e * e * B
            wr = grad.copy()
            xwx = (w[:, None] * x * x).sum(axis=0) / n
            beta_old = beta.copy()
            for _ in range(max_inner):
                maxd = 0.0
                for j in range(p):
                    denom = xwx[j] + l2
                    if denom <= 0.0:
                        new = 0.0
                    else:
                        gj = x[:, j] @ wr / n + xwx[j] * beta[j]
                        new = np.sign(gj) * max(abs(gj) - l1, 0.0) / denom
                    delta = new - beta[j]
                    if delta != 0.0:
                        wr -= w * x[:, j] * delta
                        beta[j] = new
                        maxd = max(maxd, abs(delta))
                if maxd < tol:
                    break
            f_new = _objective(x, beta, event, gstart, lam, alpha)
            halvings = 0
            while f_new > f_old + 1e-13 * abs(f_old) and halvings < 40:
                beta = 0.5 * (beta + beta_old)
                f_new = _objective(x, beta, event, gstart, lam, alpha)
                halvings += 1
            change = np.max(np.abs(beta - beta_old)) if p else 0.0
            f_old = f_new
            if change < tol:
                done = it + 1
                break
        betas[li] = beta
        iters[li] = done
    return betas, iters
