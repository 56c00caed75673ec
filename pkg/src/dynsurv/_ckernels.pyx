# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels; same signatures and semantics as ``dynsurv._pykernels``."""

import numpy as np

from libc.math cimport exp, fabs, log, sqrt, M_PI, INFINITY

cdef double LOG_2PI = log(2.0 * M_PI)


cdef int _chol(double* a, int q) noexcept nogil:
    # in-place lower Cholesky of a row-major q x q matrix
    cdef int i, j, k
    cdef double s
    for j in range(q):
        s = a[j * q + j]
        for k in range(j):
            s -= a[j * q + k] * a[j * q + k]
        if s <= 0.0:
            return -1
        a[j * q + j] = sqrt(s)
        for i in range(j + 1, q):
            s = a[i * q + j]
            for k in range(j):
                s -= a[i * q + k] * a[j * q + k]
            a[i * q + j] = s / a[j * q + j]
    return 0


cdef void _chol_solve(const double* L, int q, double* b, int ncol) noexcept nogil:
    # solve L L' X = B in place, B row-major q x ncol
    cdef int c, i, k
    cdef double s
    for c in range(ncol):
        for i in range(q):
            s = b[i * ncol + c]
            for k in range(i):
                s -= L[i * q + k] * b[k * ncol + c]
            b[i * ncol + c] = s / L[i * q + i]
        for i in range(q - 1, -1, -1):
            s = b[i * ncol + c]
            for k in range(i + 1, q):
                s -= L[k * q + i] * b[k * ncol + c]
            b[i * ncol + c] = s / L[i * q + i]


cdef int _lu_solve(double* a, int q, double* b) noexcept nogil:
    # Gaussian elimination with partial pivoting; a and b overwritten
    cdef int i, j, k, piv
    cdef double t, best, f
    for k in range(q):
        piv = k
        best = fabs(a[k * q + k])
        for i in range(k + 1, q):
            if fabs(a[i * q + k]) > best:
                best = fabs(a[i * q + k])
                piv = i
        if best == 0.0:
            return -1
        if piv != k:
            for j in range(q):
                t = a[k * q + j]
                a[k * q + j] = a[piv * q + j]
                a[piv * q + j] = t
            t = b[k]
            b[k] = b[piv]
            b[piv] = t
        for i in range(k + 1, q):
            f = a[i * q + k] / a[k * q + k]
            for j in range(k, q):
                a[i * q + j] -= f * a[k * q + j]
            b[i] -= f * b[k]
    for i in range(q - 1, -1, -1):
        t = b[i]
        for j in range(i + 1, q):
            t -= a[i * q + j] * b[j]
        b[i] = t / a[i * q + i]
    return 0


def lmm_profile(const double[:, :, ::1] ztz, const double[:, :, ::1] ztw,
                const double[:, ::1] zty, const double[:, :, ::1] wtw,
                const double[:, ::1] wty, const double[::1] yty, double nobs,
                const double[:, ::1] lam, bint want_grad=True):
    cdef Py_ssize_t n = ztz.shape[0]
    cdef int q = <int>ztz.shape[1]
    cdef int f = <int>ztw.shape[2]
    cdef Py_ssize_t i
    cdef int a, b_, k, r
    cdef double s, logdet = 0.0, c = 0.0

    chol_np = np.empty((n, q, q))
    cdef double[:, :, ::1] chol = chol_np
    A_np = np.zeros((f, f))
    b_np = np.zeros(f)
    cdef double[:, ::1] A = A_np
    cdef double[::1] bvec = b_np
    cdef double[::1] tmp = np.empty(q * q)
    cdef double[::1] P = np.empty(q * f)
    cdef double[::1] MiP = np.empty(q * f)
    cdef double[::1] pv = np.empty(q)
    cdef double[::1] Mipv = np.empty(q)
    cdef double* M

    with nogil:
        for i in range(n):
            M = &chol[i, 0, 0]
            # tmp = ztz @ lam ; M = lam' tmp + I
            for a in range(q):
                for b_ in range(q):
                    s = 0.0
                    for k in range(b_, q):
                        s = s + ztz[i, a, k] * lam[k, b_]
                    tmp[a * q + b_] = s
            for a in range(q):
                for b_ in range(q):
                    s = 0.0
                    for k in range(a, q):
                        s = s + lam[k, a] * tmp[k * q + b_]
                    M[a * q + b_] = s + (1.0 if a == b_ else 0.0)
            if _chol(M, q) != 0:
                logdet = INFINITY
                break
            for a in range(q):
                logdet += 2.0 * log(M[a * q + a])
            for a in range(q):
                s = 0.0
                for k in range(a, q):
                    s = s + lam[k, a] * zty[i, k]
                pv[a] = s
                Mipv[a] = s
                for b_ in range(f):
                    s = 0.0
                    for k in range(a, q):
                        s = s + lam[k, a] * ztw[i, k, b_]
                    P[a * f + b_] = s
                    MiP[a * f + b_] = s
            _chol_solve(M, q, &MiP[0], f)
            _chol_solve(M, q, &Mipv[0], 1)
            for a in range(f):
                s = 0.0
                for k in range(q):
                    s = s + P[k * f + a] * Mipv[k]
                bvec[a] += wty[i, a] - s
                for b_ in range(f):
                    s = 0.0
                    for k in range(q):
                        s = s + P[k * f + a] * MiP[k * f + b_]
                    A[a, b_] += wtw[i, a, b_] - s
            s = 0.0
            for k in range(q):
                s = s + pv[k] * Mipv[k]
            c += yty[i] - s

    lam_np = np.asarray(lam)
    if logdet == INFINITY:
        return np.inf, np.zeros((q, q)), np.zeros(f), 0.0
    beta_np = np.linalg.solve(A_np, b_np)
    rss = c - float(b_np @ beta_np)
    if not rss > 0.0:
        return np.inf, np.zeros((q, q)), beta_np, 0.0
    cdef double sigma2 = rss / nobs
    dev = nobs * (LOG_2PI + 1.0 + log(sigma2)) + logdet
    if not want_grad:
        return dev, np.zeros((q, q)), beta_np, sigma2

    cdef double[::1] beta = beta_np
    G_np = np.zeros((q, q))
    cdef double[:, ::1] G = G_np
    cdef double[::1] ztr = np.empty(q)
    cdef double[::1] v = np.empty(q)
    cdef double[::1] sv = np.empty(q)
    cdef double[::1] Q = np.empty(q * q)
    cdef double[::1] MiQ = np.empty(q * q)
    with nogil:
        for i in range(n):
            M = &chol[i, 0, 0]
            for a in range(q):
                s = zty[i, a]
                for k in range(f):
                    s = s - ztw[i, a, k] * beta[k]
                ztr[a] = s
            for a in range(q):
                s = 0.0
                for k in range(a, q):
                    s = s + lam[k, a] * ztr[k]
                v[a] = s
            _chol_solve(M, q, &v[0], 1)
            # tmp = lam @ v
            for a in range(q):
                s = 0.0
                for k in range(a + 1):
                    s = s + lam[a, k] * v[k]
                tmp[a] = s
            for a in range(q):
                s = ztr[a]
                for k in range(q):
                    s = s - ztz[i, a, k] * tmp[k]
                sv[a] = s
            # Q = lam' ztz
            for a in range(q):
                for b_ in range(q):
                    s = 0.0
                    for k in range(a, q):
                        s = s + lam[k, a] * ztz[i, k, b_]
                    Q[a * q + b_] = s
                    MiQ[a * q + b_] = s
            _chol_solve(M, q, &MiQ[0], q)
            for a in range(q):
                for b_ in range(q):
                    s = 0.0
                    for k in range(q):
                        s = s + Q[k * q + a] * MiQ[k * q + b_]
                    G[a, b_] += sv[a] * sv[b_] / sigma2 - (ztz[i, a, b_] - s)
    grad = -2.0 * G_np @ lam_np
    return dev, grad, beta_np, sigma2


def blup_batch(const double[:, :, ::1] ztz, const double[:, ::1] ztr,
               const double[:, ::1] D, double sigma2):
    cdef Py_ssize_t n = ztz.shape[0]
    cdef int q = <int>ztz.shape[1]
    cdef Py_ssize_t i
    cdef int a, b_, k
    cdef double s
    out_np = np.empty((n, q))
    cdef double[:, ::1] out = out_np
    cdef double[::1] M = np.empty(q * q)
    cdef double[::1] rhs = np.empty(q)
    cdef int fail = 0
    with nogil:
        for i in range(n):
            for a in range(q):
                rhs[a] = ztr[i, a]
                for b_ in range(q):
                    s = 0.0
                    for k in range(q):
                        s = s + ztz[i, a, k] * D[k, b_]
                    M[a * q + b_] = s + (sigma2 if a == b_ else 0.0)
            if _lu_solve(&M[0], q, &rhs[0]) != 0:
                fail = 1
                break
            for a in range(q):
                s = 0.0
                for k in range(q):
                    s = s + D[a, k] * rhs[k]
                out[i, a] = s
    if fail:
        raise np.linalg.LinAlgError("singular matrix in random-effect prediction")
    return out_np


cdef void _risk_terms(const double* eta, const double* event, const long* gstart,
                      const double* d, Py_ssize_t n, double* e, double* A,
                      double* B) noexcept nogil:
    cdef Py_ssize_t i
    cdef double m = eta[0], acc, cumA = 0.0, cumB = 0.0, S
    for i in range(1, n):
        if eta[i] > m:
            m = eta[i]
    for i in range(n):
        e[i] = exp(eta[i] - m)
    # suffix sums stored temporarily in B
    acc = 0.0
    for i in range(n - 1, -1, -1):
        acc += e[i]
        B[i] = acc
    for i in range(n):
        if gstart[i] == i and d[i] > 0.0:
            S = B[i]
            cumA += d[i] / S
            cumB += d[i] / (S * S)
        A[i] = cumA
        B[i] = cumB


cdef double _loglik(const double* eta, const double* event, const long* gstart,
                    const double* d, Py_ssize_t n, double* work) noexcept nogil:
    cdef Py_ssize_t i
    cdef double m = eta[0], acc = 0.0, ll = 0.0
    for i in range(1, n):
        if eta[i] > m:
            m = eta[i]
    for i in range(n - 1, -1, -1):
        acc += exp(eta[i] - m)
        work[i] = acc
    for i in range(n):
        ll += event[i] * eta[i]
        if gstart[i] == i and d[i] > 0.0:
            ll -= d[i] * (m + log(work[i]))
    return ll


def _tie_counts(event, gstart):
    n = event.shape[0]
    d = np.zeros(n)
    np.add.at(d, gstart, event)
    return d


def cox_loglik(eta, event, gstart):
    eta2 = np.ascontiguousarray(np.atleast_2d(np.asarray(eta, dtype=float).T))
    cdef const double[:, ::1] et = eta2
    cdef const double[::1] ev = np.ascontiguousarray(event, dtype=float)
    cdef const long[::1] gs = np.ascontiguousarray(gstart, dtype=np.int64)
    cdef const double[::1] d = _tie_counts(np.asarray(ev), np.asarray(gs))
    cdef Py_ssize_t k = et.shape[0], n = et.shape[1], col
    out_np = np.empty(k)
    cdef double[::1] out = out_np
    cdef double[::1] work = np.empty(max(n, 1))
    with nogil:
        for col in range(k):
            out[col] = _loglik(&et[col, 0], &ev[0], &gs[0], &d[0], n, &work[0])
    return out_np


cdef double _objective(const double[::1, :] x, const double* beta, int p,
                       const double* event, const long* gstart, const double* d,
                       Py_ssize_t n, double lam, double alpha, double* eta,
                       double* work) noexcept nogil:
    cdef Py_ssize_t i
    cdef int j
    cdef double l1 = 0.0, l2 = 0.0
    for i in range(n):
        eta[i] = 0.0
    for j in range(p):
        if beta[j] != 0.0:
            for i in range(n):
                eta[i] += x[i, j] * beta[j]
        l1 += fabs(beta[j])
        l2 += beta[j] * beta[j]
    return (-_loglik(eta, event, gstart, d, n, work) / n
            + lam * (alpha * l1 + 0.5 * (1.0 - alpha) * l2))


def cox_path(x_in, event_in, gstart_in, lambdas_in, double alpha, beta_init,
             double tol, int max_outer, int max_inner):
    x_np = np.asfortranarray(x_in, dtype=float)
    cdef const double[::1, :] x = x_np
    cdef const double[::1] event = np.ascontiguousarray(event_in, dtype=float)
    cdef const long[::1] gstart = np.ascontiguousarray(gstart_in, dtype=np.int64)
    cdef const double[::1] d = _tie_counts(np.asarray(event), np.asarray(gstart))
    cdef const double[::1] lambdas = np.ascontiguousarray(lambdas_in, dtype=float)
    cdef Py_ssize_t n = x.shape[0]
    cdef int p = <int>x.shape[1]
    cdef Py_ssize_t nl = lambdas.shape[0]

    beta_np = np.array(beta_init, dtype=float, copy=True)
    cdef double[::1] beta = beta_np
    cdef double[::1] beta_old = np.empty(max(p, 1))
    betas_np = np.empty((nl, p))
    cdef double[:, ::1] betas = betas_np
    iters_np = np.empty(nl, dtype=np.int64)
    cdef long[::1] iters = iters_np

    cdef double[::1] eta = np.empty(n)
    cdef double[::1] e = np.empty(n)
    cdef double[::1] A = np.empty(n)
    cdef double[::1] B = np.empty(n)
    cdef double[::1] w = np.empty(n)
    cdef double[::1] wr = np.empty(n)
    cdef double[::1] work = np.empty(n)
    cdef double[::1] xwx = np.empty(max(p, 1))

    cdef Py_ssize_t li, i
    cdef int it, inner, j, halvings
    cdef long done
    cdef double lam, l1, l2, f_old, f_new, denom, gj, new, delta, maxd, change, s

    if n == 0:
        raise ValueError("empty design")
    with nogil:
        for li in range(nl):
            lam = lambdas[li]
            l1 = lam * alpha
            l2 = lam * (1.0 - alpha)
            f_old = _objective(x, &beta[0], p, &event[0], &gstart[0], &d[0], n,
                               lam, alpha, &eta[0], &work[0])
            done = -max_outer
            for it in range(max_outer):
                # eta is current from the last _objective call
                _risk_terms(&eta[0], &event[0], &gstart[0], &d[0], n, &e[0], &A[0], &B[0])
                for i in range(n):
                    wr[i] = event[i] - e[i] * A[i]
                    w[i] = e[i] * A[i] - e[i] * e[i] * B[i]
                for j in range(p):
                    s = 0.0
                    for i in range(n):
                        s = s + w[i] * x[i, j] * x[i, j]
                    xwx[j] = s / n
                    beta_old[j] = beta[j]
                for inner in range(max_inner):
                    maxd = 0.0
                    for j in range(p):
                        denom = xwx[j] + l2
                        if denom <= 0.0:
                            new = 0.0
                        else:
                            s = 0.0
                            for i in range(n):
                                s = s + x[i, j] * wr[i]
                            gj = s / n + xwx[j] * beta[j]
                            if gj > l1:
                                new = (gj - l1) / denom
                            elif gj < -l1:
                                new = (gj + l1) / denom
                            else:
                                new = 0.0
                        delta = new - beta[j]
                        if delta != 0.0:
                            for i in range(n):
                                wr[i] -= w[i] * x[i, j] * delta
                            beta[j] = new
                            if fabs(delta) > maxd:
                                maxd = fabs(delta)
                    if maxd < tol:
                        break
                f_new = _objective(x, &beta[0], p, &event[0], &gstart[0], &d[0], n,
                                   lam, alpha, &eta[0], &work[0])
                halvings = 0
                while f_new > f_old + 1e-13 * fabs(f_old) and halvings < 40:
                    for j in range(p):
                        beta[j] = 0.5 * (beta[j] + beta_old[j])
                    f_new = _objective(x, &beta[0], p, &event[0], &gstart[0], &d[0],
                                       n, lam, alpha, &eta[0], &work[0])
                    halvings += 1
                change = 0.0
                for j in range(p):
                    if fabs(beta[j] - beta_old[j]) > change:
                        change = fabs(beta[j] - beta_old[j])
                f_old = f_new
                if change < tol:
                    done = it + 1
                    break
            for j in range(p):
                betas[li, j] = beta[j]
            iters[li] = done
    return betas_np, iters_np
