# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled twins of :mod:`stochplan._pykernels`.

Same signatures and semantics; dense small-matrix loops written out in C.
"""
import numpy as np

from libc.math cimport sqrt, isfinite
from libc.stdlib cimport malloc, free
from libc.string cimport memcpy

from .errors import FactorizationError, NumericalDomainError


cdef inline void _mm(const double* A, const double* B, double* C,
                     int n, int k, int p) noexcept nogil:
    # C[n,p] = A[n,k] @ B[k,p]
    cdef int i, j, l
    cdef double s
    for i in range(n):
        for j in range(p):
            s = 0.0
            for l in range(k):
                s += A[i * k + l] * B[l * p + j]
            C[i * p + j] = s


cdef inline void _mm_nt(const double* A, const double* B, double* C,
                        int n, int k, int p) noexcept nogil:
    # C[n,p] = A[n,k] @ B[p,k]^T
    cdef int i, j, l
    cdef double s
    for i in range(n):
        for j in range(p):
            s = 0.0
            for l in range(k):
                s += A[i * k + l] * B[j * k + l]
            C[i * p + j] = s


cdef inline void _mm_tn(const double* A, const double* B, double* C,
                        int n, int k, int p) noexcept nogil:
    # C[n,p] = A[k,n]^T @ B[k,p]
    cdef int i, j, l
    cdef double s
    for i in range(n):
        for j in range(p):
            s = 0.0
            for l in range(k):
                s += A[l * n + i] * B[l * p + j]
            C[i * p + j] = s


cdef inline int _chol(const double* A, double* L, int n) noexcept nogil:
    cdef int i, j, k
    cdef double s
    for i in range(n * n):
        L[i] = 0.0
    for j in range(n):
        s = A[j * n + j]
        for k in range(j):
            s -= L[j * n + k] * L[j * n + k]
        if not (s > 0.0):
            return -1
        L[j * n + j] = sqrt(s)
        for i in range(j + 1, n):
            s = A[i * n + j]
            for k in range(j):
                s -= L[i * n + k] * L[j * n + k]
            L[i * n + j] = s / L[j * n + j]
    return 0


cdef inline void _trsm_l(const double* L, double* B, int n, int p) noexcept nogil:
    # B <- L^{-1} B, L lower triangular [n,n], B [n,p]
    cdef int i, j, k
    cdef double s
    for j in range(p):
        for i in range(n):
            s = B[i * p + j]
            for k in range(i):
                s -= L[i * n + k] * B[k * p + j]
            B[i * p + j] = s / L[i * n + i]


cdef inline void _trsm_lt(const double* L, double* B, int n, int p) noexcept nogil:
    # B <- L^{-T} B
    cdef int i, j, k
    cdef double s
    for j in range(p):
        for i in range(n - 1, -1, -1):
            s = B[i * p + j]
            for k in range(i + 1, n):
                s -= L[k * n + i] * B[k * p + j]
            B[i * p + j] = s / L[i * n + i]


cdef inline bint _finite(const double* x, Py_ssize_t m) noexcept nogil:
    cdef Py_ssize_t i
    for i in range(m):
        if not isfinite(x[i]):
            return False
    return True


def linear_ode(A, F, X0, times, backward=False):
    X0 = np.asarray(X0, dtype=float)
    vec = X0.ndim == 1
    X0m = np.ascontiguousarray(X0.reshape(X0.shape[0], -1))
    cdef int n = X0m.shape[0]
    cdef int p = X0m.shape[1]
    cdef double[:, :, ::1] Av = np.ascontiguousarray(A, dtype=float)
    cdef double[::1] tv = np.ascontiguousarray(times, dtype=float)
    cdef Py_ssize_t K = tv.shape[0] - 1
    cdef bint hasF = F is not None
    cdef double[:, :, ::1] Fv
    if hasF:
        Fv = np.ascontiguousarray(np.asarray(F, dtype=float).reshape(K + 1, n, p))
    else:
        Fv = np.zeros((1, n, p))
    out = np.empty((K + 1, n, p))
    cdef double[:, :, ::1] ov = out
    cdef double[:, ::1] x0v = X0m
    cdef double* f1 = <double*> malloc(n * p * sizeof(double))
    cdef double* f2 = <double*> malloc(n * p * sizeof(double))
    cdef double* xp = <double*> malloc(n * p * sizeof(double))
    cdef Py_ssize_t k, cur, nxt, i
    cdef double h
    cdef bint bw = backward
    with nogil:
        if bw:
            memcpy(&ov[K, 0, 0], &x0v[0, 0], n * p * sizeof(double))
        else:
            memcpy(&ov[0, 0, 0], &x0v[0, 0], n * p * sizeof(double))
        for k in range(K):
            if bw:
                cur = K - k
                nxt = cur - 1
            else:
                cur = k
                nxt = k + 1
            h = tv[nxt] - tv[cur]
            _mm(&Av[cur, 0, 0], &ov[cur, 0, 0], f1, n, n, p)
            if hasF:
                for i in range(n * p):
                    f1[i] += (&Fv[cur, 0, 0])[i]
            for i in range(n * p):
                xp[i] = (&ov[cur, 0, 0])[i] + h * f1[i]
            _mm(&Av[nxt, 0, 0], xp, f2, n, n, p)
            if hasF:
                for i in range(n * p):
                    f2[i] += (&Fv[nxt, 0, 0])[i]
            for i in range(n * p):
                (&ov[nxt, 0, 0])[i] = (&ov[cur, 0, 0])[i] + 0.5 * h * (f1[i] + f2[i])
        ok = _finite(&ov[0, 0, 0], (K + 1) * n * p)
    free(f1)
    free(f2)
    free(xp)
    if not ok:
        raise NumericalDomainError("non-finite value in linear_ode")
    if vec:
        return out[:, :, 0]
    return out


cdef inline void _lyap_rhs(const double* A, const double* S, const double* C,
                           double* out, double* tmp, int n) noexcept nogil:
    cdef int i, j
    _mm(A, S, tmp, n, n, n)
    for i in range(n):
        for j in range(n):
            out[i * n + j] = tmp[i * n + j] + tmp[j * n + i] + C[i * n + j]


def lyapunov_ode(A, C, S0, times):
    cdef double[:, :, ::1] Av = np.ascontiguousarray(A, dtype=float)
    cdef double[:, :, ::1] Cv = np.ascontiguousarray(C, dtype=float)
    cdef double[::1] tv = np.ascontiguousarray(times, dtype=float)
    cdef double[:, ::1] S0v = np.ascontiguousarray(S0, dtype=float)
    cdef int n = S0v.shape[0]
    cdef Py_ssize_t K = tv.shape[0] - 1
    out = np.empty((K + 1, n, n))
    cdef double[:, :, ::1] ov = out
    cdef double* f1 = <double*> malloc(n * n * sizeof(double))
    cdef double* f2 = <double*> malloc(n * n * sizeof(double))
    cdef double* sp = <double*> malloc(n * n * sizeof(double))
    cdef double* tmp = <double*> malloc(n * n * sizeof(double))
    cdef Py_ssize_t k, i, j
    cdef double h, v
    with nogil:
        memcpy(&ov[0, 0, 0], &S0v[0, 0], n * n * sizeof(double))
        for k in range(K):
            h = tv[k + 1] - tv[k]
            _lyap_rhs(&Av[k, 0, 0], &ov[k, 0, 0], &Cv[k, 0, 0], f1, tmp, n)
            for i in range(n * n):
                sp[i] = (&ov[k, 0, 0])[i] + h * f1[i]
            _lyap_rhs(&Av[k + 1, 0, 0], sp, &Cv[k + 1, 0, 0], f2, tmp, n)
            for i in range(n * n):
                tmp[i] = (&ov[k, 0, 0])[i] + 0.5 * h * (f1[i] + f2[i])
            for i in range(n):
                for j in range(n):
                    v = 0.5 * (tmp[i * n + j] + tmp[j * n + i])
                    ov[k + 1, i, j] = v
        ok = _finite(&ov[0, 0, 0], (K + 1) * n * n)
    free(f1)
    free(f2)
    free(sp)
    free(tmp)
    if not ok:
        raise NumericalDomainError("non-finite value in lyapunov_ode")
    return out


cdef inline void _ric_rhs(const double* A, const double* BBt, const double* Q,
                          const double* P, double* out, double* t1, double* t2,
                          int n) noexcept nogil:
    cdef int i, j
    _mm(P, A, t1, n, n, n)
    _mm(P, BBt, t2, n, n, n)
    _mm(t2, P, out, n, n, n)
    for i in range(n):
        for j in range(n):
            t2[i * n + j] = t1[i * n + j] + t1[j * n + i] - out[i * n + j] + Q[i * n + j]
    memcpy(out, t2, n * n * sizeof(double))


def riccati_backward(A, BBt, Q, PT, times):
    cdef double[:, :, ::1] Av = np.ascontiguousarray(A, dtype=float)
    cdef double[:, :, ::1] Bv = np.ascontiguousarray(BBt, dtype=float)
    cdef double[:, :, ::1] Qv = np.ascontiguousarray(Q, dtype=float)
    cdef double[::1] tv = np.ascontiguousarray(times, dtype=float)
    cdef double[:, ::1] PTv = np.ascontiguousarray(PT, dtype=float)
    cdef int n = PTv.shape[0]
    cdef Py_ssize_t K = tv.shape[0] - 1
    out = np.empty((K + 1, n, n))
    cdef double[:, :, ::1] ov = out
    cdef double* g1 = <double*> malloc(n * n * sizeof(double))
    cdef double* g2 = <double*> malloc(n * n * sizeof(double))
    cdef double* pp = <double*> malloc(n * n * sizeof(double))
    cdef double* t1 = <double*> malloc(n * n * sizeof(double))
    cdef double* t2 = <double*> malloc(n * n * sizeof(double))
    cdef Py_ssize_t k, i, j
    cdef double h
    with nogil:
        memcpy(&ov[K, 0, 0], &PTv[0, 0], n * n * sizeof(double))
        for k in range(K, 0, -1):
            h = tv[k] - tv[k - 1]
            _ric_rhs(&Av[k, 0, 0], &Bv[k, 0, 0], &Qv[k, 0, 0], &ov[k, 0, 0], g1, t1, t2, n)
            for i in range(n * n):
                pp[i] = (&ov[k, 0, 0])[i] + h * g1[i]
            _ric_rhs(&Av[k - 1, 0, 0], &Bv[k - 1, 0, 0], &Qv[k - 1, 0, 0], pp, g2, t1, t2, n)
            for i in range(n * n):
                t1[i] = (&ov[k, 0, 0])[i] + 0.5 * h * (g1[i] + g2[i])
            for i in range(n):
                for j in range(n):
                    ov[k - 1, i, j] = 0.5 * (t1[i * n + j] + t1[j * n + i])
        ok = _finite(&ov[0, 0, 0], (K + 1) * n * n)
    free(g1)
    free(g2)
    free(pp)
    free(t1)
    free(t2)
    if not ok:
        raise NumericalDomainError("non-finite value in riccati_backward")
    return out


def bt_cholesky(diag, lower):
    cdef double[:, :, ::1] Dv = np.ascontiguousarray(diag, dtype=float)
    cdef double[:, :, ::1] Lov = np.ascontiguousarray(lower, dtype=float).reshape(-1, Dv.shape[1], Dv.shape[1])
    cdef int m = Dv.shape[0]
    cdef int n = Dv.shape[1]
    Ld = np.zeros((m, n, n))
    Ll = np.zeros((max(m - 1, 0), n, n))
    cdef double[:, :, ::1] Ldv = Ld
    cdef double[:, :, ::1] Llv = Ll
    cdef double* S = <double*> malloc(n * n * sizeof(double))
    cdef double* T = <double*> malloc(n * n * sizeof(double))
    cdef int i, a, b, fail = -1
    with nogil:
        if _chol(&Dv[0, 0, 0], &Ldv[0, 0, 0], n) != 0:
            fail = 0
        else:
            for i in range(m - 1):
                # T = L_ii^{-1} J[i+1,i]^T ; Ll_i = T^T
                for a in range(n):
                    for b in range(n):
                        T[a * n + b] = Lov[i, b, a]
                _trsm_l(&Ldv[i, 0, 0], T, n, n)
                for a in range(n):
                    for b in range(n):
                        Llv[i, a, b] = T[b * n + a]
                _mm_nt(&Llv[i, 0, 0], &Llv[i, 0, 0], S, n, n, n)
                for a in range(n * n):
                    S[a] = (&Dv[i + 1, 0, 0])[a] - S[a]
                if _chol(S, &Ldv[i + 1, 0, 0], n) != 0:
                    fail = i + 1
                    break
    free(S)
    free(T)
    if fail >= 0:
        raise FactorizationError(f"block {fail} is not positive definite")
    return Ld, Ll


def bt_solve_upper(Ld, Ll, y):
    y = np.asarray(y, dtype=float)
    vec = y.ndim == 2
    ym = np.ascontiguousarray(y.reshape(y.shape[0], y.shape[1], -1))
    cdef double[:, :, ::1] Ldv = np.ascontiguousarray(Ld, dtype=float)
    cdef double[:, :, ::1] Llv = np.ascontiguousarray(Ll, dtype=float).reshape(-1, Ldv.shape[1], Ldv.shape[1])
    cdef int m = Ldv.shape[0]
    cdef int n = Ldv.shape[1]
    cdef int p = ym.shape[2]
    x = ym.copy()
    cdef double[:, :, ::1] xv = x
    cdef double* tmp = <double*> malloc(n * p * sizeof(double))
    cdef int i, a
    with nogil:
        _trsm_lt(&Ldv[m - 1, 0, 0], &xv[m - 1, 0, 0], n, p)
        for i in range(m - 2, -1, -1):
            _mm_tn(&Llv[i, 0, 0], &xv[i + 1, 0, 0], tmp, n, n, p)
            for a in range(n * p):
                (&xv[i, 0, 0])[a] -= tmp[a]
            _trsm_lt(&Ldv[i, 0, 0], &xv[i, 0, 0], n, p)
    free(tmp)
    if vec:
        return x[:, :, 0]
    return x


def bt_solve(Ld, Ll, b):
    b = np.asarray(b, dtype=float)
    vec = b.ndim == 2
    bm = np.ascontiguousarray(b.reshape(b.shape[0], b.shape[1], -1))
    cdef double[:, :, ::1] Ldv = np.ascontiguousarray(Ld, dtype=float)
    cdef double[:, :, ::1] Llv = np.ascontiguousarray(Ll, dtype=float).reshape(-1, Ldv.shape[1], Ldv.shape[1])
    cdef int m = Ldv.shape[0]
    cdef int n = Ldv.shape[1]
    cdef int p = bm.shape[2]
    y = bm.copy()
    cdef double[:, :, ::1] yv = y
    cdef double* tmp = <double*> malloc(n * p * sizeof(double))
    cdef int i, a
    with nogil:
        _trsm_l(&Ldv[0, 0, 0], &yv[0, 0, 0], n, p)
        for i in range(m - 1):
            _mm(&Llv[i, 0, 0], &yv[i, 0, 0], tmp, n, n, p)
            for a in range(n * p):
                (&yv[i + 1, 0, 0])[a] -= tmp[a]
            _trsm_l(&Ldv[i + 1, 0, 0], &yv[i + 1, 0, 0], n, p)
    free(tmp)
    x = bt_solve_upper(Ld, Ll, y)
    if vec:
        return x[:, :, 0]
    return x


def bt_selinv(Ld, Ll):
    cdef double[:, :, ::1] Ldv = np.ascontiguousarray(Ld, dtype=float)
    cdef double[:, :, ::1] Llv = np.ascontiguousarray(Ll, dtype=float).reshape(-1, Ldv.shape[1], Ldv.shape[1])
    cdef int m = Ldv.shape[0]
    cdef int n = Ldv.shape[1]
    Sd = np.empty((m, n, n))
    Sl = np.empty((max(m - 1, 0), n, n))
    cdef double[:, :, ::1] Sdv = Sd
    cdef double[:, :, ::1] Slv = Sl
    cdef double* Li = <double*> malloc(n * n * sizeof(double))
    cdef double* t1 = <double*> malloc(n * n * sizeof(double))
    cdef double* t2 = <double*> malloc(n * n * sizeof(double))
    cdef int i, a, b
    with nogil:
        # Li = L_mm^{-1}
        for a in range(n * n):
            Li[a] = 0.0
        for a in range(n):
            Li[a * n + a] = 1.0
        _trsm_l(&Ldv[m - 1, 0, 0], Li, n, n)
        _mm_tn(Li, Li, &Sdv[m - 1, 0, 0], n, n, n)
        for i in range(m - 2, -1, -1):
            for a in range(n * n):
                Li[a] = 0.0
            for a in range(n):
                Li[a * n + a] = 1.0
            _trsm_l(&Ldv[i, 0, 0], Li, n, n)
            # Sl_i = -Sd_{i+1} Ll_i Li
            _mm(&Sdv[i + 1, 0, 0], &Llv[i, 0, 0], t1, n, n, n)
            _mm(t1, Li, &Slv[i, 0, 0], n, n, n)
            for a in range(n * n):
                (&Slv[i, 0, 0])[a] = -(&Slv[i, 0, 0])[a]
            # Sd_i = Li^T (Li - Ll_i^T Sl_i)
            _mm_tn(&Llv[i, 0, 0], &Slv[i, 0, 0], t1, n, n, n)
            for a in range(n * n):
                t1[a] = Li[a] - t1[a]
            _mm_tn(Li, t1, t2, n, n, n)
            for a in range(n):
                for b in range(n):
                    Sdv[i, a, b] = 0.5 * (t2[a * n + b] + t2[b * n + a])
    free(Li)
    free(t1)
    free(t2)
    return Sd, Sl
