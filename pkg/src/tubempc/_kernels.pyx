# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels: batched RK4 rollout and the dual active-set QP.

Same signatures and return conventions as ``_kernels_py``.
"""
import numpy as np
from libc.math cimport sin, cos, sqrt, hypot, INFINITY
from scipy.linalg.cython_blas cimport dgemv

QP_OK = 0
QP_INFEASIBLE = 1
QP_MAX_ITER = 2


cdef inline void _field(double t1, double t2, double t3, double[::1] w,
                        double[::1] L, double* fx, double* fy) noexcept nogil:
    fx[0] = -(L[0] * w[0] * sin(t1) + L[1] * w[1] * sin(t2) + L[2] * w[2] * sin(t3))
    fy[0] = L[0] * w[0] * cos(t1) + L[1] * w[1] * cos(t2) + L[2] * w[2] * cos(t3)


def rk4_rollout(z0, controls, double delta, lengths, disturbances=None):
    cdef double[:, ::1] Z0 = np.ascontiguousarray(z0, dtype=np.float64)
    cdef double[:, :, ::1] U = np.ascontiguousarray(controls, dtype=np.float64)
    cdef double[::1] L = np.ascontiguousarray(lengths, dtype=np.float64)
    cdef Py_ssize_t n_batch = U.shape[0], n_steps = U.shape[1]
    out = np.empty((n_batch, n_steps + 1, 5))
    cdef double[:, :, ::1] T = out
    cdef double[:, :, ::1] E
    cdef bint has_e = disturbances is not None
    if has_e:
        E = np.ascontiguousarray(disturbances, dtype=np.float64)
    cdef Py_ssize_t m, i, c
    cdef double h = delta, half = 0.5 * delta
    cdef double z[5]
    cdef double k1x, k1y, k2x, k2y, k3x, k3y, k4x, k4y
    cdef double[::1] w
    for m in range(n_batch):
        for c in range(5):
            z[c] = Z0[m, c]
            T[m, 0, c] = z[c]
        for i in range(n_steps):
            w = U[m, i]
            _field(z[2], z[3], z[4], w, L, &k1x, &k1y)
            _field(z[2] + half * w[0], z[3] + half * w[1], z[4] + half * w[2], w, L, &k2x, &k2y)
            _field(z[2] + half * w[0], z[3] + half * w[1], z[4] + half * w[2], w, L, &k3x, &k3y)
            _field(z[2] + h * w[0], z[3] + h * w[1], z[4] + h * w[2], w, L, &k4x, &k4y)
            z[0] = z[0] + (h / 6.0) * (k1x + 2.0 * k2x + 2.0 * k3x + k4x)
            z[1] = z[1] + (h / 6.0) * (k1y + 2.0 * k2y + 2.0 * k3y + k4y)
            for c in range(3):
                z[2 + c] = z[2 + c] + (h / 6.0) * (6.0 * w[c])
            if has_e:
                for c in range(5):
                    z[c] = z[c] + h * E[m, i, c]
            for c in range(5):
                T[m, i + 1, c] = z[c]
    return out


cdef void _rotate_cols(double[:, ::1] Jt, Py_ssize_t a, Py_ssize_t b,
                       double c, double s, Py_ssize_t n) noexcept nogil:
    # J is stored transposed: column j of J is row j of Jt
    cdef Py_ssize_t i
    cdef double ja, jb
    cdef double* ra = &Jt[a, 0]
    cdef double* rb = &Jt[b, 0]
    for i in range(n):
        ja = ra[i]
        jb = rb[i]
        ra[i] = c * ja + s * jb
        rb[i] = -s * ja + c * jb


cdef Py_ssize_t _drop(double[:, ::1] J, double[:, ::1] R, double[::1] u,
                      Py_ssize_t[::1] active, unsigned char[::1] is_active,
                      Py_ssize_t k, Py_ssize_t q, Py_ssize_t n) noexcept nogil:
    cdef Py_ssize_t i, j, col
    cdef double a, b, h, c, s, ra, rb
    is_active[active[k]] = 0
    for j in range(k, q - 1):
        active[j] = active[j + 1]
        u[j] = u[j + 1]
        for i in range(q):
            R[i, j] = R[i, j + 1]
    u[q - 1] = 0.0
    for i in range(q):
        R[i, q - 1] = 0.0
    for j in range(k, q - 1):
        a = R[j, j]
        b = R[j + 1, j]
        h = hypot(a, b)
        if h == 0.0:
            continue
        c = a / h
        s = b / h
        for col in range(j, q - 1):
            ra = R[j, col]
            rb = R[j + 1, col]
            R[j, col] = c * ra + s * rb
            R[j + 1, col] = -s * ra + c * rb
        R[j + 1, j] = 0.0
        _rotate_cols(J, j, j + 1, c, s, n)
    return q - 1


def gi_solve(H_in, g_in, C_in, b_in, double feas_tol, Py_ssize_t max_iter):
    cdef double[:, ::1] H = np.ascontiguousarray(H_in, dtype=np.float64)
    cdef Py_ssize_t n = H.shape[0]
    cdef double[::1] g = np.ascontiguousarray(g_in, dtype=np.float64)
    cdef double[:, ::1] C = np.ascontiguousarray(np.asarray(C_in, dtype=np.float64).reshape(-1, n))
    cdef double[::1] b = np.ascontiguousarray(b_in, dtype=np.float64)
    cdef Py_ssize_t n_con = C.shape[0]

    cdef double[:, ::1] L = np.zeros((n, n))
    cdef double[:, ::1] J = np.zeros((n, n))
    cdef double[:, ::1] R = np.zeros((n, n))
    x_arr = np.zeros(n)
    cdef double[::1] x = x_arr
    cdef double[::1] tmp = np.zeros(n)
    cdef double[::1] d = np.zeros(n)
    cdef double[::1] z = np.zeros(n)
    cdef double[::1] r = np.zeros(n)
    cdef double[::1] u = np.zeros(n + 1)
    cdef Py_ssize_t[::1] active = np.zeros(n + 1, dtype=np.intp)
    cdef unsigned char[::1] is_active = np.zeros(max(n_con, 1), dtype=np.uint8)

    cdef double[::1] slack = np.zeros(max(n_con, 1))
    cdef int n_i = <int>n, ncon_i = <int>n_con, nq_i, inc = 1
    cdef char trans_t = b'T', trans_n = b'N'
    cdef double one = 1.0, zero = 0.0
    cdef Py_ssize_t i, j, k, p, q = 0, iters = 0, status = QP_OK
    cdef double acc, t1, t2, t, zn, s_p, smin, sv, u_plus, zz, nn, c, s, h, ratio

    # Cholesky H = L L'
    for j in range(n):
        acc = H[j, j]
        for k in range(j):
            acc -= L[j, k] * L[j, k]
        if acc <= 0.0:
            raise np.linalg.LinAlgError("Hessian is not positive definite")
        L[j, j] = sqrt(acc)
        for i in range(j + 1, n):
            acc = H[i, j]
            for k in range(j):
                acc -= L[i, k] * L[j, k]
            L[i, j] = acc / L[j, j]

    # x = -H^{-1} g
    for i in range(n):
        acc = g[i]
        for k in range(i):
            acc -= L[i, k] * tmp[k]
        tmp[i] = acc / L[i, i]
    for i in range(n - 1, -1, -1):
        acc = tmp[i]
        for k in range(i + 1, n):
            acc -= L[k, i] * x[k]
        x[i] = acc / L[i, i]
    for i in range(n):
        x[i] = -x[i]

    # J = L^{-T} is stored transposed, i.e. the array holds L^{-1} (lower triangular)
    for j in range(n):
        for i in range(j, n):
            acc = 1.0 if i == j else 0.0
            for k in range(j, i):
                acc -= L[i, k] * J[k, j]
            J[i, j] = acc / L[i, i]

    while n_con > 0:
        # slack = C x - b; the row-major C buffer is C' in column-major terms
        dgemv(&trans_t, &n_i, &ncon_i, &one, &C[0, 0], &n_i, &x[0], &inc, &zero, &slack[0], &inc)
        smin = INFINITY
        p = -1
        for i in range(n_con):
            if is_active[i]:
                continue
            acc = slack[i] - b[i]
            if acc < smin:
                smin = acc
                p = i
        if p < 0 or smin >= -feas_tol:
            break
        u_plus = 0.0
        while True:
            iters += 1
            if iters > max_iter:
                status = QP_MAX_ITER
                break
            # d = J' n_p and z = J[:, q:] d[q:], with J held transposed
            dgemv(&trans_t, &n_i, &n_i, &one, &J[0, 0], &n_i, &C[p, 0], &inc, &zero, &d[0], &inc)
            if q < n:
                nq_i = <int>(n - q)
                dgemv(&trans_n, &n_i, &nq_i, &one, &J[q, 0], &n_i, &d[q], &inc, &zero, &z[0], &inc)
            else:
                for i in range(n):
                    z[i] = 0.0
            zz = 0.0
            nn = 0.0
            zn = 0.0
            for i in range(n):
                zz += z[i] * z[i]
                nn += C[p, i] * C[p, i]
                zn += z[i] * C[p, i]
            for i in range(q - 1, -1, -1):
                acc = d[i]
                for k in range(i + 1, q):
                    acc -= R[i, k] * r[k]
                r[i] = acc / R[i, i]
            t1 = INFINITY
            k = -1
            for j in range(q):
                if r[j] > 0.0:
                    ratio = u[j] / r[j]
                    if ratio < t1:
                        t1 = ratio
                        k = j
            s_p = -b[p]
            for i in range(n):
                s_p += C[p, i] * x[i]
            if sqrt(zz) > 1e-14 * (1.0 + sqrt(nn)) and zn > 0.0:
                t2 = -s_p / zn
            else:
                t2 = INFINITY
            t = t1 if t1 < t2 else t2
            if t == INFINITY:
                status = QP_INFEASIBLE
                break
            if t2 == INFINITY:
                for j in range(q):
                    u[j] -= t * r[j]
                u_plus += t
                q = _drop(J, R, u, active, is_active, k, q, n)
                continue
            for i in range(n):
                x[i] += t * z[i]
            for j in range(q):
                u[j] -= t * r[j]
            u_plus += t
            if t2 <= t1:
                for i in range(n - 1, q, -1):
                    h = hypot(d[i - 1], d[i])
                    if h == 0.0:
                        continue
                    c = d[i - 1] / h
                    s = d[i] / h
                    d[i - 1] = h
                    d[i] = 0.0
                    _rotate_cols(J, i - 1, i, c, s, n)
                for i in range(q + 1):
                    R[i, q] = d[i]
                active[q] = p
                is_active[p] = 1
                u[q] = u_plus
                q += 1
                break
            q = _drop(J, R, u, active, is_active, k, q, n)
        if status != QP_OK:
            break

    lam = np.zeros(n_con)
    for j in range(q):
        lam[active[j]] = u[j]
    return x_arr, lam, iters, status


cdef double _jacobi_max_eig(double* G, Py_ssize_t n) noexcept nogil:
    # cyclic Jacobi on a copy; n <= 8
    cdef double a[64]
    cdef Py_ssize_t i, j, k, sweep
    cdef double off, theta, t, c, s, aik, ajk, app, aqq, apq, best
    for i in range(n * n):
        a[i] = G[i]
    for sweep in range(60):
        off = 0.0
        for i in range(n):
            for j in range(i + 1, n):
                off += a[i * n + j] * a[i * n + j]
        best = 0.0
        for i in range(n):
            best += a[i * n + i] * a[i * n + i]
        if off <= 1e-34 * best:
            break
        for i in range(n):
            for j in range(i + 1, n):
                apq = a[i * n + j]
                if apq == 0.0:
                    continue
                app = a[i * n + i]
                aqq = a[j * n + j]
                theta = (aqq - app) / (2.0 * apq)
                t = (1.0 if theta >= 0.0 else -1.0) / (abs(theta) + sqrt(theta * theta + 1.0))
                c = 1.0 / sqrt(t * t + 1.0)
                s = t * c
                for k in range(n):
                    aik = a[i * n + k]
                    ajk = a[j * n + k]
                    a[i * n + k] = c * aik - s * ajk
                    a[j * n + k] = s * aik + c * ajk
                for k in range(n):
                    aik = a[k * n + i]
                    ajk = a[k * n + j]
                    a[k * n + i] = c * aik - s * ajk
                    a[k * n + j] = s * aik + c * ajk
    best = a[0]
    for i in range(1, n):
        if a[i * n + i] > best:
            best = a[i * n + i]
    return best


cdef inline void _orthonormalize2(double* X, double* Y, Py_ssize_t n) noexcept nogil:
    # Gram-Schmidt on the pair (X, Y); Y is reset to a coordinate vector if it collapses
    cdef Py_ssize_t k, j
    cdef double nx = 0.0, ny = 0.0, dot = 0.0
    for k in range(n):
        nx += X[k] * X[k]
    nx = sqrt(nx)
    if nx == 0.0:
        for k in range(n):
            X[k] = 1.0 if k == 0 else 0.0
        nx = 1.0
    for k in range(n):
        X[k] /= nx
    for j in range(n + 1):
        ny = 0.0
        for k in range(n):
            ny += Y[k] * Y[k]
        ny = sqrt(ny)
        if ny > 0.0:
            for k in range(n):
                Y[k] /= ny
            dot = 0.0
            for k in range(n):
                dot += X[k] * Y[k]
            ny = 0.0
            for k in range(n):
                Y[k] -= dot * X[k]
                ny += Y[k] * Y[k]
            ny = sqrt(ny)
            if ny > 1e-8:
                break
        for k in range(n):
            Y[k] = 1.0 if k == j % n else 0.0
    for k in range(n):
        Y[k] /= ny


def spectral_norm_series(A_in, double rel_tol, Py_ssize_t max_terms):
    """``sum_i ||A^i||_2`` over the terms with ``||A^i||_2 >= rel_tol``.

    Returns ``(total, terms_used, converged)``. Each norm comes from a
    warm-started two-vector subspace iteration on ``M'M`` with Rayleigh-Ritz
    extraction; a Jacobi eigen-solve takes over when it stalls.
    """
    cdef double[:, ::1] A = np.ascontiguousarray(A_in, dtype=np.float64)
    cdef Py_ssize_t n = A.shape[0]
    if n > 8:
        raise ValueError("spectral_norm_series supports n <= 8")
    cdef double M[64]
    cdef double T[64]
    cdef double G[64]
    cdef double X[8]
    cdef double Y[8]
    cdef double t1[8]
    cdef double WX[8]
    cdef double WY[8]
    cdef double r[8]
    cdef Py_ssize_t i, j, k, it, term
    cdef double acc, lam, res, fro, total = 0.0, sig, h11, h12, h22, tr, det, disc, s1, s2, sn
    cdef bint ok
    for i in range(n * n):
        M[i] = 0.0
    for i in range(n):
        M[i * n + i] = 1.0
        X[i] = 1.0 + 0.1 * i
        Y[i] = 1.0 if i % 2 == 0 else -1.0
    for term in range(max_terms):
        fro = 0.0
        for i in range(n * n):
            fro += M[i] * M[i]
        ok = False
        lam = 0.0
        if n == 1:
            lam = fro
            ok = True
        for it in range(60):
            if ok:
                break
            _orthonormalize2(X, Y, n)
            # WX = M'M X, WY = M'M Y
            for i in range(n):
                acc = 0.0
                sn = 0.0
                for k in range(n):
                    acc += M[i * n + k] * X[k]
                    sn += M[i * n + k] * Y[k]
                t1[i] = acc
                r[i] = sn
            for k in range(n):
                acc = 0.0
                sn = 0.0
                for i in range(n):
                    acc += M[i * n + k] * t1[i]
                    sn += M[i * n + k] * r[i]
                WX[k] = acc
                WY[k] = sn
            h11 = 0.0
            h12 = 0.0
            h22 = 0.0
            for k in range(n):
                h11 += X[k] * WX[k]
                h12 += X[k] * WY[k]
                h22 += Y[k] * WY[k]
            tr = h11 + h22
            det = h11 * h22 - h12 * h12
            disc = sqrt(max(0.25 * (h11 - h22) * (h11 - h22) + h12 * h12, 0.0))
            lam = 0.5 * tr + disc
            # top Ritz vector coefficients (s1, s2)
            if abs(h12) > 0.0 or h11 != h22:
                if h11 >= h22:
                    s1 = lam - h22
                    s2 = h12
                else:
                    s1 = h12
                    s2 = lam - h11
            else:
                s1 = 1.0
                s2 = 0.0
            sn = sqrt(s1 * s1 + s2 * s2)
            if sn == 0.0:
                s1 = 1.0
                s2 = 0.0
                sn = 1.0
            s1 /= sn
            s2 /= sn
            res = 0.0
            for k in range(n):
                acc = s1 * WX[k] + s2 * WY[k] - lam * (s1 * X[k] + s2 * Y[k])
                res += acc * acc
            res = sqrt(res)
            # next basis: the images themselves, top Ritz direction first
            for k in range(n):
                acc = s1 * WX[k] + s2 * WY[k]
                Y[k] = -s2 * WX[k] + s1 * WY[k]
                X[k] = acc
            if lam <= 0.0:
                ok = True
                lam = 0.0
                break
            if res <= 1e-9 * lam and lam >= fro / n:
                ok = True
                break
        if not ok:
            for i in range(n):
                for j in range(n):
                    acc = 0.0
                    for k in range(n):
                        acc += M[k * n + i] * M[k * n + j]
                    G[i * n + j] = acc
            lam = _jacobi_max_eig(G, n)
        sig = sqrt(lam if lam > 0.0 else 0.0)
        if sig < rel_tol:
            return total, term, True
        total += sig
        for i in range(n):
            for j in range(n):
                acc = 0.0
                for k in range(n):
                    acc += M[i * n + k] * A[k, j]
                T[i * n + j] = acc
        for i in range(n * n):
            M[i] = T[i]
    return total, max_terms, False
