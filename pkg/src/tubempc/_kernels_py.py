"""Pure-Python/numpy versions of the hot kernels.

Mirrors ``_kernels.pyx`` call for call. Selected automatically when the
compiled extension is missing or ``TUBEMPC_PURE_PYTHON=1`` is set.
"""
import numpy as np
from scipy.linalg import solve_triangular

QP_OK = 0
QP_INFEASIBLE = 1
QP_MAX_ITER = 2


def _field(theta, omega, lengths):
    # theta, omega: (M, 3)
    out = np.empty((theta.shape[0], 5))
    lw = lengths * omega
    out[:, 0] = -np.sum(lw * np.sin(theta), axis=1)
    out[:, 1] = np.sum(lw * np.cos(theta), axis=1)
    out[:, 2:] = omega
    return out


def rk4_rollout(z0, controls, delta, lengths, disturbances=None):
    """Integrate a batch of trajectories with fixed-step RK4.

    Parameters
    ----------
    z0 : (M, 5) array
    controls : (M, N, 3) array
        Input held constant over each step.
    delta : float
    lengths : (3,) array
    disturbances : (M, N, 5) array or None
        Added as ``delta * e`` after each RK4 step.

    Returns
    -------
    (M, N + 1, 5) array of states.
    """
    z0 = np.ascontiguousarray(z0, dtype=float)
    controls = np.ascontiguousarray(controls, dtype=float)
    lengths = np.asarray(lengths, dtype=float)
    n_batch, n_steps = controls.shape[0], controls.shape[1]
    traj = np.empty((n_batch, n_steps + 1, 5))
    traj[:, 0] = z0
    z = z0.copy()
    h = float(delta)
    # non-finite states propagate silently; callers check the result
    with np.errstate(invalid="ignore", over="ignore"):
        for i in range(n_steps):
            w = controls[:, i]
            # the field depends on theta only, so the x/y stages never feed back
            k1 = _field(z[:, 2:], w, lengths)
            k2 = _field(z[:, 2:] + 0.5 * h * k1[:, 2:], w, lengths)
            k3 = _field(z[:, 2:] + 0.5 * h * k2[:, 2:], w, lengths)
            k4 = _field(z[:, 2:] + h * k3[:, 2:], w, lengths)
            z = z + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            if disturbances is not None:
                z = z + h * disturbances[:, i]
            traj[:, i + 1] = z
    return traj


def _givens(a, b):
    h = np.hypot(a, b)
    if h == 0.0:
        return 1.0, 0.0, 0.0
    return a / h, b / h, h


def gi_solve(H, g, C, b, feas_tol, max_iter):
    """Goldfarb-Idnani dual active-set method.

    Solves ``min 0.5 x'Hx + g'x  s.t.  C x >= b`` for positive definite H.

    Returns
    -------
    x, lam, iterations, status
        ``lam`` holds one multiplier per row of C (zero when inactive).
    """
    H = np.asarray(H, dtype=float)
    g = np.asarray(g, dtype=float)
    C = np.asarray(C, dtype=float).reshape(-1, H.shape[0])
    b = np.asarray(b, dtype=float)
    n = H.shape[0]
    n_con = C.shape[0]

    L = np.linalg.cholesky(H)
    x = -solve_triangular(L.T, solve_triangular(L, g, lower=True), lower=False)
    J = solve_triangular(L, np.eye(n), lower=True, trans="T")
    R = np.zeros((n, n))
    active = []
    u = np.zeros(n + 1)
    is_active = np.zeros(n_con, dtype=bool)
    q = 0
    iters = 0

    while True:
        if n_con == 0:
            break
        s = C @ x - b
        s[is_active] = np.inf
        p = int(np.argmin(s))
        if s[p] >= -feas_tol:
            break
        n_plus = C[p]
        u_plus = 0.0
        while True:
            iters += 1
            if iters > max_iter:
                lam = np.zeros(n_con)
                lam[active] = u[:q]
                return x, lam, iters, QP_MAX_ITER
            d = J.T @ n_plus
            z = J[:, q:] @ d[q:]
            if q > 0:
                r = solve_triangular(R[:q, :q], d[:q], lower=False)
            else:
                r = d[:0]
            t1 = np.inf
            k = -1
            for j in range(q):
                if r[j] > 0.0:
                    ratio = u[j] / r[j]
                    if ratio < t1:
                        t1 = ratio
                        k = j
            zn = float(z @ n_plus)
            s_p = float(n_plus @ x - b[p])
            if np.linalg.norm(z) > 1e-14 * (1.0 + np.linalg.norm(n_plus)) and zn > 0.0:
                t2 = -s_p / zn
            else:
                t2 = np.inf
            t = min(t1, t2)
            if t == np.inf:
                lam = np.zeros(n_con)
                lam[active] = u[:q]
                return x, lam, iters, QP_INFEASIBLE
            if t2 == np.inf:
                u[:q] -= t * r
                u_plus += t
                q = _drop(J, R, u, active, is_active, k, q)
                continue
            x = x + t * z
            u[:q] -= t * r
            u_plus += t
            if t2 <= t1:
                # full step: add p to the active set
                for i in range(n - 1, q, -1):
                    c, s_, h = _givens(d[i - 1], d[i])
                    if h == 0.0:
                        continue
                    d[i - 1] = h
                    d[i] = 0.0
                    a = J[:, i - 1].copy()
                    J[:, i - 1] = c * a + s_ * J[:, i]
                    J[:, i] = -s_ * a + c * J[:, i]
                R[: q + 1, q] = d[: q + 1]
                active.append(p)
                is_active[p] = True
                u[q] = u_plus
                q += 1
                break
            q = _drop(J, R, u, active, is_active, k, q)

    lam = np.zeros(n_con)
    lam[active] = u[:q]
    return x, lam, iters, QP_OK


def _drop(J, R, u, active, is_active, k, q):
    is_active[active[k]] = False
    del active[k]
    u[k:q - 1] = u[k + 1:q]
    u[q - 1] = 0.0
    R[:q, k:q - 1] = R[:q, k + 1:q]
    R[:q, q - 1] = 0.0
    for j in range(k, q - 1):
        c, s_, h = _givens(R[j, j], R[j + 1, j])
        if h == 0.0:
            continue
        rj = R[j, j:q - 1].copy()
        R[j, j:q - 1] = c * rj + s_ * R[j + 1, j:q - 1]
        R[j + 1, j:q - 1] = -s_ * rj + c * R[j + 1, j:q - 1]
        R[j + 1, j] = 0.0
        a = J[:, j].copy()
        J[:, j] = c * a + s_ * J[:, j + 1]
        J[:, j + 1] = -s_ * a + c * J[:, j + 1]
    return q - 1


def _power_stack(A, count, start):
    # start, start A, ..., start A^(count-1); sequential products keep the
    # rounding relative to each term (doubling loses it for non-normal A)
    out = np.empty((count,) + A.shape)
    out[0] = start
    for k in range(1, count):
        np.matmul(out[k - 1], A, out=out[k])
    return out


def spectral_norm_series(A, rel_tol, max_terms, chunk=4096):
    """``sum_i ||A^i||_2`` over the terms with ``||A^i||_2 >= rel_tol``.

    Returns ``(total, terms_used, converged)``.
    """
    A = np.asarray(A, dtype=float)
    total = 0.0
    current = np.eye(A.shape[0])
    used = 0
    while used < max_terms:
        block = _power_stack(A, min(chunk, max_terms - used), current)
        gram = np.swapaxes(block, -1, -2) @ block
        norms = np.sqrt(np.maximum(np.linalg.eigvalsh(gram)[:, -1], 0.0))
        below = np.nonzero(norms < rel_tol)[0]
        if below.size:
            return total + float(norms[: below[0]].sum()), used + int(below[0]), True
        total += float(norms.sum())
        used += block.shape[0]
        current = block[-1] @ A
    return total, used, False
