"""Hot inner loops: per-slot Newton solves and slot-block linear solves.

Two interchangeable implementations are kept side by side: numba-compiled
loops and vectorised numpy.  The numba path is used when numba imports and the
environment variable ``POWERTALK_NO_NUMBA`` is unset (or ``0``).  Both paths
return bit-for-bit comparable results up to floating-point summation order.

Slot rows use the compact power-balance form

    omega = A * v**2 + v * (Y @ v) - B * v + C

where ``A``, ``B`` are ``(T, N)`` and ``C`` is ``(N,)``.
"""

from __future__ import annotations

import os

import numpy as np

STATUS_OK = 0
STATUS_NONCONVERGED = 1
STATUS_COLLAPSE = 2


def _want_numba() -> bool:
    return os.environ.get("POWERTALK_NO_NUMBA", "0").strip().lower() in ("", "0", "false", "no")


try:  # pragma: no cover - import guard
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    numba = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and _want_numba()


# ---------------------------------------------------------------------------
# numpy path
# ---------------------------------------------------------------------------


def _omega_np(V, A, B, C, Y):
    return A * V * V + V * (V @ Y) - B * V + C


def newton_slots_numpy(A, B, C, Y, V0, tol, max_iter, max_halvings, polish=True):
    T, N = V0.shape
    V = np.array(V0, dtype=float)
    iters = np.zeros(T, dtype=np.int64)
    status = np.full(T, STATUS_NONCONVERGED, dtype=np.int64)
    om = _omega_np(V, A, B, C, Y)
    res = np.abs(om).max(axis=1)
    active = res >= tol
    status[~active] = STATUS_OK
    eye = np.eye(N)
    for _ in range(max_iter):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        v = V[idx]
        a, b = A[idx], B[idx]
        yv = v @ Y
        diag = 2.0 * a * v + yv - b
        J = diag[:, :, None] * eye + v[:, :, None] * Y[None, :, :]
        step = -np.linalg.solve(J, om[idx][:, :, None])[:, :, 0]
        lam = np.ones(idx.size)
        cur = res[idx]
        pending = np.ones(idx.size, dtype=bool)
        v_new = v.copy()
        om_new = om[idx].copy()
        for _h in range(max_halvings + 1):
            trial = v + lam[:, None] * step
            om_t = a * trial * trial + trial * (trial @ Y) - b * trial + C
            ok = (np.abs(om_t).max(axis=1) < cur) & np.all(trial > 0, axis=1)
            take = pending & ok
            v_new[take] = trial[take]
            om_new[take] = om_t[take]
            pending &= ~ok
            if not pending.any():
                break
            lam[pending] *= 0.5
        if pending.any():
            # no decrease within the halving budget: take the last trial if positive
            trial = v + lam[:, None] * step
            pos = np.all(trial > 0, axis=1)
            fix = pending & pos
            v_new[fix] = trial[fix]
            om_new[fix] = (a * trial * trial + trial * (trial @ Y) - b * trial + C)[fix]
            bad = pending & ~pos
            if bad.any():
                status[idx[bad]] = STATUS_COLLAPSE
                active[idx[bad]] = False
        good = status[idx] != STATUS_COLLAPSE
        gi = idx[good]
        V[gi] = v_new[good]
        om[gi] = om_new[good]
        res[gi] = np.abs(om_new[good]).max(axis=1)
        iters[gi] += 1
        done = gi[res[gi] < tol]
        status[done] = STATUS_OK
        active[done] = False
    if polish:
        # one extra full Newton step on converged rows, kept only if it helps
        idx = np.flatnonzero(status == STATUS_OK)
        if idx.size:
            v = V[idx]
            a, b = A[idx], B[idx]
            J = (2.0 * a * v + v @ Y - b)[:, :, None] * eye + v[:, :, None] * Y[None, :, :]
            trial = v - np.linalg.solve(J, om[idx][:, :, None])[:, :, 0]
            om_t = a * trial * trial + trial * (trial @ Y) - b * trial + C
            keep = (np.abs(om_t).max(axis=1) <= res[idx]) & np.all(trial > 0, axis=1)
            V[idx[keep]] = trial[keep]
    return V, iters, status


def block_solve_numpy(G, R):
    """Solve ``G[t] X[t] = R[t]`` for stacks ``G (T,N,N)``, ``R (T,N,K)``."""
    return np.linalg.solve(G, R)


# ---------------------------------------------------------------------------
# numba path
# ---------------------------------------------------------------------------

if HAVE_NUMBA:

    @numba.njit(cache=True)
    def _lu_solve_inplace(M, rhs):  # pragma: no cover - compiled
        # Gaussian elimination with partial pivoting; M (n,n), rhs (n,k) overwritten
        n = M.shape[0]
        k = rhs.shape[1]
        for c in range(n):
            p = c
            best = abs(M[c, c])
            for r in range(c + 1, n):
                if abs(M[r, c]) > best:
                    best = abs(M[r, c])
                    p = r
            if best == 0.0:
                return False
            if p != c:
                for j in range(n):
                    tmp = M[c, j]
                    M[c, j] = M[p, j]
                    M[p, j] = tmp
                for j in range(k):
                    tmp = rhs[c, j]
                    rhs[c, j] = rhs[p, j]
                    rhs[p, j] = tmp
            piv = M[c, c]
            for r in range(c + 1, n):
                f = M[r, c] / piv
                if f != 0.0:
                    for j in range(c + 1, n):
                        M[r, j] -= f * M[c, j]
                    for j in range(k):
                        rhs[r, j] -= f * rhs[c, j]
                M[r, c] = 0.0
        for c in range(n - 1, -1, -1):
            piv = M[c, c]
            for j in range(k):
                acc = rhs[c, j]
                for q in range(c + 1, n):
                    acc -= M[c, q] * rhs[q, j]
                rhs[c, j] = acc / piv
        return True

    @numba.njit(cache=True)
    def _omega_row(v, a, b, C, Y, out):  # pragma: no cover - compiled
        n = v.size
        worst = 0.0
        for i in range(n):
            yv = 0.0
            for j in range(n):
                yv += Y[i, j] * v[j]
            w = a[i] * v[i] * v[i] + v[i] * yv - b[i] * v[i] + C[i]
            out[i] = w
            if abs(w) > worst:
                worst = abs(w)
        return worst

    @numba.njit(cache=True)
    def newton_slots_numba(A, B, C, Y, V0, tol, max_iter, max_halvings, polish):  # pragma: no cover
        T, N = V0.shape
        V = V0.copy()
        iters = np.zeros(T, dtype=np.int64)
        status = np.zeros(T, dtype=np.int64)
        om = np.empty(N)
        om_t = np.empty(N)
        J = np.empty((N, N))
        rhs = np.empty((N, 1))
        trial = np.empty(N)
        for t in range(T):
            v = V[t]
            a = A[t]
            b = B[t]
            res = _omega_row(v, a, b, C, Y, om)
            st = STATUS_NONCONVERGED
            it = 0
            if res < tol:
                st = STATUS_OK
            while st == STATUS_NONCONVERGED and it < max_iter:
                for i in range(N):
                    yv = 0.0
                    for j in range(N):
                        yv += Y[i, j] * v[j]
                        J[i, j] = v[i] * Y[i, j]
                    J[i, i] += 2.0 * a[i] * v[i] + yv - b[i]
                    rhs[i, 0] = -om[i]
                if not _lu_solve_inplace(J, rhs):
                    break
                lam = 1.0
                accepted = False
                for _h in range(max_halvings + 1):
                    positive = True
                    for i in range(N):
                        trial[i] = v[i] + lam * rhs[i, 0]
                        if trial[i] <= 0.0:
                            positive = False
                    if positive:
                        r_t = _omega_row(trial, a, b, C, Y, om_t)
                        if r_t < res:
                            accepted = True
                            break
                    lam *= 0.5
                if not accepted:
                    lam *= 2.0
                    positive = True
                    for i in range(N):
                        trial[i] = v[i] + lam * rhs[i, 0]
                        if trial[i] <= 0.0:
                            positive = False
                    if not positive:
                        st = STATUS_COLLAPSE
                        break
                    r_t = _omega_row(trial, a, b, C, Y, om_t)
                for i in range(N):
                    v[i] = trial[i]
                    om[i] = om_t[i]
                res = r_t
                it += 1
                if res < tol:
                    st = STATUS_OK
            if st == STATUS_OK and polish and res > 0.0:
                for i in range(N):
                    yv = 0.0
                    for j in range(N):
                        yv += Y[i, j] * v[j]
                        J[i, j] = v[i] * Y[i, j]
                    J[i, i] += 2.0 * a[i] * v[i] + yv - b[i]
                    rhs[i, 0] = -om[i]
                if _lu_solve_inplace(J, rhs):
                    positive = True
                    for i in range(N):
                        trial[i] = v[i] + rhs[i, 0]
                        if trial[i] <= 0.0:
                            positive = False
                    if positive and _omega_row(trial, a, b, C, Y, om_t) <= res:
                        for i in range(N):
                            v[i] = trial[i]
            iters[t] = it
            status[t] = st
        return V, iters, status

    @numba.njit(cache=True)
    def block_solve_numba(G, R):  # pragma: no cover - compiled
        T, N, K = R.shape
        out = np.empty((T, N, K))
        M = np.empty((N, N))
        rhs = np.empty((N, K))
        for t in range(T):
            for i in range(N):
                for j in range(N):
                    M[i, j] = G[t, i, j]
                for j in range(K):
                    rhs[i, j] = R[t, i, j]
            if not _lu_solve_inplace(M, rhs):
                raise np.linalg.LinAlgError("singular slot block")
            for i in range(N):
                for j in range(K):
                    out[t, i, j] = rhs[i, j]
        return out


def newton_slots(A, B, C, Y, V0, tol, max_iter=50, max_halvings=30, use_numba=None, polish=True):
    """Damped Newton solve of every slot row; returns ``(V, iterations, status)``."""
    if use_numba is None:
        use_numba = USE_NUMBA
    args = (
        np.ascontiguousarray(A, dtype=float),
        np.ascontiguousarray(B, dtype=float),
        np.ascontiguousarray(C, dtype=float),
        np.ascontiguousarray(Y, dtype=float),
        np.ascontiguousarray(V0, dtype=float),
        float(tol),
        int(max_iter),
        int(max_halvings),
        bool(polish),
    )
    if use_numba and HAVE_NUMBA:
        return newton_slots_numba(*args)
    return newton_slots_numpy(*args)


def block_solve(G, R, use_numba=None):
    if use_numba is None:
        use_numba = USE_NUMBA
    G = np.ascontiguousarray(G, dtype=float)
    R = np.ascontiguousarray(R, dtype=float)
    if use_numba and HAVE_NUMBA:
        return block_solve_numba(G, R)
    return block_solve_numpy(G, R)
