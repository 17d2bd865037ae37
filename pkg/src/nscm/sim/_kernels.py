"""Batched continuous algebraic Riccati solver (Newton-Kleinman).

Solves ``A^T P + P A - P B R^{-1} B^T P + Q = 0`` for a stack of small
systems.  The first stabilizing gain comes from Bass's Lyapunov solve
``(A + beta I) X + X (A + beta I)^T = 2 B B^T`` with ``K0 = B^T X^{-1}``;
uncontrollable or input-free systems start from ``K0 = 0`` instead.
Each Newton step solves a Lyapunov equation through its Kronecker form,
which is cheap for the state sizes used here.

Status codes: 0 converged, 1 iteration cap, 2 singular Lyapunov system,
3 non-finite iterate.
"""

from __future__ import annotations

import numpy as np

from .._accel import USE_NUMBA, njit

CONVERGED, MAX_ITER, SINGULAR, NONFINITE = 0, 1, 2, 3


def _lyap_matrix_np(A):
    # row-major vec: vec(A^T P + P A) = (A^T kron I + I kron A^T) vec(P)
    n = A.shape[-1]
    I = np.eye(n)
    AT = np.swapaxes(A, -1, -2)
    return np.einsum("bij,kl->bikjl", AT, I).reshape(-1, n * n, n * n) + \
        np.einsum("ij,bkl->bikjl", I, AT).reshape(-1, n * n, n * n)


def care_batch_np(A, B, Q, R, tol=1e-10, max_iter=50, K0=None):
    """Numpy implementation, vectorized over the leading axis."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    Q = np.asarray(Q, dtype=float)
    R = np.asarray(R, dtype=float)
    nb, n, _ = A.shape
    Rinv = np.linalg.inv(R)
    S = B @ Rinv @ np.swapaxes(B, -1, -2)
    BT = np.swapaxes(B, -1, -2)
    P = np.zeros((nb, n, n))
    status = np.full(nb, MAX_ITER, dtype=np.int64)
    iters = np.zeros(nb, dtype=np.int64)

    # Bass initialization
    beta = np.linalg.norm(A, axis=(-2, -1)) + 1.0
    Ab = A + beta[:, None, None] * np.eye(n)
    rhs = 2.0 * B @ BT
    L = _lyap_matrix_np(np.swapaxes(Ab, -1, -2))
    K = np.zeros((nb, B.shape[-1], n))
    for b in range(nb):
        if not np.any(B[b]):
            continue
        try:
            X = np.linalg.solve(L[b], rhs[b].ravel()).reshape(n, n)
            K[b] = BT[b] @ np.linalg.inv(X)
        except np.linalg.LinAlgError:
            K[b] = 0.0
        if not np.all(np.isfinite(K[b])) or np.linalg.cond(X) > 1e12:
            K[b] = 0.0
    if K0 is not None:
        K = np.array(K0, dtype=float)

    active = np.ones(nb, dtype=bool)
    qscale = 1.0 + np.linalg.norm(Q, axis=(-2, -1))
    for it in range(max_iter):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        Ak = A[idx] - B[idx] @ K[idx]
        rhs = -(Q[idx] + np.swapaxes(K[idx], -1, -2) @ R[idx] @ K[idx])
        Lk = _lyap_matrix_np(Ak)
        for j, b in enumerate(idx):
            try:
                Pb = np.linalg.solve(Lk[j], rhs[j].ravel()).reshape(n, n)
            except np.linalg.LinAlgError:
                status[b], active[b] = SINGULAR, False
                continue
            if not np.all(np.isfinite(Pb)):
                status[b], active[b] = NONFINITE, False
                continue
            P[b] = 0.5 * (Pb + Pb.T)
            K[b] = Rinv[b] @ BT[b] @ P[b]
            iters[b] = it + 1
            res = A[b].T @ P[b] + P[b] @ A[b] - P[b] @ S[b] @ P[b] + Q[b]
            if np.linalg.norm(res) <= tol * qscale[b]:
                status[b], active[b] = CONVERGED, False
    return P, status, iters


@njit
def care_batch_nb(A, B, Q, R, tol, max_iter, K0, has_k0):
    nb, n, _ = A.shape
    m = B.shape[2]
    nn = n * n
    P = np.zeros((nb, n, n))
    status = np.full(nb, MAX_ITER, dtype=np.int64)
    iters = np.zeros(nb, dtype=np.int64)
    I = np.eye(n)
    for b in range(nb):
        Ab = A[b]
        Bb = B[b]
        Rinv = np.linalg.inv(R[b])
        S = Bb @ Rinv @ Bb.T
        qscale = 1.0 + np.sqrt(np.sum(Q[b] ** 2))
        K = np.zeros((m, n))
        if has_k0:
            K = K0[b].copy()
        elif np.any(Bb != 0.0):
            beta = np.sqrt(np.sum(Ab**2)) + 1.0
            C = Ab + beta * I
            L = np.kron(C, I) + np.kron(I, C)
            ok = True
            X = np.zeros((n, n))
            rhs = (2.0 * Bb @ Bb.T).copy().reshape(nn)
            if abs(np.linalg.det(L)) > 1e-300:
                X = np.linalg.solve(L, rhs).reshape(n, n)
                if np.all(np.isfinite(X)) and np.linalg.cond(X) <= 1e12:
                    K = Bb.T @ np.linalg.inv(X)
                else:
                    ok = False
            else:
                ok = False
            if not ok or not np.all(np.isfinite(K)):
                K = np.zeros((m, n))
        for it in range(max_iter):
            Ak = Ab - Bb @ K
            AkT = Ak.T.copy()
            L = np.kron(AkT, I) + np.kron(I, AkT)
            rhs = -(Q[b] + K.T @ R[b] @ K)
            if abs(np.linalg.det(L)) == 0.0:
                status[b] = SINGULAR
                break
            Pb = np.linalg.solve(L, rhs.copy().reshape(nn)).reshape(n, n)
            if not np.all(np.isfinite(Pb)):
                status[b] = NONFINITE
                break
            Pb = 0.5 * (Pb + Pb.T)
            P[b] = Pb
            K = Rinv @ Bb.T @ Pb
            iters[b] = it + 1
            res = Ab.T @ Pb + Pb @ Ab - Pb @ S @ Pb + Q[b]
            if np.sqrt(np.sum(res**2)) <= tol * qscale:
                status[b] = CONVERGED
                break
    return P, status, iters


def care_batch(A, B, Q, R, tol=1e-10, max_iter=50, K0=None, use_numba=None):
    """Dispatch to the numba or numpy Newton-Kleinman solver; returns ``(P, status, iterations)``.

    ``K0`` warm-starts Newton from given gains (e.g. the previous time
    step); instances that fail from the warm start are re-solved from the
    Bass initialization.
    """
    if use_numba is None:
        use_numba = USE_NUMBA
    A, B, Q, R = (np.ascontiguousarray(v, dtype=float) for v in (A, B, Q, R))

    def run(A, B, Q, R, K0):
        if use_numba:
            has = K0 is not None
            K0 = np.zeros((A.shape[0], B.shape[2], A.shape[1])) if K0 is None else np.ascontiguousarray(K0, float)
            return care_batch_nb(A, B, Q, R, float(tol), int(max_iter), K0, has)
        return care_batch_np(A, B, Q, R, tol, max_iter, K0)

    P, status, iters = run(A, B, Q, R, K0)
    if K0 is not None:
        # Newton from a non-stabilizing warm start can land on a non-stabilizing root
        indefinite = np.linalg.eigvalsh(P)[:, 0] < -1e-9 * (1.0 + np.abs(P).max(axis=(-2, -1)))
        bad = np.flatnonzero((status != CONVERGED) | indefinite)
        if bad.size:
            P2, s2, i2 = run(A[bad], B[bad], Q[bad], R[bad], None)
            P[bad], status[bad], iters[bad] = P2, s2, i2
    return P, status, iters
