"""Per-block kernels for the interior-point solver.

Blocks of equal dimension are stored as padded batches: ``F`` has shape
(nb, K, d, d) and ``idx`` (nb, K) holds the decision index of each
coefficient, ``-1`` marking padding.  Each kernel has a numba version and a
pure numpy twin; ``NSCM_DISABLE_NUMBA=1`` selects the numpy path.
"""

from __future__ import annotations

import numpy as np

from .._accel import USE_NUMBA, njit


def scatter_blocks_np(F, idx, x):
    """``out[b] = sum_k x[idx[b, k]] F[b, k]``."""
    xs = np.where(idx >= 0, x[np.maximum(idx, 0)], 0.0)
    return np.einsum("bkij,bk->bij", F, xs)


def gather_traces_np(F, idx, Z, out):
    """``out[idx[b, k]] += <F[b, k], Z[b]>`` (trace inner product)."""
    vals = np.einsum("bkij,bij->bk", F, Z)
    mask = idx >= 0
    np.add.at(out, idx[mask], vals[mask])
    return out


def congruence_np(F, Q):
    """``Q[b]^T F[b, k] Q[b]`` for every block and term."""
    return np.swapaxes(Q, -1, -2)[:, None] @ F @ Q[:, None]


@njit
def scatter_blocks_nb(F, idx, x):
    nb, K, d, _ = F.shape
    out = np.zeros((nb, d, d))
    for b in range(nb):
        for k in range(K):
            j = idx[b, k]
            if j < 0:
                continue
            v = x[j]
            for r in range(d):
                for c in range(d):
                    out[b, r, c] += v * F[b, k, r, c]
    return out


@njit
def gather_traces_nb(F, idx, Z, out):
    nb, K, d, _ = F.shape
    for b in range(nb):
        for k in range(K):
            j = idx[b, k]
            if j < 0:
                continue
            acc = 0.0
            for r in range(d):
                for c in range(d):
                    acc += F[b, k, r, c] * Z[b, r, c]
            out[j] += acc
    return out


@njit
def congruence_nb(F, Q):
    nb, K, d, _ = F.shape
    out = np.zeros((nb, K, d, d))
    tmp = np.empty((d, d))
    for b in range(nb):
        for k in range(K):
            # tmp = F_k Q, out = Q^T tmp; row updates keep the inner loop contiguous
            tmp[:] = 0.0
            for r in range(d):
                for q in range(d):
                    f = F[b, k, r, q]
                    for c in range(d):
                        tmp[r, c] += f * Q[b, q, c]
            for q in range(d):
                for r in range(d):
                    w = Q[b, q, r]
                    for c in range(d):
                        out[b, k, r, c] += w * tmp[q, c]
    return out


def kernels(use_numba: bool | None = None):
    """Return ``(scatter_blocks, gather_traces, congruence)`` for the chosen backend."""
    if use_numba is None:
        use_numba = USE_NUMBA
    if use_numba:
        return scatter_blocks_nb, gather_traces_nb, congruence_nb
    return scatter_blocks_np, gather_traces_np, congruence_np
