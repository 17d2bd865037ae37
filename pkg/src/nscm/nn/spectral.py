"""Spectral norms by power iteration and the SN Lipschitz certificate."""

from __future__ import annotations

import numpy as np


class CertificateError(ValueError):
    """No usable SN constant satisfies the Lipschitz condition."""


def power_iteration(W, v0=None, rtol: float = 1e-9, max_iter: int = 10000):
    """Largest singular triple ``(sigma, u, v)`` of ``W`` with ``W v = sigma u``.

    Iterates on the Gram operator ``W^T W`` from ``v0`` (all-ones when not
    given, so results are deterministic) until ``sigma`` changes by less
    than ``rtol`` relative and ``v`` is a singular vector to ``rtol``.
    Every ``square_every`` steps the Gram matrix is squared, so nearly equal
    top singular values still converge in a few hundred products.
    """
    W = np.asarray(W, dtype=float)
    if not np.all(np.isfinite(W)):
        raise ValueError("matrix has non-finite entries")
    rows, cols = W.shape
    v = np.ones(cols) if v0 is None else np.array(v0, dtype=float)
    nv = np.linalg.norm(v)
    if nv == 0:
        v, nv = np.ones(cols), np.sqrt(cols)
    v /= nv
    u = np.zeros(rows)
    if not np.any(W):
        return 0.0, u, v
    P = W.T @ W
    square_every, squarings = 8, 0
    sigma = 0.0
    for it in range(max_iter):
        Pv = P @ v
        npv = np.linalg.norm(Pv)
        if npv == 0.0:
            # start lies in the null space: perturb deterministically
            v = np.roll(v, 1) + np.linspace(1.0, 2.0, cols)
            v /= np.linalg.norm(v)
            continue
        v = Pv / npv
        Wv = W @ v
        s = np.linalg.norm(Wv)
        g = W.T @ Wv
        resid = np.linalg.norm(g - s * s * v) / max(s * s, np.finfo(float).tiny)
        if abs(s - sigma) <= rtol * s and resid <= rtol:
            break
        sigma = s
        if it % square_every == square_every - 1 and squarings < 40:
            P = P @ P
            P /= np.linalg.norm(P)
            squarings += 1
    Wv = W @ v
    sigma = float(np.linalg.norm(Wv))
    if sigma > 0:
        u = Wv / sigma
    return sigma, u, v


def spectral_norm(W, rtol: float = 1e-9) -> float:
    """Largest singular value of ``W``; 0 for the zero matrix.

    Examples
    --------
    >>> round(spectral_norm(np.diag([3.0, 1.0])), 12)
    3.0
    """
    return power_iteration(W, rtol=rtol)[0]


def _condition(C: float, m_bar: float, L: int) -> float:
    geom = L if abs(C - 1.0) < 1e-12 else (C**L - 1.0) / (C - 1.0)
    return 2.0 * m_bar * C ** (2 * L) + 2.0 * m_bar * C ** (L + 1) * geom


def sn_condition(C: float, m_bar: float, L: int) -> float:
    """Left side of the SN Lipschitz condition,
    ``2 m C^{2L} + 2 m C^{L+1} (C^L - 1) / (C - 1)``.

    >>> sn_condition(0.5, 1.0, 1)
    1.0
    """
    return _condition(float(C), float(m_bar), int(L))


def compute_sn_constant(m_bar: float, L_m: float, L: int, C_max: float = 10.0, C_min: float = 0.05,
                        tol: float = 1e-10) -> float:
    """Largest ``C_nn`` in ``(0, C_max]`` with ``sn_condition(C_nn) <= L_m``.

    The condition is increasing in ``C``, so bisection finds the root.
    Constants below ``C_min`` shrink every hidden layer so much that the
    network cannot represent a metric, which is reported as a certificate
    error.

    Examples
    --------
    >>> round(compute_sn_constant(1.0, 0.64, 1), 8)
    0.4
    """
    if not m_bar > 0 or not L_m > 0:
        raise CertificateError("m_bar and L_m must be positive")
    if L < 1:
        raise CertificateError("need at least one hidden layer")
    if _condition(C_max, m_bar, L) <= L_m:
        return float(C_max)
    lo, hi = 0.0, float(C_max)
    while hi - lo > tol * max(hi, 1e-300):
        mid = 0.5 * (lo + hi)
        if _condition(mid, m_bar, L) <= L_m:
            lo = mid
        else:
            hi = mid
    if lo < C_min:
        raise CertificateError(
            f"SN constant {lo:.3g} below the usable minimum {C_min:g}: L_m={L_m:g} is too small for m_bar={m_bar:g}")
    return float(lo)
