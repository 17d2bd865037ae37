"""Feedback and observer policies: NSCM / metric-table, SDRE and EKF.

Policies act on stacks of runs.  Controllers map ``(x, t, idx)`` to inputs
and estimators map ``(xhat, y, u, t, dt, idx)`` to the next estimate;
``idx`` names the runs in the stack so that per-run state (EKF covariance,
warm-started Riccati gains) stays attached to the right trajectory when
diverged runs drop out.
"""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from ..dynamics import SystemModel, sdc_factorize_batch, sdc_measurement_factorize_batch
from ..mcvstem import MetricSampleSet, recover_metric
from ..nn.network import SnMlp, predict_metric
from ._kernels import CONVERGED, care_batch


def _params(t, count: int, n_params: int) -> np.ndarray:
    # the only scheduling parameter used by the benchmarks is time
    if n_params == 0:
        return np.zeros((count, 0))
    p = np.zeros((count, n_params))
    p[:, 0] = t
    return p


class NetMetric:
    """Metric ``M(x, t)`` from a trained network (``M`` for control, ``W^{-1}`` for estimation)."""

    def __init__(self, net: SnMlp, mode: str | None = None):
        self.net = net
        self.mode = mode or net.meta.get("mode", "control")

    def __call__(self, x, t) -> np.ndarray:
        x = np.atleast_2d(x)
        X = predict_metric(self.net, x, _params(t, len(x), self.net.n_params))
        X = X.reshape(len(x), self.net.n, self.net.n)
        return np.linalg.inv(X) if self.mode == "estimation" else X


class TableMetric:
    """Nearest-neighbour (or inverse-distance) lookup of sampled metrics.

    Coordinates are scaled by the sample spread so state and time have
    comparable weight.  Inverse-distance weights over ``k`` neighbours form
    a convex combination, so interpolated metrics stay positive definite.
    """

    def __init__(self, samples: MetricSampleSet, interpolate: bool = False, k: int = 4):
        self.samples = samples
        self.M = recover_metric(samples.W_bar, samples.nu, samples.mode)
        Z = np.concatenate([samples.x, samples.p], axis=1)
        spread = np.ptp(Z, axis=0)
        self.scale = 1.0 / np.where(spread > 0, spread, 1.0)
        self.tree = cKDTree(Z * self.scale)
        self.interpolate = interpolate
        self.k = min(k, len(Z))

    def __call__(self, x, t) -> np.ndarray:
        x = np.atleast_2d(x)
        z = np.concatenate([x, _params(t, len(x), self.samples.p.shape[1])], axis=1) * self.scale
        if not self.interpolate or self.k == 1:
            _, i = self.tree.query(z)
            return self.M[i]
        d, i = self.tree.query(z, k=self.k)
        w = 1.0 / np.maximum(d, 1e-12) ** 2
        w /= w.sum(axis=1, keepdims=True)
        return np.einsum("rk,rkij->rij", w, self.M[i])


def _metric(source, x, t) -> np.ndarray:
    if callable(source):
        return source(x, t)
    M = np.asarray(source, dtype=float)
    return np.broadcast_to(M, (np.atleast_2d(x).shape[0],) + M.shape[-2:])


def nscm_control(model: SystemModel, metric, x, x_d, u_d, t) -> np.ndarray:
    """``u = u_d - B(x, t)^T M (x - x_d)``; ``metric`` is a matrix or a callable ``(x, t) -> M``.

    Examples
    --------
    >>> from nscm.dynamics import SystemModel
    >>> lin = SystemModel(1, 1, lambda x, t: -x, lambda x, t: np.ones((1, 1)), lambda x, t: np.zeros((1, 1)))
    >>> nscm_control(lin, [[2.0]], [0.5], [0.0], [0.0], 0.0)
    array([-1.])
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    e = X - np.atleast_2d(np.asarray(x_d, dtype=float))
    M = _metric(metric, X, t)
    B = model.actuation(X, t).reshape(len(X), model.n, model.m)
    u = np.atleast_2d(np.asarray(u_d, dtype=float)) - np.einsum("rji,rjk,rk->ri", B, M, e)
    return u[0] if single else u


def nscm_estimate_step(model: SystemModel, metric, xhat, y, t, dt, u=None) -> np.ndarray:
    """Euler step of ``dxhat = (f + B u + M C_L^T (y - h)) dt`` with ``C_L`` the Jacobian of ``h`` at ``xhat``."""
    xhat = np.asarray(xhat, dtype=float)
    single = xhat.ndim == 1
    X = np.atleast_2d(xhat)
    Y = np.atleast_2d(np.asarray(y, dtype=float))
    M = _metric(metric, X, t)
    C_L = model.measurement_jacobian(X, t).reshape(len(X), -1, model.n)
    innov = Y - model.measure(X, t).reshape(len(X), -1)
    drift = model.drift(X, t).reshape(len(X), model.n) if u is None else model.closed_drift(X, t, u)
    out = X + dt * (drift + np.einsum("rij,rkj,rk->ri", M, C_L, innov))
    return out[0] if single else out


# ---------------------------------------------------------------------------
# SDRE

def care(A, B, Q, R, K0=None):
    """Stabilizing CARE solution(s); returns ``(P, status)``, ``status == 0`` on convergence."""
    A = np.asarray(A, dtype=float)
    single = A.ndim == 2
    A3 = np.atleast_3d(A) if not single else A[None]
    nb = A3.shape[0]

    def stack(M):
        M = np.asarray(M, dtype=float)
        return np.broadcast_to(M if M.ndim == 3 else M[None], (nb,) + M.shape[-2:]).copy()

    P, status, _ = care_batch(A3, stack(B), stack(Q), stack(R), K0=K0)
    return (P[0], status[0]) if single else (P, status)


def care_residual(A, B, Q, R, P) -> float:
    """Frobenius norm of ``A^T P + P A - P B R^{-1} B^T P + Q``."""
    A, B, Q, R, P = (np.asarray(v, dtype=float) for v in (A, B, Q, R, P))
    res = A.T @ P + P @ A - P @ B @ np.linalg.solve(R, B.T) @ P + Q
    return float(np.linalg.norm(res))


class SdreController:
    """State feedback ``u = -R^{-1} B^T P(x) (x - x_d)`` with ``P`` from the CARE at the SDC pair.

    Riccati failures keep the last good gain (zero-order hold) and are
    counted in ``failures``.
    """

    def __init__(self, model: SystemModel, Q=None, R=None, x_d=None, quad_order: int = 10):
        self.model = model
        self.Q = np.eye(model.n) if Q is None else np.asarray(Q, dtype=float)
        self.R = np.eye(model.m) if R is None else np.asarray(R, dtype=float)
        self.x_d = np.zeros(model.n) if x_d is None else np.asarray(x_d, dtype=float)
        self.quad_order = quad_order
        self.K = None
        self.failures = 0

    def reset(self, runs: int) -> None:
        self.K = None
        self._K = np.zeros((runs, self.model.m, self.model.n))
        self._have = np.zeros(runs, dtype=bool)
        self.failures = 0

    def __call__(self, x, t, idx) -> np.ndarray:
        n, m = self.model.n, self.model.m
        xd = np.broadcast_to(self.x_d, x.shape)
        A, _ = sdc_factorize_batch(self.model, x, xd, None, np.full(len(x), t), self.quad_order)
        B = self.model.actuation(x, t).reshape(len(x), n, m)
        K0 = self._K[idx] if self._have[idx].all() else None
        P, status, _ = care_batch(A, B, np.broadcast_to(self.Q, A.shape), np.broadcast_to(self.R, (len(x), m, m)),
                                  K0=K0)
        ok = status == CONVERGED
        K = np.linalg.solve(self.R, np.swapaxes(B, -1, -2) @ P)
        old = self._K[idx]
        K = np.where(ok[:, None, None], K, old)
        self.failures += int(np.sum(~ok))
        self._K[idx] = K
        self._have[idx] |= ok
        return -np.einsum("rij,rj->ri", K, x - xd)


class MetricController:
    """NSCM / metric-table feedback towards ``x_d`` (default origin, ``u_d = 0``)."""

    def __init__(self, model: SystemModel, metric, x_d=None, u_d=None):
        self.model = model
        self.metric = metric
        self.x_d = np.zeros(model.n) if x_d is None else np.asarray(x_d, dtype=float)
        self.u_d = np.zeros(model.m) if u_d is None else np.asarray(u_d, dtype=float)

    def reset(self, runs: int) -> None:
        pass

    def __call__(self, x, t, idx) -> np.ndarray:
        return nscm_control(self.model, self.metric, x, np.broadcast_to(self.x_d, x.shape),
                            np.broadcast_to(self.u_d, (len(x), self.model.m)), t)


class ZeroController:
    def __init__(self, model: SystemModel):
        self.model = model

    def reset(self, runs: int) -> None:
        pass

    def __call__(self, x, t, idx) -> np.ndarray:
        return np.zeros((len(x), self.model.m))


class MetricEstimator:
    def __init__(self, model: SystemModel, metric):
        self.model = model
        self.metric = metric

    def reset(self, xhat0) -> None:
        pass

    def step(self, xhat, y, u, t, dt, idx) -> np.ndarray:
        return nscm_estimate_step(self.model, self.metric, xhat, y, t, dt, u)


class SdreEstimator:
    """State-dependent Riccati filter: ``A P + P A^T - P C^T R^{-1} C P + Q = 0`` at the SDC pair.

    ``Q = G_e G_e^T`` and ``R = D D^T`` are the continuous noise intensities
    unless given.  Failed solves hold the previous gain.
    """

    def __init__(self, model: SystemModel, Q=None, R=None, quad_order: int = 10):
        self.model = model
        self.Q = Q
        self.R = R
        self.quad_order = quad_order
        self.failures = 0

    def reset(self, xhat0) -> None:
        runs = len(xhat0)
        ny = self.model.ny
        self._L = np.zeros((runs, self.model.n, ny))
        self._K = np.zeros((runs, ny, self.model.n))
        self._have = np.zeros(runs, dtype=bool)
        self.failures = 0

    def step(self, xhat, y, u, t, dt, idx) -> np.ndarray:
        model, n = self.model, self.model.n
        r = len(xhat)
        tt = np.full(r, t)
        zero = np.zeros_like(xhat)
        A, _ = sdc_factorize_batch(model, xhat, zero, None, tt, self.quad_order)
        C, _ = sdc_measurement_factorize_batch(model, xhat, zero, tt, self.quad_order)
        G = model.process_noise(xhat, t).reshape(r, n, -1)
        D = model.measurement_noise(xhat, t).reshape(r, C.shape[1], -1)
        Q = G @ np.swapaxes(G, -1, -2) if self.Q is None else np.broadcast_to(self.Q, A.shape)
        R = D @ np.swapaxes(D, -1, -2) if self.R is None else np.broadcast_to(self.R, (r,) + self.R.shape)
        K0 = self._K[idx] if self._have[idx].all() else None
        # filter Riccati equation is the control one for (A^T, C^T)
        P, status, _ = care_batch(np.swapaxes(A, -1, -2), np.swapaxes(C, -1, -2), Q, R, K0=K0)
        ok = status == CONVERGED
        Lg = P @ np.swapaxes(C, -1, -2) @ np.linalg.inv(R)
        Lg = np.where(ok[:, None, None], Lg, self._L[idx])
        self._L[idx] = Lg
        self._K[idx] = np.where(ok[:, None, None], np.swapaxes(Lg, -1, -2), self._K[idx])
        self._have[idx] |= ok
        self.failures += int(np.sum(~ok))
        innov = y - model.measure(xhat, t).reshape(r, -1)
        drift = model.closed_drift(xhat, t, u) if u is not None else model.drift(xhat, t)
        return xhat + dt * (drift + np.einsum("rij,rj->ri", Lg, innov))


# ---------------------------------------------------------------------------
# EKF

def ekf_step(model: SystemModel, xhat, P, y, t, dt, u=None, regularize: float = 1e-9):
    """Continuous-discrete EKF: measurement update with ``y`` then Euler prediction.

    Measurement covariance ``R = D D^T / dt`` and process covariance
    ``Q = G G^T dt`` (``G`` is the process-noise map).  The update uses the
    Joseph form so ``P`` stays symmetric positive semidefinite.  Returns
    ``(xhat_next, P_next, flagged)`` where ``flagged`` marks innovation
    covariances that needed regularization.  Works on single states or stacks.
    """
    xhat = np.asarray(xhat, dtype=float)
    single = xhat.ndim == 1
    X = np.atleast_2d(xhat)
    Pm = np.asarray(P, dtype=float).reshape(len(X), model.n, model.n)
    Y = np.atleast_2d(np.asarray(y, dtype=float))
    r, n = X.shape
    H = model.measurement_jacobian(X, t).reshape(r, -1, n)
    D = model.measurement_noise(X, t).reshape(r, H.shape[1], -1)
    Rk = D @ np.swapaxes(D, -1, -2) / dt
    S = H @ Pm @ np.swapaxes(H, -1, -2) + Rk
    S = 0.5 * (S + np.swapaxes(S, -1, -2))
    # regularize singular innovation covariances
    cond = np.linalg.cond(S)
    flagged = ~np.isfinite(cond) | (cond > 1e12)
    if flagged.any():
        S = S + regularize * flagged[:, None, None] * np.eye(S.shape[-1])
    K = np.linalg.solve(S, H @ Pm).swapaxes(-1, -2)
    innov = Y - model.measure(X, t).reshape(r, -1)
    Xu = X + np.einsum("rij,rj->ri", K, innov)
    IKH = np.eye(n) - K @ H
    Pu = IKH @ Pm @ np.swapaxes(IKH, -1, -2) + K @ Rk @ np.swapaxes(K, -1, -2)
    # prediction
    F = np.eye(n) + dt * model.drift_jacobian(Xu, t, u).reshape(r, n, n)
    G = model.process_noise(Xu, t).reshape(r, n, -1)
    drift = model.drift(Xu, t).reshape(r, n) if u is None else model.closed_drift(Xu, t, u)
    Xn = Xu + dt * drift
    Pn = F @ Pu @ np.swapaxes(F, -1, -2) + dt * G @ np.swapaxes(G, -1, -2)
    Pn = 0.5 * (Pn + np.swapaxes(Pn, -1, -2))
    if single:
        return Xn[0], Pn[0], bool(flagged[0])
    return Xn, Pn, flagged


class EkfEstimator:
    def __init__(self, model: SystemModel, P0=None):
        self.model = model
        self.P0 = P0
        self.flags = 0

    def reset(self, xhat0) -> None:
        n = self.model.n
        P0 = np.eye(n) * 1e-2 if self.P0 is None else np.asarray(self.P0, dtype=float)
        self.P = np.broadcast_to(P0, (len(xhat0), n, n)).copy()
        self.flags = 0

    def step(self, xhat, y, u, t, dt, idx) -> np.ndarray:
        xn, Pn, flagged = ekf_step(self.model, xhat, self.P[idx], y, t, dt, u)
        self.P[idx] = Pn
        self.flags += int(np.sum(flagged))
        return xn
