"""Euler-Maruyama integration of controlled Ito systems with measurements."""

from __future__ import annotations

import dataclasses

import numpy as np

from ..dynamics import SystemModel
from ..seeding import stream

BLOWUP = 1e6


@dataclasses.dataclass
class SdePath:
    """One sampled path on a uniform grid ``t0 + k dt``.

    ``x`` has one more row than ``u`` and ``y``.  ``diverged_at`` is the
    step index at which the blow-up guard fired (``None`` if it never did);
    the arrays are truncated there.
    """

    t: np.ndarray
    x: np.ndarray
    u: np.ndarray
    y: np.ndarray | None
    xhat: np.ndarray | None
    seed: int
    diverged_at: int | None = None


@dataclasses.dataclass
class BatchResult:
    """Stacked runs from :func:`simulate`; traces hold every ``record_every``-th step."""

    t: np.ndarray
    x: np.ndarray
    xhat: np.ndarray | None
    u: np.ndarray
    diverged_at: np.ndarray


def wiener_increments(seed: int, runs: int, steps: int, dim: int, name: str = "noise") -> np.ndarray:
    """Standard normals ``(runs, steps, dim)``; run ``r`` always gets the same draws."""
    out = np.empty((runs, steps, dim))
    for r in range(runs):
        out[r] = stream(seed, name, r).standard_normal((steps, dim))
    return out


def simulate(model: SystemModel, x0, steps: int, dt: float, xi, controller=None, estimator=None,
             xhat0=None, eta=None, t0: float = 0.0, noise: str = "control", guard: float = BLOWUP,
             record_every: int = 1) -> BatchResult:
    """Integrate ``R`` runs of ``dx = (f + B u) dt + G dW`` in lockstep.

    Parameters
    ----------
    x0 : (R, n) initial states.
    xi : (R, steps, d) standard normals driving the plant.
    controller : callable ``(x, t, idx) -> u`` or None for ``u = 0``.
    estimator : object with ``step(xhat, y, u, t, dt, idx)``; needs ``xhat0`` and ``eta``.
    eta : (R, steps, ny) standard normals for ``y = h(x) + D eta / sqrt(dt)``.
    noise : ``"control"`` uses ``G_c``, ``"process"`` uses ``G_e``.

    Runs whose state or estimate leaves the finite ball of radius ``guard``
    are frozen from that step on and reported in ``diverged_at``.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    x = np.array(x0, dtype=float, ndmin=2)
    R, n = x.shape
    xi = np.asarray(xi, dtype=float)
    if xi.shape[:2] != (R, steps):
        raise ValueError(f"noise shape {xi.shape} does not match {(R, steps)}")
    if estimator is not None and (xhat0 is None or eta is None):
        raise ValueError("estimation needs xhat0 and eta")
    noise_map = model.control_noise if noise == "control" else model.process_noise
    xhat = None if estimator is None else np.array(xhat0, dtype=float, ndmin=2)
    if controller is not None and hasattr(controller, "reset"):
        controller.reset(R)
    if estimator is not None:
        estimator.reset(xhat)

    n_rec = steps // record_every + 1
    rec_x = np.full((R, n_rec, n), np.nan)
    rec_xh = None if xhat is None else np.full((R, n_rec, n), np.nan)
    rec_u = np.full((R, n_rec, model.m), np.nan)
    rec_x[:, 0] = x
    if xhat is not None:
        rec_xh[:, 0] = xhat
    diverged = np.full(R, -1, dtype=np.int64)
    alive = np.arange(R)
    sq = np.sqrt(dt)
    for k in range(steps):
        if alive.size == 0:
            break
        t = t0 + k * dt
        xa = x[alive]
        u = np.zeros((alive.size, model.m)) if controller is None else controller(xa, t, alive)
        if estimator is not None:
            D = model.measurement_noise(xa, t).reshape(alive.size, -1, eta.shape[2])
            y = model.measure(xa, t).reshape(alive.size, -1) + np.einsum("rij,rj->ri", D, eta[alive, k]) / sq
            xhat[alive] = estimator.step(xhat[alive], y, u, t, dt, alive)
        G = noise_map(xa, t).reshape(alive.size, n, -1)
        x[alive] = xa + dt * model.closed_drift(xa, t, u) + sq * np.einsum("rij,rj->ri", G, xi[alive, k])
        bad = ~np.isfinite(x[alive]).all(axis=1) | (np.linalg.norm(x[alive], axis=1) > guard)
        if xhat is not None:
            bad |= ~np.isfinite(xhat[alive]).all(axis=1) | (np.linalg.norm(xhat[alive], axis=1) > guard)
        if (k + 1) % record_every == 0:
            j = (k + 1) // record_every
            ok = alive[~bad]
            rec_x[ok, j] = x[ok]
            if xhat is not None:
                rec_xh[ok, j] = xhat[ok]
        if k % record_every == 0:
            rec_u[alive, k // record_every] = u
        if bad.any():
            diverged[alive[bad]] = k + 1
            alive = alive[~bad]
    t_rec = t0 + dt * record_every * np.arange(n_rec)
    return BatchResult(t_rec, rec_x, rec_xh, rec_u, diverged)


def euler_maruyama(model: SystemModel, policy=None, horizon: float = 1.0, dt: float = 1e-3, seed: int = 0,
                   x0=None, estimator=None, xhat0=None, noise: str = "control", run: int = 0) -> SdePath:
    """Single path of the controlled system; see :func:`simulate` for the policy protocols.

    ``policy`` may also be a plain function ``(x, t) -> u`` of one state.

    Examples
    --------
    >>> import numpy as np
    >>> from nscm.dynamics import SystemModel
    >>> ou = SystemModel(1, 1, lambda x, t: -x, lambda x, t: np.zeros((1, 1)), lambda x, t: np.eye(1))
    >>> a = euler_maruyama(ou, horizon=0.1, dt=0.01, seed=3, x0=[1.0])
    >>> b = euler_maruyama(ou, horizon=0.1, dt=0.01, seed=3, x0=[1.0])
    >>> bool(np.array_equal(a.x, b.x)), a.x.shape
    (True, (11, 1))
    """
    steps = int(round(horizon / dt))
    x0 = np.zeros(model.n) if x0 is None else np.asarray(x0, dtype=float)
    G = np.asarray((model.control_noise if noise == "control" else model.process_noise)(x0, 0.0))
    xi = stream(seed, "noise", run).standard_normal((1, steps, G.shape[-1]))
    eta = None
    if estimator is not None:
        D = np.asarray(model.measurement_noise(x0, 0.0))
        eta = stream(seed, "measurement", run).standard_normal((1, steps, D.shape[-1]))
    controller = policy
    if policy is not None and not hasattr(policy, "reset"):
        def per_state(x, t, idx, fn=policy):
            return np.stack([np.atleast_1d(fn(xi_, t)) for xi_ in x])

        controller = per_state
    y = None
    if estimator is not None:
        # record measurements through a thin wrapper
        ys = []
        inner = estimator

        class _Rec:
            def reset(self, xh):
                inner.reset(xh)

            def step(self, xh, yy, u, t, dt_, idx):
                ys.append(yy[0].copy())
                return inner.step(xh, yy, u, t, dt_, idx)

        estimator = _Rec()
    res = simulate(model, x0[None], steps, dt, xi, controller, estimator,
                   None if xhat0 is None else np.asarray(xhat0, dtype=float)[None], eta, noise=noise)
    div = int(res.diverged_at[0]) if res.diverged_at[0] >= 0 else None
    # the state at the guard step is not finite, so keep the rows before it
    end = steps + 1 if div is None else div
    if estimator is not None:
        y = np.array(ys)[:end - 1]
    return SdePath(res.t[:end], res.x[0, :end], res.u[0, :end - 1], y,
                   None if res.xhat is None else res.xhat[0, :end], seed, div)
