"""Stochastic nonlinear system models and SDC factorizations.

A model bundles drift ``f``, actuation ``B``, process-noise maps ``G_c`` /
``G_e``, measurement ``h`` and measurement noise ``D``.  All maps take a state
array with trailing dimension ``n`` and a time.  When ``batched`` is true they
must broadcast over leading axes (``x.shape == (..., n)``), which the
simulator and the SDC routines exploit; otherwise they are looped.

The SDC matrix of a drift difference is the line integral of the Jacobian
along the segment between two states, evaluated with composite Gauss-Legendre
quadrature.  The segment is split where it crosses a declared kink coordinate
(``x_i = 0`` for terms like ``x_i |x_i|``) so each panel integrates a smooth
function.
"""

from __future__ import annotations

import dataclasses
import warnings
from functools import lru_cache
from typing import Callable, Optional

import numpy as np

Map = Callable[[np.ndarray, float], np.ndarray]


class EvaluationError(ArithmeticError):
    """A model map returned non-finite values."""

    def __init__(self, message: str, abscissa: Optional[float] = None):
        super().__init__(message)
        self.abscissa = abscissa


class ConfigurationError(ValueError):
    """Model or benchmark configuration is incomplete or inconsistent."""


@dataclasses.dataclass(frozen=True)
class StateBox:
    """Axis-aligned sampling box for states and optional parameters."""

    lower: np.ndarray
    upper: np.ndarray
    param_lower: Optional[np.ndarray] = None
    param_upper: Optional[np.ndarray] = None
    param_names: tuple = ()

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float)
        hi = np.asarray(self.upper, dtype=float)
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ConfigurationError("state box limits must be 1-D arrays of equal length")
        if np.any(lo > hi):
            raise ConfigurationError("state box requires lower <= upper componentwise")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        if (self.param_lower is None) != (self.param_upper is None):
            raise ConfigurationError("parameter box needs both limits")
        if self.param_lower is not None:
            plo = np.atleast_1d(np.asarray(self.param_lower, dtype=float))
            phi = np.atleast_1d(np.asarray(self.param_upper, dtype=float))
            if plo.shape != phi.shape or np.any(plo > phi):
                raise ConfigurationError("parameter box requires lower <= upper componentwise")
            object.__setattr__(self, "param_lower", plo)
            object.__setattr__(self, "param_upper", phi)

    @property
    def n(self) -> int:
        return self.lower.size

    @property
    def n_params(self) -> int:
        return 0 if self.param_lower is None else self.param_lower.size

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return rng.uniform(self.lower, self.upper, size=(size, self.n))

    def sample_params(self, rng: np.random.Generator, size: int) -> np.ndarray:
        if self.param_lower is None:
            return np.zeros((size, 0))
        return rng.uniform(self.param_lower, self.param_upper, size=(size, self.n_params))

    def contains(self, x, p=None, tol: float = 0.0) -> bool:
        x = np.asarray(x, dtype=float)
        ok = np.all(x >= self.lower - tol) and np.all(x <= self.upper + tol)
        if p is not None and self.param_lower is not None:
            p = np.atleast_1d(np.asarray(p, dtype=float))
            ok = ok and np.all(p >= self.param_lower - tol) and np.all(p <= self.param_upper + tol)
        return bool(ok)


@dataclasses.dataclass(frozen=True)
class NoiseBounds:
    """Frobenius/2-norm bounds: ``g_c`` on G_c, ``g_e`` on G_e, ``d_bar`` on D, ``c_bar`` on C."""

    g_c: float = 0.0
    g_e: float = 0.0
    d_bar: float = 0.0
    c_bar: float = 0.0

    def __post_init__(self):
        for name in ("g_c", "g_e", "d_bar", "c_bar"):
            if not getattr(self, name) >= 0.0:
                raise ConfigurationError(f"noise bound {name} must be nonnegative")


@dataclasses.dataclass(frozen=True)
class SdcResult:
    A: np.ndarray
    residual: float


@dataclasses.dataclass(frozen=True)
class SystemModel:
    """Control-affine Ito system with measurement model.

    ``B_jac`` returns ``dB[i, j]/dx_k`` with shape ``(..., n, m, n)``.
    ``kink_coords`` lists coordinates whose zero crossing makes the Jacobian
    non-smooth; the SDC quadrature splits panels there.
    """

    n: int
    m: int
    f: Map
    B: Map
    G_c: Map
    h: Optional[Map] = None
    D: Optional[Map] = None
    G_e: Optional[Map] = None
    bounds: NoiseBounds = NoiseBounds()
    box: Optional[StateBox] = None
    f_jac: Optional[Map] = None
    B_jac: Optional[Map] = None
    h_jac: Optional[Map] = None
    kink_coords: tuple = ()
    batched: bool = False
    name: str = "model"

    # -- evaluation helpers ------------------------------------------------
    def _call(self, fn: Map, x, t) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.batched or x.ndim == 1:
            return np.asarray(fn(x, t), dtype=float)
        lead = x.shape[:-1]
        tt = np.broadcast_to(np.asarray(t, dtype=float), lead)
        flat_x = x.reshape(-1, self.n)
        flat_t = tt.reshape(-1)
        out = [np.asarray(fn(xi, float(ti)), dtype=float) for xi, ti in zip(flat_x, flat_t)]
        return np.stack(out).reshape(lead + out[0].shape)

    def drift(self, x, t) -> np.ndarray:
        return self._call(self.f, x, t)

    def actuation(self, x, t) -> np.ndarray:
        return self._call(self.B, x, t)

    def control_noise(self, x, t) -> np.ndarray:
        return self._call(self.G_c, x, t)

    def process_noise(self, x, t) -> np.ndarray:
        return self._call(self.G_e if self.G_e is not None else self.G_c, x, t)

    def measure(self, x, t) -> np.ndarray:
        if self.h is None:
            raise ConfigurationError(f"{self.name} has no measurement map")
        return self._call(self.h, x, t)

    def measurement_noise(self, x, t) -> np.ndarray:
        if self.D is None:
            raise ConfigurationError(f"{self.name} has no measurement-noise map")
        return self._call(self.D, x, t)

    def closed_drift(self, x, t, u) -> np.ndarray:
        """``f(x, t) + B(x, t) u`` with ``u`` broadcast over leading axes."""
        Bx = self.actuation(x, t)
        u = np.asarray(u, dtype=float)
        return self.drift(x, t) + np.einsum("...ij,...j->...i", Bx, np.broadcast_to(u, Bx.shape[:-2] + (self.m,)))

    @property
    def ny(self) -> int:
        x0 = np.zeros(self.n) if self.box is None else 0.5 * (self.box.lower + self.box.upper)
        return int(np.asarray(self.measure(x0, 0.0)).shape[-1])

    def drift_jacobian(self, x, t, u=None) -> np.ndarray:
        """Jacobian of ``f + B u`` in x (``u`` held constant)."""
        x = np.asarray(x, dtype=float)
        if self.f_jac is not None and (u is None or self.B_jac is not None):
            J = self._call(self.f_jac, x, t)
            if u is not None:
                dB = self._call(self.B_jac, x, t)
                u = np.broadcast_to(np.asarray(u, dtype=float), dB.shape[:-3] + (self.m,))
                J = J + np.einsum("...ijk,...j->...ik", dB, u)
            return J
        if u is None:
            return jacobian(self.drift, x, t)
        return jacobian(lambda q, s: self.closed_drift(q, s, u), x, t)

    def measurement_jacobian(self, x, t) -> np.ndarray:
        if self.h_jac is not None:
            return self._call(self.h_jac, x, t)
        return jacobian(self.measure, x, t)


def jacobian(fun: Map, x, t, step: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian with per-coordinate step ``step * (1 + |x_i|)``.

    Works on a single state ``(n,)`` or a stack ``(..., n)`` if ``fun``
    broadcasts.  Returns ``(..., p, n)``.
    """
    x = np.asarray(x, dtype=float)
    n = x.shape[-1]
    cols = []
    for k in range(n):
        hk = step * (1.0 + np.abs(x[..., k]))
        e = np.zeros_like(x)
        e[..., k] = hk
        fp = np.asarray(fun(x + e, t), dtype=float)
        fm = np.asarray(fun(x - e, t), dtype=float)
        if not (np.all(np.isfinite(fp)) and np.all(np.isfinite(fm))):
            raise EvaluationError(f"non-finite map value while differencing coordinate {k}")
        cols.append((fp - fm) / (2.0 * hk[..., None]))
    return np.stack(cols, axis=-1)


@lru_cache(maxsize=None)
def _gauss_legendre(order: int):
    nodes, weights = np.polynomial.legendre.leggauss(order)
    return 0.5 * (nodes + 1.0), 0.5 * weights


def _panel_nodes(a: np.ndarray, b: np.ndarray, kinks: tuple, order: int):
    """Quadrature abscissae ``c`` and weights per segment, shape (S, P*order).

    The path is ``c a + (1 - c) b``; panels break where a kink coordinate
    changes sign.  Segments without a crossing get zero-length padding panels
    so every segment shares the same node count.
    """
    S = a.shape[0]
    brk = np.ones((S, len(kinks)))
    for j, i in enumerate(kinks):
        ai, bi = a[:, i], b[:, i]
        cross = ai * bi < 0.0
        c = np.where(cross, bi / np.where(cross, bi - ai, 1.0), 1.0)
        brk[:, j] = c
    edges = np.concatenate([np.zeros((S, 1)), np.sort(brk, axis=1), np.ones((S, 1))], axis=1)
    gl_c, gl_w = _gauss_legendre(order)
    lo = edges[:, :-1, None]
    width = (edges[:, 1:] - edges[:, :-1])[:, :, None]
    c = (lo + width * gl_c).reshape(S, -1)
    w = (width * gl_w).reshape(S, -1)
    return c, w


def _line_integral(jac_fn, a, b, t, kinks, order):
    """Batched ``int_0^1 J(c a + (1-c) b) dc`` for segments ``a[s] -> b[s]``."""
    c, w = _panel_nodes(a, b, kinks, order)
    S, K = c.shape
    pts = c[:, :, None] * a[:, None, :] + (1.0 - c)[:, :, None] * b[:, None, :]
    t_arr = np.asarray(t, dtype=float)
    tt = np.broadcast_to(t_arr[:, None] if t_arr.ndim else t_arr, (S, K))
    J = jac_fn(pts, tt)
    if not np.all(np.isfinite(J)):
        bad = np.argwhere(~np.all(np.isfinite(J.reshape(S, K, -1)), axis=-1))[0]
        raise EvaluationError("non-finite Jacobian on SDC segment", abscissa=float(c[bad[0], bad[1]]))
    return np.einsum("sk,sk...->s...", w, J)


def _sdc_batch(diff_fn, jac_fn, x, x_ref, t, kinks, quad_order, tol, max_order):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    x_ref = np.atleast_2d(np.asarray(x_ref, dtype=float))
    x, x_ref = np.broadcast_arrays(x, x_ref)
    A = _line_integral(jac_fn, x, x_ref, t, kinks, quad_order)
    delta = diff_fn(x, x_ref)
    dx = x - x_ref
    res = np.linalg.norm(np.einsum("sij,sj->si", A, dx) - delta, axis=-1)
    scale = 1.0 + np.linalg.norm(delta, axis=-1)
    order = quad_order
    bad = res > tol * scale
    while np.any(bad) and order < max_order:
        order = min(2 * order, max_order)
        idx = np.flatnonzero(bad)
        tb = t if np.ndim(t) == 0 else np.asarray(t)[idx]
        A[idx] = _line_integral(jac_fn, x[idx], x_ref[idx], tb, kinks, order)
        res[idx] = np.linalg.norm(np.einsum("sij,sj->si", A[idx], dx[idx]) - delta[idx], axis=-1)
        bad = res > tol * scale
    if np.any(bad):
        warnings.warn(
            f"SDC residual {res.max():.3e} above tolerance after order {order}", RuntimeWarning, stacklevel=3
        )
    return A, res


def _as_time_array(t, S):
    return t if np.ndim(t) == 0 else np.broadcast_to(np.asarray(t, dtype=float), (S,))


def sdc_factorize_batch(model: SystemModel, x, x_d, u_d=None, t=0.0, quad_order: int = 10,
                        tol: float = 1e-8, max_order: int = 160):
    """Vectorized :func:`sdc_factorize` over segments; returns ``(A, residuals)``."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    x_d = np.atleast_2d(np.asarray(x_d, dtype=float))
    S = max(x.shape[0], x_d.shape[0])
    u = None if u_d is None else np.broadcast_to(np.asarray(u_d, dtype=float), (S, model.m))
    t = _as_time_array(t, S)

    def fbar(q, s, uu=u):
        return model.drift(q, s) if uu is None else model.closed_drift(q, s, uu)

    def diff(a, b):
        return fbar(a, t) - fbar(b, t)

    def jac(pts, tt):
        if u is None:
            return model.drift_jacobian(pts, tt)
        return model.drift_jacobian(pts, tt, np.broadcast_to(u[:, None, :], pts.shape[:-1] + (model.m,)))

    return _sdc_batch(diff, jac, x, x_d, t, model.kink_coords, quad_order, tol, max_order)


def sdc_factorize(model: SystemModel, x, x_d, u_d=None, t: float = 0.0, quad_order: int = 10,
                  tol: float = 1e-8) -> SdcResult:
    """SDC matrix ``A`` with ``A (x - x_d) = fbar(x) - fbar(x_d)``, ``fbar = f + B u_d``.

    Examples
    --------
    >>> lin = SystemModel(1, 1, f=lambda x, t: -2.0 * x, B=lambda x, t: np.ones((1, 1)),
    ...                   G_c=lambda x, t: np.zeros((1, 1)))
    >>> round(float(sdc_factorize(lin, [0.3], [0.1]).A[0, 0]), 8)
    -2.0
    """
    if quad_order < 1:
        raise ValueError("quad_order must be >= 1")
    A, res = sdc_factorize_batch(model, x, x_d, u_d, t, quad_order, tol)
    return SdcResult(A[0], float(res[0]))


def sdc_measurement_factorize_batch(model: SystemModel, x, xhat, t=0.0, quad_order: int = 10,
                                    tol: float = 1e-8, max_order: int = 160):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    xhat = np.atleast_2d(np.asarray(xhat, dtype=float))
    S = max(x.shape[0], xhat.shape[0])
    t = _as_time_array(t, S)
    return _sdc_batch(
        lambda a, b: model.measure(a, t) - model.measure(b, t),
        model.measurement_jacobian,
        x, xhat, t, model.kink_coords, quad_order, tol, max_order,
    )


def sdc_measurement_factorize(model: SystemModel, x, xhat, t: float = 0.0, quad_order: int = 10,
                              tol: float = 1e-8) -> SdcResult:
    """``C`` with ``C (x - xhat) = h(x) - h(xhat)``; ``x == xhat`` gives ``C_L``."""
    if quad_order < 1:
        raise ValueError("quad_order must be >= 1")
    C, res = sdc_measurement_factorize_batch(model, x, xhat, t, quad_order, tol)
    return SdcResult(C[0], float(res[0]))


def check_noise_bounds(model: SystemModel, rng: np.random.Generator, samples: int = 1000,
                       t_range=(0.0, 0.0)) -> dict:
    """Largest sampled Frobenius norms of G_c, G_e, D over the model box."""
    if model.box is None:
        raise ConfigurationError("model has no state box")
    xs = model.box.sample(rng, samples)
    ts = rng.uniform(t_range[0], t_range[1], size=samples)
    out = {
        "g_c": float(np.max(np.linalg.norm(model.control_noise(xs, ts), axis=(-2, -1)))),
        "g_e": float(np.max(np.linalg.norm(model.process_noise(xs, ts), axis=(-2, -1)))),
    }
    if model.D is not None:
        out["d_bar"] = float(np.max(np.linalg.norm(model.measurement_noise(xs, ts), axis=(-2, -1))))
    return out


def estimate_c_bar(model: SystemModel, rng: np.random.Generator, pairs: int = 10_000,
                   t_range=(0.0, 0.0), inflate: float = 1.1, quad_order: int = 10) -> float:
    """Sampled sup of ``||C(x, xhat, t)||_2`` over the box, inflated by ``inflate``."""
    if model.box is None:
        raise ConfigurationError("model has no state box")
    x = model.box.sample(rng, pairs)
    xh = model.box.sample(rng, pairs)
    ts = rng.uniform(t_range[0], t_range[1], size=pairs)
    C, _ = sdc_measurement_factorize_batch(model, x, xh, ts, quad_order)
    return inflate * float(np.max(np.linalg.norm(C, ord=2, axis=(-2, -1))))
