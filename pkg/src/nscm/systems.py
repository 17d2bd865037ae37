"""Small reference systems: linear, scalar cubic and Ornstein-Uhlenbeck."""

from __future__ import annotations

import numpy as np

from .dynamics import NoiseBounds, StateBox, SystemModel


def _const(mat):
    mat = np.asarray(mat, dtype=float)
    return lambda x, t: np.broadcast_to(mat, np.shape(x)[:-1] + mat.shape)


def linear_system(A, B=None, G=None, C=None, D=None, G_e=None, box: StateBox | None = None,
                  name: str = "linear") -> SystemModel:
    """Time-invariant ``dx = (A x + B u) dt + G dW``, ``y = C x + D dW2``.

    Missing ``B`` gives a single zero input column; missing ``C`` measures
    the full state.  Noise bounds are Frobenius norms of the constant maps.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    n = A.shape[0]
    B = np.zeros((n, 1)) if B is None else np.asarray(B, dtype=float).reshape(n, -1)
    G = np.zeros((n, n)) if G is None else np.atleast_2d(np.asarray(G, dtype=float))
    G_e = G if G_e is None else np.atleast_2d(np.asarray(G_e, dtype=float))
    C = np.eye(n) if C is None else np.atleast_2d(np.asarray(C, dtype=float))
    D = np.zeros((C.shape[0], C.shape[0])) if D is None else np.atleast_2d(np.asarray(D, dtype=float))
    if box is None:
        box = StateBox(-np.ones(n), np.ones(n))
    bounds = NoiseBounds(g_c=float(np.linalg.norm(G)), g_e=float(np.linalg.norm(G_e)),
                         d_bar=float(np.linalg.norm(D)), c_bar=float(np.linalg.norm(C, 2)))
    return SystemModel(
        n=n, m=B.shape[1],
        f=lambda x, t: x @ A.T, B=_const(B), G_c=_const(G), G_e=_const(G_e),
        h=lambda x, t: x @ C.T, D=_const(D), bounds=bounds, box=box,
        f_jac=_const(A), B_jac=_const(np.zeros((n, B.shape[1], n))), h_jac=_const(C),
        batched=True, name=name,
    )


def scalar_cubic(g: float = 0.1, d: float = 0.1, a: float = 1.0, width: float = 1.0) -> SystemModel:
    """``dx = (-a x - x^3 + u) dt + g dW`` with ``y = x + x^3 / 3 + d dW2``.

    The cubic measurement keeps the estimation problem nonlinear; its SDC
    coefficient is bounded by ``1 + width^2`` on the box.
    """
    box = StateBox(np.array([-width]), np.array([width]))
    bounds = NoiseBounds(g_c=g, g_e=g, d_bar=d, c_bar=1.0 + width**2)
    return SystemModel(
        n=1, m=1,
        f=lambda x, t: -a * x - x**3, B=_const(np.ones((1, 1))),
        G_c=_const(g * np.eye(1)), G_e=_const(g * np.eye(1)),
        h=lambda x, t: x + x**3 / 3.0, D=_const(d * np.eye(1)), bounds=bounds, box=box,
        f_jac=lambda x, t: (-a - 3.0 * x**2)[..., None],
        B_jac=lambda x, t: np.zeros(np.shape(x)[:-1] + (1, 1, 1)),
        h_jac=lambda x, t: (1.0 + x**2)[..., None],
        batched=True, name="cubic",
    )


def ornstein_uhlenbeck(g: float = 0.1, a: float = 1.0) -> SystemModel:
    """``dx = -a x dt + g dW`` (scalar, no actuation, full-state measurement)."""
    return linear_system([[-a]], G=[[g]], name="ou")


def build_model(spec: dict, seed: int = 0) -> SystemModel:
    """Model from a ``[model]`` config table: ``name`` in rocket / cubic / ou / linear."""
    from .dynamics import ConfigurationError
    from .rocket import rocket_benchmark

    name = spec.get("name")
    if name == "rocket":
        return rocket_benchmark(spec.get("coefficients") or None, c_bar=spec.get("c_bar"), seed=seed)
    if name == "cubic":
        return scalar_cubic(spec.get("g", 0.1), spec.get("d", 0.1), spec.get("a", 1.0), spec.get("width", 1.0))
    if name == "ou":
        return ornstein_uhlenbeck(spec.get("g", 0.1), spec.get("a", 1.0))
    if name == "linear":
        try:
            return linear_system(spec["A"], spec.get("B"), spec.get("G"), spec.get("C"), spec.get("D"))
        except KeyError:
            raise ConfigurationError("linear model needs a matrix A") from None
    raise ConfigurationError(f"unknown model {name!r}")
