"""Convex sampling of stochastic contraction metrics and the (alpha, eps) line search.

For fixed ``(alpha, eps)`` one SDP couples every sampled state through the
shared scalars ``(nu, nu_c, chi)``::

    min  c1 chi + c2 nu + c3 P    s.t. per-sample contraction LMIs, I <= Wbar_i <= chi I

and the line search keeps the grid point with the smallest objective.
Metrics are recovered as ``M = nu Wbar^{-1}`` (control) or ``W = Wbar / nu``
(estimation).
"""

from __future__ import annotations

import csv
import dataclasses
import json
import warnings
from pathlib import Path

import numpy as np

from . import lmi
from .dynamics import ConfigurationError, NoiseBounds, SystemModel, sdc_factorize_batch, \
    sdc_measurement_factorize_batch
from .sdp import SolveReport, Tolerances, check_feasibility, solve

MODES = ("control", "estimation", "basic")


class NoFeasibleMetricError(RuntimeError):
    """Every grid point of the line search was infeasible."""


class DomainError(ValueError):
    pass


# ---------------------------------------------------------------------------
# constants and weights

@dataclasses.dataclass(frozen=True)
class BoundConstants:
    """Noise-gain constants for one ``(alpha, eps)``.

    ``alpha_g``/``C`` hold the family of the active mode (``alpha_gc``/``C_c``
    for control, the plain contraction values for basic); estimation uses the ``e``
    fields.
    """

    mode: str
    alpha: float
    eps: float
    L_m: float
    alpha_g: float = 0.0
    C: float = 0.0
    alpha_e1: float = 0.0
    alpha_e2: float = 0.0
    C_e1: float = 0.0
    C_e2: float = 0.0


def bound_constants(mode: str, bounds: NoiseBounds, L_m: float, alpha: float, eps: float,
                    g1: float | None = None, g2: float | None = None) -> BoundConstants:
    """Evaluate the ``alpha_g``- and ``C``-family constants.

    Basic mode uses ``g1 = g2 = g_c`` unless given (two trajectories of the
    same diffusion).

    Examples
    --------
    >>> b = NoiseBounds(g_c=0.06 * np.sqrt(2))
    >>> round(float(bound_constants("control", b, 10.0, 0.1, 1.0).alpha_g), 12)
    0.108
    """
    if mode not in MODES:
        raise ConfigurationError(f"unknown mode {mode!r}")
    if not eps > 0:
        raise DomainError("eps must be positive")
    if L_m < 0 or alpha < 0:
        raise DomainError("L_m and alpha must be nonnegative")
    gain, atten = eps + 0.5, 2.0 / eps + 1.0
    if mode == "control":
        g2c = bounds.g_c**2
        return BoundConstants(mode, alpha, eps, L_m, alpha_g=L_m * g2c * gain, C=g2c * atten)
    if mode == "basic":
        g1 = bounds.g_c if g1 is None else g1
        g2 = bounds.g_c if g2 is None else g2
        gg = g1**2 + g2**2
        return BoundConstants(mode, alpha, eps, L_m, alpha_g=L_m * gg * gain, C=gg * atten)
    ge2 = bounds.g_e**2
    cd2 = (bounds.c_bar * bounds.d_bar) ** 2
    return BoundConstants(mode, alpha, eps, L_m, alpha_e1=L_m * ge2 * gain, alpha_e2=L_m * cd2 * gain,
                          C_e1=ge2 * atten, C_e2=cd2 * atten)


def estimation_weights(C_e1: float, C_e2: float, alpha: float) -> tuple[float, float]:
    """Objective weights from the cubic bound on ``(C_e1 chi + C_e2 chi nu^2) / (2 alpha)``.

    Examples
    --------
    >>> estimation_weights(3.0, 0.0, 0.5)
    (3.0, 0.0)
    """
    if not alpha > 0:
        raise DomainError("alpha must be positive")
    if C_e1 < 0 or C_e2 < 0:
        raise DomainError("C_e1 and C_e2 must be nonnegative")
    root = np.cbrt(2.0 * alpha)
    return float(np.sqrt(3.0 * C_e1) / root), float(np.sqrt(C_e2) / root)


def steady_state_bound(mode: str, constants: BoundConstants, nu: float, chi: float, alpha: float) -> float:
    """Asymptotic mean-squared error bound at ``(nu, chi)``."""
    if not alpha > 0:
        raise DomainError("alpha must be positive")
    if mode == "estimation":
        return float((constants.C_e1 * chi + constants.C_e2 * chi * nu**2) / (2.0 * alpha))
    if mode in ("control", "basic"):
        return float(constants.C * chi / (2.0 * alpha))
    raise ConfigurationError(f"unknown mode {mode!r}")


def recover_metric(W_bar, nu: float, mode: str) -> np.ndarray:
    """Metric ``M`` from ``Wbar`` (works on stacks).

    Examples
    --------
    >>> recover_metric(np.eye(2), 2.0, "estimation")
    array([[2., 0.],
           [0., 2.]])
    """
    if mode not in MODES:
        raise ConfigurationError(f"unknown mode {mode!r}")
    # control: M = nu Wbar^{-1}; estimation: W = Wbar / nu and M = W^{-1}, the same matrix
    return nu * np.linalg.inv(np.asarray(W_bar, dtype=float))


def learned_field(W_bar, nu: float, mode: str) -> np.ndarray:
    """Matrix the network learns: ``M`` for control / basic, ``W`` for estimation."""
    W_bar = np.asarray(W_bar, dtype=float)
    if mode == "estimation":
        return W_bar / nu
    return recover_metric(W_bar, nu, mode)


def field_bound(mode: str, nu: float, chi: float) -> float:
    """Spectral bound of :func:`learned_field` implied by ``I <= Wbar <= chi I``."""
    return chi / nu if mode == "estimation" else nu


# ---------------------------------------------------------------------------
# configuration and samples

def default_grid() -> tuple[tuple, tuple]:
    return tuple(np.logspace(-2, 1, 10)), tuple(np.logspace(-1, 1, 10))


@dataclasses.dataclass(frozen=True)
class McvStemConfig:
    """Sampler settings.

    ``c1``/``c2`` left as ``None`` select the mode defaults (control and basic:
    ``c1 = C / (2 alpha)``, ``c2 = 0``; estimation: :func:`estimation_weights`).
    ``partners`` controls the true-state partners paired with each estimate
    sample: ``"self"`` (Jacobian) or ``"sampled"`` (self plus ``n_partners``
    uniform draws from the box).
    """

    mode: str
    L_m: float
    alphas: tuple = dataclasses.field(default_factory=lambda: default_grid()[0])
    epsilons: tuple = dataclasses.field(default_factory=lambda: default_grid()[1])
    n_samples: int = 200
    c1: float | None = None
    c2: float | None = None
    c3: float = 0.0
    wdot_mode: str | None = None
    dt: float | None = None
    sampling: str = "box"
    partners: str = "self"
    n_partners: int = 1
    target: str = "origin"
    quad_order: int = 10
    chunk_size: int | None = None
    feastol: float = 1e-8
    reltol: float = 1e-6
    max_iter: int = 200

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}, got {self.mode!r}")
        for name in ("c1", "c2", "c3"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise ConfigurationError(f"{name} must be nonnegative")
        if self.L_m < 0:
            raise ConfigurationError("L_m must be nonnegative")
        if len(self.alphas) == 0 or len(self.epsilons) == 0:
            raise ConfigurationError("line-search grid is empty")
        if min(self.alphas) <= 0 or min(self.epsilons) <= 0:
            raise ConfigurationError("grid values must be positive")
        if self.n_samples < 1:
            raise ConfigurationError("n_samples must be positive")
        if self.sampling not in ("box", "trajectory"):
            raise ConfigurationError("sampling must be 'box' or 'trajectory'")
        if self.partners not in ("self", "sampled"):
            raise ConfigurationError("partners must be 'self' or 'sampled'")
        if self.target not in ("origin", "box"):
            raise ConfigurationError("target must be 'origin' or 'box'")
        if self.wdot_mode is not None and self.wdot_mode not in lmi.WDOT_MODES:
            raise ConfigurationError(f"wdot_mode must be one of {lmi.WDOT_MODES}")
        if self.c3 > 0 and self.mode != "control":
            raise ConfigurationError("the control-effort cost (c3 > 0) applies to control mode only")

    @property
    def wdot(self) -> str:
        if self.wdot_mode is not None:
            return self.wdot_mode
        return "backward-difference" if self.sampling == "trajectory" else "zero"

    @property
    def tolerances(self) -> Tolerances:
        return Tolerances(feastol=self.feastol, reltol=self.reltol, max_iter=self.max_iter)

    def with_grid(self, alphas, epsilons) -> "McvStemConfig":
        return dataclasses.replace(self, alphas=tuple(alphas), epsilons=tuple(epsilons))


@dataclasses.dataclass(frozen=True)
class SamplePoints:
    """States ``x`` (estimates for estimation mode), parameters ``p`` and partners."""

    x: np.ndarray
    p: np.ndarray
    t: np.ndarray
    x_d: np.ndarray | None = None
    u_d: np.ndarray | None = None
    partners: np.ndarray | None = None
    ordered: bool = False
    dt: float | None = None

    @property
    def n_samples(self) -> int:
        return self.x.shape[0]


def _times(model: SystemModel, p: np.ndarray) -> np.ndarray:
    names = model.box.param_names
    if "t" in names:
        return p[:, names.index("t")].copy()
    return np.zeros(p.shape[0])


def draw_samples(config: McvStemConfig, model: SystemModel, rng: np.random.Generator) -> SamplePoints:
    """Draw the sample set ``S`` (box or deterministic trajectory)."""
    if model.box is None:
        raise ConfigurationError("model has no state box to sample")
    N, box = config.n_samples, model.box
    ordered, dt = False, config.dt
    if config.sampling == "box":
        x = box.sample(rng, N)
        p = box.sample_params(rng, N)
    else:
        if dt is None or not dt > 0:
            raise ConfigurationError("trajectory sampling needs a positive dt")
        x = np.empty((N, box.n))
        x[0] = box.sample(rng, 1)[0]
        p = np.tile(box.param_lower, (N, 1))
        if "t" in box.param_names:
            p[:, box.param_names.index("t")] = box.param_lower[box.param_names.index("t")] + dt * np.arange(N)
        t = _times(model, p)
        sub = 10
        for i in range(1, N):
            xi = x[i - 1].copy()
            for j in range(sub):
                xi = _rk4(model, xi, t[i - 1] + j * dt / sub, dt / sub)
            x[i] = xi
        ordered = True
    t = _times(model, p)
    out = dict(x=x, p=p, t=t, ordered=ordered, dt=dt)
    if config.mode == "control":
        x_d = np.zeros_like(x) if config.target == "origin" else box.sample(rng, N)
        out.update(x_d=x_d, u_d=np.zeros((N, model.m)))
    if config.mode == "estimation":
        parts = [x[:, None, :]]
        if config.partners == "sampled":
            parts.append(box.sample(rng, N * config.n_partners).reshape(N, config.n_partners, box.n))
        out["partners"] = np.concatenate(parts, axis=1)
    return SamplePoints(**out)


def _rk4(model, x, t, h):
    f = lambda xx, tt: model.drift(xx[None], np.array([tt]))[0]  # noqa: E731
    k1 = f(x, t)
    k2 = f(x + 0.5 * h * k1, t + 0.5 * h)
    k3 = f(x + 0.5 * h * k2, t + 0.5 * h)
    k4 = f(x + h * k3, t + h)
    return x + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


@dataclasses.dataclass(frozen=True)
class Linearization:
    """SDC data per sample; shapes (N, K, ...) with K partners (1 unless estimation)."""

    A: np.ndarray
    B: np.ndarray | None = None
    C: np.ndarray | None = None
    C_L: np.ndarray | None = None
    effort: float = 0.0


def linearize(config: McvStemConfig, model: SystemModel, pts: SamplePoints) -> Linearization:
    """SDC factors at every sample; independent of ``(alpha, eps)`` so computed once."""
    N, n = pts.x.shape
    q = config.quad_order
    if config.mode == "control":
        A, _ = sdc_factorize_batch(model, pts.x, pts.x_d, pts.u_d, pts.t, q)
        B = model.actuation(pts.x, pts.t)
        effort = float(np.sum(np.linalg.norm(B, ord=2, axis=(-2, -1)) ** 2
                              * np.sum((pts.x - pts.x_d) ** 2, axis=1)))
        return Linearization(A[:, None], B, effort=effort)
    if config.mode == "basic":
        return Linearization(model.drift_jacobian(pts.x, pts.t)[:, None])
    K = pts.partners.shape[1]
    xh = np.repeat(pts.x, K, axis=0)
    xs = pts.partners.reshape(N * K, n)
    tt = np.repeat(pts.t, K)
    # f(xhat) - f(x) = A (xhat - x),  h(xhat) - h(x) = C (xhat - x)
    A, _ = sdc_factorize_batch(model, xh, xs, None, tt, q)
    C, _ = sdc_measurement_factorize_batch(model, xh, xs, tt, q)
    C_L = model.measurement_jacobian(pts.x, pts.t)
    return Linearization(A.reshape(N, K, n, n), C=C.reshape(N, K, -1, n), C_L=C_L)


def resolve_weights(config: McvStemConfig, consts: BoundConstants) -> tuple[float, float, float]:
    if config.mode == "estimation":
        c1, c2 = estimation_weights(consts.C_e1, consts.C_e2, consts.alpha)
    else:
        c1, c2 = consts.C / (2.0 * consts.alpha), 0.0
    c1 = c1 if config.c1 is None else config.c1
    c2 = c2 if config.c2 is None else config.c2
    return c1, c2, config.c3


def build_problem(config: McvStemConfig, lin: Linearization, pts: SamplePoints, consts: BoundConstants,
                  indices=None) -> lmi.LmiProblem:
    """Assemble the coupled SDP over the samples in ``indices`` (all by default)."""
    idx = np.arange(pts.n_samples) if indices is None else np.asarray(indices)
    n = pts.x.shape[1]
    mode = config.mode
    c1, c2, c3 = resolve_weights(config, consts)
    n_aux = 1 if (mode == "estimation" or c3 > 0) else 0
    ordered = pts.ordered and indices is None
    layout = lmi.DecisionLayout(n, idx.size, n_aux, ordered)
    blocks = []
    for j, i in enumerate(idx):
        for k in range(lin.A.shape[1]):
            if mode == "control":
                bl = lmi.build_control_blocks(lin.A[i, k], lin.B[i], consts.alpha, consts.alpha_g,
                                              config.wdot, j, layout, pts.dt)
            elif mode == "basic":
                bl = lmi.build_basic_contraction_blocks(lin.A[i, k], consts.alpha, consts.alpha_g, j, layout,
                                                        config.wdot, pts.dt)
            else:
                bl = lmi.build_estimation_blocks(lin.A[i, k], lin.C[i, k], lin.C_L[i], consts.alpha,
                                                 consts.alpha_e1, consts.alpha_e2, config.wdot, j, layout, pts.dt)
            # bound blocks are shared by all partners of one sample
            blocks.extend(bl if k == 0 else bl[:1])
    c = np.zeros(layout.length)
    c[lmi.CHI] = c1
    fixed: dict[int, float] = {}
    if mode == "estimation":
        c[lmi.NU] = c2
    else:
        fixed[lmi.NU_C] = 0.0
        if mode == "basic" and consts.alpha_g == 0:
            fixed[lmi.NU] = 1.0  # nu does not enter the constraints
        else:
            c[lmi.NU] = c2
    if c3 > 0:
        kappa = lin.effort * idx.size / max(pts.n_samples, 1)
        blocks.append(lmi.quadratic_cost_block(layout, kappa, 0))
        c[layout.aux(0)] = c3
    return lmi.assemble(layout, blocks, c, fixed=fixed, cubic=(mode == "estimation"))


# ---------------------------------------------------------------------------
# results

@dataclasses.dataclass
class MetricSampleSet:
    """Optimizer of one SDP: per-sample ``Wbar`` and the shared scalars."""

    mode: str
    x: np.ndarray = dataclasses.field(repr=False)
    p: np.ndarray = dataclasses.field(repr=False)
    W_bar: np.ndarray = dataclasses.field(repr=False)
    nu: float
    nu_c: float
    chi: float
    alpha: float
    eps: float
    J: float
    bound: float
    L_m: float
    weights: tuple
    iterations: int = 0
    margin: float = 0.0
    accuracy: str = "full"

    @property
    def n_samples(self) -> int:
        return self.x.shape[0]

    def metrics(self) -> np.ndarray:
        return recover_metric(self.W_bar, self.nu, self.mode)

    def field(self) -> np.ndarray:
        return learned_field(self.W_bar, self.nu, self.mode)

    @property
    def m_bar(self) -> float:
        """Cap on ``||theta||^2 = tr X`` for the network output."""
        return self.x.shape[1] * field_bound(self.mode, self.nu, self.chi)

    def metadata(self) -> dict:
        return {"mode": self.mode, "nu": self.nu, "nu_c": self.nu_c, "chi": self.chi, "alpha": self.alpha,
                "eps": self.eps, "J": self.J, "bound": self.bound, "L_m": self.L_m,
                "weights": list(self.weights), "n_samples": self.n_samples, "n": int(self.x.shape[1]),
                "n_params": int(self.p.shape[1]), "iterations": self.iterations, "margin": self.margin,
                "accuracy": self.accuracy, "m_bar": self.m_bar}


@dataclasses.dataclass(frozen=True)
class Infeasible:
    alpha: float
    eps: float
    status: str
    message: str = ""


def _unpack(config, consts, pts, idx, rep: SolveReport, layout) -> MetricSampleSet:
    y = rep.y
    W = layout.w_matrices(y)
    nu, nu_c, chi = float(y[lmi.NU]), float(y[lmi.NU_C]), float(y[lmi.CHI])
    c1, c2, c3 = resolve_weights(config, consts)
    return MetricSampleSet(config.mode, pts.x[idx], pts.p[idx], W, nu, nu_c, chi, consts.alpha, consts.eps,
                           float(rep.objective), steady_state_bound(config.mode, consts, nu, chi, consts.alpha),
                           consts.L_m, (c1, c2, c3), rep.iterations, rep.margin, rep.accuracy)


def sample_metrics(config: McvStemConfig, model: SystemModel, alpha: float, eps: float,
                   points: SamplePoints | None = None, lin: Linearization | None = None,
                   rng: np.random.Generator | None = None) -> MetricSampleSet | Infeasible:
    """Solve the coupled SDP at one ``(alpha, eps)``.

    Returns :class:`Infeasible` (not an exception) for infeasible or failed
    grid points so that line searches keep going.
    """
    if points is None:
        if rng is None:
            raise ConfigurationError("need either sample points or an rng")
        points = draw_samples(config, model, rng)
    if lin is None:
        lin = linearize(config, model, points)
    if model.bounds is None:
        raise ConfigurationError("model has no noise bounds")
    consts = bound_constants(config.mode, model.bounds, config.L_m, alpha, eps)
    tol = config.tolerances
    N = points.n_samples
    if config.chunk_size is None or config.chunk_size >= N:
        problem = build_problem(config, lin, points, consts)
        rep = solve(problem, tol)
        if rep.status != "optimal":
            return Infeasible(alpha, eps, rep.status, f"solver status {rep.status} after {rep.iterations} iterations")
        return _unpack(config, consts, points, np.arange(N), rep, problem.layout)
    return _sample_chunked(config, consts, points, lin, tol)


def _sample_chunked(config, consts, pts, lin, tol):
    # solve disjoint chunks and combine with the largest nu, nu_c, chi
    if config.wdot == "backward-difference":
        raise ConfigurationError("chunked solving does not support backward differences")
    parts, iters, accuracy = [], 0, "full"
    for start in range(0, pts.n_samples, config.chunk_size):
        idx = np.arange(start, min(start + config.chunk_size, pts.n_samples))
        problem = build_problem(config, lin, pts, consts, idx)
        rep = solve(problem, tol)
        if rep.status != "optimal":
            return Infeasible(consts.alpha, consts.eps, rep.status, f"chunk at {start}: {rep.status}")
        parts.append(_unpack(config, consts, pts, idx, rep, problem.layout))
        iters += rep.iterations
        accuracy = "reduced" if rep.accuracy == "reduced" else accuracy
    nu = max(s.nu for s in parts)
    nu_c = max(s.nu_c for s in parts)
    chi = max(s.chi for s in parts)
    W = np.concatenate([s.W_bar for s in parts])
    full = build_problem(config, lin, pts, consts)
    y = full.layout.pack(nu, nu_c, chi, W, aux=[_aux_value(config, nu, lin)] if full.layout.n_aux else ())
    report = check_feasibility(full, y, tol.feastol)
    if not report.feasible:
        return Infeasible(consts.alpha, consts.eps, "infeasible",
                          f"combined chunk solution violates constraints by {report.worst:.3e}")
    c1, c2, c3 = resolve_weights(config, consts)
    J = float(full.objective @ y)
    return MetricSampleSet(config.mode, pts.x, pts.p, W, nu, nu_c, chi, consts.alpha, consts.eps, J,
                           steady_state_bound(config.mode, consts, nu, chi, consts.alpha), consts.L_m,
                           (c1, c2, c3), iters, float(report.block_margins.max()), accuracy)


def _aux_value(config, nu, lin):
    if config.mode == "estimation":
        return nu**2
    return lin.effort * nu**2


@dataclasses.dataclass
class LineSearchResult:
    alpha: float
    eps: float
    samples: MetricSampleSet
    surface: list

    def surface_array(self) -> np.ndarray:
        """J on the (alpha, eps) grid, NaN where infeasible."""
        alphas = sorted({r["alpha"] for r in self.surface})
        epss = sorted({r["eps"] for r in self.surface})
        J = np.full((len(alphas), len(epss)), np.nan)
        for r in self.surface:
            J[alphas.index(r["alpha"]), epss.index(r["eps"])] = r["J"]
        return J


def line_search(config: McvStemConfig, model: SystemModel, points: SamplePoints | None = None,
                rng: np.random.Generator | None = None, progress=None) -> LineSearchResult:
    """Grid argmin of ``J`` over ``alphas x epsilons``; ties go to the smallest ``(alpha, eps)``."""
    if points is None:
        if rng is None:
            raise ConfigurationError("need either sample points or an rng")
        points = draw_samples(config, model, rng)
    lin = linearize(config, model, points)
    surface, best = [], None
    for a in sorted(config.alphas):
        for e in sorted(config.epsilons):
            res = sample_metrics(config, model, a, e, points, lin)
            row = {"alpha": float(a), "eps": float(e)}
            if isinstance(res, Infeasible):
                row.update(status=res.status, J=np.nan, bound=np.nan, chi=np.nan, nu=np.nan, iterations=0)
            else:
                status = "optimal" if res.accuracy == "full" else "optimal-reduced"
                row.update(status=status, J=res.J, bound=res.bound, chi=res.chi, nu=res.nu, iterations=res.iterations)
                if best is None or res.J < best.J:
                    best = res
            surface.append(row)
            if progress is not None:
                progress(row)
    if best is None:
        raise NoFeasibleMetricError(
            f"no feasible metric on the {len(config.alphas)}x{len(config.epsilons)} grid "
            f"(mode {config.mode}, L_m={config.L_m})")
    return LineSearchResult(best.alpha, best.eps, best, surface)


def is_interior(result: LineSearchResult) -> bool:
    """Whether the argmin lies strictly inside the grid in both directions."""
    alphas = sorted({r["alpha"] for r in result.surface})
    epss = sorted({r["eps"] for r in result.surface})
    i, j = alphas.index(result.alpha), epss.index(result.eps)
    return 0 < i < len(alphas) - 1 and 0 < j < len(epss) - 1


def estimate_lipschitz_prepass(config: McvStemConfig, model: SystemModel, points: SamplePoints,
                               neighbours: int | None = None, inflate: float = 2.0) -> float:
    """Guess ``L_m`` from a noise-free sampler run.

    Runs the line search with ``L_m = 0`` (no noise-gain terms), fits local
    linear models of the learned field around every sample over its nearest
    neighbours, and returns ``inflate`` times the largest change of the
    fitted derivative between neighbouring samples per unit distance.
    """
    from scipy.spatial import cKDTree

    res = line_search(dataclasses.replace(config, L_m=0.0), model, points).samples
    X = res.field()
    z = np.concatenate([res.x, res.p], axis=1)
    n = res.x.shape[1]
    k = neighbours or (2 * z.shape[1] + 2)
    tree = cKDTree(z)
    _, nb = tree.query(z, k=min(k + 1, len(z)))
    N = len(z)
    D = np.zeros((N, n) + X.shape[1:])
    for i in range(N):
        dz = z[nb[i, 1:]] - z[i]
        dX = (X[nb[i, 1:]] - X[i]).reshape(len(dz), -1)
        sol, *_ = np.linalg.lstsq(dz, dX, rcond=None)
        D[i] = sol[:n].reshape((n,) + X.shape[1:])
    L = 0.0
    for i in range(N):
        for j in nb[i, 1:]:
            dist = np.linalg.norm(z[j] - z[i])
            if dist > 0:
                L = max(L, max(np.linalg.norm(D[i, a] - D[j, a], 2) for a in range(n)) / dist)
    return inflate * float(L)


# ---------------------------------------------------------------------------
# persistence

def _fmt(v: float) -> str:
    return repr(float(v))


def save_sample_set(samples: MetricSampleSet, path) -> None:
    """Write ``<path>.csv`` (one row per sample) and ``<path>.json`` metadata."""
    path = Path(path)
    n, n_p = samples.x.shape[1], samples.p.shape[1]
    r, c = np.triu_indices(n)
    header = [f"x{i}" for i in range(n)] + [f"p{i}" for i in range(n_p)] + [f"w{a}{b}" for a, b in zip(r, c)]
    with open(path.with_suffix(".csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(samples.n_samples):
            row = list(samples.x[i]) + list(samples.p[i]) + list(samples.W_bar[i][r, c])
            w.writerow([_fmt(v) for v in row])
    path.with_suffix(".json").write_text(json.dumps(samples.metadata(), indent=2, sort_keys=True) + "\n")


def load_sample_set(path) -> MetricSampleSet:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    data = np.loadtxt(path.with_suffix(".csv"), delimiter=",", skiprows=1, ndmin=2)
    n, n_p = meta["n"], meta["n_params"]
    W = lmi.unvech(data[:, n + n_p:], n)
    return MetricSampleSet(meta["mode"], data[:, :n], data[:, n:n + n_p], W, meta["nu"], meta["nu_c"],
                           meta["chi"], meta["alpha"], meta["eps"], meta["J"], meta["bound"], meta["L_m"],
                           tuple(meta["weights"]), meta.get("iterations", 0), meta.get("margin", 0.0),
                           meta.get("accuracy", "full"))


def write_surface_csv(result: LineSearchResult, path) -> None:
    keys = ["alpha", "eps", "status", "J", "bound", "chi", "nu", "iterations"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys, lineterminator="\n")
        w.writeheader()
        for row in result.surface:
            w.writerow({k: (_fmt(row[k]) if isinstance(row[k], float) else row[k]) for k in keys})


def warn_if_boundary(result: LineSearchResult) -> None:
    if not is_interior(result):
        warnings.warn(f"line-search argmin ({result.alpha:.4g}, {result.eps:.4g}) lies on the grid boundary",
                      RuntimeWarning, stacklevel=2)
