"""Monte-Carlo comparison of controllers / estimators over common noise."""

from __future__ import annotations

import csv
import dataclasses
import json
import time
from pathlib import Path

import numpy as np

from ..dynamics import ConfigurationError, SystemModel
from ..mcvstem import load_sample_set
from ..nn.network import load_checkpoint
from ..seeding import stream
from .policies import (EkfEstimator, MetricController, MetricEstimator, NetMetric, SdreController, SdreEstimator,
                       TableMetric)
from .sde import simulate, wiener_increments

KINDS = ("nscm-net", "ncm-net", "metric-table", "sdre", "ekf")
ROLES = ("control", "estimation")


@dataclasses.dataclass(frozen=True)
class PolicySpec:
    """One policy in a comparison.

    ``artifact`` is a network checkpoint (``*-net``) or a sample-set path
    stem (``metric-table``); SDRE and EKF need none.
    """

    name: str
    kind: str
    artifact: str | None = None
    interpolate: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown policy kind {self.kind!r}")
        if self.kind in ("nscm-net", "ncm-net", "metric-table") and not self.artifact:
            raise ConfigurationError(f"policy {self.name!r} needs an artifact")


@dataclasses.dataclass(frozen=True)
class ExperimentConfig:
    """Monte-Carlo settings.

    ``x0_lower`` / ``x0_upper`` default to the central half of the model box.
    In estimation, ``xhat0 = x0 + U(-xhat0_spread, xhat0_spread)`` and the
    plant runs under ``plant_controller`` (``"sdre"`` on the true state or
    ``"none"``).  ``trace_every`` subsamples the CSV traces only.
    """

    role: str = "estimation"
    horizon: float = 10.0
    dt: float = 1e-3
    runs: int = 50
    seed: int = 0
    window: float = 0.2
    plant_controller: str = "sdre"
    x0_lower: tuple | None = None
    x0_upper: tuple | None = None
    xhat0_spread: float = 0.05
    trace_every: int = 10

    def __post_init__(self):
        if self.role not in ROLES:
            raise ConfigurationError(f"role must be one of {ROLES}")
        if not (self.horizon > 0 and self.dt > 0 and self.runs > 0):
            raise ConfigurationError("horizon, dt and runs must be positive")
        if not 0 < self.window <= 1:
            raise ConfigurationError("window must lie in (0, 1]")
        if self.plant_controller not in ("sdre", "none"):
            raise ConfigurationError("plant_controller must be 'sdre' or 'none'")

    @property
    def steps(self) -> int:
        return int(round(self.horizon / self.dt))


@dataclasses.dataclass
class SimulationReport:
    name: str
    kind: str
    role: str
    t: np.ndarray
    sq_error: np.ndarray  # (runs, steps + 1), nan after divergence
    mse: float
    bound: float | None
    violated: bool
    diverged_runs: list
    flagged_steps: int
    runtime: float

    def summary(self) -> dict:
        # runtime is left out so summaries are reproducible byte for byte
        return {"name": self.name, "kind": self.kind, "role": self.role, "mse": self.mse, "bound": self.bound,
                "violated": self.violated, "diverged_runs": self.diverged_runs,
                "flagged_steps": self.flagged_steps, "runs": int(self.sq_error.shape[0])}


def steady_state_mse(t, sq_error, horizon: float, window: float = 0.2) -> float:
    """Mean squared error over ``t >= (1 - window) horizon`` and over non-diverged runs."""
    t = np.asarray(t)
    sel = t >= (1.0 - window) * horizon - 1e-12
    ok = np.isfinite(sq_error).all(axis=1)
    if not ok.any():
        return float("inf")
    return float(np.mean(sq_error[ok][:, sel]))


def build_policy(spec: PolicySpec, model: SystemModel, role: str):
    if spec.kind in ("nscm-net", "ncm-net"):
        net = load_checkpoint(spec.artifact)
        if net.n != model.n:
            raise ConfigurationError(f"checkpoint {spec.artifact} has n={net.n}, model has n={model.n}")
        metric = NetMetric(net, "estimation" if role == "estimation" else "control")
    elif spec.kind == "metric-table":
        samples = load_sample_set(spec.artifact)
        if samples.x.shape[1] != model.n:
            raise ConfigurationError(f"sample set {spec.artifact} does not match the model dimension")
        metric = TableMetric(samples, interpolate=spec.interpolate)
    elif spec.kind == "sdre":
        return SdreController(model) if role == "control" else SdreEstimator(model)
    else:
        if role == "control":
            raise ConfigurationError("ekf is an estimator only")
        return EkfEstimator(model)
    return MetricController(model, metric) if role == "control" else MetricEstimator(model, metric)


def _initial_states(model: SystemModel, config: ExperimentConfig):
    box = model.box
    if config.x0_lower is not None:
        lo, hi = np.asarray(config.x0_lower, float), np.asarray(config.x0_upper, float)
    elif box is not None:
        c, r = 0.5 * (box.lower + box.upper), 0.25 * (box.upper - box.lower)
        lo, hi = c - r, c + r
    else:
        lo, hi = -np.ones(model.n), np.ones(model.n)
    x0 = stream(config.seed, "x0").uniform(lo, hi, size=(config.runs, model.n))
    xhat0 = x0 + stream(config.seed, "xhat0").uniform(-config.xhat0_spread, config.xhat0_spread, x0.shape)
    return x0, xhat0


def _filter(model, estimator, x, u, eta, xhat0, dt, guard=1e6):
    # run an estimator along stored plant paths; x: (R, steps+1, n), u: (R, steps, m)
    R, steps = eta.shape[:2]
    xhat = np.array(xhat0, dtype=float)
    estimator.reset(xhat)
    out = np.full((R, steps + 1, model.n), np.nan)
    out[:, 0] = xhat
    alive = np.flatnonzero(np.isfinite(x[:, 0]).all(axis=1))
    sq = np.sqrt(dt)
    diverged = []
    for k in range(steps):
        alive = alive[np.isfinite(x[alive, k + 1]).all(axis=1)]
        if alive.size == 0:
            break
        t = k * dt
        xa = x[alive, k]
        D = model.measurement_noise(xa, t).reshape(alive.size, -1, eta.shape[2])
        y = model.measure(xa, t).reshape(alive.size, -1) + np.einsum("rij,rj->ri", D, eta[alive, k]) / sq
        xhat[alive] = estimator.step(xhat[alive], y, u[alive, k], t, dt, alive)
        bad = ~np.isfinite(xhat[alive]).all(axis=1) | (np.linalg.norm(xhat[alive], axis=1) > guard)
        out[alive[~bad], k + 1] = xhat[alive[~bad]]
        diverged.extend(int(r) for r in alive[bad])
        alive = alive[~bad]
    return out, sorted(diverged)


def _flags(policy) -> int:
    return int(getattr(policy, "failures", 0) + getattr(policy, "flags", 0))


def run_comparison(model: SystemModel, config: ExperimentConfig, policies, bound: float | None = None,
                   out_dir=None, progress=None) -> dict:
    """Roll out every policy over the same noise and initial states.

    Control compares ``||x - 0||^2`` under each controller.  Estimation
    simulates the plant once (under ``plant_controller``) and runs every
    estimator on the same measurement noise, comparing ``||x - xhat||^2``.
    Returns ``{name: SimulationReport}``; files are written when ``out_dir``
    is given.
    """
    policies = list(policies)
    names = [p.name for p in policies]
    if len(set(names)) != len(names):
        raise ConfigurationError("policy names must be unique")
    steps, dt = config.steps, config.dt
    x0, xhat0 = _initial_states(model, config)
    noise = "control" if config.role == "control" else "process"
    G = (model.control_noise if noise == "control" else model.process_noise)(x0[:1], 0.0)
    xi = wiener_increments(config.seed, config.runs, steps, np.shape(G)[-1], "noise")
    reports = {}
    if config.role == "estimation":
        D = model.measurement_noise(x0[:1], 0.0)
        eta = wiener_increments(config.seed, config.runs, steps, np.shape(D)[-1], "measurement")
        plant = SdreController(model) if config.plant_controller == "sdre" else None
        path = simulate(model, x0, steps, dt, xi, plant, noise=noise)
        if progress:
            progress(f"plant simulated, {int(np.sum(path.diverged_at >= 0))} runs diverged")
        u = np.nan_to_num(path.u[:, :steps])
    for spec in policies:
        policy = build_policy(spec, model, config.role)
        start = time.perf_counter()
        if config.role == "control":
            res = simulate(model, x0, steps, dt, xi, policy, noise=noise)
            err = np.sum(res.x**2, axis=-1)
            t = res.t
            diverged = sorted(int(r) for r in np.flatnonzero(res.diverged_at >= 0))
        else:
            xhat, diverged = _filter(model, policy, path.x, u, eta, xhat0, dt)
            err = np.sum((path.x - xhat) ** 2, axis=-1)
            t = path.t
            diverged = sorted(set(diverged) | {int(r) for r in np.flatnonzero(path.diverged_at >= 0)})
        runtime = time.perf_counter() - start
        mse = steady_state_mse(t, err, config.horizon, config.window)
        violated = bool(diverged) or (bound is not None and not mse <= bound)
        reports[spec.name] = SimulationReport(spec.name, spec.kind, config.role, t, err, mse, bound, violated,
                                              diverged, _flags(policy), runtime)
        if progress:
            progress(f"{spec.name}: mse {mse:.4g}")
    if out_dir is not None:
        write_reports(reports, config, out_dir)
    return reports


def _fmt(v) -> str:
    return "nan" if not np.isfinite(v) else repr(float(v))


def write_reports(reports: dict, config: ExperimentConfig, out_dir) -> None:
    """Per-policy trace CSVs, an aggregate table and a JSON summary."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, rep in reports.items():
        sel = slice(None, None, config.trace_every)
        with open(out / f"traces_{name}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t"] + [f"run{r}" for r in range(rep.sq_error.shape[0])])
            for k, tk in enumerate(rep.t[sel]):
                w.writerow([_fmt(tk)] + [_fmt(v) for v in rep.sq_error[:, sel][:, k]])
    keys = ["policy", "kind", "role", "mse", "bound", "violated", "diverged", "flagged_steps"]
    with open(out / "comparison.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(keys)
        for name, rep in reports.items():
            w.writerow([name, rep.kind, rep.role, _fmt(rep.mse), "" if rep.bound is None else _fmt(rep.bound),
                        int(rep.violated), len(rep.diverged_runs), rep.flagged_steps])
    summary = {"config": dataclasses.asdict(config), "policies": [r.summary() for r in reports.values()]}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    raise TypeError(type(v))


def write_plot_data(reports: dict, path, every: int = 10) -> None:
    """Gnuplot-ready columns: time, then mean squared error per policy, then the bound."""
    reps = list(reports.values())
    t = reps[0].t[::every]
    bound = reps[0].bound
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, delimiter=" ", lineterminator="\n")
        w.writerow(["#t"] + [r.name for r in reps] + (["bound"] if bound is not None else []))
        means = [np.nanmean(r.sq_error[:, ::every], axis=0) for r in reps]
        for k, tk in enumerate(t):
            w.writerow([_fmt(tk)] + [_fmt(m[k]) for m in means] + ([_fmt(bound)] if bound is not None else []))
