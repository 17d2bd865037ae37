"""Command-line pipeline: sample -> train -> verify -> simulate / compare.

One TOML file drives every stage; see ``configs/`` for annotated examples.
All randomness comes from the global seed through named streams.

Exit codes: 0 success, 1 verification or numerical failure, 2 usage or
configuration error.
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime
import json
import sys
from pathlib import Path

import numpy as np

from .config import load_toml
from .dynamics import ConfigurationError, SystemModel
from .mcvstem import (Infeasible, McvStemConfig, NoFeasibleMetricError, bound_constants, build_problem,
                      draw_samples, is_interior, line_search, linearize, load_sample_set, sample_metrics,
                      save_sample_set, write_surface_csv, _aux_value)
from .nn import (CertificateError, CheckpointError, TrainConfig, TrainingError, check_normalization,
                 load_checkpoint, predict_metric, save_checkpoint, train, verify_lipschitz, write_curves)
from .sdp import check_feasibility
from .seeding import stream
from .sim import ExperimentConfig, PolicySpec, run_comparison, simulate, write_plot_data
from .systems import build_model, linear_system

STAGES = ("sample", "train", "verify", "simulate", "compare", "all")
SECTIONS = {"seed", "out", "model", "mcvstem", "ncm", "train", "verify", "experiment"}
POLICY_ARTIFACTS = {"nscm-net": "net.ckpt", "ncm-net": "ncm_net.ckpt", "metric-table": "samples"}


class UsageError(Exception):
    pass


class VerificationError(Exception):
    pass


@dataclasses.dataclass(frozen=True)
class PipelineConfig:
    seed: int
    out: Path
    model: dict
    mcvstem: McvStemConfig
    ncm: dict | None
    train: TrainConfig
    verify: dict
    experiment: ExperimentConfig
    policies: tuple


def _grid(table: dict, key: str):
    # explicit list, or [lower, upper, count] on a log scale
    if key in table:
        return tuple(float(v) for v in table.pop(key))
    rng_key = key[:-1] + "_range" if key != "epsilons" else "eps_range"
    if rng_key in table:
        lo, hi, count = table.pop(rng_key)
        return tuple(np.logspace(np.log10(lo), np.log10(hi), int(count)).tolist())
    return None


def _fields(cls, table: dict, section: str) -> dict:
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(table) - names
    if unknown:
        raise ConfigurationError(f"[{section}] unknown keys: {', '.join(sorted(unknown))}")
    return table


def parse_config(raw: dict, base: Path = Path(".")) -> PipelineConfig:
    """Validate a raw TOML mapping into a :class:`PipelineConfig`."""
    raw = json.loads(json.dumps(raw))  # deep copy
    unknown = set(raw) - SECTIONS
    if unknown:
        raise ConfigurationError(f"unknown sections: {', '.join(sorted(unknown))}")
    for key in ("model", "mcvstem"):
        if key not in raw:
            raise ConfigurationError(f"missing [{key}] section")
    model = dict(raw["model"])
    if "name" not in model:
        raise ConfigurationError("[model] needs a name")
    if model.get("coefficients"):
        model["coefficients"] = str((base / model["coefficients"]).resolve())
    mc = dict(raw["mcvstem"])
    alphas, epsilons = _grid(mc, "alphas"), _grid(mc, "epsilons")
    mc = _fields(McvStemConfig, mc, "mcvstem")
    try:
        mcfg = McvStemConfig(**mc)
    except TypeError as exc:
        raise ConfigurationError(f"[mcvstem] {exc}") from None
    if alphas is not None or epsilons is not None:
        mcfg = mcfg.with_grid(alphas or mcfg.alphas, epsilons or mcfg.epsilons)
    tr = _fields(TrainConfig, dict(raw.get("train", {})), "train")
    if "widths" in tr:
        tr["widths"] = tuple(int(w) for w in tr["widths"])
    ex = dict(raw.get("experiment", {}))
    policies = tuple(ex.pop("policies", ("nscm-net", "metric-table")))
    for kind in policies:
        PolicySpec(kind, kind, POLICY_ARTIFACTS.get(kind))
    for key in ("x0_lower", "x0_upper"):
        if key in ex:
            ex[key] = tuple(ex[key])
    ex.setdefault("role", "estimation" if mcfg.mode == "estimation" else "control")
    seed = int(raw.get("seed", 0))
    ex["seed"] = seed
    ex = _fields(ExperimentConfig, ex, "experiment")
    ncm = raw.get("ncm")
    if ncm is not None and not ncm.get("enabled", True):
        ncm = None
    try:
        return PipelineConfig(seed, Path(raw.get("out", "runs/out")), model, mcfg, ncm, TrainConfig(**tr),
                              dict(raw.get("verify", {})), ExperimentConfig(**ex), policies)
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from None


def with_seed(cfg: PipelineConfig, seed: int) -> PipelineConfig:
    return dataclasses.replace(cfg, seed=seed, experiment=dataclasses.replace(cfg.experiment, seed=seed))


def parse_grid_override(text: str) -> tuple:
    """``"alphas=0.2,0.4;epsilons=1,3.3"`` -> ``(alphas, epsilons)`` (missing parts are ``None``)."""
    out = {"alphas": None, "epsilons": None}
    for part in filter(None, (s.strip() for s in text.split(";"))):
        key, _, vals = part.partition("=")
        key = key.strip()
        if key not in out or not vals:
            raise UsageError(f"bad grid override {part!r}; expected alphas=... or epsilons=...")
        try:
            out[key] = tuple(float(v) for v in vals.split(","))
        except ValueError:
            raise UsageError(f"bad number in grid override {part!r}") from None
    return out["alphas"], out["epsilons"]


class Log:
    """Console echo plus ``log.txt``; the timestamp lives in the header line only."""

    def __init__(self, out: Path, quiet: bool = False):
        out.mkdir(parents=True, exist_ok=True)
        self.fh = open(out / "log.txt", "a")
        self.fh.write(f"# run started {datetime.datetime.now().isoformat(timespec='seconds')}\n")
        self.quiet = quiet

    def __call__(self, msg: str) -> None:
        self.fh.write(msg + "\n")
        self.fh.flush()
        if not self.quiet:
            print(msg, flush=True)

    def close(self) -> None:
        self.fh.close()


def _model(cfg: PipelineConfig) -> SystemModel:
    return build_model(cfg.model, seed=cfg.seed)


def _need(path: Path) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"missing artifact {path}; run the earlier stage first")
    return path


def _json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# stages

def cmd_sample(cfg: PipelineConfig, log: Log, emit_plots: bool = False) -> int:
    model = _model(cfg)
    mc = cfg.mcvstem
    pts = draw_samples(mc, model, stream(cfg.seed, "sampling"))
    log(f"sampling {mc.n_samples} points, mode {mc.mode}, L_m {mc.L_m}, grid {len(mc.alphas)}x{len(mc.epsilons)}")

    def show(row):
        log(f"  alpha {row['alpha']:.4g} eps {row['eps']:.4g}: {row['status']} J {row['J']:.6g}")

    res = line_search(mc, model, pts, progress=show)
    save_sample_set(res.samples, cfg.out / "samples")
    write_surface_csv(res, cfg.out / "surface.csv")
    s = res.samples
    feasible = sum(r["status"].startswith("optimal") for r in res.surface)
    summary = {"alpha": res.alpha, "eps": res.eps, "J": s.J, "bound": s.bound, "nu": s.nu, "chi": s.chi,
               "interior": is_interior(res), "feasible_points": feasible, "grid_points": len(res.surface)}
    log(f"argmin alpha* {res.alpha:.4g} eps* {res.eps:.4g} J* {s.J:.6g} bound {s.bound:.6g} "
        f"({feasible}/{len(res.surface)} feasible, interior={summary['interior']})")
    if cfg.ncm is not None:
        ncm_cfg = dataclasses.replace(mc, L_m=float(cfg.ncm.get("L_m", 0.0)))
        ncm = sample_metrics(ncm_cfg, model, res.alpha, res.eps, pts)
        if isinstance(ncm, Infeasible):
            log(f"NCM baseline infeasible at the optimizer: {ncm.message}")
        else:
            save_sample_set(ncm, cfg.out / "ncm_samples")
            summary["ncm_bound"] = ncm.bound
            log(f"NCM baseline (L_m {ncm_cfg.L_m}) J {ncm.J:.6g}")
    _json(cfg.out / "sample_summary.json", summary)
    if emit_plots:
        J = res.surface_array()
        alphas = sorted({r["alpha"] for r in res.surface})
        epss = sorted({r["eps"] for r in res.surface})
        with open(cfg.out / "plot_surface.dat", "w") as fh:
            fh.write("#alpha eps J\n")
            for i, a in enumerate(alphas):
                for j, e in enumerate(epss):
                    fh.write(f"{a!r} {e!r} {J[i, j]!r}\n")
                fh.write("\n")
    return 0


def _train_one(cfg: PipelineConfig, log: Log, stem: str, ckpt: str, curves: str, stream_name: str) -> float:
    samples = load_sample_set(_need(cfg.out / f"{stem}.json").with_suffix(""))
    model = _model(cfg)

    def show(row):
        if row["epoch"] % 10 == 0:
            log(f"  epoch {row['epoch']} loss {row['loss']:.4g} test error {row['test_error']:.4g}")

    result = train(samples, model.box, cfg.mcvstem.L_m, cfg.train, stream(cfg.seed, stream_name), progress=show)
    save_checkpoint(result.net, cfg.out / ckpt)
    write_curves(result.history, cfg.out / curves)
    log(f"{ckpt}: C_nn {result.net.C_nn:.4g}, m_bar {result.net.m_bar:.4g}, "
        f"final test error {result.test_error:.4g} after {len(result.history)} epochs")
    return result.test_error


def cmd_train(cfg: PipelineConfig, log: Log) -> int:
    err = _train_one(cfg, log, "samples", "net.ckpt", "curves.csv", "init")
    if cfg.ncm is not None and (cfg.out / "ncm_samples.json").exists():
        _train_one(cfg, log, "ncm_samples", "ncm_net.ckpt", "ncm_curves.csv", "init-ncm")
    target = cfg.train.stop_error
    if target is not None and not err <= target:
        log(f"warning: test error {err:.4g} above target {target}")
    return 0


def ou_check(g: float = 0.1, runs: int = 2000, horizon: float = 6.0, dt: float = 0.01, seed: int = 0,
             eps: float = 1.0) -> dict:
    """Two independently driven OU copies; steady ``E[(x1 - x2)^2]`` against ``g^2`` and the bound."""
    pair = linear_system(-np.eye(2), G=g * np.eye(2))
    steps = int(round(horizon / dt))
    xi = stream(seed, "ou").standard_normal((runs, steps, 2))
    res = simulate(pair, np.zeros((runs, 2)), steps, dt, xi)
    d2 = (res.x[:, :, 0] - res.x[:, :, 1]) ** 2
    sel = res.t >= horizon - 1.0
    emp = float(d2[:, sel].mean())
    bound = g**2 * (2.0 / eps + 1.0)
    # Euler-Maruyama bias on the stationary variance is O(dt)
    exact = g**2 / (1.0 - dt / 2.0)
    return {"empirical": emp, "analytic": g**2, "bound": bound,
            "passed": abs(emp - exact) <= 0.1 * exact and emp <= bound}


def cmd_verify(cfg: PipelineConfig, log: Log) -> int:
    model = _model(cfg)
    mc = cfg.mcvstem
    vcfg = cfg.verify
    checks = []

    def record(name, passed, **detail):
        checks.append({"name": name, "passed": bool(passed), **detail})
        log(f"  [{'PASS' if passed else 'FAIL'}] {name} {json.dumps(detail, sort_keys=True)}")

    samples = load_sample_set(_need(cfg.out / "samples.json").with_suffix(""))
    net = load_checkpoint(_need(cfg.out / "net.ckpt"))
    sn = check_normalization(net, vcfg.get("sn_tol", 1e-6))
    record("spectral-normalization", sn.passed, worst=sn.worst)
    lip = verify_lipschitz(net, model.box, mc.L_m, stream(cfg.seed, "verify"), pairs=int(vcfg.get("pairs", 2000)))
    record("lipschitz", lip.passed, measured=lip.measured, L_m=lip.L_m, slope=lip.slope, slope_bound=lip.slope_bound)
    rng = stream(cfg.seed, "verify-norm")
    X = predict_metric(net, model.box.sample(rng, 10_000), model.box.sample_params(rng, 10_000))
    trace = np.trace(X, axis1=-2, axis2=-1)
    record("output-trace", float(trace.max()) <= net.m_bar + 1e-9, max_trace=float(trace.max()), m_bar=net.m_bar)
    # re-draw the sample set and check the stored optimizer against its own LMIs
    pts = draw_samples(mc, model, stream(cfg.seed, "sampling"))
    lin = linearize(mc, model, pts)
    consts = bound_constants(mc.mode, model.bounds, mc.L_m, samples.alpha, samples.eps)
    problem = build_problem(mc, lin, pts, consts)
    aux = [_aux_value(mc, samples.nu, lin)] if problem.layout.n_aux else ()
    y = problem.layout.pack(samples.nu, samples.nu_c, samples.chi, samples.W_bar, aux=aux)
    tol = mc.feastol if samples.accuracy == "full" else 1e-6
    feas = check_feasibility(problem, y, tol)
    record("lmi-feasibility", feas.feasible, worst=feas.worst, tol=tol)
    eig = np.linalg.eigvalsh(samples.W_bar)
    record("metric-range", eig.min() >= 1 - 1e-6 and eig.max() <= samples.chi + 1e-6,
           min_eig=float(eig.min()), max_eig=float(eig.max()), chi=samples.chi)
    ou = ou_check(seed=cfg.seed, runs=int(vcfg.get("ou_runs", 2000)))
    record("ou-oracle", ou["passed"], **{k: v for k, v in ou.items() if k != "passed"})
    ok = all(c["passed"] for c in checks)
    _json(cfg.out / "verify.json", {"passed": ok, "checks": checks})
    log("verification " + ("passed" if ok else "FAILED"))
    return 0 if ok else 1


def _policies(cfg: PipelineConfig, kinds) -> list:
    specs = []
    for kind in kinds:
        art = POLICY_ARTIFACTS.get(kind)
        if art is not None:
            path = cfg.out / art
            _need(path.with_suffix(".json") if kind == "metric-table" else path)
            art = str(path)
        specs.append(PolicySpec(kind, kind, art))
    return specs


def cmd_compare(cfg: PipelineConfig, log: Log, kinds, subdir: str, emit_plots: bool = False) -> int:
    model = _model(cfg)
    samples = load_sample_set(_need(cfg.out / "samples.json").with_suffix(""))
    specs = _policies(cfg, kinds)
    out = cfg.out / subdir
    ex = cfg.experiment
    log(f"{subdir}: {len(specs)} policies, {ex.runs} runs, horizon {ex.horizon}, dt {ex.dt}, bound {samples.bound:.6g}")
    reports = run_comparison(model, ex, specs, bound=samples.bound, out_dir=out, progress=log)
    for rep in reports.values():
        flag = "VIOLATES" if rep.violated else "within"
        log(f"  {rep.name:>13}: steady MSE {rep.mse:.4g} {flag} bound {rep.bound:.4g}, "
            f"{len(rep.diverged_runs)} diverged")
    if emit_plots:
        write_plot_data(reports, out / "plot_errors.dat", every=ex.trace_every)
    return 0


# ---------------------------------------------------------------------------
# entry point

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nscm", description=__doc__.splitlines()[0])
    p.add_argument("--config", required=True, help="pipeline TOML file")
    p.add_argument("--stage", choices=STAGES, default="all")
    p.add_argument("--seed", type=int, help="override the global seed")
    p.add_argument("--out", help="override the output directory")
    p.add_argument("--grid-override", help='line-search grid, e.g. "alphas=0.2,0.4;epsilons=1,3.3"')
    p.add_argument("--policies", help="comma-separated policy kinds for simulate/compare")
    p.add_argument("--emit-plots", action="store_true", help="write gnuplot-ready data files")
    p.add_argument("--quiet", action="store_true")
    return p


def load_pipeline(args) -> PipelineConfig:
    path = Path(args.config)
    if not path.exists():
        raise ConfigurationError(f"config file {path} not found")
    try:
        raw = load_toml(path)
    except Exception as exc:  # tomllib raises its own decode error type
        raise ConfigurationError(f"{path}: {exc}") from None
    cfg = parse_config(raw, path.parent)
    if args.seed is not None:
        cfg = with_seed(cfg, args.seed)
    if args.out is not None:
        cfg = dataclasses.replace(cfg, out=Path(args.out))
    if args.grid_override:
        a, e = parse_grid_override(args.grid_override)
        cfg = dataclasses.replace(cfg, mcvstem=cfg.mcvstem.with_grid(a or cfg.mcvstem.alphas,
                                                                     e or cfg.mcvstem.epsilons))
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = load_pipeline(args)
        kinds = tuple(k.strip() for k in args.policies.split(",")) if args.policies else None
        if kinds:
            for k in kinds:
                PolicySpec(k, k, POLICY_ARTIFACTS.get(k))
    except (ConfigurationError, UsageError) as exc:
        print(f"nscm: configuration error: {exc}", file=sys.stderr)
        return 2
    log = Log(cfg.out, args.quiet)
    stages = ("sample", "train", "verify", "compare") if args.stage == "all" else (args.stage,)
    try:
        for stage in stages:
            log(f"== {stage}")
            if stage == "sample":
                code = cmd_sample(cfg, log, args.emit_plots)
            elif stage == "train":
                code = cmd_train(cfg, log)
            elif stage == "verify":
                code = cmd_verify(cfg, log)
            elif stage == "simulate":
                code = cmd_compare(cfg, log, kinds or cfg.policies[:1], "simulate", args.emit_plots)
            else:
                code = cmd_compare(cfg, log, kinds or cfg.policies, "compare", args.emit_plots)
            if code:
                return code
    except (ConfigurationError, FileNotFoundError, CheckpointError, UsageError) as exc:
        log(f"error: {exc}")
        print(f"nscm: {exc}", file=sys.stderr)
        return 2
    except (NoFeasibleMetricError, CertificateError, TrainingError, VerificationError) as exc:
        log(f"error: {exc}")
        print(f"nscm: {exc}", file=sys.stderr)
        return 1
    finally:
        log.close()
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
