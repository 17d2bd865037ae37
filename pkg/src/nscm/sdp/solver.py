"""Homogeneous self-dual interior-point method for block-diagonal LMIs.

The problem ``min c^T y  s.t.  F0_b + sum_k y_k F_kb <= 0`` is solved in the
conic form ``min c^T x  s.t.  G x + s = h,  s >= 0`` with ``h = -F0`` and the
columns of ``G`` given by the coefficient matrices.  Fixed decision entries
are folded into ``h``.  Iterates use Nesterov-Todd scaling and Mehrotra
predictor-corrector steps; the self-dual embedding (``tau``, ``kappa``)
yields infeasibility certificates instead of divergence.
"""

from __future__ import annotations

import csv
import dataclasses
from collections import defaultdict
from pathlib import Path

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from ..lmi import LmiProblem
from ._kernels import kernels

STATUSES = ("optimal", "infeasible", "unbounded", "max-iterations", "numerical-error")
DENSE_LIMIT = 400
REFINE_STEPS = 2


@dataclasses.dataclass(frozen=True)
class Tolerances:
    feastol: float = 1e-8
    reltol: float = 1e-6
    abstol: float = 1e-7
    max_iter: int = 200
    # certificate accuracy accepted when the iteration breaks down with tau -> 0
    loose_inftol: float = 1e-5
    # residual level accepted (and flagged as reduced accuracy) when the iteration breaks down
    reduced_feastol: float = 1e-6


@dataclasses.dataclass
class SolveReport:
    status: str
    y: np.ndarray
    objective: float
    margin: float
    iterations: int
    gap: float
    pres: float = np.nan
    dres: float = np.nan
    log: list = dataclasses.field(default_factory=list, repr=False)
    accuracy: str = "full"

    @property
    def optimal(self) -> bool:
        return self.status == "optimal"


@dataclasses.dataclass
class FeasibilityReport:
    block_margins: np.ndarray
    labels: tuple
    cubic_residual: float
    feasible: bool
    worst: float


@dataclasses.dataclass
class _Group:
    d: int
    F: np.ndarray        # (nb, K, d, d) coefficients of free variables
    idx: np.ndarray      # (nb, K) free indices, -1 padding
    h: np.ndarray        # (nb, d, d)
    blocks: np.ndarray   # original block positions


class _Cone:
    """Compiled problem: size groups, free-variable map, objective."""

    def __init__(self, problem: LmiProblem, use_numba=None):
        L = problem.length
        fixed = dict(problem.fixed)
        y_fixed = np.zeros(L)
        for k, v in fixed.items():
            y_fixed[k] = v
        used = set()
        for b in problem.blocks:
            used.update(k for k, _ in b.terms if k not in fixed)
        self.unused = [k for k in range(L) if k not in fixed and k not in used]
        self.free = np.array(sorted(used), dtype=np.int64)
        remap = -np.ones(L, dtype=np.int64)
        remap[self.free] = np.arange(self.free.size)
        self.y_fixed = y_fixed
        self.c = problem.objective[self.free].astype(float)
        self.c_unused = problem.objective[self.unused] if self.unused else np.zeros(0)
        self.L = L

        by_dim = defaultdict(list)
        for pos, b in enumerate(problem.blocks):
            by_dim[b.dim].append(pos)
        self.groups = []
        for d in sorted(by_dim):
            pos = by_dim[d]
            K = max(1, max(sum(1 for k, _ in problem.blocks[p].terms if k not in fixed) for p in pos))
            F = np.zeros((len(pos), K, d, d))
            idx = -np.ones((len(pos), K), dtype=np.int64)
            h = np.zeros((len(pos), d, d))
            for r, p in enumerate(pos):
                blk = problem.blocks[p]
                h[r] = -blk.constant
                j = 0
                for k, M in blk.terms:
                    if k in fixed:
                        h[r] -= fixed[k] * M
                    else:
                        F[r, j] = M
                        idx[r, j] = remap[k]
                        j += 1
            self.groups.append(_Group(d, F, idx, h, np.array(pos)))
        self.n = self.free.size
        self.degree = sum(g.F.shape[0] * g.d for g in self.groups)
        self._scatter, self._gather, self._congruence = kernels(use_numba)

        # sparsity pattern of the scaled constraint matrix (vech rows, free columns)
        rows, cols, self._tri = [], [], []
        off = 0
        for g in self.groups:
            nb, K = g.idx.shape
            r, cc = np.triu_indices(g.d)
            t = r.size
            self._tri.append((r, cc, np.where(r == cc, 1.0, np.sqrt(2.0))))
            base = off + np.arange(nb)[:, None, None] * t + np.arange(t)[None, None, :]
            rows.append(np.broadcast_to(base, (nb, K, t)).ravel())
            cols.append(np.broadcast_to(g.idx[:, :, None], (nb, K, t)).ravel())
            off += nb * t
        self.q = off
        rows, cols = np.concatenate(rows), np.concatenate(cols)
        self._mask = cols >= 0
        self._rows, self._cols = rows[self._mask], cols[self._mask]

    # cone-vector helpers (lists of (nb, d, d) arrays)
    def G(self, x):
        return [self._scatter(g.F, g.idx, x) for g in self.groups]

    def GT(self, Z):
        out = np.zeros(self.n)
        for g, z in zip(self.groups, Z):
            self._gather(g.F, g.idx, np.ascontiguousarray(z), out)
        return out

    def h(self):
        return [g.h for g in self.groups]

    def vech(self, V):
        return np.concatenate([(v[:, r, c] * w).ravel() for v, (r, c, w) in zip(V, self._tri)])

    def unvech(self, u):
        out, off = [], 0
        for g, (r, c, w) in zip(self.groups, self._tri):
            nb, t = g.F.shape[0], r.size
            vals = u[off:off + nb * t].reshape(nb, t) / w
            M = np.zeros((nb, g.d, g.d))
            M[:, r, c] = vals
            M[:, c, r] = vals
            out.append(M)
            off += nb * t
        return out

    def scaled_matrix(self, Q):
        """Sparse ``vech(Q^T F_k Q)`` columns, shape (q, n)."""
        data = np.concatenate([
            (self._congruence(g.F, np.ascontiguousarray(qq))[..., r, c] * w).ravel()
            for g, qq, (r, c, w) in zip(self.groups, Q, self._tri)])
        return sp.csc_matrix((data[self._mask], (self._rows, self._cols)), shape=(self.q, self.n))

    def full_y(self, x):
        y = self.y_fixed.copy()
        y[self.free] = x
        return y


def _dot(A, B):
    return float(sum(np.sum(a * b) for a, b in zip(A, B)))


def _norm(A):
    return np.sqrt(_dot(A, A))


def _axpy(a, X, Y):
    return [a * x + y for x, y in zip(X, Y)]


def _sym(M):
    return 0.5 * (M + np.swapaxes(M, -1, -2))


def _diag(lam):
    return [np.einsum("bi,ij->bij", l, np.eye(l.shape[1])) for l in lam]


def _nt_scaling(Ls, Lz):
    """NT scaling from factors ``s = Ls Ls^T``, ``z = Lz Lz^T``."""
    R, Rit, lam = [], [], []
    for ls, lz in zip(Ls, Lz):
        U, S, Vt = np.linalg.svd(np.swapaxes(lz, -1, -2) @ ls)
        isq = 1.0 / np.sqrt(S)
        R.append(ls @ np.swapaxes(Vt, -1, -2) * isq[:, None, :])
        Rit.append(lz @ U * isq[:, None, :])
        lam.append(S)
    return R, Rit, lam


def _max_step(lam, D):
    """Largest t with ``diag(lam) + t D >= 0`` over all blocks."""
    worst = 0.0
    for l, d in zip(lam, D):
        isq = 1.0 / np.sqrt(l)
        M = d * isq[:, :, None] * isq[:, None, :]
        worst = max(worst, float(-np.linalg.eigvalsh(_sym(M))[:, 0].min()))
    return np.inf if worst <= 0 else 1.0 / worst


class _Kkt:
    """Factorization of the scaled augmented system.

    Solves ``G^T dz = bx``, ``G dx - W^T W dz = bz`` through
    ``[[0, Gh^T], [Gh, -I]] [dx; u] = [bx; vech(Q^T bz Q)]`` with
    ``Gh = vech(Q^T G Q)`` and ``dz = Q unvech(u) Q^T``, avoiding the
    squared conditioning of the normal equations.  Columns of ``Gh`` are
    equilibrated.
    """

    def __init__(self, cone: _Cone, Q):
        self.cone, self.Q = cone, Q
        Gh = cone.scaled_matrix(Q)
        norms = np.sqrt(np.asarray(Gh.multiply(Gh).sum(axis=0)).ravel())
        if not np.all(norms > 0):
            raise np.linalg.LinAlgError("constraint matrix lost rank")
        self.dcol = 1.0 / norms
        Gh = (Gh @ sp.diags(self.dcol)).tocsc()
        n, q = cone.n, cone.q
        K = sp.bmat([[sp.csc_matrix((n, n)), Gh.T], [Gh, -sp.identity(q)]], format="csc")
        if n + q <= DENSE_LIMIT:
            lu = sla.lu_factor(K.toarray(), check_finite=True)
            self._solve = lambda b: sla.lu_solve(lu, b)
        else:
            lu = spla.splu(K, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.1)
            self._solve = lu.solve

    def solve(self, bx, bz):
        cone, Q = self.cone, self.Q
        w = cone.vech([np.swapaxes(qq, -1, -2) @ v @ qq for qq, v in zip(Q, bz)])
        sol = self._solve(np.concatenate([self.dcol * bx, w]))
        if not np.all(np.isfinite(sol)):
            raise np.linalg.LinAlgError("singular KKT system")
        dx = self.dcol * sol[:cone.n]
        dz = [qq @ u @ np.swapaxes(qq, -1, -2) for qq, u in zip(Q, cone.unvech(sol[cone.n:]))]
        return dx, dz


def _margins(cone: _Cone, x):
    """Max eigenvalue of each block at free vector ``x`` (positive = violated)."""
    out = np.empty(sum(g.F.shape[0] for g in cone.groups))
    Gx = cone.G(x)
    for g, v in zip(cone.groups, Gx):
        out[g.blocks] = np.linalg.eigvalsh(_sym(v - g.h))[:, -1]
    return out


def _report(cone, status, x, tau, it, gap, pres, dres, log):
    xh = x / tau if tau > 0 else x
    y = cone.full_y(xh)
    margins = _margins(cone, xh)
    worst = float(margins.max()) if margins.size else 0.0
    return SolveReport(status, y, float(cone.c @ xh), worst, it, float(gap), float(pres), float(dres), log)


def solve(problem: LmiProblem, tol: Tolerances | None = None, log_path=None, use_numba=None) -> SolveReport:
    """Solve an :class:`LmiProblem`.

    Returns a :class:`SolveReport`; ``status == "optimal"`` guarantees every
    block's largest eigenvalue is at most ``tol.feastol`` and the relative
    gap (or absolute gap) is within tolerance.  When the iteration breaks
    down after an iterate already met those conditions with residuals
    below ``tol.reduced_feastol``, that iterate is returned as optimal with
    ``accuracy == "reduced"``; otherwise breakdown of the scaling or of the
    linear solves gives ``"numerical-error"`` with the last iterate.
    """
    tol = tol or Tolerances()
    cone = _Cone(problem, use_numba)
    if cone.unused and np.any(cone.c_unused != 0):
        return SolveReport("unbounded", cone.full_y(np.zeros(cone.n)), -np.inf, np.nan, 0, np.nan)
    if cone.n == 0:
        m = _margins(cone, np.zeros(0))
        status = "optimal" if m.max(initial=0.0) <= tol.feastol else "infeasible"
        return SolveReport(status, cone.full_y(np.zeros(0)), 0.0, float(m.max(initial=0.0)), 0, 0.0)

    c = cone.c
    h = cone.h()
    resx0 = max(1.0, np.linalg.norm(c))
    resz0 = max(1.0, _norm(h))
    eye = [np.broadcast_to(np.eye(g.d), g.h.shape) for g in cone.groups]
    log = []

    # least-squares start
    try:
        K0 = _Kkt(cone, eye)
        x, zh = K0.solve(np.zeros(cone.n), h)
        _, z = K0.solve(-c, [np.zeros_like(v) for v in h])
    except (np.linalg.LinAlgError, RuntimeError):
        return SolveReport("numerical-error", cone.full_y(np.zeros(cone.n)), np.nan, np.nan, 0, np.nan)
    s = [-v for v in zh]

    def shift(V):
        a = max(float(-np.linalg.eigvalsh(_sym(v))[:, 0].min()) for v in V)
        if a >= -1e-8 * max(_norm(V), 1.0):
            return [v + (1.0 + a) * e for v, e in zip(V, eye)]
        return V

    s, z = shift(s), shift(z)
    tau, kappa = 1.0, 1.0
    try:
        R, Rit, lam = _nt_scaling([np.linalg.cholesky(_sym(v)) for v in s],
                                  [np.linalg.cholesky(_sym(v)) for v in z])
    except np.linalg.LinAlgError:
        return SolveReport("numerical-error", cone.full_y(x), np.nan, np.nan, 0, np.nan)

    gap = pres = dres = np.nan
    fallback = None
    for it in range(tol.max_iter + 1):
        rx = cone.GT(z) + c * tau
        Gx = cone.G(x)
        rz = [a + b - tau * hh for a, b, hh in zip(Gx, s, h)]
        cx, hz = float(c @ x), _dot(h, z)
        rt = cx + hz + kappa
        gap_raw = _dot(s, z)
        pres = _norm(rz) / tau / resz0
        dres = np.linalg.norm(rx) / tau / resx0
        pcost, dcost = cx / tau, -hz / tau
        gap = gap_raw / tau**2
        if pcost < 0:
            relgap = gap / -pcost
        elif dcost > 0:
            relgap = gap / dcost
        else:
            relgap = np.inf
        log.append({"iter": it, "pcost": pcost, "dcost": dcost, "gap": gap, "pres": pres, "dres": dres,
                    "tau": tau, "kappa": kappa})

        gap_ok = gap <= tol.abstol or relgap <= tol.reltol
        if gap_ok and max(pres, dres) <= tol.reduced_feastol:
            margin = float(_margins(cone, x / tau).max())
            if margin <= tol.feastol:
                if max(pres, dres) <= tol.feastol:
                    return _finish(_report(cone, "optimal", x, tau, it, gap, pres, dres, log), log_path)
                if fallback is None or max(pres, dres) < fallback[0]:
                    fallback = (max(pres, dres), x.copy(), tau, it, gap, pres, dres)
        pinf = np.linalg.norm(cone.GT(z)) / resx0 / -hz if hz < 0 else np.inf
        dinf = _norm([a + b for a, b in zip(Gx, s)]) / resz0 / -cx if cx < 0 else np.inf
        if pinf <= tol.feastol:
            return _finish(SolveReport("infeasible", cone.full_y(x / tau), np.nan, np.nan, it, np.nan,
                                       pres, dres, log), log_path)
        if dinf <= tol.feastol:
            return _finish(SolveReport("unbounded", cone.full_y(x / tau), -np.inf, np.nan, it, np.nan,
                                       pres, dres, log), log_path)

        def breakdown():
            if fallback is not None:
                # best verified iterate: blocks feasible, gap met, residuals only at reduced accuracy
                _, xb, tb, ib, gb, pb, db = fallback
                rep = _report(cone, "optimal", xb, tb, ib, gb, pb, db, log)
                rep.accuracy = "reduced"
                return _finish(rep, log_path)
            # near-certificates are trusted once tau has collapsed relative to kappa
            if tau <= 1e-6 * kappa:
                for status, val in (("infeasible", pinf), ("unbounded", dinf)):
                    if val <= tol.loose_inftol:
                        obj = np.nan if status == "infeasible" else -np.inf
                        return _finish(SolveReport(status, cone.full_y(x / tau), obj, np.nan, it, np.nan,
                                                   pres, dres, log), log_path)
            return _finish(_report(cone, "numerical-error", x, tau, it, gap, pres, dres, log), log_path)
        if it == tol.max_iter:
            break

        try:
            fac = _Kkt(cone, Rit)
        except (np.linalg.LinAlgError, RuntimeError):
            return breakdown()

        def kkt(bx, bz):
            dx, dz = fac.solve(bx, bz)
            return dx, [_sym(v) for v in dz]

        x1, z1 = kkt(-c, h)
        denom_base = float(c @ x1) + _dot(h, z1)

        tr = lambda m: np.swapaxes(m, -1, -2)  # noqa: E731
        half = [0.5 * (l[:, :, None] + l[:, None, :]) for l in lam]

        def newton(b1, b2, b3, b4, b5):
            # Gt dz + c dtau = b1;  G dx + R dst Rt - h dtau = b2;  c'dx + h'dz + dkappa = b3
            # lam o (dst + Rt dz R) = b4;  kappa dtau + tau dkappa = b5
            r_s = [v / hf for v, hf in zip(b4, half)]
            bz = [u - r @ v @ tr(r) for u, r, v in zip(b2, R, r_s)]
            a, b = kkt(b1, bz)
            dtau = (b3 - b5 / tau - float(c @ a) - _dot(h, b)) / (denom_base - kappa / tau)
            dx = a + dtau * x1
            dz = _axpy(dtau, z1, b)
            dkappa = (b5 - kappa * dtau) / tau
            dzt = [_sym(tr(r) @ v @ r) for r, v in zip(R, dz)]
            dst = [u - v for u, v in zip(r_s, dzt)]
            return dx, dz, dtau, dkappa, dst, dzt

        def residual(b, d):
            dx, dz, dtau, dkappa, dst, dzt = d
            e1 = b[0] - cone.GT(dz) - c * dtau
            e2 = [u - g - r @ v @ tr(r) + dtau * hh for u, g, r, v, hh in zip(b[1], cone.G(dx), R, dst, h)]
            e3 = b[2] - float(c @ dx) - _dot(h, dz) - dkappa
            e4 = [u - hf * (v + w) for u, hf, v, w in zip(b[3], half, dst, dzt)]
            e5 = b[4] - kappa * dtau - tau * dkappa
            return e1, e2, e3, e4, e5

        def direction(rs_rhs, rk_rhs, eta):
            b = (-eta * rx, [-eta * v for v in rz], -eta * rt, rs_rhs, rk_rhs)
            d = newton(*b)
            for _ in range(REFINE_STEPS):
                e = newton(*residual(b, d))
                d = (d[0] + e[0], _axpy(1.0, e[1], d[1]), d[2] + e[2], d[3] + e[3],
                     _axpy(1.0, e[4], d[4]), _axpy(1.0, e[5], d[5]))
            return d

        def step_len(dst, dzt, dtau, dkappa):
            t = min(_max_step(lam, dst), _max_step(lam, dzt))
            if dtau < 0:
                t = min(t, -tau / dtau)
            if dkappa < 0:
                t = min(t, -kappa / dkappa)
            return t

        lam2 = [np.einsum("bi,ij->bij", l**2, np.eye(l.shape[1])) for l in lam]
        mu = (sum(float(np.sum(l**2)) for l in lam) + tau * kappa) / (cone.degree + 1)
        try:
            pa = direction([-v for v in lam2], -tau * kappa, 1.0)
            alpha_a = min(1.0, step_len(pa[4], pa[5], pa[2], pa[3]))
            sigma = (1.0 - alpha_a) ** 3
            corr = [_sym(a @ b) for a, b in zip(pa[4], pa[5])]
            rs_rhs = [-v - w + sigma * mu * e for v, w, e in zip(lam2, corr, eye)]
            rk_rhs = -tau * kappa - pa[2] * pa[3] + sigma * mu
            dx, dz, dtau, dkappa, dst, dzt = direction(rs_rhs, rk_rhs, 1.0 - sigma)
            step = min(1.0, 0.99 * step_len(dst, dzt, dtau, dkappa))
        except (np.linalg.LinAlgError, ValueError, FloatingPointError):
            return breakdown()
        log[-1]["step"] = step
        log[-1]["sigma"] = sigma
        if not np.isfinite(step) or step < 1e-12:
            return breakdown()

        x = x + step * dx
        tau += step * dtau
        kappa += step * dkappa
        Ld = _diag(lam)
        St = [l + step * v for l, v in zip(Ld, dst)]
        Zt = [l + step * v for l, v in zip(Ld, dzt)]
        try:
            Ls = [r @ np.linalg.cholesky(_sym(v)) for r, v in zip(R, St)]
            Lz = [ri @ np.linalg.cholesky(_sym(v)) for ri, v in zip(Rit, Zt)]
        except np.linalg.LinAlgError:
            return breakdown()
        R, Rit, lam = _nt_scaling(Ls, Lz)
        s = [r * l[:, None, :] @ np.swapaxes(r, -1, -2) for r, l in zip(R, lam)]
        z = [ri * l[:, None, :] @ np.swapaxes(ri, -1, -2) for ri, l in zip(Rit, lam)]

    return breakdown() if fallback is not None else \
        _finish(_report(cone, "max-iterations", x, tau, tol.max_iter, gap, pres, dres, log), log_path)


def _finish(report: SolveReport, log_path):
    if log_path is not None and report.log:
        keys = ["iter", "pcost", "dcost", "gap", "pres", "dres", "tau", "kappa", "step", "sigma"]
        with open(Path(log_path), "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=keys)
            w.writeheader()
            for row in report.log:
                w.writerow({k: row.get(k, "") for k in keys})
    return report


def check_feasibility(problem: LmiProblem, point, tol: float = 1e-8) -> FeasibilityReport:
    """Evaluate every block at ``point`` (full decision vector).

    Margins are the largest block eigenvalues (positive means violated);
    ``cubic_residual`` is ``nu^3 - nu_c`` when that coupling is registered.
    """
    y = np.asarray(point, dtype=float)
    if y.shape != (problem.length,):
        raise ValueError(f"point has shape {y.shape}, expected ({problem.length},)")
    margins = np.array([b.max_eig(y) for b in problem.blocks])
    cubic = 0.0
    if problem.cubic is not None:
        i, j = problem.cubic
        cubic = float(y[i] ** 3 - y[j])
    worst = float(max(margins.max(initial=-np.inf), cubic if problem.cubic else -np.inf))
    feasible = bool(margins.max(initial=-np.inf) <= tol and cubic <= tol)
    return FeasibilityReport(margins, tuple(b.label for b in problem.blocks), cubic, feasible, worst)
