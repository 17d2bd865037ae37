"""Assembly of contraction-metric LMIs over a flat decision vector.

Every constraint is stored in the canonical form ``F0 + sum_k y_k F_k <= 0``
(negative semidefinite).  The decision vector is laid out as::

    [nu, nu_c, chi, aux..., vech(Wbar_0), ..., vech(Wbar_{N-1})]

where ``vech`` lists the upper triangle row by row.  Auxiliary scalars carry
the cubic coupling ``nu^3 <= nu_c`` and the optional control-effort cost.
"""

from __future__ import annotations

import dataclasses
import functools
import io
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .dynamics import ConfigurationError

WDOT_MODES = ("zero", "backward-difference", "sufficient-bound")
NU, NU_C, CHI = 0, 1, 2


class AssemblyError(ValueError):
    """Raised when an LMI block would not be symmetric or well-formed."""


@functools.lru_cache(maxsize=None)
def sym_basis(n: int) -> np.ndarray:
    """Basis of symmetric n x n matrices matching the ``vech`` ordering.

    Examples
    --------
    >>> sym_basis(2)[1]
    array([[0., 1.],
           [1., 0.]])
    """
    rows, cols = np.triu_indices(n)
    E = np.zeros((rows.size, n, n))
    k = np.arange(rows.size)
    E[k, rows, cols] = 1.0
    E[k, cols, rows] = 1.0
    E.setflags(write=False)
    return E


def vech(W: np.ndarray) -> np.ndarray:
    W = np.asarray(W, dtype=float)
    r, c = np.triu_indices(W.shape[-1])
    return W[..., r, c]


def unvech(v: np.ndarray, n: int) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    r, c = np.triu_indices(n)
    W = np.zeros(v.shape[:-1] + (n, n))
    W[..., r, c] = v
    W[..., c, r] = v
    return W


@dataclasses.dataclass(frozen=True)
class DecisionLayout:
    """Index bookkeeping for ``(nu, nu_c, chi, aux, {Wbar_i})``.

    ``ordered`` marks samples taken along a trajectory with uniform step, the
    only case in which backward differences of ``Wbar`` make sense.
    """

    n: int
    n_samples: int
    n_aux: int = 0
    ordered: bool = False

    def __post_init__(self):
        if self.n < 1 or self.n_samples < 1 or self.n_aux < 0:
            raise ConfigurationError("layout needs n >= 1, at least one sample and n_aux >= 0")

    nu = NU
    nu_c = NU_C
    chi = CHI

    @property
    def n_tri(self) -> int:
        return self.n * (self.n + 1) // 2

    @property
    def w_start(self) -> int:
        return 3 + self.n_aux

    @property
    def length(self) -> int:
        return self.w_start + self.n_samples * self.n_tri

    def aux(self, k: int) -> int:
        if not 0 <= k < self.n_aux:
            raise IndexError(f"aux index {k} out of range")
        return 3 + k

    def w_offset(self, i: int) -> int:
        if not 0 <= i < self.n_samples:
            raise IndexError(f"sample index {i} out of range")
        return self.w_start + i * self.n_tri

    def w_matrix(self, y: np.ndarray, i: int) -> np.ndarray:
        o = self.w_offset(i)
        return unvech(y[o:o + self.n_tri], self.n)

    def w_matrices(self, y: np.ndarray) -> np.ndarray:
        v = np.asarray(y[self.w_start:], dtype=float).reshape(self.n_samples, self.n_tri)
        return unvech(v, self.n)

    def pack(self, nu: float, nu_c: float, chi: float, W: np.ndarray, aux=()) -> np.ndarray:
        y = np.zeros(self.length)
        y[:3] = nu, nu_c, chi
        y[3:self.w_start] = np.asarray(aux, dtype=float).reshape(self.n_aux)
        y[self.w_start:] = vech(np.asarray(W, dtype=float).reshape(self.n_samples, self.n, self.n)).ravel()
        return y


class Affine:
    """Affine matrix expression ``const + sum_k y_k coeffs[k]``."""

    __slots__ = ("const", "coeffs")

    def __init__(self, const: np.ndarray, coeffs: Mapping[int, np.ndarray] | None = None):
        self.const = np.asarray(const, dtype=float)
        self.coeffs = dict(coeffs or {})

    @classmethod
    def zeros(cls, d: int) -> "Affine":
        return cls(np.zeros((d, d)))

    @classmethod
    def variable(cls, index: int, mat: np.ndarray) -> "Affine":
        mat = np.asarray(mat, dtype=float)
        return cls(np.zeros_like(mat), {index: mat})

    @classmethod
    def sym_variable(cls, layout: DecisionLayout, i: int) -> "Affine":
        o = layout.w_offset(i)
        E = sym_basis(layout.n)
        return cls(np.zeros((layout.n, layout.n)), {o + k: E[k] for k in range(layout.n_tri)})

    @property
    def dim(self) -> int:
        return self.const.shape[0]

    def map(self, fn) -> "Affine":
        """Apply a linear map to every term; ``fn(0)`` must be 0."""
        return Affine(fn(self.const), {k: fn(v) for k, v in self.coeffs.items()})

    def __add__(self, other: "Affine") -> "Affine":
        coeffs = dict(self.coeffs)
        for k, v in other.coeffs.items():
            coeffs[k] = coeffs[k] + v if k in coeffs else v
        return Affine(self.const + other.const, coeffs)

    def __neg__(self) -> "Affine":
        return self * -1.0

    def __sub__(self, other: "Affine") -> "Affine":
        return self + (-other)

    def __mul__(self, s: float) -> "Affine":
        return self.map(lambda M: s * M)

    __rmul__ = __mul__

    def plus_const(self, M: np.ndarray) -> "Affine":
        return Affine(self.const + M, self.coeffs)

    def evaluate(self, y: np.ndarray) -> np.ndarray:
        out = self.const.copy()
        for k, v in self.coeffs.items():
            out += y[k] * v
        return out

    @staticmethod
    def bmat(rows: Sequence[Sequence["Affine | None"]]) -> "Affine":
        """Block matrix of affine expressions; ``None`` is a zero block."""
        sizes_r = [next(e.dim for e in row if e is not None) for row in rows]
        sizes_c = [next(row[j].dim for row in rows if row[j] is not None) for j in range(len(rows[0]))]
        R, C = np.cumsum([0] + sizes_r), np.cumsum([0] + sizes_c)
        const = np.zeros((R[-1], C[-1]))
        coeffs: dict[int, np.ndarray] = {}
        for a, row in enumerate(rows):
            for b, e in enumerate(row):
                if e is None:
                    continue
                const[R[a]:R[a + 1], C[b]:C[b + 1]] = e.const
                for k, v in e.coeffs.items():
                    if k not in coeffs:
                        coeffs[k] = np.zeros_like(const)
                    coeffs[k][R[a]:R[a + 1], C[b]:C[b + 1]] = v
        return Affine(const, coeffs)


def _exact_sym(M: np.ndarray, label: str) -> np.ndarray:
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise AssemblyError(f"block {label!r}: coefficient is not square, shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise AssemblyError(f"block {label!r}: non-finite coefficient")
    scale = 1.0 + np.abs(M).max(initial=0.0)
    if np.abs(M - M.T).max(initial=0.0) > 1e-12 * scale:
        raise AssemblyError(f"block {label!r}: coefficient matrix is not symmetric")
    return 0.5 * (M + M.T)


@dataclasses.dataclass(frozen=True)
class LmiBlock:
    """Constraint ``constant + sum_k y_k F_k <= 0`` (negative semidefinite)."""

    constant: np.ndarray
    terms: tuple
    label: str = ""

    def __post_init__(self):
        d = self.constant.shape[0]
        for k, F in self.terms:
            if F.shape != (d, d):
                raise AssemblyError(f"block {self.label!r}: coefficient for y[{k}] has shape {F.shape}")

    @classmethod
    def from_affine(cls, expr: Affine, label: str = "") -> "LmiBlock":
        const = _exact_sym(expr.const, label)
        terms = tuple((int(k), _exact_sym(v, label)) for k, v in sorted(expr.coeffs.items())
                      if np.any(v != 0.0))
        return cls(const, terms, label)

    @property
    def dim(self) -> int:
        return self.constant.shape[0]

    @property
    def indices(self) -> tuple:
        return tuple(k for k, _ in self.terms)

    def evaluate(self, y: np.ndarray) -> np.ndarray:
        out = self.constant.copy()
        for k, F in self.terms:
            out += y[k] * F
        return out

    def max_eig(self, y: np.ndarray) -> float:
        return float(np.linalg.eigvalsh(self.evaluate(y))[-1])


@dataclasses.dataclass(frozen=True)
class LmiProblem:
    """Minimize ``objective @ y`` subject to every block being NSD.

    ``fixed`` pins decision entries that no constraint references (for
    example ``nu_c`` outside estimation mode).  ``cubic`` records the
    ``(nu, nu_c)`` pair when ``nu^3 <= nu_c`` is encoded in the blocks.
    """

    layout: DecisionLayout
    blocks: tuple
    objective: np.ndarray
    fixed: Mapping[int, float] = dataclasses.field(default_factory=dict)
    cubic: tuple | None = None

    def __post_init__(self):
        L = self.layout.length
        if self.objective.shape != (L,):
            raise AssemblyError(f"objective length {self.objective.shape} does not match layout length {L}")
        for b in self.blocks:
            for k in b.indices:
                if not 0 <= k < L:
                    raise AssemblyError(f"block {b.label!r} references invalid index {k}")
        for k in self.fixed:
            if not 0 <= k < L:
                raise AssemblyError(f"fixed index {k} out of range")

    @property
    def length(self) -> int:
        return self.layout.length

    def free_indices(self) -> np.ndarray:
        return np.array([k for k in range(self.length) if k not in self.fixed], dtype=int)

    def scaled(self, factor: float) -> "LmiProblem":
        return dataclasses.replace(self, objective=self.objective * factor)


# ---------------------------------------------------------------------------
# constraint families

def wdot_term(mode: str, samples, sample_index: int, dt: float | None = None, sign: float = 1.0,
              chi=None):
    """Approximation of ``sign * dWbar/dt`` at one sample.

    ``samples`` is either a :class:`DecisionLayout` (returns an
    :class:`Affine` expression in the decision vector) or an array of
    numeric ``Wbar`` values of shape (N, n, n) (returns a matrix).

    Modes
    -----
    zero
        Time-invariant metric, contributes nothing.
    backward-difference
        ``(Wbar_i - Wbar_{i-1}) / dt`` along an ordered trajectory; the first
        sample uses the forward difference.
    sufficient-bound
        Upper bound through ``I <= Wbar_j <= chi I``: for ``sign=-1`` it is
        ``(chi - 1) I / dt`` and for ``sign=+1`` it is ``(Wbar_i - I) / dt``.

    Examples
    --------
    >>> W = np.stack([(1 + t) * np.eye(2) for t in (0.0, 0.1, 0.2)])
    >>> np.allclose(wdot_term("backward-difference", W, 2, 0.1), np.eye(2))
    True
    """
    if mode not in WDOT_MODES:
        raise ConfigurationError(f"unknown wdot mode {mode!r}; expected one of {WDOT_MODES}")
    symbolic = isinstance(samples, DecisionLayout)
    if symbolic:
        n, N = samples.n, samples.n_samples
        W = lambda j: Affine.sym_variable(samples, j)  # noqa: E731
    else:
        arr = np.asarray(samples, dtype=float)
        N, n = arr.shape[0], arr.shape[-1]
        W = lambda j: arr[j]  # noqa: E731
    if not 0 <= sample_index < N:
        raise IndexError(f"sample index {sample_index} out of range")
    if mode == "zero":
        return Affine.zeros(n) if symbolic else np.zeros((n, n))
    if dt is None or not dt > 0:
        raise ConfigurationError(f"wdot mode {mode!r} needs a positive dt")
    eye = np.eye(n)
    if mode == "backward-difference":
        if symbolic and not samples.ordered:
            raise ConfigurationError("backward-difference needs ordered trajectory samples")
        if N < 2:
            raise ConfigurationError("backward-difference needs at least two samples")
        i, j = (sample_index, sample_index - 1) if sample_index > 0 else (1, 0)
        diff = W(i) - W(j)
        return diff * (sign / dt) if symbolic else sign * diff / dt
    # sufficient-bound
    if sign < 0:
        if symbolic:
            return Affine(-eye / dt, {CHI: eye / dt}) * abs(sign)
        if chi is None:
            raise ConfigurationError("numeric sufficient-bound with sign < 0 needs chi")
        return abs(sign) * (chi - 1.0) * eye / dt
    if symbolic:
        return W(sample_index).plus_const(-eye) * (sign / dt)
    return sign * (W(sample_index) - eye) / dt


def _check_matrix(name: str, M, shape=None) -> np.ndarray:
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if not np.all(np.isfinite(M)):
        raise AssemblyError(f"{name} has non-finite entries")
    if shape is not None and M.shape != shape:
        raise AssemblyError(f"{name} has shape {M.shape}, expected {shape}")
    return M


def _bound_blocks(layout: DecisionLayout, i: int) -> list:
    n = layout.n
    W = Affine.sym_variable(layout, i)
    eye = np.eye(n)
    lower = (-W).plus_const(eye)                            # I - Wbar <= 0
    upper = W + Affine.variable(CHI, -eye)                  # Wbar - chi I <= 0
    return [LmiBlock.from_affine(lower, f"lower[{i}]"), LmiBlock.from_affine(upper, f"upper[{i}]")]


def _bordered(X: Affine, W: Affine, alpha_g: float, n: int, label: str) -> LmiBlock:
    # [[X, sqrt(a) W], [sqrt(a) W, -nu I]] <= 0  <=>  X + (a/nu) W^2 <= 0
    if alpha_g < 0:
        raise AssemblyError("noise gain alpha_g must be nonnegative")
    if alpha_g == 0:
        return LmiBlock.from_affine(X, label)
    s = float(np.sqrt(alpha_g))
    corner = Affine.variable(NU, -np.eye(n))
    return LmiBlock.from_affine(Affine.bmat([[X, s * W], [s * W, corner]]), label)


def _sym2(A: np.ndarray):
    return lambda E: A @ E + (A @ E).T


def build_control_blocks(A, B, alpha: float, alpha_gc: float, wdot_mode: str, sample_index: int,
                         layout: DecisionLayout, dt: float | None = None) -> list:
    """Control contraction blocks for one sample.

    ``-Wdot + 2 sym(A Wbar) - 2 nu B B^T + 2 alpha Wbar`` bordered by
    ``sqrt(alpha_gc) Wbar`` and ``-nu I``, plus ``I <= Wbar <= chi I``.
    """
    n = layout.n
    A = _check_matrix("A", A, (n, n))
    B = _check_matrix("B", np.reshape(B, (n, -1)))
    if not alpha > 0:
        raise AssemblyError("alpha must be positive")
    W = Affine.sym_variable(layout, sample_index)
    X = W.map(lambda E: _sym2(A)(E) + 2.0 * alpha * E)
    BB = B @ B.T
    X = X + Affine.variable(NU, -(BB + BB.T))
    X = X + wdot_term(wdot_mode, layout, sample_index, dt, sign=-1.0)
    return [_bordered(X, W, alpha_gc, n, f"control[{sample_index}]")] + _bound_blocks(layout, sample_index)


def build_estimation_blocks(A, C, C_L, alpha: float, alpha_e1: float, alpha_e2: float, wdot_mode: str,
                            sample_index: int, layout: DecisionLayout, dt: float | None = None) -> list:
    """Estimation contraction blocks for one sample.

    ``Wdot + Wbar A + A^T Wbar - nu (C_L^T C + C^T C_L) + nu alpha_e1 I
    + nu_c alpha_e2 I + 2 alpha Wbar <= 0`` plus ``I <= Wbar <= chi I``.
    The cubic coupling is added once per problem by :func:`cubic_blocks`.
    """
    n = layout.n
    A = _check_matrix("A", A, (n, n))
    C = _check_matrix("C", C)
    C_L = _check_matrix("C_L", C_L, C.shape)
    if C.shape[1] != n:
        raise AssemblyError(f"C has {C.shape[1]} columns, expected {n}")
    if not alpha > 0:
        raise AssemblyError("alpha must be positive")
    if alpha_e1 < 0 or alpha_e2 < 0:
        raise AssemblyError("alpha_e1 and alpha_e2 must be nonnegative")
    eye = np.eye(n)
    W = Affine.sym_variable(layout, sample_index)
    X = W.map(lambda E: _sym2(A.T)(E) + 2.0 * alpha * E)
    CC = C_L.T @ C
    X = X + Affine.variable(NU, alpha_e1 * eye - (CC + CC.T))
    if alpha_e2 > 0:
        X = X + Affine.variable(NU_C, alpha_e2 * eye)
    X = X + wdot_term(wdot_mode, layout, sample_index, dt, sign=1.0)
    return [LmiBlock.from_affine(X, f"estimation[{sample_index}]")] + _bound_blocks(layout, sample_index)


def build_basic_contraction_blocks(f_x, alpha: float, alpha_g: float, sample_index: int,
                                   layout: DecisionLayout, wdot_mode: str = "zero",
                                   dt: float | None = None) -> list:
    """Stochastic contraction blocks without actuation (``B = 0``)."""
    n = layout.n
    return build_control_blocks(f_x, np.zeros((n, 1)), alpha, alpha_g, wdot_mode, sample_index, layout, dt)


def cubic_blocks(layout: DecisionLayout, aux_index: int = 0) -> list:
    """Encode ``nu^3 <= nu_c`` with an auxiliary ``s``.

    ``[[s, nu], [nu, 1]] >= 0`` gives ``s >= nu^2`` and
    ``[[nu_c, s], [s, nu]] >= 0`` gives ``nu_c nu >= s^2 >= nu^4``.
    """
    s = layout.aux(aux_index)
    one = np.array([[0.0, 0.0], [0.0, -1.0]])
    b1 = Affine(one, {s: -np.diag([1.0, 0.0]), NU: -np.array([[0.0, 1.0], [1.0, 0.0]])})
    b2 = Affine(np.zeros((2, 2)), {NU_C: -np.diag([1.0, 0.0]), s: -np.array([[0.0, 1.0], [1.0, 0.0]]),
                                   NU: -np.diag([0.0, 1.0])})
    return [LmiBlock.from_affine(b1, "cubic-s"), LmiBlock.from_affine(b2, "cubic-nuc")]


def quadratic_cost_block(layout: DecisionLayout, kappa: float, aux_index: int) -> LmiBlock:
    """``t >= kappa nu^2`` as ``[[t, sqrt(kappa) nu], [sqrt(kappa) nu, 1]] >= 0``."""
    t = layout.aux(aux_index)
    r = float(np.sqrt(max(kappa, 0.0)))
    expr = Affine(np.array([[0.0, 0.0], [0.0, -1.0]]),
                  {t: -np.diag([1.0, 0.0]), NU: -r * np.array([[0.0, 1.0], [1.0, 0.0]])})
    return LmiBlock.from_affine(expr, "effort")


def positivity_block(index: int, label: str) -> LmiBlock:
    """``-y_k <= 0`` as a 1 x 1 block."""
    return LmiBlock(np.zeros((1, 1)), ((index, -np.ones((1, 1))),), label)


# ---------------------------------------------------------------------------
# text format

def format_problem(problem: LmiProblem) -> str:
    """Serialize to the sparse text format.

    Lines::

        nscm-lmi 1
        layout <n> <N> <n_aux> <ordered 0|1>
        objective <k> <value>          (nonzero entries only)
        fixed <k> <value>
        cubic <nu index> <nu_c index>
        block <label> <dim>
        <k> <i> <j> <value>            (k = -1 for the constant; i <= j)
        end
    """
    L = problem.layout
    out = io.StringIO()
    out.write("nscm-lmi 1\n")
    out.write(f"layout {L.n} {L.n_samples} {L.n_aux} {int(L.ordered)}\n")
    for k in np.flatnonzero(problem.objective):
        out.write(f"objective {k} {float(problem.objective[k])!r}\n")
    for k, v in sorted(problem.fixed.items()):
        out.write(f"fixed {k} {float(v)!r}\n")
    if problem.cubic is not None:
        out.write(f"cubic {problem.cubic[0]} {problem.cubic[1]}\n")
    for b in problem.blocks:
        label = b.label.replace(" ", "_") or "-"
        out.write(f"block {label} {b.dim}\n")
        for k, F in ((-1, b.constant),) + b.terms:
            r, c = np.nonzero(np.triu(F))
            for i, j in zip(r, c):
                out.write(f"{k} {i} {j} {float(F[i, j])!r}\n")
        out.write("end\n")
    return out.getvalue()


def parse_problem(text: str) -> LmiProblem:
    lines = iter(ln.strip() for ln in text.splitlines() if ln.strip() and not ln.startswith("#"))
    if next(lines, None) != "nscm-lmi 1":
        raise AssemblyError("not an nscm-lmi version 1 file")
    layout = None
    objective: dict[int, float] = {}
    fixed: dict[int, float] = {}
    cubic = None
    blocks = []
    for ln in lines:
        head, *rest = ln.split()
        if head == "layout":
            n, N, n_aux, ordered = map(int, rest)
            layout = DecisionLayout(n, N, n_aux, bool(ordered))
        elif head == "objective":
            objective[int(rest[0])] = float(rest[1])
        elif head == "fixed":
            fixed[int(rest[0])] = float(rest[1])
        elif head == "cubic":
            cubic = (int(rest[0]), int(rest[1]))
        elif head == "block":
            label, dim = rest[0], int(rest[1])
            mats: dict[int, np.ndarray] = {}
            for entry in lines:
                if entry == "end":
                    break
                k, i, j, v = entry.split()
                M = mats.setdefault(int(k), np.zeros((dim, dim)))
                M[int(i), int(j)] = M[int(j), int(i)] = float(v)
            const = mats.pop(-1, np.zeros((dim, dim)))
            blocks.append(LmiBlock(const, tuple(sorted(mats.items())), "" if label == "-" else label))
        else:
            raise AssemblyError(f"unknown record {head!r}")
    if layout is None:
        raise AssemblyError("missing layout record")
    c = np.zeros(layout.length)
    for k, v in objective.items():
        c[k] = v
    return LmiProblem(layout, tuple(blocks), c, fixed, cubic)


def save_problem(problem: LmiProblem, path) -> None:
    Path(path).write_text(format_problem(problem))


def load_problem(path) -> LmiProblem:
    return parse_problem(Path(path).read_text())


def assemble(layout: DecisionLayout, blocks: Iterable[LmiBlock], objective: np.ndarray,
             fixed: Mapping[int, float] | None = None, cubic: bool = False) -> LmiProblem:
    """Collect blocks into an :class:`LmiProblem`, adding ``nu > 0`` and the cubic pair."""
    blocks = list(blocks)
    fixed = dict(fixed or {})
    if NU not in fixed:
        blocks.append(positivity_block(NU, "nu>0"))
    if cubic:
        blocks.extend(cubic_blocks(layout))
        blocks.append(positivity_block(NU_C, "nu_c>0"))
    return LmiProblem(layout, tuple(blocks), np.asarray(objective, dtype=float), fixed,
                      (NU, NU_C) if cubic else None)
