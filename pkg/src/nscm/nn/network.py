"""Spectrally-normalized tanh MLP modelling the Cholesky code of a metric field.

The network is ``T_{L+1} o tanh o T_L o ... o tanh o T_1`` with effective
weights ``W_l = C_nn Omega_l / ||Omega_l||`` on the hidden layers and
``W_{L+1} = sqrt(m_bar / N_units) Omega_{L+1} / ||Omega_{L+1}||`` on the
bias-free output layer, so that ``||theta|| <= sqrt(m_bar)`` and the decoded
metric obeys ``||X|| <= m_bar``.

Inputs ``z = (x, p)`` are centred and scaled by factors no larger than one
before entering the first layer; this can only shrink derivatives, so the
certificate carries over to raw coordinates.
"""

from __future__ import annotations

import dataclasses
import io
import json
import struct
from pathlib import Path

import numpy as np

from ..dynamics import StateBox
from .cholesky import cholesky_decode, code_length
from .spectral import power_iteration, spectral_norm

MAGIC = b"NSCMNET1\n"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclasses.dataclass
class SnMlp:
    """Effective (already normalized) weights plus architecture metadata.

    ``weights[l]`` has shape (out, in); ``biases`` belong to the hidden
    layers only.
    """

    n: int
    n_state: int
    n_params: int
    widths: tuple
    C_nn: float
    m_bar: float
    weights: list
    biases: list
    shift: np.ndarray
    scale: np.ndarray
    meta: dict = dataclasses.field(default_factory=dict)

    @property
    def L(self) -> int:
        return len(self.widths)

    @property
    def n_in(self) -> int:
        return self.n_state + self.n_params

    @property
    def n_out(self) -> int:
        return code_length(self.n)

    @property
    def n_units(self) -> int:
        return self.widths[-1]

    @property
    def out_norm(self) -> float:
        return float(np.sqrt(self.m_bar / self.n_units))

    def inputs(self, x, p=None) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if self.n_params:
            p = np.zeros((x.shape[0], self.n_params)) if p is None else np.asarray(p, dtype=float)
            p = np.broadcast_to(np.atleast_2d(p), (x.shape[0], self.n_params))
            x = np.concatenate([x, p], axis=1)
        return (x - self.shift) * self.scale

    def forward(self, z, keep: bool = False):
        """Network output for normalized inputs ``z`` (rows); optionally the activations."""
        acts = [z]
        h = z
        for W, b in zip(self.weights[:-1], self.biases):
            h = np.tanh(h @ W.T + b)
            acts.append(h)
        out = h @ self.weights[-1].T
        return (out, acts) if keep else out

    def theta(self, x, p=None) -> np.ndarray:
        return self.forward(self.inputs(x, p))

    def sn_norms(self) -> np.ndarray:
        return np.array([spectral_norm(W) for W in self.weights])

    def sn_targets(self) -> np.ndarray:
        return np.array([self.C_nn] * self.L + [self.out_norm])

    def first_derivative_bound(self) -> float:
        """``sqrt(m_bar) C_nn^L``; dominates the slope of ``theta`` in the inputs."""
        return float(np.sqrt(self.m_bar) * self.C_nn**self.L)


def init_raw_weights(n_in: int, widths, n_out: int, rng: np.random.Generator) -> tuple[list, list]:
    """Gaussian raw weights (scaled by fan-in) and zero hidden biases."""
    dims = [n_in, *widths, n_out]
    omegas = [rng.standard_normal((dims[i + 1], dims[i])) / np.sqrt(dims[i]) for i in range(len(dims) - 1)]
    biases = [np.zeros(w) for w in widths]
    return omegas, biases


def input_normalization(box: StateBox) -> tuple[np.ndarray, np.ndarray]:
    """Centre of the (state, parameter) box and scale ``min(1, 1 / half-width)``."""
    empty = np.zeros(0)
    lo = np.concatenate([box.lower, empty if box.param_lower is None else box.param_lower])
    hi = np.concatenate([box.upper, empty if box.param_upper is None else box.param_upper])
    half = 0.5 * (hi - lo)
    scale = np.where(half > 1.0, 1.0 / np.where(half > 0, half, 1.0), 1.0)
    return 0.5 * (hi + lo), scale


def predict_metric(net: SnMlp, x, p=None, box: StateBox | None = None, return_flag: bool = False):
    """Decoded metric-field matrix at ``(x, p)``; stacks for 2-D ``x``.

    With ``box`` and ``return_flag`` also returns a boolean mask marking
    extrapolated inputs.
    """
    x_arr = np.asarray(x, dtype=float)
    X = cholesky_decode(net.theta(x_arr, p))
    if x_arr.ndim == 1:
        X = X[0]
    if not return_flag:
        return X
    xs = np.atleast_2d(x_arr)
    if box is None:
        outside = np.zeros(xs.shape[0], dtype=bool)
    else:
        outside = np.any((xs < box.lower) | (xs > box.upper), axis=1)
    return X, outside


# ---------------------------------------------------------------------------
# checkpoints: MAGIC, uint64 header length, JSON header, float64 weights (little endian)

def _header(net: SnMlp) -> dict:
    shapes = [list(W.shape) for W in net.weights] + [[b.size] for b in net.biases]
    return {"format": "nscm-snmlp", "version": FORMAT_VERSION, "n": net.n, "n_state": net.n_state,
            "n_params": net.n_params, "widths": list(net.widths), "C_nn": net.C_nn, "m_bar": net.m_bar,
            "activation": "tanh", "shapes": shapes, "shift": [float(v) for v in net.shift],
            "scale": [float(v) for v in net.scale], "meta": net.meta}


def save_checkpoint(net: SnMlp, path) -> None:
    head = json.dumps(_header(net), sort_keys=True).encode()
    flat = np.concatenate([W.ravel() for W in net.weights] + [b.ravel() for b in net.biases])
    with open(Path(path), "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        fh.write(flat.astype("<f8").tobytes())


def load_checkpoint(path) -> SnMlp:
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a network checkpoint")
    buf = io.BytesIO(data[len(MAGIC):])
    try:
        (size,) = struct.unpack("<Q", buf.read(8))
        head = json.loads(buf.read(size).decode())
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    if head.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {head.get('version')}")
    flat = np.frombuffer(buf.read(), dtype="<f8").astype(float)
    shapes = head["shapes"]
    if flat.size != sum(int(np.prod(s)) for s in shapes):
        raise CheckpointError(f"{path}: weight payload has wrong length")
    arrays, k = [], 0
    for s in shapes:
        size = int(np.prod(s))
        arrays.append(flat[k:k + size].reshape(s))
        k += size
    L = len(head["widths"])
    return SnMlp(head["n"], head["n_state"], head["n_params"], tuple(head["widths"]), head["C_nn"], head["m_bar"],
                 arrays[:L + 1], arrays[L + 1:], np.array(head["shift"]), np.array(head["scale"]), head["meta"])


# ---------------------------------------------------------------------------
# verification

@dataclasses.dataclass(frozen=True)
class SnCheck:
    norms: np.ndarray
    targets: np.ndarray
    worst: float
    passed: bool


def check_normalization(net: SnMlp, tol: float = 1e-6) -> SnCheck:
    """Compare every effective weight's spectral norm with its SN target."""
    norms, targets = net.sn_norms(), net.sn_targets()
    worst = float(np.max(np.abs(norms - targets)))
    return SnCheck(norms, targets, worst, worst <= tol)


@dataclasses.dataclass(frozen=True)
class LipschitzReport:
    measured: float
    L_m: float
    slope: float
    slope_bound: float
    max_norm: float
    passed: bool


def _metric_derivatives(net: SnMlp, x, p, step: float) -> np.ndarray:
    # central differences of X in each state coordinate: (N, n_state, n, n)
    out = []
    for i in range(net.n_state):
        e = np.zeros(net.n_state)
        e[i] = step
        out.append((predict_metric(net, x + e, p) - predict_metric(net, x - e, p)) / (2 * step))
    return np.stack(out, axis=1)


def verify_lipschitz(net: SnMlp, box: StateBox, L_m: float, rng: np.random.Generator, pairs: int = 2000,
                     radius: float = 0.02, step: float = 1e-4) -> LipschitzReport:
    """Sampled check of the Lipschitz constant of ``X_{x_i}`` against ``L_m``.

    Half of the pairs are local (``x'`` within ``radius`` times the box
    width of ``x``) and half are independent draws; parameters are shared
    within a pair.  Also reports the largest slope of ``theta`` over the
    pairs against ``sqrt(m_bar) C_nn^L`` and the largest ``||X||``.
    """
    x = box.sample(rng, pairs)
    p = box.sample_params(rng, pairs)
    width = box.upper - box.lower
    near = pairs // 2
    x2 = box.sample(rng, pairs)
    x2[:near] = np.clip(x[:near] + radius * width * rng.uniform(-1, 1, (near, box.n)), box.lower, box.upper)
    dist = np.linalg.norm(x - x2, axis=1)
    ok = dist > 1e-9
    D1 = _metric_derivatives(net, x[ok], p[ok], step)
    D2 = _metric_derivatives(net, x2[ok], p[ok], step)
    diff = np.linalg.norm(D1 - D2, ord=2, axis=(-2, -1)).max(axis=1)
    measured = float(np.max(diff / dist[ok])) if ok.any() else 0.0
    th1, th2 = net.theta(x[ok], p[ok]), net.theta(x2[ok], p[ok])
    slope = float(np.max(np.linalg.norm(th1 - th2, axis=1) / dist[ok])) if ok.any() else 0.0
    X = predict_metric(net, np.concatenate([x, x2]), np.concatenate([p, p]))
    max_norm = float(np.linalg.norm(X, ord=2, axis=(-2, -1)).max())
    return LipschitzReport(measured, float(L_m), slope, net.first_derivative_bound(), max_norm,
                           measured <= L_m and slope <= 1.01 * net.first_derivative_bound())


def power_normalize(omega, C: float, v0=None):
    """``C omega / ||omega||`` together with the singular triple used."""
    sigma, u, v = power_iteration(omega, v0)
    if sigma == 0:
        return np.zeros_like(omega), sigma, u, v
    return C * omega / sigma, sigma, u, v
