"""SGD training of the spectrally-normalized metric network."""

from __future__ import annotations

import csv
import dataclasses
from pathlib import Path

import numpy as np

from ..dynamics import StateBox
from ..mcvstem import MetricSampleSet
from .cholesky import cholesky_encode
from .network import SnMlp, init_raw_weights, input_normalization, power_normalize
from .spectral import compute_sn_constant


class TrainingError(RuntimeError):
    """Loss became non-finite; ``last_good`` holds the last finite network."""

    def __init__(self, message: str, last_good: SnMlp | None = None, history=None):
        super().__init__(message)
        self.last_good = last_good
        self.history = history


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    widths: tuple = (100, 100, 100)
    epochs: int = 1000
    batch_size: int = 64
    lr: float = 1e-3
    momentum: float = 0.9
    decay_every: int = 200
    decay: float = 0.5
    test_fraction: float = 0.2
    stop_error: float | None = 0.08
    max_steps: int | None = None
    C_nn: float | None = None
    C_max: float = 10.0
    m_bar_scale: float = 1.0


@dataclasses.dataclass
class TrainResult:
    net: SnMlp
    history: list
    train_error: float
    test_error: float
    train_index: np.ndarray
    test_index: np.ndarray
    steps: int


def relative_error(pred, target) -> float:
    """Relative RMS error ``sqrt(sum ||pred - target||^2 / sum ||target||^2)``."""
    num = float(np.sum((pred - target) ** 2))
    den = float(np.sum(target**2))
    return float(np.sqrt(num / den)) if den > 0 else float(np.sqrt(num))


def split_indices(N: int, test_fraction: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    perm = rng.permutation(N)
    n_test = int(round(test_fraction * N))
    if N > 1:
        n_test = min(max(n_test, 1), N - 1)
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


def _backward(net: SnMlp, acts, out, target):
    # gradients of 0.5 * mean ||out - target||^2 with respect to effective weights and biases
    B = out.shape[0]
    delta = (out - target) / B
    gW = [None] * len(net.weights)
    gb = [None] * len(net.biases)
    gW[-1] = delta.T @ acts[-1]
    back = delta @ net.weights[-1]
    for layer in range(net.L - 1, -1, -1):
        h = acts[layer + 1]
        back = back * (1.0 - h**2)
        gW[layer] = back.T @ acts[layer]
        gb[layer] = back.sum(axis=0)
        back = back @ net.weights[layer]
    return gW, gb


def train(samples: MetricSampleSet, box: StateBox, L_m: float, config: TrainConfig, rng: np.random.Generator,
          targets: np.ndarray | None = None, progress=None) -> TrainResult:
    """Fit the Cholesky code of the learned field ``samples.field()``.

    Effective weights are re-normalized after every SGD step and the
    gradient flows through the normalization with the singular vectors
    held fixed, ``dL/dOmega = (C / s) (G - <G, Omega> / s u v^T)``.
    ``targets`` overrides the encoded field (used for permutation checks).
    """
    theta = cholesky_encode(samples.field()) if targets is None else np.asarray(targets, dtype=float)
    Z_raw = np.concatenate([samples.x, samples.p], axis=1)
    n = samples.x.shape[1]
    # headroom above the sampled trace bound keeps targets away from the saturation limit
    m_bar = samples.m_bar * config.m_bar_scale
    L = len(config.widths)
    C_nn = config.C_nn if config.C_nn is not None else compute_sn_constant(m_bar, L_m, L, C_max=config.C_max)
    shift, scale = input_normalization(box)
    Z = (Z_raw - shift) * scale
    train_idx, test_idx = split_indices(len(Z), config.test_fraction, rng)

    omegas, biases = init_raw_weights(Z.shape[1], config.widths, theta.shape[1], rng)
    scales = [C_nn] * L + [float(np.sqrt(m_bar / config.widths[-1]))]
    vs = [None] * len(omegas)
    trip = [None] * len(omegas)

    def normalize():
        eff = []
        for k, (om, c) in enumerate(zip(omegas, scales)):
            W, s, u, v = power_normalize(om, c, vs[k])
            vs[k] = v
            trip[k] = (s, u, v)
            eff.append(W)
        return eff

    net = SnMlp(n, samples.x.shape[1], samples.p.shape[1], tuple(config.widths), float(C_nn), float(m_bar),
                normalize(), [b.copy() for b in biases], shift, scale,
                {"L_m": float(L_m), "mode": samples.mode})
    vel_W = [np.zeros_like(o) for o in omegas]
    vel_b = [np.zeros_like(b) for b in biases]
    history = []
    last_good = _copy(net)
    steps = 0
    lr = config.lr
    for epoch in range(config.epochs):
        if epoch > 0 and config.decay_every and epoch % config.decay_every == 0:
            lr *= config.decay
        order = rng.permutation(train_idx)
        for start in range(0, len(order), config.batch_size):
            batch = order[start:start + config.batch_size]
            out, acts = net.forward(Z[batch], keep=True)
            gW, gb = _backward(net, acts, out, theta[batch])
            for k, (om, c) in enumerate(zip(omegas, scales)):
                s, u, v = trip[k]
                if s == 0:
                    continue
                G = gW[k]
                g_om = (c / s) * (G - (np.sum(G * om) / s) * np.outer(u, v))
                vel_W[k] = config.momentum * vel_W[k] - lr * g_om
                omegas[k] = om + vel_W[k]
            for k in range(L):
                vel_b[k] = config.momentum * vel_b[k] - lr * gb[k]
                biases[k] = biases[k] + vel_b[k]
            net.weights = normalize()
            net.biases = [b.copy() for b in biases]
            steps += 1
            if config.max_steps is not None and steps >= config.max_steps:
                break
        pred_tr = net.forward(Z[train_idx])
        pred_te = net.forward(Z[test_idx]) if len(test_idx) else pred_tr[:0]
        loss = float(np.mean(np.sum((pred_tr - theta[train_idx]) ** 2, axis=1)))
        if not np.isfinite(loss):
            raise TrainingError(f"non-finite loss at epoch {epoch}", last_good, history)
        last_good = _copy(net)
        row = {"epoch": epoch, "lr": lr, "loss": loss,
               "train_error": relative_error(pred_tr, theta[train_idx]),
               "test_error": relative_error(pred_te, theta[test_idx]) if len(test_idx) else np.nan}
        history.append(row)
        if progress is not None:
            progress(row)
        if config.max_steps is not None and steps >= config.max_steps:
            break
        if config.stop_error is not None and row["test_error"] <= config.stop_error:
            break
    last = history[-1]
    net.meta.update({"epochs": len(history), "steps": steps, "test_error": last["test_error"]})
    return TrainResult(net, history, last["train_error"], last["test_error"], train_idx, test_idx, steps)


def _copy(net: SnMlp) -> SnMlp:
    return dataclasses.replace(net, weights=[w.copy() for w in net.weights], biases=[b.copy() for b in net.biases],
                               meta=dict(net.meta))


def write_curves(history, path) -> None:
    keys = ["epoch", "lr", "loss", "train_error", "test_error"]
    with open(Path(path), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys, lineterminator="\n")
        w.writeheader()
        for row in history:
            w.writerow({k: repr(float(row[k])) if k != "epoch" else row[k] for k in keys})
