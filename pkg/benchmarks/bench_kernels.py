"""Compare the numba kernels with their numpy twins.

Run with ``python3 benchmarks/bench_kernels.py [--repeat N]``.  Each kernel
is called once before timing so numba compilation is excluded; the table
reports the best of ``repeat`` wall-clock timings and checks that both
backends agree.
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from nscm.lmi import CHI, NU, NU_C, DecisionLayout, assemble, build_basic_contraction_blocks
from nscm.sdp import solve
from nscm.sdp._kernels import kernels
from nscm.sim import care_batch


def _sdp_inputs(rng, nb=300, K=12, d=6, L=200):
    F = rng.normal(size=(nb, K, d, d))
    F = F + np.swapaxes(F, -1, -2)
    idx = rng.integers(-1, L, size=(nb, K))
    return F, idx, rng.normal(size=L), rng.normal(size=(nb, d, d)), rng.normal(size=(nb, d, d)), L


def _care_inputs(rng, nb=2000, n=4, m=2):
    A = rng.normal(size=(nb, n, n))
    B = rng.normal(size=(nb, n, m))
    Q = np.broadcast_to(np.eye(n), (nb, n, n)).copy()
    R = np.broadcast_to(np.eye(m), (nb, m, m)).copy()
    return A, B, Q, R


def _sample_problem(rng, samples=40, n=3):
    lay = DecisionLayout(n, samples)
    blocks = []
    for i in range(samples):
        f_x = rng.normal(size=(n, n)) - 3.0 * np.eye(n)
        blocks += build_basic_contraction_blocks(f_x, 0.5, 0.01, i, lay)
    obj = np.zeros(lay.length)
    obj[CHI] = 1.0
    return assemble(lay, blocks, obj, fixed={NU: 1.0, NU_C: 0.0})


def best_time(fn, repeat: int) -> float:
    fn()
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def run(repeat: int = 5) -> list[tuple[str, float, float, float]]:
    """Rows of ``(name, numpy seconds, numba seconds, backend difference)``."""
    rng = np.random.default_rng(0)
    F, idx, x, Z, Q, L = _sdp_inputs(rng)
    nb, npy = kernels(True), kernels(False)
    rows = []
    cases = [
        ("scatter_blocks", lambda k: k[0](F, idx, x)),
        ("gather_traces", lambda k: k[1](F, idx, Z, np.zeros(L))),
        ("congruence", lambda k: k[2](F, Q)),
    ]
    for name, call in cases:
        diff = float(np.abs(call(nb) - call(npy)).max())
        rows.append((name, best_time(lambda: call(npy), repeat), best_time(lambda: call(nb), repeat), diff))

    A, B, Qc, R = _care_inputs(rng)
    P1, s1, _ = care_batch(A, B, Qc, R, use_numba=False)
    P2, s2, _ = care_batch(A, B, Qc, R, use_numba=True)
    # relative difference over instances both backends solved to tolerance
    ok = (s1 == 0) & (s2 == 0)
    rel = np.abs(P1 - P2).max(axis=(-2, -1)) / (1.0 + np.abs(P1).max(axis=(-2, -1)))
    rows.append(("care_batch", best_time(lambda: care_batch(A, B, Qc, R, use_numba=False), repeat),
                 best_time(lambda: care_batch(A, B, Qc, R, use_numba=True), repeat), float(rel[ok].max())))

    # the optimal W is not unique, so compare objectives
    prob = _sample_problem(rng)
    f1, f2 = solve(prob, use_numba=False).objective, solve(prob, use_numba=True).objective
    rows.append(("sdp solve (40 samples)", best_time(lambda: solve(prob, use_numba=False), max(1, repeat // 2)),
                 best_time(lambda: solve(prob, use_numba=True), max(1, repeat // 2)), abs(f1 - f2)))
    return rows


def main(argv=None) -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    args = p.parse_args(argv)
    print(f"{'kernel':<24}{'numpy [ms]':>12}{'numba [ms]':>12}{'speedup':>10}{'diff':>12}")
    for name, t_np, t_nb, diff in run(args.repeat):
        print(f"{name:<24}{1e3 * t_np:>12.3f}{1e3 * t_nb:>12.3f}{t_np / t_nb:>10.2f}{diff:>12.1e}")


if __name__ == "__main__":
    main()
