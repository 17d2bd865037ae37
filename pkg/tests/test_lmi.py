import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.linalg import solve_continuous_lyapunov

from nscm.dynamics import NoiseBounds
from nscm.lmi import (AssemblyError, ConfigurationError, DecisionLayout, LmiBlock, assemble,
                      build_basic_contraction_blocks, build_control_blocks, build_estimation_blocks, cubic_blocks,
                      format_problem, parse_problem, sym_basis, unvech, vech, wdot_term)
from nscm.mcvstem import bound_constants


def _worst(blocks, y):
    return max(b.max_eig(y) for b in blocks)


def test_vech_roundtrip_and_basis():
    W = np.array([[1.0, 2.0, 3.0], [2.0, 4.0, 5.0], [3.0, 5.0, 6.0]])
    np.testing.assert_array_equal(unvech(vech(W), 3), W)
    assert sym_basis(3).shape[0] == 6


def test_control_scalar_hand_expansion():
    lay = DecisionLayout(1, 1)
    blk = build_control_blocks([[-1.0]], [[1.0]], 0.5, 0.0, "zero", 0, lay)[0]
    for w, nu in [(1.0, 1.0), (3.0, 0.5), (2.0, 4.0)]:
        y = lay.pack(nu, 0.0, 5.0, [[[w]]])
        # 2(-1) w - 2 nu + 2 (0.5) w
        assert blk.evaluate(y)[0, 0] == pytest.approx(-2 * w - 2 * nu + w, abs=1e-14)


def test_control_schur_equivalence_random():
    rng = np.random.default_rng(0)
    lay = DecisionLayout(2, 1)
    agree = {True: 0, False: 0}
    for _ in range(200):
        A = rng.normal(size=(2, 2))
        B = rng.normal(size=(2, 1))
        alpha, a_gc, nu = rng.uniform(0.1, 1), rng.uniform(0.01, 2), rng.uniform(0.5, 5)
        blk = build_control_blocks(A, B, alpha, a_gc, "zero", 0, lay)[0]
        y = lay.pack(nu, 0.0, 2.0, np.eye(2)[None])
        reduced = A + A.T - 2 * nu * B @ B.T + 2 * alpha * np.eye(2) + a_gc / nu * np.eye(2)
        r = np.linalg.eigvalsh(reduced)[-1]
        if abs(r) < 1e-6:
            continue
        nsd = blk.max_eig(y) <= 1e-12
        assert nsd == (r <= 0)
        agree[nsd] += 1
    assert agree[True] > 0 and agree[False] > 0


def test_lower_bound_block_flags_small_metric():
    lay = DecisionLayout(2, 1)
    blocks = build_control_blocks(-np.eye(2), np.eye(2), 0.5, 0.0, "zero", 0, lay)
    lower = next(b for b in blocks if b.label.startswith("lower"))
    y = lay.pack(1.0, 0.0, 2.0, 0.5 * np.eye(2)[None])
    assert lower.max_eig(y) == pytest.approx(0.5)


def test_estimation_scalar_hand_expansion():
    lay = DecisionLayout(1, 1)
    blk = build_estimation_blocks([[-1.0]], [[1.0]], [[1.0]], 0.4, 0.0, 0.0, "zero", 0, lay)[0]
    y = lay.pack(1.0, 1.0, 1.0, [[[1.0]]])
    # 2(-w - nu) + 0.8 w at w = nu = 1
    assert blk.evaluate(y)[0, 0] == pytest.approx(-3.2)
    assert _worst(build_estimation_blocks([[-1.0]], [[1.0]], [[1.0]], 0.4, 0.0, 0.0, "zero", 0, lay), y) <= 0


def test_estimation_noise_constant_oracle():
    b = NoiseBounds(g_e=0.03 * np.sqrt(2), d_bar=0.03 * np.sqrt(2), c_bar=1.0)
    consts = bound_constants("estimation", b, 0.5, 0.4, 3.3)
    assert consts.alpha_e1 == pytest.approx(0.5 * 0.0018 * 3.8, rel=1e-12)
    assert consts.alpha_e1 == pytest.approx(3.42e-3, rel=1e-12)


def _cubic_feasible(nu, nu_c):
    lay = DecisionLayout(1, 1, n_aux=1)
    blocks = cubic_blocks(lay)
    best = np.inf
    for s in np.append(np.linspace(0.0, 2 * nu_c + 2 * nu**2, 2001), nu**2):
        y = lay.pack(nu, nu_c, 1.0, [[[1.0]]], aux=[s])
        best = min(best, _worst(blocks, y))
    return best


def test_cubic_constraint():
    assert _cubic_feasible(2.0, 7.0) > 1e-3
    assert _cubic_feasible(2.0, 9.0) <= 0.0
    assert _cubic_feasible(1.5, 1.5**3) <= 1e-6


def test_basic_contraction_stable_and_expanding():
    lay = DecisionLayout(2, 1)
    y = lay.pack(1.0, 0.0, 1.0, np.eye(2)[None])
    assert _worst(build_basic_contraction_blocks(-np.eye(2), 0.5, 0.0, 0, lay), y) <= 0
    # with f_x = I every Wbar >= I makes 2 Wbar + 2 alpha Wbar positive
    rng = np.random.default_rng(1)
    blocks = build_basic_contraction_blocks(np.eye(2), 0.5, 0.0, 0, lay)
    for _ in range(50):
        R = rng.normal(size=(2, 2))
        W = np.eye(2) + R @ R.T
        y = lay.pack(rng.uniform(0.1, 10), 0.0, np.linalg.eigvalsh(W)[-1], W[None])
        assert _worst(blocks, y) > 0


def test_lemma_conversion_equivalence_random():
    # M-form conditions versus assembled blocks at (nu M^-1, lambda_max M, cond M)
    rng = np.random.default_rng(2)
    lay = DecisionLayout(2, 1)
    seen = {True: 0, False: 0}
    for _ in range(100):
        f_x = rng.normal(size=(2, 2))
        f_x -= (np.linalg.eigvals(f_x).real.max() + rng.uniform(0.5, 1.5)) * np.eye(2)
        alpha, a_g = 0.25, rng.uniform(0.0, 0.2)
        M = solve_continuous_lyapunov((f_x + alpha * np.eye(2)).T, -np.eye(2))
        R = rng.normal(size=(2, 2))
        M = M + rng.uniform(0, 1) * R @ R.T
        lam = np.linalg.eigvalsh(M)
        original = M @ f_x + f_x.T @ M + a_g * np.eye(2) + 2 * alpha * M
        r = np.linalg.eigvalsh(original)[-1]
        if abs(r) < 1e-6:
            continue
        nu, chi = lam[-1], lam[-1] / lam[0]
        W_bar = nu * np.linalg.inv(M)
        y = lay.pack(nu, 0.0, chi * (1 + 1e-12), W_bar[None])
        blocks = build_basic_contraction_blocks(f_x, alpha, a_g, 0, lay)
        ok = _worst(blocks, y) <= 1e-9
        assert ok == (r < 0)
        seen[ok] += 1
    assert seen[True] > 0 and seen[False] > 0


def test_wdot_modes():
    lay = DecisionLayout(2, 3, ordered=True)
    assert not wdot_term("zero", lay, 1).coeffs
    W = np.stack([np.eye(2)] * 3)
    np.testing.assert_array_equal(wdot_term("backward-difference", W, 1, 0.1), np.zeros((2, 2)))
    W = np.stack([(1 + t) * np.eye(2) for t in (0.0, 0.1, 0.2)])
    np.testing.assert_allclose(wdot_term("backward-difference", W, 1, 0.1), np.eye(2), atol=1e-12)
    np.testing.assert_allclose(wdot_term("sufficient-bound", W, 0, 0.5, sign=-1.0, chi=3.0), 4 * np.eye(2))
    with pytest.raises(ConfigurationError):
        wdot_term("backward-difference", DecisionLayout(2, 3), 1, 0.1)
    with pytest.raises(ConfigurationError):
        wdot_term("bogus", W, 0)


def test_symbolic_wdot_matches_numeric():
    lay = DecisionLayout(2, 3, ordered=True)
    W = np.stack([(1 + t) * np.eye(2) + t * np.array([[0, 1], [1, 0]]) for t in (0.0, 0.1, 0.3)])
    y = lay.pack(1.0, 0.0, 5.0, W)
    for i in range(3):
        sym = wdot_term("backward-difference", lay, i, 0.1)
        val = sym.const + sum(y[k] * F for k, F in sym.coeffs.items())
        np.testing.assert_allclose(val, wdot_term("backward-difference", W, i, 0.1), atol=1e-12)


def test_assembly_errors():
    lay = DecisionLayout(2, 1)
    with pytest.raises(AssemblyError):
        build_control_blocks(np.eye(3), np.ones((3, 1)), 0.5, 0.0, "zero", 0, lay)
    with pytest.raises(AssemblyError):
        LmiBlock.from_affine(type(wdot_term("zero", lay, 0))(np.array([[0.0, 1.0], [0.0, 0.0]])), "bad")
    with pytest.raises(AssemblyError):
        build_estimation_blocks(-np.eye(2), np.eye(2), np.eye(2), 0.5, -1.0, 0.0, "zero", 0, lay)


def test_serialization_roundtrip():
    lay = DecisionLayout(2, 2, n_aux=1)
    rng = np.random.default_rng(3)
    blocks = []
    for i in range(2):
        blocks += build_estimation_blocks(rng.normal(size=(2, 2)), np.eye(2), np.eye(2), 0.3, 0.01, 0.02, "zero",
                                          i, lay)
    obj = rng.normal(size=lay.length)
    prob = assemble(lay, blocks, obj, fixed={}, cubic=True)
    back = parse_problem(format_problem(prob))
    assert back.layout == prob.layout and back.cubic == prob.cubic
    np.testing.assert_array_equal(back.objective, prob.objective)
    y = rng.normal(size=lay.length)
    for a, b in zip(prob.blocks, back.blocks):
        assert a.label == b.label
        np.testing.assert_array_equal(a.evaluate(y), b.evaluate(y))


@settings(max_examples=50, deadline=None)
@given(st.floats(0.1, 10), st.floats(0.05, 5), st.floats(0.0, 3))
def test_control_block_scale_invariance(nu, alpha, a_gc):
    # scaling (Wbar, nu) by t > 0 scales the Schur reduction by t, so feasibility is preserved
    lay = DecisionLayout(1, 1)
    blk = build_control_blocks([[0.3]], [[1.0]], alpha, a_gc, "zero", 0, lay)[0]
    w = 1.5
    f1 = blk.max_eig(lay.pack(nu, 0, 2, [[[w]]])) <= 1e-12
    f2 = blk.max_eig(lay.pack(2 * nu, 0, 2, [[[2 * w]]])) <= 1e-12
    assert f1 == f2 or abs(blk.max_eig(lay.pack(nu, 0, 2, [[[w]]]))) < 1e-9
