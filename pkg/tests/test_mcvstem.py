import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nscm.dynamics import NoiseBounds
from nscm.mcvstem import (DomainError, Infeasible, McvStemConfig, MetricSampleSet, NoFeasibleMetricError,
                          bound_constants, draw_samples, estimation_weights, is_interior, learned_field,
                          line_search, load_sample_set, recover_metric, sample_metrics, save_sample_set,
                          steady_state_bound)
from nscm.seeding import stream
from nscm.systems import linear_system, ornstein_uhlenbeck


def test_zero_lipschitz_gives_deterministic_constants():
    b = NoiseBounds(g_c=0.3, g_e=0.2, d_bar=0.1, c_bar=1.0)
    for eps in (0.1, 1.0, 10.0):
        assert bound_constants("control", b, 0.0, 0.5, eps).alpha_g == 0.0
        c = bound_constants("estimation", b, 0.0, 0.5, eps)
        assert c.alpha_e1 == 0.0 and c.alpha_e2 == 0.0


def test_basic_constant_substitution():
    c = bound_constants("basic", NoiseBounds(), 1.0, 0.5, 2.0, g1=1.0, g2=0.0)
    assert c.C == pytest.approx(2.0)
    assert c.alpha_g == pytest.approx(2.5)


def test_control_noise_gain_oracle():
    c = bound_constants("control", NoiseBounds(g_c=0.06 * np.sqrt(2)), 10.0, 1.0, 1.0)
    assert c.alpha_g == pytest.approx(10 * 0.0072 * 1.5, rel=1e-12)


def test_domain_errors():
    with pytest.raises(DomainError):
        bound_constants("control", NoiseBounds(), 1.0, 0.5, 0.0)
    with pytest.raises(DomainError):
        estimation_weights(1.0, 1.0, 0.0)


def test_estimation_weights_examples():
    assert estimation_weights(3.0, 0.0, 0.5) == (3.0, 0.0)
    assert estimation_weights(1.0, 0.0, 2.0)[1] == 0.0


def test_estimation_weights_dominate_cubic_bound():
    # (C1 chi + C2 chi nu^2) / (2 a) <= (c1 chi + c2 nu)^3 / (3 sqrt(3 C1)) for chi >= 1, nu > 0
    b = NoiseBounds(g_e=0.03 * np.sqrt(2), d_bar=0.03 * np.sqrt(2), c_bar=2.0)
    k = bound_constants("estimation", b, 0.5, 0.4, 3.3)
    c1, c2 = estimation_weights(k.C_e1, k.C_e2, 0.4)
    chi, nu = np.meshgrid(np.linspace(1, 20, 200), np.geomspace(1e-3, 50, 200))
    lhs = (k.C_e1 * chi + k.C_e2 * chi * nu**2) / 0.8
    rhs = (c1 * chi + c2 * nu) ** 3 / (3 * np.sqrt(3 * k.C_e1))
    assert np.all(lhs <= rhs * (1 + 1e-12))
    # along each ray the surrogate and the cube of the linear cost rank points identically
    for direction in ([1.0, 0.1], [2.0, 1.0], [1.0, 5.0]):
        s = np.linspace(1, 5, 50)
        lin = c1 * s * direction[0] + c2 * s * direction[1]
        assert np.all(np.diff(lin) > 0) and np.all(np.diff(lin**3) > 0)


def test_steady_state_bound_examples():
    k = bound_constants("control", NoiseBounds(g_c=1.0), 0.0, 1.0, 2.0)
    assert k.C == pytest.approx(2.0)
    assert steady_state_bound("control", k, 1.0, 1.0, 1.0) == pytest.approx(1.0)
    e = bound_constants("estimation", NoiseBounds(g_e=0.1, d_bar=0.1, c_bar=1.0), 0.5, 0.5, 1.0)
    assert steady_state_bound("estimation", e, 0.0, 2.0, 0.5) == pytest.approx(e.C_e1 * 2.0 / 1.0)


def test_control_bound_inverse_for_chi():
    # bound 0.58 at alpha 0.10, eps 1.00 needs chi ~ 5.4, which lies in the admissible range
    k = bound_constants("control", NoiseBounds(g_c=0.06 * np.sqrt(2)), 10.0, 0.1, 1.0)
    chi = 0.58 / (k.C / 0.2)
    assert chi >= 1.0
    assert steady_state_bound("control", k, 1.0, chi, 0.1) == pytest.approx(0.58)


def test_recover_metric_examples():
    np.testing.assert_allclose(recover_metric(np.eye(2), 2.0, "control"), 2 * np.eye(2))
    np.testing.assert_allclose(learned_field(np.eye(2), 2.0, "estimation"), 0.5 * np.eye(2))
    np.testing.assert_allclose(recover_metric(np.eye(2), 2.0, "estimation"), 2 * np.eye(2))


def test_recover_metric_eigen_range():
    rng = np.random.default_rng(0)
    for _ in range(100):
        R = rng.normal(size=(3, 3))
        W = np.eye(3) + R @ R.T
        chi = np.linalg.eigvalsh(W)[-1]
        nu = rng.uniform(0.1, 10)
        lam = np.linalg.eigvalsh(recover_metric(W, nu, "control"))
        assert lam[0] >= nu / chi * (1 - 1e-12) and lam[-1] <= nu * (1 + 1e-12)


def test_scalar_lyapunov_reduces_to_identity():
    ou = ornstein_uhlenbeck(g=0.1)
    cfg = McvStemConfig("basic", 0.0, alphas=(0.5,), epsilons=(1.0,), n_samples=1)
    res = sample_metrics(cfg, ou, 0.5, 1.0, rng=stream(0, "test"))
    assert isinstance(res, MetricSampleSet)
    assert res.chi == pytest.approx(1.0, abs=1e-6)
    np.testing.assert_allclose(res.metrics(), [[[1.0]]], atol=1e-6)


def test_expanding_system_infeasible():
    lin = linear_system(np.eye(2), G=0.1 * np.eye(2))
    cfg = McvStemConfig("basic", 0.0, alphas=(0.5,), epsilons=(1.0,), n_samples=3)
    res = sample_metrics(cfg, lin, 0.5, 1.0, rng=stream(0, "test"))
    assert isinstance(res, Infeasible)
    with pytest.raises(NoFeasibleMetricError):
        line_search(cfg, lin, rng=stream(0, "test"))


def test_line_search_single_feasible_point():
    # 2 (-0.3) w + 2 alpha w <= 0 holds only for alpha <= 0.3
    lin = linear_system([[-0.3]], G=[[0.1]])
    cfg = McvStemConfig("basic", 0.0, alphas=(0.1, 1.0), epsilons=(1.0,), n_samples=2)
    res = line_search(cfg, lin, rng=stream(0, "test"))
    assert res.alpha == 0.1
    statuses = {r["alpha"]: r["status"] for r in res.surface}
    assert statuses[0.1] == "optimal" and statuses[1.0] != "optimal"


def test_line_search_tie_goes_to_smallest():
    # without noise every grid point has J = 0
    lin = linear_system([[-1.0]])
    cfg = McvStemConfig("basic", 0.0, alphas=(0.2, 0.1), epsilons=(2.0, 1.0), n_samples=2)
    res = line_search(cfg, lin, rng=stream(0, "test"))
    assert (res.alpha, res.eps) == (0.1, 1.0)
    assert not is_interior(res)


def test_estimation_mode_cubic_and_ranges():
    lin = linear_system([[1.0, 0.5], [0.0, -0.5]], G=0.05 * np.eye(2), C=np.eye(2), D=0.05 * np.eye(2))
    cfg = McvStemConfig("estimation", 0.5, n_samples=4)
    res = sample_metrics(cfg, lin, 0.3, 2.0, rng=stream(1, "test"))
    assert isinstance(res, MetricSampleSet)
    assert res.nu**3 <= res.nu_c + 1e-6
    eig = np.linalg.eigvalsh(res.W_bar)
    assert eig.min() >= 1 - 1e-6 and eig.max() <= res.chi + 1e-6
    assert res.nu > 0


def test_sample_set_roundtrip(tmp_path):
    lin = linear_system([[-1.0, 0.2], [0.0, -2.0]], G=0.1 * np.eye(2))
    cfg = McvStemConfig("basic", 1.0, n_samples=5)
    res = sample_metrics(cfg, lin, 0.5, 1.0, rng=stream(2, "test"))
    save_sample_set(res, tmp_path / "s")
    back = load_sample_set(tmp_path / "s")
    np.testing.assert_array_equal(back.W_bar, res.W_bar)
    assert back.nu == res.nu and back.chi == res.chi and back.bound == res.bound


def test_draw_samples_deterministic():
    lin = linear_system([[-1.0]])
    cfg = McvStemConfig("basic", 0.0, n_samples=10)
    a = draw_samples(cfg, lin, stream(5, "sampling"))
    b = draw_samples(cfg, lin, stream(5, "sampling"))
    np.testing.assert_array_equal(a.x, b.x)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.01, 5), st.floats(0.05, 20), st.floats(0.0, 10))
def test_bound_constants_monotone(alpha, eps, L_m):
    b = NoiseBounds(g_c=0.1, g_e=0.1, d_bar=0.1, c_bar=1.0)
    lo = bound_constants("control", b, L_m, alpha, eps)
    hi = bound_constants("control", b, L_m, alpha, eps * 2)
    # larger eps trades a smaller C for a larger alpha_g
    assert hi.C <= lo.C and hi.alpha_g >= lo.alpha_g
    assert lo.C > 0 and lo.alpha_g >= 0
