import numpy as np
import pytest

from nscm.dynamics import (ConfigurationError, EvaluationError, StateBox, SystemModel, check_noise_bounds, jacobian,
                           sdc_factorize, sdc_factorize_batch, sdc_measurement_factorize)
from nscm.rocket import load_rocket_config, rocket_benchmark
from nscm.seeding import stream
from nscm.systems import linear_system, scalar_cubic


@pytest.fixture(scope="module")
def rocket():
    return rocket_benchmark(c_bar=2.0)


def _trapezoid_sdc(model, x, xd, t, u=None, points=10_001):
    c = np.linspace(0.0, 1.0, points)
    pts = xd[None, :] + c[:, None] * (x - xd)[None, :]
    J = model.drift_jacobian(pts, t, None if u is None else np.broadcast_to(u, (points, model.m)))
    return np.trapezoid(J, c, axis=0)


def test_sdc_linear_is_exact():
    A0 = np.array([[0.0, 1.0], [-2.0, -0.5]])
    lin = linear_system(A0, B=[[0.0], [1.0]])
    res = sdc_factorize(lin, [0.3, -0.7], [0.1, 0.2], [0.5], 0.0)
    np.testing.assert_allclose(res.A, A0, atol=1e-14)
    assert res.residual <= 1e-14


def test_sdc_scalar_cubic_closed_form():
    cubic = SystemModel(1, 1, lambda x, t: -x**3, lambda x, t: np.ones((1, 1)), lambda x, t: np.zeros((1, 1)))
    for x in (0.3, -1.2, 2.0):
        A = sdc_factorize(cubic, [x], [0.0]).A
        # finite-difference Jacobian, so only near machine precision
        assert A[0, 0] == pytest.approx(-x**2, rel=1e-8)


def test_sdc_rocket_matches_dense_quadrature(rocket):
    x, xd = np.array([0.1, 0.05]), np.zeros(2)
    res = sdc_factorize(rocket, x, xd, None, 3.0)
    ref = _trapezoid_sdc(rocket, x, xd, 3.0)
    np.testing.assert_allclose(res.A, ref, atol=1e-7)
    assert res.residual <= 1e-10


def test_measurement_sdc_rocket_and_degenerate_segment(rocket):
    rng = stream(1, "test")
    for _ in range(5):
        x, xh = rocket.box.sample(rng, 2)
        t = rng.uniform(0, 10)
        res = sdc_measurement_factorize(rocket, x, xh, t)
        lhs = res.A @ (x - xh)
        rhs = rocket.measure(x, t) - rocket.measure(xh, t)
        assert np.linalg.norm(lhs - rhs) <= 1e-10 * (1 + np.linalg.norm(rhs))
    xh = np.array([0.05, -0.2])
    C_L = sdc_measurement_factorize(rocket, xh, xh, 2.0).A
    np.testing.assert_allclose(C_L, rocket.measurement_jacobian(xh, 2.0), atol=1e-14)


def test_measurement_sdc_linear():
    H = np.array([[1.0, 2.0]])
    lin = linear_system(np.zeros((2, 2)), C=H)
    np.testing.assert_allclose(sdc_measurement_factorize(lin, [1.0, 0.0], [0.0, 3.0]).A, H)


def test_sdc_symmetric_in_endpoints(rocket):
    x, xd = np.array([0.2, -0.3]), np.array([-0.1, 0.4])
    a = sdc_factorize(rocket, x, xd, None, 5.0).A
    b = sdc_factorize(rocket, xd, x, None, 5.0).A
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_sdc_with_input_term(rocket):
    x, xd, u = np.array([0.25, 0.1]), np.array([-0.05, 0.0]), np.array([0.3])
    res = sdc_factorize(rocket, x, xd, u, 7.0)
    lhs = res.A @ (x - xd)
    rhs = rocket.closed_drift(x, 7.0, u) - rocket.closed_drift(xd, 7.0, u)
    assert np.linalg.norm(lhs - rhs) <= 1e-10


def test_sdc_rejects_bad_order(rocket):
    with pytest.raises(ValueError):
        sdc_factorize(rocket, [0.1, 0.0], [0.0, 0.0], quad_order=0)


def test_sdc_nonfinite_jacobian_reports_abscissa():
    bad = SystemModel(1, 1, lambda x, t: np.sqrt(x), lambda x, t: np.ones((1, 1)), lambda x, t: np.zeros((1, 1)),
                      f_jac=lambda x, t: np.where(x[..., None] > 0.5, np.nan, 1.0))
    with pytest.raises(EvaluationError) as err:
        sdc_factorize(bad, [1.0], [0.0])
    assert err.value.abscissa is not None


def test_sdc_batch_matches_single(rocket):
    rng = stream(2, "test")
    x = rocket.box.sample(rng, 4)
    xd = rocket.box.sample(rng, 4)
    t = rng.uniform(0, 10, 4)
    A, _ = sdc_factorize_batch(rocket, x, xd, None, t)
    for i in range(4):
        np.testing.assert_allclose(A[i], sdc_factorize(rocket, x[i], xd[i], None, t[i]).A, atol=1e-13)


def test_jacobian_linear_and_hand_example():
    A0 = np.array([[1.0, -2.0], [0.5, 3.0]])
    np.testing.assert_allclose(jacobian(lambda x, t: A0 @ x, np.array([0.3, 0.4]), 0.0), A0, atol=1e-8)
    J = jacobian(lambda x, t: np.array([x[0] ** 2, x[0] * x[1]]), np.array([1.0, 2.0]), 0.0)
    np.testing.assert_allclose(J, [[2.0, 0.0], [2.0, 1.0]], atol=1e-8)


def test_jacobian_matches_rocket_analytic(rocket):
    rng = stream(3, "test")
    for x in rocket.box.sample(rng, 20):
        t = float(rng.uniform(0, 10))
        num = jacobian(rocket.drift, x, t)
        ana = rocket.drift_jacobian(x, t)
        assert np.linalg.norm(num - ana) <= 1e-6 * (1 + np.linalg.norm(ana))


def test_jacobian_nonfinite_raises():
    with pytest.raises(EvaluationError):
        with np.errstate(invalid="ignore"):
            jacobian(lambda x, t: np.log(x), np.array([-1.0]), 0.0)


def test_rocket_defaults(rocket):
    assert (rocket.n, rocket.m) == (2, 1)
    np.testing.assert_allclose(rocket.control_noise(np.zeros(2), 0.0), 0.06 * np.eye(2))
    np.testing.assert_allclose(rocket.process_noise(np.zeros(2), 0.0), 0.03 * np.eye(2))
    np.testing.assert_allclose(rocket.measurement_noise(np.zeros(2), 0.0), 0.03 * np.eye(2))
    k = rocket.coefficients
    assert k.mach(0.0) == pytest.approx(2.0)
    assert k.mach(10.0) == pytest.approx(4.0)
    f0 = rocket.drift(np.zeros(2), 0.0)
    assert np.all(np.isfinite(f0))
    assert np.linalg.norm(rocket.actuation(np.zeros(2), 0.0)) > 0


def test_rocket_missing_coefficient():
    cfg = dict(load_rocket_config())
    del cfg["c_m"]
    with pytest.raises(ConfigurationError):
        rocket_benchmark(cfg, c_bar=1.0)


def test_rocket_noise_bounds_dominate(rocket):
    sampled = check_noise_bounds(rocket, stream(0, "test"), 200, (0.0, 10.0))
    assert rocket.bounds.g_c >= sampled["g_c"] - 1e-12
    assert rocket.bounds.g_e >= sampled["g_e"] - 1e-12
    assert rocket.bounds.d_bar >= sampled["d_bar"] - 1e-12


def test_state_box_validation():
    with pytest.raises(ConfigurationError):
        StateBox(np.array([1.0]), np.array([0.0]))
    box = StateBox(np.array([-1.0]), np.array([1.0]), [0.0], [2.0], ("t",))
    assert box.contains([0.5], [1.0]) and not box.contains([1.5], [1.0])


def test_scalar_cubic_sdc_identity():
    m = scalar_cubic()
    res = sdc_factorize(m, [0.8], [-0.3])
    lhs = res.A @ np.array([1.1])
    rhs = m.drift(np.array([0.8]), 0.0) - m.drift(np.array([-0.3]), 0.0)
    assert np.linalg.norm(lhs - rhs) <= 1e-12
