import numpy as np
import pytest

from aiftc.errors import ControllerDivergenceError, InvalidInputError
from aiftc.harness.config import ScenarioConfig
from aiftc.harness.sim import simulate_batch
from aiftc.plant import ManipulatorParams, SensorReading, gravity_vector, rk4
from aiftc.uaic import (ControlLawParams, UAICBelief, UAICPrecisions, controller_step, f_star,
                        f_star_jacobian, free_energy_uaic, gradients_uaic, predict_prior)

P_ARM = ManipulatorParams()


def _law(target=(-0.2, 0.5), kp=(50, 30), ki=(30, 20), kd=(25, 15), limit=3.0):
    return ControlLawParams(np.array(kp, float), np.array(ki, float), np.array(kd, float),
                            np.array(target, float), limit)


def _belief(mu_q, mu_qd=(0.0, 0.0), mu_u=(0.0, 0.0), integral=(0.0, 0.0)):
    return UAICBelief(*(np.array(v, dtype=float) for v in (mu_q, mu_qd, mu_u, integral)))


def test_predict_prior_stationary():
    b = _belief([0.3, -0.2])
    np.testing.assert_array_equal(predict_prior(b, 1e-3), b.mu_x)


def test_predict_prior_example():
    x = predict_prior(_belief([0, 0], [1, -1]), 0.001)
    np.testing.assert_array_equal(x[:2], [0.001, -0.001])


def test_predict_prior_matches_matrix(rng):
    dt = 1e-3
    A = np.block([[np.eye(2), dt * np.eye(2)], [np.zeros((2, 2)), np.eye(2)]])
    for _ in range(20):
        b = _belief(rng.normal(size=2), rng.normal(size=2))
        np.testing.assert_allclose(predict_prior(b, dt), A @ b.mu_x, rtol=0, atol=1e-15)


def test_predict_prior_rejects_bad_dt():
    with pytest.raises(InvalidInputError):
        predict_prior(_belief([0, 0]), 0.0)


def test_f_star_zero_on_target():
    u, integral = f_star(_belief([-0.2, 0.5]), _law(), 1e-3)
    np.testing.assert_array_equal(u, 0.0)
    np.testing.assert_array_equal(integral, 0.0)


def test_f_star_proportional_case():
    law = _law(target=(0.1, 0.0), kp=(10, 10), ki=(0, 0), kd=(0, 0))
    u, _ = f_star(_belief([0.0, 0.0]), law, 1e-3)
    np.testing.assert_allclose(u, [1.0, 0.0], rtol=1e-15)


def test_f_star_integral_is_clamped():
    law = _law(target=(10.0, -10.0), limit=2.0)
    _, integral = f_star(_belief([0, 0], integral=[1.999, -1.999]), law, 1.0)
    np.testing.assert_array_equal(integral, [2.0, -2.0])


def test_f_star_jacobian_matches_finite_differences(rng):
    law, dt, h = _law(), 1e-3, 1e-6
    b = _belief(rng.normal(size=2), rng.normal(size=2), integral=[0.3, -0.1])
    d_q, d_qd = f_star_jacobian(b, law, dt)
    for j in range(2):
        e = np.zeros(2)
        e[j] = h
        fq = (f_star(_belief(b.mu_q + e, b.mu_qd, integral=b.integral), law, dt)[0]
              - f_star(_belief(b.mu_q - e, b.mu_qd, integral=b.integral), law, dt)[0]) / (2 * h)
        fv = (f_star(_belief(b.mu_q, b.mu_qd + e, integral=b.integral), law, dt)[0]
              - f_star(_belief(b.mu_q, b.mu_qd - e, integral=b.integral), law, dt)[0]) / (2 * h)
        np.testing.assert_allclose(d_q[:, j], fq, rtol=1e-7)
        np.testing.assert_allclose(d_qd[:, j], fv, rtol=1e-7)


def test_control_law_validation():
    with pytest.raises(InvalidInputError):
        _law(kp=(-1, 0))
    with pytest.raises(InvalidInputError):
        ControlLawParams(np.ones((2, 2)), np.eye(2), np.eye(2), np.zeros(2))
    with pytest.raises(InvalidInputError):
        _law(limit=0.0)
    with pytest.raises(InvalidInputError):
        UAICPrecisions(-np.eye(2), np.eye(2), np.eye(2), np.eye(4), np.eye(2)).validate()


def _consistent(gpr, law, dt=1e-3):
    """Belief and readings with every prediction error zero."""
    b = _belief([-0.4, 0.3], [0.0, 0.0], integral=[0.1, 0.05])
    b.mu_u = f_star(b, law, dt)[0]
    y = SensorReading(b.mu_q.copy(), b.mu_qd.copy(), gpr.predict(b.mu_q))
    return b, y, predict_prior(b, dt)


def _identity_precisions():
    return UAICPrecisions.diagonal(1, 1, 1, 1, 1)


def test_free_energy_zero_when_consistent(grid_gpr):
    law = _law()
    b, y, x_hat = _consistent(grid_gpr, law)
    assert free_energy_uaic(b, y, grid_gpr, x_hat, law, _identity_precisions(), 1e-3) == pytest.approx(0, abs=1e-20)


def test_doubling_position_precision(grid_gpr):
    law = _law()
    b, y, x_hat = _consistent(grid_gpr, law)
    e = np.array([0.3, -0.4])
    y.y_q = y.y_q + e
    P1 = _identity_precisions()
    P2 = UAICPrecisions.diagonal(2, 1, 1, 1, 1)
    F1 = free_energy_uaic(b, y, grid_gpr, x_hat, law, P1, 1e-3)
    F2 = free_energy_uaic(b, y, grid_gpr, x_hat, law, P2, 1e-3)
    assert F2 - F1 == pytest.approx(0.5 * e @ e - np.log(2.0), rel=1e-12)


def _random_spd(rng, n):
    A = rng.normal(size=(n, n))
    return A @ A.T + 0.5 * np.eye(n)


def _random_case(rng, gpr):
    b = _belief(rng.uniform([-1.6, -0.2], [0.1, 0.7]), rng.normal(size=2), rng.normal(size=2) * 5,
                rng.uniform(-0.5, 0.5, 2))
    y = SensorReading(b.mu_q + 0.1 * rng.normal(size=2), b.mu_qd + 0.1 * rng.normal(size=2),
                      gpr.predict(b.mu_q) + 0.05 * rng.normal(size=2))
    P = UAICPrecisions(_random_spd(rng, 2), _random_spd(rng, 2), _random_spd(rng, 2), _random_spd(rng, 4),
                       _random_spd(rng, 2))
    x_hat = b.mu_x + 0.1 * rng.normal(size=4)
    return b, y, x_hat, _law(target=rng.uniform(-1, 0.5, 2)), P


def _oracle(b, y, gpr, x_hat, law, P, dt):
    err = law.target - b.mu_q
    integral = np.clip(b.integral + err * dt, -law.integral_limit, law.integral_limit)
    fu = law.kp @ err + law.ki @ integral - law.kd @ b.mu_qd
    terms = [(y.y_q - b.mu_q, P.yq), (y.y_qd - b.mu_qd, P.yqd), (y.y_v - gpr.predict(b.mu_q), P.yv),
             (b.mu_x - x_hat, P.x), (b.mu_u - fu, P.u)]
    return 0.5 * sum(float(e @ M @ e) - np.linalg.slogdet(M)[1] for e, M in terms)


def test_free_energy_matches_oracle(grid_gpr, rng):
    for _ in range(50):
        b, y, x_hat, law, P = _random_case(rng, grid_gpr)
        F = free_energy_uaic(b, y, grid_gpr, x_hat, law, P, 1e-3)
        assert F == pytest.approx(_oracle(b, y, grid_gpr, x_hat, law, P, 1e-3), rel=1e-12, abs=1e-12)


def _fd(b, y, gpr, x_hat, law, P, dt, h=1e-6):
    z = np.concatenate([b.mu_x, b.mu_u])
    g = np.empty(6)

    def F(v):
        return free_energy_uaic(_belief(v[0:2], v[2:4], v[4:6], b.integral), y, gpr, x_hat, law, P, dt)
    for i in range(6):
        e = np.zeros(6)
        e[i] = h
        g[i] = (F(z + e) - F(z - e)) / (2 * h)
    return g[:4], g[4:]


def test_gradients_match_finite_differences(grid_gpr, rng):
    worst_x = worst_u = 0.0
    for _ in range(100):
        b, y, x_hat, law, P = _random_case(rng, grid_gpr)
        gx, gu = gradients_uaic(b, y, grid_gpr, x_hat, law, P, 1e-3)
        fx, fu = _fd(b, y, grid_gpr, x_hat, law, P, 1e-3)
        worst_x = max(worst_x, np.linalg.norm(gx - fx) / np.linalg.norm(fx))
        worst_u = max(worst_u, np.linalg.norm(gu - fu) / np.linalg.norm(fu))
    assert worst_x < 1e-6 and worst_u < 1e-6


def test_action_gradient_zero_when_action_matches_law(grid_gpr, rng):
    b, y, x_hat, law, P = _random_case(rng, grid_gpr)
    b.mu_u = f_star(b, law, 1e-3)[0]
    _, gu = gradients_uaic(b, y, grid_gpr, x_hat, law, P, 1e-3)
    np.testing.assert_allclose(gu, 0.0, atol=1e-12)


def test_state_gradient_ignores_camera_when_switched_off(grid_gpr, rng):
    b, y, x_hat, law, P = _random_case(rng, grid_gpr)
    P.yv = np.zeros((2, 2))
    gx, _ = gradients_uaic(b, y, grid_gpr, x_hat, law, P, 1e-3)
    y.y_v = y.y_v + rng.normal(size=2)
    gx2, _ = gradients_uaic(b, y, grid_gpr, x_hat, law, P, 1e-3)
    np.testing.assert_array_equal(gx, gx2)


def test_approximate_coupling_drops_law_term(grid_gpr, rng):
    b, y, x_hat, law, P = _random_case(rng, grid_gpr)
    b.mu_u = f_star(b, law, 1e-3)[0]
    exact, _ = gradients_uaic(b, y, grid_gpr, x_hat, law, P, 1e-3)
    approx, _ = gradients_uaic(b, y, grid_gpr, x_hat, law, P, 1e-3, exact_coupling=False)
    np.testing.assert_allclose(exact, approx, rtol=1e-13)


def test_zero_precision_free_energy_stays_finite(grid_gpr, rng):
    b, y, x_hat, law, P = _random_case(rng, grid_gpr)
    P.yq = np.zeros((2, 2))
    assert np.isfinite(free_energy_uaic(b, y, grid_gpr, x_hat, law, P, 1e-3))


def test_global_fixed_point(exact_camera):
    cfg = ScenarioConfig()
    c, dt = cfg.uaic, cfg.dt
    q = np.array([-0.2, 0.5])
    law = _law(target=q)
    grav = gravity_vector(q, P_ARM)
    b = _belief(q, integral=np.linalg.solve(law.ki, grav))
    b.mu_u = f_star(b, law, dt)[0]
    np.testing.assert_allclose(b.mu_u, grav, rtol=1e-14)
    P = UAICPrecisions.diagonal(c.p_yq, c.p_yqd, c.p_yv, c.p_x, c.p_u)
    qt, qdt = q.copy(), np.zeros(2)
    for k in range(500):
        y = SensorReading(qt, qdt, exact_camera.predict(qt), k)
        new, u = controller_step(b, y, exact_camera, law, P, c.kappa_mu, c.kappa_u, dt)
        assert np.abs(new.mu_x - b.mu_x).max() < 1e-9
        assert np.abs(new.mu_u - b.mu_u).max() < 1e-9
        b = new
        qt, qdt = rk4(qt, qdt, u, dt, P_ARM)


def test_divergence_names_the_step(grid_gpr):
    law = _law()
    b = _belief([-0.2, 0.5])
    y = SensorReading([1e300, 1e300], [0, 0], [0, 0])
    P = UAICPrecisions.diagonal(1e10, 1, 1, 1, 1)
    with pytest.raises(ControllerDivergenceError) as err:
        with np.errstate(over="ignore", invalid="ignore"):
            controller_step(b, y, grid_gpr, law, P, 1e10, 1.0, 1.0, step=42)
    assert err.value.step == 42


def test_step_rejects_nonpositive_gains(grid_gpr):
    with pytest.raises(InvalidInputError):
        controller_step(_belief([0, 0]), SensorReading([0, 0], [0, 0], [0, 0]), grid_gpr, _law(),
                        _identity_precisions(), 0.0, 1.0, 1e-3)


def test_closed_loop_reaches_each_waypoint(noiseless_run):
    cfg, q = noiseless_run["cfg"], noiseless_run["q"]
    for target, end in zip(cfg.waypoints, cfg.switch_steps()[1:] + [cfg.steps]):
        assert np.abs(q[end - 1000:end] - target).mean(axis=0).max() < 1e-2


def test_action_belief_converges_to_law(noiseless_run):
    assert noiseless_run["law_gap"][-1000:].max() < 1e-3


def test_steady_state_residuals_are_unbiased(exact_camera):
    cfg = ScenarioConfig(detection=False, duration=10.0)
    res = simulate_batch(cfg, [0, 1, 2], exact_camera, record="full")
    T = 1000
    sigma = np.array([1e-3] * 4 + [1e-2] * 2)
    for i in range(3):
        y = res.full["y"][i, -T:]
        mu_q, mu_qd = res.full["mu_q"][i, -T:], res.full["mu_qd"][i, -T:]
        r = np.concatenate([y[:, :2] - mu_q, y[:, 2:4] - mu_qd, y[:, 4:] - exact_camera.predict(mu_q)], 1)
        assert np.all(np.abs(r.mean(axis=0)) < 3 * sigma / np.sqrt(T))


def _frozen(gpr, q, targets, cfg, noise=0.0, seed=0):
    """u-AIC beliefs against a plant held still at ``q``."""
    c, dt = cfg.uaic, cfg.dt
    rng = np.random.default_rng(seed)
    P = UAICPrecisions.diagonal(c.p_yq, c.p_yqd, c.p_yv, c.p_x, c.p_u)
    law = _law(targets[0])
    b = _belief(q)
    gaps, mus = [], []
    for k, t in enumerate(targets):
        law.target = np.asarray(t, float)
        eta = noise * rng.standard_normal(6) * [1, 1, 1, 1, 10, 10]
        y = SensorReading(q + eta[:2], eta[2:4], gpr.predict(q) + eta[4:], k)
        gaps.append(np.abs(y.y_q - b.mu_q).max())
        b, _ = controller_step(b, y, gpr, law, P, c.kappa_mu, c.kappa_u, dt)
        mus.append(b.mu_x)
    return np.array(gaps), np.array(mus)


def test_goal_change_leaves_belief_unbiased(exact_camera):
    cfg = ScenarioConfig()
    q = np.array([-0.2, 0.5])
    k = 2000
    targets = [q] * k + [np.array([-0.6, 0.2])] * 12000
    _, mus = _frozen(exact_camera, q, targets, cfg)
    assert np.abs(mus[-1] - mus[k - 1]).max() < 1e-6


def test_goal_change_keeps_readings_close(exact_camera):
    cfg = ScenarioConfig()
    q = np.array([-0.2, 0.5])
    k = 2000
    targets = [q] * k + [np.array([-0.6, 0.2])] * 500
    gaps, _ = _frozen(exact_camera, q, targets, cfg, noise=0.001)
    assert gaps[k:].max() < 6 * 0.001
