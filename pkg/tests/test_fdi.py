import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from aiftc import fdi
from aiftc.errors import InsufficientCalibrationError, InvalidInputError, IsolationEstimatorError
from aiftc.harness.config import ScenarioConfig
from aiftc.harness.sim import calibrate
from aiftc.plant import SensorReading
from aiftc.uaic import ControlLawParams, UAICBelief, UAICPrecisions, gradients_uaic, predict_prior


def _stats(mean, cov, T=10):
    mean = np.tile(mean, (T, 1))
    cov = np.tile(cov, (T, 1, 1))
    return fdi.ResidualStats(mean, cov, mean[0], cov[0], np.zeros(T, dtype=bool), 100)


def test_residual_zero_when_readings_match(grid_gpr):
    b = UAICBelief.at_rest([-0.3, 0.4])
    b.mu_qd = np.array([0.1, -0.2])
    y = SensorReading(b.mu_q, b.mu_qd, grid_gpr.predict(b.mu_q), 7)
    r = fdi.compute_residual(y, b, grid_gpr)
    np.testing.assert_array_equal(r.r, 0.0)
    assert r.k == 7


def test_residual_channel_order(grid_gpr):
    b = UAICBelief.at_rest([-0.3, 0.4])
    g = grid_gpr.predict(b.mu_q)
    y = SensorReading(b.mu_q + [1, 2], [3, 4], g + [5, 6])
    np.testing.assert_allclose(fdi.compute_residual(y, b, grid_gpr).r, [1, 2, 3, 4, 5, 6], atol=1e-12)
    assert fdi.CHANNELS == ("q1", "q2", "qd1", "qd2", "vx", "vz")


def test_residual_must_be_finite():
    with pytest.raises(InvalidInputError):
        fdi.Residual(np.array([np.nan] * 6))


def test_zero_noise_steady_state_residual(noiseless_run):
    r = noiseless_run["residual"]
    assert np.linalg.norm(r[-1000:], axis=1).max() < 1e-6


def test_frozen_encoder_residual_grows_with_motion(exact_camera):
    # joint 1 moves away from the value it froze at; belief follows the true state
    kf, rate = 100, 0.2
    frozen = None
    r1 = []
    for k in range(400):
        q = np.array([-0.6 + rate * k * 1e-3, 0.2])
        b = UAICBelief(q, np.array([rate, 0.0]), np.zeros(2), np.zeros(2))
        y_q = q.copy()
        if k >= kf:
            frozen = q[0] if frozen is None else frozen
            y_q[0] = frozen
        y = SensorReading(y_q, b.mu_qd, exact_camera.predict(q), k)
        r1.append(abs(fdi.compute_residual(y, b, exact_camera).r[0]))
    assert np.all(np.diff(r1[kf:]) > 0)


def test_identical_traces_give_regularized_zero_covariance():
    traces = np.tile(np.arange(6.0), (120, 30, 1))
    s = fdi.calibrate_stats(traces, stationary_window=10, plateau_window=1)
    np.testing.assert_allclose(s.cov, np.broadcast_to(1e-12 * np.eye(6), s.cov.shape), rtol=0, atol=1e-24)
    np.testing.assert_allclose(s.mean, traces[0], rtol=1e-15)


def test_gaussian_calibration_within_wishart_error():
    rng = np.random.default_rng(5)
    A = rng.normal(size=(6, 6))
    Sigma = A @ A.T / 6 + 0.1 * np.eye(6)
    M, T = 500, 40
    traces = rng.multivariate_normal(np.arange(6.0), Sigma, size=(M, T))
    s = fdi.calibrate_stats(traces, stationary_window=T, plateau_window=1)
    sd = np.sqrt((Sigma**2 + np.outer(np.diag(Sigma), np.diag(Sigma))) / (M - 1))
    z = np.abs(s.cov - Sigma) / sd
    assert z.max() < 5.0
    assert np.abs(z.mean() - np.sqrt(2 / np.pi)) < 0.1   # mean |N(0,1)|


def test_streaming_accumulator_matches_batch_moments(rng):
    traces = rng.normal(size=(30, 5, 3)) + 100.0
    batch = fdi.ResidualAccumulator(5, 3)
    batch.add(traces[:10])
    batch.add(traces[10:])
    stream = fdi.ResidualAccumulator(5, 3)
    for lo, hi in ((0, 10), (10, 30)):
        for k in range(5):
            stream.add_step(k, traces[lo:hi, k])
        stream.commit(hi - lo)
    for acc in (batch, stream):
        mean, cov = acc.moments()
        np.testing.assert_allclose(mean, traces.mean(axis=0), rtol=1e-12)
        ref = np.stack([np.cov(traces[:, k].T) for k in range(5)])
        np.testing.assert_allclose(cov, ref, rtol=1e-9)


def test_too_few_runs_is_rejected():
    with pytest.raises(InsufficientCalibrationError):
        fdi.calibrate_stats(np.zeros((99, 10, 6)))
    with pytest.raises(InsufficientCalibrationError):
        fdi.calibrate_stats(np.zeros((1, 10, 6)), min_runs=1)


def test_stats_artifact_round_trip(tmp_path, rng):
    s = fdi.calibrate_stats(rng.normal(size=(100, 20, 6)), stationary_window=10, plateau_window=1, key="abc")
    s.save(tmp_path / "s.npz")
    back = fdi.ResidualStats.load(tmp_path / "s.npz")
    for f in ("mean", "cov", "stationary_mean", "stationary_cov", "settled"):
        np.testing.assert_array_equal(getattr(back, f), getattr(s, f))
    assert back.key == "abc" and back.n_runs == 100


def test_stationary_fallback_beyond_horizon():
    s = _stats(np.zeros(6), np.eye(6))
    s.stationary_mean = np.ones(6)
    assert fdi.mahalanobis(np.ones(6), s, 50) == 0.0
    assert fdi.mahalanobis(np.zeros(6), s, 3) == 0.0


def test_settled_steps_use_stationary_moments():
    T = 600
    mean = np.zeros((T, 2))
    mean[:100] = 5.0   # transient
    cov = np.tile(np.eye(2), (T, 1, 1))
    mask = fdi.settled_mask(mean, cov, np.zeros(2), np.eye(2), window=50)
    assert not mask[:125].any() and mask[200:575].all()


def test_mahalanobis_examples():
    s = _stats(np.full(6, 0.5), np.eye(6))
    assert fdi.mahalanobis(np.full(6, 0.5), s, 0) == 0.0
    r = np.full(6, 0.5) + [3, 4, 0, 0, 0, 0]
    assert fdi.mahalanobis(r, s, 0) == pytest.approx(5.0, rel=1e-15)


def test_mahalanobis_reports_singular_covariance():
    cov = np.eye(6)
    cov[4, 4] = 0.0
    with pytest.raises(np.linalg.LinAlgError, match="4, 4"):
        fdi.mahalanobis(np.zeros(6), _stats(np.zeros(6), cov), 0)


finite = st.floats(-10, 10, allow_nan=False)


@settings(max_examples=60, deadline=None)
@given(A=arrays(float, (6, 6), elements=finite), r=arrays(float, 6, elements=finite),
       seed=st.integers(0, 2**16))
def test_mahalanobis_affine_invariant(A, r, seed):
    if abs(np.linalg.det(A)) < 1e-2 or np.linalg.cond(A) > 1e4:
        return
    rng = np.random.default_rng(seed)
    B = rng.normal(size=(6, 6))
    C = B @ B.T + np.eye(6)
    mean = rng.normal(size=6)
    d = fdi.mahalanobis(r, _stats(mean, C), 0)
    d2 = fdi.mahalanobis(A @ r, _stats(A @ mean, A @ C @ A.T), 0)
    assert d2 == pytest.approx(d, rel=1e-8, abs=1e-8)


def test_detect_boundary_is_not_an_alarm():
    cfg = fdi.DetectionConfig(alpha=0.3, n=6, use_squared=False)
    alarm, norm = fdi.detect(20.0, cfg)
    assert not alarm and norm == 1.0
    assert not fdi.detect(0.0, cfg)[0]
    assert fdi.detect(20.0 + 1e-9, cfg)[0]


def test_detect_squares_by_default():
    cfg = fdi.DetectionConfig(alpha=0.3, n=6)
    assert cfg.threshold == pytest.approx(20.0)
    assert fdi.detect(np.sqrt(20.0) * 1.001, cfg)[0]
    assert not fdi.detect(np.sqrt(20.0) * 0.999, cfg)[0]
    assert fdi.detect(3.0, cfg)[1] == pytest.approx(9.0 / 20.0)


def test_detection_config_validation():
    for bad in (0.0, 1.5, -0.1):
        with pytest.raises(InvalidInputError):
            fdi.DetectionConfig(alpha=bad)
    assert fdi.DetectionConfig().for_subsystem(4).threshold == pytest.approx(400.0)


def test_moving_average_matches_convolution(rng):
    x = rng.normal(size=(2500, 3))
    ma = fdi.MovingAverage(100, (3,))
    out = np.array([ma(v) for v in x])
    ref = np.array([x[max(0, k - 99):k + 1].mean(axis=0) for k in range(len(x))])
    np.testing.assert_allclose(out, ref, atol=1e-13)


def test_moving_average_width_one_is_identity(rng):
    x = rng.normal(size=3)
    np.testing.assert_array_equal(fdi.MovingAverage(1, (3,))(x), x)


def test_confirmation_needs_consecutive_steps():
    c = fdi.Confirmation(3)
    seq = [1, 1, 0, 1, 1, 1, 1, 0]
    assert [bool(c(bool(s))) for s in seq] == [False, False, False, False, False, True, True, False]


@pytest.mark.parametrize("alarm, p, v, out", [
    (True, True, False, fdi.ENCODER),
    (True, False, True, fdi.CAMERA),
    (True, True, True, fdi.UNKNOWN),
    (True, False, False, None),
    (False, True, False, None),
])
def test_isolation_table(alarm, p, v, out):
    assert fdi.isolate(alarm, p, v) == out


def _run_isolator(steps, window=50):
    iso = fdi.Isolator(1, window)
    newly = []
    for k, (a, p, v) in enumerate(steps):
        newly.append(bool(iso.update(k, np.array([a]), np.array([p]), np.array([v]))[0]))
    return iso, newly


def test_isolator_names_proprioceptive_fault():
    iso, newly = _run_isolator([(False, False, False)] * 5 + [(True, False, False)] * 3 + [(True, True, False)])
    v = iso.verdict_for(0)
    assert v.detected and v.detection_step == 5
    assert v.location == fdi.ENCODER and v.isolation_step == 8 and v.code == 2
    assert newly[8] and sum(newly) == 1


def test_isolator_gives_unknown_after_quiet_window_and_rearms():
    quiet = [(True, False, False)] * 50
    iso, _ = _run_isolator(quiet)
    assert iso.verdict_for(0).location == fdi.UNKNOWN and iso.isolation_step[0] == 49
    iso, _ = _run_isolator(quiet + [(False, False, False)] * 5 + [(True, False, True)])
    assert iso.verdict_for(0).location == fdi.CAMERA and iso.isolation_step[0] == 55


def test_isolator_unknown_verdict():
    iso, newly = _run_isolator([(True, False, False)] * 50)
    assert iso.verdict_for(0).location == fdi.UNKNOWN
    assert not any(newly)


def test_concrete_verdict_is_final():
    iso, _ = _run_isolator([(True, False, True), (True, True, False), (True, True, True)])
    assert iso.verdict_for(0).location == fdi.CAMERA and iso.isolation_step[0] == 0


def test_fault_verdict_validation():
    with pytest.raises(InvalidInputError):
        fdi.FaultVerdict(False, None, fdi.CAMERA)
    with pytest.raises(InvalidInputError):
        fdi.FaultVerdict(True, 10, "gearbox", 12)
    with pytest.raises(InvalidInputError):
        fdi.FaultVerdict(True, 10, fdi.CAMERA, 9)
    assert fdi.FaultVerdict().code == 0


def _precisions():
    return UAICPrecisions.diagonal(1e5, 4e6, 1e4, 2e7, 1.0)


def test_recover_camera_zeroes_only_visual_precision():
    P = _precisions()
    R = fdi.recover(P, fdi.FaultVerdict(True, 1, fdi.CAMERA, 2))
    np.testing.assert_array_equal(R.yv, 0.0)
    for n in ("yq", "yqd", "x", "u"):
        np.testing.assert_array_equal(getattr(R, n), getattr(P, n))


def test_recover_encoder():
    P = _precisions()
    v = fdi.FaultVerdict(True, 1, fdi.ENCODER, 2)
    R = fdi.recover(P, v)
    np.testing.assert_array_equal(R.yq, 0.0)
    np.testing.assert_array_equal(R.yqd, 0.0)
    np.testing.assert_array_equal(R.yv, P.yv)
    R2 = fdi.recover(P, v, zero_velocity=False)
    np.testing.assert_array_equal(R2.yq, 0.0)
    np.testing.assert_array_equal(R2.yqd, P.yqd)


def test_recover_unknown_is_a_noop_with_warning():
    P = _precisions()
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        assert fdi.recover(P, fdi.FaultVerdict(True, 1, fdi.UNKNOWN, 2)) is P
    assert caught


def test_recovered_gradient_ignores_encoder(grid_gpr, rng):
    P = fdi.recover(_precisions(), fdi.FaultVerdict(True, 1, fdi.ENCODER, 2))
    b = UAICBelief(np.array([-0.5, 0.3]), np.array([0.1, 0.0]), np.array([3.0, 1.0]), np.zeros(2))
    law = ControlLawParams(np.diag([50.0, 30.0]), np.diag([30.0, 20.0]), np.diag([25.0, 15.0]),
                           np.array([-0.6, 0.2]), 3.0)
    y = SensorReading(b.mu_q + 0.01, b.mu_qd, grid_gpr.predict(b.mu_q))
    x_hat = predict_prior(b, 1e-3)
    g1, _ = gradients_uaic(b, y, grid_gpr, x_hat, law, P, 1e-3)
    y.y_q = y.y_q + rng.normal(size=2)
    y.y_qd = y.y_qd + rng.normal(size=2)
    g2, _ = gradients_uaic(b, y, grid_gpr, x_hat, law, P, 1e-3)
    np.testing.assert_array_equal(g1, g2)


def test_recover_runs_edits_only_masked_runs():
    P = _precisions().batched(3)
    fdi.recover_runs(P, np.array([2, 3, 2]), np.array([True, True, False]), zero_velocity=True)
    assert not P.yq[0].any() and not P.yqd[0].any() and P.yv[0].any()
    assert P.yq[1].any() and not P.yv[1].any()
    assert P.yq[2].any() and P.yqd[2].any() and P.yv[2].any()


def test_isolation_estimators_use_their_own_sensors(grid_gpr):
    P = _precisions()
    gains = fdi.IsolationGains(5e-6, 1e-3)
    b = fdi.EstimatorBelief(np.array([-0.6, 0.2]), np.zeros(2))
    y = SensorReading(b.mu_q, b.mu_qd, grid_gpr.predict(b.mu_q))
    p1, v1, r_p, r_v = fdi.isolation_estimators_step(y, b, b.copy(), grid_gpr, P, gains, 1e-3)
    np.testing.assert_allclose(r_p, 0.0, atol=1e-15)
    np.testing.assert_allclose(r_v, 0.0, atol=1e-15)
    y_cam = SensorReading(y.y_q, y.y_qd, y.y_v + 0.04)
    p2, v2, _, _ = fdi.isolation_estimators_step(y_cam, b, b.copy(), grid_gpr, P, gains, 1e-3)
    np.testing.assert_array_equal(p2.mu_x, p1.mu_x)
    assert np.abs(v2.mu_q - v1.mu_q).max() > 0
    y_enc = SensorReading(y.y_q + 0.01, y.y_qd, y.y_v)
    p3, v3, _, _ = fdi.isolation_estimators_step(y_enc, b, b.copy(), grid_gpr, P, gains, 1e-3)
    np.testing.assert_array_equal(v3.mu_x, v1.mu_x)
    assert np.abs(p3.mu_q - p1.mu_q).max() > 0


def test_estimator_gradient_step_lowers_its_free_energy(grid_gpr, rng):
    P = UAICPrecisions.diagonal(1.0, 1.0, 1.0, 1.0, 1.0)
    b = fdi.EstimatorBelief(np.array([-0.6, 0.2]), np.array([0.1, -0.1]))
    y = SensorReading(b.mu_q + 0.05 * rng.normal(size=2), b.mu_qd + 0.05 * rng.normal(size=2),
                      grid_gpr.predict(b.mu_q) + 0.05 * rng.normal(size=2))
    x_hat = predict_prior(b, 1e-3)
    p, v, _, _ = fdi.isolation_estimators_step(y, b, b.copy(), grid_gpr, P, fdi.IsolationGains(10.0, 10.0), 1e-3)
    assert fdi.free_energy_proprio(p, y, P, x_hat) < fdi.free_energy_proprio(b, y, P, x_hat)
    assert fdi.free_energy_visual(v, y, grid_gpr, P, x_hat) < fdi.free_energy_visual(b, y, grid_gpr, P, x_hat)


def test_estimator_divergence_is_reported(grid_gpr):
    P = UAICPrecisions.diagonal(1e300, 1.0, 1.0, 1.0, 1.0)
    b = fdi.EstimatorBelief(np.array([-0.6, 0.2]), np.zeros(2))
    y = SensorReading(b.mu_q + 1e300, b.mu_qd, grid_gpr.predict(b.mu_q))
    with pytest.raises(IsolationEstimatorError) as err, np.errstate(over="ignore", invalid="ignore"):
        fdi.isolation_estimators_step(y, b, b.copy(), grid_gpr, P, fdi.IsolationGains(1e10, 1.0), 1.0, step=3)
    assert err.value.step == 3


def test_encoder_channel_spread_matches_sensor_noise(grid_gpr):
    cfg = ScenarioConfig(duration=5.0, waypoints=[[-0.6, 0.2]], switch_times=[0.0]).replace(
        **{"fdi.smoothing": 1, "fdi.stationary_window": 1000})
    cal = calibrate(cfg, grid_gpr, runs=100)
    sd = np.sqrt(np.diag(cal.main.stationary_cov))
    assert np.all((sd[:2] >= 0.5e-3) & (sd[:2] <= 2e-3))
