import numpy as np
import pytest

from aiftc import gpr as G
from aiftc.harness import pipeline
from aiftc.harness.config import ScenarioConfig, calibration_key

# hyperparameters the default training grid optimizes to; fixed here so unit
# tests skip the optimizer
GRID_HYPER = G.GPRHyperparams(0.6445, 1.0e-4, (1.057, 0.537))


@pytest.fixture(scope="session")
def scenario():
    return ScenarioConfig()


@pytest.fixture(scope="session")
def grid_gpr(scenario):
    """Camera model on the experiment grid with pre-optimized hyperparameters."""
    return G.fit(pipeline.training_set(scenario), GRID_HYPER)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def short_setup(tmp_path_factory):
    """A 1.5 s scenario with its own GPR and a 100-run calibration on disk."""
    d = tmp_path_factory.mktemp("short")
    cfg = ScenarioConfig(duration=1.5, switch_times=[0.0, 1.0],
                         gpr_path=str(d / "gpr.npz"), calibration_path=str(d / "cal.npz"))
    cfg = cfg.replace(**{"fdi.calibration_runs": 100, "fdi.stationary_window": 300,
                         "fdi.plateau_window": 50})
    model = G.fit(pipeline.training_set(cfg), GRID_HYPER)
    G.save_model(cfg.gpr_path, model)
    cal = pipeline.build_calibration(cfg, model, path=cfg.calibration_path)
    assert cal.key == calibration_key(cfg, model)
    return cfg, model, cal


class ExactCamera:
    """Observation model that is the true distorted kinematics (no regression error)."""

    def __init__(self, params=None, cam=None):
        from aiftc.plant import CameraParams, ManipulatorParams
        self.params = params or ManipulatorParams()
        self.cam = cam or CameraParams()

    def predict(self, q):
        from aiftc.plant import camera_project, forward_kinematics
        return camera_project(forward_kinematics(np.asarray(q, dtype=float), self.params), self.cam,
                              check=False)

    def predict_with_derivative(self, q, h=1e-6):
        q = np.asarray(q, dtype=float)
        J = np.empty(q.shape + (2,))
        for j in range(2):
            e = np.zeros(2)
            e[j] = h
            J[..., :, j] = (self.predict(q + e) - self.predict(q - e)) / (2 * h)
        return self.predict(q), J


@pytest.fixture(scope="session")
def exact_camera():
    return ExactCamera()


@pytest.fixture(scope="session")
def noiseless_run(exact_camera):
    """Zero-noise double point-to-point u-AIC run with an exact camera model.

    Logs true positions, |mu_u - f*| and the pre-update residual per step.
    """
    from aiftc.plant import ManipulatorParams, SensorReading, rk4
    from aiftc.uaic import ControlLawParams, UAICBelief, UAICPrecisions, controller_step, f_star

    cfg = ScenarioConfig()
    c, dt, arm = cfg.uaic, cfg.dt, ManipulatorParams()
    P = UAICPrecisions.diagonal(c.p_yq, c.p_yqd, c.p_yv, c.p_x, c.p_u)
    law = ControlLawParams(np.array(c.kp), np.array(c.ki), np.array(c.kd), np.array(cfg.waypoints[0]),
                           c.integral_limit)
    b = UAICBelief.at_rest(cfg.q0)
    q, qd = np.array(cfg.q0), np.zeros(2)
    qs, gap, resid = [], [], []
    for k, target in enumerate(cfg.target_schedule()):
        law.target = target
        y = SensorReading(q, qd, exact_camera.predict(q), k)
        b, u, info = controller_step(b, y, exact_camera, law, P, c.kappa_mu, c.kappa_u, dt,
                                     torque_limit=c.torque_limit, info=True)
        qs.append(q)
        resid.append(info.residual)
        gap.append(np.abs(b.mu_u - f_star(b, law, dt)[0]).max())
        q, qd = rk4(q, qd, u, dt, arm)
    return {"cfg": cfg, "q": np.array(qs), "law_gap": np.array(gap), "residual": np.array(resid)}
