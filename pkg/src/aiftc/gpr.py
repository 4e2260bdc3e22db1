"""Gaussian process model of the camera output as a function of joint angles.

The kernel is ``sf2 * exp(-0.5 * d' Theta d) + sn2 * [same index]`` with
``Theta`` diagonal. Both output coordinates share hyperparameters. The
posterior mean can optionally be taken around the training-output mean
(``center=True``), which makes constant data give a constant, flat model.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from .errors import IllConditionedKernelError, InvalidInputError

log = logging.getLogger(__name__)

ARTIFACT_FORMAT = "aiftc-gpr"
ARTIFACT_VERSION = 1
JITTER = 1e-9


@dataclass(frozen=True)
class GPRHyperparams:
    signal_var: float = 1.0
    noise_var: float = 1e-4
    theta: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        if self.signal_var <= 0 or self.noise_var < 0:
            raise InvalidInputError("need signal_var > 0 and noise_var >= 0")
        if len(self.theta) != 2 or min(self.theta) <= 0:
            raise InvalidInputError("theta must hold two positive entries")

    @property
    def Theta(self) -> np.ndarray:
        return np.diag(np.asarray(self.theta, dtype=float))

    @property
    def length_scales(self) -> np.ndarray:
        return 1.0 / np.sqrt(np.asarray(self.theta, dtype=float))

    def to_log(self) -> np.ndarray:
        return np.log([self.signal_var, self.noise_var, *self.theta])

    @classmethod
    def from_log(cls, z) -> "GPRHyperparams":
        e = np.exp(np.asarray(z, dtype=float))
        return cls(float(e[0]), float(e[1]), (float(e[2]), float(e[3])))


@dataclass(frozen=True)
class GPRTrainingSet:
    q: np.ndarray   # (N, 2) joint configurations
    yv: np.ndarray  # (N, 2) camera outputs (x, z)
    min_points: int = 4

    def __post_init__(self):
        q = np.atleast_2d(np.asarray(self.q, dtype=float))
        yv = np.atleast_2d(np.asarray(self.yv, dtype=float))
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "yv", yv)
        if q.ndim != 2 or q.shape[1] != 2 or yv.shape != q.shape:
            raise InvalidInputError("training set needs (N, 2) configurations and outputs")
        if len(q) < self.min_points:
            raise InvalidInputError(f"need at least {self.min_points} training points, got {len(q)}")
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(yv))):
            raise InvalidInputError("training data must be finite")
        if len(q) > 1:
            d2 = _sqdist(q, q, np.ones(2))
            d2[np.diag_indices_from(d2)] = np.inf
            if np.sqrt(d2.min()) <= 1e-6:
                raise InvalidInputError("training configurations contain duplicates")

    def __len__(self):
        return len(self.q)

    def subset(self, idx) -> "GPRTrainingSet":
        return GPRTrainingSet(self.q[idx], self.yv[idx], min_points=1)


def _sqdist(a, b, theta):
    """Theta-weighted squared distances between rows of ``a`` and ``b``."""
    diff = a[..., None, :] - b
    return np.einsum("...k,k,...k->...", diff, theta, diff)


def kernel(qa, qb, h: GPRHyperparams, same_index: bool = False) -> float:
    d = np.asarray(qa, dtype=float) - np.asarray(qb, dtype=float)
    val = h.signal_var * np.exp(-0.5 * d @ h.Theta @ d)
    if same_index:
        val += h.noise_var
    return float(val)


def kernel_matrix(a, b, h: GPRHyperparams) -> np.ndarray:
    """Noise-free cross-covariance between row sets ``a`` and ``b``."""
    theta = np.asarray(h.theta, dtype=float)
    return h.signal_var * np.exp(-0.5 * _sqdist(np.asarray(a, float), np.asarray(b, float), theta))


def _cholesky(K):
    try:
        return np.linalg.cholesky(K), 0.0
    except np.linalg.LinAlgError:
        pass
    log.warning("kernel factorization failed; retrying with %.1e diagonal jitter", JITTER)
    try:
        return np.linalg.cholesky(K + JITTER * np.eye(len(K))), JITTER
    except np.linalg.LinAlgError:
        raise IllConditionedKernelError(float(np.linalg.eigvalsh(K)[0])) from None


@dataclass(frozen=True)
class GPRModel:
    train: GPRTrainingSet
    hyper: GPRHyperparams
    chol: np.ndarray = field(repr=False)
    alpha: np.ndarray = field(repr=False)   # (N, 2): columns alpha_x, alpha_z
    mean: np.ndarray = field(repr=False)    # (2,) constant prior mean
    centered: bool = True
    jitter: float = 0.0

    @property
    def alpha_x(self) -> np.ndarray:
        return self.alpha[:, 0]

    @property
    def alpha_z(self) -> np.ndarray:
        return self.alpha[:, 1]

    def with_outputs(self, yv) -> "GPRModel":
        """Same inputs and hyperparameters, new training outputs."""
        return fit(GPRTrainingSet(self.train.q, yv, min_points=1), self.hyper,
                   center=self.centered)

    def predict(self, q) -> np.ndarray:
        ks = kernel_matrix(np.asarray(q, dtype=float), self.train.q, self.hyper)
        return self.mean + ks @ self.alpha

    def predict_with_derivative(self, q):
        """Mean camera output at ``q`` and its Jacobian d g / d q.

        ``q`` may carry leading batch dimensions; the Jacobian has shape
        ``(..., 2, 2)`` with rows (x, z) and columns (q1, q2).
        """
        q = np.asarray(q, dtype=float)
        lead = q.shape[:-1]
        flat = q.reshape(-1, 2)
        theta = self.hyper.theta
        X = self.train.q
        d1 = flat[:, 0:1] - X[:, 0]                        # (M, N)
        d2 = flat[:, 1:2] - X[:, 1]
        ks = self.hyper.signal_var * np.exp(-0.5 * (theta[0] * d1 * d1 + theta[1] * d2 * d2))
        g = self.mean + ks @ self.alpha
        # d k_i / d q = -Theta (q - q_i) k_i
        J = np.empty((len(flat), 2, 2))
        J[:, :, 0] = -theta[0] * ((ks * d1) @ self.alpha)
        J[:, :, 1] = -theta[1] * ((ks * d2) @ self.alpha)
        return g.reshape(lead + (2,)), J.reshape(lead + (2, 2))


def fit(train: GPRTrainingSet, h: GPRHyperparams, center: bool = True) -> GPRModel:
    K = kernel_matrix(train.q, train.q, h)
    K[np.diag_indices_from(K)] += h.noise_var
    L, jitter = _cholesky(K)
    mean = train.yv.mean(axis=0) if center else np.zeros(2)
    alpha = cho_solve((L, True), train.yv - mean)
    return GPRModel(train, h, L, alpha, mean, center, jitter)


# ---------------------------------------------------------------------------
# Hyperparameter selection


def log_marginal_likelihood(train: GPRTrainingSet, h: GPRHyperparams, center: bool = True,
                            grad: bool = False):
    """Sum over both outputs of the GP log evidence, optionally with the
    gradient with respect to the log hyperparameters
    (log sf2, log sn2, log theta1, log theta2)."""
    q = train.q
    n = len(q)
    theta = np.asarray(h.theta, dtype=float)
    diff = q[:, None, :] - q[None, :, :]
    Kf = h.signal_var * np.exp(-0.5 * np.einsum("ijk,k,ijk->ij", diff, theta, diff))
    K = Kf + h.noise_var * np.eye(n)
    try:
        L = np.linalg.cholesky(K)
    except np.linalg.LinAlgError:
        return (-np.inf, np.zeros(4)) if grad else -np.inf
    y = train.yv - (train.yv.mean(axis=0) if center else 0.0)
    alpha = cho_solve((L, True), y)
    d = y.shape[1]
    lml = -0.5 * np.sum(y * alpha) - d * np.sum(np.log(np.diag(L))) - 0.5 * d * n * np.log(2 * np.pi)
    if not grad:
        return float(lml)
    Linv = solve_triangular(L, np.eye(n), lower=True)
    Kinv = Linv.T @ Linv
    W = alpha @ alpha.T - d * Kinv
    g = np.empty(4)
    g[0] = 0.5 * np.sum(W * Kf)
    g[1] = 0.5 * h.noise_var * np.trace(W)
    for i in range(2):
        dK = Kf * (-0.5 * theta[i] * diff[:, :, i] ** 2)
        g[2 + i] = 0.5 * np.sum(W * dK)
    return float(lml), g


@dataclass
class HyperparamFit:
    hyper: GPRHyperparams
    log_likelihood: float
    initial_log_likelihood: float
    history: list = field(default_factory=list)
    improved: bool = True


_LOG_BOUNDS = np.array([[-9.0, 6.0], [-18.0, 2.0], [-9.0, 9.0], [-9.0, 9.0]])


def _ascend(train, z0, center, max_iter, tol):
    z = np.clip(z0, _LOG_BOUNDS[:, 0], _LOG_BOUNDS[:, 1])
    f, g = log_marginal_likelihood(train, GPRHyperparams.from_log(z), center, grad=True)
    history = [f]
    step = 0.1
    for _ in range(max_iter):
        if not np.isfinite(f):
            break
        gnorm = np.linalg.norm(g)
        if gnorm < tol:
            break
        accepted = False
        while step > 1e-10:
            z_new = np.clip(z + step * g / gnorm, _LOG_BOUNDS[:, 0], _LOG_BOUNDS[:, 1])
            f_new, g_new = log_marginal_likelihood(train, GPRHyperparams.from_log(z_new), center, grad=True)
            if f_new > f:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        if f_new - f < tol * max(1.0, abs(f)):
            z, f, g = z_new, f_new, g_new
            history.append(f)
            break
        z, f, g = z_new, f_new, g_new
        history.append(f)
        step = min(step * 2.0, 2.0)
    return z, f, history


def optimize_hyperparams(train: GPRTrainingSet, init: GPRHyperparams, center: bool = True,
                         restarts: int = 3, max_iter: int = 200, seed: int = 0,
                         tol: float = 1e-9) -> HyperparamFit:
    """Maximise the log marginal likelihood by backtracking gradient ascent in
    log-parameter space, from ``init`` plus ``restarts`` random perturbations.
    The returned fit is never worse than ``init``."""
    rng = np.random.default_rng(seed)
    z_init = init.to_log()
    f_init = log_marginal_likelihood(train, init, center)
    best_z, best_f, best_hist = z_init, f_init, [f_init]
    starts = [z_init] + [z_init + rng.uniform(-2.0, 2.0, size=4) for _ in range(restarts)]
    for z0 in starts:
        z, f, hist = _ascend(train, z0, center, max_iter, tol)
        if f > best_f:
            best_z, best_f, best_hist = z, f, hist
    improved = best_f > f_init
    if not improved:
        warnings.warn("marginal likelihood did not improve; keeping initial hyperparameters",
                      RuntimeWarning, stacklevel=2)
    hyper = GPRHyperparams.from_log(best_z) if improved else init
    return HyperparamFit(hyper, float(best_f), float(f_init), best_hist, improved)


# ---------------------------------------------------------------------------
# Persistence


def save_training_csv(path, train: GPRTrainingSet):
    data = np.column_stack([train.q, train.yv])
    np.savetxt(path, data, delimiter=",", header="q1,q2,yv_x,yv_z", comments="", fmt="%.17g")


def load_training_csv(path) -> GPRTrainingSet:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if data.shape[1] != 4:
        raise InvalidInputError(f"{path}: expected columns q1,q2,yv_x,yv_z")
    return GPRTrainingSet(data[:, :2], data[:, 2:])


def save_model(path, model: GPRModel):
    """Write an ``.npz`` artifact holding the training set and hyperparameters."""
    h = model.hyper
    np.savez(path, format=np.array(ARTIFACT_FORMAT), version=np.array(ARTIFACT_VERSION),
             q=model.train.q, yv=model.train.yv,
             hyper=np.array([h.signal_var, h.noise_var, *h.theta]),
             center=np.array(model.centered), alpha=model.alpha)


def load_model(path) -> GPRModel:
    with np.load(path) as z:
        if str(z["format"]) != ARTIFACT_FORMAT:
            raise InvalidInputError(f"{path} is not a GPR artifact")
        if int(z["version"]) != ARTIFACT_VERSION:
            raise InvalidInputError(f"{path}: unsupported artifact version {int(z['version'])}")
        hv = z["hyper"]
        h = GPRHyperparams(float(hv[0]), float(hv[1]), (float(hv[2]), float(hv[3])))
        model = fit(GPRTrainingSet(z["q"], z["yv"], min_points=1), h, center=bool(z["center"]))
        if not np.allclose(model.alpha, z["alpha"], rtol=1e-8, atol=1e-10):
            raise InvalidInputError(f"{path}: stored weights do not match refit")
    return model


def with_hyper(model: GPRModel, h: GPRHyperparams) -> GPRModel:
    return fit(model.train, h, center=model.centered)


__all__ = [
    "GPRHyperparams", "GPRTrainingSet", "GPRModel", "HyperparamFit", "kernel", "kernel_matrix",
    "fit", "log_marginal_likelihood", "optimize_hyperparams", "save_model", "load_model",
    "save_training_csv", "load_training_csv", "with_hyper",
]
