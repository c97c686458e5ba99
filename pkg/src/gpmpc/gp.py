"""Gaussian-process transition models.

One independent GP with an anisotropic RBF kernel per output dimension,
mapping ``(state, control)`` tuples to per-dimension state differences.
Angle dimensions of the state are additionally represented by (sin, cos)
pairs in the GP input; the raw angle remains the propagated state
variable. Hyperparameters are chosen by evidence maximization in
log-parameter space.

Kernel convention: ``k(a, b) = signal_variance * exp(-0.5 * sum_k
(a_k - b_k)^2 / length_scales[k])``, i.e. ``length_scales`` holds the
squared-distance scales (the diagonal of the kernel metric).
"""

from __future__ import annotations

import json
import logging
import os
import tempfile
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from scipy.linalg import cho_solve, cholesky, solve_triangular
from scipy.optimize import minimize

logger = logging.getLogger(__name__)

LENGTH_SCALE_FLOOR = 1e-3
NOISE_FLOOR = 1e-6
SIGNAL_FLOOR = 1e-8

_LOG_2PI = float(np.log(2.0 * np.pi))


class FactorizationError(RuntimeError):
    """Kernel matrix is too ill-conditioned to factorize."""


def feature_map(raw, state_dim, angle_indices):
    """Map raw ``[state, control]`` rows to GP input features.

    Feature layout is ``[state, sin(angles), cos(angles), control]``.
    """
    raw = np.atleast_2d(np.asarray(raw, dtype=float))
    x = raw[:, :state_dim]
    u = raw[:, state_dim:]
    if not angle_indices:
        return np.concatenate([x, u], axis=1)
    ang = x[:, list(angle_indices)]
    return np.concatenate([x, np.sin(ang), np.cos(ang), u], axis=1)


def feature_dim(state_dim, control_dim, angle_indices):
    return state_dim + 2 * len(angle_indices) + control_dim


@dataclass(frozen=True)
class KernelHyper:
    """RBF kernel hyperparameters for one output dimension."""

    signal_variance: float
    length_scales: np.ndarray
    noise_variance: float

    def __post_init__(self):
        object.__setattr__(
            self, "length_scales", np.asarray(self.length_scales, dtype=float)
        )
        if self.signal_variance < 0:
            raise ValueError("signal_variance must be >= 0")
        if self.noise_variance <= 0:
            raise ValueError("noise_variance must be > 0")
        if np.any(self.length_scales <= 0):
            raise ValueError("length_scales must be > 0")

    def log_vector(self):
        return np.log(
            np.concatenate(
                [self.length_scales, [self.signal_variance, self.noise_variance]]
            )
        )

    @classmethod
    def from_log_vector(cls, theta):
        theta = np.asarray(theta, dtype=float)
        vals = np.exp(theta)
        return cls(
            signal_variance=float(vals[-2]),
            length_scales=vals[:-2],
            noise_variance=float(vals[-1]),
        )


@dataclass(frozen=True)
class GpDataset:
    """Training set: raw input rows ``(x_i, u_i)`` and per-dimension
    state-difference targets ``x_{t+1} - x_t``."""

    inputs: np.ndarray   # (N, D+U)
    targets: np.ndarray  # (N, D)

    def __post_init__(self):
        inputs = np.atleast_2d(np.asarray(self.inputs, dtype=float))
        targets = np.atleast_2d(np.asarray(self.targets, dtype=float))
        if inputs.size == 0:
            inputs = inputs.reshape(0, inputs.shape[-1] if inputs.ndim > 1 else 0)
        if targets.size == 0:
            targets = targets.reshape(0, targets.shape[-1] if targets.ndim > 1 else 0)
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "targets", targets)
        if self.inputs.shape[0] != self.targets.shape[0]:
            raise ValueError("inputs and targets must have equal row counts")
        if not (np.all(np.isfinite(self.inputs)) and np.all(np.isfinite(self.targets))):
            raise ValueError("dataset contains non-finite entries")

    def __len__(self):
        return self.inputs.shape[0]

    def append(self, x, y):
        x = np.asarray(x, dtype=float).reshape(1, -1)
        y = np.asarray(y, dtype=float).reshape(1, -1)
        if len(self) and x.shape[1] != self.inputs.shape[1]:
            raise ValueError("input dimension mismatch")
        if len(self) and y.shape[1] != self.targets.shape[1]:
            raise ValueError("target dimension mismatch")
        if len(self) == 0:
            return GpDataset(x, y)
        return GpDataset(
            np.concatenate([self.inputs, x]), np.concatenate([self.targets, y])
        )


def kernel_eval(xi, xj, hyper: KernelHyper):
    """RBF kernel value between two feature-space vectors."""
    xi = np.asarray(xi, dtype=float)
    xj = np.asarray(xj, dtype=float)
    if xi.shape != xj.shape or xi.shape != hyper.length_scales.shape:
        raise ValueError("kernel input dimension mismatch")
    d = xi - xj
    return hyper.signal_variance * float(
        np.exp(-0.5 * np.sum(d * d / hyper.length_scales))
    )


def _kernel_matrix(Z, hyper):
    scaled = Z / np.sqrt(hyper.length_scales)
    sq = np.sum(scaled**2, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * scaled @ scaled.T
    np.maximum(d2, 0.0, out=d2)
    return hyper.signal_variance * np.exp(-0.5 * d2)


def _kernel_cross(Z, zstar, hyper):
    d = (Z - zstar[None, :]) / np.sqrt(hyper.length_scales)
    return hyper.signal_variance * np.exp(-0.5 * np.sum(d * d, axis=1))


def chol_with_jitter(A):
    """Lower Cholesky factor of ``A``, escalating diagonal jitter.

    Tries jitter 0, then ``1e-10 * trace/N`` growing by x10 up to
    ``1e-4 * trace/N`` before giving up.
    """
    n = A.shape[0]
    if n == 0:
        return np.zeros((0, 0)), 0.0
    base = np.trace(A) / n
    jitter = 0.0
    while True:
        try:
            L = cholesky(A + jitter * np.eye(n), lower=True)
            return L, jitter
        except np.linalg.LinAlgError:
            pass
        except Exception:
            pass
        if jitter == 0.0:
            jitter = 1e-10 * base
        else:
            jitter *= 10.0
        if jitter > 1e-4 * base or base <= 0:
            raise FactorizationError("ill-conditioned kernel matrix")


@dataclass(frozen=True)
class GpModel:
    """Immutable GP transition model with cached factorizations.

    ``dataset`` stores raw ``(state, control)`` rows; the kernel operates
    on the trig-augmented feature space. The cache (per-dimension Cholesky
    factors, weight vectors ``beta = (K + sn2 I)^{-1} y`` and explicit
    inverses) is rebuilt whenever data or hyperparameters change, so
    predictions from an updated model match a model rebuilt from scratch.
    """

    state_dim: int
    control_dim: int
    angle_indices: tuple
    hypers: tuple            # one KernelHyper per output dimension
    dataset: GpDataset
    features: np.ndarray     # (N, F) cached feature-mapped inputs
    chol: tuple              # per-dim (N, N) lower factors
    beta: np.ndarray         # (D, N)
    inv_gram: np.ndarray     # (D, N, N) inverses of K_d + sn2_d I

    @property
    def num_points(self):
        return len(self.dataset)

    @property
    def num_outputs(self):
        return self.state_dim

    @property
    def input_dim(self):
        return feature_dim(self.state_dim, self.control_dim, self.angle_indices)

    @classmethod
    def create(cls, dataset, hypers, state_dim, control_dim, angle_indices=()):
        hypers = tuple(hypers)
        if len(hypers) != state_dim:
            raise ValueError("need one KernelHyper per state dimension")
        fdim = feature_dim(state_dim, control_dim, angle_indices)
        for h in hypers:
            if h.length_scales.shape[0] != fdim:
                raise ValueError(
                    f"length_scales must have {fdim} entries for this model"
                )
        n = len(dataset)
        Z = (
            feature_map(dataset.inputs, state_dim, angle_indices)
            if n
            else np.zeros((0, fdim))
        )
        chol_factors = []
        beta = np.zeros((state_dim, n))
        inv_gram = np.zeros((state_dim, n, n))
        for d, h in enumerate(hypers):
            K = _kernel_matrix(Z, h) + h.noise_variance * np.eye(n)
            L, _ = chol_with_jitter(K)
            chol_factors.append(L)
            if n:
                beta[d] = cho_solve((L, True), dataset.targets[:, d])
                inv_gram[d] = cho_solve((L, True), np.eye(n))
        return cls(
            state_dim=state_dim,
            control_dim=control_dim,
            angle_indices=tuple(angle_indices),
            hypers=hypers,
            dataset=dataset,
            features=Z,
            chol=tuple(chol_factors),
            beta=beta,
            inv_gram=inv_gram,
        )

    @classmethod
    def empty(cls, state_dim, control_dim, angle_indices=(), hypers=None):
        fdim = feature_dim(state_dim, control_dim, angle_indices)
        if hypers is None:
            hypers = [
                KernelHyper(1.0, np.ones(fdim), 0.01) for _ in range(state_dim)
            ]
        raw_dim = state_dim + control_dim
        dataset = GpDataset(np.zeros((0, raw_dim)), np.zeros((0, state_dim)))
        return cls.create(dataset, hypers, state_dim, control_dim, angle_indices)

    def add_datapoint(self, x, y):
        """Return a new model with one more transition, hypers unchanged."""
        x = np.asarray(x, dtype=float).ravel()
        y = np.asarray(y, dtype=float).ravel()
        if x.shape[0] != self.state_dim + self.control_dim:
            raise ValueError("input must be a (state, control) row")
        if y.shape[0] != self.state_dim:
            raise ValueError("target must be a state-difference row")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise ValueError("non-finite datapoint rejected")
        return GpModel.create(
            self.dataset.append(x, y),
            self.hypers,
            self.state_dim,
            self.control_dim,
            self.angle_indices,
        )

    def with_hypers(self, hypers):
        return GpModel.create(
            self.dataset, hypers, self.state_dim, self.control_dim, self.angle_indices
        )

    def predict(self, xstar):
        """Posterior mean and variance of the state difference at a raw
        ``(state, control)`` input.

        Far from the data the prediction reverts to the prior
        (mean 0, variance ``signal_variance``).
        """
        xstar = np.asarray(xstar, dtype=float).ravel()
        z = feature_map(xstar[None, :], self.state_dim, self.angle_indices)[0]
        mean = np.zeros(self.state_dim)
        var = np.zeros(self.state_dim)
        for d, h in enumerate(self.hypers):
            if self.num_points == 0:
                var[d] = h.signal_variance
                continue
            ks = _kernel_cross(self.features, z, h)
            mean[d] = ks @ self.beta[d]
            v = solve_triangular(self.chol[d], ks, lower=True)
            var[d] = h.signal_variance - v @ v
            var[d] = max(var[d], 1e-12 * max(h.signal_variance, 1e-12))
        return mean, var

    def noise_variances(self):
        return np.array([h.noise_variance for h in self.hypers])

    # -- serialization ----------------------------------------------------

    def to_dict(self):
        return {
            "format": "gpmpc-model-v1",
            "state_dim": self.state_dim,
            "control_dim": self.control_dim,
            "angle_indices": list(self.angle_indices),
            "signal_variance": [h.signal_variance for h in self.hypers],
            "length_scales": [h.length_scales.tolist() for h in self.hypers],
            "noise_variance": [h.noise_variance for h in self.hypers],
            "inputs": self.dataset.inputs.tolist(),
            "targets": self.dataset.targets.tolist(),
        }

    def save(self, path):
        payload = json.dumps(self.to_dict(), indent=1)
        tmp = tempfile.NamedTemporaryFile(
            "w", dir=os.path.dirname(os.path.abspath(path)), delete=False
        )
        try:
            tmp.write(payload)
            tmp.close()
            os.replace(tmp.name, path)
        except BaseException:
            os.unlink(tmp.name)
            raise

    @classmethod
    def from_dict(cls, data):
        if data.get("format") != "gpmpc-model-v1":
            raise ValueError("unrecognized model file format")
        state_dim = int(data["state_dim"])
        control_dim = int(data["control_dim"])
        hypers = [
            KernelHyper(sv, np.asarray(ls), nv)
            for sv, ls, nv in zip(
                data["signal_variance"], data["length_scales"], data["noise_variance"]
            )
        ]
        raw_dim = state_dim + control_dim
        inputs = np.asarray(data["inputs"], dtype=float).reshape(-1, raw_dim)
        targets = np.asarray(data["targets"], dtype=float).reshape(-1, state_dim)
        return cls.create(
            GpDataset(inputs, targets),
            hypers,
            state_dim,
            control_dim,
            tuple(data["angle_indices"]),
        )

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


# -- evidence maximization -----------------------------------------------


def _lml_single(Z, y, theta):
    """Log evidence and gradient w.r.t. log-hyperparameters for one output.

    ``theta = log([length_scales..., signal_variance, noise_variance])``.
    """
    n, fdim = Z.shape
    lam = np.exp(theta[:fdim])
    sf2 = np.exp(theta[fdim])
    sn2 = np.exp(theta[fdim + 1])
    hyper = KernelHyper(sf2, lam, sn2)
    K = _kernel_matrix(Z, hyper)
    Kn = K + sn2 * np.eye(n)
    try:
        L, _ = chol_with_jitter(Kn)
    except FactorizationError:
        raise
    alpha = cho_solve((L, True), y)
    value = (
        -0.5 * y @ alpha - np.sum(np.log(np.diag(L))) - 0.5 * n * _LOG_2PI
    )
    Kinv = cho_solve((L, True), np.eye(n))
    A = np.outer(alpha, alpha) - Kinv
    grad = np.zeros_like(theta)
    AK = A * K
    for k in range(fdim):
        d = Z[:, k : k + 1] - Z[:, k : k + 1].T
        grad[k] = 0.5 * np.sum(AK * (d * d)) * 0.5 / lam[k]
    grad[fdim] = 0.5 * np.sum(AK)          # dK/dlog sf2 = K
    grad[fdim + 1] = 0.5 * sn2 * np.trace(A)
    return float(value), grad


def log_marginal_likelihood(dataset, hypers: Sequence[KernelHyper], state_dim=None,
                            angle_indices=()):
    """Summed Gaussian log evidence over output dimensions and its gradient
    with respect to the stacked log-hyperparameters.

    The gradient is ordered dimension by dimension, each block being
    ``[log length_scales..., log signal_variance, log noise_variance]``.
    """
    if state_dim is None:
        state_dim = dataset.targets.shape[1]
    control_dim = dataset.inputs.shape[1] - state_dim
    Z = feature_map(dataset.inputs, state_dim, angle_indices)
    total = 0.0
    grads = []
    for d, h in enumerate(hypers):
        value, grad = _lml_single(Z, dataset.targets[:, d], h.log_vector())
        total += value
        grads.append(grad)
    return total, np.concatenate(grads)


def _default_init(Z, y):
    n, fdim = Z.shape
    spread = np.var(Z, axis=0)
    lam = np.clip(spread, 1e-2, None)
    var_y = max(float(np.var(y)), 1e-6)
    return KernelHyper(var_y, lam, 0.01 * var_y + NOISE_FLOOR)


def train_hyperparameters(dataset, init=None, restarts=3, rng=None, state_dim=None,
                          angle_indices=(), maxiter=200):
    """Evidence maximization per output dimension (L-BFGS-B in log space).

    ``init`` optionally supplies starting hyperparameters (one per output
    dimension); additional restarts perturb a data-driven heuristic with
    the supplied random generator. Returns one KernelHyper per dimension
    whose log evidence is at least that of the best starting point.
    """
    if restarts < 1:
        raise ValueError("restarts must be >= 1")
    if rng is None:
        rng = np.random.default_rng(0)
    if state_dim is None:
        state_dim = dataset.targets.shape[1]
    Z = feature_map(dataset.inputs, state_dim, angle_indices)
    n, fdim = Z.shape
    lower = np.log(
        np.concatenate([np.full(fdim, LENGTH_SCALE_FLOOR), [SIGNAL_FLOOR, NOISE_FLOOR]])
    )
    upper = np.full(fdim + 2, np.log(1e8))
    bounds = list(zip(lower, upper))

    out = []
    for d in range(state_dim):
        y = dataset.targets[:, d]
        base = _default_init(Z, y)
        starts = []
        if init is not None:
            starts.append(np.clip(init[d].log_vector(), lower, upper))
        if len(starts) < restarts:
            starts.append(np.clip(base.log_vector(), lower, upper))
        while len(starts) < restarts:
            jitter = rng.normal(0.0, 1.0, size=fdim + 2)
            starts.append(np.clip(base.log_vector() + jitter, lower, upper))

        def objective(theta):
            try:
                value, grad = _lml_single(Z, y, theta)
            except FactorizationError:
                return 1e12, np.zeros_like(theta)
            return -value, -grad

        best_theta, best_val = None, np.inf
        for theta0 in starts:
            res = minimize(
                objective,
                theta0,
                jac=True,
                method="L-BFGS-B",
                bounds=bounds,
                options={"maxiter": maxiter},
            )
            cand_val = res.fun
            if not np.isfinite(cand_val):
                continue
            if cand_val < best_val:
                best_val, best_theta = cand_val, res.x
        if best_theta is None:
            logger.warning(
                "hyperparameter training diverged for dimension %d; "
                "keeping starting point",
                d,
            )
            best_theta = starts[0]
        out.append(KernelHyper.from_log_vector(best_theta))
    return out
