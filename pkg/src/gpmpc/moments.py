"""Moment matching: propagating a Gaussian state through the GP dynamics.

Given a Gaussian state/control distribution, the one-step predictive
distribution under the GP model is non-Gaussian; this module computes its
exact first two moments in closed form (for the RBF kernel) and projects
back onto a Gaussian. The map ``(mu_t, Sigma_t, u_t) -> (mu_{t+1},
Sigma_{t+1})`` is deterministic and differentiable, which is what lets the
planner treat the stochastic problem as a deterministic one.

The ingredients, per output dimension ``a`` (training inputs ``x_i``,
weight vectors ``beta_a``, kernel metric ``Lambda_a``):

- ``q_a[i] = E[k_a(x_i, x~)]`` over the Gaussian input: predictive
  difference mean is ``beta_a . q_a``;
- ``Q_ab[i, j] = E[k_a(x_i, x~) k_b(x_j, x~)]``: second moments
  ``E[d_a d_b] = beta_a' Q_ab beta_b``, with the diagonal picking up the
  expected predictive variance ``sf2_a - tr(inv(K_a + sn2_a I) Q_aa)``;
- the input/difference cross-covariance
  ``cov(x~, d_a) = sum_i beta_a[i] q_a[i] S (S + Lambda_a)^{-1} (x_i - m)``,

from which the next-state moments are composed as ``mu + E[d]`` and
``Sigma + cov(d) + C + C' + diag(noise)`` (state rows ``C`` of the
cross-covariance), since targets are state differences.

Angle dimensions are handled by augmenting the Gaussian input with exact
(sin, cos) moments before the kernel expectations are taken.

Derivatives of the full map are produced by forward-mode algorithmic
differentiation of the closed form.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import partial
from typing import NamedTuple

import jax
import jax.numpy as jnp
import numpy as np

from .gp import GpModel
from .trig import sincos_augment

__all__ = [
    "GaussState",
    "AugmentedState",
    "PropagationJacobians",
    "PackedGp",
    "pack_gp",
    "augment_control",
    "expected_kernel_vector",
    "expected_kernel_outer",
    "propagate",
    "propagate_jacobians",
    "project_psd",
]

PSD_TOL = 1e-9


@dataclass(frozen=True)
class GaussState:
    """Gaussian state distribution ``N(mean, cov)``."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float).ravel()
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        if cov.shape != (mean.shape[0], mean.shape[0]):
            raise ValueError("cov shape must match mean dimension")

    @property
    def dim(self):
        return self.mean.shape[0]

    @classmethod
    def point(cls, mean):
        mean = np.asarray(mean, dtype=float).ravel()
        return cls(mean, np.zeros((mean.shape[0], mean.shape[0])))

    def validate(self, tol=PSD_TOL):
        if not np.allclose(self.cov, self.cov.T, atol=1e-8):
            raise ValueError("covariance must be symmetric")
        w = np.linalg.eigvalsh(0.5 * (self.cov + self.cov.T))
        if w.min() < -tol:
            raise ValueError(f"covariance not PSD (min eigenvalue {w.min():.3e})")
        return self


@dataclass(frozen=True)
class AugmentedState:
    """Control-augmented distribution: mean ``[mu, u]``, covariance
    ``blkdiag[Sigma, 0]`` (controls are deterministic)."""

    mean: np.ndarray
    cov: np.ndarray
    state_dim: int

    @property
    def control_dim(self):
        return self.mean.shape[0] - self.state_dim

    def state_part(self):
        d = self.state_dim
        return GaussState(self.mean[:d], self.cov[:d, :d])


def augment_control(z: GaussState, u) -> AugmentedState:
    """Append a deterministic control to a Gaussian state distribution."""
    u = np.asarray(u, dtype=float).ravel()
    d, m = z.dim, u.shape[0]
    mean = np.concatenate([z.mean, u])
    cov = np.zeros((d + m, d + m))
    cov[:d, :d] = z.cov
    return AugmentedState(mean, cov, state_dim=d)


def project_psd(S, tol=PSD_TOL):
    """Symmetrize and clip tiny negative eigenvalues to zero.

    Violations beyond ``tol`` indicate an upstream bug and raise.
    """
    S = 0.5 * (np.asarray(S) + np.asarray(S).T)
    w, V = np.linalg.eigh(S)
    if w.min() < -tol * max(1.0, w.max(initial=1.0)):
        raise ValueError(f"covariance not PSD within tolerance (min eig {w.min():.3e})")
    if w.min() >= 0:
        return S
    w = np.clip(w, 0.0, None)
    out = (V * w) @ V.T
    return 0.5 * (out + out.T)


# -- packed model ----------------------------------------------------------


class PackedGp(NamedTuple):
    """GP arrays in kernel-input (feature) space, optionally zero-padded to
    a fixed capacity so jitted code does not retrace as the dataset grows.
    ``mask`` is 1 for live rows, 0 for padding."""

    x: jnp.ndarray        # (C, F) feature-mapped training inputs
    beta: jnp.ndarray     # (D, C)
    inv_gram: jnp.ndarray  # (D, C, C), zero in padded rows/cols
    lam: jnp.ndarray      # (D, F) kernel metric diagonals
    sf2: jnp.ndarray      # (D,)
    sn2: jnp.ndarray      # (D,)
    mask: jnp.ndarray     # (C,)


def pack_gp(model: GpModel, capacity=None) -> PackedGp:
    n = model.num_points
    if capacity is None:
        capacity = n
    if capacity < n:
        raise ValueError("capacity smaller than dataset")
    fdim = model.input_dim
    d = model.state_dim
    x = np.zeros((capacity, fdim))
    beta = np.zeros((d, capacity))
    inv_gram = np.zeros((d, capacity, capacity))
    mask = np.zeros(capacity)
    if n:
        x[:n] = model.features
        beta[:, :n] = model.beta
        inv_gram[:, :n, :n] = model.inv_gram
        mask[:n] = 1.0
    lam = np.stack([h.length_scales for h in model.hypers])
    sf2 = np.array([h.signal_variance for h in model.hypers])
    sn2 = np.array([h.noise_variance for h in model.hypers])
    return PackedGp(
        x=jnp.asarray(x),
        beta=jnp.asarray(beta),
        inv_gram=jnp.asarray(inv_gram),
        lam=jnp.asarray(lam),
        sf2=jnp.asarray(sf2),
        sn2=jnp.asarray(sn2),
        mask=jnp.asarray(mask),
    )


# -- jax core ---------------------------------------------------------------


def _input_moments(mu, Sigma, u, angle_idx):
    """Moments of the kernel-input features ``[x, sin, cos, u]``."""
    if angle_idx:
        P = jnp.zeros((len(angle_idx), mu.shape[0])).at[
            jnp.arange(len(angle_idx)), jnp.asarray(angle_idx)
        ].set(1.0)
        m, S = sincos_augment(mu, Sigma, P)
    else:
        m, S = mu, Sigma
    mf = jnp.concatenate([m, u])
    Sf = jnp.zeros((mf.shape[0], mf.shape[0]))
    Sf = Sf.at[: m.shape[0], : m.shape[0]].set(S)
    return mf, Sf


def _q_and_cross(gp: PackedGp, a, mf, Sf):
    """Expected kernel vector q_a and input/difference cross term."""
    lam_a = gp.lam[a]
    A = Sf + jnp.diag(lam_a)
    La = jnp.linalg.cholesky(A)
    nu = gp.x - mf[None, :]
    sol = jax.scipy.linalg.solve_triangular(La, nu.T, lower=True)  # (F, C)
    quad = jnp.sum(sol * sol, axis=0)
    half_logdet_ratio = jnp.sum(jnp.log(jnp.diag(La))) - 0.5 * jnp.sum(
        jnp.log(lam_a)
    )
    q = gp.sf2[a] * jnp.exp(-0.5 * quad - half_logdet_ratio) * gp.mask
    bq = gp.beta[a] * q
    ainv_nu_bq = jax.scipy.linalg.cho_solve((La, True), nu.T @ bq)  # (F,)
    cross = Sf @ ainv_nu_bq
    return q, cross


def _log_kernel_at_mean(gp: PackedGp, mf):
    """log k_a(x_i, mf) for every dimension and training input: (D, C)."""
    nu = gp.x - mf[None, :]                    # (C, F)
    scaled = nu[None, :, :] / gp.lam[:, None, :]
    quad = jnp.sum(scaled * nu[None, :, :], axis=-1)  # (D, C)
    return jnp.log(gp.sf2)[:, None] - 0.5 * quad


def _pair_outer(gp: PackedGp, a, b, mf, Sf, logk):
    """Expected kernel outer-product matrix for a dimension pair (a, b)."""
    fdim = mf.shape[0]
    inv_lam = 1.0 / gp.lam
    g = inv_lam[a] + inv_lam[b]
    R = Sf * g[None, :] + jnp.eye(fdim)        # row-scaled: Sf @ diag(g) + I
    sign, logdetR = jnp.linalg.slogdet(R)
    M = jnp.linalg.solve(R, Sf)                # equals (Lam_a^-1+Lam_b^-1+Sf^-1)^-1
    M = 0.5 * (M + M.T)
    nu = gp.x - mf[None, :]
    va = nu * inv_lam[a][None, :]
    vb = nu * inv_lam[b][None, :]
    ta = va @ M
    u_aa = jnp.sum(ta * va, axis=1)
    u_bb = jnp.sum((vb @ M) * vb, axis=1)
    crossterm = ta @ vb.T
    expo = 0.5 * (u_aa[:, None] + u_bb[None, :]) + crossterm
    logQ = logk[a][:, None] + logk[b][None, :] - 0.5 * logdetR + expo
    return jnp.exp(logQ) * (gp.mask[:, None] * gp.mask[None, :])


def _step_moments_core(gp: PackedGp, mu, Sigma, u, angle_idx):
    """One moment-matching step: returns next-state mean and covariance."""
    d = mu.shape[0]
    Sigma = 0.5 * (Sigma + Sigma.T)
    mf, Sf = _input_moments(mu, Sigma, u, angle_idx)

    dims = jnp.arange(d)
    q, cross = jax.vmap(lambda a: _q_and_cross(gp, a, mf, Sf))(dims)
    mu_delta = jnp.sum(gp.beta * q, axis=1)           # (D,)

    logk = _log_kernel_at_mean(gp, mf)
    ia, ib = np.triu_indices(d)

    def pair_moment(a, b):
        Q = _pair_outer(gp, a, b, mf, Sf, logk)
        e_ab = gp.beta[a] @ Q @ gp.beta[b]
        trace = jnp.sum(gp.inv_gram[a] * Q)
        return e_ab, trace

    e_vals, traces = jax.vmap(pair_moment)(jnp.asarray(ia), jnp.asarray(ib))
    second = jnp.zeros((d, d)).at[ia, ib].set(e_vals)
    second = second + second.T - jnp.diag(jnp.diag(second))
    cov_delta = second - jnp.outer(mu_delta, mu_delta)
    diag_traces = jnp.zeros(d).at[jnp.asarray(ia)].add(
        jnp.where(jnp.asarray(ia) == jnp.asarray(ib), traces, 0.0)
    )
    expected_var = jnp.maximum(gp.sf2 - diag_traces, 0.0)
    cov_delta = cov_delta + jnp.diag(expected_var)

    c_state = cross[:, :d].T                          # (D state rows, D outputs)
    next_mu = mu + mu_delta
    next_cov = Sigma + cov_delta + c_state + c_state.T + jnp.diag(gp.sn2)
    return next_mu, 0.5 * (next_cov + next_cov.T)


def _step_moments_zero_var(gp: PackedGp, mu, Sigma, u, angle_idx):
    """Zero-variance baseline step: mean prediction at the point input,
    predictive variances discarded; output covariance is process noise only."""
    del Sigma
    zero = jnp.zeros((mu.shape[0], mu.shape[0]))
    mf, Sf = _input_moments(mu, zero, u, angle_idx)
    dims = jnp.arange(mu.shape[0])
    q, _ = jax.vmap(lambda a: _q_and_cross(gp, a, mf, Sf))(dims)
    mu_delta = jnp.sum(gp.beta * q, axis=1)
    return mu + mu_delta, jnp.diag(gp.sn2)


def step_moments(gp, mu, Sigma, u, angle_idx=(), zero_variance=False):
    """Pure-jax one-step propagation (traceable and differentiable)."""
    if zero_variance:
        return _step_moments_zero_var(gp, mu, Sigma, u, angle_idx)
    return _step_moments_core(gp, mu, Sigma, u, angle_idx)


@partial(jax.jit, static_argnames=("angle_idx", "zero_variance"))
def _step_jit(gp, mu, Sigma, u, angle_idx, zero_variance):
    return step_moments(gp, mu, Sigma, u, angle_idx, zero_variance)


@partial(jax.jit, static_argnames=("angle_idx",))
def _step_jacobians_jit(gp, mu, Sigma, u, angle_idx):
    def f(mu_, Sigma_, u_):
        return step_moments(gp, mu_, Sigma_, u_, angle_idx, False)

    return jax.jacfwd(f, argnums=(0, 1, 2))(mu, Sigma, u)


# -- public operations ------------------------------------------------------


def _feature_space_moments(model, zt: AugmentedState):
    if zt.mean.shape[0] != model.input_dim:
        raise ValueError(
            "augmented state must live in the model's kernel input space "
            f"(dimension {model.input_dim})"
        )
    return jnp.asarray(zt.mean), jnp.asarray(0.5 * (zt.cov + zt.cov.T))


def expected_kernel_vector(model: GpModel, zt: AugmentedState, dim: int):
    """``q_dim[i] = E[k_dim(x_i, x~)]`` over ``x~ ~ N(zt.mean, zt.cov)``.

    Entries lie in ``[0, signal_variance]``; at zero input covariance this
    reduces to the plain kernel vector at the mean.
    """
    gp = pack_gp(model)
    mf, Sf = _feature_space_moments(model, zt)
    q, _ = _q_and_cross(gp, dim, mf, Sf)
    q = np.asarray(q)
    if not np.all(np.isfinite(q)):
        raise FloatingPointError("singular covariance in kernel expectation")
    return q


def expected_kernel_outer(model: GpModel, zt: AugmentedState, dim_a: int, dim_b: int):
    """``Q[i, j] = E[k_a(x_i, x~) k_b(x_j, x~)]`` over the Gaussian input."""
    gp = pack_gp(model)
    mf, Sf = _feature_space_moments(model, zt)
    logk = _log_kernel_at_mean(gp, mf)
    return np.asarray(_pair_outer(gp, dim_a, dim_b, mf, Sf, logk))


def propagate(model: GpModel, z: GaussState, u, zero_variance=False) -> GaussState:
    """Moments of the next state distribution under the GP dynamics.

    Composes the predicted state-difference moments with the current state
    (including the exact input/difference cross-covariance) and adds the
    process-noise diagonal. The output covariance is symmetrized and
    PSD-projected within tolerance.
    """
    z.validate()
    u = np.asarray(u, dtype=float).ravel()
    gp = pack_gp(model)
    mu, cov = _step_jit(
        gp,
        jnp.asarray(z.mean),
        jnp.asarray(z.cov),
        jnp.asarray(u),
        model.angle_indices,
        bool(zero_variance),
    )
    mu = np.asarray(mu)
    cov = np.asarray(cov)
    if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(cov))):
        raise FloatingPointError("non-finite moment-matching output")
    return GaussState(mu, project_psd(cov))


@dataclass(frozen=True)
class PropagationJacobians:
    """Jacobian blocks of ``(mu, Sigma, u) -> (mu', Sigma')``.

    Covariance coordinates are full-matrix entries; the propagation map
    symmetrizes its covariance input first, so derivatives w.r.t. the two
    mirror entries agree and sum to the symmetric-perturbation response.
    """

    dmean_dmean: np.ndarray  # (D, D)
    dmean_dcov: np.ndarray   # (D, D, D)
    dcov_dmean: np.ndarray   # (D, D, D)
    dcov_dcov: np.ndarray    # (D, D, D, D)
    dmean_du: np.ndarray     # (D, U)
    dcov_du: np.ndarray      # (D, D, U)


def propagate_jacobians(model: GpModel, z: GaussState, u) -> PropagationJacobians:
    """All Jacobian blocks of the one-step moment map (forward-mode AD)."""
    z.validate()
    u = np.asarray(u, dtype=float).ravel()
    gp = pack_gp(model)
    (dm_dm, dm_dS, dm_du), (dS_dm, dS_dS, dS_du) = _step_jacobians_jit(
        gp, jnp.asarray(z.mean), jnp.asarray(z.cov), jnp.asarray(u),
        model.angle_indices,
    )
    out = PropagationJacobians(
        dmean_dmean=np.asarray(dm_dm),
        dmean_dcov=np.asarray(dm_dS),
        dcov_dmean=np.asarray(dS_dm),
        dcov_dcov=np.asarray(dS_dS),
        dmean_du=np.asarray(dm_du),
        dcov_du=np.asarray(dS_du),
    )
    for block in (out.dmean_dmean, out.dmean_dcov, out.dcov_dmean,
                  out.dcov_dcov, out.dmean_du, out.dcov_du):
        if not np.all(np.isfinite(block)):
            raise FloatingPointError("non-finite propagation Jacobian")
    return out
