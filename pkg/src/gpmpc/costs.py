"""Expected stage and terminal costs of Gaussian state distributions.

Two cost families, both with closed-form Gaussian expectations and exact
derivatives with respect to the state mean, state covariance and control:

- quadratic: ``E[(f(x)-t)' W (f(x)-t)] + u' R u``
- saturating: ``E[1 - exp(-0.5 (f(x)-t)' Tinv (f(x)-t))] + u' R u``

where ``f`` is either the raw state or the pendulum-tip position. Tip
moments are computed exactly from the Gaussian angle distribution (see
:mod:`gpmpc.trig`), so the tip feature is itself Gaussian-approximated by
its first two moments before the cost expectation is taken.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import partial
from typing import NamedTuple, Optional

import jax
import jax.numpy as jnp
import numpy as np

from .moments import AugmentedState, GaussState
from .trig import sincos_augment

__all__ = ["TipMap", "CostSpec", "ExpectedCost", "tip_moments",
           "expected_quadratic", "expected_saturating"]


@dataclass(frozen=True)
class TipMap:
    """Tip position as a trig-linear map of the state.

    ``tip = lin @ x + a_sin @ sin(P x) + a_cos @ cos(P x) + offset``.
    """

    P: np.ndarray       # (K, D) angle functionals
    lin: np.ndarray     # (k, D)
    a_sin: np.ndarray   # (k, K)
    a_cos: np.ndarray   # (k, K)
    offset: np.ndarray  # (k,)

    def output_dim(self):
        return self.lin.shape[0]

    def point(self, x):
        x = np.asarray(x, dtype=float)
        w = self.P @ x
        return self.lin @ x + self.a_sin @ np.sin(w) + self.a_cos @ np.cos(w) \
            + self.offset


@dataclass(frozen=True)
class CostSpec:
    """Cost description: kind, target, weights and feature mapping.

    ``weight`` is the quadratic weight matrix W for ``kind='quadratic'``
    and the width matrix ``Tinv`` (inverse squared width) for
    ``kind='saturating'``. ``control_penalty`` is a PSD U x U matrix R
    (may be zero).
    """

    kind: str                     # 'quadratic' | 'saturating'
    target: np.ndarray
    weight: np.ndarray
    control_penalty: np.ndarray
    feature: str = "raw_state"    # 'raw_state' | 'pendulum_tip'
    tip: Optional[TipMap] = None

    def __post_init__(self):
        if self.kind not in ("quadratic", "saturating"):
            raise ValueError(f"unknown cost kind {self.kind!r}")
        if self.feature not in ("raw_state", "pendulum_tip"):
            raise ValueError(f"unknown cost feature {self.feature!r}")
        if self.feature == "pendulum_tip" and self.tip is None:
            raise ValueError("pendulum_tip feature requires a TipMap")
        target = np.asarray(self.target, dtype=float).ravel()
        weight = np.atleast_2d(np.asarray(self.weight, dtype=float))
        penalty = np.atleast_2d(np.asarray(self.control_penalty, dtype=float))
        object.__setattr__(self, "target", target)
        object.__setattr__(self, "weight", weight)
        object.__setattr__(self, "control_penalty", penalty)
        if weight.shape != (target.size, target.size):
            raise ValueError("weight shape must match target dimension")
        for M, name in ((weight, "weight"), (penalty, "control_penalty")):
            if not np.allclose(M, M.T, atol=1e-10):
                raise ValueError(f"{name} must be symmetric")
            if np.linalg.eigvalsh(M).min() < -1e-10:
                raise ValueError(f"{name} must be PSD")
        if self.kind == "saturating" and np.linalg.eigvalsh(weight).min() <= 0:
            raise ValueError("saturating width matrix must be positive definite")


@dataclass(frozen=True)
class ExpectedCost:
    value: float
    dmean: np.ndarray
    dcov: np.ndarray
    dcontrol: np.ndarray


# -- jax core ---------------------------------------------------------------


class CostParams(NamedTuple):
    """Array content of a CostSpec, in pytree form for jitted code."""

    target: jnp.ndarray
    weight: jnp.ndarray      # W (quadratic) or T = inv(Tinv) (saturating)
    penalty: jnp.ndarray
    tip_P: jnp.ndarray
    tip_lin: jnp.ndarray
    tip_sin: jnp.ndarray
    tip_cos: jnp.ndarray
    tip_offset: jnp.ndarray


class CostMeta(NamedTuple):
    """Static structure of a cost (used as a jit cache key)."""

    kind: str
    feature: str


def build_cost(spec: CostSpec):
    """Split a CostSpec into static metadata and array parameters."""
    meta = CostMeta(kind=spec.kind, feature=spec.feature)
    if spec.kind == "saturating":
        width = np.linalg.inv(spec.weight)   # store T, the squared-width matrix
    else:
        width = spec.weight
    if spec.tip is not None:
        tip = spec.tip
        tip_arrays = (tip.P, tip.lin, tip.a_sin, tip.a_cos, tip.offset)
    else:
        k = spec.target.size
        tip_arrays = (np.zeros((0, k)), np.zeros((k, k)), np.zeros((k, 0)),
                      np.zeros((k, 0)), np.zeros(k))
    params = CostParams(
        target=jnp.asarray(spec.target),
        weight=jnp.asarray(width),
        penalty=jnp.asarray(spec.control_penalty),
        tip_P=jnp.asarray(tip_arrays[0]),
        tip_lin=jnp.asarray(tip_arrays[1]),
        tip_sin=jnp.asarray(tip_arrays[2]),
        tip_cos=jnp.asarray(tip_arrays[3]),
        tip_offset=jnp.asarray(tip_arrays[4]),
    )
    return meta, params


def _tip_moments_core(params: CostParams, mu, Sigma):
    m_aug, S_aug = sincos_augment(mu, Sigma, params.tip_P)
    A = jnp.concatenate([params.tip_lin, params.tip_sin, params.tip_cos], axis=1)
    m = A @ m_aug + params.tip_offset
    S = A @ S_aug @ A.T
    return m, 0.5 * (S + S.T)


def _feature_moments(meta: CostMeta, params: CostParams, mu, Sigma):
    if meta.feature == "pendulum_tip":
        return _tip_moments_core(params, mu, Sigma)
    return mu, Sigma


def state_cost_value(meta: CostMeta, params: CostParams, mu, Sigma):
    """Expected state cost (no control term), pure jax."""
    m, S = _feature_moments(meta, params, mu, Sigma)
    e = m - params.target
    if meta.kind == "quadratic":
        return e @ params.weight @ e + jnp.trace(params.weight @ S)
    T = params.weight
    TS = T + S
    L = jnp.linalg.cholesky(TS)
    quad = jnp.sum(jax.scipy.linalg.solve_triangular(L, e, lower=True) ** 2)
    _, logdet_t = jnp.linalg.slogdet(T)
    half_logdet_ts = jnp.sum(jnp.log(jnp.diag(L)))
    amp = jnp.exp(0.5 * logdet_t - half_logdet_ts)
    return 1.0 - amp * jnp.exp(-0.5 * quad)


def stage_cost_value(meta: CostMeta, params: CostParams, mu, Sigma, u):
    return state_cost_value(meta, params, mu, Sigma) + u @ params.penalty @ u


@partial(jax.jit, static_argnames=("meta",))
def _stage_with_grads(meta, params, mu, Sigma, u):
    value, grads = jax.value_and_grad(
        lambda m_, S_, u_: stage_cost_value(
            meta, params, m_, 0.5 * (S_ + S_.T), u_
        ),
        argnums=(0, 1, 2),
    )(mu, Sigma, u)
    return value, grads


# -- public API --------------------------------------------------------------


def tip_moments(z: GaussState, tip: TipMap):
    """Gaussian approximation to the tip-position distribution."""
    m, S = _tip_moments_core(
        CostParams(
            target=jnp.zeros(tip.output_dim()),
            weight=jnp.zeros((0, 0)),
            penalty=jnp.zeros((0, 0)),
            tip_P=jnp.asarray(tip.P),
            tip_lin=jnp.asarray(tip.lin),
            tip_sin=jnp.asarray(tip.a_sin),
            tip_cos=jnp.asarray(tip.a_cos),
            tip_offset=jnp.asarray(tip.offset),
        ),
        jnp.asarray(z.mean),
        jnp.asarray(z.cov),
    )
    return np.asarray(m), np.asarray(S)


def _expected(zt: AugmentedState, spec: CostSpec) -> ExpectedCost:
    meta, params = build_cost(spec)
    z = zt.state_part()
    u = zt.mean[z.dim:]
    value, (dm, dS, du) = _stage_with_grads(
        meta, params, jnp.asarray(z.mean), jnp.asarray(z.cov), jnp.asarray(u)
    )
    return ExpectedCost(
        value=float(value),
        dmean=np.asarray(dm),
        dcov=np.asarray(dS),
        dcontrol=np.asarray(du),
    )


def expected_quadratic(zt: AugmentedState, spec: CostSpec) -> ExpectedCost:
    """``(m-t)' W (m-t) + tr(W S) + u' R u`` on the feature moments."""
    if spec.kind != "quadratic":
        raise ValueError("spec.kind must be 'quadratic'")
    return _expected(zt, spec)


def expected_saturating(zt: AugmentedState, spec: CostSpec) -> ExpectedCost:
    """Closed-form Gaussian expectation of ``1 - exp(-0.5 d' Tinv d)``.

    The state-cost part lies in [0, 1]; the control penalty is added on
    top.
    """
    if spec.kind != "saturating":
        raise ValueError("spec.kind must be 'saturating'")
    return _expected(zt, spec)
