"""Exact Gaussian moments of sine/cosine features.

For a Gaussian vector ``x`` and linear angle functionals ``w = P x``, the
first two moments of ``[x, sin(w), cos(w)]`` are available in closed form
(characteristic function of the Gaussian). These feed both the
trig-augmented GP inputs and the pendulum-tip kinematics, so that angle
uncertainty enters predictions and costs exactly rather than through
linearization.

All functions are pure jax.numpy code and differentiable.
"""

from __future__ import annotations

import jax.numpy as jnp


def sincos_augment(mu, cov, P):
    """Moments of ``[x, sin(P x), cos(P x)]`` for ``x ~ N(mu, cov)``.

    Parameters
    ----------
    mu : (D,) array
    cov : (D, D) array, symmetric PSD
    P : (K, D) array
        Each row defines one angle as a linear functional of the state.

    Returns
    -------
    mean : (D + 2K,) array
    cov : (D + 2K, D + 2K) array
        Layout is ``[x, sin block, cos block]``.
    """
    mu = jnp.asarray(mu)
    cov = jnp.asarray(cov)
    P = jnp.asarray(P)

    m = P @ mu                      # (K,) angle means
    S = P @ cov @ P.T               # (K, K) angle covariance
    var = jnp.diag(S)
    decay = jnp.exp(-0.5 * var)     # E[e^{i w_k}] magnitude
    s, c = jnp.sin(m), jnp.cos(m)

    e_sin = s * decay
    e_cos = c * decay

    # Pairwise second moments from E[e^{i(w_a - w_b)}] and E[e^{i(w_a + w_b)}].
    vm = var[:, None] + var[None, :] - 2.0 * S      # var(w_a - w_b)
    vp = var[:, None] + var[None, :] + 2.0 * S      # var(w_a + w_b)
    dm = m[:, None] - m[None, :]
    dp = m[:, None] + m[None, :]
    em = jnp.exp(-0.5 * vm)
    ep = jnp.exp(-0.5 * vp)

    e_ss = 0.5 * (jnp.cos(dm) * em - jnp.cos(dp) * ep)
    e_cc = 0.5 * (jnp.cos(dm) * em + jnp.cos(dp) * ep)
    e_sc = 0.5 * (jnp.sin(dm) * em + jnp.sin(dp) * ep)

    cov_ss = e_ss - jnp.outer(e_sin, e_sin)
    cov_cc = e_cc - jnp.outer(e_cos, e_cos)
    cov_sc = e_sc - jnp.outer(e_sin, e_cos)

    # Stein's lemma: cov(x_j, sin w_k) = cov(x_j, w_k) E[cos w_k], etc.
    cPt = cov @ P.T                 # (D, K), columns are cov(x, w_k)
    cov_xs = cPt * (c * decay)[None, :]
    cov_xc = -cPt * (s * decay)[None, :]

    mean = jnp.concatenate([mu, e_sin, e_cos])
    top = jnp.concatenate([cov, cov_xs, cov_xc], axis=1)
    mid = jnp.concatenate([cov_xs.T, cov_ss, cov_sc], axis=1)
    bot = jnp.concatenate([cov_xc.T, cov_sc.T, cov_cc], axis=1)
    full = jnp.concatenate([top, mid, bot], axis=0)
    return mean, 0.5 * (full + full.T)


def linear_map_moments(mean, cov, A, offset=None):
    """Moments of ``A x + offset`` for ``x ~ N(mean, cov)``."""
    A = jnp.asarray(A)
    m = A @ mean
    if offset is not None:
        m = m + jnp.asarray(offset)
    S = A @ cov @ A.T
    return m, 0.5 * (S + S.T)
