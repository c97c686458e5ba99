import numpy as np
import pytest

from gpmpc.gp import GpDataset, GpModel, KernelHyper, feature_map


def make_random_model(rng, n=20, state_dim=2, control_dim=1, angle_indices=(),
                      noise=1e-2, signal=None, target_scale=0.5):
    """A well-conditioned random GP model for oracle tests.

    Inputs are drawn in a unit-scale box; targets are smooth random
    functions of the inputs plus noise, so the fitted weights are tame.
    """
    raw_dim = state_dim + control_dim
    inputs = rng.uniform(-1.5, 1.5, size=(n, raw_dim))
    freq = rng.normal(size=(raw_dim, state_dim))
    phase = rng.uniform(0, 2 * np.pi, size=state_dim)
    targets = target_scale * np.sin(inputs @ freq + phase)
    targets += noise * rng.standard_normal((n, state_dim))
    dataset = GpDataset(inputs, targets)
    fdim = state_dim + 2 * len(angle_indices) + control_dim
    hypers = []
    for _ in range(state_dim):
        lam = rng.uniform(0.5, 2.0, size=fdim)
        sf2 = signal if signal is not None else rng.uniform(0.3, 1.5)
        hypers.append(KernelHyper(sf2, lam, noise))
    return GpModel.create(dataset, hypers, state_dim, control_dim, angle_indices)


def gp_posterior_stats(model, raw_points):
    """Vectorized posterior mean/variance at raw (state, control) rows.

    Independent numpy evaluation of the standard predictive equations,
    used as the common ground for Monte-Carlo oracles.
    """
    Z = feature_map(raw_points, model.state_dim, model.angle_indices)
    S = Z.shape[0]
    means = np.zeros((S, model.state_dim))
    variances = np.zeros((S, model.state_dim))
    for d, h in enumerate(model.hypers):
        diff = Z[:, None, :] - model.features[None, :, :]
        ks = h.signal_variance * np.exp(
            -0.5 * np.sum(diff**2 / h.length_scales, axis=-1)
        )  # (S, N)
        means[:, d] = ks @ model.beta[d]
        variances[:, d] = h.signal_variance - np.einsum(
            "sn,nm,sm->s", ks, model.inv_gram[d], ks
        )
        variances[:, d] = np.clip(variances[:, d], 1e-12, None)
    return means, variances


def mc_propagate(model, mean, cov, u, rng, n_samples=100_000, n_batches=10):
    """Monte-Carlo oracle for one propagation step.

    Samples the state, then the GP posterior of the difference per sample,
    composes next states, and returns batched estimates with standard
    errors: (mean, mean_se, cov, cov_se). Process noise is added to the
    covariance analytically.
    """
    d = len(mean)
    batch = n_samples // n_batches
    mean_batches = np.zeros((n_batches, d))
    cov_batches = np.zeros((n_batches, d, d))
    for b in range(n_batches):
        x = rng.multivariate_normal(mean, cov, size=batch)
        raw = np.concatenate([x, np.tile(u, (batch, 1))], axis=1)
        pm, pv = gp_posterior_stats(model, raw)
        delta = pm + np.sqrt(pv) * rng.standard_normal(pv.shape)
        nxt = x + delta
        mean_batches[b] = nxt.mean(axis=0)
        cov_batches[b] = np.cov(nxt.T, bias=False).reshape(d, d)
    mean_est = mean_batches.mean(axis=0)
    mean_se = mean_batches.std(axis=0, ddof=1) / np.sqrt(n_batches)
    cov_est = cov_batches.mean(axis=0) + np.diag(model.noise_variances())
    cov_se = cov_batches.std(axis=0, ddof=1) / np.sqrt(n_batches)
    return mean_est, mean_se, cov_est, cov_se


def central_difference(f, x, eps=1e-5):
    """Central finite-difference gradient of scalar f at x (1-d array)."""
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[i] += eps
        xm[i] -= eps
        g[i] = (f(xp) - f(xm)) / (2 * eps)
    return g


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
