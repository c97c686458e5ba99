import numpy as np
import pytest

from gpmpc.trig import linear_map_moments, sincos_augment


def mc_sincos(mu, cov, P, rng, n=400_000, n_batches=20):
    batch = n // n_batches
    dims = len(mu) + 2 * P.shape[0]
    est = np.zeros((n_batches, dims))
    cov_est = np.zeros((n_batches, dims, dims))
    for b in range(n_batches):
        x = rng.multivariate_normal(mu, cov, size=batch)
        w = x @ P.T
        feats = np.concatenate([x, np.sin(w), np.cos(w)], axis=1)
        est[b] = feats.mean(axis=0)
        cov_est[b] = np.cov(feats.T, bias=False)
    return (
        est.mean(0),
        est.std(0, ddof=1) / np.sqrt(n_batches),
        cov_est.mean(0),
        cov_est.std(0, ddof=1) / np.sqrt(n_batches),
    )


def test_zero_variance_collapses_to_deterministic_trig():
    mu = np.array([0.3, -1.2, 2.0])
    cov = np.zeros((3, 3))
    P = np.array([[0.0, 1.0, 0.0], [1.0, 1.0, 0.0]])
    m, S = sincos_augment(mu, cov, P)
    w = P @ mu
    np.testing.assert_allclose(m, np.concatenate([mu, np.sin(w), np.cos(w)]), atol=1e-12)
    np.testing.assert_allclose(S, 0.0, atol=1e-12)


def test_single_angle_moments_match_identities():
    # E[sin t] = sin(m) e^{-v/2}, E[cos t] = cos(m) e^{-v/2}
    mu = np.array([0.7])
    var = 0.4
    cov = np.array([[var]])
    P = np.eye(1)
    m, S = sincos_augment(mu, cov, P)
    decay = np.exp(-var / 2)
    np.testing.assert_allclose(m[1], np.sin(0.7) * decay, rtol=1e-12)
    np.testing.assert_allclose(m[2], np.cos(0.7) * decay, rtol=1e-12)
    e_sin2 = 0.5 * (1 - np.cos(1.4) * np.exp(-2 * var))
    np.testing.assert_allclose(S[1, 1], e_sin2 - m[1] ** 2, rtol=1e-12)


def test_zero_mean_angle():
    # theta ~ N(0, s^2): E[sin] = 0, E[cos] = e^{-s^2/2}
    m, S = sincos_augment(np.zeros(1), np.array([[0.09]]), np.eye(1))
    assert m[1] == pytest.approx(0.0, abs=1e-15)
    assert m[2] == pytest.approx(np.exp(-0.045), rel=1e-12)


def test_augmented_moments_match_monte_carlo(rng):
    mu = np.array([0.4, -0.9, 1.3, 0.2])
    A = rng.normal(size=(4, 4))
    cov = 0.3 * A @ A.T / 4
    P = np.array([[1.0, 0, 0, 0], [1.0, 1.0, 0, 0]])
    m, S = sincos_augment(mu, cov, P)
    m_mc, m_se, S_mc, S_se = mc_sincos(mu, cov, P, rng)
    # 64 covariance entries compared at once: use 4 SE plus a small floor so
    # the multiple-comparison false-alarm rate is negligible.
    assert np.all(np.abs(m - m_mc) <= 4 * m_se + 1e-5)
    assert np.all(np.abs(S - S_mc) <= 4 * S_se + 1e-5)


def test_covariance_is_psd(rng):
    for _ in range(20):
        d = rng.integers(1, 5)
        mu = rng.normal(size=d)
        A = rng.normal(size=(d, d))
        cov = A @ A.T
        k = int(rng.integers(1, 3))
        P = rng.normal(size=(k, d))
        _, S = sincos_augment(mu, cov, P)
        w = np.linalg.eigvalsh(np.asarray(S))
        assert w.min() >= -1e-9


def test_linear_map_moments():
    mu = np.array([1.0, 2.0])
    cov = np.array([[0.5, 0.1], [0.1, 0.3]])
    A = np.array([[2.0, 0.0]])
    m, S = linear_map_moments(mu, cov, A, offset=np.array([1.0]))
    assert m[0] == pytest.approx(3.0)
    assert S[0, 0] == pytest.approx(2.0)
