"""Independent dense and finite-difference oracles used across the tests.

Everything here works on explicit S x S matrices or brute-force numeric
differentiation, deliberately sharing no code with the implementation
under test.
"""

import numpy as np


def dense_cov(dist) -> np.ndarray:
    return dist.cov_factor @ dist.cov_factor.T + np.diag(dist.cov_diag)


def dense_log_prob(mu, sigma, x) -> float:
    """Multivariate normal log-density via dense Cholesky."""
    s = mu.shape[0]
    chol = np.linalg.cholesky(sigma)
    half = np.linalg.solve(chol, x - mu)
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    return float(-0.5 * (s * np.log(2 * np.pi) + logdet + half @ half))


def dense_logdet(sigma) -> float:
    """Log-determinant via eigendecomposition."""
    return float(np.sum(np.log(np.linalg.eigvalsh(sigma))))


def dense_entropy(sigma) -> float:
    """0.5 * log det(2 pi e Sigma) via the dense determinant."""
    s = sigma.shape[0]
    return float(0.5 * (s * (1.0 + np.log(2 * np.pi)) + dense_logdet(sigma)))


def dense_conditional_mean(mu, sigma, idx2, b) -> np.ndarray:
    """Partitioned-Gaussian conditional mean of the complement of idx2."""
    s = mu.shape[0]
    idx2 = np.asarray(idx2)
    mask = np.ones(s, dtype=bool)
    mask[idx2] = False
    idx1 = np.nonzero(mask)[0]
    s22 = sigma[np.ix_(idx2, idx2)]
    s12 = sigma[np.ix_(idx1, idx2)]
    return mu[idx1] + s12 @ np.linalg.solve(s22, b - mu[idx2])


def central_diff(f, x0, h=1e-5) -> np.ndarray:
    """Central finite differences of a scalar function of a flat array."""
    x0 = np.asarray(x0, dtype=np.float64)
    g = np.zeros_like(x0)
    flat = g.reshape(-1)
    xf = x0.reshape(-1)
    for i in range(xf.size):
        xp = xf.copy()
        xm = xf.copy()
        xp[i] += h
        xm[i] -= h
        flat[i] = (f(xp.reshape(x0.shape)) - f(xm.reshape(x0.shape))) / (2 * h)
    return g


def rel_err(a, b) -> float:
    """Relative error between arrays, normalised by the reference norm."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(b), 1e-300)
    return float(np.linalg.norm(a - b) / denom)


def random_instance(rng, s, r, d_low=0.3, d_high=2.0):
    """A well-conditioned random (mu, P, d) triple."""
    mu = rng.normal(size=s)
    p = rng.normal(size=(s, r))
    d = rng.uniform(d_low, d_high, size=s)
    return mu, p, d
