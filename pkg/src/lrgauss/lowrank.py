"""Low-rank multivariate normal distributions over flattened images.

The covariance is parameterised as ``Sigma = P @ P.T + diag(d)`` with an
S x R factor ``P`` and a strictly positive diagonal ``d``.  All operations
(likelihood, gradients, entropy, sampling, interpolation, component
scaling, conditioning) work through the R x R capacitance matrix
``I + P.T @ inv(D) @ P`` so the dense S x S covariance is never formed.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

__all__ = [
    "LowRankGaussian",
    "CapacitanceCache",
    "ObservationNoise",
    "DegenerateInterpolationError",
    "build_cache",
    "log_prob",
    "log_prob_batch",
    "log_prob_grad",
    "mean_log_prob_and_grad",
    "entropy",
    "entropy_grad",
    "sample",
    "slerp",
    "slerp_interpolate",
    "scale_components",
    "condition_on_edit",
    "apply_edits",
    "marginal_variance",
    "to_bytes",
    "from_bytes",
]

_LOG_2PI = np.log(2.0 * np.pi)

_MAGIC = b"LRG1"


class DegenerateInterpolationError(ValueError):
    """Spherical interpolation endpoints are parallel, antipodal or zero."""


@dataclass
class LowRankGaussian:
    """Normal distribution with covariance ``P @ P.T + diag(d)``.

    Parameters
    ----------
    mu : ndarray, shape (S,)
        Mean vector (flattened image intensities, unclamped).
    cov_factor : ndarray, shape (S, R)
        Covariance factor ``P``.  ``R = 0`` degenerates to a diagonal
        Gaussian.
    cov_diag : ndarray, shape (S,)
        Strictly positive diagonal ``d``.
    """

    mu: np.ndarray
    cov_factor: np.ndarray
    cov_diag: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.cov_factor = np.asarray(self.cov_factor, dtype=np.float64)
        self.cov_diag = np.asarray(self.cov_diag, dtype=np.float64)
        if self.mu.ndim != 1:
            raise ValueError(f"mu must be a vector, got shape {self.mu.shape}")
        s = self.mu.shape[0]
        if self.cov_factor.ndim != 2 or self.cov_factor.shape[0] != s:
            raise ValueError(
                f"cov_factor must have shape ({s}, R), got {self.cov_factor.shape}"
            )
        if self.cov_factor.shape[1] > s:
            raise ValueError(
                f"rank {self.cov_factor.shape[1]} exceeds dimension {s}"
            )
        if self.cov_diag.shape != (s,):
            raise ValueError(
                f"cov_diag must have shape ({s},), got {self.cov_diag.shape}"
            )
        if not np.all(self.cov_diag > 0):
            raise ValueError("cov_diag must be strictly positive")

    @property
    def dim(self) -> int:
        return self.mu.shape[0]

    @property
    def rank(self) -> int:
        return self.cov_factor.shape[1]

    def dense_cov(self) -> np.ndarray:
        """Materialise the S x S covariance.  Only for small S (tests, oracles)."""
        return self.cov_factor @ self.cov_factor.T + np.diag(self.cov_diag)


@dataclass
class CapacitanceCache:
    """Reusable factorisation of the R x R capacitance ``I + P.T @ inv(D) @ P``.

    ``logdet_sigma`` is obtained through the matrix determinant lemma:
    ``logdet(Sigma) = logdet(m) + sum(log(d))``.
    """

    m: np.ndarray
    chol_m: np.ndarray  # lower triangular
    logdet_sigma: float


@dataclass
class ObservationNoise:
    """Auxiliary standard-normal noise driving a sample.

    ``omega_p`` lives in factor space (length R), ``omega_d`` in pixel
    space (length S).
    """

    omega_p: np.ndarray
    omega_d: np.ndarray

    def __post_init__(self):
        self.omega_p = np.asarray(self.omega_p, dtype=np.float64)
        self.omega_d = np.asarray(self.omega_d, dtype=np.float64)


def build_cache(dist: LowRankGaussian) -> CapacitanceCache:
    """Factorise the capacitance matrix and compute ``logdet(Sigma)``.

    Cost is O(S R^2 + R^3); never materialises the S x S covariance.

    Raises
    ------
    LinAlgError
        If the capacitance matrix is numerically non-SPD, which signals
        ill-conditioned covariance parameters.
    """
    p, d = dist.cov_factor, dist.cov_diag
    w = p / d[:, None]  # inv(D) @ P
    m = np.eye(dist.rank) + p.T @ w
    try:
        chol_m, _ = cho_factor(m, lower=True)
    except LinAlgError as exc:
        raise LinAlgError(
            "capacitance matrix is not positive definite; "
            "covariance parameters are ill-conditioned"
        ) from exc
    logdet = 2.0 * np.sum(np.log(np.diag(chol_m))) + np.sum(np.log(d))
    return CapacitanceCache(m=m, chol_m=np.tril(chol_m), logdet_sigma=float(logdet))


def _solve_cov(
    dist: LowRankGaussian, cache: CapacitanceCache, v: np.ndarray
) -> np.ndarray:
    """Return ``inv(Sigma) @ v`` via the Woodbury identity.

    ``v`` may be a vector (S,) or stacked rows (n, S); the same shape is
    returned.
    """
    d = dist.cov_diag
    u = v / d
    if dist.rank == 0:
        return u
    w = u @ dist.cov_factor  # (.., R)
    y = cho_solve((cache.chol_m, True), np.atleast_2d(w).T).T
    y = y.reshape(w.shape)
    return u - (y @ dist.cov_factor.T) / d


def _check_vector(dist: LowRankGaussian, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (dist.dim,):
        raise ValueError(f"expected vector of length {dist.dim}, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("input vector contains non-finite values")
    return x


def log_prob(
    dist: LowRankGaussian, x: np.ndarray, cache: CapacitanceCache | None = None
) -> float:
    """Log-density of ``x`` under ``dist``.

    The quadratic form is evaluated through the Woodbury identity,
    ``inv(Sigma) v = inv(D) v - inv(D) P inv(m) P.T inv(D) v``, at
    O(S R + R^2) cost once the cache is built.
    """
    x = _check_vector(dist, x)
    if cache is None:
        cache = build_cache(dist)
    v = x - dist.mu
    qf = float(v @ _solve_cov(dist, cache, v))
    return -0.5 * (dist.dim * _LOG_2PI + cache.logdet_sigma + qf)


def log_prob_batch(
    dist: LowRankGaussian, xs: np.ndarray, cache: CapacitanceCache | None = None
) -> np.ndarray:
    """Log-density of each row of ``xs`` (n, S) under the same ``dist``."""
    xs = np.asarray(xs, dtype=np.float64)
    if xs.ndim != 2 or xs.shape[1] != dist.dim:
        raise ValueError(f"expected (n, {dist.dim}) rows, got shape {xs.shape}")
    if cache is None:
        cache = build_cache(dist)
    v = xs - dist.mu
    qf = np.sum(v * _solve_cov(dist, cache, v), axis=1)
    return -0.5 * (dist.dim * _LOG_2PI + cache.logdet_sigma + qf)


def _inv_cov_factor_and_diag(
    dist: LowRankGaussian, cache: CapacitanceCache
) -> tuple[np.ndarray, np.ndarray]:
    """Return ``inv(Sigma) @ P`` (S, R) and ``diag(inv(Sigma))`` (S,).

    Uses ``inv(Sigma) P = inv(D) P inv(m)``, a consequence of the
    Woodbury identity with ``P.T inv(D) P = m - I``.
    """
    d = dist.cov_diag
    if dist.rank == 0:
        return np.zeros((dist.dim, 0)), 1.0 / d
    w = dist.cov_factor / d[:, None]
    t = cho_solve((cache.chol_m, True), w.T).T
    diag_inv = 1.0 / d - np.sum(w * t, axis=1)
    return t, diag_inv


def log_prob_grad(
    dist: LowRankGaussian, x: np.ndarray, cache: CapacitanceCache | None = None
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Analytic gradients of ``log_prob`` w.r.t. ``(mu, cov_factor, cov_diag)``.

    With ``a = inv(Sigma) (x - mu)``:

    * grad mu  = ``a``
    * grad P   = ``a (a.T P) - inv(Sigma) P``
    * grad d   = ``(a * a - diag(inv(Sigma))) / 2``
    """
    x = _check_vector(dist, x)
    if cache is None:
        cache = build_cache(dist)
    a = _solve_cov(dist, cache, x - dist.mu)
    t, diag_inv = _inv_cov_factor_and_diag(dist, cache)
    grad_mu = a
    grad_factor = np.outer(a, a @ dist.cov_factor) - t
    grad_diag = 0.5 * (a * a - diag_inv)
    return grad_mu, grad_factor, grad_diag


def mean_log_prob_and_grad(
    dist: LowRankGaussian, xs: np.ndarray, cache: CapacitanceCache | None = None
) -> tuple[float, np.ndarray, np.ndarray, np.ndarray]:
    """Batch-mean log-density and its gradients, vectorised over rows of ``xs``.

    Equivalent to averaging :func:`log_prob` / :func:`log_prob_grad` over
    the batch but without per-row Python overhead; used by the
    distribution-only trainer.
    """
    xs = np.asarray(xs, dtype=np.float64)
    if cache is None:
        cache = build_cache(dist)
    n = xs.shape[0]
    v = xs - dist.mu
    a = _solve_cov(dist, cache, v)
    lp = float(
        np.mean(
            -0.5 * (dist.dim * _LOG_2PI + cache.logdet_sigma + np.sum(v * a, axis=1))
        )
    )
    t, diag_inv = _inv_cov_factor_and_diag(dist, cache)
    grad_mu = np.mean(a, axis=0)
    grad_factor = (a.T @ (a @ dist.cov_factor)) / n - t
    grad_diag = 0.5 * (np.mean(a * a, axis=0) - diag_inv)
    return lp, grad_mu, grad_factor, grad_diag


def entropy(dist: LowRankGaussian, cache: CapacitanceCache | None = None) -> float:
    """Differential entropy ``S (1 + log 2 pi) / 2 + logdet(Sigma) / 2``."""
    if cache is None:
        cache = build_cache(dist)
    return 0.5 * dist.dim * (1.0 + _LOG_2PI) + 0.5 * cache.logdet_sigma


def entropy_grad(
    dist: LowRankGaussian, cache: CapacitanceCache | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Analytic gradients of :func:`entropy` w.r.t. ``(cov_factor, cov_diag)``.

    The entropy is mean-free; grad P = ``inv(Sigma) P`` and
    grad d = ``diag(inv(Sigma)) / 2``.
    """
    if cache is None:
        cache = build_cache(dist)
    t, diag_inv = _inv_cov_factor_and_diag(dist, cache)
    return t, 0.5 * diag_inv


def sample(dist: LowRankGaussian, noise: ObservationNoise) -> np.ndarray:
    """Deterministic sample ``mu + P @ omega_p + sqrt(d) * omega_d``.

    With standard-normal noise the output has mean ``mu`` and covariance
    ``P @ P.T + diag(d)``.
    """
    if noise.omega_p.shape != (dist.rank,):
        raise ValueError(
            f"omega_p must have shape ({dist.rank},), got {noise.omega_p.shape}"
        )
    if noise.omega_d.shape != (dist.dim,):
        raise ValueError(
            f"omega_d must have shape ({dist.dim},), got {noise.omega_d.shape}"
        )
    return dist.mu + dist.cov_factor @ noise.omega_p + np.sqrt(dist.cov_diag) * noise.omega_d


def slerp(a: np.ndarray, b: np.ndarray, t: float) -> np.ndarray:
    """Spherical linear interpolation between vectors ``a`` and ``b``.

    ``slerp(a, b, t) = sin((1-t) w) / sin(w) * a + sin(t w) / sin(w) * b``
    with ``w = arccos(<a, b> / (|a| |b|))``.  Preserves the norm when
    ``|a| == |b|`` and returns the endpoints exactly at ``t in {0, 1}``.

    Raises
    ------
    DegenerateInterpolationError
        If either endpoint has zero norm or the endpoints are parallel or
        antipodal (``sin(w) == 0``), where the formula is undefined.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DegenerateInterpolationError("cannot interpolate a zero-norm vector")
    cos_w = np.clip(a @ b / (na * nb), -1.0, 1.0)
    if abs(cos_w) > 1.0 - 1e-12:
        raise DegenerateInterpolationError(
            "interpolation endpoints are parallel or antipodal (sin(w) ~ 0)"
        )
    w = np.arccos(cos_w)
    sin_w = np.sin(w)
    return (np.sin((1.0 - t) * w) / sin_w) * a + (np.sin(t * w) / sin_w) * b


def slerp_interpolate(
    dist: LowRankGaussian,
    noise_a: ObservationNoise,
    noise_b: ObservationNoise,
    t: float,
) -> np.ndarray:
    """Sample along the spherical path between two factor-space noise draws.

    Only ``omega_p`` is interpolated; ``omega_d`` is held fixed at
    ``noise_a``'s value, since the diagonal term only contributes a small
    amount of uncorrelated noise.
    """
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    omega_p = slerp(noise_a.omega_p, noise_b.omega_p, t)
    return sample(dist, ObservationNoise(omega_p=omega_p, omega_d=noise_a.omega_d))


def _signed_thin_svd(p: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Thin SVD with a deterministic sign convention.

    Singular values descend; each left singular vector is flipped so its
    largest-magnitude entry is positive, keeping component indices stable
    across recomputation.
    """
    u, s, vt = np.linalg.svd(p, full_matrices=False)
    for j in range(u.shape[1]):
        i = int(np.argmax(np.abs(u[:, j])))
        if u[i, j] < 0:
            u[:, j] = -u[:, j]
            vt[j, :] = -vt[j, :]
    return u, s, vt


def scale_components(dist: LowRankGaussian, a: np.ndarray) -> LowRankGaussian:
    """Rescale the principal components of the covariance factor.

    Decomposes ``P = U diag(s) V.T`` (thin SVD) and returns a copy of the
    distribution with ``cov_factor = U diag(s * a) V.T``; ``mu`` and
    ``cov_diag`` are untouched.  ``a = ones`` is an identity, ``a = zeros``
    removes all correlated structure.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.shape != (dist.rank,):
        raise ValueError(f"expected {dist.rank} coefficients, got shape {a.shape}")
    u, s, vt = _signed_thin_svd(dist.cov_factor)
    scaled = (u * (s * a)) @ vt
    return replace(dist, cov_factor=scaled)


def condition_on_edit(
    dist: LowRankGaussian,
    edit_indices: np.ndarray,
    edit_values: np.ndarray,
    max_edits: int = 4096,
) -> np.ndarray:
    """Conditional mean of the unedited entries given pinned edited entries.

    Partitioning the distribution into unedited (1) and edited (2) blocks,
    returns ``mu_1 + Sigma_12 inv(Sigma_22) (b - mu_2)`` where ``b`` is
    ``edit_values``.  Only the k x k edited block is densified; the
    conditional covariance is never computed.  The result is ordered by
    ascending unedited index.
    """
    idx2 = np.asarray(edit_indices, dtype=np.intp).ravel()
    b = np.asarray(edit_values, dtype=np.float64).ravel()
    k = idx2.shape[0]
    s = dist.dim
    if k == 0 or k >= s:
        raise ValueError(f"edit count must satisfy 1 <= k < {s}, got {k}")
    if k > max_edits:
        raise ValueError(f"edit count {k} exceeds the limit of {max_edits}")
    if b.shape != (k,):
        raise ValueError(f"expected {k} edit values, got shape {b.shape}")
    if np.unique(idx2).shape[0] != k:
        raise ValueError("edit indices must be distinct")
    if idx2.min() < 0 or idx2.max() >= s:
        raise ValueError(f"edit indices must lie in [0, {s})")
    mask = np.ones(s, dtype=bool)
    mask[idx2] = False
    idx1 = np.nonzero(mask)[0]

    p2 = dist.cov_factor[idx2]
    sigma22 = p2 @ p2.T + np.diag(dist.cov_diag[idx2])
    try:
        c22 = cho_factor(sigma22, lower=True)
    except LinAlgError as exc:  # unreachable with d > 0, kept as a guard
        raise LinAlgError("edited-block covariance is singular") from exc
    w = cho_solve(c22, b - dist.mu[idx2])
    # Sigma_12 @ w = P_1 @ (P_2.T @ w): never builds the (S-k) x k block.
    return dist.mu[idx1] + dist.cov_factor[idx1] @ (p2.T @ w)


def apply_edits(
    dist: LowRankGaussian,
    current: np.ndarray,
    edit_indices: np.ndarray,
    edit_values: np.ndarray,
    max_edits: int = 4096,
) -> np.ndarray:
    """Pin edited entries of ``current`` and propagate the rest.

    Conditions the distribution re-centred at ``current`` (same
    covariance) on the edited values, so repeated application composes
    sequentially: each call's output is the next call's base image.
    Returns the full-length image; an empty edit set is the identity.
    """
    edit_indices = np.asarray(edit_indices, dtype=np.intp).ravel()
    if edit_indices.size == 0:
        return np.array(current, dtype=np.float64, copy=True)
    recentred = replace(dist, mu=np.asarray(current, dtype=np.float64))
    conditional = condition_on_edit(recentred, edit_indices, edit_values, max_edits=max_edits)
    out = np.array(current, dtype=np.float64, copy=True)
    mask = np.ones(dist.dim, dtype=bool)
    mask[edit_indices] = False
    out[edit_indices] = np.asarray(edit_values, dtype=np.float64)
    out[mask] = conditional
    return out


def marginal_variance(dist: LowRankGaussian) -> np.ndarray:
    """Per-entry marginal variance, ``d_i + ||P_i||^2`` (the diagonal of Sigma)."""
    return dist.cov_diag + np.sum(dist.cov_factor**2, axis=1)


def to_bytes(dist: LowRankGaussian) -> bytes:
    """Serialise to the little-endian wire format.

    Layout: magic ``LRG1``, uint64 S, uint64 R, then float64 arrays
    ``mu`` (S), ``P`` row-major (S * R), ``d`` (S).
    """
    header = _MAGIC + struct.pack("<QQ", dist.dim, dist.rank)
    body = (
        dist.mu.astype("<f8").tobytes()
        + np.ascontiguousarray(dist.cov_factor, dtype="<f8").tobytes()
        + dist.cov_diag.astype("<f8").tobytes()
    )
    return header + body


def from_bytes(buf: bytes) -> LowRankGaussian:
    """Inverse of :func:`to_bytes`."""
    if buf[:4] != _MAGIC:
        raise ValueError("not a serialised low-rank Gaussian (bad magic)")
    s, r = struct.unpack_from("<QQ", buf, 4)
    expected = 20 + 8 * (s + s * r + s)
    if len(buf) != expected:
        raise ValueError(f"expected {expected} bytes, got {len(buf)}")
    off = 20
    mu = np.frombuffer(buf, dtype="<f8", count=s, offset=off).copy()
    off += 8 * s
    p = np.frombuffer(buf, dtype="<f8", count=s * r, offset=off).reshape(s, r).copy()
    off += 8 * s * r
    d = np.frombuffer(buf, dtype="<f8", count=s, offset=off).copy()
    return LowRankGaussian(mu=mu, cov_factor=p, cov_diag=d)
