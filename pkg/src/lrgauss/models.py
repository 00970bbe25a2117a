"""Generative models emitting low-rank Gaussian observation distributions.

Two model kinds: a dense VAE whose decoder has three affine heads (mean,
covariance factor, log-diagonal) and a distribution-only model that is
nothing but the free parameters of one low-rank Gaussian, trained by
gradient ascent on the likelihood under an entropy budget.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import lowrank
from .constrained import AdamOptimizer, LagrangianState, loss_weights, update_multipliers
from .lowrank import LowRankGaussian, build_cache
from .nets import DenseLayer, affine_backward, affine_forward, init_layer, trunk_backward, trunk_forward

__all__ = [
    "DiagonalGaussian",
    "VaeModel",
    "DistOnlyModel",
    "DistFitConfig",
    "build_vae",
    "encode",
    "reparameterize",
    "decode",
    "kl_to_standard_normal",
    "elbo_terms",
    "elbo_backward",
    "fit_dist_only",
]


@dataclass
class DiagonalGaussian:
    """Latent posterior with independent coordinates.

    ``mean`` and ``log_var`` have matching shape, either ``(L,)`` for a
    single distribution or ``(n, L)`` for a batch.
    """

    mean: np.ndarray
    log_var: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.log_var = np.asarray(self.log_var, dtype=np.float64)
        if self.mean.shape != self.log_var.shape:
            raise ValueError(
                f"mean shape {self.mean.shape} != log_var shape {self.log_var.shape}"
            )


def reparameterize(q: DiagonalGaussian, eps: np.ndarray) -> np.ndarray:
    """Differentiable sample ``mean + exp(log_var / 2) * eps``."""
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != q.mean.shape:
        raise ValueError(f"eps shape {eps.shape} != mean shape {q.mean.shape}")
    return q.mean + np.exp(0.5 * q.log_var) * eps


def kl_to_standard_normal(q: DiagonalGaussian):
    """Closed-form KL(q || N(0, I)), summed over coordinates.

    Returns a scalar for a single distribution, a length-n array for a
    batch.
    """
    kl = 0.5 * np.sum(np.exp(q.log_var) + q.mean**2 - 1.0 - q.log_var, axis=-1)
    return float(kl) if q.mean.ndim == 1 else kl


@dataclass
class VaeModel:
    """Dense encoder and three-headed dense decoder.

    The decoder trunk feeds affine heads for the observation mean, the
    covariance factor (emitted flat and reshaped to S x R) and, unless
    running with a fixed diagonal, the log of the covariance diagonal.
    ``factor_trainable`` / ``diag_trainable`` freeze the variance heads:
    a frozen head's output is still emitted but treated as a constant
    during backprop.
    """

    obs_dim: int
    latent_dim: int
    rank: int
    enc_trunk: list[DenseLayer]
    enc_mean: DenseLayer
    enc_logvar: DenseLayer
    dec_trunk: list[DenseLayer]
    mean_head: DenseLayer
    factor_head: DenseLayer
    diag_head: DenseLayer | None
    epsilon: float = 1e-5
    factor_trainable: bool = True
    diag_trainable: bool = True

    @property
    def epsilon_mode(self) -> bool:
        return self.diag_head is None

    def params(self) -> dict[str, np.ndarray]:
        """Named views of every parameter array (no copies)."""
        out: dict[str, np.ndarray] = {}
        for i, layer in enumerate(self.enc_trunk):
            out[f"enc_trunk.{i}.weight"] = layer.weight
            out[f"enc_trunk.{i}.bias"] = layer.bias
        for name, layer in (
            ("enc_mean", self.enc_mean),
            ("enc_logvar", self.enc_logvar),
        ):
            out[f"{name}.weight"] = layer.weight
            out[f"{name}.bias"] = layer.bias
        for i, layer in enumerate(self.dec_trunk):
            out[f"dec_trunk.{i}.weight"] = layer.weight
            out[f"dec_trunk.{i}.bias"] = layer.bias
        heads = [("mean_head", self.mean_head), ("factor_head", self.factor_head)]
        if self.diag_head is not None:
            heads.append(("diag_head", self.diag_head))
        for name, layer in heads:
            out[f"{name}.weight"] = layer.weight
            out[f"{name}.bias"] = layer.bias
        return out


def build_vae(
    rng: np.random.Generator,
    obs_dim: int,
    latent_dim: int,
    rank: int,
    hidden: tuple[int, ...] = (256, 128),
    epsilon_mode: bool = True,
    epsilon: float = 1e-5,
    data_mean: np.ndarray | None = None,
    init_diag_var: float = 1e-2,
) -> VaeModel:
    """Construct a VAE with the package's initialisation scheme.

    Trunks use uniform fan-in scaling.  The decoder mean head starts at
    the dataset mean (bias = ``data_mean``, small weights) so the early
    mean-only phase begins near the data.  The factor head starts with
    small random weights: exactly zero would be a stationary point of the
    likelihood in the factor, which gradient steps can never leave.
    """
    widths = [obs_dim, *hidden]
    enc_trunk = [init_layer(rng, widths[i], widths[i + 1]) for i in range(len(hidden))]
    enc_mean = init_layer(rng, hidden[-1], latent_dim)
    enc_logvar = init_layer(rng, hidden[-1], latent_dim)

    dec_widths = [latent_dim, *reversed(hidden)]
    dec_trunk = [
        init_layer(rng, dec_widths[i], dec_widths[i + 1]) for i in range(len(hidden))
    ]
    top = dec_widths[-1]
    mean_head = init_layer(rng, top, obs_dim, scale=1e-3)
    if data_mean is not None:
        mean_head.bias = np.asarray(data_mean, dtype=np.float64).copy()
    factor_head = init_layer(rng, top, obs_dim * rank, scale=1e-3)
    diag_head = None
    if not epsilon_mode:
        diag_head = init_layer(rng, top, obs_dim, scale=1e-3)
        diag_head.bias = np.full(obs_dim, np.log(init_diag_var))
    return VaeModel(
        obs_dim=obs_dim,
        latent_dim=latent_dim,
        rank=rank,
        enc_trunk=enc_trunk,
        enc_mean=enc_mean,
        enc_logvar=enc_logvar,
        dec_trunk=dec_trunk,
        mean_head=mean_head,
        factor_head=factor_head,
        diag_head=diag_head,
        epsilon=epsilon,
    )


def encode(model: VaeModel, x: np.ndarray) -> DiagonalGaussian:
    """Deterministic forward pass producing the latent posterior.

    ``x`` is a batch of flattened images, shape (n, S) or a single (S,).
    """
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    x2 = np.atleast_2d(x)
    if x2.shape[1] != model.obs_dim:
        raise ValueError(f"expected width {model.obs_dim}, got {x2.shape[1]}")
    h, _ = trunk_forward(model.enc_trunk, x2)
    mean = affine_forward(model.enc_mean, h)
    log_var = affine_forward(model.enc_logvar, h)
    if squeeze:
        mean, log_var = mean[0], log_var[0]
    return DiagonalGaussian(mean=mean, log_var=log_var)


def _decode_forward(model: VaeModel, z2: np.ndarray):
    """Batched decoder forward; returns heads plus the trunk cache."""
    h, cache = trunk_forward(model.dec_trunk, z2)
    mu = affine_forward(model.mean_head, h)
    factor = affine_forward(model.factor_head, h).reshape(
        z2.shape[0], model.obs_dim, model.rank
    )
    if model.diag_head is None:
        log_d = None
        d = np.full((z2.shape[0], model.obs_dim), model.epsilon)
    else:
        log_d = affine_forward(model.diag_head, h)
        d = np.exp(log_d)
    return mu, factor, d, log_d, h, cache


def decode(model: VaeModel, z: np.ndarray) -> LowRankGaussian:
    """Decode one latent vector into its observation distribution."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (model.latent_dim,):
        raise ValueError(f"expected latent of length {model.latent_dim}, got {z.shape}")
    mu, factor, d, _, _, _ = _decode_forward(model, z[None, :])
    return LowRankGaussian(mu=mu[0], cov_factor=factor[0], cov_diag=d[0])


def _per_item_dists(mu, factor, d):
    for i in range(mu.shape[0]):
        dist = LowRankGaussian(mu=mu[i], cov_factor=factor[i], cov_diag=d[i])
        yield i, dist, build_cache(dist)


def elbo_terms(
    model: VaeModel, x: np.ndarray, eps: np.ndarray
) -> tuple[float, float, float]:
    """Single-sample variational estimate of (nll, kl, entropy), batch-averaged.

    nll is the negative log-density of each input under its decoded
    distribution; kl is the latent divergence from the standard-normal
    prior; entropy is that of the decoded observation distribution.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    eps = np.atleast_2d(np.asarray(eps, dtype=np.float64))
    q = encode(model, x)
    z = reparameterize(q, eps)
    mu, factor, d, _, _, _ = _decode_forward(model, z)
    lp = 0.0
    ent = 0.0
    for i, dist, cache in _per_item_dists(mu, factor, d):
        lp += lowrank.log_prob(dist, x[i], cache)
        ent += lowrank.entropy(dist, cache)
    n = x.shape[0]
    kl = float(np.mean(kl_to_standard_normal(q)))
    return -lp / n, kl, ent / n


def elbo_backward(
    model: VaeModel,
    x: np.ndarray,
    eps: np.ndarray,
    weight_fn=lambda nll, kl, ent: (1.0, 0.0, 0.0),
) -> tuple[tuple[float, float, float], dict[str, np.ndarray]]:
    """Terms plus analytic gradients of their weighted sum.

    ``weight_fn(nll, kl, entropy) -> (w_nll, w_kl, w_entropy)`` is
    evaluated on the batch-averaged terms; the returned gradients are
    those of ``w_nll * nll + w_kl * kl + w_entropy * entropy`` w.r.t.
    every trainable parameter.  Frozen heads contribute no gradients and
    block backflow into the trunk.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    eps = np.atleast_2d(np.asarray(eps, dtype=np.float64))
    n = x.shape[0]

    he, enc_cache = trunk_forward(model.enc_trunk, x)
    q_mean = affine_forward(model.enc_mean, he)
    q_logvar = affine_forward(model.enc_logvar, he)
    half_std = np.exp(0.5 * q_logvar)
    z = q_mean + half_std * eps
    mu, factor, d, log_d, hd, dec_cache = _decode_forward(model, z)

    lp = 0.0
    ent = 0.0
    g_mu = np.zeros_like(mu)
    g_factor = np.zeros_like(factor)
    g_d = np.zeros_like(d)
    per_item = []
    for i, dist, cache in _per_item_dists(mu, factor, d):
        lp += lowrank.log_prob(dist, x[i], cache)
        ent += lowrank.entropy(dist, cache)
        per_item.append((i, dist, cache))
    kl_items = kl_to_standard_normal(
        DiagonalGaussian(mean=q_mean, log_var=q_logvar)
    )
    nll = -lp / n
    kl = float(np.mean(kl_items))
    entropy_mean = ent / n
    w_nll, w_kl, w_ent = weight_fn(nll, kl, entropy_mean)

    want_var_grads = (w_nll != 0.0 or w_ent != 0.0) and (
        model.factor_trainable or (model.diag_head is not None and model.diag_trainable)
    )
    for i, dist, cache in per_item:
        if w_nll != 0.0:
            gm, gp, gd = lowrank.log_prob_grad(dist, x[i], cache)
            g_mu[i] += (-w_nll / n) * gm
            if want_var_grads:
                g_factor[i] += (-w_nll / n) * gp
                g_d[i] += (-w_nll / n) * gd
        if w_ent != 0.0 and want_var_grads:
            gp_h, gd_h = lowrank.entropy_grad(dist, cache)
            g_factor[i] += (w_ent / n) * gp_h
            g_d[i] += (w_ent / n) * gd_h

    grads: dict[str, np.ndarray] = {}
    g_hd = np.zeros_like(hd)

    g_hd_part, g_w, g_b = affine_backward(model.mean_head, hd, g_mu)
    g_hd += g_hd_part
    grads["mean_head.weight"] = g_w
    grads["mean_head.bias"] = g_b

    if model.factor_trainable:
        g_flat = g_factor.reshape(n, model.obs_dim * model.rank)
        g_hd_part, g_w, g_b = affine_backward(model.factor_head, hd, g_flat)
        g_hd += g_hd_part
        grads["factor_head.weight"] = g_w
        grads["factor_head.bias"] = g_b

    if model.diag_head is not None and model.diag_trainable:
        g_logd = g_d * d  # chain through d = exp(log_d)
        g_hd_part, g_w, g_b = affine_backward(model.diag_head, hd, g_logd)
        g_hd += g_hd_part
        grads["diag_head.weight"] = g_w
        grads["diag_head.bias"] = g_b

    g_z, dec_grads = trunk_backward(model.dec_trunk, dec_cache, g_hd)
    for i, (g_w, g_b) in enumerate(dec_grads):
        grads[f"dec_trunk.{i}.weight"] = g_w
        grads[f"dec_trunk.{i}.bias"] = g_b

    # Reparameterisation chain plus the direct KL dependence on (mean, log_var).
    g_q_mean = g_z + (w_kl / n) * q_mean
    g_q_logvar = g_z * (0.5 * half_std * eps) + (w_kl / n) * 0.5 * (
        np.exp(q_logvar) - 1.0
    )

    g_he = np.zeros_like(he)
    g_he_part, g_w, g_b = affine_backward(model.enc_mean, he, g_q_mean)
    g_he += g_he_part
    grads["enc_mean.weight"] = g_w
    grads["enc_mean.bias"] = g_b
    g_he_part, g_w, g_b = affine_backward(model.enc_logvar, he, g_q_logvar)
    g_he += g_he_part
    grads["enc_logvar.weight"] = g_w
    grads["enc_logvar.bias"] = g_b

    _, enc_grads = trunk_backward(model.enc_trunk, enc_cache, g_he)
    for i, (g_w, g_b) in enumerate(enc_grads):
        grads[f"enc_trunk.{i}.weight"] = g_w
        grads[f"enc_trunk.{i}.bias"] = g_b

    return (nll, kl, entropy_mean), grads


@dataclass
class DistOnlyModel:
    """A free-standing observation distribution with no network in front.

    When the diagonal is free its master parameter is ``log_diag``
    (positivity by construction); ``dist.cov_diag`` is kept in sync as
    ``exp(log_diag)`` by the training loops.
    """

    dist: LowRankGaussian
    epsilon_mode: bool = False
    log_diag: np.ndarray | None = None

    def __post_init__(self):
        if not self.epsilon_mode and self.log_diag is None:
            self.log_diag = np.log(self.dist.cov_diag)

    def params(self) -> dict[str, np.ndarray]:
        out = {"mu": self.dist.mu, "cov_factor": self.dist.cov_factor}
        if not self.epsilon_mode:
            out["log_diag"] = self.log_diag
        return out

    def sync_diag(self) -> None:
        """Refresh ``dist.cov_diag`` from the master ``log_diag``."""
        if not self.epsilon_mode:
            self.dist.cov_diag[:] = np.exp(self.log_diag)


@dataclass
class DistFitConfig:
    """Settings for :func:`fit_dist_only`."""

    rank: int = 2
    steps: int = 4000
    lr: float = 1e-2
    seed: int = 0
    batch_size: int | None = None  # None = full batch
    epsilon_mode: bool = False
    epsilon: float = 1e-5
    xi_h: float | None = None  # None = derived from the data variance
    multiplier_lr: float = 1e-2
    damping: float = 1.0
    entropy_constraint: bool = True
    init_factor_scale: float = 1e-2


def _auto_entropy_target(xs: np.ndarray) -> float:
    """Entropy budget from the data: isotropic Gaussian at twice the
    observed mean per-pixel variance.  Guards against variance explosion
    without biasing a well-behaved fit."""
    s = xs.shape[1]
    var = max(float(np.mean(np.var(xs, axis=0))), 1e-12)
    return 0.5 * s * (1.0 + np.log(2.0 * np.pi)) + 0.5 * s * np.log(2.0 * var)


def fit_dist_only(data: np.ndarray, config: DistFitConfig) -> DistOnlyModel:
    """Fit a low-rank Gaussian directly to data rows by gradient ascent.

    Minimises the batch-mean negative log-density under the entropy
    budget, using damped multiplier dynamics for the constraint.  The
    mean starts at the sample mean, the diagonal at the per-pixel sample
    variance and the factor at small random values.

    Raises
    ------
    FloatingPointError
        If the loss becomes non-finite (with the offending step in the
        message).
    """
    xs = np.asarray(data, dtype=np.float64)
    if xs.ndim != 2 or xs.shape[0] == 0:
        raise ValueError("data must be a nonempty (n, S) array")
    n, s = xs.shape
    rng = np.random.default_rng(config.seed)

    mu = xs.mean(axis=0)
    if config.epsilon_mode:
        d = np.full(s, config.epsilon)
    else:
        d = np.clip(np.var(xs, axis=0), 1e-6, None)
    p = rng.normal(scale=config.init_factor_scale, size=(s, config.rank))
    model = DistOnlyModel(
        dist=LowRankGaussian(mu=mu, cov_factor=p, cov_diag=d),
        epsilon_mode=config.epsilon_mode,
    )
    params = model.params()

    xi_h = config.xi_h if config.xi_h is not None else _auto_entropy_target(xs)
    state = LagrangianState(
        xi_kl=0.0,
        xi_h=xi_h,
        damping=config.damping,
        multiplier_lr=config.multiplier_lr,
    )
    opt = AdamOptimizer(lr=config.lr)

    for step in range(config.steps):
        if config.batch_size is None or config.batch_size >= n:
            batch = xs
        else:
            batch = xs[rng.choice(n, size=config.batch_size, replace=False)]
        dist = model.dist
        cache = build_cache(dist)
        lp, g_mu, g_p, g_d = lowrank.mean_log_prob_and_grad(dist, batch, cache)
        nll = -lp
        ent = lowrank.entropy(dist, cache)
        if not (np.isfinite(nll) and np.isfinite(ent)):
            raise FloatingPointError(
                f"non-finite loss at step {step}: nll={nll}, entropy={ent}"
            )
        if config.entropy_constraint:
            _, _, w_ent = loss_weights(state, kl=state.xi_kl, entropy=ent)
        else:
            w_ent = 0.0
        grad_p = -g_p
        grad_d = -g_d
        if w_ent != 0.0:
            ge_p, ge_d = lowrank.entropy_grad(dist, cache)
            grad_p = grad_p + w_ent * ge_p
            grad_d = grad_d + w_ent * ge_d
        grads = {"mu": -g_mu, "cov_factor": grad_p}
        if not config.epsilon_mode:
            grads["log_diag"] = grad_d * dist.cov_diag
        opt.step(params, grads)
        model.sync_diag()
        if config.entropy_constraint:
            state = update_multipliers(state, kl=state.xi_kl, entropy=ent)
    return model
