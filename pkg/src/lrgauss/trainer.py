"""Training orchestration: epochs, freeze schedule, checkpoints, metrics.

Runs both model kinds through the same constrained loop.  Checkpoints
capture parameters, optimizer moments, multiplier state and the RNG
state, so save / load / resume reproduces the remaining trajectory
bit for bit.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import lowrank, models
from .constrained import AdamOptimizer, LagrangianState, LossBreakdown, lagrangian_value, loss_weights
from .data import ImageBatch
from .models import DistOnlyModel, VaeModel, build_vae, elbo_backward
from .nets import DenseLayer

__all__ = [
    "TrainConfig",
    "Checkpoint",
    "train",
    "evaluate",
    "save_checkpoint",
    "load_checkpoint",
    "default_entropy_target",
]

_MAGIC = b"LRCK"
_VERSION = 1


def default_entropy_target(obs_dim: int, per_pixel_var: float = 1e-3) -> float:
    """Entropy of an isotropic Gaussian at the given per-pixel variance.

    The desk-scale entropy budget: image-size-scaled rather than a fixed
    constant, since the budget is extensive in the number of pixels.
    """
    return 0.5 * obs_dim * (1.0 + np.log(2.0 * np.pi)) + 0.5 * obs_dim * np.log(
        per_pixel_var
    )


@dataclass
class TrainConfig:
    """Desk-scale defaults: 16 x 16 grayscale, latent 16, rank 8.

    For large face datasets (64 x 64 and up) useful reference settings
    are latent_dim 128, rank 25, xi_kl around 45 (colour) or 15 (brain
    MRI), with xi_h around -504750 / -198906 respectively, or -17630 at
    64 x 64 grayscale; those are documented here, not defaults.
    """

    width: int = 16
    height: int = 16
    channels: int = 1
    kind: str = "vae"  # "vae" or "dist_only"
    latent_dim: int = 16
    rank: int = 8
    hidden: tuple[int, ...] = (256, 128)
    epochs: int = 50
    batch_size: int = 64
    seed: int = 0
    freeze_fraction: float = 0.1
    epsilon_mode: bool = True
    epsilon: float = 1e-5
    lr: float = 1e-3
    multiplier_lr: float = 1e-2
    damping: float = 1.0
    xi_kl: float = 8.0
    xi_h: float | None = None  # None: isotropic target at per-pixel variance 1e-3
    entropy_constraint: bool = True
    init_diag_var: float = 1e-2
    checkpoint_interval: int = 0  # epochs between periodic saves; 0 = final only

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.kind not in ("vae", "dist_only"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if not 0.0 <= self.freeze_fraction <= 1.0:
            raise ValueError("freeze_fraction must lie in [0, 1]")

    @property
    def obs_dim(self) -> int:
        return self.width * self.height * self.channels

    @property
    def unfreeze_epoch(self) -> int:
        """First epoch index at which the variance heads train."""
        return int(round(self.freeze_fraction * self.epochs))

    def resolved_xi_h(self) -> float:
        if self.xi_h is not None:
            return self.xi_h
        return default_entropy_target(self.obs_dim)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["hidden"] = tuple(d.get("hidden", (256, 128)))
        return cls(**d)

    def content_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


@dataclass
class Checkpoint:
    """Everything needed to resume or serve a run."""

    config: TrainConfig
    model: VaeModel | DistOnlyModel
    optimizer_state: dict
    lagrangian: LagrangianState
    epoch: int
    step: int
    rng_state: dict


def _init_model(config: TrainConfig, dataset: ImageBatch, rng: np.random.Generator):
    if config.kind == "vae":
        return build_vae(
            rng,
            obs_dim=config.obs_dim,
            latent_dim=config.latent_dim,
            rank=config.rank,
            hidden=config.hidden,
            epsilon_mode=config.epsilon_mode,
            epsilon=config.epsilon,
            data_mean=dataset.pixels.mean(axis=0),
            init_diag_var=config.init_diag_var,
        )
    mu = dataset.pixels.mean(axis=0)
    if config.epsilon_mode:
        d = np.full(config.obs_dim, config.epsilon)
    else:
        d = np.clip(np.var(dataset.pixels, axis=0), 1e-6, None)
    p = rng.normal(scale=1e-2, size=(config.obs_dim, config.rank))
    return DistOnlyModel(
        dist=lowrank.LowRankGaussian(mu=mu, cov_factor=p, cov_diag=d),
        epsilon_mode=config.epsilon_mode,
    )


def _dist_only_batch_update(model, batch, state, config, opt, params):
    """One constrained likelihood step on the free distribution."""
    dist = model.dist
    cache = lowrank.build_cache(dist)
    lp, g_mu, g_p, g_d = lowrank.mean_log_prob_and_grad(dist, batch, cache)
    ent = lowrank.entropy(dist, cache)
    nll = -lp
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
    return nll, 0.0, ent


def train(
    config: TrainConfig,
    dataset: ImageBatch,
    checkpoint_path: str | None = None,
    resume_from: Checkpoint | None = None,
    epoch_callback=None,
) -> tuple[Checkpoint, list[tuple[int, LossBreakdown, LagrangianState]]]:
    """Run the training schedule; returns the final checkpoint and history.

    The history holds one (global step, LossBreakdown, multiplier state)
    row per epoch, averaged over the epoch's minibatches.  Deterministic
    given the seed; resuming from a checkpoint continues the exact
    trajectory.  A non-finite loss aborts with :class:`FloatingPointError`
    and leaves the most recent periodic checkpoint on disk.
    ``epoch_callback(epoch, model)``, when given, runs after each epoch's
    updates (monitoring hook; must not mutate the model).
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    if dataset.pixels.shape[1] != config.obs_dim:
        raise ValueError(
            f"dataset width {dataset.pixels.shape[1]} does not match "
            f"configured geometry {config.width}x{config.height}x{config.channels}"
        )

    if resume_from is not None:
        model = resume_from.model
        opt = AdamOptimizer.from_state_dict(resume_from.optimizer_state)
        state = resume_from.lagrangian
        rng = np.random.default_rng()
        rng.bit_generator.state = resume_from.rng_state
        start_epoch = resume_from.epoch
        step = resume_from.step
    else:
        rng = np.random.default_rng(config.seed)
        model = _init_model(config, dataset, rng)
        opt = AdamOptimizer(lr=config.lr)
        state = LagrangianState(
            xi_kl=config.xi_kl,
            xi_h=config.resolved_xi_h(),
            damping=config.damping,
            multiplier_lr=config.multiplier_lr,
        )
        start_epoch = 0
        step = 0

    params = model.params()
    n = len(dataset)
    history: list[tuple[int, LossBreakdown, LagrangianState]] = []
    checkpoint = Checkpoint(
        config=config,
        model=model,
        optimizer_state=opt.state_dict(),
        lagrangian=state,
        epoch=start_epoch,
        step=step,
        rng_state=rng.bit_generator.state,
    )

    for epoch in range(start_epoch, config.epochs):
        if isinstance(model, VaeModel):
            unfrozen = epoch >= config.unfreeze_epoch
            model.factor_trainable = unfrozen
            model.diag_trainable = unfrozen
        perm = rng.permutation(n)
        totals = np.zeros(4)
        batches = 0
        for lo in range(0, n, config.batch_size):
            idx = perm[lo : lo + config.batch_size]
            batch = dataset.pixels[idx]
            try:
                if isinstance(model, VaeModel):
                    eps = rng.standard_normal((len(idx), config.latent_dim))
                    if config.entropy_constraint:
                        weight_fn = lambda nll, kl, ent: loss_weights(state, kl, ent)
                    else:
                        weight_fn = lambda nll, kl, ent: (
                            *loss_weights(state, kl, ent)[:2],
                            0.0,
                        )
                    (nll, kl, ent), grads = elbo_backward(model, batch, eps, weight_fn)
                    opt.step(params, grads)
                else:
                    nll, kl, ent = _dist_only_batch_update(
                        model, batch, state, config, opt, params
                    )
            except (ValueError, np.linalg.LinAlgError) as exc:
                # Geometry was validated up front, so a failure here means
                # the optimisation state can no longer produce a valid
                # distribution (exploded or collapsed parameters).
                raise FloatingPointError(
                    f"training diverged at epoch {epoch}, step {step}: {exc}"
                ) from exc
            if not (np.isfinite(nll) and np.isfinite(kl) and np.isfinite(ent)):
                raise FloatingPointError(
                    f"non-finite loss at epoch {epoch}, step {step}: "
                    f"nll={nll}, kl={kl}, entropy={ent}"
                )
            if not all(np.all(np.isfinite(a)) for a in params.values()):
                raise FloatingPointError(
                    f"non-finite parameters after update at epoch {epoch}, "
                    f"step {step} (training diverged)"
                )
            # With the entropy constraint disabled, log the objective that
            # is actually optimised (zero entropy violation).
            log_state = state if config.entropy_constraint else replace(state, xi_h=ent)
            breakdown = lagrangian_value(nll, kl, ent, log_state)
            state = replace(
                state,
                beta=max(0.0, state.beta + state.multiplier_lr * (kl - state.xi_kl)),
                lambda_h=(
                    max(
                        0.0,
                        state.lambda_h
                        + state.multiplier_lr * (ent - state.xi_h),
                    )
                    if config.entropy_constraint
                    else state.lambda_h
                ),
            )
            totals += (breakdown.nll, breakdown.kl, breakdown.entropy, breakdown.lagrangian)
            batches += 1
            step += 1
        mean_row = LossBreakdown(*(totals / batches))
        history.append((step, mean_row, state))
        if epoch_callback is not None:
            epoch_callback(epoch, model)
        checkpoint = Checkpoint(
            config=config,
            model=model,
            optimizer_state=opt.state_dict(),
            lagrangian=state,
            epoch=epoch + 1,
            step=step,
            rng_state=rng.bit_generator.state,
        )
        if (
            checkpoint_path
            and config.checkpoint_interval > 0
            and (epoch + 1) % config.checkpoint_interval == 0
        ):
            save_checkpoint(checkpoint, checkpoint_path)

    if checkpoint_path:
        save_checkpoint(checkpoint, checkpoint_path)
    return checkpoint, history


def evaluate(checkpoint: Checkpoint, dataset: ImageBatch) -> dict:
    """Dataset-mean metrics of a checkpointed model.

    Per-pixel marginal variance is the diagonal of the decoded covariance
    (``d + rowwise ||P||^2``) averaged over pixels (and over the dataset's
    decoded distributions for the VAE).
    """
    config = checkpoint.config
    if dataset.pixels.shape[1] != config.obs_dim:
        raise ValueError(
            f"dataset width {dataset.pixels.shape[1]} does not match the "
            f"checkpointed geometry (S={config.obs_dim})"
        )
    model = checkpoint.model
    if isinstance(model, DistOnlyModel):
        cache = lowrank.build_cache(model.dist)
        lps = lowrank.log_prob_batch(model.dist, dataset.pixels, cache)
        return {
            "log_likelihood": float(np.mean(lps)),
            "kl": 0.0,
            "entropy": lowrank.entropy(model.dist, cache),
            "per_pixel_variance": float(np.mean(lowrank.marginal_variance(model.dist))),
        }

    rng = np.random.default_rng(config.seed)
    n = len(dataset)
    lp_sum = 0.0
    kl_sum = 0.0
    ent_sum = 0.0
    var_sum = 0.0
    for lo in range(0, n, config.batch_size):
        batch = dataset.pixels[lo : lo + config.batch_size]
        eps = rng.standard_normal((batch.shape[0], config.latent_dim))
        q = models.encode(model, batch)
        z = models.reparameterize(q, eps)
        kl_sum += float(np.sum(models.kl_to_standard_normal(q)))
        mu, factor, d, _, _, _ = models._decode_forward(model, z)
        for i in range(batch.shape[0]):
            dist = lowrank.LowRankGaussian(mu=mu[i], cov_factor=factor[i], cov_diag=d[i])
            cache = lowrank.build_cache(dist)
            lp_sum += lowrank.log_prob(dist, batch[i], cache)
            ent_sum += lowrank.entropy(dist, cache)
            var_sum += float(np.mean(lowrank.marginal_variance(dist)))
    return {
        "log_likelihood": lp_sum / n,
        "kl": kl_sum / n,
        "entropy": ent_sum / n,
        "per_pixel_variance": var_sum / n,
    }


# ---------------------------------------------------------------------------
# Checkpoint file format: magic, version, JSON header, length-prefixed blocks.
# The distribution-only model embeds the low-rank Gaussian wire format.
# ---------------------------------------------------------------------------


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def _lagrangian_to_dict(state: LagrangianState) -> dict:
    return {
        "beta": state.beta,
        "lambda_h": state.lambda_h,
        "xi_kl": state.xi_kl,
        "xi_h": state.xi_h,
        "damping": state.damping,
        "multiplier_lr": state.multiplier_lr,
    }


def save_checkpoint(checkpoint: Checkpoint, path: str) -> None:
    """Write the checkpoint; the same bytes come back from an identical run."""
    model = checkpoint.model
    blocks: list[tuple[str, bytes]] = []
    shapes: dict[str, list[int]] = {}
    if isinstance(model, DistOnlyModel):
        kind = "dist_only"
        blocks.append(("dist", lowrank.to_bytes(model.dist)))
        if not model.epsilon_mode:
            # log_diag is the master parameter; recomputing log(exp(x))
            # on load would not be bitwise faithful.
            blocks.append(
                ("log_diag", np.ascontiguousarray(model.log_diag, dtype="<f8").tobytes())
            )
            shapes["log_diag"] = list(model.log_diag.shape)
        flags = {"epsilon_mode": model.epsilon_mode}
    else:
        kind = "vae"
        for name, arr in sorted(model.params().items()):
            blocks.append((name, np.ascontiguousarray(arr, dtype="<f8").tobytes()))
            shapes[name] = list(arr.shape)
        flags = {
            "factor_trainable": model.factor_trainable,
            "diag_trainable": model.diag_trainable,
        }

    opt_state = checkpoint.optimizer_state
    opt_meta = {
        "lr": opt_state["lr"],
        "beta1": opt_state["beta1"],
        "beta2": opt_state["beta2"],
        "eps": opt_state["eps"],
        "t": opt_state["t"],
    }
    for kind_key in ("m", "v"):
        for name, arr in sorted(opt_state[kind_key].items()):
            block_name = f"opt.{kind_key}.{name}"
            blocks.append((block_name, np.ascontiguousarray(arr, dtype="<f8").tobytes()))
            shapes[block_name] = list(arr.shape)

    header = {
        "kind": kind,
        "config": checkpoint.config.to_dict(),
        "config_hash": checkpoint.config.content_hash(),
        "epoch": checkpoint.epoch,
        "step": checkpoint.step,
        "rng_state": checkpoint.rng_state,
        "lagrangian": _lagrangian_to_dict(checkpoint.lagrangian),
        "optimizer": opt_meta,
        "flags": flags,
        "shapes": shapes,
        "blocks": [name for name, _ in blocks],
    }
    header_bytes = _canonical_json(header)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(header_bytes)))
        fh.write(header_bytes)
        for name, payload in blocks:
            name_bytes = name.encode()
            fh.write(struct.pack("<I", len(name_bytes)))
            fh.write(name_bytes)
            fh.write(struct.pack("<Q", len(payload)))
            fh.write(payload)


def _rebuild_vae(config: TrainConfig, arrays: dict[str, np.ndarray], flags: dict) -> VaeModel:
    def layer(prefix: str) -> DenseLayer:
        return DenseLayer(
            weight=arrays[f"{prefix}.weight"], bias=arrays[f"{prefix}.bias"]
        )

    n_hidden = len(config.hidden)
    model = VaeModel(
        obs_dim=config.obs_dim,
        latent_dim=config.latent_dim,
        rank=config.rank,
        enc_trunk=[layer(f"enc_trunk.{i}") for i in range(n_hidden)],
        enc_mean=layer("enc_mean"),
        enc_logvar=layer("enc_logvar"),
        dec_trunk=[layer(f"dec_trunk.{i}") for i in range(n_hidden)],
        mean_head=layer("mean_head"),
        factor_head=layer("factor_head"),
        diag_head=None if config.epsilon_mode else layer("diag_head"),
        epsilon=config.epsilon,
        factor_trainable=flags.get("factor_trainable", True),
        diag_trainable=flags.get("diag_trainable", True),
    )
    return model


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != _MAGIC:
        raise ValueError(f"{path} is not a checkpoint file (bad magic)")
    try:
        return _parse_checkpoint(raw)
    except (struct.error, KeyError, IndexError, TypeError, UnicodeDecodeError,
            json.JSONDecodeError) as exc:
        raise ValueError(f"corrupt checkpoint {path}: {exc!r}") from exc


def _parse_checkpoint(raw: bytes) -> Checkpoint:
    version, header_len = struct.unpack_from("<II", raw, 4)
    if version != _VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off = 12
    header = json.loads(raw[off : off + header_len])
    off += header_len

    payloads: dict[str, bytes] = {}
    while off < len(raw):
        (name_len,) = struct.unpack_from("<I", raw, off)
        off += 4
        name = raw[off : off + name_len].decode()
        off += name_len
        (data_len,) = struct.unpack_from("<Q", raw, off)
        off += 8
        payloads[name] = raw[off : off + data_len]
        off += data_len

    config = TrainConfig.from_dict(header["config"])
    shapes = header["shapes"]
    arrays = {
        name: np.frombuffer(buf, dtype="<f8").reshape(shapes[name]).copy()
        for name, buf in payloads.items()
        if name in shapes
    }

    if header["kind"] == "dist_only":
        model = DistOnlyModel(
            dist=lowrank.from_bytes(payloads["dist"]),
            epsilon_mode=header["flags"]["epsilon_mode"],
            log_diag=arrays.get("log_diag"),
        )
    else:
        model = _rebuild_vae(config, arrays, header["flags"])

    opt_meta = header["optimizer"]
    opt_state = {
        "lr": opt_meta["lr"],
        "beta1": opt_meta["beta1"],
        "beta2": opt_meta["beta2"],
        "eps": opt_meta["eps"],
        "t": {k: int(v) for k, v in opt_meta["t"].items()},
        "m": {
            name[len("opt.m.") :]: arr
            for name, arr in arrays.items()
            if name.startswith("opt.m.")
        },
        "v": {
            name[len("opt.v.") :]: arr
            for name, arr in arrays.items()
            if name.startswith("opt.v.")
        },
    }
    lag = header["lagrangian"]
    return Checkpoint(
        config=config,
        model=model,
        optimizer_state=opt_state,
        lagrangian=LagrangianState(**lag),
        epoch=int(header["epoch"]),
        step=int(header["step"]),
        rng_state=header["rng_state"],
    )
