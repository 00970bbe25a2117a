"""Shared fixtures: small trained checkpoints reused across CLI/service tests."""

import numpy as np
import pytest

from lrgauss.constrained import AdamOptimizer, LagrangianState
from lrgauss.data import blob_dataset
from lrgauss.lowrank import LowRankGaussian
from lrgauss.models import DistOnlyModel
from lrgauss.trainer import Checkpoint, TrainConfig, save_checkpoint, train


@pytest.fixture(scope="session")
def vae_checkpoint(tmp_path_factory):
    """A quick 8x8 VAE checkpoint (latent 4, rank 4)."""
    path = tmp_path_factory.mktemp("ckpt") / "vae.lrck"
    cfg = TrainConfig(
        width=8,
        height=8,
        channels=1,
        latent_dim=4,
        rank=4,
        hidden=(32, 16),
        epochs=8,
        batch_size=32,
        seed=0,
        freeze_fraction=0.25,
        epsilon_mode=True,
        lr=1e-3,
        xi_kl=4.0,
    )
    ds = blob_dataset(8, 8, 64, seed=1, noise=0.05)
    train(cfg, ds, checkpoint_path=str(path))
    return str(path)


@pytest.fixture(scope="session")
def flat_dist_checkpoint(tmp_path_factory):
    """Hand-built dist-only checkpoint with zero factor and tiny diagonal.

    epsilon = 1e-6 keeps 3 sigma of the display noise under one intensity
    level (3 * sqrt(eps) * 255 < 1).
    """
    path = tmp_path_factory.mktemp("ckpt") / "flat.lrck"
    eps = 1e-6
    rng = np.random.default_rng(5)
    mu = rng.uniform(0.2, 0.8, size=64)
    dist = LowRankGaussian(mu=mu, cov_factor=np.zeros((64, 2)), cov_diag=np.full(64, eps))
    cfg = TrainConfig(
        width=8,
        height=8,
        channels=1,
        kind="dist_only",
        rank=2,
        epochs=1,
        batch_size=8,
        epsilon_mode=True,
        epsilon=eps,
    )
    ckpt = Checkpoint(
        config=cfg,
        model=DistOnlyModel(dist=dist, epsilon_mode=True),
        optimizer_state=AdamOptimizer().state_dict(),
        lagrangian=LagrangianState(),
        epoch=1,
        step=1,
        rng_state=np.random.default_rng(0).bit_generator.state,
    )
    save_checkpoint(ckpt, str(path))
    return str(path)


@pytest.fixture(scope="session")
def rank1_dist_checkpoint(tmp_path_factory):
    """Dist-only checkpoint with a single correlated component."""
    path = tmp_path_factory.mktemp("ckpt") / "rank1.lrck"
    rng = np.random.default_rng(6)
    mu = rng.uniform(0.3, 0.7, size=64)
    p = rng.normal(scale=0.08, size=(64, 1))
    dist = LowRankGaussian(mu=mu, cov_factor=p, cov_diag=np.full(64, 1e-4))
    cfg = TrainConfig(
        width=8,
        height=8,
        channels=1,
        kind="dist_only",
        rank=1,
        epochs=1,
        batch_size=8,
        epsilon_mode=True,
        epsilon=1e-4,
    )
    ckpt = Checkpoint(
        config=cfg,
        model=DistOnlyModel(dist=dist, epsilon_mode=True),
        optimizer_state=AdamOptimizer().state_dict(),
        lagrangian=LagrangianState(),
        epoch=1,
        step=1,
        rng_state=np.random.default_rng(0).bit_generator.state,
    )
    save_checkpoint(ckpt, str(path))
    return str(path)
