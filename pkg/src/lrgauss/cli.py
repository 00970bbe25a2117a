"""Command-line interface: train, sample, interpolate, scale, edit, evaluate, serve.

Exit codes: 0 success, 1 runtime error, 2 usage / configuration error.
Every command is deterministic under ``--seed``.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from . import lowrank
from .constrained import LOG_COLUMNS, log_row
from .data import ImageBatch, blob_dataset, load_directory
from .models import DistOnlyModel, decode
from .render import tile_grid, write_png
from .trainer import Checkpoint, TrainConfig, evaluate, load_checkpoint, train

__all__ = ["main"]


class UsageError(Exception):
    """Bad flags, config or input files; maps to exit code 2."""


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------


def _load_toml(path: str) -> dict:
    if not os.path.isfile(path):
        raise UsageError(f"config file not found: {path}")
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def _dataset_from_config(data_cfg: dict, geometry: tuple[int, int, int]):
    """Build the training dataset plus its provenance manifest entry."""
    w, h, c = geometry
    if "dir" in data_cfg:
        path = data_cfg["dir"]
        if not os.path.isdir(path):
            raise UsageError(f"data directory not found: {path}")
        grayscale = bool(data_cfg.get("grayscale", c == 1))
        batch, files = load_directory(path, (w, h), grayscale=grayscale)
        manifest = {
            "source": "directory",
            "path": os.path.abspath(path),
            "files": files,
            "grayscale": grayscale,
        }
    elif data_cfg.get("synthetic") == "blobs":
        if c != 1:
            raise UsageError("synthetic blob data is grayscale (channels = 1)")
        count = int(data_cfg.get("count", 512))
        noise = float(data_cfg.get("noise", 0.1))
        seed = int(data_cfg.get("seed", 0))
        batch = blob_dataset(width=w, height=h, n=count, seed=seed, noise=noise)
        manifest = {"source": "blobs", "count": count, "noise": noise, "seed": seed}
    else:
        raise UsageError(
            "config [data] must give either dir = \"...\" or synthetic = \"blobs\""
        )
    manifest["shape"] = [w, h, c]
    manifest["normalization"] = "value / 255 into [0, 1]"
    return batch, manifest


def _train_setup(args) -> tuple[TrainConfig, ImageBatch, dict, str]:
    raw = _load_toml(args.config)
    model_cfg = raw.get("model", {})
    train_cfg = raw.get("train", {})
    data_cfg = dict(raw.get("data", {}))
    if args.data_dir is not None:
        data_cfg = {"dir": args.data_dir, **{k: v for k, v in data_cfg.items() if k != "synthetic"}}

    fields = {f.name for f in dataclasses.fields(TrainConfig)}
    merged = {}
    # the data section only contributes geometry; its seed/count belong
    # to the generator, not the training run
    merged.update({k: v for k, v in data_cfg.items() if k in ("width", "height", "channels")})
    for section in (model_cfg, train_cfg):
        merged.update({k: v for k, v in section.items() if k in fields})
    if args.seed is not None:
        merged["seed"] = args.seed
    if args.epochs is not None:
        merged["epochs"] = args.epochs
    try:
        config = TrainConfig(**merged)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid training config: {exc}") from exc

    out_dir = args.out or train_cfg.get("out")
    if not out_dir:
        raise UsageError("no output directory (set --out or [train] out)")
    dataset, manifest = _dataset_from_config(data_cfg, (config.width, config.height, config.channels))
    return config, dataset, manifest, out_dir


def _open_checkpoint(path: str) -> Checkpoint:
    if not os.path.isfile(path):
        raise UsageError(f"checkpoint not found: {path}")
    try:
        return load_checkpoint(path)
    except ValueError as exc:
        raise UsageError(f"cannot read checkpoint {path}: {exc}") from exc


def _geometry(ckpt: Checkpoint) -> tuple[int, int, int]:
    cfg = ckpt.config
    return (cfg.width, cfg.height, cfg.channels)


def _draw_dist(ckpt: Checkpoint, rng: np.random.Generator) -> lowrank.LowRankGaussian:
    """Decode one latent draw (VAE) or return the free distribution."""
    model = ckpt.model
    if isinstance(model, DistOnlyModel):
        return model.dist
    z = rng.standard_normal(ckpt.config.latent_dim)
    return decode(model, z)


def _draw_noise(rng: np.random.Generator, dist) -> lowrank.ObservationNoise:
    return lowrank.ObservationNoise(
        omega_p=rng.standard_normal(dist.rank),
        omega_d=rng.standard_normal(dist.dim),
    )


def _ensure_out_dir(path: str) -> None:
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    config, dataset, manifest, out_dir = _train_setup(args)
    _ensure_out_dir(out_dir)
    ckpt_path = os.path.join(out_dir, "checkpoint.lrck")
    _, history = train(config, dataset, checkpoint_path=ckpt_path)
    with open(os.path.join(out_dir, "train_log.csv"), "w", newline="") as fh:
        fh.write(",".join(LOG_COLUMNS) + "\n")
        for step, breakdown, state in history:
            fh.write(log_row(step, breakdown, state) + "\n")
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    last = history[-1][1]
    print(
        f"trained {config.kind} for {config.epochs} epochs: "
        f"nll={last.nll:.4f} kl={last.kl:.4f} entropy={last.entropy:.4f}"
    )
    print(f"checkpoint: {ckpt_path}")
    return 0


def cmd_sample(args) -> int:
    ckpt = _open_checkpoint(args.checkpoint)
    if args.count < 0:
        raise UsageError("--count must be nonnegative")
    _ensure_out_dir(args.out_dir)
    shape = _geometry(ckpt)
    rng = np.random.default_rng(args.seed)
    for i in range(args.count):
        dist = _draw_dist(ckpt, rng)
        noise = _draw_noise(rng, dist)
        img = lowrank.sample(dist, noise)
        write_png(os.path.join(args.out_dir, f"mean_{i:03d}.png"), dist.mu, shape)
        write_png(os.path.join(args.out_dir, f"sample_{i:03d}.png"), img, shape)
    print(f"wrote {2 * args.count} images to {args.out_dir}")
    return 0


def _normalized_corner_noise(rng: np.random.Generator, rank: int) -> list[np.ndarray]:
    """Four factor-space draws rescaled to common norm sqrt(rank).

    Slerp preserves the norm only for equal-norm endpoints; a shared
    sphere keeps every path in the grid on it.
    """
    corners = []
    for _ in range(4):
        v = rng.standard_normal(rank)
        corners.append(v / np.linalg.norm(v) * np.sqrt(rank))
    return corners


def cmd_interpolate(args) -> int:
    ckpt = _open_checkpoint(args.checkpoint)
    if args.steps < 2:
        raise UsageError("--steps must be at least 2")
    shape = _geometry(ckpt)
    rng = np.random.default_rng(args.seed)
    dist = _draw_dist(ckpt, rng)
    if dist.rank < 2:
        raise UsageError("interpolation needs rank >= 2 (factor-space sphere)")
    a, b, c, d = _normalized_corner_noise(rng, dist.rank)
    omega_d = rng.standard_normal(dist.dim)

    ts = np.linspace(0.0, 1.0, args.steps)
    tiles = []
    norm_dev = 0.0
    target = np.sqrt(dist.rank)
    for ti in ts:
        row = []
        for tj in ts:
            top = lowrank.slerp(a, b, tj)
            bottom = lowrank.slerp(c, d, tj)
            omega_p = top if ti == 0.0 else (bottom if ti == 1.0 else lowrank.slerp(top, bottom, ti))
            norm_dev = max(norm_dev, abs(np.linalg.norm(omega_p) - target))
            row.append(
                lowrank.sample(dist, lowrank.ObservationNoise(omega_p=omega_p, omega_d=omega_d))
            )
        tiles.append(row)
    grid = tile_grid(tiles, shape)
    grid_shape = (shape[0] * args.steps, shape[1] * args.steps, shape[2])
    out_parent = os.path.dirname(os.path.abspath(args.out))
    _ensure_out_dir(out_parent)
    write_png(args.out, grid, grid_shape)
    print(f"slerp norm check: max |deviation| from sqrt(R) = {norm_dev:.3e}")
    print(f"wrote {args.steps}x{args.steps} grid to {args.out}")
    return 0


def _parse_component_range(spec: str, rank: int) -> list[int]:
    """``"2"`` or ``"0:4"`` (half-open), validated against the rank."""
    try:
        if ":" in spec:
            lo_s, hi_s = spec.split(":", 1)
            lo, hi = int(lo_s), int(hi_s)
        else:
            lo = int(spec)
            hi = lo + 1
    except ValueError as exc:
        raise UsageError(f"bad component range {spec!r}") from exc
    if lo < 0 or hi > rank or lo >= hi:
        raise UsageError(f"component range {spec!r} outside [0, {rank})")
    return list(range(lo, hi))


def cmd_scale(args) -> int:
    ckpt = _open_checkpoint(args.checkpoint)
    shape = _geometry(ckpt)
    rng = np.random.default_rng(args.seed)
    dist = _draw_dist(ckpt, rng)
    components = _parse_component_range(
        args.components if args.components else f"0:{min(dist.rank, 10)}", dist.rank
    )
    if args.scale_step <= 0 or args.scale_max < args.scale_min:
        raise UsageError("bad scale sweep (need scale_step > 0 and max >= min)")
    noise = _draw_noise(rng, dist)
    sweep = np.arange(
        args.scale_min, args.scale_max + 0.5 * args.scale_step, args.scale_step
    )
    _ensure_out_dir(args.out_dir)
    for comp in components:
        row = []
        for s in sweep:
            coeff = np.ones(dist.rank)
            coeff[comp] = s
            row.append(lowrank.sample(lowrank.scale_components(dist, coeff), noise))
        strip = tile_grid([row], shape)
        strip_shape = (shape[0] * len(sweep), shape[1], shape[2])
        write_png(os.path.join(args.out_dir, f"component_{comp:02d}.png"), strip, strip_shape)
    print(
        f"wrote {len(components)} component strips "
        f"({sweep[0]:g}..{sweep[-1]:g} step {args.scale_step:g}) to {args.out_dir}"
    )
    return 0


def parse_edits(path: str, shape: tuple[int, int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Read ``x,y,c,value`` lines into flat indices and values.

    Coordinates are 0-based; the flat index of (x, y, c) is
    ``(y * W + x) * C + c`` (row-major over height, width, channels).
    """
    w, h, c = shape
    indices: list[int] = []
    values: list[float] = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if row[0].lstrip().startswith("#"):
                continue
            if len(row) != 4:
                raise UsageError(f"{path}:{lineno}: expected x,y,c,value")
            try:
                x, y, ch = int(row[0]), int(row[1]), int(row[2])
                value = float(row[3])
            except ValueError as exc:
                raise UsageError(f"{path}:{lineno}: {exc}") from exc
            if not (0 <= x < w and 0 <= y < h and 0 <= ch < c):
                raise UsageError(
                    f"{path}:{lineno}: coordinates ({x},{y},{ch}) outside "
                    f"{w}x{h}x{c}"
                )
            if not 0.0 <= value <= 1.0:
                raise UsageError(f"{path}:{lineno}: value {value} outside [0, 1]")
            indices.append((y * w + x) * c + ch)
            values.append(value)
    return np.asarray(indices, dtype=np.intp), np.asarray(values, dtype=np.float64)


def cmd_edit(args) -> int:
    ckpt = _open_checkpoint(args.checkpoint)
    shape = _geometry(ckpt)
    if not os.path.isfile(args.edits):
        raise UsageError(f"edits file not found: {args.edits}")
    indices, values = parse_edits(args.edits, shape)
    if len(np.unique(indices)) != len(indices):
        raise UsageError("edits target the same pixel twice")
    rng = np.random.default_rng(args.seed)
    dist = _draw_dist(ckpt, rng)
    noise = _draw_noise(rng, dist)
    before = lowrank.sample(dist, noise)
    after = lowrank.apply_edits(dist, before, indices, values)
    _ensure_out_dir(args.out_dir)
    write_png(os.path.join(args.out_dir, "before.png"), before, shape)
    write_png(os.path.join(args.out_dir, "after.png"), after, shape)
    print(f"applied {len(indices)} edits; wrote before/after to {args.out_dir}")
    return 0


def cmd_evaluate(args) -> int:
    ckpt = _open_checkpoint(args.checkpoint)
    cfg = ckpt.config
    if args.data_dir is not None:
        if not os.path.isdir(args.data_dir):
            raise UsageError(f"data directory not found: {args.data_dir}")
        dataset, _ = load_directory(
            args.data_dir, (cfg.width, cfg.height), grayscale=cfg.channels == 1
        )
    elif args.config is not None:
        raw = _load_toml(args.config)
        dataset, _ = _dataset_from_config(
            dict(raw.get("data", {})), (cfg.width, cfg.height, cfg.channels)
        )
    else:
        raise UsageError("evaluate needs --data-dir or --config")
    metrics = evaluate(ckpt, dataset)
    print(json.dumps(metrics, indent=2, sort_keys=True))
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    ckpt = _open_checkpoint(args.checkpoint)
    app = create_app(ckpt, ui_dir=args.ui_dir)
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lrgauss",
        description="Low-rank Gaussian observation models: train, sample, edit.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a TOML config")
    p.add_argument("--config", required=True, help="TOML config file")
    p.add_argument("--seed", type=int, default=None, help="override [train] seed")
    p.add_argument("--epochs", type=int, default=None, help="override [train] epochs")
    p.add_argument("--out", default=None, help="override [train] out directory")
    p.add_argument("--data-dir", default=None, help="override [data] dir")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="draw means and samples as PNGs")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("interpolate", help="spherical interpolation grid")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--steps", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output grid PNG")
    p.set_defaults(func=cmd_interpolate)

    p = sub.add_parser("scale", help="principal-component scaling strips")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--components", default=None, help="index or lo:hi range (default first 10)")
    p.add_argument("--scale-min", type=float, default=-5.0)
    p.add_argument("--scale-max", type=float, default=5.0)
    p.add_argument("--scale-step", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_scale)

    p = sub.add_parser("edit", help="apply pixel edits via the conditional mean")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--edits", required=True, help="CSV lines x,y,c,value (0-based)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_edit)

    p = sub.add_parser("evaluate", help="dataset metrics for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data-dir", default=None)
    p.add_argument("--config", default=None, help="TOML config with a [data] section")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("serve", help="run the HTTP editing service")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8321)
    p.add_argument("--ui-dir", default=None, help="static directory with the browser UI")
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
