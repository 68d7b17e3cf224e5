"""Command-line entry point: ``caae {synth,train,sweep,interp,grid,eval,gradcheck}``.

Training reads a flat JSON run config.  Precedence, lowest to highest:
built-in defaults, the config file, the CAAE_SEED environment variable,
explicit command-line flags.  Exit status is 0 on success, 1 on a
contract or validation failure, 2 on an I/O failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import data, evaluation, inference
from .data import FaceDataset, ManifestError
from .networks import NetworkConfig, init_params
from .objectives import LossWeights
from .trainer import (CheckpointError, NonFiniteLossError, TrainConfig, load_checkpoint,
                      read_log, train)

EXIT_OK, EXIT_CONTRACT, EXIT_IO = 0, 1, 2
SEED_ENV = "CAAE_SEED"

NETWORK_KEYS = ("image_size", "channels", "latent_dim", "base_filters", "num_scales", "use_batchnorm_dimg")
TRAIN_KEYS = ("batch_size", "learning_rate", "beta1", "beta2", "adam_eps", "epochs", "seed",
              "ablate_dz", "ablate_dimg", "saturating", "checkpoint_every", "dtype")
SOURCE_KEYS = ("manifest", "synthetic_count", "synthetic_seed")
RUN_KEYS = NETWORK_KEYS + TRAIN_KEYS + ("lambda", "gamma") + SOURCE_KEYS + ("out_dir",)

log = logging.getLogger("caae")


class UsageError(ValueError):
    pass


@dataclass
class RunConfig:
    train: TrainConfig
    manifest: Path | None
    synthetic_count: int | None
    synthetic_seed: int
    out_dir: Path

    @classmethod
    def from_flat(cls, flat: dict, base_dir: Path = Path(".")) -> "RunConfig":
        """Build from a flat mapping, collecting every problem before raising."""
        errors = [f"unknown key {k!r}" for k in flat if k not in RUN_KEYS]
        net_kw = {k: flat[k] for k in NETWORK_KEYS if k in flat}
        train_kw = {k: flat[k] for k in TRAIN_KEYS if k in flat}
        try:
            network = NetworkConfig(**net_kw)
        except TypeError as exc:
            errors.append(str(exc))
            network = NetworkConfig()
        try:
            weights = LossWeights(flat.get("lambda", 100.0), flat.get("gamma", 10.0))
        except (ValueError, TypeError) as exc:
            errors.append(str(exc))
            weights = LossWeights()
        cfg = TrainConfig(network=network, weights=weights, **train_kw)
        try:
            errors.extend(cfg.validate())
        except TypeError as exc:
            errors.append(f"bad value type: {exc}")
        has_manifest = flat.get("manifest") is not None
        has_synth = flat.get("synthetic_count") is not None
        if has_manifest == has_synth:
            errors.append("exactly one dataset source is required: 'manifest' or 'synthetic_count'")
        if has_synth and not (isinstance(flat["synthetic_count"], int) and flat["synthetic_count"] > 0):
            errors.append(f"synthetic_count must be a positive integer, got {flat['synthetic_count']!r}")
        if not flat.get("out_dir"):
            errors.append("out_dir is required")
        if errors:
            raise UsageError("invalid run config:\n  " + "\n  ".join(errors))
        manifest = Path(flat["manifest"]) if has_manifest else None
        return cls(cfg, manifest, flat.get("synthetic_count"), int(flat.get("synthetic_seed", 0)),
                   Path(flat["out_dir"]))

    def dataset(self) -> FaceDataset:
        net = self.train.network
        if self.manifest is not None:
            records = [r for r in data.load_manifest(self.manifest) if r.split == "train"]
            return FaceDataset.from_records(records, net.image_size, net.channels)
        return FaceDataset.synthetic(self.synthetic_count, net.image_size, self.synthetic_seed, net.channels)


# --- subcommands ----------------------------------------------------------------

def cmd_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    samples = data.synth_faces(args.count, args.size, args.seed, channels=args.channels)
    img_dir = out / "images"
    img_dir.mkdir(exist_ok=True)
    records = []
    width = len(str(args.count - 1))
    for k, (img, age) in enumerate(samples):
        p = img_dir / f"face_{k:0{width}d}.png"
        data.save_image(img, p)
        records.append(data.DatasetRecord(p, age, "train"))
    data.write_manifest(records, out / "manifest.jsonl")
    print(f"wrote {len(records)} images and {out / 'manifest.jsonl'}")
    return EXIT_OK


def _load_flat_config(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        flat = json.load(fh)
    if not isinstance(flat, dict):
        raise UsageError(f"{path}: config must be a JSON object")
    return flat


def cmd_train(args) -> int:
    flat = _load_flat_config(args.config) if args.config else {}
    if os.environ.get(SEED_ENV):
        try:
            flat["seed"] = int(os.environ[SEED_ENV])
        except ValueError:
            raise UsageError(f"{SEED_ENV} must be an integer, got {os.environ[SEED_ENV]!r}") from None
    for key in ("epochs", "seed", "out_dir", "manifest", "synthetic_count"):
        v = getattr(args, key, None)
        if v is not None:
            flat[key] = v
    if args.no_dz:
        flat["ablate_dz"] = True
    if args.no_dimg:
        flat["ablate_dimg"] = True
    run = RunConfig.from_flat(flat)
    state = train(run.dataset(), run.train, run.out_dir, resume=args.resume, overwrite=args.overwrite)
    rows = read_log(run.out_dir / "log.csv")
    last = rows[-1] if rows else {}
    print(f"finished at step {state.step}; run directory {run.out_dir}")
    for k in ("recon", "tv", "e_adv", "g_adv", "dz_loss", "dimg_loss", "eg_total"):
        if k in last:
            print(f"  {k:10s} {last[k]:.6f}")
    return EXIT_OK


def _params(ckpt):
    return load_checkpoint(ckpt)[0].params


def _image(params, path):
    cfg = params.config
    return data.load_image(path, cfg.image_size, cfg.channels)


def _commit_dir(tmp: Path, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    for p in sorted(tmp.iterdir()):
        shutil.move(str(p), out / p.name)


def cmd_sweep(args) -> int:
    params = _params(args.ckpt)
    res = inference.age_sweep(params, _image(params, args.image))
    out = Path(args.out)
    with tempfile.TemporaryDirectory() as tmp:
        inference.save_frames(res.outputs, tmp, prefix="age")
        inference.save_uint8(inference.tile_grid([res.outputs]), Path(tmp) / "strip.png")
        _commit_dir(Path(tmp), out)
    print(f"wrote {len(res.outputs)} frames and strip.png to {out}")
    return EXIT_OK


def cmd_interp(args) -> int:
    params = _params(args.ckpt)
    seq = inference.interpolate(params, _image(params, args.img1), _image(params, args.img2),
                                data.bin_to_label(args.label), args.steps)
    out = Path(args.out)
    with tempfile.TemporaryDirectory() as tmp:
        inference.save_frames(seq.frames, tmp, prefix="morph")
        inference.save_uint8(inference.tile_grid([seq.frames]), Path(tmp) / "strip.png")
        _commit_dir(Path(tmp), out)
    print(f"wrote {len(seq.frames)} frames to {out} (smoothness {seq.smoothness():.6f})")
    return EXIT_OK


def cmd_grid(args) -> int:
    params = _params(args.ckpt)
    grid = inference.manifold_grid(params, [_image(params, p) for p in args.images])
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    inference.save_uint8(grid, out)
    print(f"wrote {grid.shape[0]}x{grid.shape[1]} grid to {out}")
    return EXIT_OK


def _probes(spec: str, params) -> FaceDataset:
    cfg = params.config
    if spec.startswith("synth:"):
        try:
            _, count, seed = spec.split(":")
            return FaceDataset.synthetic(int(count), cfg.image_size, int(seed), cfg.channels)
        except ValueError:
            raise UsageError(f"--probes synth spec must be synth:COUNT:SEED, got {spec!r}") from None
    records = data.load_manifest(spec)
    return FaceDataset.from_records(records, cfg.image_size, cfg.channels)


def cmd_eval(args) -> int:
    params = _params(args.ckpt)
    probes = _probes(args.probes, params)
    out = Path(args.out)
    if args.compare:
        with tempfile.TemporaryDirectory() as tmp:
            report = evaluation.ablation_compare(args.ckpt, args.compare, probes, out_dir=tmp)
            _commit_dir(Path(tmp), out)
        print(evaluation.format_comparison(report), end="")
        return EXIT_OK
    metrics = evaluation.run_metrics(params, probes)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps({"checkpoint": str(args.ckpt), "metrics": metrics}, indent=2))
    table = "\n".join(f"{k:28s} {v:.6f}" for k, v in metrics.items()) + "\n"
    (out / "report.txt").write_text(table)
    print(table, end="")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    size = args.size
    num_scales = max(1, (size // 4).bit_length() - 1)
    cfg = NetworkConfig(image_size=size, channels=args.channels, latent_dim=args.latent,
                        base_filters=args.base_filters, num_scales=num_scales)
    cfg.check()
    reports = evaluation.gradcheck_caae(init_params(cfg, args.seed), epsilon=args.epsilon,
                                        seed=args.seed, full=args.full)
    worst = 0.0
    for name, rep in reports.items():
        errs = "  ".join(f"{g}={e:.2e}" for g, e in rep.group_errors.items())
        print(f"{name:10s} max={rep.max_error:.2e}  {errs}  worst={rep.worst_parameter}")
        worst = max(worst, rep.max_error)
    ok = worst < evaluation.GRADCHECK_TOL
    print(f"{'PASS' if ok else 'FAIL'}: max relative error {worst:.2e} (threshold {evaluation.GRADCHECK_TOL:g})")
    return EXIT_OK if ok else EXIT_CONTRACT


# --- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="caae", description="Conditional adversarial autoencoder for face aging.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render a synthetic face dataset with a manifest")
    p.add_argument("--count", type=int, required=True, help="number of faces")
    p.add_argument("--size", type=int, default=64, help="image side in pixels (multiple of 16)")
    p.add_argument("--seed", type=int, default=0, help="random seed")
    p.add_argument("--channels", type=int, choices=(1, 3), default=3, help="1 for grayscale, 3 for RGB")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model from a JSON run config")
    p.add_argument("--config", help="flat JSON run config")
    p.add_argument("--no-dz", action="store_true", help="ablate the latent discriminator")
    p.add_argument("--no-dimg", action="store_true", help="ablate the image discriminator")
    p.add_argument("--resume", metavar="CKPT", help="continue from this checkpoint")
    p.add_argument("--overwrite", action="store_true", help="reuse a non-empty run directory")
    p.add_argument("--out-dir", dest="out_dir", help="run directory (overrides config)")
    p.add_argument("--manifest", help="training manifest (overrides config)")
    p.add_argument("--synthetic-count", dest="synthetic_count", type=int,
                   help="train on this many synthetic faces (overrides config)")
    p.add_argument("--epochs", type=int, help="number of epochs (overrides config)")
    p.add_argument("--seed", type=int, help=f"random seed (overrides config and {SEED_ENV})")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="render one face at all ten age bins")
    p.add_argument("--ckpt", required=True, help="checkpoint file")
    p.add_argument("--image", required=True, help="input face image (no age needed)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("interp", help="morph between two faces at a fixed age")
    p.add_argument("--ckpt", required=True, help="checkpoint file")
    p.add_argument("--img1", required=True, help="first face image")
    p.add_argument("--img2", required=True, help="second face image")
    p.add_argument("--label", type=int, required=True, help="age bin index 0-9")
    p.add_argument("--steps", type=int, default=8, help="number of frames (>= 2)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_interp)

    p = sub.add_parser("grid", help="age-by-face manifold grid")
    p.add_argument("--ckpt", required=True, help="checkpoint file")
    p.add_argument("--images", nargs="+", required=True, help="input face images, one row each")
    p.add_argument("--out", required=True, help="output PNG path")
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("eval", help="evaluation metrics, optionally against a second checkpoint")
    p.add_argument("--ckpt", required=True, help="checkpoint file")
    p.add_argument("--compare", metavar="CKPT2", help="second checkpoint file")
    p.add_argument("--probes", required=True, help="probe manifest, or synth:COUNT:SEED")
    p.add_argument("--out", required=True, help="output directory for reports")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every loss gradient")
    p.add_argument("--size", type=int, default=8, help="image side of the miniature model")
    p.add_argument("--latent", type=int, default=4, help="latent dimension")
    p.add_argument("--base-filters", dest="base_filters", type=int, default=8, help="filters in the first stage")
    p.add_argument("--channels", type=int, choices=(1, 3), default=3, help="image channels")
    p.add_argument("--epsilon", type=float, default=1e-6, help="base finite-difference step")
    p.add_argument("--seed", type=int, default=0, help="seed for parameters and inputs")
    p.add_argument("--full", action="store_true", help="check every parameter instead of a sample")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ManifestError, CheckpointError, NonFiniteLossError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
