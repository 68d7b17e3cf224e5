"""Alternating CAAE optimization, ADAM, checkpoints and the run-directory loop.

Each train step performs three ADAM updates in a fixed order:

1. Dimg on real (x, l) vs. generated (G(E(x), l), l) pairs,
2. Dz on prior samples vs. encoded codes E(x),
3. E and G jointly on the weighted reconstruction + TV + adversarial objective.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import os
import struct
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch

from . import data as data_mod
from .data import Batch, FaceDataset
from .networks import (GROUPS, ModelParams, NetworkConfig, dimg_logits, dz_logits,
                       encode, generate, init_params)
from .objectives import (LOSS_FIELDS, LossReport, LossWeights, adversarial_d_loss,
                         eg_total_loss)

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
MAGIC = b"CAAECKPT"
LOG_COLUMNS = ("step", "epoch") + LOSS_FIELDS + ("wall_time",)
_DTYPES = {"float32": torch.float32, "float64": torch.float64}


class NonFiniteLossError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    batch_size: int = 100
    learning_rate: float = 0.0002
    beta1: float = 0.5
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 50
    seed: int = 0
    ablate_dz: bool = False
    ablate_dimg: bool = False
    saturating: bool = False
    checkpoint_every: int = 1000
    dtype: str = "float32"

    def validate(self) -> list[str]:
        errors = list(self.network.validate())
        if not (self.learning_rate > 0 and math.isfinite(self.learning_rate)):
            errors.append(f"learning_rate must be > 0, got {self.learning_rate}")
        for name in ("beta1", "beta2"):
            b = getattr(self, name)
            if not 0 <= b < 1:
                errors.append(f"{name} must lie in [0, 1), got {b}")
        if self.batch_size < 1:
            errors.append(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            errors.append(f"epochs must be >= 1, got {self.epochs}")
        if self.checkpoint_every < 1:
            errors.append(f"checkpoint_every must be >= 1, got {self.checkpoint_every}")
        if self.dtype not in _DTYPES:
            errors.append(f"dtype must be one of {sorted(_DTYPES)}, got {self.dtype!r}")
        return errors

    def check(self) -> "TrainConfig":
        errors = self.validate()
        if errors:
            raise ValueError("invalid TrainConfig: " + "; ".join(errors))
        return self

    @property
    def torch_dtype(self):
        return _DTYPES[self.dtype]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["network"] = self.network.to_dict()
        d["weights"] = asdict(self.weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown TrainConfig fields: {sorted(unknown)}")
        if "network" in d:
            d["network"] = NetworkConfig.from_dict(d["network"])
        if "weights" in d:
            d["weights"] = LossWeights(**d["weights"])
        return cls(**d)


@dataclass(frozen=True)
class PriorSpec:
    dim: int
    low: float = -1.0
    high: float = 1.0
    distribution: str = "uniform"

    def __post_init__(self):
        if self.distribution != "uniform":
            raise ValueError(f"only the uniform prior is supported, got {self.distribution!r}")
        if not self.low < self.high:
            raise ValueError("prior needs low < high")


@dataclass
class TrainState:
    params: ModelParams
    adam_m: dict[str, dict[str, torch.Tensor]]
    adam_v: dict[str, dict[str, torch.Tensor]]
    step: int
    rng: torch.Generator

    def rng_state(self) -> torch.Tensor:
        return self.rng.get_state()


def _derived_seed(seed: int, stream: int) -> int:
    return int(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, stream]).generate_state(1, np.uint64)[0] >> 1)


def init_state(config: TrainConfig) -> TrainState:
    config.check()
    params = init_params(config.network, config.seed, dtype=config.torch_dtype)
    zeros = {g: {k: torch.zeros_like(v) for k, v in params.group(g).items()} for g in GROUPS}
    zeros2 = {g: {k: torch.zeros_like(v) for k, v in params.group(g).items()} for g in GROUPS}
    rng = torch.Generator().manual_seed(_derived_seed(config.seed, 1))
    return TrainState(params, zeros, zeros2, 0, rng)


def sample_prior(spec: PriorSpec, batch: int, rng: torch.Generator, dtype=torch.float32) -> torch.Tensor:
    """i.i.d. uniform codes on [low, high]; advances ``rng``."""
    if batch < 1:
        raise ValueError(f"batch must be >= 1, got {batch}")
    u = torch.rand((batch, spec.dim), generator=rng, dtype=dtype)
    return spec.low + (spec.high - spec.low) * u


def adam_update(params, grads, m, v, t, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected ADAM step on dicts of tensors; returns new (params, m, v)."""
    new_p, new_m, new_v = {}, {}, {}
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for k, p in params.items():
        g = grads[k]
        mk = beta1 * m[k] + (1.0 - beta1) * g
        vk = beta2 * v[k] + (1.0 - beta2) * g * g
        new_p[k] = p - lr * (mk / c1) / (torch.sqrt(vk / c2) + eps)
        new_m[k], new_v[k] = mk, vk
    return new_p, new_m, new_v


def _grads(loss, leaves: dict[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    gs = torch.autograd.grad(loss, list(leaves.values()), allow_unused=True)
    return {k: (torch.zeros_like(v) if g is None else g) for (k, v), g in zip(leaves.items(), gs)}


def _leaves(group: dict[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    return {k: v.detach().clone().requires_grad_(True) for k, v in group.items()}


def _finite(name: str, value: torch.Tensor, step: int):
    if not torch.isfinite(value).all():
        raise NonFiniteLossError(f"non-finite {name} ({float(value.detach())}) at step {step}")


def train_step(state: TrainState, batch: Batch, config: TrainConfig) -> tuple[TrainState, LossReport]:
    """Dimg update, Dz update, then the joint E/G update; ``state`` is left untouched."""
    dtype = config.torch_dtype
    cfg = config.network
    x = torch.as_tensor(np.asarray(batch.images), dtype=dtype)
    l = torch.as_tensor(np.asarray(batch.labels), dtype=dtype)
    t = state.step + 1
    opt = dict(lr=config.learning_rate, beta1=config.beta1, beta2=config.beta2, eps=config.adam_eps)

    rng = torch.Generator()
    rng.set_state(state.rng.get_state())
    buffers = {k: v.clone() for k, v in state.params.buffers.items()}
    params = state.params.replace(buffers=buffers)
    adam_m, adam_v = dict(state.adam_m), dict(state.adam_v)
    report = LossReport()

    with torch.no_grad():
        z_fixed = encode(params, x)
        x_fixed = generate(params, z_fixed, l)

    if not config.ablate_dimg:
        leaves = _leaves(params.dimg)
        view = params.replace(dimg=leaves)
        loss = adversarial_d_loss(dimg_logits(view, x, l, training=True),
                                  dimg_logits(view, x_fixed, l, training=True))
        _finite("dimg_loss", loss, t)
        report.dimg_loss = float(loss.detach())
        new, adam_m["dimg"], adam_v["dimg"] = adam_update(
            params.dimg, _grads(loss, leaves), adam_m["dimg"], adam_v["dimg"], t, **opt)
        params = params.replace(dimg=new)

    if not config.ablate_dz:
        prior = sample_prior(PriorSpec(cfg.latent_dim), x.shape[0], rng, dtype)
        leaves = _leaves(params.dz)
        view = params.replace(dz=leaves)
        loss = adversarial_d_loss(dz_logits(view, prior), dz_logits(view, z_fixed))
        _finite("dz_loss", loss, t)
        report.dz_loss = float(loss.detach())
        new, adam_m["dz"], adam_v["dz"] = adam_update(
            params.dz, _grads(loss, leaves), adam_m["dz"], adam_v["dz"], t, **opt)
        params = params.replace(dz=new)

    enc_leaves, gen_leaves = _leaves(params.enc), _leaves(params.gen)
    view = params.replace(enc=enc_leaves, gen=gen_leaves)
    z = encode(view, x)
    x_hat = generate(view, z, l)
    dz_fake = None if config.ablate_dz else dz_logits(view, z)
    dimg_fake = None if config.ablate_dimg else dimg_logits(view, x_hat, l, training=True)
    total, eg_report = eg_total_loss(x, x_hat, dz_fake, dimg_fake, config.weights,
                                     saturating=config.saturating)
    for name in ("recon", "tv", "e_adv", "g_adv", "eg_total"):
        setattr(report, name, getattr(eg_report, name))
    bad = report.nonfinite()
    if bad:
        raise NonFiniteLossError(f"non-finite loss term(s) {bad} at step {t}: {report.as_dict()}")
    grads = _grads(total, {**{f"enc/{k}": v for k, v in enc_leaves.items()},
                           **{f"gen/{k}": v for k, v in gen_leaves.items()}})
    for g in ("enc", "gen"):
        gg = {k: grads[f"{g}/{k}"] for k in params.group(g)}
        new, adam_m[g], adam_v[g] = adam_update(params.group(g), gg, adam_m[g], adam_v[g], t, **opt)
        params = params.replace(**{g: new})

    params = params.replace(updates=state.params.updates + 1)
    return TrainState(params, adam_m, adam_v, t, rng), report


# --- checkpoints ------------------------------------------------------------

def _arrays(state: TrainState) -> dict[str, np.ndarray]:
    out = {}
    for name, v in state.params.named_arrays():
        out[f"params/{name}"] = v.detach().cpu().numpy()
    for tag, moments in (("adam_m", state.adam_m), ("adam_v", state.adam_v)):
        for g in GROUPS:
            for k, v in moments[g].items():
                out[f"{tag}/{g}/{k}"] = v.detach().cpu().numpy()
    out["rng_state"] = state.rng.get_state().numpy()
    return out


def save_checkpoint(state: TrainState, config: TrainConfig, path) -> Path:
    """Atomically write a self-describing, checksummed checkpoint."""
    path = Path(path)
    buf = io.BytesIO()
    np.savez(buf, **_arrays(state))
    payload = buf.getvalue()
    header = {
        "format_version": FORMAT_VERSION,
        "step": state.step,
        "updates": state.params.updates,
        "config": config.to_dict(),
        "payload_size": len(payload),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC + struct.pack("<Q", len(head)) + head + payload)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)
    return path


def _read_checkpoint(path):
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    blob = path.read_bytes()
    if len(blob) < len(MAGIC) + 8 or not blob.startswith(MAGIC):
        raise CorruptCheckpointError(f"{path}: not a CAAE checkpoint or truncated header")
    (n,) = struct.unpack("<Q", blob[len(MAGIC):len(MAGIC) + 8])
    start = len(MAGIC) + 8
    try:
        header = json.loads(blob[start:start + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError(f"{path}: unreadable header ({exc})") from None
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format_version {header.get('format_version')} is not supported "
            f"(expected {FORMAT_VERSION})")
    payload = blob[start + n:]
    if len(payload) != header["payload_size"] or hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CorruptCheckpointError(f"{path}: checksum mismatch (file truncated or corrupted)")
    return header, payload


def read_checkpoint_config(path) -> TrainConfig:
    header, _ = _read_checkpoint(path)
    return TrainConfig.from_dict(header["config"])


def load_checkpoint(path, expected: TrainConfig | NetworkConfig | None = None) -> tuple[TrainState, TrainConfig]:
    """Restore a TrainState bit-exactly.

    If ``expected`` is given its network fields must match the stored ones;
    the error names the first differing field.
    """
    header, payload = _read_checkpoint(path)
    config = TrainConfig.from_dict(header["config"])
    if expected is not None:
        want = expected.network if isinstance(expected, TrainConfig) else expected
        for f in fields(NetworkConfig):
            a, b = getattr(config.network, f.name), getattr(want, f.name)
            if a != b:
                raise CheckpointError(f"{path}: network field {f.name} is {a} in checkpoint but {b} expected")
    arrays = np.load(io.BytesIO(payload))
    template = init_params(config.network, 0, dtype=config.torch_dtype)

    def restore(prefix, src_group):
        out = {}
        for k, ref in src_group.items():
            key = f"{prefix}/{k}"
            if key not in arrays.files:
                raise CheckpointError(f"{path}: missing array {key}")
            arr = arrays[key]
            if tuple(arr.shape) != tuple(ref.shape):
                raise CheckpointError(f"{path}: array {key} has shape {arr.shape}, expected {tuple(ref.shape)}")
            out[k] = torch.from_numpy(arr.copy())
        return out

    groups = {g: restore(f"params/{g}", template.group(g)) for g in GROUPS}
    buffers = restore("params/buffers", template.buffers)
    params = ModelParams(config.network, **groups, buffers=buffers, updates=header.get("updates", 0))
    m = {g: restore(f"adam_m/{g}", template.group(g)) for g in GROUPS}
    v = {g: restore(f"adam_v/{g}", template.group(g)) for g in GROUPS}
    rng = torch.Generator()
    rng.set_state(torch.from_numpy(arrays["rng_state"].copy()))
    return TrainState(params, m, v, int(header["step"]), rng), config


def load_params(path) -> ModelParams:
    state, _ = load_checkpoint(path)
    return state.params


# --- run loop ----------------------------------------------------------------

def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


def read_log(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        out.append({k: (int(v) if k in ("step", "epoch") else float(v)) for k, v in r.items()})
    return out


def checkpoint_path(run_dir, step: int) -> Path:
    return Path(run_dir) / "checkpoints" / f"step_{step:07d}.ckpt"


def final_checkpoint(run_dir) -> Path:
    return Path(run_dir) / "checkpoints" / "final.ckpt"


def train(dataset: FaceDataset, config: TrainConfig, run_dir, *, resume=None,
          overwrite: bool = False, max_steps: int | None = None) -> TrainState:
    """Train for ``config.epochs`` epochs writing config.json, log.csv and checkpoints/.

    ``resume`` is a checkpoint path; training continues from its step with the
    stored RNG stream, so the continuation matches an uninterrupted run.
    ``max_steps`` stops early (after writing a checkpoint), mainly for tests.
    """
    config.check()
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if dataset.images.shape[1:] != (config.network.image_size, config.network.image_size,
                                    config.network.channels):
        raise ValueError(f"dataset images {dataset.images.shape[1:]} do not match the network config")
    spe = data_mod.steps_per_epoch(len(dataset), config.batch_size)
    if spe == 0:
        raise ValueError(f"dataset of {len(dataset)} records is smaller than one batch ({config.batch_size})")

    run_dir = Path(run_dir)
    log_path = run_dir / "log.csv"
    if resume is not None:
        state, ck_config = load_checkpoint(resume, config)
        if ck_config.to_dict() != config.to_dict():
            log.warning("resuming with a config that differs from the checkpoint's")
        run_dir.mkdir(parents=True, exist_ok=True)
        rows = read_log(log_path) if log_path.exists() else []
        rows = [r for r in rows if r["step"] <= state.step]
        with open(log_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(LOG_COLUMNS)
            for r in rows:
                w.writerow([_fmt(r[c]) for c in LOG_COLUMNS])
    else:
        if run_dir.exists() and any(run_dir.iterdir()) and not overwrite:
            raise FileExistsError(f"run directory {run_dir} is not empty; pass overwrite=True to reuse it")
        if run_dir.exists() and overwrite:
            for p in sorted(run_dir.rglob("*"), reverse=True):
                p.unlink() if p.is_file() else p.rmdir()
        run_dir.mkdir(parents=True, exist_ok=True)
        state = init_state(config)
        with open(log_path, "w", newline="") as fh:
            csv.writer(fh).writerow(LOG_COLUMNS)
    (run_dir / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True))
    (run_dir / "checkpoints").mkdir(exist_ok=True)

    total = config.epochs * spe
    stop = total if max_steps is None else min(total, max_steps)
    batches, batches_epoch = None, -1
    t0 = time.time()
    with open(log_path, "a", newline="") as fh:
        writer = csv.writer(fh)
        while state.step < stop:
            epoch = state.step // spe
            if epoch != batches_epoch:
                batches = data_mod.make_batches(dataset, config.batch_size, config.seed, epoch)
                batches_epoch = epoch
            state, report = train_step(state, batches[state.step % spe], config)
            row = {"step": state.step, "epoch": epoch, **report.as_dict(), "wall_time": time.time() - t0}
            writer.writerow([_fmt(row[c]) for c in LOG_COLUMNS])
            fh.flush()
            if state.step % config.checkpoint_every == 0:
                save_checkpoint(state, config, checkpoint_path(run_dir, state.step))
            if state.step % spe == 0 or state.step == stop:
                log.info("step %d/%d epoch %d eg_total %.4f recon %.4f dz %.4f dimg %.4f",
                         state.step, total, epoch, report.eg_total, report.recon,
                         report.dz_loss, report.dimg_loss)
    save_checkpoint(state, config, checkpoint_path(run_dir, state.step))
    if state.step == total:
        save_checkpoint(state, config, final_checkpoint(run_dir))
    return state
