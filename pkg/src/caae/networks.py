"""The four CAAE blocks as pure functions over explicit parameter dictionaries.

Images are channels-last (B x H x W x C) at the API boundary and converted to
NCHW internally.  Every convolution is 5x5 with stride 2.

    E    : image -> stride-2 convs (ReLU) -> linear -> tanh -> z in (-1, 1)^n
    G    : [z, l] -> linear (ReLU) -> stride-2 transposed convs (ReLU) -> tanh
    Dz   : z -> 64 -> 32 -> 1 logit (ReLU between)
    Dimg : image -> conv -> concat tiled label -> convs (BN + ReLU) -> linear logit
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .data import NUM_BINS

KERNEL = 5
PAD = 2
DZ_WIDTHS = (64, 32)
BN_MOMENTUM = 0.1
BN_EPS = 1e-5
GROUPS = ("enc", "gen", "dz", "dimg")


@dataclass(frozen=True)
class NetworkConfig:
    image_size: int = 64
    channels: int = 3
    latent_dim: int = 64
    base_filters: int = 32
    num_scales: int = 4
    use_batchnorm_dimg: bool = True

    def validate(self) -> list[str]:
        """Return every violated constraint (empty when valid)."""
        errors = []
        if self.channels not in (1, 3):
            errors.append(f"channels must be 1 or 3, got {self.channels}")
        if self.latent_dim < 2:
            errors.append(f"latent_dim must be >= 2, got {self.latent_dim}")
        if self.base_filters < 8:
            errors.append(f"base_filters must be >= 8, got {self.base_filters}")
        if self.num_scales < 1:
            errors.append(f"num_scales must be >= 1, got {self.num_scales}")
        else:
            step = 2 ** self.num_scales
            if self.image_size % step or self.image_size // step < 4:
                errors.append(
                    f"image_size must equal 2**num_scales * s with integer s >= 4 "
                    f"(image_size={self.image_size}, num_scales={self.num_scales})")
        return errors

    def check(self) -> "NetworkConfig":
        errors = self.validate()
        if errors:
            raise ValueError("invalid NetworkConfig: " + "; ".join(errors))
        return self

    @property
    def bottleneck(self) -> int:
        return self.image_size // 2 ** self.num_scales

    def filters(self, k: int) -> int:
        return self.base_filters * 2 ** k

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(**d)


@dataclass
class ModelParams:
    """Parameter groups for E, G, Dz and Dimg plus Dimg batch-norm running stats."""

    config: NetworkConfig
    enc: dict[str, torch.Tensor]
    gen: dict[str, torch.Tensor]
    dz: dict[str, torch.Tensor]
    dimg: dict[str, torch.Tensor]
    buffers: dict[str, torch.Tensor] = field(default_factory=dict)
    updates: int = 0  # optimizer steps applied; 0 means fresh initialization

    def group(self, name: str) -> dict[str, torch.Tensor]:
        if name not in GROUPS:
            raise KeyError(name)
        return getattr(self, name)

    def named_arrays(self):
        for g in GROUPS:
            for k, v in self.group(g).items():
                yield f"{g}/{k}", v
        for k, v in self.buffers.items():
            yield f"buffers/{k}", v

    def replace(self, **changes) -> "ModelParams":
        kw = {g: changes.get(g, getattr(self, g)) for g in GROUPS}
        return ModelParams(self.config, **kw, buffers=changes.get("buffers", self.buffers),
                           updates=changes.get("updates", self.updates))

    def clone(self) -> "ModelParams":
        c = lambda d: {k: v.detach().clone() for k, v in d.items()}
        return ModelParams(self.config, *(c(self.group(g)) for g in GROUPS),
                           buffers=c(self.buffers), updates=self.updates)

    def to(self, dtype) -> "ModelParams":
        def conv(d, buffers=False):
            return {k: (v if buffers and not v.is_floating_point() else v.to(dtype)) for k, v in d.items()}
        return ModelParams(self.config, *(conv(self.group(g)) for g in GROUPS),
                           buffers=conv(self.buffers, True), updates=self.updates)

    @property
    def dtype(self):
        return self.enc["fc.w"].dtype


# --- initialization --------------------------------------------------------

def _weight(shape, fan_in, gen, dtype):
    std = math.sqrt(2.0 / fan_in)
    w = torch.empty(shape, dtype=torch.float64)
    torch.nn.init.trunc_normal_(w, 0.0, std, -2 * std, 2 * std, generator=gen)
    return w.to(dtype)


def init_params(config: NetworkConfig, seed: int, dtype=torch.float32) -> ModelParams:
    """He-scaled truncated-normal weights (cut at two std), zero biases; deterministic in seed."""
    config.check()
    gen = torch.Generator().manual_seed(int(seed))
    c, n, s, k2 = config.channels, config.latent_dim, config.bottleneck, KERNEL * KERNEL
    zeros = lambda m: torch.zeros(m, dtype=dtype)

    enc = {}
    cin = c
    for i in range(config.num_scales):
        cout = config.filters(i)
        enc[f"conv{i}.w"] = _weight((cout, cin, KERNEL, KERNEL), cin * k2, gen, dtype)
        enc[f"conv{i}.b"] = zeros(cout)
        cin = cout
    flat = cin * s * s
    enc["fc.w"] = _weight((n, flat), flat, gen, dtype)
    enc["fc.b"] = zeros(n)

    gen_p = {}
    top = config.filters(config.num_scales - 1)
    gen_p["fc.w"] = _weight((top * s * s, n + NUM_BINS), n + NUM_BINS, gen, dtype)
    gen_p["fc.b"] = zeros(top * s * s)
    cin = top
    for i in range(config.num_scales):
        last = i == config.num_scales - 1
        cout = c if last else config.filters(config.num_scales - 2 - i)
        # transposed conv weight is (in, out, k, k); each output sees ~in*k*k/4 taps at stride 2
        gen_p[f"deconv{i}.w"] = _weight((cin, cout, KERNEL, KERNEL), max(1, cin * k2 // 4), gen, dtype)
        gen_p[f"deconv{i}.b"] = zeros(cout)
        cin = cout

    dz = {}
    widths = (n,) + DZ_WIDTHS + (1,)
    for i in range(len(widths) - 1):
        dz[f"fc{i}.w"] = _weight((widths[i + 1], widths[i]), widths[i], gen, dtype)
        dz[f"fc{i}.b"] = zeros(widths[i + 1])

    dimg, buffers = {}, {}
    f0 = config.filters(0)
    dimg["conv0.w"] = _weight((f0, c, KERNEL, KERNEL), c * k2, gen, dtype)
    dimg["conv0.b"] = zeros(f0)
    cin = f0 + NUM_BINS
    for i in range(1, config.num_scales):
        cout = config.filters(i)
        dimg[f"conv{i}.w"] = _weight((cout, cin, KERNEL, KERNEL), cin * k2, gen, dtype)
        dimg[f"conv{i}.b"] = zeros(cout)
        if config.use_batchnorm_dimg:
            dimg[f"bn{i}.g"] = torch.ones(cout, dtype=dtype)
            dimg[f"bn{i}.b"] = zeros(cout)
            buffers[f"bn{i}.mean"] = zeros(cout)
            buffers[f"bn{i}.var"] = torch.ones(cout, dtype=dtype)
        cin = cout
    flat = cin * s * s
    dimg["fc.w"] = _weight((1, flat), flat, gen, dtype)
    dimg["fc.b"] = zeros(1)
    return ModelParams(config, enc, gen_p, dz, dimg, buffers)


# --- forward passes ------------------------------------------------------------

def _as_tensor(x, dtype):
    if isinstance(x, torch.Tensor):
        return x.to(dtype) if x.dtype != dtype else x
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def _check_images(params: ModelParams, x) -> torch.Tensor:
    cfg = params.config
    x = _as_tensor(x, params.dtype)
    want = (cfg.image_size, cfg.image_size, cfg.channels)
    if x.ndim != 4 or tuple(x.shape[1:]) != want:
        raise ValueError(f"expected images of shape (B, {want[0]}, {want[1]}, {want[2]}), got {tuple(x.shape)}")
    return x


def _check_rows(x, width: int, what: str, dtype) -> torch.Tensor:
    x = _as_tensor(x, dtype)
    if x.ndim != 2 or x.shape[1] != width:
        raise ValueError(f"expected {what} of shape (B, {width}), got {tuple(x.shape)}")
    return x


def encode(params: ModelParams, x) -> torch.Tensor:
    """Map a batch of images to latent codes in (-1, 1)^n."""
    x = _check_images(params, x)
    p, cfg = params.enc, params.config
    h = x.permute(0, 3, 1, 2)
    for i in range(cfg.num_scales):
        h = F.relu(F.conv2d(h, p[f"conv{i}.w"], p[f"conv{i}.b"], stride=2, padding=PAD))
    return torch.tanh(F.linear(h.flatten(1), p["fc.w"], p["fc.b"]))


def generate(params: ModelParams, z, l) -> torch.Tensor:
    """Decode latent codes conditioned on age labels to images in (-1, 1)."""
    cfg = params.config
    z = _check_rows(z, cfg.latent_dim, "latent codes", params.dtype)
    l = _check_rows(l, NUM_BINS, "age labels", params.dtype)
    if z.shape[0] != l.shape[0]:
        raise ValueError(f"batch size mismatch between z ({z.shape[0]}) and labels ({l.shape[0]})")
    p, s = params.gen, cfg.bottleneck
    h = F.relu(F.linear(torch.cat([z, l], dim=1), p["fc.w"], p["fc.b"]))
    h = h.view(z.shape[0], -1, s, s)
    for i in range(cfg.num_scales):
        h = F.conv_transpose2d(h, p[f"deconv{i}.w"], p[f"deconv{i}.b"],
                               stride=2, padding=PAD, output_padding=1)
        h = torch.tanh(h) if i == cfg.num_scales - 1 else F.relu(h)
    return h.permute(0, 2, 3, 1)


def dz_logits(params: ModelParams, z) -> torch.Tensor:
    z = _check_rows(z, params.config.latent_dim, "latent codes", params.dtype)
    p = params.dz
    h = z
    n_layers = len(DZ_WIDTHS) + 1
    for i in range(n_layers):
        h = F.linear(h, p[f"fc{i}.w"], p[f"fc{i}.b"])
        if i < n_layers - 1:
            h = F.relu(h)
    return h[:, 0]


def discriminate_z(params: ModelParams, z) -> tuple[torch.Tensor, torch.Tensor]:
    """Return (probabilities, logits) that each code came from the prior."""
    logits = dz_logits(params, z)
    return torch.sigmoid(logits), logits


def dimg_first_stage(params: ModelParams, x, l) -> torch.Tensor:
    """First conv (ReLU) with the label tiled in as ten constant channels."""
    x = _check_images(params, x)
    l = _check_rows(l, NUM_BINS, "age labels", params.dtype)
    if x.shape[0] != l.shape[0]:
        raise ValueError(f"batch size mismatch between images ({x.shape[0]}) and labels ({l.shape[0]})")
    p = params.dimg
    h = F.relu(F.conv2d(x.permute(0, 3, 1, 2), p["conv0.w"], p["conv0.b"], stride=2, padding=PAD))
    tiles = l[:, :, None, None].expand(-1, -1, h.shape[2], h.shape[3])
    return torch.cat([h, tiles], dim=1)


def dimg_logits(params: ModelParams, x, l, training: bool = False) -> torch.Tensor:
    """Dimg logits.  In training mode batch statistics are used and the running
    statistics in ``params.buffers`` are updated in place."""
    cfg, p = params.config, params.dimg
    h = dimg_first_stage(params, x, l)
    for i in range(1, cfg.num_scales):
        h = F.conv2d(h, p[f"conv{i}.w"], p[f"conv{i}.b"], stride=2, padding=PAD)
        if cfg.use_batchnorm_dimg:
            h = F.batch_norm(h, params.buffers[f"bn{i}.mean"], params.buffers[f"bn{i}.var"],
                             p[f"bn{i}.g"], p[f"bn{i}.b"], training=training,
                             momentum=BN_MOMENTUM, eps=BN_EPS)
        h = F.relu(h)
    return F.linear(h.flatten(1), p["fc.w"], p["fc.b"])[:, 0]


def discriminate_img(params: ModelParams, x, l, training: bool = False) -> tuple[torch.Tensor, torch.Tensor]:
    """Return (probabilities, logits) that each (image, label) pair is real."""
    logits = dimg_logits(params, x, l, training=training)
    return torch.sigmoid(logits), logits


def count_parameters(params: ModelParams) -> dict[str, int]:
    return {g: sum(v.numel() for v in params.group(g).values()) for g in GROUPS}
