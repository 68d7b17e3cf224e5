"""Loss terms of the CAAE objective.

All adversarial terms work on logits: log(sigmoid(t)) = -softplus(-t) and
log(1 - sigmoid(t)) = -softplus(t), which stay finite for any finite t.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F

LOSS_FIELDS = ("recon", "tv", "e_adv", "g_adv", "dz_loss", "dimg_loss", "eg_total")


@dataclass(frozen=True)
class LossWeights:
    lam: float = 100.0  # reconstruction
    gamma: float = 10.0  # total variation

    def __post_init__(self):
        for name in ("lam", "gamma"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"loss weight {name} must be finite and >= 0, got {v}")


@dataclass
class LossReport:
    recon: float = 0.0
    tv: float = 0.0
    e_adv: float = 0.0
    g_adv: float = 0.0
    dz_loss: float = 0.0
    dimg_loss: float = 0.0
    eg_total: float = 0.0

    def as_dict(self) -> dict[str, float]:
        return asdict(self)

    def nonfinite(self) -> list[str]:
        return [k for k, v in self.as_dict().items() if not math.isfinite(v)]


def _t(x):
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(x, dtype=torch.float64)


def recon_loss(x, x_hat) -> torch.Tensor:
    """Mean squared error over every element."""
    x, x_hat = _t(x), _t(x_hat)
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    return torch.mean((x - x_hat) ** 2)


def tv_loss(x_hat) -> torch.Tensor:
    """Anisotropic total variation for channels-last images (B x H x W x C or H x W x C).

    Vertical and horizontal absolute forward differences are each averaged
    over their valid positions, and the two means are added.
    """
    x = _t(x_hat)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[1] < 2 or x.shape[2] < 2:
        raise ValueError(f"tv_loss needs images of at least 2x2, got shape {tuple(x.shape)}")
    dv = torch.abs(x[:, 1:, :, :] - x[:, :-1, :, :]).mean()
    dh = torch.abs(x[:, :, 1:, :] - x[:, :, :-1, :]).mean()
    return dv + dh


def adversarial_d_loss(real_logits, fake_logits) -> torch.Tensor:
    """-mean log D(real) - mean log(1 - D(fake))."""
    real_logits, fake_logits = _t(real_logits), _t(fake_logits)
    if real_logits.shape != fake_logits.shape:
        raise ValueError(f"shape mismatch: {tuple(real_logits.shape)} vs {tuple(fake_logits.shape)}")
    return F.softplus(-real_logits).mean() + F.softplus(fake_logits).mean()


def adversarial_g_loss(fake_logits, saturating: bool = False) -> torch.Tensor:
    """Generator-side term.

    Non-saturating (default): -mean log D(fake).
    Saturating: mean log(1 - D(fake)), the literal min-max term.
    """
    fake_logits = _t(fake_logits)
    if saturating:
        return -F.softplus(fake_logits).mean()
    return F.softplus(-fake_logits).mean()


def eg_total_loss(x, x_hat, dz_fake_logits, dimg_fake_logits, weights: LossWeights,
                  saturating: bool = False):
    """Joint encoder/generator objective and its per-term report.

    Pass ``None`` for a discriminator's logits when that discriminator is
    ablated; its term is then zero.
    """
    recon = recon_loss(x, x_hat)
    tv = tv_loss(x_hat)
    zero = torch.zeros((), dtype=recon.dtype)
    e_adv = zero if dz_fake_logits is None else adversarial_g_loss(dz_fake_logits, saturating)
    g_adv = zero if dimg_fake_logits is None else adversarial_g_loss(dimg_fake_logits, saturating)
    total = weights.lam * recon + weights.gamma * tv + e_adv + g_adv
    report = LossReport(recon=float(recon.detach()), tv=float(tv.detach()), e_adv=float(e_adv.detach()),
                        g_adv=float(g_adv.detach()), eg_total=float(total.detach()))
    return total, report
