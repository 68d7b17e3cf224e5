"""Quantitative checks: finite-difference gradients, latent uniformity,
age conditioning on synthetic faces, and side-by-side ablation reports."""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from scipy import stats

from . import objectives
from .data import NUM_BINS, FaceDataset, bin_to_label
from .inference import (encode_images, generate_images, interpolate,
                        manifold_grid, save_uint8)
from .networks import GROUPS, ModelParams, dimg_logits, dz_logits, encode, generate
from .objectives import LossWeights
from .trainer import TrainConfig, final_checkpoint, load_checkpoint, read_checkpoint_config

MIN_UNIFORMITY_SAMPLES = 500
MIN_PROBES = 50
OLD_BINS = (7, 8, 9)
FLOAT64_EPS = float(np.finfo(np.float64).eps)
ROUNDOFF_TOL = 1e-4
GRADCHECK_TOL = 1e-3


# --- gradient check -------------------------------------------------------

@dataclass
class GradCheckReport:
    group_errors: dict[str, float]
    worst_parameter: str
    epsilon: float
    checked: int = 0
    largest_step: float = 0.0

    @property
    def max_error(self) -> float:
        return max(self.group_errors.values()) if self.group_errors else 0.0


def relative_error(analytic: float, numeric: float, floor: float = 1e-8) -> float:
    """|a - n| / max(|a|, |n|), falling back to |a - n| when both are below ``floor``."""
    scale = max(abs(analytic), abs(numeric))
    diff = abs(analytic - numeric)
    return diff if scale < floor else diff / scale


def _groups_of(params):
    if isinstance(params, ModelParams):
        return {g: params.group(g) for g in GROUPS}
    return dict(params)


def _rebuild(params, groups):
    if isinstance(params, ModelParams):
        return params.replace(**groups)
    return groups


def _evaluate(terms_fn, params, groups) -> dict[str, float]:
    return {k: float(v) for k, v in terms_fn(_rebuild(params, groups)).items()}


def gradcheck(loss_fn: Callable, params, epsilon: float = 1e-6, *, samples: int = 200,
              seed: int = 0, full: bool = False) -> GradCheckReport:
    """Compare autograd gradients of a scalar loss with central differences.

    ``params`` is a ModelParams or a mapping group -> {name: tensor}; ``loss_fn``
    receives the same kind of object and returns a scalar tensor.  Up to
    ``samples`` scalar entries are drawn per group unless ``full`` is set.
    """
    return gradcheck_terms(lambda p: {"loss": loss_fn(p)}, params, epsilon,
                           samples=samples, seed=seed, full=full)["loss"]


def gradcheck_terms(terms_fn: Callable, params, epsilon: float = 1e-6, *, samples: int = 200,
                    seed: int = 0, full: bool = False) -> dict[str, GradCheckReport]:
    """Like :func:`gradcheck` for a function returning several named scalar losses.

    Each perturbation is evaluated once for all terms.  Every (entry, term)
    pair starts at step ``epsilon``.  When the loss is large relative to the
    derivative, rounding in the two loss evaluations dominates, so the step
    grows tenfold (at most twice) until the estimated rounding error falls
    below ``ROUNDOFF_TOL`` of the estimate.  The choice depends on loss values
    only, never on the analytic gradient.
    """
    if not 1e-6 <= epsilon <= 1e-4:
        raise ValueError(f"epsilon must lie in [1e-6, 1e-4], got {epsilon}")
    groups = {g: {k: v.detach().clone() for k, v in d.items()} for g, d in _groups_of(params).items()}
    leaves = {g: {k: v.clone().requires_grad_(True) for k, v in d.items()} for g, d in groups.items()}
    losses = terms_fn(_rebuild(params, leaves))
    flat = [(g, k) for g in leaves for k in leaves[g]]
    analytic = {}
    for name, loss in losses.items():
        grads = torch.autograd.grad(loss, [leaves[g][k] for g, k in flat], allow_unused=True,
                                    retain_graph=True)
        for (g, k), gr in zip(flat, grads):
            gr = torch.zeros_like(groups[g][k]) if gr is None else gr.detach()
            if not torch.isfinite(gr).all():
                raise FloatingPointError(f"non-finite analytic gradient of {name} for {g}/{k}")
            analytic[name, g, k] = gr.reshape(-1)
    names = list(losses)
    del losses, leaves

    steps = [epsilon * 10 ** j for j in range(3)]
    rng = np.random.default_rng(seed)
    errors = {n: {} for n in names}
    worst = {n: ("", -1.0) for n in names}
    checked, largest = 0, {n: epsilon for n in names}
    with torch.no_grad():
        for g, d in groups.items():
            index = [(k, i) for k, v in d.items() for i in range(v.numel())]
            if not index:
                continue
            if not full and len(index) > samples:
                index = [index[j] for j in rng.choice(len(index), samples, replace=False)]
            for n in names:
                errors[n][g] = 0.0
            for k, i in index:
                t = d[k].view(-1)
                orig = t[i].item()
                pending = set(names)
                for h in steps:
                    t[i] = orig + h
                    f_plus = _evaluate(terms_fn, params, groups)
                    t[i] = orig - h
                    f_minus = _evaluate(terms_fn, params, groups)
                    t[i] = orig
                    for n in sorted(pending):
                        numeric = (f_plus[n] - f_minus[n]) / (2 * h)
                        # rounding in f(x +- h) alone perturbs the quotient by about this much
                        roundoff = 2 * FLOAT64_EPS * max(abs(f_plus[n]), abs(f_minus[n])) / h
                        if roundoff > ROUNDOFF_TOL * abs(numeric) and h != steps[-1]:
                            continue
                        pending.discard(n)
                        largest[n] = max(largest[n], h)
                        err = relative_error(float(analytic[n, g, k][i]), numeric)
                        errors[n][g] = max(errors[n][g], err)
                        if err > worst[n][1]:
                            worst[n] = (f"{g}/{k}[{i}]", err)
                    if not pending:
                        break
                checked += 1
    return {n: GradCheckReport(errors[n], worst[n][0], epsilon, checked, largest[n]) for n in names}


def caae_loss_terms(x, l, prior, weights: LossWeights = LossWeights(), saturating: bool = False):
    """Every scalar loss of the objective, computed from one forward pass of each network."""
    def terms(p):
        z = encode(p, x)
        x_hat = generate(p, z, l)
        dz_real, dz_fake = dz_logits(p, prior), dz_logits(p, z)
        dimg_real = dimg_logits(p, x, l, training=True)
        dimg_fake = dimg_logits(p, x_hat, l, training=True)
        total, _ = objectives.eg_total_loss(x, x_hat, dz_fake, dimg_fake, weights, saturating)
        return {
            "recon": objectives.recon_loss(x, x_hat),
            "tv": objectives.tv_loss(x_hat),
            "dz_loss": objectives.adversarial_d_loss(dz_real, dz_fake),
            "dimg_loss": objectives.adversarial_d_loss(dimg_real, dimg_fake),
            "e_adv": objectives.adversarial_g_loss(dz_fake, saturating),
            "g_adv": objectives.adversarial_g_loss(dimg_fake, saturating),
            "eg_total": total,
        }

    return terms


def gradcheck_caae(params: ModelParams, batch: int = 4, epsilon: float = 1e-6, samples: int = 200,
                   seed: int = 0, full: bool = False) -> dict[str, GradCheckReport]:
    """Run gradcheck for every loss term on random double-precision inputs."""
    params = params.to(torch.float64)
    cfg = params.config
    g = torch.Generator().manual_seed(seed)
    x = torch.rand((batch, cfg.image_size, cfg.image_size, cfg.channels), generator=g, dtype=torch.float64) * 2 - 1
    bins = torch.randint(0, NUM_BINS, (batch,), generator=g)
    l = torch.as_tensor(np.stack([bin_to_label(int(b)) for b in bins]), dtype=torch.float64)
    prior = torch.rand((batch, cfg.latent_dim), generator=g, dtype=torch.float64) * 2 - 1
    return gradcheck_terms(caae_loss_terms(x, l, prior), params, epsilon, samples=samples, seed=seed, full=full)


# --- latent uniformity ------------------------------------------------------

@dataclass
class UniformityReport:
    ks: np.ndarray  # per-dimension KS distance to U[-1, 1]
    pvalues: np.ndarray
    count: int

    @property
    def mean_ks(self) -> float:
        return float(np.mean(self.ks))

    def critical_value(self, alpha: float = 0.05) -> float:
        return float(stats.kstwo.ppf(1 - alpha, self.count))

    def passes(self, alpha: float = 0.05) -> bool:
        """All dimensions pass KS at ``alpha`` after Bonferroni correction."""
        return bool(np.all(self.pvalues > alpha / len(self.ks)))


def code_uniformity(codes) -> UniformityReport:
    codes = np.asarray(codes, dtype=np.float64)
    if codes.ndim != 2:
        raise ValueError("codes must be N x n")
    if len(codes) < MIN_UNIFORMITY_SAMPLES:
        raise ValueError(f"need at least {MIN_UNIFORMITY_SAMPLES} codes, got {len(codes)}")
    res = [stats.kstest(codes[:, j], stats.uniform(loc=-1, scale=2).cdf) for j in range(codes.shape[1])]
    return UniformityReport(np.array([r.statistic for r in res]), np.array([r.pvalue for r in res]), len(codes))


def z_uniformity(params: ModelParams, images) -> UniformityReport:
    """Encode ``images`` and measure how far each code dimension is from U[-1, 1]."""
    images = np.asarray(images)
    if len(images) < MIN_UNIFORMITY_SAMPLES:
        raise ValueError(f"need at least {MIN_UNIFORMITY_SAMPLES} images, got {len(images)}")
    return code_uniformity(encode_images(params, images))


# --- wrinkle scoring ---------------------------------------------------------

def wrinkle_score(img) -> float:
    """Estimate the number of horizontal wrinkle stripes on a synthetic face.

    The head is segmented against the border-estimated background; dark runs
    are counted along vertical scanlines placed between the mouth and the
    eyes, and the counts are averaged.
    """
    img = np.asarray(img, dtype=np.float64)
    lum = img.mean(axis=2) if img.ndim == 3 else img
    border = np.concatenate([lum[0], lum[-1], lum[:, 0], lum[:, -1]])
    bg = float(np.median(border))
    skin = float(np.percentile(lum, 95))
    contrast = skin - bg
    if contrast < 0.2:
        return 0.0
    head = lum > bg + 0.25 * contrast
    ys, xs = np.nonzero(head)
    if len(xs) == 0:
        return 0.0
    x0, x1 = xs.min(), xs.max()
    cx, a = (x0 + x1 + 1) / 2, (x1 - x0 + 1) / 2
    dark_thr = skin - 0.25 * contrast
    counts = []
    for off in (-0.33, -0.27, 0.27, 0.33):
        col = int(math.floor(cx + off * a))
        if not 0 <= col < lum.shape[1]:
            continue
        rows = np.nonzero(head[:, col])[0]
        if len(rows) < 3:
            continue
        seg = lum[rows.min():rows.max() + 1, col]
        dark = seg < dark_thr
        # runs of dark pixels = rising edges, plus one if the segment starts dark
        counts.append(int(dark[0]) + int(np.sum(dark[1:] & ~dark[:-1])))
    return float(np.mean(counts)) if counts else 0.0


@dataclass
class ConditioningReport:
    rho: float
    pvalue: float
    bin_means: list[float]
    degenerate: bool = False  # scores did not vary across bins; rho reported as 0
    fresh_params: bool = False  # params never trained

    def as_dict(self):
        return asdict(self)


def conditioning_score(params: ModelParams, probe_images, bins=range(NUM_BINS)) -> ConditioningReport:
    """Spearman correlation between requested bin and mean wrinkle score over probes."""
    probe_images = np.asarray(probe_images)
    if len(probe_images) < MIN_PROBES:
        raise ValueError(f"need at least {MIN_PROBES} probe images, got {len(probe_images)}")
    bins = list(bins)
    fresh = params.updates == 0
    if fresh:
        warnings.warn("conditioning_score on untrained parameters", stacklevel=2)
    codes = encode_images(params, probe_images)
    means = []
    for b in bins:
        labels = np.repeat(bin_to_label(b)[None], len(codes), axis=0)
        out = generate_images(params, codes, labels)
        means.append(float(np.mean([wrinkle_score(o) for o in out])))
    if np.ptp(means) == 0:
        return ConditioningReport(0.0, 1.0, means, degenerate=True, fresh_params=fresh)
    res = stats.spearmanr(bins, means)
    return ConditioningReport(float(res.statistic), float(res.pvalue), means, fresh_params=fresh)


# --- ablation comparison ----------------------------------------------------

def high_frequency_energy(params: ModelParams, probe_images, bins=OLD_BINS) -> float:
    """Mean total variation of generated images at the given (old-age) bins."""
    codes = encode_images(params, probe_images)
    vals = []
    for b in bins:
        out = generate_images(params, codes, np.repeat(bin_to_label(b)[None], len(codes), axis=0))
        vals.append(float(objectives.tv_loss(torch.as_tensor(out, dtype=torch.float64))))
    return float(np.mean(vals))


def reconstruction_error(params: ModelParams, probes: FaceDataset) -> float:
    codes = encode_images(params, probes.images)
    out = generate_images(params, codes, probes.labels)
    return float(np.mean((out - probes.images) ** 2))


def interpolation_smoothness(params: ModelParams, probe_images, pairs: int = 10, steps: int = 8,
                             label_bin: int = 4) -> float:
    probe_images = np.asarray(probe_images)
    pairs = min(pairs, len(probe_images) // 2)
    l = bin_to_label(label_bin)
    return float(np.mean([interpolate(params, probe_images[2 * i], probe_images[2 * i + 1], l, steps).smoothness()
                          for i in range(pairs)]))


def run_metrics(params: ModelParams, probes: FaceDataset) -> dict[str, float]:
    images = probes.images
    out = {
        "reconstruction_error": reconstruction_error(params, probes),
        "interpolation_smoothness": interpolation_smoothness(params, images),
        "high_frequency_energy_old": high_frequency_energy(params, images[:MIN_PROBES]),
    }
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        cond = conditioning_score(params, images[:MIN_PROBES])
    out["conditioning_rho"] = cond.rho
    if len(images) >= MIN_UNIFORMITY_SAMPLES:
        out["z_mean_ks"] = z_uniformity(params, images).mean_ks
    return out


def resolve_checkpoint(run_or_ckpt) -> Path:
    p = Path(run_or_ckpt)
    if p.is_dir():
        final = final_checkpoint(p)
        if final.is_file():
            return final
        steps = sorted((p / "checkpoints").glob("step_*.ckpt"))
        if not steps:
            raise FileNotFoundError(f"no checkpoints under {p}")
        return steps[-1]
    return p


ABLATION_FIELDS = ("ablate_dz", "ablate_dimg")


def config_mismatch(a: TrainConfig, b: TrainConfig) -> list[str]:
    da, db = a.to_dict(), b.to_dict()
    return sorted(k for k in da if k not in ABLATION_FIELDS and da[k] != db[k])


def ablation_compare(run_a, run_b, probes: FaceDataset, out_dir=None) -> dict:
    """Metrics for two runs side by side; ``delta`` is b minus a."""
    ck_a, ck_b = resolve_checkpoint(run_a), resolve_checkpoint(run_b)
    cfg_a, cfg_b = read_checkpoint_config(ck_a), read_checkpoint_config(ck_b)
    bad = config_mismatch(cfg_a, cfg_b)
    if bad:
        raise ValueError(f"runs differ beyond the ablation flags: {bad}")
    params_a = load_checkpoint(ck_a)[0].params
    params_b = params_a if ck_a == ck_b else load_checkpoint(ck_b)[0].params
    ma = run_metrics(params_a, probes)
    mb = ma if ck_a == ck_b else run_metrics(params_b, probes)
    report = {
        "a": {"checkpoint": str(ck_a), **{k: getattr(cfg_a, k) for k in ABLATION_FIELDS}, "metrics": ma},
        "b": {"checkpoint": str(ck_b), **{k: getattr(cfg_b, k) for k in ABLATION_FIELDS}, "metrics": mb},
        "delta": {k: mb[k] - ma[k] for k in ma},
    }
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "comparison.json").write_text(json.dumps(report, indent=2))
        (out_dir / "comparison.txt").write_text(format_comparison(report))
        faces = list(probes.images[:5])
        save_uint8(manifold_grid(params_a, faces), out_dir / "grid_a.png")
        save_uint8(manifold_grid(params_b, faces), out_dir / "grid_b.png")
    return report


def format_comparison(report: dict) -> str:
    ma, mb, d = report["a"]["metrics"], report["b"]["metrics"], report["delta"]
    width = max(len(k) for k in ma)
    lines = [f"{'metric':<{width}}  {'run a':>12}  {'run b':>12}  {'b - a':>12}"]
    for k in ma:
        lines.append(f"{k:<{width}}  {ma[k]:>12.6f}  {mb[k]:>12.6f}  {d[k]:>+12.6f}")
    return "\n".join(lines) + "\n"
