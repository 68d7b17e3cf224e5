"""Checks that do not need a long training run.

Finite-difference gradients of every loss term, the latent uniformity
statistic, and the conditioning score with its null cases.
"""
import warnings

import numpy as np
import torch

from caae import NetworkConfig, PriorSpec, init_params, sample_prior, synth_faces
from caae.evaluation import code_uniformity, conditioning_score, gradcheck_caae

# gradients: a double-precision miniature model, every parameter
cfg = NetworkConfig(image_size=8, channels=3, latent_dim=4, base_filters=8, num_scales=1)
for name, rep in gradcheck_caae(init_params(cfg, 0), samples=100).items():
    print(f"{name:10s} max relative error {rep.max_error:.1e}  ({rep.checked} entries)")

# uniformity: true prior samples pass, a collapsed code fails
z = sample_prior(PriorSpec(64), 1000, torch.Generator().manual_seed(0)).numpy()
good, bad = code_uniformity(z), code_uniformity(np.zeros((1000, 64)))
print("prior samples   mean KS", round(good.mean_ks, 4), "passes", good.passes())
print("all-zero codes  mean KS", round(bad.mean_ks, 4), "passes", bad.passes())

# conditioning on untrained weights is indistinguishable from zero
params = init_params(NetworkConfig(image_size=64, base_filters=16), 0)
probes = np.stack([img for img, _ in synth_faces(50, 64, seed=5)])
with warnings.catch_warnings():
    warnings.simplefilter("ignore")
    rep = conditioning_score(params, probes)
print("fresh weights: rho", round(rep.rho, 3), "p", round(rep.pvalue, 3), "degenerate", rep.degenerate)
