"""The four networks and the loss terms, on untrained weights.

Everything is a pure function of an explicit parameter set, so the same
``params`` object can be passed to the encoder, generator and both
discriminators.
"""
import math

import numpy as np
import torch

from caae import (LossWeights, NetworkConfig, adversarial_d_loss, adversarial_g_loss,
                  bin_to_label, discriminate_img, discriminate_z, eg_total_loss, encode,
                  generate, init_params, recon_loss, synth_faces, tv_loss)
from caae.networks import count_parameters, dimg_first_stage

cfg = NetworkConfig(image_size=64, channels=3, latent_dim=64, base_filters=16, num_scales=4)
params = init_params(cfg, seed=0)
counts = count_parameters(params)
print(counts, "total", sum(counts.values()))

x = torch.as_tensor(np.stack([img for img, _ in synth_faces(4, 64, seed=2)]))
l = torch.as_tensor(np.stack([bin_to_label(b) for b in (0, 3, 6, 9)]))

z = encode(params, x)             # (4, 64), inside (-1, 1)
x_hat = generate(params, z, l)    # (4, 64, 64, 3), inside (-1, 1)
print(z.shape, float(z.abs().max()), x_hat.shape)

p_z, dz_logit = discriminate_z(params, z)
p_img, dimg_logit = discriminate_img(params, x_hat, l)
print("Dz", p_z.detach().numpy().round(3), "Dimg", p_img.detach().numpy().round(3))

# the label is tiled into the image discriminator after its first conv
print("after injection:", tuple(dimg_first_stage(params, x, l).shape))   # 16 + 10 channels

# loss terms
print("recon", float(recon_loss(x, x_hat)), "tv", float(tv_loss(x_hat)))
zero = torch.zeros(4, dtype=torch.float64)
print("d loss at logit 0:", float(adversarial_d_loss(zero, zero)), "= 2 ln 2 =", 2 * math.log(2))
print("g loss at logit 0:", float(adversarial_g_loss(zero)), "= ln 2")

total, report = eg_total_loss(x, x_hat, dz_logit, dimg_logit, LossWeights(lam=100, gamma=10))
print(report)
