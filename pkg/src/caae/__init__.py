"""Conditional adversarial autoencoder (CAAE) for face age progression and regression."""

from .data import (DatasetRecord, FaceDataset, age_to_bin, bin_to_label, denormalize_image,
                   load_manifest, make_batches, normalize_image, synth_faces)
from .networks import (ModelParams, NetworkConfig, discriminate_img, discriminate_z, encode,
                       generate, init_params)
from .objectives import (LossReport, LossWeights, adversarial_d_loss, adversarial_g_loss,
                         eg_total_loss, recon_loss, tv_loss)
from .trainer import (PriorSpec, TrainConfig, TrainState, load_checkpoint, sample_prior,
                      save_checkpoint, train, train_step)
from .inference import age_sweep, interpolate, manifold_grid, reconstruct
from .evaluation import (ablation_compare, conditioning_score, gradcheck, gradcheck_terms, wrinkle_score,
                         z_uniformity)

__version__ = "0.1.0"
