"""Age sweep, interpolation and the face-by-age grid.

Needs a trained checkpoint.  By default it trains a tiny model for well
under a minute so the script is self-contained; its pictures are still
mostly noise and only show the mechanics.  Pass a checkpoint path as the
second argument (for instance a 64x64 run from ``caae train``) to see
recognisable faces.
"""
import sys
from pathlib import Path

from caae import NetworkConfig, TrainConfig, age_sweep, bin_to_label, interpolate, manifold_grid, train
from caae.data import FaceDataset, synth_faces
from caae.inference import save_frames, save_uint8, tile_grid
from caae.trainer import final_checkpoint, load_params

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_output") / "04_traversal"
if len(sys.argv) > 2:
    params = load_params(sys.argv[2])
else:
    cfg = TrainConfig(network=NetworkConfig(image_size=32, channels=3, latent_dim=16, base_filters=8,
                                            num_scales=3), batch_size=25, epochs=4, seed=0)
    train(FaceDataset.synthetic(500, 32, seed=0), cfg, out / "run", overwrite=True)
    params = load_params(final_checkpoint(out / "run"))

size = params.config.image_size
faces = [img for img, _ in synth_faces(5, size, seed=77)]

# one encode, ten outputs; the query's age is never needed
sweep = age_sweep(params, faces[0])
print("latent code", sweep.code[:4], "...", len(sweep.outputs), "frames")
save_frames(sweep.outputs, out / "sweep", prefix="age")

# walk between two faces at a fixed age
morph = interpolate(params, faces[1], faces[2], bin_to_label(5), steps=8)
print("mean frame-to-frame change", morph.smoothness())
save_uint8(tile_grid([morph.frames]), out / "morph.png")

grid = manifold_grid(params, faces)
print("grid", grid.shape)
save_uint8(grid, out / "grid.png")
