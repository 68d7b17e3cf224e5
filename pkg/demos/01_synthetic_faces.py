"""Synthetic faces: the stand-in dataset used everywhere else.

Each face is an ellipse with two eyes and a mouth; the number of dark
horizontal stripes across the forehead equals the age bin (0-9), which
gives a measurable notion of "older".
"""
import sys
from pathlib import Path

import numpy as np

from caae import age_to_bin, bin_to_label, synth_faces
from caae.data import BIN_RANGES, DatasetRecord, save_image, write_manifest, load_manifest
from caae.evaluation import wrinkle_score
from caae.inference import save_uint8, tile_grid

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_output") / "01_synthetic"
out.mkdir(parents=True, exist_ok=True)

# the ten age bins and their label vectors
for b, (lo, hi) in enumerate(BIN_RANGES):
    print(f"bin {b}: ages {lo:2d}-{hi:2d}  label {bin_to_label(b).astype(int)}")

print(age_to_bin(3), age_to_bin(20), age_to_bin(95))   # 0 3 9

faces = synth_faces(40, 64, seed=1)
img, age = faces[0]
print(img.shape, img.dtype, img.min(), img.max(), "age", age)

# one face per bin, left to right
by_bin = {}
for img, age in faces:
    by_bin.setdefault(age_to_bin(age), img)
row = [by_bin[b] for b in sorted(by_bin)]
save_uint8(tile_grid([row]), out / "one_per_bin.png")

# the wrinkle score recovers the stripe count
scores = [wrinkle_score(img) for img, _ in faces]
bins = [age_to_bin(a) for _, a in faces]
print("score == bin for", np.mean(np.array(scores) == np.array(bins)) * 100, "% of faces")

# write a small dataset with a manifest and read it back
records = []
for k, (img, age) in enumerate(faces[:10]):
    p = out / "images" / f"face_{k}.png"
    save_image(img, p)
    records.append(DatasetRecord(p, age, "train"))
write_manifest(records, out / "manifest.jsonl")
print(len(load_manifest(out / "manifest.jsonl")), "records round-tripped")
