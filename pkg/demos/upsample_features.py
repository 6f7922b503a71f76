"""Upsample a coarse feature map with an untrained and a briefly trained encoder.

Run from the repository root:  python demos/upsample_features.py
"""

import numpy as np

from naf import AttnConfig, RopeConfig, init_encoder, naf_forward
from naf.tensor import resize
from naf.training import (
    Stage,
    SyntheticImages,
    SyntheticTeacher,
    TrainConfig,
    evaluate_upsampler,
    train,
    upsampling_example,
)

source = SyntheticImages(seed=0)
teacher = SyntheticTeacher(patch=8, out_dim=16)

# One held-out image, its low-resolution features and the full-resolution target.
img = source.sample(10**6, 64)
f_lr, guide, target, s = upsampling_example(img, teacher, 32)
print("image", img.shape, "LR features", f_lr.shape, "target", target.shape, "scale", s)

# A freshly initialized encoder already gives a valid (convex) upsampler.
enc = init_encoder(1, 32, seed=0)
rope = RopeConfig(32, guide.shape[0], guide.shape[1])
out = naf_forward(f_lr, guide, enc, rope, AttnConfig(s, 3))
print("untrained NAF l2 :", float(np.mean((out - target) ** 2)))
print("bilinear l2      :", float(np.mean((resize(f_lr, 8, 8, "bilinear") - target) ** 2)))

# A short training run; 500 iterations are used by the test suite.
cfg = TrainConfig(stages=[Stage(150, 64, (32,))], channels=32, kernel=3)
res = train(cfg, teacher, source)
print(f"loss: first {res.losses[0]:.5f}, last {res.losses[-1]:.5f}")
model, bilinear = evaluate_upsampler(res.params, cfg, teacher, source, n_images=8)
print(f"held-out l2 over 8 images: model {model:.5f}, bilinear {bilinear:.5f}")
