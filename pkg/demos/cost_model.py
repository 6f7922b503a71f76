"""Operation counts for a 28x28 feature map upsampled 16 times.

Run from the repository root:  python demos/cost_model.py
"""

from naf import AttnConfig, init_encoder, param_count
from naf.flops import flops_estimate, measure_speedup

enc = init_encoder(2, 256)
print(f"encoder parameters: {param_count(enc):,}")

est = flops_estimate(AttnConfig(16, 9), enc, 28, 28, 384)
for key in ("encoder", "rope", "logits", "aggregation", "total", "dense_logits"):
    print(f"{key:12s} {est[key] / 1e9:9.2f} GFLOP")
print("logits, neighborhood over dense:", est["logits_ratio"])

r = measure_speedup(lr_size=16, scale=8, kernel=9, repeats=1)
print(f"measured at 16x16 -> 128x128: {r['speedup']:.1f}x faster than dense attention")
