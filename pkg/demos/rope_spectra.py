"""Look at how rotary position codes shape attention scores.

Run from the repository root:  python demos/rope_spectra.py
"""

import numpy as np

from naf import RopeConfig, apply_rope
from naf.spectral import channel_decomposition, mean_trig_maps, polar_form

rope = RopeConfig(channels=16, grid_h=9, grid_w=9)
rng = np.random.default_rng(0)
g = rng.standard_normal((9, 9, 16))

# The rotated inner product splits into one term per channel pair.
p, q = (2, 3), (6, 1)
terms = channel_decomposition(g, rope, p, q)
rg = apply_rope(g, rope)
print("sum of pair terms :", sum(t.a_c for t in terms))
print("rotated dot       :", rg[p] @ rg[q])

# Each term is a cosine of the content angle plus the position angle.
t = polar_form(g, rope, p, q, 0)
print(f"pair 0: r_p={t.r_p:.3f} r_q={t.r_q:.3f} psi={t.psi:.3f} dphi={t.delta_phi:.3f} -> {t.a_c:.4f}")

# Averaged over all bands, the cosine of the relative phase falls off with distance.
cos_map, sin_map = mean_trig_maps(RopeConfig(256, 28, 28, 100.0), 9)
np.set_printoptions(precision=3, suppress=True)
print("mean cosine, 9x9 window on a 28x28 grid:")
print(cos_map)
print("largest |mean sine|:", np.abs(sin_map).max())
