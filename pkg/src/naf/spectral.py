"""Per-channel analysis of RoPE attention scores.

Under RoPE, the score between guidance vectors at ``p`` and ``q'`` splits
into one term per channel pair ``c``::

    A_c = (g_p . g_q) cos(dphi_c) - (g_p x g_q) sin(dphi_c)
        = r_p r_q cos(psi_c + dphi_c)

where ``dphi_c = phi_c(q') - phi_c(p)`` and ``psi_c`` is the angle from
``g_p`` to ``g_q`` within the pair. Read along one axis, the sum over ``c``
is a cosine series with amplitudes ``r_p r_q``, content phases ``psi_c`` and
spatial phases ``omega_c * dx``: an inverse-DFT synthesis of the kernel.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .attention import attention_weights
from .errors import BoundsError, ConfigError, ShapeError
from .rope import phase_grid, relative_phase, wavelengths
from .tensor import check_tensor3, save_npy


@dataclass(frozen=True)
class ChannelTerm:
    pair_index: int
    dot: float
    cross: float
    delta_phi: float
    a_c: float


@dataclass(frozen=True)
class PolarTerm:
    r_p: float
    r_q: float
    psi: float
    delta_phi: float

    @property
    def a_c(self):
        return self.r_p * self.r_q * np.cos(self.psi + self.delta_phi)


def _pairs(guidance, pos):
    v = np.asarray(guidance[pos[0], pos[1]], dtype=np.float64)
    return v[0::2], v[1::2]


def _check(guidance, rope):
    guidance = check_tensor3(guidance, "guidance")
    if guidance.shape != (rope.grid_h, rope.grid_w, rope.channels):
        raise ShapeError(f"guidance shape {guidance.shape} does not match RoPE config")
    return guidance


def channel_decomposition(guidance, rope, p, q_prime):
    """Per-pair terms of ``<RoPE(G)_p, RoPE(G)_q'>``; they sum to the inner product."""
    guidance = _check(guidance, rope)
    dphi = relative_phase(rope, p, q_prime)
    xp, yp = _pairs(guidance, p)
    xq, yq = _pairs(guidance, q_prime)
    dot = xp * xq + yp * yq
    cross = xp * yq - yp * xq
    a = dot * np.cos(dphi) - cross * np.sin(dphi)
    return [ChannelTerm(c, float(dot[c]), float(cross[c]), float(dphi[c]), float(a[c])) for c in range(len(a))]


def polar_form(guidance, rope, p, q_prime, c):
    """Magnitude/angle form of channel pair ``c``. ``psi`` is 0 when a magnitude is 0."""
    guidance = _check(guidance, rope)
    if not 0 <= c < rope.channels // 2:
        raise BoundsError(f"pair index {c} out of range")
    xp, yp = _pairs(guidance, p)
    xq, yq = _pairs(guidance, q_prime)
    dphi = relative_phase(rope, p, q_prime)[c]
    r_p = float(np.hypot(xp[c], yp[c]))
    r_q = float(np.hypot(xq[c], yq[c]))
    if r_p == 0.0 or r_q == 0.0:
        psi = 0.0
    else:
        psi = float(np.arctan2(xp[c] * yq[c] - yp[c] * xq[c], xp[c] * xq[c] + yp[c] * yq[c]))
    return PolarTerm(r_p, r_q, psi, float(dphi))


def pooled_score(guidance, rope, p, lr_cell, s):
    """Mean over the HR pixels of ``lr_cell`` of the summed channel terms.

    Equals the unscaled logit ``<Q_p, K_cell>`` with average-pooled keys.
    """
    guidance = _check(guidance, rope)
    a, b = lr_cell
    if not (0 <= a < rope.grid_h // s and 0 <= b < rope.grid_w // s) or rope.grid_h % s or rope.grid_w % s:
        raise BoundsError(f"LR cell {lr_cell} invalid for scale {s} on grid {(rope.grid_h, rope.grid_w)}")
    total = 0.0
    for i in range(a * s, a * s + s):
        for j in range(b * s, b * s + s):
            total += sum(t.a_c for t in channel_decomposition(guidance, rope, p, (i, j)))
    return total / (s * s)


def mean_trig_maps(rope, window, stride=1):
    """Mean over channel pairs of cos and sin of the relative phase.

    Offsets span ``window x window`` steps of ``stride`` HR pixels (use the
    upsampling factor to view an LR neighborhood). Returns ``(cos_map,
    sin_map)``, each ``(window, window)``, indexed by (row, col) offset.
    """
    if window < 1 or window % 2 == 0:
        raise ConfigError(f"window must be odd, got {window}")
    r = window // 2
    omega = 2.0 * np.pi / wavelengths(rope)
    uy = 0.0 if rope.grid_h == 1 else 2.0 / (rope.grid_h - 1)
    ux = 0.0 if rope.grid_w == 1 else 2.0 / (rope.grid_w - 1)
    off = np.arange(-r, r + 1) * stride
    phy = (off[:, None] * uy) * omega[None, :]  # (window, bands)
    phx = (off[:, None] * ux) * omega[None, :]
    n = rope.bands
    dphi = np.concatenate(
        [np.broadcast_to(phy[:, None, :], (window, window, n)), np.broadcast_to(phx[None, :, :], (window, window, n))],
        axis=2,
    )
    cos_map = np.cos(dphi).mean(axis=2)
    sin_map = np.sin(dphi).mean(axis=2)
    return cos_map, sin_map


def channel_trig_maps(rope, window, c, stride=1):
    """cos/sin of the relative phase for a single channel pair ``c``."""
    if window < 1 or window % 2 == 0:
        raise ConfigError(f"window must be odd, got {window}")
    r = window // 2
    phi = phase_grid(rope)[..., c]
    cy, cx = rope.grid_h // 2, rope.grid_w // 2
    rows = np.clip(cy + np.arange(-r, r + 1) * stride, 0, rope.grid_h - 1)
    cols = np.clip(cx + np.arange(-r, r + 1) * stride, 0, rope.grid_w - 1)
    d = phi[np.ix_(rows, cols)] - phi[cy, cx]
    return np.cos(d), np.sin(d)


def attention_map(image, enc, rope, cfg, p):
    """Softmax weights of HR pixel ``p`` over its ``k x k`` window (0 outside the grid)."""
    image = check_tensor3(image, "image")
    H, W, _ = image.shape
    if not (0 <= p[0] < H and 0 <= p[1] < W):
        raise BoundsError(f"position {p} outside image {(H, W)}")
    return attention_weights(image, enc, rope, cfg)[p[0], p[1]]


def export_attention_map(image, enc, rope, cfg, p, path):
    """Write the attention map at ``p`` as ``<path>.npy`` and a grayscale ``<path>.png``.

    Returns the ``(k, k)`` weight grid.
    """
    from PIL import Image

    weights = attention_map(image, enc, rope, cfg, p)
    stem = os.path.splitext(str(path))[0]
    save_npy(weights[:, :, None], stem + ".npy")
    lo, hi = float(weights.min()), float(weights.max())
    scaled = (weights - lo) / (hi - lo) if hi > lo else np.ones_like(weights)
    Image.fromarray(np.round(scaled * 255).astype(np.uint8), mode="L").save(stem + ".png")
    return weights
