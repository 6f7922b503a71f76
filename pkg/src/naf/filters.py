"""Joint bilateral filtering and joint bilateral upsampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import check_tensor3, resize


@dataclass(frozen=True)
class BilateralConfig:
    sigma_s: float = 1.0
    sigma_r: float = 0.1
    radius: int = 4

    def __post_init__(self):
        if not (self.sigma_s > 0 and self.sigma_r > 0):
            raise ConfigError("sigma_s and sigma_r must be positive")
        if self.radius < 0:
            raise ConfigError(f"radius must be >= 0, got {self.radius}")


def _shifted(x, pad, di, dj, h, w):
    return x[pad + di : pad + di + h, pad + dj : pad + dj + w]


def _mirror_orbits(r):
    """Window offsets grouped into orbits under horizontal/vertical mirroring."""
    for di in range(0, r + 1):
        for dj in range(0, r + 1):
            orbit = []
            for o in ((di, dj), (di, -dj), (-di, dj), (-di, -dj)):
                if o not in orbit:
                    orbit.append(o)
            yield orbit


def _accumulate(term, r):
    """Sum ``term(di, dj)`` over the window so that mirrored inputs give
    exactly mirrored sums: each orbit is added as ``(a + b) + (c + d)``,
    which is invariant under the swaps a mirror induces."""
    total = None
    for orbit in _mirror_orbits(r):
        parts = [term(di, dj) for di, dj in orbit]
        if len(parts) == 4:
            s = tuple((a + b) + (c + d) for a, b, c, d in zip(*parts))
        elif len(parts) == 2:
            s = tuple(a + b for a, b in zip(*parts))
        else:
            s = parts[0]
        total = s if total is None else tuple(t + x for t, x in zip(total, s))
    return total


def jbf(signal, guidance, cfg):
    """Joint bilateral filter of ``signal`` steered by ``guidance``.

    Weights are ``exp(-|p-q|^2 / 2 sigma_s^2 - |G_p - G_q|^2 / 2 sigma_r^2)``
    over the ``(2r+1)^2`` window, truncated at the borders and renormalized.
    """
    signal = check_tensor3(signal, "signal")
    guidance = check_tensor3(guidance, "guidance")
    if signal.shape[:2] != guidance.shape[:2]:
        raise ShapeError(f"signal {signal.shape[:2]} and guidance {guidance.shape[:2]} dims differ")
    h, w, _ = signal.shape
    r = cfg.radius
    dtype = np.result_type(signal.dtype, guidance.dtype)
    guidance = guidance.astype(dtype)
    sp = np.pad(signal.astype(dtype), ((r, r), (r, r), (0, 0)))
    gp = np.pad(guidance, ((r, r), (r, r), (0, 0)))
    inside = np.pad(np.ones((h, w), dtype=bool), r)

    def term(di, dj):
        valid = _shifted(inside, r, di, dj, h, w)[:, :, None]
        diff = _shifted(gp, r, di, dj, h, w) - guidance
        wt = np.exp(
            -(di * di + dj * dj) / (2.0 * cfg.sigma_s**2)
            - (diff * diff).sum(axis=2, keepdims=True) / (2.0 * cfg.sigma_r**2)
        )
        wt = np.where(valid, wt, 0.0).astype(dtype)
        return wt * _shifted(sp, r, di, dj, h, w), wt

    num, den = _accumulate(term, r)
    return num / den


def cell_center_guidance(guidance_hr, s):
    """Guidance sampled at the HR center of every LR cell.

    For odd ``s`` this is the central pixel; for even ``s`` the center falls
    between pixels and the central 2x2 pixels are averaged.
    """
    if s % 2:
        return guidance_hr[s // 2 :: s, s // 2 :: s]
    a, b = s // 2 - 1, s // 2
    g = guidance_hr
    return ((g[a::s, a::s] + g[b::s, b::s]) + (g[a::s, b::s] + g[b::s, a::s])) / 4


def jbu(f_lr, guidance_hr, s, cfg):
    """Joint bilateral upsampling of ``f_lr`` by integer factor ``s``.

    For HR pixel ``p`` the window is the LR cells within ``radius`` of the
    anchor ``p // s``. The spatial term measures, in LR units, the distance
    from ``p``'s half-pixel-centered LR coordinate ``(p + 0.5)/s - 0.5`` to
    each cell center; the range term compares ``G_p`` with the guidance at
    the cell's HR center (see :func:`cell_center_guidance`).
    """
    f_lr = check_tensor3(f_lr, "f_lr")
    guidance_hr = check_tensor3(guidance_hr, "guidance")
    h, w, _ = f_lr.shape
    H, W = h * s, w * s
    if guidance_hr.shape[:2] != (H, W):
        raise ShapeError(f"guidance dims {guidance_hr.shape[:2]} != {s} x feature dims {(h, w)}")
    r = cfg.radius
    dtype = np.result_type(f_lr.dtype, guidance_hr.dtype)
    guidance_hr = guidance_hr.astype(dtype)
    fp = np.pad(f_lr.astype(dtype), ((r, r), (r, r), (0, 0)))
    cp = np.pad(cell_center_guidance(guidance_hr, s), ((r, r), (r, r), (0, 0)))
    ay, ax = np.arange(H) // s, np.arange(W) // s
    ly = (np.arange(H) + 0.5) / s - 0.5
    lx = (np.arange(W) + 0.5) / s - 0.5

    def term(di, dj):
        qy, qx = ay + di, ax + dj
        valid = (((qy >= 0) & (qy < h))[:, None] & ((qx >= 0) & (qx < w))[None, :])[:, :, None]
        # padded LR arrays indexed at (q + r) for every HR pixel
        g_q = cp[(qy + r)[:, None], (qx + r)[None, :]]
        f_q = fp[(qy + r)[:, None], (qx + r)[None, :]]
        diff = guidance_hr - g_q
        dist = ((ly - qy) ** 2)[:, None] + ((lx - qx) ** 2)[None, :]
        wt = np.exp(
            -dist[:, :, None] / (2.0 * cfg.sigma_s**2)
            - (diff * diff).sum(axis=2, keepdims=True) / (2.0 * cfg.sigma_r**2)
        )
        wt = np.where(valid, wt, 0.0).astype(dtype)
        return wt * f_q, wt

    num, den = _accumulate(term, r)
    return num / den


def upsample_resize(f_lr, s, mode):
    """Plain resampling baseline (``nearest``, ``bilinear`` or ``bicubic``)."""
    f_lr = check_tensor3(f_lr, "f_lr")
    return resize(f_lr, f_lr.shape[0] * s, f_lr.shape[1] * s, mode)
