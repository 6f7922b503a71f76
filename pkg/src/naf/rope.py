"""2D axial rotary position embeddings.

Channel pairs ``(2c, 2c+1)`` are rotated by a position-dependent angle. The
first quarter of the channels' pairs encode the row coordinate, the second
quarter the column coordinate. Coordinates are normalized to [-1, 1] over the
grid the embedding is configured for.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BoundsError, ConfigError, ShapeError
from .tensor import check_tensor3


@dataclass(frozen=True)
class RopeConfig:
    channels: int
    grid_h: int
    grid_w: int
    base: float = 100.0

    def __post_init__(self):
        if self.channels < 4 or self.channels % 4:
            raise ConfigError(f"RoPE channels must be a positive multiple of 4, got {self.channels}")
        if not self.base > 1:
            raise ConfigError(f"RoPE base must exceed 1, got {self.base}")
        if self.grid_h < 1 or self.grid_w < 1:
            raise ConfigError(f"grid must be non-empty, got {(self.grid_h, self.grid_w)}")

    @property
    def bands(self):
        """Frequency bands per axis (C / 4)."""
        return self.channels // 4

    def for_grid(self, grid_h, grid_w):
        return RopeConfig(self.channels, grid_h, grid_w, self.base)


def wavelengths(cfg):
    """Band wavelengths ``base ** (i / n)`` for ``i < n = C / 4``."""
    n = cfg.bands
    return cfg.base ** (np.arange(n, dtype=np.float64) / n)


def normalized_coord(index, length):
    """Affine map of ``0 .. length-1`` onto [-1, 1]; a length-1 axis maps to 0."""
    index = np.asarray(index, dtype=np.float64)
    if length == 1:
        return np.zeros_like(index)
    return 2.0 * index / (length - 1) - 1.0


def _check_position(cfg, row, col):
    if not (0 <= row < cfg.grid_h and 0 <= col < cfg.grid_w):
        raise BoundsError(f"position {(row, col)} outside grid {(cfg.grid_h, cfg.grid_w)}")


def phase_angles(cfg, row, col):
    """Rotation angle per channel pair at grid position ``(row, col)``."""
    _check_position(cfg, row, col)
    omega = 2.0 * np.pi / wavelengths(cfg)
    py = normalized_coord(row, cfg.grid_h)
    px = normalized_coord(col, cfg.grid_w)
    return np.concatenate([omega * py, omega * px])


def phase_grid(cfg):
    """Angles for every grid position, shape ``(grid_h, grid_w, C/2)`` (float64)."""
    omega = 2.0 * np.pi / wavelengths(cfg)
    py = normalized_coord(np.arange(cfg.grid_h), cfg.grid_h)
    px = normalized_coord(np.arange(cfg.grid_w), cfg.grid_w)
    n = cfg.bands
    phi = np.empty((cfg.grid_h, cfg.grid_w, 2 * n))
    phi[:, :, :n] = (py[:, None] * omega[None, :])[:, None, :]
    phi[:, :, n:] = (px[:, None] * omega[None, :])[None, :, :]
    return phi


def relative_phase(cfg, p, q):
    """``phase(q) - phase(p)`` per channel pair."""
    return phase_angles(cfg, *q) - phase_angles(cfg, *p)


def _check(g, cfg):
    g = check_tensor3(g)
    if g.shape != (cfg.grid_h, cfg.grid_w, cfg.channels):
        raise ShapeError(
            f"tensor shape {g.shape} does not match RoPE grid "
            f"{(cfg.grid_h, cfg.grid_w, cfg.channels)}"
        )
    return g


def _rotate(g, phi):
    cos = np.cos(phi).astype(g.dtype)
    sin = np.sin(phi).astype(g.dtype)
    x = g[..., 0::2]
    y = g[..., 1::2]
    out = np.empty_like(g)
    out[..., 0::2] = cos * x - sin * y
    out[..., 1::2] = sin * x + cos * y
    return out


def apply_rope(g, cfg):
    """Rotate each channel pair of ``g`` by its position's phase."""
    g = _check(g, cfg)
    return _rotate(g, phase_grid(cfg))


def apply_rope_backward(grad_out, cfg):
    """Gradient of :func:`apply_rope`: rotation by the negated phase."""
    grad_out = _check(grad_out, cfg)
    return _rotate(grad_out, -phase_grid(cfg))
