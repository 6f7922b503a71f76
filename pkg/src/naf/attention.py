"""Cross-scale neighborhood attention.

Each high-resolution (HR) pixel ``p`` queries the ``k x k`` window of
low-resolution (LR) cells centered on its anchor cell ``p // s``. Queries are
the (RoPE-encoded) guidance at ``p``; keys are the same guidance pooled onto
the LR grid; values are the LR features. Windows are truncated at the border
and the softmax is renormalized over the in-bounds cells.

Internally HR maps are handled in a "blocked" layout: an ``(H, W, C)`` map
with ``H = s*h`` and ``W = s*w`` becomes ``(h*w, s*s, C)`` so that all pixels
sharing an anchor cell sit in one row and can be batched against that
anchor's ``k*k`` neighbor keys with one matmul.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .encoder import encode, encode_backward
from .errors import BoundsError, ConfigError, ShapeError
from .rope import RopeConfig, apply_rope, apply_rope_backward, normalized_coord
from .tensor import (
    block_avg_pool,
    block_avg_pool_backward,
    block_max_pool,
    block_max_pool_backward,
    check_tensor3,
    resize,
    resize_backward,
)

POSITIONAL_MODES = ("rope", "gaussian", "manhattan", "none")
KEY_MODES = ("avgpool", "maxpool", "bilinear")

# Bound on the number of logits materialized at once by dense_reference.
_DENSE_CHUNK = 1 << 22


@dataclass
class AttnConfig:
    scale: int = 2
    kernel: int = 9
    positional_mode: str = "rope"
    key_mode: str = "avgpool"
    logit_scale: float | None = None  # None -> 1 / sqrt(C)
    sigma: float = 1.0

    def __post_init__(self):
        if int(self.scale) != self.scale or self.scale < 1:
            raise ConfigError(f"scale must be an integer >= 1, got {self.scale}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigError(f"kernel must be odd and >= 1, got {self.kernel}")
        if self.positional_mode not in POSITIONAL_MODES:
            raise ConfigError(f"positional_mode must be one of {POSITIONAL_MODES}")
        if self.key_mode not in KEY_MODES:
            raise ConfigError(f"key_mode must be one of {KEY_MODES}")
        if self.logit_scale is not None and not self.logit_scale > 0:
            raise ConfigError("logit_scale must be positive")
        if self.uses_sigma and not self.sigma > 0:
            raise ConfigError("sigma must be positive")
        self.scale = int(self.scale)

    @property
    def uses_sigma(self):
        return self.positional_mode in ("gaussian", "manhattan")

    def scale_for(self, channels):
        if self.logit_scale is not None:
            return float(self.logit_scale)
        return 1.0 / math.sqrt(channels)


@dataclass(frozen=True)
class NeighborIndex:
    anchor: tuple
    cells: tuple


def neighborhood(p, s, k, lr_h, lr_w):
    """In-bounds LR cells attended by HR pixel ``p``, in row-major order."""
    row, col = p
    if not (0 <= row < s * lr_h and 0 <= col < s * lr_w):
        raise BoundsError(f"HR position {p} outside grid {(s * lr_h, s * lr_w)}")
    r = k // 2
    a, b = row // s, col // s
    cells = tuple(
        (i, j)
        for i in range(max(0, a - r), min(lr_h, a + r + 1))
        for j in range(max(0, b - r), min(lr_w, b + r + 1))
    )
    return NeighborIndex((a, b), cells)


# ---------------------------------------------------------------------------
# Keys
# ---------------------------------------------------------------------------


def compute_keys(guidance, s, mode="avgpool"):
    """Pool (RoPE-encoded) HR guidance onto the LR grid."""
    guidance = check_tensor3(guidance, "guidance")
    h, w, _ = guidance.shape
    if h % s or w % s:
        raise ShapeError(f"guidance dims {(h, w)} not divisible by scale {s}")
    if mode == "avgpool":
        return block_avg_pool(guidance, s)
    if mode == "maxpool":
        return block_max_pool(guidance, s)
    if mode == "bilinear":
        return resize(guidance, h // s, w // s, "bilinear")
    raise ConfigError(f"key_mode must be one of {KEY_MODES}, got {mode!r}")


def compute_keys_backward(grad_keys, guidance, s, mode="avgpool"):
    if mode == "avgpool":
        return block_avg_pool_backward(grad_keys, s)
    if mode == "maxpool":
        return block_max_pool_backward(guidance, grad_keys, s)
    if mode == "bilinear":
        if s == 1:
            return grad_keys
        return resize_backward(grad_keys, guidance.shape[0], guidance.shape[1], "bilinear")
    raise ConfigError(f"key_mode must be one of {KEY_MODES}, got {mode!r}")


# ---------------------------------------------------------------------------
# Logits
# ---------------------------------------------------------------------------


def _position_penalty(dy, dx, mode):
    if mode == "gaussian":
        return dy * dy + dx * dx
    return np.abs(dy) + np.abs(dx)


def attention_logits(query, key, p, q_cell, cfg, hr_shape=None):
    """Logit between the query at HR pixel ``p`` and the key of LR cell ``q_cell``.

    In ``rope`` mode ``query``/``key`` are RoPE-encoded vectors. In the other
    modes they are raw guidance vectors; ``gaussian`` and ``manhattan`` add
    ``-dist / (2 sigma^2)`` between ``p`` and the HR center of ``q_cell`` in
    normalized coordinates, which needs ``hr_shape = (H, W)``.
    """
    query = np.asarray(query, dtype=np.float64)
    key = np.asarray(key, dtype=np.float64)
    if query.shape != key.shape or query.ndim != 1:
        raise ShapeError("query and key must be vectors of equal length")
    logit = cfg.scale_for(query.size) * float(query @ key)
    if cfg.uses_sigma:
        if hr_shape is None:
            raise ConfigError(f"{cfg.positional_mode} mode needs the HR grid shape")
        H, W = hr_shape
        s = cfg.scale
        dy = normalized_coord(q_cell[0] * s + (s - 1) / 2, H) - normalized_coord(p[0], H)
        dx = normalized_coord(q_cell[1] * s + (s - 1) / 2, W) - normalized_coord(p[1], W)
        logit -= float(_position_penalty(dy, dx, cfg.positional_mode)) / (2.0 * cfg.sigma**2)
    return logit


def _distance_table(s, k, H, W, mode):
    """Positional distance for (pixel-in-block, window offset) pairs: (s*s, k*k).

    The distance between pixel ``(a*s+i, b*s+j)`` and the HR center of cell
    ``(a+di, b+dj)`` does not depend on the anchor ``(a, b)``.
    """
    r = k // 2
    off = np.arange(-r, r + 1)
    sub = np.arange(s)
    uy = 0.0 if H == 1 else 2.0 / (H - 1)
    ux = 0.0 if W == 1 else 2.0 / (W - 1)
    dy = uy * (off[None, :] * s + (s - 1) / 2 - sub[:, None])  # (s, k)
    dx = ux * (off[None, :] * s + (s - 1) / 2 - sub[:, None])
    d = _position_penalty(dy[:, None, :, None], dx[None, :, None, :], mode)  # (s, s, k, k)
    return d.reshape(s * s, k * k)


# ---------------------------------------------------------------------------
# Layout helpers
# ---------------------------------------------------------------------------


def _to_blocks(x, s):
    H, W, C = x.shape
    h, w = H // s, W // s
    return x.reshape(h, s, w, s, C).transpose(0, 2, 1, 3, 4).reshape(h * w, s * s, C)


def _from_blocks(x, s, h, w):
    C = x.shape[-1]
    return x.reshape(h, w, s, s, C).transpose(0, 2, 1, 3, 4).reshape(h * s, w * s, C)


def _gather_windows(x, k):
    """(h, w, C) -> (h*w, k*k, C) neighbor stacks, zero outside the grid."""
    h, w, C = x.shape
    r = k // 2
    xp = np.pad(x, ((r, r), (r, r), (0, 0)))
    view = sliding_window_view(xp, (k, k), axis=(0, 1))  # (h, w, C, k, k)
    return view.transpose(0, 1, 3, 4, 2).reshape(h * w, k * k, C)


def _scatter_windows(g, h, w, k):
    """Adjoint of :func:`_gather_windows`; accumulates in row-major offset order."""
    C = g.shape[-1]
    r = k // 2
    g = g.reshape(h, w, k, k, C)
    out = np.zeros((h + 2 * r, w + 2 * r, C), dtype=g.dtype)
    for i in range(k):
        for j in range(k):
            out[i : i + h, j : j + w] += g[:, :, i, j, :]
    return out[r : r + h, r : r + w]


def _window_valid(h, w, k):
    r = k // 2
    off = np.arange(-r, r + 1)
    vr = (np.arange(h)[:, None] + off[None, :] >= 0) & (np.arange(h)[:, None] + off[None, :] < h)
    vc = (np.arange(w)[:, None] + off[None, :] >= 0) & (np.arange(w)[:, None] + off[None, :] < w)
    return (vr[:, None, :, None] & vc[None, :, None, :]).reshape(h * w, k * k)


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------


def _validate(f_lr, image, enc, rope, cfg):
    f_lr = check_tensor3(f_lr, "f_lr")
    image = check_tensor3(image, "image")
    h, w, _ = f_lr.shape
    H, W, _ = image.shape
    if H % h or W % w:
        raise ConfigError(f"image dims {(H, W)} are not an integer multiple of feature dims {(h, w)}")
    if (H // h, W // w) != (cfg.scale, cfg.scale):
        raise ShapeError(f"image dims {(H, W)} != scale {cfg.scale} x feature dims {(h, w)}")
    if rope is None:
        rope = RopeConfig(enc.channels, H, W)
    if rope.channels != enc.channels:
        raise ShapeError(f"RoPE channels {rope.channels} != guidance channels {enc.channels}")
    if (rope.grid_h, rope.grid_w) != (H, W):
        raise ShapeError(f"RoPE grid {(rope.grid_h, rope.grid_w)} != image dims {(H, W)}")
    return f_lr, image, rope


def _queries(image, enc, rope, cfg):
    g = encode(image, enc)
    q = apply_rope(g, rope) if cfg.positional_mode == "rope" else g
    return g, q


def _attend(q_hr, keys, values, cfg):
    """Neighborhood softmax attention. Returns (output_blocks, cache)."""
    s, k = cfg.scale, cfg.kernel
    H, W, C = q_hr.shape
    h, w = H // s, W // s
    qb = _to_blocks(q_hr, s)  # (N, s*s, C)
    knb = _gather_windows(keys, k)  # (N, k*k, C)
    vnb = _gather_windows(values, k)  # (N, k*k, d)
    valid = _window_valid(h, w, k)
    logits = cfg.scale_for(C) * (qb @ knb.transpose(0, 2, 1))
    dist = None
    if cfg.uses_sigma:
        dist = _distance_table(s, k, H, W, cfg.positional_mode).astype(q_hr.dtype)
        logits = logits - dist / (2.0 * cfg.sigma**2)
    logits = np.where(valid[:, None, :], logits, -np.inf)
    logits = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(logits)
    weights = e / e.sum(axis=-1, keepdims=True)
    # Aggregate offsets from the anchor cell's value (always in the window) so
    # that constant features come back exactly despite weight rounding.
    anchor = vnb[:, (k * k) // 2 : (k * k) // 2 + 1, :]
    out = anchor + weights @ (vnb - anchor)
    cache = dict(qb=qb, knb=knb, vnb=vnb, weights=weights, dist=dist, shape=(h, w))
    return out, cache


def naf_forward(f_lr, image, enc, rope, cfg):
    """Upsample ``f_lr`` by ``cfg.scale`` guided by ``image``.

    Returns an ``(s*h, s*w, d)`` map whose every pixel is a convex
    combination of the LR features in its neighborhood.
    """
    f_lr, image, rope = _validate(f_lr, image, enc, rope, cfg)
    return _forward_state(f_lr, image, enc, rope, cfg)[0]


def attention_weights(image, enc, rope, cfg):
    """Softmax weights as an ``(H, W, k, k)`` grid; out-of-bounds cells are 0."""
    image = check_tensor3(image, "image")
    H, W, _ = image.shape
    s, k = cfg.scale, cfg.kernel
    dummy = np.zeros((H // s, W // s, 1), dtype=image.dtype)
    _, image, rope = _validate(dummy, image, enc, rope, cfg)
    _, q = _queries(image, enc, rope, cfg)
    keys = compute_keys(q, s, cfg.key_mode)
    _, c = _attend(q, keys, dummy.astype(q.dtype), cfg)
    wts = _from_blocks(c["weights"], s, *c["shape"])
    return wts.reshape(H, W, k, k)


def _forward_state(f_lr, image, enc, rope, cfg):
    g, q = _queries(image, enc, rope, cfg)
    keys = compute_keys(q, cfg.scale, cfg.key_mode)
    out, c = _attend(q, keys, f_lr.astype(q.dtype, copy=False), cfg)
    c.update(q=q, image=image, enc=enc, rope=rope, cfg=cfg, f_dtype=f_lr.dtype)
    return _from_blocks(out, cfg.scale, *c["shape"]), c


def _backward_state(c, grad_out):
    cfg = c["cfg"]
    s, k = cfg.scale, cfg.kernel
    q = c["q"]
    h, w = c["shape"]
    H, W, C = q.shape
    d = c["vnb"].shape[-1]
    if grad_out.shape != (H, W, d):
        raise ShapeError(f"grad_out shape {grad_out.shape} != {(H, W, d)}")
    wts = c["weights"]
    gob = _to_blocks(grad_out.astype(q.dtype, copy=False), s)  # (N, s*s, d)

    grad_w = gob @ c["vnb"].transpose(0, 2, 1)  # (N, s*s, k*k)
    grad_vnb = wts.transpose(0, 2, 1) @ gob  # (N, k*k, d)
    grad_f = _scatter_windows(grad_vnb, h, w, k)

    grad_logits = wts * (grad_w - (wts * grad_w).sum(axis=-1, keepdims=True))
    grad_sigma = 0.0
    if cfg.uses_sigma:
        grad_sigma = float((grad_logits * c["dist"]).sum() / cfg.sigma**3)

    scale = cfg.scale_for(C)
    grad_qb = scale * (grad_logits @ c["knb"])  # (N, s*s, C)
    grad_knb = scale * (grad_logits.transpose(0, 2, 1) @ c["qb"])  # (N, k*k, C)
    grad_keys = _scatter_windows(grad_knb, h, w, k)
    grad_q = _from_blocks(grad_qb, s, h, w) + compute_keys_backward(grad_keys, q, s, cfg.key_mode)
    grad_g = apply_rope_backward(grad_q, c["rope"]) if cfg.positional_mode == "rope" else grad_q
    grad_enc, _ = encode_backward(c["image"], c["enc"], grad_g)
    return grad_f.astype(c["f_dtype"], copy=False), grad_enc, grad_sigma


def naf_backward(f_lr, image, enc, rope, cfg, grad_out):
    """Reverse-mode gradients of :func:`naf_forward`.

    Returns ``(grad_f_lr, grad_enc, grad_sigma)``; ``grad_sigma`` is 0.0 for
    modes that do not use sigma.
    """
    f_lr, image, rope = _validate(f_lr, image, enc, rope, cfg)
    _, c = _forward_state(f_lr, image, enc, rope, cfg)
    return _backward_state(c, grad_out)


def naf_value_and_grad(f_lr, image, enc, rope, cfg, loss_fn):
    """Forward, ``loss_fn(pred) -> (loss, grad_pred)``, then backward.

    Returns ``(pred, loss, (grad_f_lr, grad_enc, grad_sigma))``.
    """
    f_lr, image, rope = _validate(f_lr, image, enc, rope, cfg)
    pred, c = _forward_state(f_lr, image, enc, rope, cfg)
    loss, grad_pred = loss_fn(pred)
    return pred, loss, _backward_state(c, grad_pred)


# ---------------------------------------------------------------------------
# Dense oracle
# ---------------------------------------------------------------------------


def dense_reference(f_lr, image, enc, rope, cfg):
    """Full HR x LR attention with logits masked to -inf outside each window.

    Semantically identical to :func:`naf_forward`; intended for small grids.
    """
    f_lr, image, rope = _validate(f_lr, image, enc, rope, cfg)
    s, r = cfg.scale, cfg.kernel // 2
    _, q = _queries(image, enc, rope, cfg)
    keys = compute_keys(q, s, cfg.key_mode)
    H, W, C = q.shape
    h, w, d = f_lr.shape
    Q = q.reshape(H * W, C)
    K = keys.reshape(h * w, C)
    V = f_lr.reshape(h * w, d).astype(q.dtype, copy=False)
    cell_r = np.arange(h * w) // w
    cell_c = np.arange(h * w) % w
    center_y = normalized_coord(cell_r * s + (s - 1) / 2, H)
    center_x = normalized_coord(cell_c * s + (s - 1) / 2, W)
    scale = cfg.scale_for(C)

    out = np.empty((H * W, d), dtype=q.dtype)
    chunk = max(1, _DENSE_CHUNK // (h * w))
    for start in range(0, H * W, chunk):
        idx = np.arange(start, min(H * W, start + chunk))
        pr, pc = idx // W, idx % W
        logits = scale * (Q[idx] @ K.T)
        if cfg.uses_sigma:
            dy = center_y[None, :] - normalized_coord(pr, H)[:, None]
            dx = center_x[None, :] - normalized_coord(pc, W)[:, None]
            logits = logits - _position_penalty(dy, dx, cfg.positional_mode) / (2.0 * cfg.sigma**2)
        mask = (np.abs(cell_r[None, :] - (pr // s)[:, None]) <= r) & (
            np.abs(cell_c[None, :] - (pc // s)[:, None]) <= r
        )
        logits = np.where(mask, logits, -np.inf)
        logits -= logits.max(axis=1, keepdims=True)
        e = np.exp(logits)
        out[idx] = (e / e.sum(axis=1, keepdims=True)) @ V
    return out.reshape(H, W, d)
