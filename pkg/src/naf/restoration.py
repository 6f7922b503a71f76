"""Image restoration with same-resolution neighborhood attention.

With scale 1 the pooled keys equal the queries, so the upsampler becomes an
edge-aware filter over a ``k x k`` window. Values are the noisy RGB image
itself and the guidance is computed from it as well.

Noisy images are never clipped; the metrics clip both inputs to
``[0, peak]`` before comparing.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .attention import AttnConfig, naf_forward, naf_value_and_grad
from .errors import ConfigError, ShapeError
from .rope import RopeConfig
from .tensor import check_tensor3
from .training import PngDirectory, Stage, TrainConfig, run_training

NOISE_KINDS = ("gaussian", "channel_salt_pepper")
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


@dataclass(frozen=True)
class NoiseSpec:
    """Noise model. ``level`` is sigma (gaussian) or the corruption probability.

    When ``level_range`` is given the level is drawn uniformly from it, using
    the same seeded generator as the noise.
    """

    kind: str = "gaussian"
    level: float = 0.1
    level_range: tuple | None = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise ConfigError(f"unknown noise kind {self.kind!r}")
        levels = [self.level] + (list(self.level_range) if self.level_range is not None else [])
        if any(v < 0 for v in levels):
            raise ConfigError("noise level must be non-negative")
        if self.kind == "channel_salt_pepper" and any(v > 1 for v in levels):
            raise ConfigError("salt-and-pepper probability must lie in [0, 1]")
        if self.level_range is not None:
            lo, hi = self.level_range
            if lo > hi:
                raise ConfigError(f"level_range {self.level_range} has lo > hi")

    def _draw(self):
        rng = np.random.default_rng(self.seed)
        if self.level_range is None:
            return rng, float(self.level)
        return rng, float(rng.uniform(*self.level_range))


def add_gaussian_noise(img, spec):
    """``img + sigma * z`` with seeded standard normal ``z``; not clipped."""
    img = check_tensor3(img, "image")
    if spec.kind != "gaussian":
        raise ConfigError(f"expected gaussian noise spec, got {spec.kind!r}")
    rng, sigma = spec._draw()
    z = rng.standard_normal(img.shape)
    return (img + sigma * z).astype(img.dtype)


def add_channel_salt_pepper(img, spec):
    """Replace each (pixel, channel) value with 0 or 1 with probability ``p``."""
    img = check_tensor3(img, "image")
    if spec.kind != "channel_salt_pepper":
        raise ConfigError(f"expected channel_salt_pepper noise spec, got {spec.kind!r}")
    rng, p = spec._draw()
    hit = rng.random(img.shape) < p
    salt = rng.random(img.shape) < 0.5
    return np.where(hit, salt.astype(img.dtype), img)


def corrupt(img, spec):
    if spec.kind == "gaussian":
        return add_gaussian_noise(img, spec)
    return add_channel_salt_pepper(img, spec)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def _pair(a, b):
    a = check_tensor3(a, "a")
    b = check_tensor3(b, "b")
    if a.shape != b.shape:
        raise ShapeError(f"shapes {a.shape} and {b.shape} differ")
    return a, b


def psnr(a, b, peak=1.0):
    """Peak signal-to-noise ratio in dB; ``inf`` for identical inputs."""
    a, b = _pair(a, b)
    a = np.clip(a.astype(np.float64), 0.0, peak)
    b = np.clip(b.astype(np.float64), 0.0, peak)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(peak * peak / mse))


def _window_matrix(n):
    """Valid-mode Gaussian filtering along one axis as an ``(n - 10, n)`` matrix."""
    x = np.arange(SSIM_WINDOW) - SSIM_WINDOW // 2
    g = np.exp(-(x * x) / (2.0 * SSIM_SIGMA**2))
    g /= g.sum()
    m = np.zeros((n - SSIM_WINDOW + 1, n))
    for i in range(m.shape[0]):
        m[i, i : i + SSIM_WINDOW] = g
    return m


def _ssim_terms(a, b, peak):
    H, W, _ = a.shape
    if min(H, W) < SSIM_WINDOW:
        raise ShapeError(f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {(H, W)}")
    my, mx = _window_matrix(H), _window_matrix(W)
    filt = lambda x: np.einsum("ih,hwc,jw->ijc", my, x, mx, optimize=True)  # noqa: E731
    c1, c2 = (0.01 * peak) ** 2, (0.03 * peak) ** 2
    mu_a, mu_b = filt(a), filt(b)
    eaa, ebb, eab = filt(a * a), filt(b * b), filt(a * b)
    n1 = 2 * mu_a * mu_b + c1
    n2 = 2 * (eab - mu_a * mu_b) + c2
    d1 = mu_a**2 + mu_b**2 + c1
    d2 = (eaa - mu_a**2) + (ebb - mu_b**2) + c2
    smap = (n1 * n2) / (d1 * d2)
    return smap, (my, mx, mu_a, mu_b, n1, n2, d1, d2)


def ssim(a, b, peak=1.0):
    """Mean local SSIM (11x11 Gaussian window, sigma 1.5), averaged over channels."""
    a, b = _pair(a, b)
    a = np.clip(a.astype(np.float64), 0.0, peak)
    b = np.clip(b.astype(np.float64), 0.0, peak)
    smap, _ = _ssim_terms(a, b, peak)
    return float(smap.mean())


def ssim_value_and_grad(a, b, peak=1.0):
    """Unclipped SSIM and its gradient with respect to ``a``."""
    a, b = _pair(a, b)
    a64, b64 = a.astype(np.float64), b.astype(np.float64)
    smap, (my, mx, mu_a, mu_b, n1, n2, d1, d2) = _ssim_terms(a64, b64, peak)
    g = 1.0 / smap.size
    # partials of the local SSIM in terms of mu_a, E[a^2] and E[ab]
    g_mu = g * ((2 * mu_b * n2 - 2 * mu_b * n1) / (d1 * d2) - smap * (2 * mu_a / d1 - 2 * mu_a / d2))
    g_eaa = g * (-smap / d2)
    g_eab = g * (2 * n1 / (d1 * d2))
    back = lambda x: np.einsum("ih,ijc,jw->hwc", my, x, mx, optimize=True)  # noqa: E731
    grad = back(g_mu) + 2 * a64 * back(g_eaa) + b64 * back(g_eab)
    return float(smap.mean()), grad.astype(a.dtype)


def restoration_loss(pred, target, weights=(1.0, 5.0, 0.2)):
    """``w1 * L1 + w2 * L2 + w3 * (1 - SSIM)`` with its gradient.

    L1 and L2 are means over all entries; the L1 subgradient at 0 is 0.
    """
    pred, target = _pair(pred, target)
    w1, w2, w3 = weights
    diff = pred.astype(np.float64) - target
    n = diff.size
    s, gs = ssim_value_and_grad(pred, target)
    loss = w1 * np.abs(diff).mean() + w2 * (diff * diff).mean() + w3 * (1.0 - s)
    grad = w1 * np.sign(diff) / n + w2 * 2.0 * diff / n - w3 * gs
    return float(loss), grad.astype(pred.dtype)


# ---------------------------------------------------------------------------
# Denoising
# ---------------------------------------------------------------------------


def denoise_config(kernel=15, positional_mode="rope", sigma=1.0):
    return AttnConfig(1, kernel, positional_mode, "avgpool", sigma=sigma)


def denoise_forward(noisy, enc, rope, cfg):
    """Filter ``noisy`` with attention weights computed from itself."""
    noisy = check_tensor3(noisy, "noisy")
    if cfg.scale != 1:
        raise ConfigError(f"denoising runs at scale 1, got {cfg.scale}")
    return naf_forward(noisy, noisy, enc, rope, cfg)


def denoiser_train_config(**overrides):
    """Desk-scale denoising defaults: 1000 iterations of 64x64 crops, k = 7."""
    base = dict(stages=[Stage(1000, 64, (64,))], kernel=7, depth=1, channels=32)
    base.update(overrides)
    return TrainConfig(**base)


def sample_noise(noise, iteration, batch_index):
    """Per-sample noise spec with a seed derived from the iteration."""
    seed = int(np.random.SeedSequence([noise.seed, iteration, batch_index]).generate_state(1)[0])
    return replace(noise, seed=seed)


def train_denoiser(config, noise, source, log=None, checkpoint_dir=None, init=None):
    """Train the guidance encoder for denoising; returns a ``TrainResult``."""
    if isinstance(source, str):
        source = PngDirectory(source)

    def step(params, sigma, stage, si, it, b):
        clean = source.sample(it * config.batch_size + b, stage.target_size)
        noisy = corrupt(clean, sample_noise(noise, it, b))
        cfg = config.attn(1)
        cfg.sigma = sigma
        rope = RopeConfig(config.channels, clean.shape[0], clean.shape[1], config.rope_base)
        _, loss, (_, gp, gs) = naf_value_and_grad(
            noisy, noisy, params, rope, cfg, lambda p: restoration_loss(p, clean, config.loss_weights)
        )
        return loss, gp, gs

    extra = {"noise": {"kind": noise.kind, "level": noise.level,
                       "level_range": list(noise.level_range) if noise.level_range else None, "seed": noise.seed}}
    return run_training(config, source, step, init, log, checkpoint_dir, extra)


def denoise_with(params, noisy, config, sigma=None):
    cfg = config.attn(1)
    if sigma is not None:
        cfg.sigma = sigma
    rope = RopeConfig(config.channels, noisy.shape[0], noisy.shape[1], config.rope_base)
    return denoise_forward(noisy, params, rope, cfg)


def evaluate_denoiser(params, config, noise, source, n_images=16, size=64, start_index=10**6, sigma=None):
    """Mean PSNR/SSIM of noisy and denoised held-out images against the clean ones."""
    rows = []
    for i in range(n_images):
        clean = source.sample(start_index + i, size)
        noisy = corrupt(clean, sample_noise(noise, start_index + i, 0))
        out = denoise_with(params, noisy, config, sigma)
        rows.append((psnr(noisy, clean), psnr(out, clean), ssim(noisy, clean), ssim(out, clean)))
    m = np.mean(rows, axis=0)
    return {"psnr_noisy": m[0], "psnr_denoised": m[1], "ssim_noisy": m[2], "ssim_denoised": m[3]}
