"""Self-supervised training of the guidance encoder at desk scale.

A training pair is built from one HR image: target features come from the
teacher applied to the image itself, input features from the teacher applied
to a bilinearly downsampled copy. The upsampler is guided by the image
averaged onto the target feature grid, and is trained with an l2 loss.
"""

from __future__ import annotations

import csv
import glob
import io
import json
import os
import tempfile
from dataclasses import asdict, dataclass, field

import numpy as np

from .attention import AttnConfig, naf_backward, naf_forward, naf_value_and_grad
from .encoder import EncoderParams, encode, encode_backward, init_encoder, save_checkpoint
from .errors import ConfigError, ShapeError, TrainingDiverged
from .rope import RopeConfig, apply_rope, apply_rope_backward
from .tensor import block_avg_pool, check_tensor3, load_png, resize

# ---------------------------------------------------------------------------
# Teacher and pairs
# ---------------------------------------------------------------------------


@dataclass
class SyntheticTeacher:
    """Fixed random patch projection standing in for a vision backbone.

    Every output channel is a random mix of the three colour channels,
    averaged over the patch. Features are therefore smooth functions of the
    image, and the detail lost by downsampling can be recovered from colour
    edges in the guidance.
    """

    patch: int = 8
    out_dim: int = 16
    seed: int = 0
    weights: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        rng = np.random.default_rng([self.seed, self.patch, self.out_dim])
        mix = rng.standard_normal((3, self.out_dim))
        p = self.patch
        w = np.broadcast_to(mix / (p * p), (p, p, 3, self.out_dim))
        self.weights = np.ascontiguousarray(w, dtype=np.float32)


def teacher_features(img, teacher):
    """Non-overlapping patch projection: (H/patch, W/patch, d)."""
    img = check_tensor3(img, "image")
    H, W, _ = img.shape
    p = teacher.patch
    if H % p or W % p:
        raise ShapeError(f"image dims {(H, W)} not divisible by patch {p}")
    patches = img.reshape(H // p, p, W // p, p, 3).transpose(0, 2, 1, 3, 4).reshape(H // p, W // p, -1)
    return patches @ teacher.weights.reshape(-1, teacher.out_dim).astype(img.dtype)


def make_pair(img_hr, teacher):
    """``(img_hr, f_lr, f_hr_target)`` for x2 upsampling."""
    img_hr = check_tensor3(img_hr, "image")
    H, W, _ = img_hr.shape
    if H % (2 * teacher.patch) or W % (2 * teacher.patch):
        raise ShapeError(f"image dims {(H, W)} not divisible by 2 x patch {teacher.patch}")
    f_hr = teacher_features(img_hr, teacher)
    f_lr = teacher_features(resize(img_hr, H // 2, W // 2, "bilinear"), teacher)
    return img_hr, f_lr, f_hr


def guidance_image(img_hr, out_h, out_w):
    """The image averaged onto the ``(out_h, out_w)`` output grid."""
    H, W, _ = img_hr.shape
    if H % out_h or W % out_w or H // out_h != W // out_w:
        raise ShapeError(f"image {(H, W)} cannot be block-pooled to {(out_h, out_w)}")
    return block_avg_pool(img_hr, H // out_h)


def l2_loss(pred, target):
    """Mean squared error and its gradient with respect to ``pred``."""
    if pred.shape != target.shape:
        raise ShapeError(f"pred {pred.shape} and target {target.shape} differ")
    diff = pred - target
    return float(np.mean(diff * diff)), (2.0 / diff.size) * diff


# ---------------------------------------------------------------------------
# Image sources
# ---------------------------------------------------------------------------


def synthetic_image(seed, index, size):
    """A smooth random RGB field with a few sharp-edged regions, in [0, 1].

    Deterministic in ``(seed, index, size)``.
    """
    rng = np.random.default_rng([seed, index, size])
    y, x = np.mgrid[0:size, 0:size] / float(size)
    img = np.empty((size, size, 3))
    base = rng.uniform(0.2, 0.8, 3)
    for ch in range(3):
        field_ = np.full((size, size), base[ch])
        for _ in range(3):
            fy, fx = rng.uniform(-2.5, 2.5, 2)
            field_ += rng.uniform(0.03, 0.12) * np.sin(2 * np.pi * (fy * y + fx * x) + rng.uniform(0, 2 * np.pi))
        img[:, :, ch] = field_
    for _ in range(rng.integers(1, 4)):
        color = rng.uniform(0, 1, 3)
        if rng.uniform() < 0.5:
            cy, cx = rng.uniform(0.15, 0.85, 2)
            rad = rng.uniform(0.1, 0.35)
            mask = (y - cy) ** 2 + (x - cx) ** 2 < rad**2
        else:
            theta = rng.uniform(0, 2 * np.pi)
            off = rng.uniform(-0.3, 0.3)
            mask = np.cos(theta) * (x - 0.5) + np.sin(theta) * (y - 0.5) > off
        shade = 1.0 + 0.15 * (y - 0.5) * rng.uniform(-1, 1)
        img[mask] = np.clip(color[None, :] * shade[mask][:, None], 0, 1)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


class SyntheticImages:
    """Seeded generator of smooth random fields."""

    def __init__(self, seed=0):
        self.seed = seed

    def sample(self, index, size):
        return synthetic_image(self.seed, index, size)

    def describe(self):
        return {"kind": "synthetic", "seed": self.seed}


class PngDirectory:
    """PNG files in lexicographic order, cycled; center-cropped to a square
    and resized (bicubic) to the requested size."""

    def __init__(self, path):
        self.path = path
        self.files = sorted(glob.glob(os.path.join(path, "*.png")))
        if not self.files:
            raise ConfigError(f"no PNG images found in {path}")

    def sample(self, index, size):
        img = load_png(self.files[index % len(self.files)])
        H, W, _ = img.shape
        m = min(H, W)
        top, left = (H - m) // 2, (W - m) // 2
        img = img[top : top + m, left : left + m]
        if m != size:
            img = np.clip(resize(img, size, size, "bicubic"), 0, 1)
        return img

    def describe(self):
        return {"kind": "png_dir", "path": self.path}


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


class Adam:
    """Adam over a fixed list of arrays updated in place."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p, dtype=np.float64) for p in params]
        self.v = [np.zeros_like(p, dtype=np.float64) for p in params]
        self.t = 0

    def step(self, grads):
        if self.lr == 0:
            return
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p -= update.astype(p.dtype)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class Stage:
    """One schedule stage: target image size, candidate input image sizes."""

    iterations: int
    target_size: int
    input_sizes: tuple

    def __post_init__(self):
        self.input_sizes = tuple(int(s) for s in self.input_sizes)


@dataclass
class TrainConfig:
    stages: list = field(
        default_factory=lambda: [Stage(500, 64, (32,)), Stage(50, 128, (32, 64))]
    )
    batch_size: int = 1
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    # model
    depth: int = 1
    channels: int = 32
    kernel: int = 3
    rope_base: float = 100.0
    positional_mode: str = "rope"
    key_mode: str = "avgpool"
    sigma: float = 1.0
    activation: str = "relu"
    # restoration loss weights (L1, L2, SSIM)
    loss_weights: tuple = (1.0, 5.0, 0.2)

    def __post_init__(self):
        self.stages = [s if isinstance(s, Stage) else Stage(**s) for s in self.stages]
        if not self.stages:
            raise ConfigError("at least one stage is required")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.lr < 0:
            raise ConfigError("learning rate must be non-negative")
        self.loss_weights = tuple(self.loss_weights)

    def to_dict(self):
        d = asdict(self)
        d["stages"] = [asdict(s) for s in self.stages]
        return d

    def attn(self, scale):
        return AttnConfig(scale, self.kernel, self.positional_mode, self.key_mode, sigma=self.sigma)


@dataclass
class TrainResult:
    params: EncoderParams
    sigma: float
    losses: list
    checkpoint: str | None = None


class _CsvLog:
    def __init__(self, log):
        self._own = isinstance(log, (str, os.PathLike))
        self._f = open(log, "w", newline="") if self._own else log
        self._w = csv.writer(self._f) if self._f is not None else None
        if self._w:
            self._w.writerow(["iteration", "stage", "loss"])

    def write(self, it, stage, loss):
        if self._w:
            self._w.writerow([it, stage, repr(loss)])

    def close(self):
        if self._own:
            self._f.close()


def _dump_state(checkpoint_dir, params, sigma, iteration, cfg, extra):
    path = os.path.join(checkpoint_dir, "diverged") if checkpoint_dir else tempfile.mkdtemp(prefix="naf-diverged-")
    save_checkpoint(path, params, cfg.rope_base, cfg.kernel, {"sigma": sigma, "iteration": iteration, **extra})
    return path


def run_training(config, source, step_fn, init=None, log=None, checkpoint_dir=None, extra_manifest=None):
    """Generic loop shared by feature upsampling and denoising.

    ``step_fn(params, sigma, stage, stage_index, iteration, batch_index)``
    returns ``(loss, grad_params, grad_sigma)`` for one batch element.
    """
    params = init if init is not None else init_encoder(
        config.depth, config.channels, config.seed, config.activation
    )
    params = params.copy()
    tensors = params.tensors()
    sigma = np.array([config.sigma], dtype=np.float64)
    opt_params = tensors + ([sigma] if config.positional_mode in ("gaussian", "manhattan") else [])
    opt = Adam(opt_params, config.lr, (config.beta1, config.beta2), config.eps)
    logger = _CsvLog(log)
    losses = []
    it = 0
    try:
        for si, stage in enumerate(config.stages):
            for _ in range(stage.iterations):
                total = 0.0
                acc = [np.zeros(t.shape, dtype=np.float64) for t in opt_params]
                for b in range(config.batch_size):
                    loss, gp, gs = step_fn(params, float(sigma[0]), stage, si, it, b)
                    total += loss
                    for a, g in zip(acc, gp.tensors()):
                        a += g
                    if len(acc) > len(tensors):
                        acc[-1] += gs
                loss = total / config.batch_size
                if not np.isfinite(loss):
                    path = _dump_state(checkpoint_dir, params, float(sigma[0]), it, config, extra_manifest or {})
                    raise TrainingDiverged(f"non-finite loss at iteration {it}; state dumped to {path}", it, path)
                opt.step([a / config.batch_size for a in acc])
                if len(acc) > len(tensors):
                    sigma[0] = max(sigma[0], 1e-3)
                losses.append(loss)
                logger.write(it, si, loss)
                it += 1
    finally:
        logger.close()
    ckpt = None
    if checkpoint_dir:
        extra = {"sigma": float(sigma[0]), "positional_mode": config.positional_mode,
                 "key_mode": config.key_mode, "train_config": config.to_dict()}
        extra.update(extra_manifest or {})
        save_checkpoint(checkpoint_dir, params, config.rope_base, config.kernel, extra)
        ckpt = checkpoint_dir
    return TrainResult(params, float(sigma[0]), losses, ckpt)


def upsampling_example(img, teacher, input_size):
    """``(f_lr, guide, target, scale)`` for one HR image and LR input size."""
    T = img.shape[0]
    target = teacher_features(img, teacher)
    small = img if input_size == T else resize(img, input_size, input_size, "bilinear")
    f_lr = teacher_features(small, teacher)
    th, lh = target.shape[0], f_lr.shape[0]
    if th % lh:
        raise ConfigError(f"input size {input_size} gives a non-integer scale to target {T}")
    guide = guidance_image(img, th, target.shape[1])
    return f_lr, guide, target, th // lh


def _upsampling_step(config, teacher, source):
    def step(params, sigma, stage, si, it, b):
        rng = np.random.default_rng([config.seed, it, b])
        img = source.sample(it * config.batch_size + b, stage.target_size)
        in_size = stage.input_sizes[rng.integers(len(stage.input_sizes))]
        f_lr, guide, target, s = upsampling_example(img, teacher, in_size)
        cfg = config.attn(s)
        cfg.sigma = sigma
        rope = RopeConfig(config.channels, guide.shape[0], guide.shape[1], config.rope_base)
        _, loss, (_, gp, gs) = naf_value_and_grad(f_lr, guide, params, rope, cfg, lambda p: l2_loss(p, target))
        return loss, gp, gs

    return step


def train(config, teacher, source, log=None, checkpoint_dir=None, init=None):
    """Train the upsampler; returns a :class:`TrainResult`."""
    if isinstance(source, str):
        source = PngDirectory(source)
    step = _upsampling_step(config, teacher, source)
    extra = {"teacher": {"patch": teacher.patch, "out_dim": teacher.out_dim, "seed": teacher.seed}}
    return run_training(config, source, step, init, log, checkpoint_dir, extra)


def initial_loss(config, teacher, source, window=50, init=None):
    """Smoothed loss of the untrained model.

    Averages the loss of the initial parameters over the first ``window``
    training samples of the first stage, i.e. the same inputs the first
    ``window`` iterations see, with no parameter updates in between.
    """
    if isinstance(source, str):
        source = PngDirectory(source)
    params = init if init is not None else init_encoder(config.depth, config.channels, config.seed, config.activation)
    step = _upsampling_step(config, teacher, source)
    stage = config.stages[0]
    n = min(window, stage.iterations)
    losses = [
        step(params, config.sigma, stage, 0, it, b)[0] for it in range(n) for b in range(config.batch_size)
    ]
    return float(np.mean(losses))


def upsample_with(params, f_lr, guide, config, sigma=None):
    s = guide.shape[0] // f_lr.shape[0]
    cfg = config.attn(s)
    if sigma is not None:
        cfg.sigma = sigma
    rope = RopeConfig(config.channels, guide.shape[0], guide.shape[1], config.rope_base)
    return naf_forward(f_lr, guide, params, rope, cfg)


def evaluate_upsampler(params, config, teacher, source, n_images=32, size=64, start_index=10**6, sigma=None):
    """Mean l2 to target for the trained model and for bilinear upsampling."""
    model, bilinear = [], []
    for i in range(n_images):
        img = source.sample(start_index + i, size)
        f_lr, guide, target, s = upsampling_example(img, teacher, size // 2)
        pred = upsample_with(params, f_lr, guide, config, sigma)
        base = resize(f_lr, target.shape[0], target.shape[1], "bilinear")
        model.append(l2_loss(pred, target)[0])
        bilinear.append(l2_loss(base, target)[0])
    return float(np.mean(model)), float(np.mean(bilinear))


def smoothed(losses, window=50):
    """Trailing moving average."""
    x = np.asarray(losses, dtype=np.float64)
    c = np.cumsum(np.insert(x, 0, 0.0))
    out = np.empty_like(x)
    for i in range(len(x)):
        lo = max(0, i - window + 1)
        out[i] = (c[i + 1] - c[lo]) / (i + 1 - lo)
    return out


# ---------------------------------------------------------------------------
# Gradient checks
# ---------------------------------------------------------------------------

GRAD_SCOPES = ("encoder", "attention", "rope", "full")


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst_param: str
    worst_index: int


def _compare(named, loss_fn, eps):
    """Central differences for each (name, array, analytic_grad) triple.

    Relative error per entry is ``|a - n| / max(|a|, |n|, 1e-6 * scale)``
    with ``scale = max(1, max |n|)`` so entries that are zero up to rounding
    do not dominate.
    """
    numeric = []
    for name, arr, grad in named:
        num = np.empty(arr.size)
        flat = arr.reshape(-1)
        for i in range(arr.size):
            orig = flat[i]
            flat[i] = orig + eps
            lp = loss_fn()
            flat[i] = orig - eps
            lm = loss_fn()
            flat[i] = orig
            num[i] = (lp - lm) / (2 * eps)
        numeric.append(num)
    scale = max(1.0, max(float(np.abs(n).max()) for n in numeric))
    worst = GradCheckResult(0.0, "", -1)
    for (name, _, grad), num in zip(named, numeric):
        a = np.asarray(grad, dtype=np.float64).reshape(-1)
        err = np.abs(a - num) / np.maximum(np.maximum(np.abs(a), np.abs(num)), 1e-6 * scale)
        i = int(err.argmax())
        if err[i] > worst.max_rel_error or worst.worst_index < 0:
            worst = GradCheckResult(float(err[i]), name, i)
    return worst


def _random_encoder(rng, L, C):
    enc = init_encoder(L, C, int(rng.integers(2**31)), dtype=np.float64)
    for conv in enc.pixel_branch + enc.context_branch:
        conv.bias[...] = rng.uniform(-0.1, 0.1, conv.bias.shape)
    return enc


def grad_check(scope, seed=0, eps=1e-5, positional_mode="rope", key_mode="avgpool"):
    """Compare analytic gradients with central finite differences on a tiny
    float64 instance; returns the worst relative error and where it occurs."""
    if not 1e-5 <= eps <= 1e-2:
        raise ConfigError(f"eps must lie in [1e-5, 1e-2], got {eps}")
    if scope not in GRAD_SCOPES:
        raise ConfigError(f"scope must be one of {GRAD_SCOPES}")
    rng = np.random.default_rng(seed)

    if scope == "rope":
        rope = RopeConfig(8, 4, 4)
        g = rng.standard_normal((4, 4, 8))
        R = rng.standard_normal((4, 4, 8))
        loss = lambda: float((apply_rope(g, rope) * R).sum())  # noqa: E731
        return _compare([("g", g, apply_rope_backward(R, rope))], loss, eps)

    if scope == "encoder":
        enc = _random_encoder(rng, 1, 8)
        img = rng.uniform(0, 1, (4, 4, 3))
        R = rng.standard_normal((4, 4, 8))
        loss = lambda: float((encode(img, enc) * R).sum())  # noqa: E731
        gp, gi = encode_backward(img, enc, R)
        named = [("image", img, gi)] + [
            (n, t, g) for (n, t), g in zip(enc.named_tensors(), gp.tensors())
        ]
        return _compare(named, loss, eps)

    enc = _random_encoder(rng, 1, 8)
    cfg = AttnConfig(2, 3, positional_mode, key_mode, sigma=float(rng.uniform(0.5, 1.5)))
    sig = np.array([cfg.sigma])

    def attn():
        cfg.sigma = float(sig[0])
        return cfg

    if scope == "attention":
        f_lr = rng.standard_normal((3, 3, 2))
        img = rng.uniform(0, 1, (6, 6, 3))
        rope = RopeConfig(8, 6, 6)
        R = rng.standard_normal((6, 6, 2))
        loss = lambda: float((naf_forward(f_lr, img, enc, rope, attn()) * R).sum())  # noqa: E731
        gf, ge, gs = naf_backward(f_lr, img, enc, rope, attn(), R)
        named = [("f_lr", f_lr, gf)] + [(n, t, g) for (n, t), g in zip(enc.named_tensors(), ge.tensors())]
        if cfg.uses_sigma:
            named.append(("sigma", sig, np.array([gs])))
        return _compare(named, loss, eps)

    # full: image -> teacher pair -> NAF -> l2 loss
    teacher = SyntheticTeacher(patch=2, out_dim=3, seed=seed)
    img = rng.uniform(0, 1, (12, 12, 3))
    f_lr, guide, target, s = upsampling_example(img.astype(np.float64), teacher, 6)
    f_lr, target = f_lr.astype(np.float64), target.astype(np.float64)
    cfg.scale = s
    rope = RopeConfig(8, guide.shape[0], guide.shape[1])
    loss = lambda: l2_loss(naf_forward(f_lr, guide, enc, rope, attn()), target)[0]  # noqa: E731
    _, _, (_, ge, gs) = naf_value_and_grad(f_lr, guide, enc, rope, attn(), lambda p: l2_loss(p, target))
    named = [(n, t, g) for (n, t), g in zip(enc.named_tensors(), ge.tensors())]
    if cfg.uses_sigma:
        named.append(("sigma", sig, np.array([gs])))
    return _compare(named, loss, eps)
