"""Analytic operation counts and wall-time benchmarks.

Counts are in FLOPs with a multiply-add counted as two operations, so a
``C``-dimensional dot product costs ``2C``. Softmax, pooling and
normalization are not counted; they are linear in the output size and
negligible next to the encoder and the attention products.
"""

from __future__ import annotations

import csv
import io
import resource
import statistics
import time
import warnings
from fractions import Fraction

import numpy as np

from .attention import AttnConfig, dense_reference, naf_forward
from .encoder import init_encoder
from .errors import ConfigError
from .rope import RopeConfig

# one rotation of a channel pair: 4 multiplies and 2 adds
ROPE_FLOPS_PER_CHANNEL = 3


def encoder_flops(enc, H, W):
    """Convolution FLOPs of the guidance encoder on an ``H x W`` image."""
    total = 0
    for conv in enc.pixel_branch + enc.context_branch:
        k = conv.kernel_size
        total += 2 * H * W * k * k * conv.in_channels * conv.out_channels
    return total


def neighborhood_size(cfg, lr_h, lr_w):
    """Cells per query window: ``k^2``, capped by the LR grid size."""
    return min(cfg.kernel, lr_h) * min(cfg.kernel, lr_w)


def flops_estimate(cfg, enc, lr_h, lr_w, d):
    """Per-stage FLOPs for upsampling an ``lr_h x lr_w x d`` map by ``cfg.scale``.

    Returns a dict with ``encoder``, ``rope``, ``logits``, ``aggregation``
    and ``total``, the dense-attention counterparts ``dense_logits`` and
    ``dense_aggregation``, and ``logits_ratio`` (an exact ``Fraction``).
    """
    s = cfg.scale
    H, W = lr_h * s, lr_w * s
    C = enc.channels
    n = neighborhood_size(cfg, lr_h, lr_w)
    dense_n = lr_h * lr_w
    out = {
        "encoder": encoder_flops(enc, H, W),
        "rope": ROPE_FLOPS_PER_CHANNEL * H * W * C,
        "logits": H * W * n * 2 * C,
        "aggregation": H * W * n * 2 * d,
    }
    out["total"] = sum(out.values())
    out["dense_logits"] = H * W * dense_n * 2 * C
    out["dense_aggregation"] = H * W * dense_n * 2 * d
    out["logits_ratio"] = Fraction(out["logits"], out["dense_logits"])
    return out


def peak_rss_mb():
    """Peak resident set size of this process in MiB."""
    return resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024.0


def _problem(cfg, lr_h, lr_w, channels, d, seed):
    rng = np.random.default_rng(seed)
    enc = init_encoder(1, channels, seed)
    H, W = lr_h * cfg.scale, lr_w * cfg.scale
    image = rng.random((H, W, 3), dtype=np.float32)
    f_lr = rng.standard_normal((lr_h, lr_w, d), dtype=np.float32)
    return f_lr, image, enc, RopeConfig(channels, H, W)


def _timed(fn, repeats):
    fn()  # warm-up, discarded
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return times


BENCH_COLUMNS = ["lr_h", "lr_w", "hr_h", "hr_w", "median_s", "min_s", "peak_rss_mb"]


def bench_throughput(cfg, sizes, repeats=5, channels=32, d=32, seed=0):
    """Median wall time of :func:`naf_forward` per LR size; returns CSV text.

    ``sizes`` is a list of ``(lr_h, lr_w)``. A warning is issued when time is
    not non-decreasing in output area (a soft check: timings are noisy).
    """
    if repeats < 5:
        raise ConfigError(f"repeats must be >= 5, got {repeats}")
    rows = []
    for lr_h, lr_w in sizes:
        f_lr, image, enc, rope = _problem(cfg, lr_h, lr_w, channels, d, seed)
        times = _timed(lambda: naf_forward(f_lr, image, enc, rope, cfg), repeats)
        rows.append([lr_h, lr_w, lr_h * cfg.scale, lr_w * cfg.scale,
                     statistics.median(times), min(times), round(peak_rss_mb(), 1)])
    by_area = sorted(rows, key=lambda r: r[2] * r[3])
    if any(b[4] < a[4] for a, b in zip(by_area, by_area[1:])):
        warnings.warn("benchmark time is not monotone in output area", RuntimeWarning, stacklevel=2)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(BENCH_COLUMNS)
    writer.writerows(rows)
    return buf.getvalue()


def measure_speedup(lr_size=28, scale=8, kernel=9, channels=32, d=32, repeats=3, seed=0):
    """Median wall time of the dense oracle divided by that of the neighborhood path."""
    cfg = AttnConfig(scale, kernel)
    f_lr, image, enc, rope = _problem(cfg, lr_size, lr_size, channels, d, seed)
    fast = statistics.median(_timed(lambda: naf_forward(f_lr, image, enc, rope, cfg), repeats))
    slow = statistics.median(_timed(lambda: dense_reference(f_lr, image, enc, rope, cfg), repeats))
    return {"neighborhood_s": fast, "dense_s": slow, "speedup": slow / fast}
