"""Dense H x W x C tensors: I/O, resampling, pooling and convolution.

Tensors are plain numpy arrays of shape ``(H, W, C)``. File I/O always uses
float32; the numerical kernels keep whatever float dtype they are given so
that gradient checks can run in float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib import format as npformat
from numpy.lib.stride_tricks import sliding_window_view

from .errors import FormatError, ShapeError, UnsupportedTensorError

# Upper bound on im2col buffer size (elements) before convolutions are
# processed in row chunks.
_IM2COL_BUDGET = 1 << 24


def check_tensor3(t, name="tensor"):
    """Validate a rank-3 float array with non-empty dims and return it."""
    t = np.asarray(t)
    if t.ndim != 3:
        raise ShapeError(f"{name} must be rank 3 (H, W, C), got shape {t.shape}")
    if min(t.shape) < 1:
        raise ShapeError(f"{name} has an empty dimension: {t.shape}")
    if not np.issubdtype(t.dtype, np.floating):
        t = t.astype(np.float32)
    return t


# ---------------------------------------------------------------------------
# NPY / PNG
# ---------------------------------------------------------------------------


def load_npy(path):
    """Read a float32, C-order, rank-3 NPY file (format v1 or v2)."""
    with open(path, "rb") as f:
        try:
            version = npformat.read_magic(f)
            if version == (1, 0):
                shape, fortran, dtype = npformat.read_array_header_1_0(f)
            elif version == (2, 0):
                shape, fortran, dtype = npformat.read_array_header_2_0(f)
            else:
                raise FormatError(f"unsupported NPY version {version}")
        except FormatError:
            raise
        except (ValueError, OSError, SyntaxError) as exc:
            raise FormatError(f"{path}: malformed NPY header ({exc})") from exc
        if dtype.kind != "f" or dtype.itemsize != 4:
            raise UnsupportedTensorError(f"{path}: dtype {dtype} is not float32")
        if len(shape) != 3:
            raise UnsupportedTensorError(f"{path}: rank {len(shape)} != 3")
        if fortran:
            raise UnsupportedTensorError(f"{path}: Fortran-ordered arrays are not supported")
        count = int(np.prod(shape))
        data = np.fromfile(f, dtype=dtype, count=count)
    if data.size != count:
        raise FormatError(f"{path}: truncated data ({data.size} of {count} values)")
    t = data.astype(np.float32, copy=False).reshape(shape)
    if min(shape) < 1:
        raise UnsupportedTensorError(f"{path}: empty dimension in shape {shape}")
    return t


def save_npy(t, path):
    """Write ``t`` as an NPY v1.0 float32 C-order file."""
    t = np.ascontiguousarray(check_tensor3(t), dtype=np.float32)
    with open(path, "wb") as f:
        npformat.write_array(f, t, version=(1, 0), allow_pickle=False)


def load_png(path):
    """Read an 8-bit PNG as an (H, W, 3) float32 array in [0, 1]."""
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return arr.astype(np.float32) / 255.0


def to_uint8(t):
    return np.round(np.clip(t, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_png(t, path):
    """Write an RGB (C=3) or single-channel tensor in [0, 1] as an 8-bit PNG."""
    from PIL import Image

    t = np.asarray(t)
    if t.ndim == 3 and t.shape[2] == 1:
        t = t[:, :, 0]
    if t.ndim == 3 and t.shape[2] != 3:
        raise ShapeError(f"PNG export needs 1 or 3 channels, got {t.shape[2]}")
    Image.fromarray(to_uint8(t)).save(path, format="PNG")


# ---------------------------------------------------------------------------
# Resampling
# ---------------------------------------------------------------------------

RESIZE_MODES = ("nearest", "bilinear", "bicubic")


def _cubic_weights(t, a=-0.5):
    """Keys cubic convolution weights for taps at offsets -1, 0, 1, 2."""

    def near(x):  # |x| <= 1
        return ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0

    def far(x):  # 1 < |x| < 2
        return ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a

    return np.stack([far(t + 1.0), near(t), near(1.0 - t), far(2.0 - t)], axis=-1)


def _axis_taps(n_in, n_out, mode):
    """Source indices and weights for one axis.

    Returns ``(base, idx, w)``: ``base`` is the reference source index per
    output sample, ``idx`` the (n_out, taps) gather indices and ``w`` the
    matching weights, which sum to one per row.
    """
    scale = n_in / n_out
    dst = np.arange(n_out, dtype=np.float64)
    if mode == "nearest":
        src = np.minimum(np.floor((dst + 0.5) * scale).astype(np.int64), n_in - 1)
        return src, src[:, None], np.ones((n_out, 1))
    src = (dst + 0.5) * scale - 0.5
    if mode == "bilinear":
        src = np.maximum(src, 0.0)
        i0 = np.floor(src).astype(np.int64)
        i0 = np.minimum(i0, n_in - 1)
        i1 = np.minimum(i0 + 1, n_in - 1)
        frac = src - i0
        idx = np.stack([i0, i1], axis=1)
        w = np.stack([1.0 - frac, frac], axis=1)
        return i0, idx, w
    if mode == "bicubic":
        i0 = np.floor(src).astype(np.int64)
        frac = src - i0
        idx = np.clip(i0[:, None] + np.arange(-1, 3)[None, :], 0, n_in - 1)
        return np.clip(i0, 0, n_in - 1), idx, _cubic_weights(frac)
    raise ValueError(f"unknown resize mode {mode!r}; expected one of {RESIZE_MODES}")


def resize_matrix(n_in, n_out, mode):
    """Dense (n_out, n_in) interpolation matrix for one axis."""
    _, idx, w = _axis_taps(n_in, n_out, mode)
    m = np.zeros((n_out, n_in))
    rows = np.repeat(np.arange(n_out), idx.shape[1])
    np.add.at(m, (rows, idx.ravel()), w.ravel())
    return m


def _resample_axis(x, n_out, mode, axis):
    n_in = x.shape[axis]
    if n_in == n_out and mode != "bicubic":
        return x
    base, idx, w = _axis_taps(n_in, n_out, mode)
    w = w.astype(x.dtype)
    ref = np.take(x, base, axis=axis)
    out = ref.copy()
    # Accumulate differences from the reference tap so constant inputs are
    # reproduced exactly regardless of weight rounding.
    shape = [1] * x.ndim
    shape[axis] = n_out
    for j in range(idx.shape[1]):
        out += w[:, j].reshape(shape) * (np.take(x, idx[:, j], axis=axis) - ref)
    return out


def resize(t, out_h, out_w, mode="bilinear"):
    """Resample to ``(out_h, out_w)`` with half-pixel centers.

    ``bicubic`` uses the Catmull-Rom kernel (a = -0.5) with edge clamping.
    """
    t = check_tensor3(t)
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"output size must be positive, got {(out_h, out_w)}")
    if mode not in RESIZE_MODES:
        raise ValueError(f"unknown resize mode {mode!r}; expected one of {RESIZE_MODES}")
    out = _resample_axis(t, out_h, mode, axis=0)
    return _resample_axis(out, out_w, mode, axis=1)


def resize_backward(grad_out, in_h, in_w, mode="bilinear"):
    """Adjoint of :func:`resize` with respect to its input."""
    my = resize_matrix(in_h, grad_out.shape[0], mode).astype(grad_out.dtype)
    mx = resize_matrix(in_w, grad_out.shape[1], mode).astype(grad_out.dtype)
    return np.einsum("ah,abc,bw->hwc", my, grad_out, mx)


# ---------------------------------------------------------------------------
# Pooling
# ---------------------------------------------------------------------------


def _blocks(t, s):
    h, w, c = t.shape
    if s < 1:
        raise ShapeError(f"pool factor must be >= 1, got {s}")
    if h % s or w % s:
        raise ShapeError(f"dims {(h, w)} are not divisible by {s}")
    return t.reshape(h // s, s, w // s, s, c)


def block_avg_pool(t, s):
    """Mean over non-overlapping ``s x s`` blocks."""
    t = check_tensor3(t)
    if s == 1:
        return t.copy()
    b = _blocks(t, s)
    ref = b[:, :1, :, :1, :]
    return ref[:, 0, :, 0, :] + (b - ref).mean(axis=(1, 3))


def block_avg_pool_backward(grad_out, s):
    g = grad_out / (s * s)
    return np.repeat(np.repeat(g, s, axis=0), s, axis=1)


def block_max_pool(t, s):
    """Per-channel max over ``s x s`` blocks."""
    t = check_tensor3(t)
    return _blocks(t, s).max(axis=(1, 3))


def block_max_pool_backward(t, grad_out, s):
    """Route gradients to the first maximal element of each block (row-major)."""
    b = _blocks(t, s)
    h, _, w, _, c = b.shape
    flat = b.transpose(0, 2, 4, 1, 3).reshape(h, w, c, s * s)
    arg = flat.argmax(axis=-1)
    g = np.zeros_like(flat)
    np.put_along_axis(g, arg[..., None], grad_out[..., None], axis=-1)
    return g.reshape(h, w, c, s, s).transpose(0, 3, 1, 4, 2).reshape(h * s, w * s, c)


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------


@dataclass
class ConvSpec:
    """A "same"-padded convolution.

    ``weights`` has shape ``(k, k, in_channels, out_channels)`` and ``bias``
    shape ``(out_channels,)``.
    """

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights)
        self.bias = np.asarray(self.bias)
        w = self.weights
        if w.ndim != 4 or w.shape[0] != w.shape[1] or w.shape[0] not in (1, 3):
            raise ShapeError(f"weights must be (k, k, in, out) with k in {{1, 3}}, got {w.shape}")
        if self.bias.shape != (w.shape[3],):
            raise ShapeError(f"bias shape {self.bias.shape} != ({w.shape[3]},)")

    @property
    def kernel_size(self):
        return self.weights.shape[0]

    @property
    def in_channels(self):
        return self.weights.shape[2]

    @property
    def out_channels(self):
        return self.weights.shape[3]

    def num_params(self):
        return self.weights.size + self.bias.size

    def copy(self):
        return ConvSpec(self.weights.copy(), self.bias.copy())


def _row_chunks(h, w, spec):
    per_row = w * spec.kernel_size**2 * spec.in_channels
    step = max(1, _IM2COL_BUDGET // max(per_row, 1))
    return range(0, h, step), step


def _patches(padded, r0, r1, k):
    """im2col rows ``r0:r1`` -> (rows, W, k*k*in)."""
    view = sliding_window_view(padded[r0 : r1 + k - 1], (k, k), axis=(0, 1))
    # view: (rows, W, in, k, k) -> (rows, W, k, k, in)
    view = view.transpose(0, 1, 3, 4, 2)
    return view.reshape(view.shape[0], view.shape[1], -1)


def _pad(t, k):
    p = k // 2
    if p == 0:
        return t
    return np.pad(t, ((p, p), (p, p), (0, 0)))


def conv2d_forward(t, spec):
    """Zero-padded "same" convolution plus bias."""
    t = check_tensor3(t)
    if t.shape[2] != spec.in_channels:
        raise ShapeError(f"input has {t.shape[2]} channels, conv expects {spec.in_channels}")
    h, w, _ = t.shape
    k = spec.kernel_size
    wmat = spec.weights.reshape(-1, spec.out_channels).astype(t.dtype, copy=False)
    bias = spec.bias.astype(t.dtype, copy=False)
    if k == 1:
        return t @ wmat + bias
    padded = _pad(t, k)
    out = np.empty((h, w, spec.out_channels), dtype=t.dtype)
    starts, step = _row_chunks(h, w, spec)
    for r0 in starts:
        r1 = min(h, r0 + step)
        out[r0:r1] = _patches(padded, r0, r1, k) @ wmat + bias
    return out


def conv2d_backward(t, spec, grad_out):
    """Gradients of :func:`conv2d_forward`.

    Returns ``(grad_input, grad_weights, grad_bias)``.
    """
    t = check_tensor3(t)
    h, w, cin = t.shape
    if grad_out.shape != (h, w, spec.out_channels) or cin != spec.in_channels:
        raise ShapeError(
            f"grad_out {grad_out.shape} inconsistent with input {t.shape} and conv "
            f"{spec.weights.shape}"
        )
    k = spec.kernel_size
    cout = spec.out_channels
    wmat = spec.weights.reshape(-1, cout).astype(t.dtype, copy=False)
    grad_bias = grad_out.sum(axis=(0, 1))
    if k == 1:
        g2 = grad_out.reshape(-1, cout)
        grad_w = (t.reshape(-1, cin).T @ g2).reshape(spec.weights.shape)
        return grad_out @ wmat.T, grad_w, grad_bias
    p = k // 2
    padded = _pad(t, k)
    grad_pad = np.zeros_like(padded)
    grad_w = np.zeros((k * k * cin, cout), dtype=t.dtype)
    starts, step = _row_chunks(h, w, spec)
    for r0 in starts:
        r1 = min(h, r0 + step)
        cols = _patches(padded, r0, r1, k)
        g = grad_out[r0:r1]
        grad_w += cols.reshape(-1, cols.shape[-1]).T @ g.reshape(-1, cout)
        gcols = (g @ wmat.T).reshape(r1 - r0, w, k, k, cin)
        for i in range(k):
            for j in range(k):
                grad_pad[r0 + i : r1 + i, j : j + w] += gcols[:, :, i, j, :]
    grad_in = grad_pad[p : p + h, p : p + w]
    return np.ascontiguousarray(grad_in), grad_w.reshape(spec.weights.shape), grad_bias


def kaiming_uniform(rng, kernel_size, cin, cout, dtype=np.float32):
    """He-uniform weights for a ReLU stack (fan-in scaling)."""
    fan_in = kernel_size * kernel_size * cin
    bound = math.sqrt(6.0 / fan_in)
    w = rng.uniform(-bound, bound, size=(kernel_size, kernel_size, cin, cout))
    return w.astype(dtype)
