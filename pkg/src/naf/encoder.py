"""Dual-branch guidance encoder.

The pixel branch stacks 1x1 conv blocks and the context branch 3x3 conv
blocks. Each block is conv + activation; each branch ends with a 1x1
projection to C/2 channels (no activation). The two branch outputs are
concatenated along channels: ``[pixel | context]``.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, FormatError, ShapeError
from .tensor import ConvSpec, check_tensor3, conv2d_backward, conv2d_forward, kaiming_uniform, load_npy, save_npy

ACTIVATIONS = ("relu", "softplus")
CHECKPOINT_VERSION = 1


@dataclass
class EncoderParams:
    pixel_branch: list
    context_branch: list
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if len(self.pixel_branch) != len(self.context_branch) or len(self.pixel_branch) < 2:
            raise ConfigError("branches must have equal length L + 1 >= 2")
        if any(c.kernel_size != 1 for c in self.pixel_branch):
            raise ConfigError("pixel branch must use 1x1 kernels only")
        if any(c.kernel_size != 3 for c in self.context_branch[:-1]):
            raise ConfigError("context trunk must use 3x3 kernels only")
        if self.context_branch[-1].kernel_size != 1:
            raise ConfigError("context projection must be 1x1")
        half = self.pixel_branch[-1].out_channels
        if self.context_branch[-1].out_channels != half:
            raise ConfigError("both branches must output C/2 channels")

    @property
    def depth(self):
        return len(self.pixel_branch) - 1

    @property
    def channels(self):
        return 2 * self.pixel_branch[-1].out_channels

    def named_tensors(self):
        """``(name, array)`` pairs in a fixed order; arrays are live references."""
        out = []
        for branch, convs in (("pixel", self.pixel_branch), ("context", self.context_branch)):
            for i, conv in enumerate(convs):
                out.append((f"{branch}.{i}.weight", conv.weights))
                out.append((f"{branch}.{i}.bias", conv.bias))
        return out

    def tensors(self):
        return [t for _, t in self.named_tensors()]

    def copy(self):
        return EncoderParams(
            [c.copy() for c in self.pixel_branch],
            [c.copy() for c in self.context_branch],
            self.activation,
        )

    def zeros_like(self):
        p = self.copy()
        for t in p.tensors():
            t[...] = 0
        return p

    def astype(self, dtype):
        conv = lambda c: ConvSpec(c.weights.astype(dtype), c.bias.astype(dtype))  # noqa: E731
        return EncoderParams(
            [conv(c) for c in self.pixel_branch],
            [conv(c) for c in self.context_branch],
            self.activation,
        )


def init_encoder(L=2, C=256, seed=0, activation="relu", dtype=np.float32):
    """Seeded Kaiming-uniform initialization with zero biases."""
    if L < 1:
        raise ConfigError(f"depth L must be >= 1, got {L}")
    if C < 4 or C % 2:
        raise ConfigError(f"guidance channels C must be even and >= 4, got {C}")
    rng = np.random.default_rng(seed)

    def conv(k, cin, cout):
        return ConvSpec(kaiming_uniform(rng, k, cin, cout, dtype), np.zeros(cout, dtype=dtype))

    branches = []
    for k in (1, 3):
        convs = [conv(k, 3, C)]
        convs += [conv(k, C, C) for _ in range(L - 1)]
        convs.append(conv(1, C, C // 2))
        branches.append(convs)
    return EncoderParams(branches[0], branches[1], activation)


def param_count(params):
    """Total number of scalar parameters (weights and biases)."""
    return sum(c.num_params() for c in params.pixel_branch + params.context_branch)


def _act(x, kind):
    if kind == "relu":
        return np.maximum(x, 0)
    return np.logaddexp(0, x)


def _act_grad(pre, kind):
    if kind == "relu":
        return (pre > 0).astype(pre.dtype)
    return 1.0 / (1.0 + np.exp(-pre))


def _branch_forward(x, convs, activation):
    inputs, pres = [], []
    for conv in convs[:-1]:
        inputs.append(x)
        pre = conv2d_forward(x, conv)
        pres.append(pre)
        x = _act(pre, activation)
    inputs.append(x)
    return conv2d_forward(x, convs[-1]), inputs, pres


def _check_img(img, params):
    img = check_tensor3(img, "image")
    if img.shape[2] != 3:
        raise ShapeError(f"encoder expects an RGB image, got {img.shape[2]} channels")
    return img


def encode(img, params):
    """Guidance map of shape (H, W, C)."""
    img = _check_img(img, params)
    pix, _, _ = _branch_forward(img, params.pixel_branch, params.activation)
    ctx, _, _ = _branch_forward(img, params.context_branch, params.activation)
    return np.concatenate([pix, ctx], axis=2)


def _branch_backward(grad, convs, inputs, pres, activation):
    grads = [None] * len(convs)
    g, gw, gb = conv2d_backward(inputs[-1], convs[-1], grad)
    grads[-1] = ConvSpec(gw, gb)
    for i in range(len(convs) - 2, -1, -1):
        g = g * _act_grad(pres[i], activation)
        g, gw, gb = conv2d_backward(inputs[i], convs[i], g)
        grads[i] = ConvSpec(gw, gb)
    return grads, g


def encode_backward(img, params, grad_out):
    """Reverse-mode gradients of :func:`encode`.

    Returns ``(grad_params, grad_img)`` where ``grad_params`` is an
    :class:`EncoderParams` holding gradients in place of weights.
    """
    img = _check_img(img, params)
    h, w, _ = img.shape
    C = params.channels
    if grad_out.shape != (h, w, C):
        raise ShapeError(f"grad_out shape {grad_out.shape} != {(h, w, C)}")
    half = C // 2
    grads = []
    grad_img = np.zeros_like(img)
    for convs, sl in ((params.pixel_branch, slice(0, half)), (params.context_branch, slice(half, C))):
        _, inputs, pres = _branch_forward(img, convs, params.activation)
        g, gi = _branch_backward(np.ascontiguousarray(grad_out[:, :, sl]), convs, inputs, pres, params.activation)
        grads.append(g)
        grad_img += gi
    return EncoderParams(grads[0], grads[1], params.activation), grad_img


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(directory, params, rope_base=100.0, kernel_size=9, extra=None):
    """Write one NPY per parameter tensor plus ``manifest.json``.

    Weight tensors are stored as ``(k*k, in, out)`` so every file is rank 3.
    """
    os.makedirs(directory, exist_ok=True)
    names = []
    shapes = {}
    for name, arr in params.named_tensors():
        stored = arr.reshape(-1, arr.shape[-2], arr.shape[-1]) if arr.ndim == 4 else arr.reshape(1, 1, -1)
        save_npy(stored, os.path.join(directory, name + ".npy"))
        names.append(name)
        shapes[name] = list(arr.shape)
    manifest = {
        "version": CHECKPOINT_VERSION,
        "L": params.depth,
        "C": params.channels,
        "rope_base": float(rope_base),
        "kernel_size": int(kernel_size),
        "activation": params.activation,
        "tensor_names": names,
        "tensor_shapes": shapes,
    }
    if extra:
        manifest.update(extra)
    with open(os.path.join(directory, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    return manifest


def load_checkpoint(directory):
    """Load a checkpoint; returns ``(params, manifest)``.

    Every tensor is validated against the shapes implied by ``L`` and ``C``.
    """
    path = os.path.join(directory, "manifest.json")
    try:
        with open(path) as f:
            manifest = json.load(f)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc
    for key in ("version", "L", "C", "rope_base", "kernel_size", "tensor_names"):
        if key not in manifest:
            raise FormatError(f"{path}: missing key {key!r}")
    if manifest["version"] != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {manifest['version']}")
    template = init_encoder(manifest["L"], manifest["C"], seed=0, activation=manifest.get("activation", "relu"))
    expected = [n for n, _ in template.named_tensors()]
    if list(manifest["tensor_names"]) != expected:
        raise FormatError(f"{path}: tensor names do not match an L={manifest['L']}, C={manifest['C']} encoder")
    for name, arr in template.named_tensors():
        data = load_npy(os.path.join(directory, name + ".npy"))
        if data.size != arr.size or (arr.ndim == 4 and data.shape != (arr.shape[0] * arr.shape[1],) + arr.shape[2:]):
            raise ShapeError(f"{name}: stored shape {data.shape} does not match expected {arr.shape}")
        arr[...] = data.reshape(arr.shape)
    return template, manifest
