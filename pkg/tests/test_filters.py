import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from naf.errors import ConfigError, ShapeError
from naf.filters import BilateralConfig, cell_center_guidance, jbf, jbu, upsample_resize


def gaussian_filter_oracle(x, sigma, r):
    """Truncated, renormalized spatial Gaussian filter by direct summation."""
    H, W, _ = x.shape
    out = np.zeros_like(x, dtype=np.float64)
    for i in range(H):
        for j in range(W):
            num, den = 0.0, 0.0
            for di in range(-r, r + 1):
                for dj in range(-r, r + 1):
                    y, z = i + di, j + dj
                    if 0 <= y < H and 0 <= z < W:
                        wt = np.exp(-(di * di + dj * dj) / (2 * sigma**2))
                        num = num + wt * x[y, z]
                        den += wt
            out[i, j] = num / den
    return out


def jbu_oracle(f_lr, g, s, cfg):
    """Literal per-pixel evaluation of the joint bilateral upsampling weights."""
    h, w, d = f_lr.shape
    H, W = h * s, w * s
    r = cfg.radius
    out = np.zeros((H, W, d))
    for i in range(H):
        for j in range(W):
            ly, lx = (i + 0.5) / s - 0.5, (j + 0.5) / s - 0.5
            num, den = np.zeros(d), 0.0
            for a in range(i // s - r, i // s + r + 1):
                for b in range(j // s - r, j // s + r + 1):
                    if not (0 <= a < h and 0 <= b < w):
                        continue
                    if s % 2:
                        gc = g[a * s + s // 2, b * s + s // 2]
                    else:
                        gc = g[a * s + s // 2 - 1 : a * s + s // 2 + 1, b * s + s // 2 - 1 : b * s + s // 2 + 1].mean(
                            axis=(0, 1))
                    wt = np.exp(-((ly - a) ** 2 + (lx - b) ** 2) / (2 * cfg.sigma_s**2)
                                - ((g[i, j] - gc) ** 2).sum() / (2 * cfg.sigma_r**2))
                    num += wt * f_lr[a, b]
                    den += wt
            out[i, j] = num / den
    return out


class TestConfig:
    @pytest.mark.parametrize("kwargs", [dict(sigma_s=0), dict(sigma_r=-1), dict(radius=-1)])
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            BilateralConfig(**kwargs)


class TestJBF:
    def test_box_mean_limit(self, rng):
        x = rng.standard_normal((6, 6, 2))
        out = jbf(x, np.zeros((6, 6, 3)), BilateralConfig(sigma_s=1e9, radius=1))
        box = np.zeros_like(x)
        for i in range(6):
            for j in range(6):
                box[i, j] = x[max(0, i - 1) : i + 2, max(0, j - 1) : j + 2].mean(axis=(0, 1))
        assert np.abs(out - box).max() < 1e-5

    def test_constant_signal(self, rng):
        out = jbf(np.full((5, 4, 2), 0.3), rng.uniform(0, 1, (5, 4, 3)), BilateralConfig())
        np.testing.assert_allclose(out, 0.3, rtol=1e-15)

    def test_impulse_response(self):
        x = np.zeros((5, 5, 1))
        x[2, 2] = 1.0
        out = jbf(x, np.zeros((5, 5, 3)), BilateralConfig(sigma_s=1.0, radius=2))
        # interior pixel (2, 2) normalizes over the full 5x5 window
        k = np.exp(-(np.arange(-2, 3)[:, None] ** 2 + np.arange(-2, 3)[None, :] ** 2) / 2.0)
        assert out[2, 2, 0] == pytest.approx(k[2, 2] / k.sum(), abs=1e-6)
        # hand values: Z = (1 + 2e^-1/2 + 2e^-2)^2
        z = (1 + 2 * np.exp(-0.5) + 2 * np.exp(-2)) ** 2
        assert out[2, 2, 0] == pytest.approx(1 / z, abs=1e-6)

    def test_range_limit_is_gaussian(self, rng):
        x = rng.standard_normal((7, 6, 2))
        g = rng.uniform(0, 1, (7, 6, 3))
        out = jbf(x, g, BilateralConfig(sigma_s=1.3, sigma_r=1e6, radius=2))
        assert np.abs(out - gaussian_filter_oracle(x, 1.3, 2)).max() < 1e-4

    def test_edge_preserving(self):
        g = np.zeros((6, 6, 3))
        g[:, 3:] = 1.0
        x = g[:, :, :1].copy()
        out = jbf(x, g, BilateralConfig(sigma_s=2.0, sigma_r=0.1, radius=2))
        np.testing.assert_allclose(out, x, atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            jbf(np.zeros((4, 4, 1)), np.zeros((4, 5, 3)), BilateralConfig())

    @given(st.integers(0, 2**32 - 1), st.integers(0, 3))
    def test_mirror_symmetry(self, seed, r):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((5, 6, 2))
        g = rng.uniform(0, 1, (5, 6, 3))
        cfg = BilateralConfig(sigma_s=1.5, sigma_r=0.3, radius=r)
        np.testing.assert_array_equal(jbf(x[:, ::-1], g[:, ::-1], cfg), jbf(x, g, cfg)[:, ::-1])
        np.testing.assert_array_equal(jbf(x[::-1], g[::-1], cfg), jbf(x, g, cfg)[::-1])

    @given(st.integers(0, 2**32 - 1))
    def test_convex(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((6, 6, 2))
        out = jbf(x, rng.uniform(0, 1, (6, 6, 3)), BilateralConfig(radius=1))
        for i in range(6):
            for j in range(6):
                win = x[max(0, i - 1) : i + 2, max(0, j - 1) : j + 2]
                assert np.all(out[i, j] >= win.min(axis=(0, 1)) - 1e-12)
                assert np.all(out[i, j] <= win.max(axis=(0, 1)) + 1e-12)


class TestJBU:
    def test_identity(self, rng):
        f = rng.standard_normal((4, 5, 3))
        np.testing.assert_array_equal(jbu(f, rng.uniform(0, 1, (4, 5, 3)), 1, BilateralConfig(radius=0)), f)

    def test_constant_features(self, rng):
        out = jbu(np.full((3, 3, 2), -1.25), rng.uniform(0, 1, (6, 6, 3)), 2, BilateralConfig(radius=1))
        np.testing.assert_allclose(out, -1.25, rtol=1e-15)

    @pytest.mark.parametrize("s", [2, 3])
    def test_nested_loop_oracle(self, s, rng):
        f = rng.standard_normal((3, 3, 2))
        g = rng.uniform(0, 1, (3 * s, 3 * s, 3))
        cfg = BilateralConfig(sigma_s=0.8, sigma_r=0.4, radius=1)
        np.testing.assert_allclose(jbu(f, g, s, cfg), jbu_oracle(f, g, s, cfg), atol=1e-12)

    def test_cell_centers(self):
        g = np.arange(36, dtype=float).reshape(6, 6, 1)
        assert cell_center_guidance(g, 3)[:, :, 0].tolist() == [[7.0, 10.0], [25.0, 28.0]]
        assert cell_center_guidance(g, 2)[0, 0, 0] == pytest.approx((0 + 1 + 6 + 7) / 4)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            jbu(np.zeros((3, 3, 1)), np.zeros((6, 7, 3)), 2, BilateralConfig())

    @given(st.integers(0, 2**32 - 1), st.sampled_from([1, 2, 3, 4]))
    def test_mirror_symmetry(self, seed, s):
        rng = np.random.default_rng(seed)
        f = rng.standard_normal((3, 4, 2))
        g = rng.uniform(0, 1, (3 * s, 4 * s, 3))
        cfg = BilateralConfig(sigma_s=1.0, sigma_r=0.3, radius=1)
        # fractional LR coordinates reflect up to one rounding step
        np.testing.assert_allclose(jbu(f[:, ::-1], g[:, ::-1], s, cfg), jbu(f, g, s, cfg)[:, ::-1], atol=1e-14)

    def test_resize_passthrough(self, rng):
        from naf.tensor import resize

        f = rng.standard_normal((3, 4, 2))
        np.testing.assert_array_equal(upsample_resize(f, 3, "bicubic"), resize(f, 9, 12, "bicubic"))
