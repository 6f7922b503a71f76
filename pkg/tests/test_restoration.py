import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from naf.attention import AttnConfig, dense_reference
from naf.encoder import init_encoder
from naf.errors import ConfigError, ShapeError
from naf.restoration import (
    NoiseSpec,
    add_channel_salt_pepper,
    add_gaussian_noise,
    corrupt,
    denoise_config,
    denoise_forward,
    denoise_with,
    denoiser_train_config,
    evaluate_denoiser,
    psnr,
    restoration_loss,
    sample_noise,
    ssim,
    ssim_value_and_grad,
    train_denoiser,
)
from naf.rope import RopeConfig
from naf.training import Stage, SyntheticImages, TrainResult, synthetic_image


def ssim_oracle(a, b, peak=1.0):
    """Per-window SSIM by explicit weighted sums."""
    x = np.arange(11) - 5
    g = np.exp(-(x * x) / 4.5)
    w = np.outer(g, g) / g.sum() ** 2
    c1, c2 = (0.01 * peak) ** 2, (0.03 * peak) ** 2
    H, W, C = a.shape
    vals = []
    for c in range(C):
        for i in range(H - 10):
            for j in range(W - 10):
                pa, pb = a[i : i + 11, j : j + 11, c], b[i : i + 11, j : j + 11, c]
                ma, mb = (w * pa).sum(), (w * pb).sum()
                va = (w * (pa - ma) ** 2).sum()
                vb = (w * (pb - mb) ** 2).sum()
                cov = (w * (pa - ma) * (pb - mb)).sum()
                vals.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma**2 + mb**2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


class TestNoise:
    def test_gaussian_statistics(self):
        clean = np.full((1000, 1000, 1), 0.5)
        noisy = add_gaussian_noise(clean, NoiseSpec("gaussian", 0.1, seed=4))
        z = noisy - clean
        assert abs(z.mean()) < 0.001
        assert z.std() == pytest.approx(0.1, rel=0.01)

    def test_salt_pepper_statistics(self):
        clean = np.full((1000, 1000, 1), 0.5, np.float32)
        noisy = add_channel_salt_pepper(clean, NoiseSpec("channel_salt_pepper", 0.1, seed=4))
        hit = noisy != 0.5
        assert hit.mean() == pytest.approx(0.1, rel=0.01)
        assert (noisy[hit] == 1).mean() == pytest.approx(0.5, rel=0.01)
        assert set(np.unique(noisy)) == {0.0, 0.5, 1.0}

    def test_gaussian_not_clipped(self):
        out = corrupt(np.ones((50, 50, 3)), NoiseSpec("gaussian", 0.5))
        assert out.max() > 1

    def test_deterministic_and_dtype(self):
        img = np.full((8, 8, 3), 0.3, np.float32)
        a = corrupt(img, NoiseSpec(seed=3))
        assert a.dtype == np.float32
        assert a.tobytes() == corrupt(img, NoiseSpec(seed=3)).tobytes()

    def test_level_range(self):
        spec = NoiseSpec("gaussian", level_range=(0.0, 0.2), seed=2)
        _, level = spec._draw()
        assert 0.0 <= level <= 0.2

    @pytest.mark.parametrize(
        "kw",
        [dict(kind="poisson"), dict(level=-0.1), dict(kind="channel_salt_pepper", level=1.5),
         dict(level_range=(0.3, 0.1))],
    )
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            NoiseSpec(**kw)

    def test_kind_mismatch(self):
        with pytest.raises(ConfigError):
            add_gaussian_noise(np.zeros((2, 2, 3)), NoiseSpec("channel_salt_pepper"))

    def test_sample_noise_varies(self):
        a, b = sample_noise(NoiseSpec(), 0, 0), sample_noise(NoiseSpec(), 1, 0)
        assert a.seed != b.seed and a.level == b.level


class TestPSNR:
    def test_twenty_db(self):
        a = np.full((4, 4, 3), 0.5)
        assert psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-9)

    def test_identical(self):
        assert psnr(np.ones((2, 2, 1)), np.ones((2, 2, 1))) == float("inf")

    def test_clips(self):
        assert psnr(np.full((2, 2, 1), 1.5), np.ones((2, 2, 1))) == float("inf")

    @given(st.integers(0, 2**32 - 1))
    def test_symmetric(self, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.uniform(0, 1, (5, 5, 3)), rng.uniform(0, 1, (5, 5, 3))
        assert psnr(a, b) == psnr(b, a)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            psnr(np.zeros((2, 2, 1)), np.zeros((2, 3, 1)))


class TestSSIM:
    def test_oracle(self, rng):
        a, b = rng.uniform(0, 1, (13, 14, 2)), rng.uniform(0, 1, (13, 14, 2))
        assert ssim(a, b) == pytest.approx(ssim_oracle(a, b), abs=1e-12)

    def test_identical(self, rng):
        a = rng.uniform(0, 1, (12, 12, 3))
        assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)

    def test_inverted_checkerboard_negative(self):
        y, x = np.mgrid[0:16, 0:16]
        board = ((y + x) % 2).astype(float)[:, :, None]
        assert ssim(board, 1 - board) < 0

    @given(st.integers(0, 2**32 - 1))
    def test_symmetric(self, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.uniform(0, 1, (11, 12, 1)), rng.uniform(0, 1, (11, 12, 1))
        assert abs(ssim(a, b) - ssim(b, a)) < 1e-9

    def test_too_small(self):
        with pytest.raises(ShapeError):
            ssim(np.zeros((10, 20, 3)), np.zeros((10, 20, 3)))

    def test_gradient(self, rng):
        a, b = rng.uniform(0, 1, (12, 13, 2)), rng.uniform(0, 1, (12, 13, 2))
        _, g = ssim_value_and_grad(a, b)
        for idx in [(0, 0, 0), (5, 6, 1), (11, 12, 0), (3, 9, 1)]:
            e = np.zeros_like(a)
            e[idx] = 1e-6
            fd = (ssim_value_and_grad(a + e, b)[0] - ssim_value_and_grad(a - e, b)[0]) / 2e-6
            assert g[idx] == pytest.approx(fd, rel=1e-5, abs=1e-10)


class TestLoss:
    def test_offset(self, rng):
        target = rng.uniform(0.2, 0.8, (16, 16, 3))
        pred = target + 0.1
        loss, _ = restoration_loss(pred, target)
        expected = 0.1 + 5 * 0.01 + 0.2 * (1 - ssim_oracle(pred, target))
        assert loss == pytest.approx(expected, abs=1e-12)
        assert loss == pytest.approx(0.15 + 0.2 * (1 - ssim_value_and_grad(pred, target)[0]), abs=1e-12)

    def test_zero_at_target(self, rng):
        t = rng.uniform(0, 1, (12, 12, 3))
        loss, g = restoration_loss(t, t)
        assert abs(loss) < 1e-12 and np.abs(g).max() < 1e-12

    def test_gradient(self, rng):
        a, b = rng.uniform(0, 1, (12, 12, 2)), rng.uniform(0, 1, (12, 12, 2))
        _, g = restoration_loss(a, b)
        for idx in [(0, 0, 0), (6, 6, 1), (11, 3, 0)]:
            e = np.zeros_like(a)
            e[idx] = 1e-6
            fd = (restoration_loss(a + e, b)[0] - restoration_loss(a - e, b)[0]) / 2e-6
            assert g[idx] == pytest.approx(fd, rel=1e-5)


class TestDenoise:
    def test_k1_identity(self, rng):
        noisy = rng.uniform(0, 1, (6, 7, 3))
        out = denoise_forward(noisy, init_encoder(1, 8, dtype=np.float64), RopeConfig(8, 6, 7), denoise_config(1))
        np.testing.assert_array_equal(out, noisy)

    def test_dense_equivalence(self, rng):
        noisy = rng.uniform(0, 1, (5, 5, 3))
        enc = init_encoder(1, 8, seed=2, dtype=np.float64)
        rope = RopeConfig(8, 5, 5)
        cfg = denoise_config(5)
        out = denoise_forward(noisy, enc, rope, cfg)
        np.testing.assert_allclose(out, dense_reference(noisy, noisy, enc, rope, cfg), atol=1e-12)

    def test_scale_must_be_one(self):
        with pytest.raises(ConfigError):
            denoise_forward(np.zeros((4, 4, 3)), init_encoder(1, 4), RopeConfig(4, 4, 4), AttnConfig(2, 3))

    def test_psnr_drops_with_sigma(self):
        clean = synthetic_image(0, 0, 32)
        vals = [psnr(corrupt(clean, NoiseSpec("gaussian", s, seed=1)), clean) for s in (0.02, 0.05, 0.1, 0.2)]
        assert vals == sorted(vals, reverse=True)

    def test_train_noise_free_k1(self):
        cfg = denoiser_train_config(stages=[Stage(3, 32, (32,))], kernel=1, channels=8)
        res = train_denoiser(cfg, NoiseSpec("gaussian", 0.0), SyntheticImages(0))
        assert isinstance(res, TrainResult)
        assert max(abs(x) for x in res.losses) < 1e-6

    def test_train_and_evaluate_shapes(self, tmp_path):
        from naf.encoder import load_checkpoint

        cfg = denoiser_train_config(stages=[Stage(2, 16, (16,))], kernel=3, channels=8)
        res = train_denoiser(cfg, NoiseSpec("channel_salt_pepper", 0.1), SyntheticImages(0),
                             checkpoint_dir=str(tmp_path))
        assert len(res.losses) == 2
        _, m = load_checkpoint(tmp_path)
        assert m["noise"]["kind"] == "channel_salt_pepper"
        stats = evaluate_denoiser(res.params, cfg, NoiseSpec("gaussian", 0.1), SyntheticImages(0), n_images=2, size=16)
        assert set(stats) == {"psnr_noisy", "psnr_denoised", "ssim_noisy", "ssim_denoised"}
        assert denoise_with(res.params, np.zeros((8, 8, 3), np.float32), cfg).shape == (8, 8, 3)
