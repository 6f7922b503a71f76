import numpy as np
import pytest
from conftest import random_instance
from hypothesis import given
from hypothesis import strategies as st

from naf.attention import AttnConfig, compute_keys
from naf.encoder import encode
from naf.errors import BoundsError, ConfigError
from naf.rope import RopeConfig, apply_rope
from naf.spectral import (
    attention_map,
    channel_decomposition,
    channel_trig_maps,
    export_attention_map,
    mean_trig_maps,
    polar_form,
    pooled_score,
)
from naf.tensor import load_npy


class TestDecomposition:
    def test_self_pair(self, rng):
        rope = RopeConfig(8, 4, 4)
        g = rng.standard_normal((4, 4, 8))
        terms = channel_decomposition(g, rope, (1, 2), (1, 2))
        assert len(terms) == 4 and all(t.delta_phi == 0 for t in terms)
        assert sum(t.a_c for t in terms) == pytest.approx(g[1, 2] @ g[1, 2])

    def test_parallel_pairs(self):
        rope = RopeConfig(8, 5, 5)
        g = np.ones((5, 5, 8))
        for t in channel_decomposition(g, rope, (0, 0), (3, 4)):
            assert t.cross == 0
            assert t.a_c == pytest.approx(t.dot * np.cos(t.delta_phi))

    @given(st.integers(0, 2**32 - 1))
    def test_sum_identity(self, seed):
        rng = np.random.default_rng(seed)
        rope = RopeConfig(16, 6, 7)
        g = rng.standard_normal((6, 7, 16))
        rg = apply_rope(g, rope)
        p, q = tuple(rng.integers(0, (6, 7))), tuple(rng.integers(0, (6, 7)))
        terms = channel_decomposition(g, rope, p, q)
        assert abs(sum(t.a_c for t in terms) - rg[p] @ rg[q]) < 1e-5
        for t in terms:
            assert abs(t.a_c - (t.dot * np.cos(t.delta_phi) - t.cross * np.sin(t.delta_phi))) < 1e-6

    def test_bounds(self, rng):
        with pytest.raises(BoundsError):
            channel_decomposition(rng.standard_normal((3, 3, 4)), RopeConfig(4, 3, 3), (0, 0), (3, 0))


class TestPolar:
    def test_zero_vector(self, rng):
        g = rng.standard_normal((3, 3, 4))
        g[0, 0] = 0
        t = polar_form(g, RopeConfig(4, 3, 3), (0, 0), (2, 1), 1)
        assert t.r_p == 0 and t.psi == 0 and t.a_c == 0

    def test_unit_vectors(self):
        g = np.zeros((3, 3, 4))
        g[..., 0] = 1.0
        assert polar_form(g, RopeConfig(4, 3, 3), (1, 1), (1, 1), 0).a_c == pytest.approx(1.0)

    @given(st.integers(0, 2**32 - 1))
    def test_identity(self, seed):
        rng = np.random.default_rng(seed)
        rope = RopeConfig(8, 5, 5)
        g = rng.standard_normal((5, 5, 8))
        p, q = tuple(rng.integers(0, 5, 2)), tuple(rng.integers(0, 5, 2))
        terms = channel_decomposition(g, rope, p, q)
        for c in range(4):
            assert abs(polar_form(g, rope, p, q, c).a_c - terms[c].a_c) < 1e-5

    def test_bad_pair(self, rng):
        with pytest.raises(BoundsError):
            polar_form(rng.standard_normal((3, 3, 4)), RopeConfig(4, 3, 3), (0, 0), (0, 0), 2)


class TestPooledScore:
    def test_scale_one(self, rng):
        rope = RopeConfig(8, 4, 4)
        g = rng.standard_normal((4, 4, 8))
        direct = sum(t.a_c for t in channel_decomposition(g, rope, (0, 3), (2, 1)))
        assert pooled_score(g, rope, (0, 3), (2, 1), 1) == pytest.approx(direct)

    def test_constant_guidance_center(self):
        # 3x3 grid, p at the center: every relative phase is zero against itself,
        # and for the cell covering the whole grid the score is the mean of cosines
        rope = RopeConfig(4, 3, 3)
        g = np.zeros((3, 3, 4))
        g[..., 0] = 1.0
        g[..., 2] = 1.0
        cy = np.cos(2 * np.pi * np.array([-1.0, 0.0, 1.0]))
        expected = (cy.mean() + cy.mean())
        assert pooled_score(g, rope, (1, 1), (0, 0), 3) == pytest.approx(expected, abs=1e-12)
        assert pooled_score(g, rope, (1, 1), (1, 1), 1) == pytest.approx(2.0)

    @pytest.mark.parametrize("s", [1, 2, 3])
    def test_equals_unscaled_logits(self, s, rng):
        f_lr, image, enc, rope = random_instance(rng, lr=(3, 3), s=s)
        g = encode(image, enc)
        q = apply_rope(g, rope)
        keys = compute_keys(q, s, "avgpool")
        for _ in range(10):
            p = tuple(rng.integers(0, 3 * s, 2))
            cell = tuple(rng.integers(0, 3, 2))
            assert abs(pooled_score(g, rope, p, cell, s) - q[p] @ keys[cell]) < 1e-5

    def test_bad_cell(self, rng):
        with pytest.raises(BoundsError):
            pooled_score(rng.standard_normal((4, 4, 4)), RopeConfig(4, 4, 4), (0, 0), (2, 0), 2)


class TestTrigMaps:
    def test_center(self):
        cos_map, sin_map = mean_trig_maps(RopeConfig(32, 9, 9), 5)
        assert cos_map[2, 2] == 1.0 and sin_map[2, 2] == 0.0

    def test_sin_antisymmetric(self):
        _, sin_map = mean_trig_maps(RopeConfig(64, 20, 20), 7, stride=2)
        assert np.abs(sin_map + sin_map[::-1, ::-1]).max() < 1e-9

    def test_even_window(self):
        with pytest.raises(ConfigError):
            mean_trig_maps(RopeConfig(8, 4, 4), 4)

    def test_matches_relative_phase(self):
        from naf.rope import relative_phase

        rope = RopeConfig(16, 9, 9)
        cos_map, sin_map = mean_trig_maps(rope, 3)
        d = relative_phase(rope, (4, 4), (5, 3))
        assert cos_map[2, 0] == pytest.approx(np.cos(d).mean())
        assert sin_map[2, 0] == pytest.approx(np.sin(d).mean())

    def test_channel_maps(self):
        rope = RopeConfig(8, 9, 9)
        c, s = channel_trig_maps(rope, 3, 0)
        assert c[1, 1] == 1.0 and s[1, 1] == 0.0
        # pair 0 encodes rows only
        np.testing.assert_array_equal(c[:, 0], c[:, 2])


class TestAttentionMap:
    def test_sums_to_one_and_export(self, tmp_path, rng):
        _, image, enc, rope = random_instance(rng, lr=(4, 4), s=2)
        cfg = AttnConfig(2, 3)
        wts = export_attention_map(image, enc, rope, cfg, (0, 5), tmp_path / "m.png")
        stored = load_npy(tmp_path / "m.npy")
        assert stored.shape == (3, 3, 1)
        assert abs(stored.sum() - 1) < 1e-6
        np.testing.assert_allclose(stored[:, :, 0], wts, rtol=1e-6)
        assert (tmp_path / "m.png").stat().st_size > 0

    def test_k1(self, rng):
        _, image, enc, rope = random_instance(rng, lr=(3, 3), s=2)
        assert attention_map(image, enc, rope, AttnConfig(2, 1), (2, 2)).tolist() == [[1.0]]

    def test_constant_guidance_mirror_symmetric(self):
        # identical query and key vectors leave only the cosine terms, which are even
        from naf.encoder import init_encoder

        enc = init_encoder(1, 16, seed=0, dtype=np.float64)
        image = np.full((11, 11, 3), 0.5)
        wts = attention_map(image, enc, RopeConfig(16, 11, 11), AttnConfig(1, 5), (5, 5))
        assert np.abs(wts - wts[::-1]).max() < 1e-6
        assert np.abs(wts - wts[:, ::-1]).max() < 1e-6
        assert wts.argmax() == 12

    def test_bounds(self, rng):
        _, image, enc, rope = random_instance(rng, lr=(3, 3), s=2)
        with pytest.raises(BoundsError):
            attention_map(image, enc, rope, AttnConfig(2, 3), (6, 0))
