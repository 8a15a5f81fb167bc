import numpy as np
import pytest
import torch

from mphm.errors import ConfigError, DataError, ShapeError
from mphm.priors import (
    ClipAdapter,
    DinoV2Adapter,
    ExternalFeatureProvider,
    MockEncoderProvider,
    PriorBundle,
    build_prior_bundle,
    save_prior_file,
    provider_registry,
)

STAGES = [(32, 64, 64), (64, 32, 32), (128, 16, 16)]


class TestMockVisualEncoder:
    def test_64px_image_grid(self):
        prov = MockEncoderProvider(seed=0)
        raw = prov.encode_visual(torch.rand(3, 64, 64))
        assert raw.grid_hw == (4, 4)
        assert raw.tokens.shape == (16, 384)

    def test_deterministic(self):
        img = torch.rand(3, 32, 48)
        a = MockEncoderProvider(seed=7).encode_visual(img)
        b = MockEncoderProvider(seed=7).encode_visual(img)
        assert torch.equal(a.tokens, b.tokens)

    def test_patch_locality(self):
        prov = MockEncoderProvider(seed=0)
        torch.manual_seed(0)
        img1 = torch.rand(3, 64, 64)
        img2 = img1.clone()
        img2[:, 16:32, 32:48] += 0.5  # patch at grid cell (1, 2)
        t1 = prov.encode_visual(img1).tokens
        t2 = prov.encode_visual(img2).tokens
        changed = (t1 - t2).abs().sum(-1) > 1e-6
        assert changed.tolist() == [i == 1 * 4 + 2 for i in range(16)]

    def test_too_small_image(self):
        with pytest.raises(ShapeError):
            MockEncoderProvider().encode_visual(torch.rand(3, 8, 8))

    def test_nonmultiple_size_drops_remainder(self):
        raw = MockEncoderProvider().encode_visual(torch.rand(3, 67, 93))
        assert raw.grid_hw == (4, 5)


class TestMockTextEncoder:
    def test_default_prompt_stable(self):
        a = MockEncoderProvider(seed=0).encode_text("No rain")
        b = MockEncoderProvider(seed=0).encode_text("No rain")
        assert a.tokens.shape == (1, 512)
        assert torch.equal(a.tokens, b.tokens)

    def test_distinct_prompts_distinct_vectors(self):
        prov = MockEncoderProvider()
        vecs = [prov.encode_text(p).tokens for p in ("No rain", "heavy rain", "drizzle")]
        for i in range(len(vecs)):
            for j in range(i + 1, len(vecs)):
                assert not torch.allclose(vecs[i], vecs[j])

    def test_unit_norm(self):
        t = MockEncoderProvider().encode_text("No rain").tokens
        assert torch.isclose(t.norm(), torch.tensor(1.0), atol=1e-6)

    def test_empty_prompt_rejected(self):
        with pytest.raises(ConfigError):
            MockEncoderProvider().encode_text("")


class TestDinoV2Adapter:
    def test_stage_shape_contract(self):
        torch.manual_seed(0)
        ad = DinoV2Adapter([32, 64, 128])
        out = ad(torch.randn(2, 4, 4, 384), STAGES)
        assert [tuple(o.shape) for o in out] == [
            (2, 32, 64, 64), (2, 64, 32, 32), (2, 128, 16, 16),
        ]

    def test_constant_grid_gives_constant_maps(self):
        ad = DinoV2Adapter([32, 64, 128])
        grid = torch.full((1, 4, 4, 384), 0.25)
        for o in ad(grid, STAGES):
            flat = o.flatten(2)
            assert torch.allclose(flat, flat[..., :1].expand_as(flat), atol=1e-4)

    def test_non_halving_stages_rejected(self):
        ad = DinoV2Adapter([32, 64])
        with pytest.raises(ConfigError):
            ad(torch.randn(1, 2, 2, 384), [(32, 64, 64), (64, 30, 30)])

    def test_channel_mismatch_rejected(self):
        ad = DinoV2Adapter([32, 64])
        with pytest.raises(ConfigError):
            ad(torch.randn(1, 2, 2, 384), [(16, 64, 64), (64, 32, 32)])

    def test_gradcheck(self):
        torch.manual_seed(1)
        ad = DinoV2Adapter([4, 8], d_v=6).double()
        grid = torch.randn(1, 2, 2, 6, dtype=torch.float64, requires_grad=True)

        def f(g):
            return sum(o.sum() for o in ad(g, [(4, 8, 8), (8, 4, 4)]))

        assert torch.autograd.gradcheck(f, (grid,), rtol=1e-3, atol=1e-6)


class TestClipAdapter:
    def test_per_stage_channel_dims(self):
        ad = ClipAdapter([32, 64, 128])
        out = ad(torch.randn(2, 1, 512))
        assert [o.shape[-1] for o in out] == [32, 64, 128]
        assert all(o.shape[:2] == (2, 1) for o in out)

    def test_zero_input_zero_bias_gives_zero(self):
        ad = ClipAdapter([8, 16])
        with torch.no_grad():
            ad.down.bias.zero_()
            for h in ad.heads:
                h.bias.zero_()
        for o in ad(torch.zeros(1, 1, 512)):
            assert torch.allclose(o, torch.zeros_like(o))

    def test_deterministic(self):
        ad = ClipAdapter([8])
        x = torch.randn(1, 2, 512)
        assert torch.equal(ad(x)[0], ad(x)[0])


class TestProviderRegistry:
    def test_mock(self):
        assert isinstance(provider_registry("mock"), MockEncoderProvider)

    def test_unknown_name(self):
        with pytest.raises(ConfigError):
            provider_registry("dinov2")

    def test_external_roundtrip(self, tmp_path):
        path = tmp_path / "feats.npz"
        vis = np.random.default_rng(0).normal(size=(4, 4, 384)).astype(np.float32)
        txt = np.random.default_rng(1).normal(size=(2, 512)).astype(np.float32)
        save_prior_file(path, vis, txt)
        prov = provider_registry("external", path=path)
        raw_v = prov.encode_visual(torch.rand(3, 64, 64))
        raw_t = prov.encode_text("No rain")
        assert raw_v.grid_hw == (4, 4)
        assert raw_v.tokens.shape == (16, 384)
        assert raw_t.tokens.shape == (2, 512)
        np.testing.assert_allclose(raw_v.as_grid().numpy(), vis)

    def test_external_dim_mismatch_names_dims(self, tmp_path):
        path = tmp_path / "bad.npz"
        np.savez(
            path,
            version=np.array(1),
            visual_tokens=np.zeros((4, 4, 100), np.float32),
            text_tokens=np.zeros((1, 512), np.float32),
        )
        with pytest.raises(DataError, match="384"):
            ExternalFeatureProvider(path)

    def test_external_bad_version(self, tmp_path):
        path = tmp_path / "old.npz"
        np.savez(
            path,
            version=np.array(99),
            visual_tokens=np.zeros((2, 2, 384), np.float32),
            text_tokens=np.zeros((1, 512), np.float32),
        )
        with pytest.raises(DataError, match="version"):
            ExternalFeatureProvider(path)

    def test_external_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            ExternalFeatureProvider(tmp_path / "nope.npz")


class TestPriorBundle:
    def test_build_and_validate(self):
        torch.manual_seed(2)
        prov = MockEncoderProvider()
        vad = DinoV2Adapter([c for c, _, _ in STAGES])
        tad = ClipAdapter([c for c, _, _ in STAGES])
        bundle = build_prior_bundle(torch.rand(2, 3, 64, 64), prov, vad, tad, STAGES)
        bundle.validate(STAGES)
        assert len(bundle.P_v_stages) == 3
        assert bundle.P_t_stages[0].shape == (2, 1, 32)

    def test_validate_rejects_wrong_stage_dims(self):
        bundle = PriorBundle(
            P_v_stages=[torch.zeros(1, 32, 64, 64)],
            P_t_stages=[torch.zeros(1, 1, 32)],
        )
        with pytest.raises(ShapeError):
            bundle.validate(STAGES)

    def test_providers_hold_no_parameters(self):
        # frozen by construction: nothing for the optimizer to touch
        prov = MockEncoderProvider()
        assert not isinstance(prov, torch.nn.Module)
        raw = prov.encode_visual(torch.rand(3, 32, 32))
        assert not raw.tokens.requires_grad
