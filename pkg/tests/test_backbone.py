import json

import pytest
import torch

from mphm.backbone import (
    MPHM,
    MPHMNet,
    ModelConfig,
    checkpoint_load,
    checkpoint_save,
    config_from_dict,
    config_hash,
    config_to_dict,
    count_params_flops,
)
from mphm.errors import CheckpointError, ConfigError, NumericError
from mphm.hmm import HmmConfig
from mphm.pfi import PfiConfig


def tiny_cfg(**kw):
    """Smallest full-topology model: every stage one block, 8 base channels."""
    base = dict(
        base_channels=8,
        stage_depths=(1, 1, 1, 1, 1),
        hmm=HmmConfig(channels=8, d_state=4, vssm_expand=1, ffcm_hidden_factor=1.0),
        pfi=PfiConfig(channels=8, heads=2, gdfn_expansion=1.0),
    )
    base.update(kw)
    return ModelConfig(**base)


class TestModelConfig:
    def test_default_plan_mirrors_base_channels(self):
        cfg = ModelConfig()
        assert cfg.channel_plan == (32, 64, 128, 64, 32)
        assert cfg.n_down == 2
        assert cfg.n_injection_sites == 3

    def test_even_stage_count_rejected(self):
        with pytest.raises(ConfigError):
            ModelConfig(stage_depths=(4, 6, 6, 4))

    def test_zero_depth_rejected(self):
        with pytest.raises(ConfigError):
            ModelConfig(stage_depths=(1, 0, 1))

    def test_asymmetric_plan_rejected(self):
        with pytest.raises(ConfigError):
            ModelConfig(stage_depths=(1, 1, 1), channel_plan=(8, 16, 32))

    def test_plan_length_mismatch_rejected(self):
        with pytest.raises(ConfigError):
            ModelConfig(stage_depths=(1, 1, 1), channel_plan=(8, 16, 16, 8))

    def test_channels_not_divisible_by_4_rejected(self):
        with pytest.raises(ConfigError):
            ModelConfig(base_channels=6)

    def test_heads_must_divide_channels(self):
        with pytest.raises(ConfigError):
            ModelConfig(
                base_channels=8,
                stage_depths=(1, 1, 1),
                stage_heads=(3, 3, 3),
                hmm=HmmConfig(channels=8),
                pfi=PfiConfig(channels=8, heads=1),
            )

    def test_injection_sites_finest_first(self):
        cfg = ModelConfig()
        assert cfg.injection_site_channels() == [32, 64, 128]

    def test_padded_hw(self):
        cfg = ModelConfig()
        assert cfg.padded_hw(64, 64) == (64, 64)
        assert cfg.padded_hw(67, 93) == (68, 96)

    def test_site_shapes_require_padded_dims(self):
        cfg = ModelConfig()
        with pytest.raises(ConfigError):
            cfg.injection_site_shapes(67, 93)
        shapes = cfg.injection_site_shapes(64, 64)
        assert shapes == [(32, 64, 64), (64, 32, 32), (128, 16, 16)]

    def test_single_stage_plan(self):
        cfg = ModelConfig(base_channels=8, stage_depths=(2,),
                          hmm=HmmConfig(channels=8), pfi=PfiConfig(channels=8, heads=2))
        assert cfg.n_down == 0
        assert cfg.n_injection_sites == 1
        assert cfg.padded_hw(13, 5) == (13, 5)


class TestForward:
    def test_shape_contract_aligned(self):
        torch.manual_seed(0)
        model = MPHM(tiny_cfg()).eval()
        x = torch.rand(2, 3, 64, 64)
        with torch.no_grad():
            y = model(x)
        assert y.shape == x.shape
        assert y.min() >= 0.0 and y.max() <= 1.0

    def test_shape_contract_unaligned(self):
        # 67x93 needs internal padding to 68x96 and cropping back
        torch.manual_seed(0)
        model = MPHM(tiny_cfg()).eval()
        x = torch.rand(1, 3, 67, 93)
        with torch.no_grad():
            y = model(x)
        assert y.shape == x.shape

    def test_zero_residual_head_is_identity(self):
        torch.manual_seed(0)
        model = MPHM(tiny_cfg()).eval()
        with torch.no_grad():
            model.net.out_conv.weight.zero_()
            model.net.out_conv.bias.zero_()
        x = torch.rand(1, 3, 32, 48)
        with torch.no_grad():
            y = model(x)
        assert torch.equal(y, x)

    def test_zero_residual_identity_unaligned(self):
        torch.manual_seed(1)
        model = MPHM(tiny_cfg()).eval()
        with torch.no_grad():
            model.net.out_conv.weight.zero_()
            model.net.out_conv.bias.zero_()
        x = torch.rand(1, 3, 19, 27)
        with torch.no_grad():
            y = model(x)
        assert torch.equal(y, x)

    def test_training_mode_skips_clamp(self):
        torch.manual_seed(0)
        model = MPHM(tiny_cfg()).train()
        x = torch.rand(1, 3, 32, 32)
        y = model(x)
        # residual output is unconstrained; some values should leave [0, 1]
        assert y.requires_grad
        assert (y.min() < 0.0) or (y.max() > 1.0) or not torch.equal(y, y.clamp(0, 1))

    def test_priors_disabled_runs_without_provider(self):
        cfg = tiny_cfg(pfi=PfiConfig(channels=8, heads=2, inject_visual=False, inject_text=False))
        model = MPHM(cfg).eval()
        assert model.provider is None and model.visual_adapter is None
        x = torch.rand(1, 3, 32, 32)
        with torch.no_grad():
            y = model(x)
        assert y.shape == x.shape

    def test_priors_change_output(self):
        torch.manual_seed(0)
        model = MPHM(tiny_cfg()).eval()
        # injection heads are zero-initialized; nudge them so priors act
        with torch.no_grad():
            for pfi in model.net.pfis:
                for p in pfi.parameters():
                    if p.abs().max() == 0:
                        p.add_(0.05 * torch.randn_like(p))
        x = torch.rand(1, 3, 32, 32)
        bundle = model.build_bundle(x)
        altered = type(bundle)(
            P_v_stages=[2.0 * p for p in bundle.P_v_stages],
            P_t_stages=list(bundle.P_t_stages),
        )
        with torch.no_grad():
            y1 = model.net(x, bundle, clamp=False)
            y2 = model.net(x, altered, clamp=False)
        assert not torch.allclose(y1, y2)

    def test_nan_input_raises_numeric_error(self):
        model = MPHM(tiny_cfg(pfi=PfiConfig(
            channels=8, heads=2, inject_visual=False, inject_text=False))).eval()
        x = torch.rand(1, 3, 32, 32)
        x[0, 0, 3, 3] = float("nan")
        with pytest.raises(NumericError):
            with torch.no_grad():
                model(x)

    def test_determinism_same_seed_same_model(self):
        torch.manual_seed(7)
        m1 = MPHM(tiny_cfg())
        torch.manual_seed(7)
        m2 = MPHM(tiny_cfg())
        for (n1, p1), (n2, p2) in zip(m1.state_dict().items(), m2.state_dict().items()):
            assert n1 == n2
            assert torch.equal(p1, p2), n1

    def test_determinism_repeat_forward(self):
        torch.manual_seed(0)
        model = MPHM(tiny_cfg()).eval()
        x = torch.rand(1, 3, 32, 32)
        with torch.no_grad():
            y1 = model(x)
            y2 = model(x)
        assert torch.equal(y1, y2)


class TestGradients:
    def test_full_backbone_gradcheck(self):
        # fixed prior bundle: encoders are frozen, so the bundle is a constant
        torch.manual_seed(0)
        cfg = tiny_cfg()
        model = MPHM(cfg).double()
        x = torch.rand(1, 3, 16, 16, dtype=torch.double)
        bundle = model.build_bundle(x)
        bundle = type(bundle)(
            P_v_stages=[p.detach() for p in bundle.P_v_stages],
            P_t_stages=[p.detach() for p in bundle.P_t_stages],
        )

        def f(t):
            return model.net(t, bundle, clamp=False).sum()

        x.requires_grad_(True)
        assert torch.autograd.gradcheck(
            f, (x,), eps=1e-5, atol=1e-2, rtol=1e-2, fast_mode=True
        )

    def test_backward_reaches_all_parameters(self):
        torch.manual_seed(0)
        model = MPHM(tiny_cfg()).train()
        x = torch.rand(1, 3, 32, 32)
        model(x).mean().backward()
        missing = [
            n for n, p in model.named_parameters()
            if p.requires_grad and p.grad is None
        ]
        assert missing == []


class TestConfigSerialization:
    def test_round_trip(self):
        cfg = tiny_cfg()
        d = config_to_dict(cfg)
        back = config_from_dict(json.loads(json.dumps(d)))
        assert back == cfg
        assert config_hash(back) == config_hash(cfg)

    def test_hash_changes_with_fields(self):
        a = config_hash(tiny_cfg())
        b = config_hash(tiny_cfg(prior_seed=1))
        assert a != b


class TestCheckpoints:
    def test_round_trip(self, tmp_path):
        torch.manual_seed(0)
        cfg = tiny_cfg()
        model = MPHM(cfg)
        opt = torch.optim.Adam(model.parameters(), lr=1e-3)
        path = tmp_path / "ckpt.pt"
        checkpoint_save(path, model, cfg, optimizer=opt, step=17, extra={"note": "x"})
        payload = checkpoint_load(path, expected_cfg=cfg)
        assert payload["step"] == 17
        assert payload["extra"] == {"note": "x"}
        assert payload["config"] == cfg
        m2 = MPHM(payload["config"])
        m2.load_state_dict(payload["model"])
        for k, v in model.state_dict().items():
            assert torch.equal(v, m2.state_dict()[k]), k

    def test_mismatch_names_differing_field(self, tmp_path):
        cfg = tiny_cfg()
        path = tmp_path / "ckpt.pt"
        checkpoint_save(path, MPHM(cfg), cfg, step=1)
        other = tiny_cfg(prior_seed=123)
        with pytest.raises(CheckpointError, match="prior_seed"):
            checkpoint_load(path, expected_cfg=other)

    def test_mismatch_names_nested_field(self, tmp_path):
        cfg = tiny_cfg()
        path = tmp_path / "ckpt.pt"
        checkpoint_save(path, MPHM(cfg), cfg, step=1)
        other = tiny_cfg(
            hmm=HmmConfig(channels=8, d_state=4, vssm_expand=1, ffcm_hidden_factor=2.5)
        )
        with pytest.raises(CheckpointError, match="hmm.ffcm_hidden_factor"):
            checkpoint_load(path, expected_cfg=other)

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError, match="not found"):
            checkpoint_load(tmp_path / "nope.pt")

    def test_truncated_file(self, tmp_path):
        cfg = tiny_cfg()
        path = tmp_path / "ckpt.pt"
        checkpoint_save(path, MPHM(cfg), cfg)
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) // 3])
        with pytest.raises(CheckpointError, match="corrupt"):
            checkpoint_load(path, expected_cfg=cfg)

    def test_foreign_payload_rejected(self, tmp_path):
        path = tmp_path / "other.pt"
        torch.save({"weights": torch.zeros(3)}, path)
        with pytest.raises(CheckpointError, match="layout"):
            checkpoint_load(path)

    def test_wrong_version_rejected(self, tmp_path):
        cfg = tiny_cfg()
        path = tmp_path / "ckpt.pt"
        checkpoint_save(path, MPHM(cfg), cfg)
        payload = torch.load(path, weights_only=False)
        payload["version"] = 99
        torch.save(payload, path)
        with pytest.raises(CheckpointError, match="version"):
            checkpoint_load(path, expected_cfg=cfg)

    def test_overwrite_existing(self, tmp_path):
        cfg = tiny_cfg()
        model = MPHM(cfg)
        path = tmp_path / "ckpt.pt"
        checkpoint_save(path, model, cfg, step=1)
        checkpoint_save(path, model, cfg, step=2)
        assert checkpoint_load(path)["step"] == 2

    def test_load_without_expected_config_skips_hash_check(self, tmp_path):
        cfg = tiny_cfg()
        path = tmp_path / "ckpt.pt"
        checkpoint_save(path, MPHM(cfg), cfg, step=5)
        payload = checkpoint_load(path)
        assert payload["config"] == cfg


class TestComplexity:
    def test_default_config_in_reporting_band(self):
        params, macs = count_params_flops(ModelConfig())
        assert 7.71e6 <= params <= 12.85e6, f"params {params/1e6:.2f}M out of band"
        assert 46.42e9 <= macs <= 77.36e9, f"macs {macs/1e9:.2f}G out of band"

    def test_param_count_matches_built_model(self):
        cfg = tiny_cfg()
        params, _ = count_params_flops(cfg, input_hw=(64, 64))
        model = MPHM(cfg)
        assert params == sum(p.numel() for p in model.parameters())

    def test_macs_scale_with_resolution(self):
        cfg = tiny_cfg()
        _, m128 = count_params_flops(cfg, input_hw=(128, 128))
        _, m256 = count_params_flops(cfg, input_hw=(256, 256))
        assert m256 > 2 * m128

    def test_wider_ffcm_costs_more(self):
        slim = tiny_cfg()
        wide = tiny_cfg(
            hmm=HmmConfig(channels=8, d_state=4, vssm_expand=1, ffcm_hidden_factor=4.0)
        )
        p0, m0 = count_params_flops(slim, input_hw=(64, 64))
        p1, m1 = count_params_flops(wide, input_hw=(64, 64))
        assert p1 > p0 and m1 > m0
