import base64

import pytest
import torch
from fastapi.testclient import TestClient

from mphm.backbone import MPHM, ModelConfig, checkpoint_save
from mphm.errors import CheckpointError, NumericError
from mphm.hmm import HmmConfig
from mphm.metrics import psnr, ssim
from mphm.pfi import PfiConfig
from mphm.service import create_app, decode_image, encode_image


def tiny_cfg():
    return ModelConfig(
        base_channels=8,
        stage_depths=(1, 1, 1, 1, 1),
        hmm=HmmConfig(channels=8, d_state=4, vssm_expand=1, ffcm_hidden_factor=1.0),
        pfi=PfiConfig(channels=8, heads=2, gdfn_expansion=1.0),
    )


@pytest.fixture(scope="module")
def client(tmp_path_factory):
    ckpt = tmp_path_factory.mktemp("svc") / "model.pt"
    torch.manual_seed(0)
    model = MPHM(tiny_cfg())
    checkpoint_save(ckpt, model, model.cfg, step=7)
    return TestClient(create_app(ckpt))


def image_b64(seed=0, h=24, w=24):
    img = torch.rand(3, h, w, generator=torch.Generator().manual_seed(seed))
    return encode_image(img)


class TestEndpoints:
    def test_health(self, client):
        r = client.get("/health")
        assert r.status_code == 200 and r.json() == {"status": "ok"}

    def test_model_info(self, client):
        r = client.get("/model/info")
        assert r.status_code == 200
        body = r.json()
        assert body["step"] == 7
        assert body["params"] > 0 and body["flops_at_256"] > 0
        assert body["config"]["base_channels"] == 8

    def test_derain_round_trip(self, client):
        r = client.post("/derain", json={"image_b64": image_b64(1)})
        assert r.status_code == 200
        body = r.json()
        assert (body["height"], body["width"]) == (24, 24)
        out = decode_image(body["image_b64"])
        assert out.shape == (3, 24, 24)
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_derain_deterministic(self, client):
        payload = {"image_b64": image_b64(2)}
        a = client.post("/derain", json=payload).json()["image_b64"]
        b = client.post("/derain", json=payload).json()["image_b64"]
        assert a == b

    def test_derain_odd_size(self, client):
        r = client.post("/derain", json={"image_b64": image_b64(3, h=19, w=27)})
        assert r.status_code == 200
        assert (r.json()["height"], r.json()["width"]) == (19, 27)

    def test_metrics_identical_images(self, client):
        b64 = image_b64(4)
        r = client.post("/metrics", json={"pred_b64": b64, "ref_b64": b64})
        assert r.status_code == 200
        assert r.json()["psnr"] == 100.0
        assert r.json()["ssim"] == pytest.approx(1.0, abs=1e-9)

    def test_metrics_match_library(self, client):
        a, b = image_b64(5), image_b64(6)
        r = client.post("/metrics", json={"pred_b64": a, "ref_b64": b})
        pred, ref = decode_image(a), decode_image(b)
        assert r.json()["psnr"] == pytest.approx(psnr(pred, ref), rel=1e-9)
        assert r.json()["ssim"] == pytest.approx(ssim(pred, ref), rel=1e-9)

    def test_synthesize_rain_zero_density_is_identity(self, client):
        b64 = image_b64(7)
        r = client.post("/synthesize-rain", json={"image_b64": b64, "density": 0.0})
        assert r.status_code == 200
        assert r.json()["image_b64"] == b64

    def test_synthesize_rain_brightens(self, client):
        b64 = image_b64(8)
        r = client.post("/synthesize-rain", json={"image_b64": b64, "seed": 3})
        rainy = decode_image(r.json()["image_b64"])
        clean = decode_image(b64)
        assert (rainy >= clean - 1e-6).all()
        assert rainy.mean() > clean.mean()


class TestErrors:
    def test_invalid_base64(self, client):
        r = client.post("/derain", json={"image_b64": "@@not-base64@@"})
        assert r.status_code == 400
        assert "base64" in r.json()["detail"]

    def test_valid_base64_invalid_png(self, client):
        junk = base64.b64encode(b"never a png").decode("ascii")
        r = client.post("/derain", json={"image_b64": junk})
        assert r.status_code == 400

    def test_bad_rain_params(self, client):
        r = client.post("/synthesize-rain", json={"image_b64": image_b64(9), "density": 2.0})
        assert r.status_code == 400
        assert "density" in r.json()["detail"]

    def test_missing_field_schema_error(self, client):
        assert client.post("/metrics", json={"pred_b64": image_b64(10)}).status_code == 422

    def test_numeric_failure_is_500(self, client, monkeypatch):
        def blow_up(self, x, clamp=None):
            raise NumericError("synthetic overflow")

        monkeypatch.setattr(MPHM, "forward", blow_up)
        r = client.post("/derain", json={"image_b64": image_b64(11)})
        assert r.status_code == 500
        assert "overflow" in r.json()["detail"]

    def test_corrupt_checkpoint_refused(self, tmp_path):
        bad = tmp_path / "bad.pt"
        bad.write_bytes(b"torchn't")
        with pytest.raises(CheckpointError):
            create_app(bad)
