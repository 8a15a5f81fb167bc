"""HTTP service exposing inference, metrics, and rain synthesis.

The app is built around one checkpoint loaded at startup; images travel as
base64-encoded PNG. Domain errors map to 400 (bad input) or 500 (numeric
failure inside the model).
"""

import base64
import binascii
import io

import torch
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from .backbone import MPHM, checkpoint_load, config_to_dict, count_params_flops
from .data import RainParams, load_image, save_image, synth_rain
from .errors import ConfigError, DataError, NumericError, ShapeError
from .metrics import psnr, ssim


def decode_image(image_b64: str) -> torch.Tensor:
    try:
        raw = base64.b64decode(image_b64, validate=True)
    except (binascii.Error, ValueError) as e:
        raise DataError(f"invalid base64 image payload: {e}") from e
    return load_image(io.BytesIO(raw))


def encode_image(x: torch.Tensor) -> str:
    buf = io.BytesIO()
    save_image(x, buf)
    return base64.b64encode(buf.getvalue()).decode("ascii")


class ImagePayload(BaseModel):
    image_b64: str = Field(description="base64-encoded PNG")


class ImageResponse(BaseModel):
    image_b64: str
    width: int
    height: int


class MetricsRequest(BaseModel):
    pred_b64: str
    ref_b64: str


class MetricsResponse(BaseModel):
    psnr: float
    ssim: float


class RainRequest(BaseModel):
    image_b64: str
    density: float = 0.02
    angle: float = 15.0
    length: int = 15
    width: int = 1
    intensity: float = 0.6
    seed: int = 0


class ModelInfo(BaseModel):
    step: int
    params: int
    flops_at_256: int
    config: dict


def create_app(checkpoint_path) -> FastAPI:
    payload = checkpoint_load(checkpoint_path)
    model = MPHM(payload["config"])
    model.load_state_dict(payload["model"])
    model.eval()
    step = payload["step"]
    params, flops = count_params_flops(model.cfg)
    app = FastAPI(title="mphm", description="Rain streak removal service")

    @app.exception_handler(DataError)
    @app.exception_handler(ShapeError)
    @app.exception_handler(ConfigError)
    def bad_input(_request: Request, exc: Exception):
        return JSONResponse(status_code=400, content={"detail": str(exc)})

    @app.exception_handler(NumericError)
    def numeric_failure(_request: Request, exc: Exception):
        return JSONResponse(status_code=500, content={"detail": str(exc)})

    @app.get("/health")
    def health() -> dict:
        return {"status": "ok"}

    @app.get("/model/info", response_model=ModelInfo)
    def model_info() -> ModelInfo:
        return ModelInfo(
            step=step,
            params=params,
            flops_at_256=flops,
            config=config_to_dict(model.cfg),
        )

    @app.post("/derain", response_model=ImageResponse)
    def derain(req: ImagePayload) -> ImageResponse:
        image = decode_image(req.image_b64)
        with torch.no_grad():
            pred = model(image.unsqueeze(0))[0]
        return ImageResponse(
            image_b64=encode_image(pred), width=pred.shape[-1], height=pred.shape[-2]
        )

    @app.post("/metrics", response_model=MetricsResponse)
    def metrics(req: MetricsRequest) -> MetricsResponse:
        pred = decode_image(req.pred_b64)
        ref = decode_image(req.ref_b64)
        return MetricsResponse(psnr=psnr(pred, ref), ssim=ssim(pred, ref))

    @app.post("/synthesize-rain", response_model=ImageResponse)
    def synthesize(req: RainRequest) -> ImageResponse:
        clean = decode_image(req.image_b64)
        params = RainParams(
            streak_density=req.density,
            angle_degrees=req.angle,
            streak_length_px=req.length,
            streak_width_px=req.width,
            intensity=req.intensity,
            seed=req.seed,
        )
        rainy = synth_rain(clean, params)
        return ImageResponse(
            image_b64=encode_image(rainy), width=rainy.shape[-1], height=rainy.shape[-2]
        )

    return app
