"""HTTP edit service.

Wraps the edit pipeline behind three endpoints: POST /api/edit runs a full
edit on base64 PNG payloads, GET /api/styles pages through a class's style
bank thumbnails, and GET /api/health reports readiness plus the class list.
The loaded checkpoints are read-only shared state; per-request RNG derives
from the request seed, so concurrent identical requests return identical
bytes.
"""

from __future__ import annotations

import base64
import io
import logging
import os
import time
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException, Query
from PIL import Image
from pydantic import BaseModel, Field

from .config import PipelineConfig
from .errors import SiedobError, ValidationError
from .pipeline import EditPipeline

log = logging.getLogger(__name__)

CHECKPOINT_DIR_ENV = "SIEDOB_CHECKPOINT_DIR"


class StylePick(BaseModel):
    instance_index: int
    style_index: int


class EditRequest(BaseModel):
    image: str = Field(description="base64 PNG, RGB")
    seg: str = Field(description="base64 PNG, 8-bit single-channel class indices")
    mask: str = Field(description="base64 PNG, binary edit mask")
    styles: list[StylePick] | None = None
    seed: int = 0


class InstanceInfo(BaseModel):
    instance_index: int
    class_name: str
    mode: str
    bbox: list[int]
    used_style_index: int | None = None


class EditResponse(BaseModel):
    image: str
    instances: list[InstanceInfo]
    timing_ms: float


class StyleEntry(BaseModel):
    style_index: int
    thumbnail: str


class HealthResponse(BaseModel):
    status: str
    checkpoint_hash: str
    classes: list[str]


def _b64_to_pil(data: str, what: str) -> Image.Image:
    try:
        return Image.open(io.BytesIO(base64.b64decode(data, validate=True)))
    except Exception:
        raise HTTPException(status_code=400, detail=f"{what} is not a decodable base64 PNG")


def _encode_png_01(image01: np.ndarray) -> str:
    arr = np.clip(image01 * 255.0 + 0.5, 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr, mode="RGB").save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def create_app(
    config: PipelineConfig | None = None,
    checkpoint_dir: str | Path | None = None,
    pipeline: EditPipeline | None = None,
) -> FastAPI:
    """Build the service. The checkpoint directory resolves in order:
    explicit argument, SIEDOB_CHECKPOINT_DIR, then the config's default."""
    app = FastAPI(title="siedob edit service")
    state = {"pipeline": pipeline}
    config = config or PipelineConfig()
    directory = Path(checkpoint_dir or os.environ.get(CHECKPOINT_DIR_ENV) or config.checkpoint_dir)

    if state["pipeline"] is None:
        try:
            state["pipeline"] = EditPipeline.load(config, directory)
            log.info("loaded checkpoints from %s", directory)
        except SiedobError as exc:
            log.warning("service starting without checkpoints: %s", exc)

    def _pipeline() -> EditPipeline:
        if state["pipeline"] is None:
            raise HTTPException(status_code=503, detail="checkpoints not loaded")
        return state["pipeline"]

    @app.get("/api/health", response_model=HealthResponse)
    def health():
        pipe = _pipeline()
        return HealthResponse(
            status="ok",
            checkpoint_hash=pipe.checkpoint_hash(),
            classes=list(pipe.classes.names),
        )

    @app.get("/api/styles", response_model=list[StyleEntry])
    def styles(
        class_name: str = Query(alias="class"),
        offset: int = Query(default=0, ge=0),
        limit: int = Query(default=20, ge=1, le=200),
    ):
        pipe = _pipeline()
        try:
            class_id = pipe.classes.class_index(class_name)
        except ValidationError:
            raise HTTPException(status_code=404, detail=f"unknown class {class_name!r}")
        if pipe.bank is None or pipe.bank.count(class_id) == 0:
            raise HTTPException(status_code=404, detail=f"no styles for class {class_name!r}")
        thumb_dir = directory / "style_thumbs" / str(class_id)
        entries = []
        for i in range(offset, min(offset + limit, pipe.bank.count(class_id))):
            path = thumb_dir / f"{i}.png"
            thumb = base64.b64encode(path.read_bytes()).decode("ascii") if path.exists() else ""
            entries.append(StyleEntry(style_index=i, thumbnail=thumb))
        return entries

    @app.post("/api/edit", response_model=EditResponse)
    def edit(request: EditRequest):
        pipe = _pipeline()
        t0 = time.perf_counter()
        image_pil = _b64_to_pil(request.image, "image")
        seg_pil = _b64_to_pil(request.seg, "seg")
        mask_pil = _b64_to_pil(request.mask, "mask")

        image01 = np.asarray(image_pil.convert("RGB"), dtype=np.float32) / 255.0
        seg_arr = np.asarray(seg_pil)
        mask_arr = np.asarray(mask_pil.convert("L"))
        if seg_arr.ndim != 2:
            raise HTTPException(status_code=400, detail="seg must be a single-channel PNG")
        if image01.shape[:2] != seg_arr.shape or seg_arr.shape != mask_arr.shape:
            raise HTTPException(status_code=400, detail="image/seg/mask dimensions differ")
        if seg_arr.max(initial=0) >= pipe.classes.num_classes:
            raise HTTPException(
                status_code=409,
                detail=f"seg contains unknown class {int(seg_arr.max())} "
                f"(dataset has {pipe.classes.num_classes} classes)",
            )
        mask01 = (mask_arr > 0).astype(np.uint8)

        style_choices = None
        if request.styles:
            style_choices = {p.instance_index: p.style_index for p in request.styles}

        try:
            out01, report = pipe.edit(
                image01, seg_arr.astype(np.int64), mask01,
                style_choices=style_choices, seed=request.seed,
            )
        except (ValidationError, KeyError) as exc:
            raise HTTPException(status_code=400, detail=str(exc))

        if mask01.sum() == 0:
            payload = request.image  # lossless passthrough: output equals input
        else:
            payload = _encode_png_01(out01)
        return EditResponse(
            image=payload,
            instances=[InstanceInfo(**info) for info in report.instances],
            timing_ms=(time.perf_counter() - t0) * 1e3,
        )

    return app
