"""HTTP/WebSocket render service over a baked bundle.

Endpoints:
    GET  /scene/meta   scene and bundle metadata as JSON.
    POST /render       JSON pose request -> PNG image.
    WS   /stream       JSON pose frames in, binary frames out. Each outgoing
                       frame is a little-endian uint32 frame id followed by a
                       JPEG. Rendering is latest-wins: if frames arrive faster
                       than they render, intermediate requests are dropped.

Malformed requests return 400, resolutions the decoder cannot process return
409. The same rules apply on the stream, reported as JSON text frames
{"id": ..., "code": ..., "error": ...} instead of HTTP statuses.
"""
from __future__ import annotations

import asyncio
import io
import json
import struct
from pathlib import Path

import numpy as np
import torch
from fastapi import FastAPI, Request, WebSocket, WebSocketDisconnect
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse, Response
from pydantic import BaseModel, Field

from .export import RenderBundle, fast_render, load_bundle
from .scene import CameraModel

MAX_SIDE = 4096


class RenderRequest(BaseModel):
    """One render: world-to-camera pose, intrinsics, output resolution."""

    pose: list[float] = Field(min_length=16, max_length=16)
    intrinsics: list[float] = Field(min_length=9, max_length=9)
    width: int = Field(ge=1, le=MAX_SIDE)
    height: int = Field(ge=1, le=MAX_SIDE)


class RequestError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code
        self.message = message


def _required_divisor(bundle: RenderBundle) -> int:
    return bundle.decoder.divisor if bundle.decoder is not None else 1


def _camera_from_request(bundle: RenderBundle, req: RenderRequest) -> CameraModel:
    pose = np.asarray(req.pose, dtype=np.float64).reshape(4, 4)
    K = np.asarray(req.intrinsics, dtype=np.float64).reshape(3, 3)
    if not (np.all(np.isfinite(pose)) and np.all(np.isfinite(K))):
        raise RequestError(400, "pose and intrinsics must be finite")
    if not np.allclose(pose[3], [0.0, 0.0, 0.0, 1.0], atol=1e-6):
        raise RequestError(400, "pose must be a 4x4 homogeneous world-to-camera matrix")
    divisor = _required_divisor(bundle)
    if req.width % divisor or req.height % divisor:
        raise RequestError(
            409,
            f"resolution {req.width}x{req.height} is not divisible by the "
            f"decoder stride {divisor}",
        )
    try:
        return CameraModel(K, pose[:3, :3], pose[:3, 3], req.width, req.height)
    except ValueError as exc:
        raise RequestError(400, str(exc)) from exc


def _render_array(bundle: RenderBundle, camera: CameraModel) -> np.ndarray:
    with torch.no_grad():
        image, _, _ = fast_render(bundle, camera, backend="bvh")
    return (image.numpy() * 255.0 + 0.5).astype(np.uint8)


def _encode_png(arr: np.ndarray) -> bytes:
    from PIL import Image

    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return buf.getvalue()


def _encode_jpeg(arr: np.ndarray, quality: int) -> bytes:
    from PIL import Image

    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="JPEG", quality=quality)
    return buf.getvalue()


def create_app(bundle: RenderBundle | str | Path, stream_quality: int = 85) -> FastAPI:
    """Build the service app around a loaded bundle or a .mnb path.

    Args:
        stream_quality: JPEG quality for /stream frames (POST /render always
            returns lossless PNG).
    """
    if not isinstance(bundle, RenderBundle):
        bundle = load_bundle(bundle)

    app = FastAPI(title="lumisurf render service")
    app.state.bundle = bundle
    app.state.stream_quality = int(stream_quality)

    @app.exception_handler(RequestValidationError)
    async def _validation_handler(request: Request, exc: RequestValidationError):
        # Re-encode without the offending input values; they may not be
        # JSON-representable (NaN, bytes).
        detail = [
            {
                "loc": [str(x) for x in e.get("loc", [])],
                "msg": str(e.get("msg", "")),
                "type": str(e.get("type", "")),
            }
            for e in exc.errors()
        ]
        return JSONResponse(status_code=400, content={"detail": detail})

    @app.get("/scene/meta")
    async def scene_meta() -> dict:
        b: RenderBundle = app.state.bundle
        H, W = b.meta["image_size"]
        return {
            "n_views": len(b.cameras),
            "resolution": {"width": int(W), "height": int(H)},
            "image_size": [int(H), int(W)],
            "feature_dim": int(b.features.shape[-1]),
            "decoder_divisor": _required_divisor(b),
            "tau_occ": float(b.tau_occ),
            "bounds": b.meta.get("bounds"),
            "suggested_orbit_radius": b.meta.get("suggested_orbit_radius"),
            "mesh": b.meta.get("mesh"),
            "cameras": [c.to_dict() for c in b.cameras],
        }

    @app.post("/render")
    async def render(req: RenderRequest) -> Response:
        b: RenderBundle = app.state.bundle
        try:
            camera = _camera_from_request(b, req)
        except RequestError as exc:
            return JSONResponse(status_code=exc.code, content={"detail": exc.message})
        loop = asyncio.get_running_loop()
        arr = await loop.run_in_executor(None, _render_array, b, camera)
        return Response(content=_encode_png(arr), media_type="image/png")

    @app.websocket("/stream")
    async def stream(ws: WebSocket) -> None:
        await ws.accept()
        b: RenderBundle = app.state.bundle
        slot: dict = {}
        wakeup = asyncio.Event()
        loop = asyncio.get_running_loop()

        async def worker() -> None:
            while True:
                await wakeup.wait()
                wakeup.clear()
                item = slot.pop("frame", None)
                if item is None:
                    continue
                frame_id, camera = item
                arr = await loop.run_in_executor(None, _render_array, b, camera)
                jpeg = _encode_jpeg(arr, app.state.stream_quality)
                await ws.send_bytes(struct.pack("<I", frame_id & 0xFFFFFFFF) + jpeg)

        task = asyncio.create_task(worker())
        try:
            while True:
                text = await ws.receive_text()
                try:
                    data = json.loads(text)
                    frame_id = int(data["id"])
                    req = RenderRequest(
                        pose=data["pose"],
                        intrinsics=data["intrinsics"],
                        width=data["width"],
                        height=data["height"],
                    )
                    camera = _camera_from_request(b, req)
                except RequestError as exc:
                    await ws.send_text(
                        json.dumps({"id": data.get("id"), "code": exc.code, "error": exc.message})
                    )
                    continue
                except Exception as exc:  # noqa: BLE001 - malformed client frame
                    await ws.send_text(json.dumps({"id": None, "code": 400, "error": str(exc)}))
                    continue
                # Latest wins: overwrite whatever render request is pending.
                slot["frame"] = (frame_id, camera)
                wakeup.set()
        except WebSocketDisconnect:
            pass
        finally:
            task.cancel()

    return app
