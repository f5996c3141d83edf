"""HTTP refocus service: stateless render endpoints over an immutable
checkpoint, plus static serving of the viewer bundle. Responses are pure
functions of (checkpoint, query) and are cached by (view, f, q, map)."""

from __future__ import annotations

import io
import threading
from pathlib import Path
from typing import Optional

import numpy as np
from fastapi import FastAPI, HTTPException, Response
from fastapi.staticfiles import StaticFiles
from PIL import Image

from .camera_init import nearest_rank_percentile, view_depths
from .core import LensParams
from .rasterizer import RasterSettings, render
from .scene_io import Checkpoint, load_checkpoint

MAPS = ("color", "depth", "coc")


def _to_png(img: np.ndarray) -> bytes:
    q = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    if q.ndim == 2:
        q = np.repeat(q[:, :, None], 3, axis=2)
    buf = io.BytesIO()
    Image.fromarray(q, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


class RenderService:
    """Owns the read-only checkpoint, a render cache, and a worker-bounded
    render path safe for concurrent requests."""

    def __init__(self, checkpoint: Checkpoint, workers: int = 4):
        self.ckpt = checkpoint
        self.settings = RasterSettings()
        self._cache: dict[tuple, tuple[bytes, float, float]] = {}
        self._cache_lock = threading.Lock()
        self._render_slots = threading.Semaphore(max(1, workers))

    def meta(self) -> dict:
        views = []
        for v in self.ckpt.views:
            z = view_depths(self.ckpt.scene, v.camera)
            views.append({
                "m": v.index,
                "f": v.lens.f,
                "q": v.lens.Q,
                "width": v.camera.width,
                "height": v.camera.height,
                "depth_p10": nearest_rank_percentile(z, 10.0) if len(z) else 0.0,
                "depth_p50": nearest_rank_percentile(z, 50.0) if len(z) else 0.0,
                "depth_p90": nearest_rank_percentile(z, 90.0) if len(z) else 0.0,
            })
        return {"count": len(views), "views": views}

    def _view(self, m: int):
        if not (0 <= m < len(self.ckpt.views)):
            raise HTTPException(status_code=404, detail=f"unknown view {m}")
        return self.ckpt.views[m]

    def render_png(self, m: int, f: Optional[float], q: Optional[float],
                   map_name: str) -> tuple[bytes, float, float]:
        if map_name not in MAPS:
            raise HTTPException(status_code=400, detail=f"map must be one of {MAPS}")
        view = self._view(m)
        f = view.lens.f if f is None else f
        q = view.lens.Q if q is None else q
        if not (f > 0) or q < 0:
            raise HTTPException(status_code=400, detail="need f > 0 and q >= 0")
        key = (m, float(f), float(q), map_name)
        with self._cache_lock:
            hit = self._cache.get(key)
        if hit is not None:
            return hit
        with self._render_slots:
            out = render(self.ckpt.scene, view.camera, LensParams(f=f, Q=q), self.settings)
        if map_name == "color":
            img, lo, hi = out.color, 0.0, 1.0
        else:
            raw = out.normalized_depth() if map_name == "depth" else out.normalized_coc()
            lo, hi = float(raw.min()), float(raw.max())
            img = (raw - lo) / (hi - lo) if hi > lo else np.zeros_like(raw)
        result = (_to_png(img), lo, hi)
        with self._cache_lock:
            self._cache[key] = result
        return result

    def depth_at(self, m: int, x: int, y: int) -> dict:
        view = self._view(m)
        if not (0 <= x < view.camera.width and 0 <= y < view.camera.height):
            raise HTTPException(status_code=400, detail="pixel out of bounds")
        with self._render_slots:
            out = render(self.ckpt.scene, view.camera, view.lens, self.settings)
        alpha = float(out.alpha[y, x])
        if alpha < 1e-6:
            return {"depth": None, "alpha": alpha}
        return {"depth": float(out.depth[y, x] / alpha), "alpha": alpha}


def create_app(checkpoint: Checkpoint | str | Path, workers: int = 4,
               static_dir: Optional[Path] = None) -> FastAPI:
    if not isinstance(checkpoint, Checkpoint):
        checkpoint = load_checkpoint(checkpoint)
    svc = RenderService(checkpoint, workers=workers)
    app = FastAPI(title="dofsplat refocus service")
    app.state.service = svc

    @app.get("/meta")
    def meta():
        return svc.meta()

    @app.get("/render")
    def render_endpoint(view: int, f: Optional[float] = None, q: Optional[float] = None,
                        map: str = "color"):
        png, lo, hi = svc.render_png(view, f, q, map)
        return Response(content=png, media_type="image/png",
                        headers={"X-Norm-Min": repr(lo), "X-Norm-Max": repr(hi)})

    @app.get("/depth_at")
    def depth_at(view: int, x: int, y: int):
        return svc.depth_at(view, x, y)

    if static_dir is None:
        static_dir = Path(__file__).resolve().parents[2] / "frontend" / "dist"
    if Path(static_dir).is_dir():
        app.mount("/", StaticFiles(directory=str(static_dir), html=True), name="viewer")
    return app


def serve(checkpoint_path: str | Path, port: int = 8000, host: str = "127.0.0.1",
          workers: int = 4, static_dir: Optional[Path] = None) -> None:
    import uvicorn

    app = create_app(checkpoint_path, workers=workers, static_dir=static_dir)
    uvicorn.run(app, host=host, port=port, log_level="warning")
