"""HTTP editing service: serve a checkpointed model to the browser UI.

Sessions hold one decoded distribution, its auxiliary noise and the
current image.  Pixel edits condition the distribution re-centred at the
current image, so consecutive edits compose sequentially; a ``reset``
flag restores the original sample.  All math is float64 on the server;
the wire format is base64 little-endian float64 plus PNG previews.
"""

from __future__ import annotations

import base64
import threading
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
from fastapi import FastAPI, HTTPException, Request
from fastapi.exceptions import RequestValidationError
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from pydantic import BaseModel

from . import lowrank
from .models import DistOnlyModel, decode
from .render import to_png_bytes
from .trainer import Checkpoint

__all__ = ["create_app", "SessionStore"]


def _b64_floats(vec: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(vec, dtype="<f8").tobytes()).decode()


def _b64_png(vec: np.ndarray, shape) -> str:
    return base64.b64encode(to_png_bytes(vec, shape)).decode()


def _finite_or_500(vec: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(vec)):
        raise HTTPException(status_code=500, detail="model produced non-finite values")
    return vec


@dataclass
class Session:
    dist: lowrank.LowRankGaussian
    noise: lowrank.ObservationNoise
    original: np.ndarray
    current: np.ndarray
    lock: threading.Lock = field(default_factory=threading.Lock)


class SessionStore:
    """In-memory LRU session store; mutations serialise per session."""

    def __init__(self, capacity: int = 64):
        self.capacity = capacity
        self._sessions: OrderedDict[str, Session] = OrderedDict()
        self._lock = threading.Lock()
        self._counter = 0

    def create(self, session: Session) -> str:
        with self._lock:
            self._counter += 1
            sid = f"s{self._counter:06d}"
            self._sessions[sid] = session
            while len(self._sessions) > self.capacity:
                self._sessions.popitem(last=False)
            return sid

    def get(self, sid: str) -> Session:
        with self._lock:
            session = self._sessions.get(sid)
            if session is None:
                raise HTTPException(status_code=404, detail=f"unknown session {sid}")
            self._sessions.move_to_end(sid)
            return session


class SampleRequest(BaseModel):
    seed: int


class ScaleRequest(BaseModel):
    session_id: str
    coefficients: list[float]


class EditOp(BaseModel):
    x: int
    y: int
    c: int = 0
    value: float


class EditRequest(BaseModel):
    session_id: str
    edits: list[EditOp] = []
    reset: bool = False


def create_app(
    checkpoint: Checkpoint,
    ui_dir: str | None = None,
    max_edits: int = 4096,
    max_sessions: int = 64,
) -> FastAPI:
    """Build the FastAPI app around one loaded checkpoint."""
    config = checkpoint.config
    model = checkpoint.model
    shape = (config.width, config.height, config.channels)
    sessions = SessionStore(capacity=max_sessions)

    app = FastAPI(title="lrgauss editing service")
    app.add_middleware(
        CORSMiddleware,
        allow_origins=["*"],
        allow_methods=["*"],
        allow_headers=["*"],
    )

    @app.exception_handler(RequestValidationError)
    async def malformed_body(request: Request, exc: RequestValidationError):
        return JSONResponse(status_code=400, content={"detail": exc.errors()})

    def draw_dist(rng: np.random.Generator) -> lowrank.LowRankGaussian:
        if isinstance(model, DistOnlyModel):
            return model.dist
        return decode(model, rng.standard_normal(config.latent_dim))

    @app.get("/api/model")
    def model_info():
        return {
            "width": config.width,
            "height": config.height,
            "channels": config.channels,
            "rank": config.rank,
            "latent_dim": 0 if isinstance(model, DistOnlyModel) else config.latent_dim,
        }

    @app.post("/api/sample")
    def new_sample(req: SampleRequest):
        rng = np.random.default_rng(req.seed)
        dist = draw_dist(rng)
        noise = lowrank.ObservationNoise(
            omega_p=rng.standard_normal(dist.rank),
            omega_d=rng.standard_normal(dist.dim),
        )
        img = _finite_or_500(lowrank.sample(dist, noise))
        sid = sessions.create(
            Session(dist=dist, noise=noise, original=img, current=img.copy())
        )
        return {
            "session_id": sid,
            "mean": _b64_floats(dist.mu),
            "sample": _b64_floats(img),
            "mean_png": _b64_png(dist.mu, shape),
            "sample_png": _b64_png(img, shape),
        }

    @app.post("/api/scale")
    def scale_sample(req: ScaleRequest):
        session = sessions.get(req.session_id)
        coeff = np.asarray(req.coefficients, dtype=np.float64)
        if coeff.shape != (session.dist.rank,):
            raise HTTPException(
                status_code=400,
                detail=f"expected {session.dist.rank} coefficients, got {coeff.shape[0]}",
            )
        if not np.all(np.isfinite(coeff)):
            raise HTTPException(status_code=400, detail="coefficients must be finite")
        with session.lock:
            if np.all(coeff == 1.0):
                # identity scaling must be byte-exact; the SVD round-trip
                # reconstructs the factor only to rounding error
                img = session.original.copy()
            else:
                scaled = lowrank.scale_components(session.dist, coeff)
                img = _finite_or_500(lowrank.sample(scaled, session.noise))
        return {"sample": _b64_floats(img), "sample_png": _b64_png(img, shape)}

    @app.post("/api/edit")
    def edit_image(req: EditRequest):
        session = sessions.get(req.session_id)
        if len(req.edits) > max_edits:
            raise HTTPException(
                status_code=422,
                detail=f"edit count {len(req.edits)} exceeds the limit of {max_edits}",
            )
        w, h, c = shape
        indices = []
        values = []
        for op in req.edits:
            if not (0 <= op.x < w and 0 <= op.y < h and 0 <= op.c < c):
                raise HTTPException(
                    status_code=400,
                    detail=f"coordinates ({op.x},{op.y},{op.c}) outside {w}x{h}x{c}",
                )
            if not 0.0 <= op.value <= 1.0:
                raise HTTPException(
                    status_code=400, detail=f"value {op.value} outside [0, 1]"
                )
            indices.append((op.y * w + op.x) * c + op.c)
            values.append(op.value)
        idx = np.asarray(indices, dtype=np.intp)
        if len(np.unique(idx)) != len(idx):
            raise HTTPException(status_code=400, detail="duplicate edit coordinates")
        with session.lock:
            if req.reset:
                session.current = session.original.copy()
            session.current = _finite_or_500(
                lowrank.apply_edits(
                    session.dist,
                    session.current,
                    idx,
                    np.asarray(values, dtype=np.float64),
                    max_edits=max_edits,
                )
            )
            img = session.current
        return {
            "conditioned_image": _b64_floats(img),
            "conditioned_png": _b64_png(img, shape),
        }

    @app.get("/api/session/{sid}/debug")
    def session_debug(sid: str):
        """Raw session internals for client-side recomposition checks."""
        session = sessions.get(sid)
        return {
            "omega_p": _b64_floats(session.noise.omega_p),
            "omega_d": _b64_floats(session.noise.omega_d),
            "mean": _b64_floats(session.dist.mu),
            "cov_factor": _b64_floats(session.dist.cov_factor.reshape(-1)),
            "cov_diag": _b64_floats(session.dist.cov_diag),
            "rank": session.dist.rank,
        }

    if ui_dir is not None:
        from fastapi.staticfiles import StaticFiles

        app.mount("/", StaticFiles(directory=ui_dir, html=True), name="ui")

    return app
