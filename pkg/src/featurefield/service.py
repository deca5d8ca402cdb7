"""HTTP endpoint for interactive sessions: rendering, prompts, keyframes.

A session wraps either a frozen checkpoint (read-only) or an online training
loop fed by keyframe uploads. Renders always come from the latest published
parameter snapshot, so they are safe to serve while training mutates the live
parameters. Prompt updates never touch field parameters.
"""

from __future__ import annotations

import io
import itertools
import json
import threading
from pathlib import Path

import numpy as np
from fastapi import FastAPI, File, Form, HTTPException, UploadFile
from fastapi.responses import JSONResponse, Response
from PIL import Image

from .encoding import EncodingConfig
from .field import FieldConfig, FieldModel, load_checkpoint
from .renderer import render_maps
from .scene_io import (CameraIntrinsics, PosedFrame, SceneBounds, SceneFormatError,
                       default_palette, load_embeddings, load_scene, validate_pose)
from .segmentation import (DictionaryEncoder, EmbeddingSet, SegmentationError,
                           encode_labels, segment_view)
from .trainer import LossWeights, OnlineTrainer, TrainConfig, Trainer

DEFAULT_RENDER_SIZE = (160, 120)
RENDER_MODES = ("color", "depth", "segmentation", "opacity")


class Session:
    """One scene being served; all mutation is serialized by a lock."""

    _ids = itertools.count(1)

    def __init__(self, mode: str, intrinsics: CameraIntrinsics,
                 trainer: Trainer | None = None, online: OnlineTrainer | None = None,
                 snapshot=None, encoder: DictionaryEncoder | None = None):
        self.session_id = f"s{next(self._ids):04d}"
        self.mode = mode
        self.intrinsics = intrinsics
        self.trainer = trainer
        self.online = online
        self._static_snapshot = snapshot
        self.encoder = encoder
        self.embeddings: EmbeddingSet | None = None
        self.lock = threading.Lock()
        self._model_cache: tuple | None = None

    @property
    def snapshot(self):
        if self.trainer is not None:
            return self.trainer.latest_snapshot
        return self._static_snapshot

    def model(self) -> FieldModel:
        snap = self.snapshot
        with self.lock:
            if self._model_cache is not None and self._model_cache[0] == snap.version:
                return self._model_cache[1]
        model = FieldModel.from_snapshot(snap)
        with self.lock:
            self._model_cache = (snap.version, model)
        return model

    def status(self) -> dict:
        return {
            "session_id": self.session_id,
            "mode": self.mode,
            "snapshot_version": self.snapshot.version,
            "iterations": self.trainer.iteration if self.trainer else None,
            "keyframes": len(self.trainer.buffer) if self.trainer else None,
            "labels": list(self.embeddings.labels) if self.embeddings else [],
            "feature_dim": self.snapshot.config.feature_dim,
            "rejected_keyframes": self.online.rejected if self.online else [],
        }

    def close(self):
        if self.online is not None:
            self.online.stop()


def _png_bytes(image: Image.Image) -> bytes:
    buf = io.BytesIO()
    image.save(buf, format="PNG")
    return buf.getvalue()


def _color_png(arr: np.ndarray) -> bytes:
    data = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    return _png_bytes(Image.fromarray(data, mode="RGB"))


def _gray_png(arr: np.ndarray) -> bytes:
    data = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    return _png_bytes(Image.fromarray(data, mode="L"))


def _depth_png(arr: np.ndarray) -> bytes:
    mm = np.round(np.clip(arr, 0.0, 65.535) * 1000.0).astype(np.uint16)
    return _png_bytes(Image.fromarray(mm))


def _index_png(indices: np.ndarray, n_classes: int) -> bytes:
    img = Image.fromarray(indices.astype(np.uint8), mode="P")
    img.putpalette(default_palette(n_classes + 1).reshape(-1).tolist())
    return _png_bytes(img)


def _parse_pose(pose_text: str) -> np.ndarray:
    try:
        values = [float(v) for v in pose_text.replace(",", " ").split()]
    except ValueError:
        raise HTTPException(status_code=400, detail="pose must be 16 numbers")
    if len(values) != 16:
        raise HTTPException(status_code=400,
                            detail=f"pose must have 16 values, got {len(values)}")
    pose = np.array(values, dtype=np.float64).reshape(4, 4)
    try:
        validate_pose(pose, "pose")
    except SceneFormatError as err:
        raise HTTPException(status_code=400, detail=str(err))
    return pose


class SessionManager:
    def __init__(self):
        self.sessions: dict[str, Session] = {}
        self._lock = threading.Lock()

    def add(self, session: Session) -> Session:
        with self._lock:
            self.sessions[session.session_id] = session
        return session

    def get(self, session_id: str) -> Session:
        session = self.sessions.get(session_id)
        if session is None:
            raise HTTPException(status_code=404, detail=f"unknown session '{session_id}'")
        return session

    def close_all(self):
        for session in list(self.sessions.values()):
            session.close()


def open_checkpoint_session(manager: SessionManager, checkpoint,
                            embeddings=None) -> Session:
    snap = load_checkpoint(checkpoint)
    encoder = None
    if embeddings is not None:
        encoder = DictionaryEncoder(load_embeddings(embeddings))
    # Without camera intrinsics on file, serve a generic 4:3 pinhole.
    w, h = DEFAULT_RENDER_SIZE
    intr = CameraIntrinsics(0.9 * w, 0.9 * w, w / 2, h / 2, w, h)
    session = Session("offline", intr, snapshot=snap, encoder=encoder)
    return manager.add(session)


def open_online_session(manager: SessionManager, intrinsics: CameraIntrinsics,
                        bounds: SceneBounds, feature_dim: int,
                        encoding: EncodingConfig | None = None,
                        field_config: FieldConfig | None = None,
                        train_config: TrainConfig | None = None,
                        loss_weights: LossWeights | None = None,
                        encoder: DictionaryEncoder | None = None,
                        max_iterations: int | None = None) -> Session:
    trainer = Trainer(intrinsics, bounds, feature_dim, encoding=encoding,
                      field_config=field_config, train_config=train_config,
                      loss_weights=loss_weights)
    online = OnlineTrainer(trainer)
    online.run_async(max_iterations)
    session = Session("online", intrinsics, trainer=trainer, online=online,
                      encoder=encoder)
    return manager.add(session)


def create_app(manager: SessionManager | None = None) -> FastAPI:
    manager = manager or SessionManager()
    app = FastAPI(title="featurefield")
    app.state.manager = manager

    @app.post("/session")
    def create_session(payload: dict):
        try:
            if "checkpoint" in payload:
                session = open_checkpoint_session(
                    manager, payload["checkpoint"], payload.get("embeddings"))
            elif payload.get("mode") == "online":
                scene_path = payload.get("scene")
                if scene_path is None:
                    raise HTTPException(status_code=400,
                                        detail="online session needs a 'scene' path "
                                               "for intrinsics/bounds")
                scene = load_scene(scene_path)
                encoder = None
                emb_path = Path(scene_path) / "embeddings.txt"
                if emb_path.exists():
                    encoder = DictionaryEncoder(load_embeddings(emb_path))
                train_kwargs = payload.get("train", {})
                encoding_kwargs = payload.get("encoding", {})
                session = open_online_session(
                    manager, scene.intrinsics, scene.bounds, scene.feature_dim,
                    encoding=EncodingConfig(**encoding_kwargs),
                    train_config=TrainConfig(**train_kwargs),
                    encoder=encoder,
                    max_iterations=payload.get("max_iterations"))
                if payload.get("preload"):
                    for frame in scene.frames:
                        session.online.submit(frame)
            else:
                raise HTTPException(status_code=400,
                                    detail="payload needs 'checkpoint' or mode='online'")
        except HTTPException:
            raise
        except (OSError, ValueError) as err:
            raise HTTPException(status_code=400, detail=str(err))
        return session.status()

    @app.get("/session/{session_id}/status")
    def status(session_id: str):
        return manager.get(session_id).status()

    @app.post("/session/{session_id}/prompts")
    def set_prompts(session_id: str, payload: dict):
        session = manager.get(session_id)
        labels = payload.get("labels")
        if not labels or not isinstance(labels, list):
            raise HTTPException(status_code=400, detail="payload needs 'labels' list")
        try:
            if "vectors" in payload:
                vectors = np.asarray(payload["vectors"], dtype=np.float32)
                emb = EmbeddingSet(labels=list(labels), vectors=vectors)
            else:
                if session.encoder is None:
                    raise HTTPException(
                        status_code=400,
                        detail="session has no text encoder; send 'vectors'")
                emb = encode_labels(labels, session.encoder)
        except HTTPException:
            raise
        except (SegmentationError, ValueError) as err:
            raise HTTPException(status_code=400, detail=str(err))
        if emb.dim != session.snapshot.config.feature_dim:
            raise HTTPException(
                status_code=400,
                detail=f"embedding dim {emb.dim} != field dim "
                       f"{session.snapshot.config.feature_dim}")
        with session.lock:
            session.embeddings = emb
        return {"labels": list(emb.labels),
                "snapshot_version": session.snapshot.version}

    @app.get("/session/{session_id}/render")
    def render(session_id: str, pose: str, mode: str = "color",
               width: int = DEFAULT_RENDER_SIZE[0],
               height: int = DEFAULT_RENDER_SIZE[1],
               samples: int = 64, format: str = "png"):
        session = manager.get(session_id)
        if mode not in RENDER_MODES:
            raise HTTPException(status_code=400,
                                detail=f"mode must be one of {RENDER_MODES}")
        if not (8 <= width <= 2048 and 8 <= height <= 2048):
            raise HTTPException(status_code=400, detail="width/height out of range")
        pose_mat = _parse_pose(pose)
        model = session.model()
        version = session.snapshot.version
        intr = session.intrinsics.scaled(width, height)

        if mode == "segmentation":
            with session.lock:
                emb = session.embeddings
            if emb is None:
                raise HTTPException(status_code=400,
                                    detail="set prompts before rendering segmentation")
            seg = segment_view(model, pose_mat, intr, emb, n_samples=samples,
                               keep_class_scores=(format == "record"))
            if format == "record":
                return JSONResponse({
                    "width": width, "height": height,
                    "labels": list(emb.labels),
                    "background_index": emb.background_index,
                    "snapshot_version": version,
                    "classes": seg.classes.reshape(-1).tolist(),
                    "scores": np.round(seg.scores.reshape(-1), 5).tolist(),
                    "class_scores": np.round(seg.class_scores, 5).reshape(
                        emb.num_classes, -1).tolist(),
                })
            data = _index_png(seg.classes, emb.num_classes)
            return Response(content=data, media_type="image/png",
                            headers={"X-Snapshot-Version": str(version),
                                     "X-Labels": json.dumps(list(emb.labels))})

        maps = render_maps(model, pose_mat, intr, which=(mode,),
                           n_samples=samples)
        if mode == "color":
            data = _color_png(maps["color"])
        elif mode == "depth":
            data = _depth_png(maps["depth"])
        else:
            data = _gray_png(maps["opacity"])
        return Response(content=data, media_type="image/png",
                        headers={"X-Snapshot-Version": str(version)})

    @app.post("/session/{session_id}/keyframe")
    async def keyframe(session_id: str,
                       frame_id: int = Form(...),
                       rgb: UploadFile = File(...),
                       pose: UploadFile = File(...),
                       depth: UploadFile | None = File(None),
                       features: UploadFile | None = File(None)):
        session = manager.get(session_id)
        if session.mode != "online":
            raise HTTPException(status_code=409,
                                detail="keyframe upload requires an online session")
        try:
            rgb_arr = np.asarray(Image.open(io.BytesIO(await rgb.read())).convert("RGB"))
            rgb_arr = rgb_arr.astype(np.float32) / 255.0
            pose_mat = _parse_pose((await pose.read()).decode("utf-8"))
            depth_arr = None
            if depth is not None:
                depth_img = np.asarray(Image.open(io.BytesIO(await depth.read())))
                depth_arr = depth_img.astype(np.float32) / 1000.0
            feat_arr = None
            if features is not None:
                from .scene_io import FTEN_MAGIC
                raw = await features.read()
                if raw[:4] != FTEN_MAGIC:
                    raise HTTPException(status_code=400, detail="features: bad FTEN magic")
                import struct as _struct
                h, w, d = _struct.unpack("<III", raw[4:16])
                expected = 16 + h * w * d * 4
                if len(raw) != expected:
                    raise HTTPException(status_code=400, detail="features: truncated FTEN")
                feat_arr = np.frombuffer(raw[16:], dtype="<f4").reshape(h, w, d).copy()
            frame = PosedFrame(frame_id=frame_id, rgb=rgb_arr, pose=pose_mat,
                               depth=depth_arr, features=feat_arr)
        except HTTPException:
            raise
        except (SceneFormatError, ValueError, OSError) as err:
            raise HTTPException(status_code=400, detail=f"bad keyframe: {err}")
        session.online.submit(frame)
        return {"queued": True, "frame_id": frame_id,
                "keyframes": len(session.trainer.buffer)}

    @app.delete("/session/{session_id}")
    def close_session(session_id: str):
        session = manager.get(session_id)
        session.close()
        del manager.sessions[session_id]
        return {"closed": session_id}

    return app


def mount_ui(app: FastAPI, ui_dir) -> None:
    """Serve a built browser UI from the same origin as the API."""
    from fastapi.staticfiles import StaticFiles
    app.mount("/", StaticFiles(directory=str(ui_dir), html=True), name="ui")
