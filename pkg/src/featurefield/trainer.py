"""Ray-batch optimization of the field against photometric, depth, and
feature targets, in offline (fixed frame set) and online (keyframe stream)
modes.

Per ray: squared L2 on color, L1 on depth where the sensor defined it (zero
otherwise), squared L2 over the feature dimension divided by that dimension.
The three terms are batch-averaged and combined as
``L = L_rgb + lambda_d * L_d + lambda_f * L_f``.

Both training modes run the same step function on the same keyframe buffer,
so streaming every keyframe before the first step is bit-identical to
offline training at the same seed.
"""

from __future__ import annotations

import queue
import threading
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import numerics as nm
from .encoding import EncodingConfig
from .field import FieldConfig, FieldModel, ParameterSnapshot, save_checkpoint
from .renderer import RayBatch, pixel_directions, ray_box_intersect, render_ray_batch
from .scene_io import CameraIntrinsics, PosedFrame, SceneBounds, SceneData


class TrainingDiverged(RuntimeError):
    """Raised when the loss goes non-finite; the last good snapshot is kept."""

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass(frozen=True)
class LossWeights:
    lambda_d: float = 0.1
    lambda_f: float = 0.5

    def __post_init__(self):
        if self.lambda_d < 0 or self.lambda_f < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 20000
    batch_size: int = 4096
    samples_per_ray: int = 32
    learning_rate: float = 5e-3
    seed: int = 0
    snapshot_interval: int = 500
    precision: str = "float32"           # float64 for determinism/grad tests
    feature_lookup: str = "nearest"      # or "bilinear"
    frame_ids: tuple | None = None       # train on a subset of a scene

    def __post_init__(self):
        for name in ("iterations", "batch_size", "samples_per_ray",
                     "snapshot_interval"):
            if getattr(self, name) < 0 or (name != "iterations" and getattr(self, name) == 0):
                raise ValueError(f"TrainConfig.{name} must be positive")
        if self.precision not in ("float32", "float64"):
            raise ValueError("precision must be 'float32' or 'float64'")
        if self.feature_lookup not in ("nearest", "bilinear"):
            raise ValueError("feature_lookup must be 'nearest' or 'bilinear'")

    @property
    def dtype(self):
        return np.float32 if self.precision == "float32" else np.float64


@dataclass
class TrainRecord:
    iteration: int
    loss_rgb: float
    loss_depth: float
    loss_feature: float
    loss_total: float
    millis: float


class _PreparedFrame:
    """Per-pixel rays and targets, flattened once at integration time."""

    __slots__ = ("frame_id", "origin", "directions", "t_near", "t_far",
                 "rgb", "depth", "features", "texel_index", "texel_bilinear",
                 "valid_index", "weight")

    def __init__(self, frame: PosedFrame, intrinsics: CameraIntrinsics,
                 bounds: SceneBounds, feature_lookup: str, dtype):
        h, w, _ = frame.rgb.shape
        if (w, h) != (intrinsics.width, intrinsics.height):
            raise ValueError(
                f"frame {frame.frame_id}: image is {w}x{h} but the session "
                f"camera is {intrinsics.width}x{intrinsics.height}")
        u, v = np.meshgrid(np.arange(w), np.arange(h))
        pixels = np.stack([u.reshape(-1), v.reshape(-1)], axis=1).astype(np.float64)
        cam_dirs = pixel_directions(intrinsics, pixels)
        self.frame_id = frame.frame_id
        self.origin = frame.pose[:3, 3].copy()
        self.directions = (cam_dirs @ frame.pose[:3, :3].T)
        t_near, t_far, valid = ray_box_intersect(
            np.broadcast_to(self.origin, self.directions.shape), self.directions, bounds)
        self.t_near = t_near
        self.t_far = t_far
        self.valid_index = np.flatnonzero(valid)
        self.weight = 1.0
        self.rgb = frame.rgb.reshape(-1, 3).astype(dtype)
        self.depth = (frame.depth.reshape(-1).astype(dtype)
                      if frame.depth is not None else None)
        if frame.features is not None:
            hf, wf, d = frame.features.shape
            self.features = frame.features.reshape(-1, d).astype(dtype)
            if feature_lookup == "nearest":
                tu = np.minimum(((pixels[:, 0] + 0.5) * wf / w).astype(np.int64), wf - 1)
                tv = np.minimum(((pixels[:, 1] + 0.5) * hf / h).astype(np.int64), hf - 1)
                self.texel_index = tv * wf + tu
                self.texel_bilinear = None
            else:
                self.texel_index = None
                self.texel_bilinear = _bilinear_coeffs(pixels, w, h, wf, hf)
        else:
            self.features = None
            self.texel_index = None
            self.texel_bilinear = None

    def feature_targets(self, pixel_idx: np.ndarray) -> np.ndarray | None:
        if self.features is None:
            return None
        if self.texel_index is not None:
            return self.features[self.texel_index[pixel_idx]]
        idx4, w4 = self.texel_bilinear
        gathered = self.features[idx4[pixel_idx]]          # (B, 4, D)
        return np.einsum("bkd,bk->bd", gathered, w4[pixel_idx])


def _bilinear_coeffs(pixels, w, h, wf, hf):
    """Four texel indices and weights per pixel for bilinear feature lookup."""
    fx = (pixels[:, 0] + 0.5) * wf / w - 0.5
    fy = (pixels[:, 1] + 0.5) * hf / h - 0.5
    x0 = np.clip(np.floor(fx).astype(np.int64), 0, wf - 1)
    y0 = np.clip(np.floor(fy).astype(np.int64), 0, hf - 1)
    x1 = np.minimum(x0 + 1, wf - 1)
    y1 = np.minimum(y0 + 1, hf - 1)
    ax = np.clip(fx - x0, 0.0, 1.0)
    ay = np.clip(fy - y0, 0.0, 1.0)
    idx = np.stack([y0 * wf + x0, y0 * wf + x1, y1 * wf + x0, y1 * wf + x1], axis=1)
    wgt = np.stack([(1 - ax) * (1 - ay), ax * (1 - ay),
                    (1 - ax) * ay, ax * ay], axis=1)
    return idx, wgt


class KeyframeBuffer:
    """Growable ordered frame set; batches sample uniformly over all pixels."""

    def __init__(self, intrinsics: CameraIntrinsics, bounds: SceneBounds,
                 feature_dim: int | None, feature_lookup: str = "nearest",
                 dtype=np.float32):
        self.intrinsics = intrinsics
        self.bounds = bounds
        self.feature_dim = feature_dim
        self.feature_lookup = feature_lookup
        self.dtype = dtype
        self.frames: list[_PreparedFrame] = []
        self._cumulative = np.zeros(0, dtype=np.int64)

    def __len__(self):
        return len(self.frames)

    @property
    def total_rays(self) -> int:
        return int(self._cumulative[-1]) if len(self.frames) else 0

    def integrate(self, frame: PosedFrame) -> None:
        """Validate and add one keyframe; it is immediately sampleable."""
        if self.feature_dim is not None:
            if frame.features is None:
                raise ValueError(
                    f"frame {frame.frame_id}: missing feature map (session D={self.feature_dim})")
            if frame.feature_dim != self.feature_dim:
                raise ValueError(
                    f"frame {frame.frame_id}: feature dim {frame.feature_dim} != "
                    f"session dim {self.feature_dim}")
        elif frame.features is not None:
            raise ValueError(
                f"frame {frame.frame_id}: carries features but the session has none")
        prepared = _PreparedFrame(frame, self.intrinsics, self.bounds,
                                  self.feature_lookup, self.dtype)
        if len(prepared.valid_index) == 0:
            raise ValueError(
                f"frame {frame.frame_id}: no rays intersect the scene bounds")
        self.frames.append(prepared)
        weighted = int(round(len(prepared.valid_index) * prepared.weight))
        base = self._cumulative[-1] if len(self._cumulative) else 0
        self._cumulative = np.append(self._cumulative, base + weighted)

    def sample_batch(self, batch_size: int, rng: np.random.Generator):
        """Uniform rays over all (frame, pixel) pairs with their targets."""
        if not self.frames:
            raise ValueError("sample_batch: keyframe buffer is empty")
        flat = rng.integers(0, self.total_rays, size=batch_size)
        frame_of = np.searchsorted(self._cumulative, flat, side="right")
        origins = np.empty((batch_size, 3))
        dirs = np.empty((batch_size, 3))
        t_near = np.empty(batch_size)
        t_far = np.empty(batch_size)
        rgb = np.empty((batch_size, 3), dtype=self.dtype)
        depth = np.zeros(batch_size, dtype=self.dtype)
        depth_defined = np.zeros(batch_size, dtype=self.dtype)
        feats = (np.empty((batch_size, self.feature_dim), dtype=self.dtype)
                 if self.feature_dim else None)
        for fi in np.unique(frame_of):
            frame = self.frames[fi]
            m = frame_of == fi
            local = flat[m] - (self._cumulative[fi - 1] if fi else 0)
            pix = frame.valid_index[local % len(frame.valid_index)]
            origins[m] = frame.origin
            dirs[m] = frame.directions[pix]
            t_near[m] = frame.t_near[pix]
            t_far[m] = frame.t_far[pix]
            rgb[m] = frame.rgb[pix]
            if frame.depth is not None:
                d = frame.depth[pix]
                depth[m] = d
                depth_defined[m] = (d > 0).astype(self.dtype)
            if feats is not None:
                feats[m] = frame.feature_targets(pix)
        rays = RayBatch(origins=origins, directions=dirs, t_near=t_near,
                        t_far=t_far, valid=np.ones(batch_size, dtype=bool))
        targets = {"color": rgb, "depth": depth, "depth_defined": depth_defined,
                   "feature": feats}
        return rays, targets


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def compute_losses(rendered: dict, targets: dict, feature_dim: int | None):
    """Batch-mean loss terms (L_rgb, L_d, L_f) as scalar tensors."""
    color = rendered["color"]
    batch = color.shape[0]
    diff = nm.sub(color, nm.Tensor(targets["color"]))
    loss_rgb = nm.scale(nm.reduce_sum(nm.mul(diff, diff)), 1.0 / batch)

    if "depth" in rendered:
        ddiff = nm.absolute(nm.sub(rendered["depth"], nm.Tensor(targets["depth"])))
        masked = nm.mul(ddiff, nm.Tensor(targets["depth_defined"]))
        loss_depth = nm.scale(nm.reduce_sum(masked), 1.0 / batch)
    else:
        loss_depth = nm.Tensor(np.zeros((), dtype=color.dtype))

    if feature_dim and "feature" in rendered:
        fdiff = nm.sub(rendered["feature"], nm.Tensor(targets["feature"]))
        loss_feature = nm.scale(nm.reduce_sum(nm.mul(fdiff, fdiff)),
                                1.0 / (batch * feature_dim))
    else:
        loss_feature = nm.Tensor(np.zeros((), dtype=color.dtype))
    return loss_rgb, loss_depth, loss_feature


def total_loss(loss_rgb, loss_depth, loss_feature, weights: LossWeights):
    """L = L_rgb + lambda_d * L_d + lambda_f * L_f; rejects non-finite terms."""
    for name, term in (("L_rgb", loss_rgb), ("L_d", loss_depth), ("L_f", loss_feature)):
        if not np.all(np.isfinite(term.data)):
            raise nm.NumericsError(f"total_loss: {name} is non-finite")
    return nm.add(loss_rgb,
                  nm.add(nm.scale(loss_depth, weights.lambda_d),
                         nm.scale(loss_feature, weights.lambda_f)))


# ---------------------------------------------------------------------------
# the training loop
# ---------------------------------------------------------------------------

class Trainer:
    """Owns the mutable parameters; one exclusive training context."""

    def __init__(self, intrinsics: CameraIntrinsics, bounds: SceneBounds,
                 feature_dim: int | None,
                 encoding: EncodingConfig | None = None,
                 field_config: FieldConfig | None = None,
                 train_config: TrainConfig | None = None,
                 loss_weights: LossWeights | None = None):
        self.train_config = train_config or TrainConfig()
        self.loss_weights = loss_weights or LossWeights()
        self.encoding = encoding or EncodingConfig()
        self.field_config = field_config or FieldConfig(feature_dim=feature_dim or 8)
        if feature_dim and self.field_config.feature_dim != feature_dim:
            raise ValueError(
                f"field feature_dim {self.field_config.feature_dim} != scene D {feature_dim}")
        dtype = self.train_config.dtype
        init_rng = np.random.default_rng(self.train_config.seed)
        self.model = FieldModel(self.encoding, self.field_config, bounds,
                                rng=init_rng, dtype=dtype)
        self.buffer = KeyframeBuffer(intrinsics, bounds, feature_dim,
                                     self.train_config.feature_lookup, dtype)
        self.adam = nm.AdamState(self.model.params,
                                 learning_rate=self.train_config.learning_rate)
        self.rng = np.random.default_rng(self.train_config.seed + 1)
        self.iteration = 0
        self.records: list[TrainRecord] = []
        self._snapshot_version = 0
        self._latest_snapshot = self.model.snapshot(0)
        self._snapshot_lock = threading.Lock()

    @property
    def feature_dim(self):
        return self.buffer.feature_dim

    def integrate_keyframe(self, frame: PosedFrame) -> None:
        self.buffer.integrate(frame)

    def publish_snapshot(self) -> ParameterSnapshot:
        self._snapshot_version += 1
        snap = self.model.snapshot(self._snapshot_version)
        with self._snapshot_lock:
            self._latest_snapshot = snap
        return snap

    @property
    def latest_snapshot(self) -> ParameterSnapshot:
        with self._snapshot_lock:
            return self._latest_snapshot

    def step(self) -> TrainRecord:
        """One batch: sample, render, losses, backward, Adam update."""
        started = time.perf_counter()
        cfg = self.train_config
        rays, targets = self.buffer.sample_batch(cfg.batch_size, self.rng)
        which = {"color"}
        if any(f.depth is not None for f in self.buffer.frames):
            which.add("depth")
        if self.feature_dim:
            which.add("feature")
        params = self.model.params
        with nm.GradientTape() as tape:
            tape.watch(*params.values())
            rendered = render_ray_batch(self.model, rays, which,
                                        cfg.samples_per_ray, stratified=True,
                                        rng=self.rng)
            l_rgb, l_d, l_f = compute_losses(rendered, targets, self.feature_dim)
            loss = total_loss(l_rgb, l_d, l_f, self.loss_weights)
        tape.backward(loss)
        grads = tape.gradients(params)
        nm.adam_step(self.adam, params, grads)
        self.iteration += 1
        record = TrainRecord(
            iteration=self.iteration,
            loss_rgb=float(l_rgb.data), loss_depth=float(l_d.data),
            loss_feature=float(l_f.data), loss_total=float(loss.data),
            millis=(time.perf_counter() - started) * 1e3)
        self.records.append(record)
        if cfg.snapshot_interval and self.iteration % cfg.snapshot_interval == 0:
            self.publish_snapshot()
        return record

    def run(self, iterations: int | None = None) -> ParameterSnapshot:
        """Run the configured budget; on divergence keep the last good snapshot."""
        budget = self.train_config.iterations if iterations is None else iterations
        try:
            # Step batches are gemm-latency bound; multithreaded BLAS loses to
            # its own synchronization at these sizes, so pin it to one thread.
            with threadpool_limits(limits=1, user_api="blas"):
                for _ in range(budget):
                    self.step()
        except nm.NumericsError as err:
            raise TrainingDiverged(
                f"aborted at iteration {self.iteration + 1}: {err}",
                snapshot=self.latest_snapshot) from err
        return self.publish_snapshot()


def metrics_lines(records) -> str:
    lines = ["# iteration l_rgb l_d l_f total millis"]
    for r in records:
        lines.append(f"{r.iteration} {r.loss_rgb:.8g} {r.loss_depth:.8g} "
                     f"{r.loss_feature:.8g} {r.loss_total:.8g} {r.millis:.3f}")
    return "\n".join(lines) + "\n"


def train_offline(scene: SceneData, out_dir=None,
                  encoding: EncodingConfig | None = None,
                  field_config: FieldConfig | None = None,
                  train_config: TrainConfig | None = None,
                  loss_weights: LossWeights | None = None):
    """Fit a scene with a fixed frame set and iteration budget.

    Writes ``checkpoint.ffld`` and ``metrics.txt`` into out_dir when given.
    Returns (snapshot, records). On divergence the last good snapshot is
    written before the error propagates.
    """
    train_config = train_config or TrainConfig()
    trainer = Trainer(scene.intrinsics, scene.bounds, scene.feature_dim,
                      encoding=encoding, field_config=field_config,
                      train_config=train_config, loss_weights=loss_weights)
    keep = train_config.frame_ids
    for frame in scene.frames:
        if keep is None or frame.frame_id in keep:
            trainer.integrate_keyframe(frame)
    try:
        snapshot = trainer.run()
    except TrainingDiverged as err:
        if out_dir is not None and err.snapshot is not None:
            _write_outputs(out_dir, err.snapshot, trainer.records)
        raise
    if out_dir is not None:
        _write_outputs(out_dir, snapshot, trainer.records)
    return snapshot, trainer.records


def _write_outputs(out_dir, snapshot, records):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "checkpoint.ffld", snapshot)
    (out / "metrics.txt").write_text(metrics_lines(records))


class OnlineTrainer:
    """Keyframe-stream training: ingestion and stepping on one logical loop.

    Frames arrive on a thread-safe queue (``submit``); the training loop
    drains it between batches, so a submitted frame becomes sampleable within
    one batch boundary. ``run_async`` drives the loop on a worker thread.
    """

    def __init__(self, trainer: Trainer):
        self.trainer = trainer
        self._queue: queue.Queue = queue.Queue()
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None
        self._errors: list[str] = []

    def submit(self, frame: PosedFrame) -> None:
        self._queue.put(frame)

    def drain(self) -> int:
        """Integrate every queued frame; rejected frames are logged, not fatal."""
        integrated = 0
        while True:
            try:
                frame = self._queue.get_nowait()
            except queue.Empty:
                return integrated
            try:
                self.trainer.integrate_keyframe(frame)
                integrated += 1
            except ValueError as err:
                self._errors.append(str(err))

    @property
    def rejected(self) -> list:
        return list(self._errors)

    def step(self) -> TrainRecord | None:
        self.drain()
        if len(self.trainer.buffer) == 0:
            return None
        return self.trainer.step()

    def run(self, iterations: int | None) -> None:
        """Train for a budget, or indefinitely (until stop) when None."""
        done = 0
        with threadpool_limits(limits=1, user_api="blas"):
            while not self._stop.is_set() and (iterations is None or done < iterations):
                if self.step() is None:
                    time.sleep(0.005)
                    continue
                done += 1

    def run_async(self, iterations: int | None) -> threading.Thread:
        self._thread = threading.Thread(target=self.run, args=(iterations,),
                                        daemon=True)
        self._thread.start()
        return self._thread

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=10.0)
