"""Posed RGB-D scene loading, validation, and every on-disk format.

Scene directory layout::

    scene/
      intrinsics.txt          fx fy cx cy width height
      bounds.txt              min_x min_y min_z max_x max_y max_z (meters)
      frames/NNNNN.rgb.png    8-bit color
      frames/NNNNN.depth.png  16-bit, millimeters, 0 = undefined (optional)
      frames/NNNNN.pose.txt   16 reals, row-major 4x4 camera-to-world
      frames/NNNNN.feat.bin   FTEN feature map (optional, all frames or none)
      embeddings.txt          label<TAB>v_0 v_1 ... v_{D-1}, one per line
      cloud.txt               x y z [class], one point per line

FTEN is a 16-byte header (magic ``FTEN``, then Hf, Wf, D as little-endian
uint32) followed by Hf*Wf*D little-endian float32, row-major, channel-last.

Camera convention: right-handed, camera looks down +z, x right, y down;
pixel (u, v) maps to direction normalize(((u+.5-cx)/fx, (v+.5-cy)/fy, 1))
rotated into world coordinates by the pose rotation block.
"""

from __future__ import annotations

import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

FTEN_MAGIC = b"FTEN"
IGNORE_INDEX = -1

_POSE_TOL = 1e-4


class SceneFormatError(ValueError):
    """Raised for malformed or inconsistent scene files."""


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise SceneFormatError(f"focal lengths must be positive, got fx={self.fx} fy={self.fy}")
        if not (0 < self.cx < self.width) or not (0 < self.cy < self.height):
            raise SceneFormatError(
                f"principal point ({self.cx}, {self.cy}) outside image {self.width}x{self.height}")

    def scaled(self, width: int, height: int) -> "CameraIntrinsics":
        """Intrinsics for the same camera at a different pixel resolution."""
        sx = width / self.width
        sy = height / self.height
        return CameraIntrinsics(self.fx * sx, self.fy * sy,
                                self.cx * sx, self.cy * sy, width, height)


@dataclass(frozen=True)
class SceneBounds:
    """Axis-aligned scene box in meters."""

    minimum: np.ndarray
    maximum: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "minimum", np.asarray(self.minimum, dtype=np.float64))
        object.__setattr__(self, "maximum", np.asarray(self.maximum, dtype=np.float64))
        if self.minimum.shape != (3,) or self.maximum.shape != (3,):
            raise SceneFormatError("bounds must be two 3-vectors")
        if not np.all(self.maximum > self.minimum):
            raise SceneFormatError(
                f"bounds max {self.maximum.tolist()} not strictly above min {self.minimum.tolist()}")

    @property
    def extent(self) -> np.ndarray:
        return self.maximum - self.minimum

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.extent))

    def normalizer(self) -> tuple[np.ndarray, float]:
        """(offset, scale) mapping world points into the unit cube uniformly.

        ``(p - offset) * scale`` lies in [0, 1]^3 for p inside the bounds;
        the uniform scale keeps directions and distances isotropic.
        """
        return self.minimum, float(1.0 / self.extent.max())

    def contains(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points)
        return np.all((p >= self.minimum) & (p <= self.maximum), axis=-1)


@dataclass
class PosedFrame:
    """One RGB(-D) keyframe with camera-to-world pose and optional features."""

    frame_id: int
    rgb: np.ndarray                      # H x W x 3 float32 in [0, 1]
    pose: np.ndarray                     # 4 x 4 float64 camera-to-world
    depth: np.ndarray | None = None      # H x W float32 meters, 0 = undefined
    features: np.ndarray | None = None   # Hf x Wf x D float32

    def __post_init__(self):
        validate_pose(self.pose, f"frame {self.frame_id}")
        if self.rgb.ndim != 3 or self.rgb.shape[2] != 3:
            raise SceneFormatError(f"frame {self.frame_id}: rgb must be HxWx3")
        if self.depth is not None:
            if self.depth.shape != self.rgb.shape[:2]:
                raise SceneFormatError(f"frame {self.frame_id}: depth shape {self.depth.shape} "
                                       f"!= image shape {self.rgb.shape[:2]}")
            if np.any(self.depth < 0):
                raise SceneFormatError(f"frame {self.frame_id}: negative depth values")

    @property
    def feature_dim(self) -> int | None:
        return None if self.features is None else int(self.features.shape[2])


@dataclass
class LabeledPointCloud:
    """World-space points with optional per-point class indices.

    ``labels`` uses IGNORE_INDEX (-1) for unlabeled points. ``inside`` flags
    points within the scene bounds; out-of-bounds points are kept, flagged.
    """

    points: np.ndarray                   # N x 3 float64 meters
    labels: np.ndarray | None = None     # N int32
    inside: np.ndarray | None = None     # N bool, set when bounds known

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise SceneFormatError("point cloud must be Nx3")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int32)
            if self.labels.shape != (len(self.points),):
                raise SceneFormatError("labels must be one per point")


@dataclass
class SceneData:
    """Validated, immutable-after-load handle for one scene directory."""

    intrinsics: CameraIntrinsics
    bounds: SceneBounds
    frames: list[PosedFrame] = field(default_factory=list)

    @property
    def feature_dim(self) -> int | None:
        for f in self.frames:
            if f.features is not None:
                return f.feature_dim
        return None

    @property
    def has_depth(self) -> bool:
        return any(f.depth is not None for f in self.frames)


def validate_pose(pose: np.ndarray, context: str = "pose") -> None:
    """Reject non-rigid transforms (rotation block tolerance 1e-4)."""
    pose = np.asarray(pose)
    if pose.shape != (4, 4):
        raise SceneFormatError(f"{context}: pose must be 4x4, got {pose.shape}")
    rot = pose[:3, :3]
    if np.max(np.abs(rot.T @ rot - np.eye(3))) > _POSE_TOL:
        raise SceneFormatError(f"{context}: rotation block is not orthonormal")
    det = float(np.linalg.det(rot))
    if abs(det - 1.0) > _POSE_TOL:
        raise SceneFormatError(f"{context}: rotation determinant {det:.6f} != +1")
    if np.max(np.abs(pose[3] - np.array([0.0, 0.0, 0.0, 1.0]))) > _POSE_TOL:
        raise SceneFormatError(f"{context}: bottom row must be [0 0 0 1]")


# ---------------------------------------------------------------------------
# small text formats
# ---------------------------------------------------------------------------

def _read_floats(path: Path, expected: int, what: str) -> list[float]:
    try:
        values = [float(v) for v in path.read_text().split()]
    except FileNotFoundError:
        raise SceneFormatError(f"missing {what} file: {path}") from None
    except ValueError as err:
        raise SceneFormatError(f"{what} file {path}: {err}") from None
    if len(values) != expected:
        raise SceneFormatError(f"{what} file {path}: expected {expected} values, got {len(values)}")
    return values


def load_intrinsics(path) -> CameraIntrinsics:
    v = _read_floats(Path(path), 6, "intrinsics")
    return CameraIntrinsics(v[0], v[1], v[2], v[3], int(v[4]), int(v[5]))


def write_intrinsics(path, intrinsics: CameraIntrinsics) -> None:
    Path(path).write_text(
        f"{intrinsics.fx:.17g} {intrinsics.fy:.17g} {intrinsics.cx:.17g} "
        f"{intrinsics.cy:.17g} {intrinsics.width} {intrinsics.height}\n")


def load_bounds(path) -> SceneBounds:
    v = _read_floats(Path(path), 6, "bounds")
    return SceneBounds(np.array(v[:3]), np.array(v[3:]))


def write_bounds(path, bounds: SceneBounds) -> None:
    vals = list(bounds.minimum) + list(bounds.maximum)
    Path(path).write_text(" ".join(f"{v:.17g}" for v in vals) + "\n")


def load_pose(path) -> np.ndarray:
    v = _read_floats(Path(path), 16, "pose")
    pose = np.array(v, dtype=np.float64).reshape(4, 4)
    validate_pose(pose, str(path))
    return pose


def write_pose(path, pose: np.ndarray) -> None:
    flat = np.asarray(pose, dtype=np.float64).reshape(16)
    Path(path).write_text(" ".join(f"{v:.17g}" for v in flat) + "\n")


# ---------------------------------------------------------------------------
# images
# ---------------------------------------------------------------------------

def load_rgb_png(path) -> np.ndarray:
    img = np.asarray(Image.open(path).convert("RGB"))
    return img.astype(np.float32) / 255.0


def write_rgb_png(path, rgb: np.ndarray) -> None:
    """rgb is HxWx3 float in [0, 1]; values are clipped and quantized."""
    arr = np.clip(np.asarray(rgb), 0.0, 1.0)
    Image.fromarray(np.round(arr * 255.0).astype(np.uint8), mode="RGB").save(path)


def load_depth_png(path) -> np.ndarray:
    """16-bit millimeter PNG to float32 meters; 0 stays 0 (undefined)."""
    img = Image.open(path)
    arr = np.asarray(img)
    if arr.dtype not in (np.uint16, np.int32, np.uint8):
        raise SceneFormatError(f"{path}: unsupported depth dtype {arr.dtype}")
    return arr.astype(np.float32) / 1000.0


def write_depth_png(path, depth_m: np.ndarray) -> None:
    mm = np.round(np.clip(np.asarray(depth_m), 0.0, 65.535) * 1000.0).astype(np.uint16)
    Image.fromarray(mm).save(path)


def write_gray_png(path, values: np.ndarray) -> None:
    """8-bit grayscale export for opacity-style maps in [0, 1]."""
    arr = np.clip(np.asarray(values), 0.0, 1.0)
    Image.fromarray(np.round(arr * 255.0).astype(np.uint8), mode="L").save(path)


def write_index_png(path, indices: np.ndarray, labels: list[str],
                    palette: np.ndarray | None = None) -> None:
    """Indexed-color segmentation PNG plus a sidecar ``<path>.labels.txt``."""
    idx = np.asarray(indices)
    if idx.max(initial=0) > 255:
        raise SceneFormatError("index PNG supports at most 256 classes")
    if palette is None:
        palette = default_palette(max(int(idx.max(initial=0)) + 1, len(labels) + 1))
    img = Image.fromarray(idx.astype(np.uint8), mode="P")
    img.putpalette(palette.astype(np.uint8).reshape(-1).tolist())
    img.save(path)
    Path(str(path) + ".labels.txt").write_text("".join(f"{s}\n" for s in labels))


def load_index_png(path) -> np.ndarray:
    img = Image.open(path)
    if img.mode not in ("P", "L"):
        raise SceneFormatError(f"{path}: expected indexed PNG, got mode {img.mode}")
    return np.asarray(img).astype(np.int32)


def default_palette(n: int) -> np.ndarray:
    """Deterministic distinguishable colors; index 0 is reserved dark gray."""
    rng = np.random.default_rng(0xC01025)
    colors = rng.integers(40, 255, size=(max(n, 1), 3))
    colors[0] = (64, 64, 64)
    return colors.astype(np.uint8)


# ---------------------------------------------------------------------------
# FTEN feature tensors
# ---------------------------------------------------------------------------

def write_feature_map(path, features: np.ndarray) -> None:
    arr = np.ascontiguousarray(features, dtype="<f4")
    if arr.ndim != 3:
        raise SceneFormatError(f"feature map must be HxWxD, got shape {arr.shape}")
    h, w, d = arr.shape
    with open(path, "wb") as fh:
        fh.write(FTEN_MAGIC)
        fh.write(struct.pack("<III", h, w, d))
        fh.write(arr.tobytes())


def load_feature_map(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.read(16)
        if len(header) < 16 or header[:4] != FTEN_MAGIC:
            raise SceneFormatError(f"{path}: bad magic, not an FTEN file")
        h, w, d = struct.unpack("<III", header[4:])
        payload = fh.read()
    expected = h * w * d * 4
    if len(payload) != expected:
        raise SceneFormatError(
            f"{path}: truncated payload, expected {expected} bytes got {len(payload)}")
    arr = np.frombuffer(payload, dtype="<f4").reshape(h, w, d)
    if not np.all(np.isfinite(arr)):
        raise SceneFormatError(f"{path}: non-finite feature values")
    return arr.copy()


# ---------------------------------------------------------------------------
# embeddings and point clouds
# ---------------------------------------------------------------------------

def load_embeddings(path):
    """Parse ``label<TAB>values`` lines into an ordered EmbeddingSet."""
    from .segmentation import EmbeddingSet

    labels: list[str] = []
    rows: list[np.ndarray] = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        if "\t" not in line:
            raise SceneFormatError(f"{path}:{lineno}: expected 'label<TAB>values'")
        label, _, rest = line.partition("\t")
        values = rest.split()
        if not values:
            raise SceneFormatError(f"{path}:{lineno}: label '{label}' has no vector")
        if label in labels:
            raise SceneFormatError(f"{path}:{lineno}: duplicate label '{label}'")
        row = np.array([float(v) for v in values], dtype=np.float32)
        if rows and row.shape != rows[0].shape:
            raise SceneFormatError(
                f"{path}:{lineno}: dimension {row.size} != {rows[0].size} of first row")
        labels.append(label)
        rows.append(row)
    if not labels:
        raise SceneFormatError(f"{path}: no embedding records")
    return EmbeddingSet(labels=labels, vectors=np.stack(rows))


def write_embeddings(path, labels: list[str], vectors: np.ndarray) -> None:
    lines = []
    for label, row in zip(labels, np.asarray(vectors)):
        lines.append(label + "\t" + " ".join(f"{v:.9g}" for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def load_point_cloud(path, bounds: SceneBounds | None = None) -> LabeledPointCloud:
    points = []
    labels = []
    any_label = False
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) not in (3, 4):
            raise SceneFormatError(f"{path}:{lineno}: expected 'x y z [class]'")
        points.append([float(parts[0]), float(parts[1]), float(parts[2])])
        if len(parts) == 4:
            labels.append(int(parts[3]))
            any_label = True
        else:
            labels.append(IGNORE_INDEX)
    cloud = LabeledPointCloud(
        points=np.array(points, dtype=np.float64).reshape(-1, 3),
        labels=np.array(labels, dtype=np.int32) if any_label else None)
    if bounds is not None:
        cloud.inside = bounds.contains(cloud.points)
    return cloud


def write_point_cloud(path, cloud: LabeledPointCloud) -> None:
    lines = []
    for i, p in enumerate(cloud.points):
        row = f"{p[0]:.17g} {p[1]:.17g} {p[2]:.17g}"
        if cloud.labels is not None:
            row += f" {int(cloud.labels[i])}"
        lines.append(row)
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# whole scenes
# ---------------------------------------------------------------------------

_FRAME_RE = re.compile(r"^(\d+)\.rgb\.png$")


def load_scene(directory) -> SceneData:
    """Load and validate a scene directory; frames sorted by frame_id."""
    root = Path(directory)
    if not root.is_dir():
        raise SceneFormatError(f"scene directory not found: {root}")
    intrinsics = load_intrinsics(root / "intrinsics.txt")
    bounds = load_bounds(root / "bounds.txt")
    frames_dir = root / "frames"
    if not frames_dir.is_dir():
        raise SceneFormatError(f"missing frames/ directory in {root}")

    ids = sorted(int(m.group(1)) for m in
                 (_FRAME_RE.match(p.name) for p in frames_dir.iterdir()) if m)
    if not ids:
        raise SceneFormatError(f"no frames found in {frames_dir}")

    frames = []
    feature_dim = None
    feature_owner = None
    featureless = None
    for fid in ids:
        stem = frames_dir / f"{fid:05d}"
        rgb = load_rgb_png(f"{stem}.rgb.png")
        pose_path = Path(f"{stem}.pose.txt")
        if not pose_path.exists():
            raise SceneFormatError(f"frame {fid}: missing pose file {pose_path}")
        pose = load_pose(pose_path)

        depth = None
        depth_path = Path(f"{stem}.depth.png")
        if depth_path.exists():
            depth = load_depth_png(depth_path)

        features = None
        feat_path = Path(f"{stem}.feat.bin")
        if feat_path.exists():
            features = load_feature_map(feat_path)
            if feature_dim is None:
                feature_dim = features.shape[2]
                feature_owner = fid
            elif features.shape[2] != feature_dim:
                raise SceneFormatError(
                    f"inconsistent feature dimension: frame {feature_owner} has "
                    f"D={feature_dim} but frame {fid} has D={features.shape[2]}")
        else:
            featureless = fid

        frames.append(PosedFrame(frame_id=fid, rgb=rgb, pose=pose,
                                 depth=depth, features=features))

    if feature_dim is not None and featureless is not None:
        raise SceneFormatError(
            f"frame {featureless} has no feature map but frame {feature_owner} does; "
            "feature maps must cover all frames or none")
    return SceneData(intrinsics=intrinsics, bounds=bounds, frames=frames)


def write_frame(frames_dir, frame: PosedFrame) -> None:
    frames_dir = Path(frames_dir)
    frames_dir.mkdir(parents=True, exist_ok=True)
    stem = frames_dir / f"{frame.frame_id:05d}"
    write_rgb_png(f"{stem}.rgb.png", frame.rgb)
    write_pose(f"{stem}.pose.txt", frame.pose)
    if frame.depth is not None:
        write_depth_png(f"{stem}.depth.png", frame.depth)
    if frame.features is not None:
        write_feature_map(f"{stem}.feat.bin", frame.features)


def write_scene(directory, scene: SceneData) -> None:
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    write_intrinsics(root / "intrinsics.txt", scene.intrinsics)
    write_bounds(root / "bounds.txt", scene.bounds)
    for frame in scene.frames:
        write_frame(root / "frames", frame)
