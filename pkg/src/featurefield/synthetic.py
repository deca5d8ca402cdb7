"""Synthetic scene generation with an exact analytic ray-cast oracle.

Scenes are a rectangular room (inward-facing walls, one class) containing
axis-aligned boxes and spheres. Every output is closed-form: RGB is albedo
under fixed-light Lambertian shading, depth is the exact first-hit distance
along the ray, and feature maps carry the class embedding of the hit surface
plus optional Gaussian noise. That makes rendered/segmented output checkable
against ground truth with no external dataset or pretrained model.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import scene_io
from .scene_io import (CameraIntrinsics, LabeledPointCloud, PosedFrame,
                       SceneBounds, SceneData)


@dataclass(frozen=True)
class BoxPrimitive:
    label: str
    albedo: tuple
    minimum: tuple
    maximum: tuple

    def as_arrays(self):
        return np.asarray(self.minimum, float), np.asarray(self.maximum, float)


@dataclass(frozen=True)
class SpherePrimitive:
    label: str
    albedo: tuple
    center: tuple
    radius: float


@dataclass(frozen=True)
class OrbitConfig:
    """Camera ring(s) around a look-at target; heights cycle over the ring."""

    target: tuple
    radius: float
    heights: tuple
    count: int


@dataclass(frozen=True)
class SceneSpec:
    room_min: tuple = (0.0, 0.0, 0.0)
    room_max: tuple = (4.0, 4.0, 3.0)
    wall_label: str = "wall"
    wall_albedo: tuple = (0.74, 0.72, 0.68)
    primitives: tuple = ()
    orbit: OrbitConfig = OrbitConfig(target=(2.0, 2.0, 0.55), radius=1.5,
                                     heights=(1.1, 1.7, 2.2), count=24)
    image_size: tuple = (128, 96)          # width, height
    fov_degrees: float = 70.0
    feature_dim: int = 8
    feature_scale: int = 1                 # feature map downscale vs image
    feature_noise: float = 0.05
    embedding_mode: str = "orthonormal"    # or "correlated"
    embedding_correlation: float = 0.7
    cloud_points: int = 20000
    cloud_visible_only: bool = True
    bounds_margin: float = 0.15
    seed: int = 0

    @property
    def labels(self) -> list:
        return [self.wall_label] + [p.label for p in self.primitives]

    def bounds(self) -> SceneBounds:
        # The scene box is padded slightly beyond the walls so ray sampling
        # crosses the wall surfaces instead of terminating exactly on them;
        # otherwise the compositor could never place weight at the surface.
        m = self.bounds_margin
        return SceneBounds(np.asarray(self.room_min) - m,
                           np.asarray(self.room_max) + m)

    def intrinsics(self) -> CameraIntrinsics:
        w, h = self.image_size
        fx = 0.5 * w / np.tan(np.radians(self.fov_degrees) / 2.0)
        return CameraIntrinsics(fx, fx, w / 2.0, h / 2.0, w, h)


def default_scene_spec(seed: int = 0, **overrides) -> SceneSpec:
    """The standard 3-class scene: a room holding one box and one sphere."""
    spec = SceneSpec(
        primitives=(
            BoxPrimitive(label="box", albedo=(0.82, 0.25, 0.20),
                         minimum=(1.05, 1.20, 0.0), maximum=(1.85, 2.05, 0.85)),
            SpherePrimitive(label="sphere", albedo=(0.20, 0.35, 0.85),
                            center=(2.70, 2.55, 0.50), radius=0.50),
        ),
        seed=seed)
    return replace(spec, **overrides) if overrides else spec


_LIGHT_DIR = np.array([0.25, -0.15, 0.95])
_LIGHT_DIR = _LIGHT_DIR / np.linalg.norm(_LIGHT_DIR)
_AMBIENT = 0.35


class SceneSpecError(ValueError):
    """Raised for geometrically unsatisfiable scene specs."""


def validate_spec(spec: SceneSpec) -> None:
    room_min = np.asarray(spec.room_min)
    room_max = np.asarray(spec.room_max)
    if not np.all(room_max > room_min):
        raise SceneSpecError("room max must exceed room min on every axis")
    seen = {spec.wall_label}
    for prim in spec.primitives:
        if prim.label in seen:
            raise SceneSpecError(f"duplicate class label '{prim.label}'")
        seen.add(prim.label)
        if isinstance(prim, BoxPrimitive):
            lo, hi = prim.as_arrays()
            if not np.all(hi > lo):
                raise SceneSpecError(f"box '{prim.label}' has inverted extents")
            if np.any(lo < room_min) or np.any(hi > room_max):
                raise SceneSpecError(f"box '{prim.label}' extends outside the room")
        else:
            c = np.asarray(prim.center)
            if np.any(c - prim.radius < room_min) or np.any(c + prim.radius > room_max):
                raise SceneSpecError(f"sphere '{prim.label}' extends outside the room")
    for a in spec.primitives:
        for b in spec.primitives:
            if a is not b and _primitives_overlap(a, b):
                raise SceneSpecError(
                    f"primitives '{a.label}' and '{b.label}' overlap")
    if spec.embedding_mode == "orthonormal" and spec.feature_dim < len(spec.labels):
        raise SceneSpecError("orthonormal embeddings need feature_dim >= class count")
    if spec.embedding_mode == "correlated" and spec.feature_dim < len(spec.labels) + 1:
        raise SceneSpecError("correlated embeddings need feature_dim >= class count + 1")


def _primitives_overlap(a, b) -> bool:
    if isinstance(a, SpherePrimitive) and isinstance(b, BoxPrimitive):
        a, b = b, a
    if isinstance(a, BoxPrimitive) and isinstance(b, SpherePrimitive):
        lo, hi = a.as_arrays()
        closest = np.clip(np.asarray(b.center), lo, hi)
        return float(np.linalg.norm(closest - b.center)) < b.radius
    if isinstance(a, BoxPrimitive) and isinstance(b, BoxPrimitive):
        alo, ahi = a.as_arrays()
        blo, bhi = b.as_arrays()
        return bool(np.all(ahi > blo) and np.all(bhi > alo))
    da = np.asarray(a.center) - np.asarray(b.center)
    return float(np.linalg.norm(da)) < a.radius + b.radius


# ---------------------------------------------------------------------------
# analytic intersections
# ---------------------------------------------------------------------------

def _ray_sphere(origins, dirs, center, radius):
    """Nearest positive hit distance per ray (inf on miss); handles tangency."""
    oc = origins - center
    b = np.einsum("md,md->m", dirs, oc)
    c = np.einsum("md,md->m", oc, oc) - radius * radius
    disc = b * b - c
    hit = disc >= 0.0
    sq = np.sqrt(np.maximum(disc, 0.0))
    t0 = -b - sq
    t1 = -b + sq
    t = np.where(t0 > 1e-9, t0, np.where(t1 > 1e-9, t1, np.inf))
    return np.where(hit, t, np.inf)


def _ray_box_exterior(origins, dirs, lo, hi):
    """First hit with a solid box from outside (or exit if inside); returns t and face axis."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        ta = (lo[None, :] - origins) * inv
        tb = (hi[None, :] - origins) * inv
    tmin = np.where(np.isnan(ta), -np.inf, np.minimum(ta, tb))
    tmax = np.where(np.isnan(tb), np.inf, np.maximum(ta, tb))
    t_enter = tmin.max(axis=1)
    t_exit = tmax.min(axis=1)
    axis_enter = tmin.argmax(axis=1)
    hit = (t_exit > np.maximum(t_enter, 0.0)) & (t_enter > 1e-9)
    return np.where(hit, t_enter, np.inf), axis_enter


def _ray_room_interior(origins, dirs, lo, hi):
    """Exit distance through the room shell (rays start inside); t and face axis."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        ta = (lo[None, :] - origins) * inv
        tb = (hi[None, :] - origins) * inv
    tmax = np.where(np.isnan(tb), np.inf, np.maximum(ta, tb))
    t_exit = tmax.min(axis=1)
    axis_exit = tmax.argmin(axis=1)
    return t_exit, axis_exit


def first_hit(spec: SceneSpec, origins: np.ndarray, dirs: np.ndarray):
    """Nearest surface along each ray: (t, class index, outward normal, albedo)."""
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    m = len(origins)
    lo = np.asarray(spec.room_min, dtype=np.float64)
    hi = np.asarray(spec.room_max, dtype=np.float64)

    t_room, axis_exit = _ray_room_interior(origins, dirs, lo, hi)
    t_best = t_room.copy()
    cls = np.zeros(m, dtype=np.int32)
    normals = np.zeros((m, 3))
    # Inward wall normal opposes the ray's sign on the exit axis.
    normals[np.arange(m), axis_exit] = -np.sign(dirs[np.arange(m), axis_exit])
    albedo = np.broadcast_to(np.asarray(spec.wall_albedo), (m, 3)).copy()

    for k, prim in enumerate(spec.primitives, start=1):
        if isinstance(prim, BoxPrimitive):
            plo, phi = prim.as_arrays()
            t, axis_enter = _ray_box_exterior(origins, dirs, plo, phi)
            closer = t < t_best
            idx = np.flatnonzero(closer)
            if idx.size:
                n = np.zeros((idx.size, 3))
                n[np.arange(idx.size), axis_enter[idx]] = -np.sign(
                    dirs[idx, axis_enter[idx]])
                normals[idx] = n
        else:
            t = _ray_sphere(origins, dirs, np.asarray(prim.center), prim.radius)
            closer = t < t_best
            idx = np.flatnonzero(closer)
            if idx.size:
                p = origins[idx] + t[idx, None] * dirs[idx]
                n = p - np.asarray(prim.center)
                normals[idx] = n / np.linalg.norm(n, axis=1, keepdims=True)
        t_best = np.where(closer, t, t_best)
        cls = np.where(closer, k, cls)
        albedo[closer] = np.asarray(prim.albedo)
    return t_best, cls, normals, albedo


def _shade(albedo: np.ndarray, normals: np.ndarray) -> np.ndarray:
    diffuse = np.maximum(normals @ _LIGHT_DIR, 0.0)
    return np.clip(albedo * (_AMBIENT + (1.0 - _AMBIENT) * diffuse)[:, None], 0.0, 1.0)


def oracle_render(spec: SceneSpec, pose: np.ndarray,
                  intrinsics: CameraIntrinsics) -> dict:
    """Exact rgb/depth/class maps for one view. Depth is ray length in meters."""
    from .renderer import image_pixel_grid, pixel_directions

    scene_io.validate_pose(pose, "oracle_render")
    w, h = intrinsics.width, intrinsics.height
    cam_dirs = pixel_directions(intrinsics, image_pixel_grid(w, h))
    dirs = cam_dirs @ pose[:3, :3].T
    origins = np.broadcast_to(pose[:3, 3], dirs.shape)
    t, cls, normals, albedo = first_hit(spec, origins, dirs)
    rgb = _shade(albedo, normals)
    return {
        "rgb": rgb.reshape(h, w, 3).astype(np.float32),
        "depth": t.reshape(h, w).astype(np.float32),
        "classes": cls.reshape(h, w),
    }


# ---------------------------------------------------------------------------
# cameras and embeddings
# ---------------------------------------------------------------------------

def look_at_pose(position, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world pose for our convention (x right, y down, z forward)."""
    position = np.asarray(position, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - position
    forward = forward / np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    norm = np.linalg.norm(right)
    if norm < 1e-8:
        raise ValueError("look_at_pose: viewing direction parallel to up vector")
    right = right / norm
    down = np.cross(forward, right)
    pose = np.eye(4)
    pose[:3, 0] = right
    pose[:3, 1] = down
    pose[:3, 2] = forward
    pose[:3, 3] = position
    return pose


def orbit_poses(orbit: OrbitConfig) -> list:
    poses = []
    target = np.asarray(orbit.target, dtype=np.float64)
    for i in range(orbit.count):
        angle = 2.0 * np.pi * i / orbit.count
        height = orbit.heights[i % len(orbit.heights)]
        position = np.array([target[0] + orbit.radius * np.cos(angle),
                             target[1] + orbit.radius * np.sin(angle),
                             height])
        poses.append(look_at_pose(position, target))
    return poses


def class_embeddings(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    """K x D embeddings: orthonormal rows, or uniformly correlated (cos = rho)."""
    k = len(spec.labels)
    d = spec.feature_dim
    basis, _ = np.linalg.qr(rng.normal(size=(d, d)))
    basis = basis.T  # rows orthonormal
    if spec.embedding_mode == "orthonormal":
        return basis[:k].astype(np.float32)
    if spec.embedding_mode == "correlated":
        rho = spec.embedding_correlation
        shared = basis[0]
        rows = [np.sqrt(rho) * shared + np.sqrt(1.0 - rho) * basis[1 + i]
                for i in range(k)]
        return np.stack(rows).astype(np.float32)
    raise SceneSpecError(f"unknown embedding mode '{spec.embedding_mode}'")


# ---------------------------------------------------------------------------
# surface sampling
# ---------------------------------------------------------------------------

def _sample_box_surface(rng, lo, hi, n):
    ext = hi - lo
    areas = np.array([ext[1] * ext[2], ext[1] * ext[2],
                      ext[0] * ext[2], ext[0] * ext[2],
                      ext[0] * ext[1], ext[0] * ext[1]])
    faces = rng.choice(6, size=n, p=areas / areas.sum())
    u = rng.random((n, 2))
    pts = np.empty((n, 3))
    for face in range(6):
        m = faces == face
        axis = face // 2
        side = face % 2
        others = [a for a in range(3) if a != axis]
        pts[m, axis] = hi[axis] if side else lo[axis]
        pts[m, others[0]] = lo[others[0]] + u[m, 0] * ext[others[0]]
        pts[m, others[1]] = lo[others[1]] + u[m, 1] * ext[others[1]]
    return pts


def _sample_sphere_surface(rng, center, radius, n):
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return center + radius * v


def _surface_areas(spec: SceneSpec) -> list:
    lo = np.asarray(spec.room_min)
    hi = np.asarray(spec.room_max)
    ext = hi - lo
    areas = [2.0 * (ext[0] * ext[1] + ext[0] * ext[2] + ext[1] * ext[2])]
    for prim in spec.primitives:
        if isinstance(prim, BoxPrimitive):
            plo, phi = prim.as_arrays()
            e = phi - plo
            areas.append(2.0 * (e[0] * e[1] + e[0] * e[2] + e[1] * e[2]))
        else:
            areas.append(4.0 * np.pi * prim.radius ** 2)
    return areas


def sample_surface_cloud(spec: SceneSpec, rng: np.random.Generator,
                         poses: list | None = None) -> LabeledPointCloud:
    """Uniform area-weighted surface samples with class labels.

    With cloud_visible_only (the default) points are kept only if some camera
    sees them as its first hit, mirroring how scanned ground-truth clouds only
    contain observed surface. Passing poses=None skips the visibility filter.
    """
    areas = _surface_areas(spec)
    counts = np.maximum(
        np.round(np.asarray(areas) / sum(areas) * spec.cloud_points), 1).astype(int)
    points = [_sample_box_surface(rng, np.asarray(spec.room_min),
                                  np.asarray(spec.room_max), counts[0])]
    labels = [np.zeros(counts[0], dtype=np.int32)]
    for k, prim in enumerate(spec.primitives, start=1):
        if isinstance(prim, BoxPrimitive):
            plo, phi = prim.as_arrays()
            pts = _sample_box_surface(rng, plo, phi, counts[k])
        else:
            pts = _sample_sphere_surface(rng, np.asarray(prim.center),
                                         prim.radius, counts[k])
        points.append(pts)
        labels.append(np.full(counts[k], k, dtype=np.int32))
    cloud = LabeledPointCloud(points=np.concatenate(points),
                              labels=np.concatenate(labels))
    if poses is not None:
        visible = _visible_from_any(spec, cloud.points, poses)
        cloud = LabeledPointCloud(points=cloud.points[visible],
                                  labels=cloud.labels[visible])
    cloud.inside = spec.bounds().contains(cloud.points)
    return cloud


def _visible_from_any(spec, points, poses, tol=1e-6):
    visible = np.zeros(len(points), dtype=bool)
    for pose in poses:
        rest = np.flatnonzero(~visible)
        if rest.size == 0:
            break
        origin = pose[:3, 3]
        offsets = points[rest] - origin
        dist = np.linalg.norm(offsets, axis=1)
        dirs = offsets / dist[:, None]
        # In front of the camera (z forward) and first hit at the point itself.
        in_front = dirs @ pose[:3, 2] > 0.05
        t, _, _, _ = first_hit(spec, np.broadcast_to(origin, dirs.shape), dirs)
        visible[rest] = in_front & (np.abs(t - dist) < np.maximum(tol, 1e-5 * dist))
    return visible


# ---------------------------------------------------------------------------
# scene generation
# ---------------------------------------------------------------------------

def generate_scene(spec: SceneSpec, out_dir) -> SceneData:
    """Write a full scene directory (frames, embeddings, cloud); returns it loaded."""
    validate_spec(spec)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)

    intrinsics = spec.intrinsics()
    bounds = spec.bounds()
    poses = orbit_poses(spec.orbit)
    embeddings = class_embeddings(spec, rng)

    w, h = spec.image_size
    if w % spec.feature_scale or h % spec.feature_scale:
        raise SceneSpecError("feature_scale must divide the image size")
    feat_intr = intrinsics.scaled(w // spec.feature_scale, h // spec.feature_scale)

    scene_io.write_intrinsics(out / "intrinsics.txt", intrinsics)
    scene_io.write_bounds(out / "bounds.txt", bounds)
    scene_io.write_embeddings(out / "embeddings.txt", spec.labels, embeddings)

    frames_dir = out / "frames"
    frames_dir.mkdir(exist_ok=True)
    for fid, pose in enumerate(poses):
        maps = oracle_render(spec, pose, intrinsics)
        feat_cls = oracle_render(spec, pose, feat_intr)["classes"]
        features = embeddings[feat_cls.reshape(-1)].reshape(
            feat_intr.height, feat_intr.width, spec.feature_dim)
        if spec.feature_noise > 0:
            features = features + rng.normal(
                0.0, spec.feature_noise, features.shape).astype(np.float32)
        frame = PosedFrame(frame_id=fid, rgb=maps["rgb"], pose=pose,
                           depth=maps["depth"], features=features.astype(np.float32))
        scene_io.write_frame(frames_dir, frame)

    cloud = sample_surface_cloud(spec, rng,
                                 poses if spec.cloud_visible_only else None)
    scene_io.write_point_cloud(out / "cloud.txt", cloud)
    return scene_io.load_scene(out)
