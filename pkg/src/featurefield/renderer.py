"""Ray generation, sampling, and differentiable volumetric compositing.

A ray's rendered value is sum_i T_i * (1 - exp(-sigma_i * delta_i)) * v_i
with transmittance T_i = exp(-sum_{j<i} sigma_j * delta_j). The same code
path serves training (on an active gradient tape) and inference.

All rays live in world units (meters); positions are normalized into the
unit cube only for encoding. Rendered depth is therefore metric as-is.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numerics as nm
from . import scene_io
from .field import FieldModel
from .scene_io import CameraIntrinsics, SceneBounds, validate_pose

DEFAULT_SAMPLES_PER_RAY = 256


@dataclass
class RayBatch:
    """World-space rays clipped to the scene box. ``valid`` flags box hits."""

    origins: np.ndarray      # M x 3
    directions: np.ndarray   # M x 3, unit norm
    t_near: np.ndarray       # M
    t_far: np.ndarray        # M
    valid: np.ndarray        # M bool

    def __len__(self):
        return len(self.origins)

    def select(self, mask) -> "RayBatch":
        return RayBatch(self.origins[mask], self.directions[mask],
                        self.t_near[mask], self.t_far[mask], self.valid[mask])


def ray_box_intersect(origins, directions, bounds: SceneBounds):
    """Slab-test entry/exit distances; rays that miss get valid=False."""
    o = np.asarray(origins, dtype=np.float64)
    d = np.asarray(directions, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t0 = (bounds.minimum[None, :] - o) * inv
        t1 = (bounds.maximum[None, :] - o) * inv
    lo = np.where(np.isnan(t0), -np.inf, np.minimum(t0, t1))
    hi = np.where(np.isnan(t1), np.inf, np.maximum(t0, t1))
    t_enter = lo.max(axis=1)
    t_exit = hi.min(axis=1)
    t_near = np.maximum(t_enter, 0.0)
    valid = t_exit > np.maximum(t_enter, 0.0)
    return t_near, t_exit, valid


def pixel_directions(intrinsics: CameraIntrinsics, pixels: np.ndarray) -> np.ndarray:
    """Camera-frame unit directions through pixel centers (u right, v down, +z forward)."""
    px = np.asarray(pixels, dtype=np.float64)
    x = (px[:, 0] + 0.5 - intrinsics.cx) / intrinsics.fx
    y = (px[:, 1] + 0.5 - intrinsics.cy) / intrinsics.fy
    dirs = np.stack([x, y, np.ones_like(x)], axis=1)
    return dirs / np.linalg.norm(dirs, axis=1, keepdims=True)


def generate_rays(pose: np.ndarray, intrinsics: CameraIntrinsics,
                  pixels: np.ndarray, bounds: SceneBounds) -> RayBatch:
    """World-space rays through the given (u, v) pixels of a posed camera."""
    validate_pose(pose, "generate_rays")
    px = np.asarray(pixels, dtype=np.float64)
    if np.any(px[:, 0] < 0) or np.any(px[:, 0] >= intrinsics.width) or \
       np.any(px[:, 1] < 0) or np.any(px[:, 1] >= intrinsics.height):
        raise ValueError("generate_rays: pixel coordinates outside image bounds")
    cam_dirs = pixel_directions(intrinsics, px)
    rot = pose[:3, :3]
    world_dirs = cam_dirs @ rot.T
    origins = np.broadcast_to(pose[:3, 3], world_dirs.shape).copy()
    t_near, t_far, valid = ray_box_intersect(origins, world_dirs, bounds)
    return RayBatch(origins=origins, directions=world_dirs,
                    t_near=t_near, t_far=np.where(valid, t_far, t_near),
                    valid=valid)


def image_pixel_grid(width: int, height: int) -> np.ndarray:
    """All (u, v) pixel coordinates in row-major order, shape (H*W, 2)."""
    u, v = np.meshgrid(np.arange(width), np.arange(height))
    return np.stack([u.reshape(-1), v.reshape(-1)], axis=1).astype(np.float64)


def sample_along_rays(rays: RayBatch, n_samples: int, stratified: bool = False,
                      rng: np.random.Generator | None = None):
    """Depth coordinates t (M, N) and interval lengths delta (M, N).

    Deterministic mode places samples at the midpoints of N equal bins;
    stratified mode jitters uniformly within each bin. delta_i = t_{i+1} -
    t_i, with the final interval running to t_far.
    """
    if n_samples < 2:
        raise ValueError("n_samples must be >= 2")
    span = (rays.t_far - rays.t_near)[:, None]
    bin_width = span / n_samples
    base = np.arange(n_samples, dtype=np.float64)[None, :]
    if stratified:
        if rng is None:
            raise ValueError("stratified sampling requires an rng")
        offsets = rng.random((len(rays), n_samples))
    else:
        offsets = 0.5
    t = rays.t_near[:, None] + (base + offsets) * bin_width
    deltas = np.empty_like(t)
    deltas[:, :-1] = np.diff(t, axis=1)
    deltas[:, -1] = rays.t_far - t[:, -1]
    return t, deltas


def sample_positions(rays: RayBatch, t: np.ndarray) -> np.ndarray:
    """World-space sample points, shape (M, N, 3)."""
    return rays.origins[:, None, :] + t[:, :, None] * rays.directions[:, None, :]


# ---------------------------------------------------------------------------
# compositing
# ---------------------------------------------------------------------------

def _composite_forward(sig: np.ndarray, deltas: np.ndarray, val: np.ndarray):
    a = sig * deltas
    cum = np.cumsum(a, axis=1)
    trans = np.exp(-(cum - a))                      # T_i, exclusive prefix
    alpha = -np.expm1(-a)                           # 1 - exp(-a), >= 0
    weights = trans * alpha
    rendered = np.einsum("mn,mnc->mc", weights, val, optimize=True)
    trans_next = np.exp(-cum)                       # T_{i+1}
    return rendered, weights, trans, trans_next


def composite(sigmas, deltas: np.ndarray, values):
    """Differentiable volumetric compositing of per-sample values.

    sigmas: Tensor (M, N) nonnegative densities; deltas: array (M, N) of
    positive interval lengths; values: Tensor (M, N) or (M, N, C).

    Returns (rendered Tensor (M,) or (M, C), weights (M, N), transmittance
    (M, N)); the last two are plain arrays.
    """
    sigmas = nm.as_tensor(sigmas)
    values = nm.as_tensor(values)
    deltas = np.asarray(deltas)
    if sigmas.shape != deltas.shape:
        raise nm.ShapeError(f"composite: sigmas {sigmas.shape} != deltas {deltas.shape}")
    if values.shape[:2] != sigmas.shape:
        raise nm.ShapeError(
            f"composite: values {values.shape} do not align with sigmas {sigmas.shape}")
    if np.any(sigmas.data < 0):
        raise ValueError("composite: negative density")
    if np.any(deltas <= 0):
        raise ValueError("composite: non-positive interval length")

    scalar = values.data.ndim == 2
    val = values.data[:, :, None] if scalar else values.data
    sig = sigmas.data

    rendered, weights, trans, trans_next = _composite_forward(sig, deltas, val)
    out = nm.Tensor(rendered[:, 0] if scalar else rendered)

    tape = nm._active_tape()
    if tape is not None:
        def back(g):
            gg = g[:, None] if scalar else g
            # d(out)/d(a_k) = (g . v_k) T_{k+1} - sum_{i>k} (g . v_i) w_i
            gv = np.einsum("mc,mnc->mn", gg, val, optimize=True)
            gw = gv * weights
            suffix = np.cumsum(gw[:, ::-1], axis=1)[:, ::-1] - gw
            da = gv * trans_next - suffix
            grad_sigma = (da * deltas).astype(sig.dtype, copy=False)
            grad_val = (gg[:, None, :] * weights[:, :, None]).astype(val.dtype, copy=False)
            if scalar:
                grad_val = grad_val[:, :, 0]
            return [grad_sigma, grad_val]

        tape.record("composite", (sigmas, values), out, back)
    return out, weights, trans


def composite_oracle(sigmas: np.ndarray, deltas: np.ndarray, values: np.ndarray):
    """Direct-summation reference compositor (independent of composite())."""
    m, n = sigmas.shape
    vals = values if values.ndim == 3 else values[:, :, None]
    rendered = np.zeros((m, vals.shape[2]), dtype=np.float64)
    weights = np.zeros((m, n), dtype=np.float64)
    trans = np.zeros((m, n), dtype=np.float64)
    for i in range(m):
        for k in range(n):
            t_k = np.exp(-float(np.dot(sigmas[i, :k], deltas[i, :k])))
            w_k = t_k * (1.0 - np.exp(-sigmas[i, k] * deltas[i, k]))
            trans[i, k] = t_k
            weights[i, k] = w_k
            rendered[i] += w_k * vals[i, k]
    if values.ndim == 2:
        rendered = rendered[:, 0]
    return rendered, weights, trans


# ---------------------------------------------------------------------------
# whole-map rendering
# ---------------------------------------------------------------------------

def query_along_rays(model: FieldModel, rays: RayBatch, t: np.ndarray,
                     want_color: bool, want_feature: bool) -> dict:
    """Field outputs at every ray sample, reshaped to (M, N, .) tensors."""
    m, n = t.shape
    points = sample_positions(rays, t).reshape(-1, 3)
    x_enc = model.encode_positions(model.world_to_unit(points))
    sigma, geo = model.query_density(x_enc)
    out = {"sigma": nm.reshape(sigma, (m, n))}
    if want_color:
        d_enc = model.encode_directions(rays.directions)
        d_enc = np.repeat(d_enc, n, axis=0)
        out["color"] = nm.reshape(model.query_color(geo, d_enc), (m, n, 3))
    if want_feature:
        out["feature"] = nm.reshape(model.query_feature(geo), (m, n, model.feature_dim))
    return out


def render_ray_batch(model: FieldModel, rays: RayBatch, which, n_samples: int,
                     stratified: bool = False, rng=None) -> dict:
    """Composite the requested maps for one batch of rays; returns Tensors.

    Always includes 'opacity' (sum of compositing weights) as a plain array.
    """
    which = set(which)
    t, deltas = sample_along_rays(rays, n_samples, stratified=stratified, rng=rng)
    outputs = query_along_rays(model, rays, t,
                               want_color="color" in which,
                               want_feature="feature" in which)
    sigma = outputs["sigma"]
    result = {}
    weights = None
    if "color" in which:
        result["color"], weights, _ = composite(sigma, deltas, outputs["color"])
    if "feature" in which:
        result["feature"], weights, _ = composite(sigma, deltas, outputs["feature"])
    if "depth" in which:
        depth_vals = nm.Tensor(t.astype(sigma.dtype))
        result["depth"], weights, _ = composite(sigma, deltas, depth_vals)
    if weights is None:
        _, weights, _ = composite(sigma, deltas, nm.Tensor(t.astype(sigma.dtype)))
    result["opacity"] = weights.sum(axis=1)
    return result


def render_maps(model: FieldModel, pose: np.ndarray, intrinsics: CameraIntrinsics,
                which=("color", "depth", "feature", "opacity"),
                n_samples: int = DEFAULT_SAMPLES_PER_RAY,
                resolution: tuple | None = None, chunk: int = 2048) -> dict:
    """Render requested maps from a viewpoint; rays that miss the box are zero.

    resolution is (width, height); when given, intrinsics are rescaled so the
    field of view is preserved.
    """
    if resolution is not None:
        intrinsics = intrinsics.scaled(*resolution)
    w, h = intrinsics.width, intrinsics.height
    which = set(which) - {"opacity"}
    pixels = image_pixel_grid(w, h)
    rays = generate_rays(pose, intrinsics, pixels, model.bounds)

    maps = {name: np.zeros((h * w, dim), dtype=np.float32)
            for name, dim in (("color", 3), ("feature", model.feature_dim))
            if name in which}
    if "depth" in which:
        maps["depth"] = np.zeros(h * w, dtype=np.float32)
    maps["opacity"] = np.zeros(h * w, dtype=np.float32)

    idx = np.flatnonzero(rays.valid)
    for start in range(0, len(idx), chunk):
        sel = idx[start:start + chunk]
        batch = rays.select(sel)
        out = render_ray_batch(model, batch, which or {"depth"}, n_samples)
        for name in which:
            maps[name][sel] = out[name].data
        maps["opacity"][sel] = out["opacity"]

    return {name: arr.reshape(h, w, -1) if arr.ndim == 2 else arr.reshape(h, w)
            for name, arr in maps.items()}


def export_maps(directory, stem: str, maps: dict) -> dict:
    """Write rendered maps in their canonical file formats; returns paths."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = {}
    for name, arr in maps.items():
        if name == "color":
            path = directory / f"{stem}.color.png"
            scene_io.write_rgb_png(path, arr)
        elif name == "depth":
            path = directory / f"{stem}.depth.png"
            scene_io.write_depth_png(path, arr)
        elif name == "feature":
            path = directory / f"{stem}.feat.bin"
            scene_io.write_feature_map(path, arr)
        elif name == "opacity":
            path = directory / f"{stem}.opacity.png"
            scene_io.write_gray_png(path, arr)
        else:
            continue
        written[name] = path
    return written
