"""Position and direction encodings for the field MLPs.

Positions in the unit cube get a hybrid encoding: low-frequency sin/cos bands
for coarse location plus a learned multiresolution hash grid for detail.
Directions get a real spherical-harmonic basis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm

try:
    from numba import njit, prange
    _HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is an optional accelerator
    _HAS_NUMBA = False

HASH_PRIMES = (1, 2654435761, 805459861)


@dataclass(frozen=True)
class EncodingConfig:
    freq_bands: int = 2
    hash_levels: int = 16
    base_resolution: int = 16
    per_level_scale: float = 1.3819
    table_size_log2: int = 19
    features_per_level: int = 2
    sh_degree: int = 4

    def __post_init__(self):
        for name in ("freq_bands", "hash_levels", "base_resolution",
                     "table_size_log2", "features_per_level", "sh_degree"):
            if getattr(self, name) < 1:
                raise ValueError(f"EncodingConfig.{name} must be >= 1")
        if self.per_level_scale <= 1.0:
            raise ValueError("EncodingConfig.per_level_scale must be > 1")
        if self.sh_degree > 4:
            raise ValueError("spherical harmonics implemented up to degree 4")
        # Checkpoints store 32-bit reals; canonicalize so the level
        # resolutions are identical before and after a save/load cycle.
        object.__setattr__(self, "per_level_scale",
                           float(np.float32(self.per_level_scale)))

    @property
    def table_size(self) -> int:
        return 1 << self.table_size_log2

    @property
    def position_dim(self) -> int:
        return 6 * self.freq_bands + self.hash_levels * self.features_per_level

    @property
    def direction_dim(self) -> int:
        return self.sh_degree ** 2

    def level_resolution(self, level: int) -> int:
        return int(np.floor(self.base_resolution * self.per_level_scale ** level))


def init_hash_params(config: EncodingConfig, rng: np.random.Generator,
                     dtype=np.float32) -> dict:
    """One learnable table per level, initialized uniformly in [-1e-4, 1e-4]."""
    return {
        f"grid_{level:02d}": nm.Tensor(
            rng.uniform(-1e-4, 1e-4, (config.table_size, config.features_per_level)),
            dtype=dtype)
        for level in range(config.hash_levels)
    }


def clamp_unit_cube(points: np.ndarray) -> tuple[np.ndarray, int]:
    """Clamp points into [0, 1]^3, returning how many were outside."""
    clamped = np.clip(points, 0.0, 1.0)
    outside = int(np.count_nonzero(np.any(points != clamped, axis=-1)))
    return clamped, outside


def frequency_encode(points: np.ndarray, freq_bands: int) -> np.ndarray:
    """Axis-major sin/cos bands: per axis, per band k, (sin(2^k pi x), cos(2^k pi x))."""
    x, _ = clamp_unit_cube(np.asarray(points))
    if x.ndim == 1:
        x = x[None, :]
    n = x.shape[0]
    out = np.empty((n, 6 * freq_bands), dtype=x.dtype)
    col = 0
    for axis in range(3):
        for k in range(freq_bands):
            arg = (2.0 ** k) * np.pi * x[:, axis]
            out[:, col] = np.sin(arg)
            out[:, col + 1] = np.cos(arg)
            col += 2
    return out


def corner_hash(coords: np.ndarray, table_size: int) -> np.ndarray:
    """Spatial hash of integer grid corners: XOR of prime-multiplied axes, mod table size."""
    c = np.asarray(coords, dtype=np.int64)
    h = c[..., 0] * HASH_PRIMES[0]
    h = np.bitwise_xor(h, c[..., 1] * HASH_PRIMES[1])
    h = np.bitwise_xor(h, c[..., 2] * HASH_PRIMES[2])
    return h % table_size


def dense_corner_index(coords: np.ndarray, resolution: int) -> np.ndarray:
    """Collision-free corner index for levels that fit in the table."""
    c = np.asarray(coords, dtype=np.int64)
    side = resolution + 1
    return c[..., 0] + side * (c[..., 1] + side * c[..., 2])


_CORNER_OFFSETS = np.array(
    [[i & 1, (i >> 1) & 1, (i >> 2) & 1] for i in range(8)], dtype=np.int64)


if _HAS_NUMBA:

    @njit(cache=True, inline="always")
    def _corner_index(ix, iy, iz, res, dense, table_size):
        if dense:
            side = res + 1
            return ix + side * (iy + side * iz)
        return (ix * 1 ^ iy * 2654435761 ^ iz * 805459861) % table_size

    @njit(parallel=True, cache=True)
    def _grid_forward_kernel(points, resolutions, dense, tables, out):
        """All levels fused: points (P,3), tables (L,T,F) -> out (P, L*F)."""
        n_points = points.shape[0]
        n_levels = resolutions.shape[0]
        table_size = tables.shape[1]
        n_feat = tables.shape[2]
        for p in prange(n_points):
            for lv in range(n_levels):
                res = resolutions[lv]
                sx = points[p, 0] * res
                sy = points[p, 1] * res
                sz = points[p, 2] * res
                cx = min(max(int(np.floor(sx)), 0), res - 1)
                cy = min(max(int(np.floor(sy)), 0), res - 1)
                cz = min(max(int(np.floor(sz)), 0), res - 1)
                fx = sx - cx
                fy = sy - cy
                fz = sz - cz
                col = lv * n_feat
                for corner in range(8):
                    ox = corner & 1
                    oy = (corner >> 1) & 1
                    oz = (corner >> 2) & 1
                    w = ((fx if ox else 1.0 - fx) * (fy if oy else 1.0 - fy)
                         * (fz if oz else 1.0 - fz))
                    idx = _corner_index(cx + ox, cy + oy, cz + oz, res,
                                        dense[lv], table_size)
                    for f in range(n_feat):
                        out[p, col + f] += w * tables[lv, idx, f]

    @njit(parallel=True, cache=True)
    def _grid_backward_kernel(points, resolutions, dense, grad_out, grad_tables):
        """Scatter upstream gradients into per-level tables (parallel over levels)."""
        n_points = points.shape[0]
        n_levels = resolutions.shape[0]
        table_size = grad_tables.shape[1]
        n_feat = grad_tables.shape[2]
        for lv in prange(n_levels):
            res = resolutions[lv]
            col = lv * n_feat
            for p in range(n_points):
                sx = points[p, 0] * res
                sy = points[p, 1] * res
                sz = points[p, 2] * res
                cx = min(max(int(np.floor(sx)), 0), res - 1)
                cy = min(max(int(np.floor(sy)), 0), res - 1)
                cz = min(max(int(np.floor(sz)), 0), res - 1)
                fx = sx - cx
                fy = sy - cy
                fz = sz - cz
                for corner in range(8):
                    ox = corner & 1
                    oy = (corner >> 1) & 1
                    oz = (corner >> 2) & 1
                    w = ((fx if ox else 1.0 - fx) * (fy if oy else 1.0 - fy)
                         * (fz if oz else 1.0 - fz))
                    idx = _corner_index(cx + ox, cy + oy, cz + oz, res,
                                        dense[lv], table_size)
                    for f in range(n_feat):
                        grad_tables[lv, idx, f] += w * grad_out[p, col + f]


class HashGridEncoder:
    """Trilinearly interpolated multiresolution hash-grid lookup.

    Gradients flow to exactly the table rows touched by the interpolation;
    all other rows receive zero gradient.
    """

    def __init__(self, config: EncodingConfig, params: dict,
                 use_kernel: bool | None = None):
        self.config = config
        self.params = params
        self.use_kernel = _HAS_NUMBA if use_kernel is None else (use_kernel and _HAS_NUMBA)
        expected = (config.table_size, config.features_per_level)
        for level in range(config.hash_levels):
            key = f"grid_{level:02d}"
            if key not in params:
                raise ValueError(f"missing hash table parameter '{key}'")
            if params[key].shape != expected:
                raise ValueError(
                    f"hash table '{key}' has shape {params[key].shape}, expected {expected}")
        self._resolutions = np.array(
            [config.level_resolution(l) for l in range(config.hash_levels)],
            dtype=np.int64)
        self._dense = np.array(
            [(r + 1) ** 3 <= config.table_size for r in self._resolutions],
            dtype=np.bool_)

    def level_indices_weights(self, points01: np.ndarray, level: int):
        """Corner table indices (P, 8) and trilinear weights (P, 8) for one level."""
        res = self.config.level_resolution(level)
        scaled = points01 * res
        cell = np.floor(scaled).astype(np.int64)
        np.clip(cell, 0, res - 1, out=cell)
        frac = scaled - cell
        corners = cell[:, None, :] + _CORNER_OFFSETS[None, :, :]
        w = np.ones((points01.shape[0], 8), dtype=points01.dtype)
        for axis in range(3):
            bit = _CORNER_OFFSETS[:, axis]
            w = w * np.where(bit[None, :] == 1, frac[:, axis:axis + 1], 1.0 - frac[:, axis:axis + 1])
        if (res + 1) ** 3 <= self.config.table_size:
            idx = dense_corner_index(corners, res)
        else:
            idx = corner_hash(corners, self.config.table_size)
        return idx, w

    def encode(self, points01: np.ndarray) -> nm.Tensor:
        """(P, 3) unit-cube points -> (P, hash_levels * features_per_level)."""
        points01 = np.asarray(points01)
        if self.use_kernel:
            return self._encode_fused(points01)
        outputs = []
        for level in range(self.config.hash_levels):
            idx, w = self.level_indices_weights(points01, level)
            outputs.append(self._interpolate(level, idx, w))
        return nm.concat(outputs, axis=-1)

    def _encode_fused(self, points01: np.ndarray) -> nm.Tensor:
        cfg = self.config
        tables = [self.params[f"grid_{l:02d}"] for l in range(cfg.hash_levels)]
        stack = np.stack([t.data for t in tables])
        pts = np.ascontiguousarray(points01, dtype=stack.dtype)
        out = np.zeros((len(pts), cfg.hash_levels * cfg.features_per_level),
                       dtype=stack.dtype)
        _grid_forward_kernel(pts, self._resolutions, self._dense, stack, out)
        result = nm.Tensor(out)
        tape = nm._active_tape()
        if tape is not None:
            res, dense = self._resolutions, self._dense

            def back(g):
                grad = np.zeros_like(stack)
                _grid_backward_kernel(pts, res, dense,
                                      np.ascontiguousarray(g, dtype=stack.dtype), grad)
                return list(grad)

            tape.record("hashgrid", tuple(tables), result, back)
        return result

    def _interpolate(self, level: int, idx: np.ndarray, w: np.ndarray) -> nm.Tensor:
        table = self.params[f"grid_{level:02d}"]
        tdata = table.data
        wt = w.astype(tdata.dtype, copy=False)
        value = np.einsum("pcf,pc->pf", tdata[idx], wt, optimize=True)
        out = nm.Tensor(value)
        tape = nm._active_tape()
        if tape is not None:
            nrows, nfeat = tdata.shape
            flat_idx = idx.reshape(-1)

            def back(g, _idx=flat_idx, _w=wt, _n=nrows, _f=nfeat, _dt=tdata.dtype):
                contrib = _w[:, :, None] * g[:, None, :]
                flat = contrib.reshape(-1, _f)
                grad = np.empty((_n, _f), dtype=_dt)
                for ch in range(_f):
                    grad[:, ch] = np.bincount(_idx, weights=flat[:, ch], minlength=_n)
                return [grad]

            tape.record(f"hashgrid_l{level}", (table,), out, back)
        return out


class PositionEncoder:
    """Concatenated frequency + hash-grid position encoding with a clamp counter."""

    def __init__(self, config: EncodingConfig, params: dict):
        self.config = config
        self.grid = HashGridEncoder(config, params)
        self.clamp_count = 0

    @property
    def output_dim(self) -> int:
        return self.config.position_dim

    def encode(self, points01: np.ndarray) -> nm.Tensor:
        clamped, outside = clamp_unit_cube(np.asarray(points01))
        self.clamp_count += outside
        freq = frequency_encode(clamped, self.config.freq_bands)
        grid = self.grid.encode(clamped)
        return nm.concat([nm.Tensor(freq.astype(grid.dtype, copy=False)), grid], axis=-1)


# real spherical harmonics on unit vectors, bands l = 0..3
_SH_C0 = 0.28209479177387814
_SH_C1 = 0.4886025119029199
_SH_C2 = (1.0925484305920792, 1.0925484305920792, 0.31539156525252005,
          1.0925484305920792, 0.5462742152960396)
_SH_C3 = (0.5900435899266435, 2.890611442640554, 0.4570457994644658,
          0.3731763325901154, 0.4570457994644658, 1.445305721320277,
          0.5900435899266435)


def sh_encode(directions: np.ndarray, degree: int = 4) -> np.ndarray:
    """Real spherical-harmonic basis values, degree^2 per unit direction."""
    d = np.asarray(directions)
    single = d.ndim == 1
    if single:
        d = d[None, :]
    norms = np.linalg.norm(d, axis=-1)
    bad = np.abs(norms - 1.0) > 1e-4
    if np.any(bad):
        raise ValueError(
            f"sh_encode: direction norm {norms[bad][0]:.6f} is not unit length")
    if not 1 <= degree <= 4:
        raise ValueError("sh_encode supports degrees 1..4")

    x, y, z = d[:, 0], d[:, 1], d[:, 2]
    out = np.empty((d.shape[0], degree * degree), dtype=d.dtype)
    out[:, 0] = _SH_C0
    if degree > 1:
        out[:, 1] = _SH_C1 * y
        out[:, 2] = _SH_C1 * z
        out[:, 3] = _SH_C1 * x
    if degree > 2:
        xx, yy, zz = x * x, y * y, z * z
        out[:, 4] = _SH_C2[0] * x * y
        out[:, 5] = _SH_C2[1] * y * z
        out[:, 6] = _SH_C2[2] * (3.0 * zz - 1.0)
        out[:, 7] = _SH_C2[3] * x * z
        out[:, 8] = _SH_C2[4] * (xx - yy)
    if degree > 3:
        out[:, 9] = _SH_C3[0] * y * (3.0 * xx - yy)
        out[:, 10] = _SH_C3[1] * x * y * z
        out[:, 11] = _SH_C3[2] * y * (5.0 * zz - 1.0)
        out[:, 12] = _SH_C3[3] * z * (5.0 * zz - 3.0)
        out[:, 13] = _SH_C3[4] * x * (5.0 * zz - 1.0)
        out[:, 14] = _SH_C3[5] * z * (xx - yy)
        out[:, 15] = _SH_C3[6] * x * (xx - 3.0 * yy)
    return out[0] if single else out
