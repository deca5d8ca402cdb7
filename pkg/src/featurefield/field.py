"""The implicit scene model: three small MLPs over the hybrid encoding.

Encoded position -> (density sigma, geometric code); the geometric code plus
the encoded viewing direction -> color; the geometric code alone -> feature
vector. Density and features never see the direction, so both are
view-independent by construction.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .encoding import EncodingConfig, PositionEncoder, init_hash_params, sh_encode
from .scene_io import SceneBounds

CHECKPOINT_MAGIC = b"FFLD"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class FieldConfig:
    feature_dim: int
    geo_dim: int = 15
    density_hidden: tuple = (64,)
    color_hidden: tuple = (64, 64)
    feature_hidden: tuple = (64, 64)

    def __post_init__(self):
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be >= 1")
        if self.geo_dim < 1:
            raise ValueError("geo_dim must be >= 1")
        object.__setattr__(self, "density_hidden", tuple(int(w) for w in self.density_hidden))
        object.__setattr__(self, "color_hidden", tuple(int(w) for w in self.color_hidden))
        object.__setattr__(self, "feature_hidden", tuple(int(w) for w in self.feature_hidden))


@dataclass(frozen=True)
class ParameterSnapshot:
    """Immutable, versioned copy of all learnable parameters."""

    version: int
    params: dict
    encoding: EncodingConfig
    config: FieldConfig
    bounds: SceneBounds

    def __post_init__(self):
        frozen = {}
        for name, value in self.params.items():
            arr = value.data if isinstance(value, nm.Tensor) else np.asarray(value)
            arr = arr.copy()
            arr.flags.writeable = False
            frozen[name] = arr
        object.__setattr__(self, "params", frozen)


def _mlp_layer_sizes(in_dim: int, hidden: tuple, out_dim: int) -> list:
    dims = [in_dim, *hidden, out_dim]
    return list(zip(dims[:-1], dims[1:]))


class FieldModel:
    """Holds all learnable parameters and runs the three query heads."""

    def __init__(self, encoding: EncodingConfig, config: FieldConfig,
                 bounds: SceneBounds, rng: np.random.Generator | None = None,
                 dtype=np.float32, params: dict | None = None):
        self.encoding = encoding
        self.config = config
        self.bounds = bounds
        self.dtype = dtype
        if params is None:
            rng = rng if rng is not None else np.random.default_rng(0)
            params = init_hash_params(encoding, rng, dtype)
            params.update(self._init_mlps(rng, dtype))
        self.params = params
        self.position_encoder = PositionEncoder(encoding, self.params)

    def _init_mlps(self, rng, dtype) -> dict:
        # Kaiming-style uniform fan-in init; hash tables start near zero so
        # early geometry is carried by the low-frequency bands.
        params = {}

        def make(prefix, in_dim, hidden, out_dim):
            for i, (n_in, n_out) in enumerate(_mlp_layer_sizes(in_dim, hidden, out_dim)):
                limit = np.sqrt(6.0 / n_in)
                params[f"{prefix}.w{i}"] = nm.Tensor(
                    rng.uniform(-limit, limit, (n_in, n_out)), dtype=dtype)
                params[f"{prefix}.b{i}"] = nm.Tensor(np.zeros(n_out), dtype=dtype)

        cfg, enc = self.config, self.encoding
        make("density", enc.position_dim, cfg.density_hidden, 1 + cfg.geo_dim)
        make("color", cfg.geo_dim + enc.direction_dim, cfg.color_hidden, 3)
        make("feature", cfg.geo_dim, cfg.feature_hidden, cfg.feature_dim)
        return params

    @property
    def feature_dim(self) -> int:
        return self.config.feature_dim

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def _mlp(self, prefix: str, x: nm.Tensor, n_layers: int) -> nm.Tensor:
        h = x
        for i in range(n_layers):
            h = nm.add(nm.matmul(h, self.params[f"{prefix}.w{i}"]),
                       self.params[f"{prefix}.b{i}"])
            if i < n_layers - 1:
                h = nm.relu(h)
        return h

    # ------------------------------------------------------------------
    # queries (batched over rows; record on the active tape if any)
    # ------------------------------------------------------------------

    def encode_positions(self, points01: np.ndarray) -> nm.Tensor:
        return self.position_encoder.encode(np.asarray(points01, dtype=self.dtype))

    def encode_directions(self, directions: np.ndarray) -> np.ndarray:
        return sh_encode(np.asarray(directions, dtype=self.dtype), self.encoding.sh_degree)

    def query_density(self, x_enc: nm.Tensor) -> tuple:
        """Encoded positions -> (sigma (P, 1) >= 0, geometric code (P, geo_dim))."""
        if x_enc.shape[-1] != self.encoding.position_dim:
            raise nm.ShapeError(
                f"query_density: encoding dim {x_enc.shape[-1]} != "
                f"expected {self.encoding.position_dim}")
        out = self._mlp("density", x_enc, len(self.config.density_hidden) + 1)
        sigma = nm.softplus(out[:, 0:1])
        geo = out[:, 1:]
        return sigma, geo

    def query_color(self, geo: nm.Tensor, d_enc) -> nm.Tensor:
        """Geometric code + encoded direction -> color in [0, 1]^3."""
        d_enc = nm.as_tensor(d_enc)
        if geo.shape[-1] != self.config.geo_dim:
            raise nm.ShapeError(f"query_color: geo dim {geo.shape[-1]} != {self.config.geo_dim}")
        if d_enc.shape[-1] != self.encoding.direction_dim:
            raise nm.ShapeError(
                f"query_color: direction encoding dim {d_enc.shape[-1]} != "
                f"expected {self.encoding.direction_dim}")
        h = nm.concat([geo, d_enc], axis=-1)
        return nm.sigmoid(self._mlp("color", h, len(self.config.color_hidden) + 1))

    def query_feature(self, geo: nm.Tensor) -> nm.Tensor:
        """Geometric code -> unnormalized feature vector (P, feature_dim)."""
        if geo.shape[-1] != self.config.geo_dim:
            raise nm.ShapeError(f"query_feature: geo dim {geo.shape[-1]} != {self.config.geo_dim}")
        return self._mlp("feature", geo, len(self.config.feature_hidden) + 1)

    # ------------------------------------------------------------------
    # world-space conveniences
    # ------------------------------------------------------------------

    def world_to_unit(self, points: np.ndarray) -> np.ndarray:
        offset, scale = self.bounds.normalizer()
        return (np.asarray(points) - offset) * scale

    def density_at(self, points_world: np.ndarray) -> np.ndarray:
        sigma, _ = self.query_density(self.encode_positions(self.world_to_unit(points_world)))
        return sigma.data[:, 0]

    def features_at(self, points_world: np.ndarray) -> np.ndarray:
        _, geo = self.query_density(self.encode_positions(self.world_to_unit(points_world)))
        return self.query_feature(geo).data

    # ------------------------------------------------------------------
    # snapshots
    # ------------------------------------------------------------------

    def snapshot(self, version: int) -> ParameterSnapshot:
        return ParameterSnapshot(version=version, params=self.params,
                                 encoding=self.encoding, config=self.config,
                                 bounds=self.bounds)

    @classmethod
    def from_snapshot(cls, snap: ParameterSnapshot) -> "FieldModel":
        params = {name: nm.Tensor(arr) for name, arr in snap.params.items()}
        dtype = next(iter(params.values())).dtype if params else np.float32
        return cls(snap.encoding, snap.config, snap.bounds, dtype=dtype, params=params)


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

def _write_block(fh, name: str, array: np.ndarray) -> None:
    data = np.ascontiguousarray(array, dtype="<f4")
    encoded = name.encode("utf-8")
    fh.write(struct.pack("<I", len(encoded)))
    fh.write(encoded)
    fh.write(struct.pack("<I", data.ndim))
    fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
    fh.write(data.tobytes())


def _read_block(fh):
    head = fh.read(4)
    if not head:
        return None
    (name_len,) = struct.unpack("<I", head)
    name = fh.read(name_len).decode("utf-8")
    (rank,) = struct.unpack("<I", fh.read(4))
    shape = struct.unpack(f"<{rank}I", fh.read(4 * rank))
    count = int(np.prod(shape)) if rank else 1
    payload = fh.read(count * 4)
    if len(payload) != count * 4:
        raise ValueError(f"checkpoint block '{name}' truncated")
    return name, np.frombuffer(payload, dtype="<f4").reshape(shape).copy()


def _encode_field_config(cfg: FieldConfig) -> np.ndarray:
    vals = [cfg.feature_dim, cfg.geo_dim,
            len(cfg.density_hidden), *cfg.density_hidden,
            len(cfg.color_hidden), *cfg.color_hidden,
            len(cfg.feature_hidden), *cfg.feature_hidden]
    return np.array(vals, dtype=np.float32)


def _decode_field_config(vals: np.ndarray) -> FieldConfig:
    vals = [int(round(float(v))) for v in vals]
    feature_dim, geo_dim = vals[0], vals[1]
    pos = 2
    hiddens = []
    for _ in range(3):
        n = vals[pos]
        hiddens.append(tuple(vals[pos + 1:pos + 1 + n]))
        pos += 1 + n
    return FieldConfig(feature_dim=feature_dim, geo_dim=geo_dim,
                       density_hidden=hiddens[0], color_hidden=hiddens[1],
                       feature_hidden=hiddens[2])


def save_checkpoint(path, snap: ParameterSnapshot) -> None:
    enc = snap.encoding
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        _write_block(fh, "__meta__", np.array([snap.version], dtype=np.float32))
        _write_block(fh, "__encoding__", np.array(
            [enc.freq_bands, enc.hash_levels, enc.base_resolution,
             enc.per_level_scale, enc.table_size_log2, enc.features_per_level,
             enc.sh_degree], dtype=np.float32))
        _write_block(fh, "__field__", _encode_field_config(snap.config))
        _write_block(fh, "__bounds__", np.concatenate(
            [snap.bounds.minimum, snap.bounds.maximum]).astype(np.float32))
        for name, arr in snap.params.items():
            _write_block(fh, name, arr)


def load_checkpoint(path) -> ParameterSnapshot:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}, not a checkpoint")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        blocks = {}
        order = []
        while True:
            block = _read_block(fh)
            if block is None:
                break
            blocks[block[0]] = block[1]
            order.append(block[0])

    for required in ("__meta__", "__encoding__", "__field__", "__bounds__"):
        if required not in blocks:
            raise ValueError(f"{path}: missing checkpoint block '{required}'")
    e = blocks["__encoding__"]
    encoding = EncodingConfig(
        freq_bands=int(round(float(e[0]))), hash_levels=int(round(float(e[1]))),
        base_resolution=int(round(float(e[2]))), per_level_scale=float(e[3]),
        table_size_log2=int(round(float(e[4]))),
        features_per_level=int(round(float(e[5]))), sh_degree=int(round(float(e[6]))))
    config = _decode_field_config(blocks["__field__"])
    b = blocks["__bounds__"].astype(np.float64)
    bounds = SceneBounds(b[:3], b[3:])
    params = {name: blocks[name] for name in order if not name.startswith("__")}
    return ParameterSnapshot(version=int(round(float(blocks["__meta__"][0]))),
                             params=params, encoding=encoding, config=config,
                             bounds=bounds)
