"""Multiresolution hash-grid encoder.

Maps points in [0,1]^d to a feature vector by d-linear interpolation of
trainable codes at every resolution level and concatenating the per-level
results. Coarse levels index their lattice directly (collision free); levels
whose lattice exceeds the table size fall back to XOR-prime spatial hashing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import Rng

# Fixed spatial-hash primes; the first coordinate is deliberately unscaled so
# 1D-varying queries stay collision free along x.
HASH_PRIMES = (1, 2654435761, 805459861)


@dataclass(frozen=True)
class GridConfig:
    dim: int
    levels: int
    n_min: int
    n_max: int
    features_per_level: int = 1
    table_size: int = 2 ** 19
    init_scale: float = 1e-4

    def __post_init__(self):
        if self.dim not in (1, 2, 3):
            raise ValueError(f"GridConfig: dim must be 1, 2 or 3, got {self.dim}")
        if self.levels < 1:
            raise ValueError(f"GridConfig: levels must be >= 1, got {self.levels}")
        if not (1 <= self.n_min <= self.n_max):
            raise ValueError(
                f"GridConfig: need 1 <= n_min <= n_max, got {self.n_min}, {self.n_max}"
            )
        if self.features_per_level < 1:
            raise ValueError("GridConfig: features_per_level must be >= 1")
        if self.table_size < 1 or self.table_size & (self.table_size - 1):
            raise ValueError(
                f"GridConfig: table_size must be a power of two, got {self.table_size}"
            )
        if self.init_scale <= 0:
            raise ValueError("GridConfig: init_scale must be positive")

    @property
    def feature_dim(self) -> int:
        return self.levels * self.features_per_level


def level_resolution(config: GridConfig, level: int) -> int:
    """Vertices per axis at ``level``: floor(n_min * b^level) with geometric
    growth b chosen so the last level lands exactly on n_max."""
    if not 0 <= level < config.levels:
        raise ValueError(
            f"level_resolution: level {level} out of range [0, {config.levels})"
        )
    if config.levels == 1:
        return config.n_min
    ratio = config.n_max / config.n_min
    # The 1e-9 nudge keeps floor() from dropping the exact endpoints to
    # which the growth factor rounds in float arithmetic.
    return int(math.floor(config.n_min * ratio ** (level / (config.levels - 1)) + 1e-9))


def hash_index(coords, table_size: int) -> np.ndarray:
    """XOR of coordinate-times-prime products, masked to table_size - 1.

    Only the low bits survive the mask, so 64-bit wraparound in the products
    cannot change the result; values are stable across platforms.
    """
    if table_size < 1 or table_size & (table_size - 1):
        raise ValueError(f"hash_index: table_size must be a power of two, got {table_size}")
    coords = np.asarray(coords, dtype=np.uint64)
    if coords.shape[-1] > len(HASH_PRIMES):
        raise ValueError(f"hash_index: at most {len(HASH_PRIMES)} coordinates supported")
    acc = coords[..., 0] * np.uint64(HASH_PRIMES[0])
    for axis in range(1, coords.shape[-1]):
        acc = acc ^ (coords[..., axis] * np.uint64(HASH_PRIMES[axis]))
    return (acc & np.uint64(table_size - 1)).astype(np.int64)


class FeatureGrid:
    """Trainable codes for every level, stored in one flat (rows, fpl) array.

    Dense levels (lattice fits in the table) get exactly resolution^dim rows;
    hashed levels get table_size rows. ``tables`` exposes the per-level views.
    """

    def __init__(self, config: GridConfig, rng: Rng | None = None, dtype=np.float32):
        self.config = config
        self.resolutions = np.array(
            [level_resolution(config, l) for l in range(config.levels)], dtype=np.int64
        )
        lattice = self.resolutions.astype(object) ** config.dim  # exact ints
        self.dense = np.array([n <= config.table_size for n in lattice], dtype=bool)
        self.level_rows = np.array(
            [int(n) if d else config.table_size for n, d in zip(lattice, self.dense)],
            dtype=np.int64,
        )
        self.level_offsets = np.concatenate(
            ([0], np.cumsum(self.level_rows)[:-1])
        ).astype(np.int64)
        total = int(self.level_rows.sum())
        if rng is None:
            self.codes = np.zeros((total, config.features_per_level), dtype=dtype)
        else:
            s = config.init_scale
            self.codes = rng.substream("grid-init").uniform(
                -s, s, size=(total, config.features_per_level)
            ).astype(dtype)

    @property
    def dtype(self):
        return self.codes.dtype

    @property
    def feature_dim(self) -> int:
        return self.config.feature_dim

    @property
    def tables(self) -> list[np.ndarray]:
        return [self.level_view(self.codes, l) for l in range(self.config.levels)]

    def level_view(self, codes_shaped: np.ndarray, level: int) -> np.ndarray:
        """View of any codes-shaped array restricted to one level's rows."""
        off = int(self.level_offsets[level])
        return codes_shaped[off : off + int(self.level_rows[level])]

    def astype(self, dtype) -> "FeatureGrid":
        out = FeatureGrid(self.config, rng=None, dtype=dtype)
        out.codes = self.codes.astype(dtype)
        return out


def _corner_offsets(dim: int) -> np.ndarray:
    offs = np.indices((2,) * dim).reshape(dim, -1).T  # (2^dim, dim), binary order
    return np.ascontiguousarray(offs[:, ::-1]).astype(np.int64)


_INTERP_CHUNK = 4096


def _interp_data(grid: FeatureGrid, points: np.ndarray):
    """Global row indices and interpolation weights for a batch of points.

    Returns (rows, weights) of shape (B, L, 2^d). Points are clamped to
    [0,1]^d; weights per level are the d-linear corner weights (sum to 1).
    Computed in chunks to bound the transient corner arrays.
    """
    cfg = grid.config
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != cfg.dim:
        raise ValueError(
            f"encode: expected points of shape (B, {cfg.dim}), got {points.shape}"
        )
    if not np.all(np.isfinite(points)):
        raise ValueError("encode: points contain non-finite values")

    B = points.shape[0]
    C = 2 ** cfg.dim
    row_dtype = np.int32 if grid.codes.size < 2 ** 31 else np.int64
    rows = np.empty((B, cfg.levels, C), dtype=row_dtype)
    weights = np.empty((B, cfg.levels, C), dtype=grid.dtype)
    for start in range(0, B, _INTERP_CHUNK):
        stop = min(start + _INTERP_CHUNK, B)
        _interp_chunk(grid, points[start:stop], rows[start:stop], weights[start:stop])
    return rows, weights


def _interp_chunk(grid, points, rows_out, weights_out):
    cfg = grid.config
    p = np.clip(points, 0.0, 1.0)
    res = grid.resolutions  # (L,)
    scale = (res - 1).astype(np.float64)  # cells per axis
    x = p[:, None, :] * scale[None, :, None]  # (B, L, d)
    i0 = np.floor(x).astype(np.int64)
    np.clip(i0, 0, np.maximum(res - 2, 0)[None, :, None], out=i0)
    frac = x - i0

    offs = _corner_offsets(cfg.dim)  # (C, d)
    corners = i0[:, :, None, :] + offs[None, None, :, :]  # (B, L, C, d)
    np.clip(corners, 0, (res - 1)[None, :, None, None], out=corners)

    weights = np.ones(corners.shape[:3], dtype=np.float64)  # (B, L, C)
    for axis in range(cfg.dim):
        fa = frac[:, :, axis][:, :, None]
        weights *= np.where(offs[None, None, :, axis] == 1, fa, 1.0 - fa)

    # Dense levels ravel the lattice x-fastest; hashed levels use XOR primes.
    dense_idx = corners[..., 0].copy()
    stride = np.ones_like(res)
    for axis in range(1, cfg.dim):
        stride = stride * res
        dense_idx += corners[..., axis] * stride[None, :, None]
    hash_idx = hash_index(corners, cfg.table_size)
    rows = np.where(grid.dense[None, :, None], dense_idx, hash_idx)
    rows += grid.level_offsets[None, :, None]
    rows_out[...] = rows
    weights_out[...] = weights


def encode_batch(grid: FeatureGrid, points: np.ndarray) -> np.ndarray:
    """Encode a (B, d) batch to (B, levels * features_per_level) features."""
    rows, weights = _interp_data(grid, points)
    return _encode_from_cache(grid, rows, weights)


def _encode_from_cache(grid: FeatureGrid, rows, weights) -> np.ndarray:
    gathered = grid.codes[rows]  # (B, L, C, fpl)
    w = weights.astype(grid.dtype, copy=False)
    feats = np.einsum("blc,blcf->blf", w, gathered)
    B = rows.shape[0]
    return feats.reshape(B, grid.feature_dim)


def encode_point(grid: FeatureGrid, p) -> np.ndarray:
    """Single-point encode; identical to the corresponding encode_batch row."""
    p = np.asarray(p, dtype=np.float64)
    return encode_batch(grid, p[None, :])[0]


def encoder_backward(grid: FeatureGrid, points, upstream: np.ndarray) -> np.ndarray:
    """Accumulate d(loss)/d(codes) for a batch.

    ``upstream`` is (B, feature_dim). Each touched corner row receives
    (interpolation weight x upstream); untouched rows stay exactly zero.
    Returns an array shaped like ``grid.codes``.
    """
    rows, weights = _interp_data(grid, points)
    return _encoder_backward_from_cache(grid, rows, weights, upstream)


def _encoder_backward_from_cache(grid, rows, weights, upstream) -> np.ndarray:
    cfg = grid.config
    upstream = np.asarray(upstream)
    B = rows.shape[0]
    if upstream.shape != (B, grid.feature_dim):
        raise ValueError(
            f"encoder_backward: upstream shape {upstream.shape} != {(B, grid.feature_dim)}"
        )
    if not np.all(np.isfinite(upstream)):
        raise ValueError("encoder_backward: upstream contains non-finite values")
    fpl = cfg.features_per_level
    up = upstream.reshape(B, cfg.levels, fpl)
    contrib = weights[..., None] * up[:, :, None, :]  # (B, L, C, fpl)
    keys = rows[..., None] * fpl + np.arange(fpl, dtype=np.int64)
    total = grid.codes.size
    flat = np.bincount(keys.ravel(), weights=contrib.ravel(), minlength=total)
    return flat.reshape(grid.codes.shape).astype(grid.dtype)


def slice_levels(features: np.ndarray, k: int, features_per_level: int = 1) -> np.ndarray:
    """First k levels of a concatenated feature vector (or batch thereof)."""
    features = np.asarray(features)
    m = features.shape[-1]
    levels = m // features_per_level
    if not 1 <= k <= levels:
        raise ValueError(f"slice_levels: k={k} out of range [1, {levels}]")
    return features[..., : k * features_per_level]
