"""Binary checkpoint format.

Layout (all little-endian):
    magic  4s   = b"GNF1"
    version u32 = 1
    task    u8    0 sdf | 1 image | 2 radiance
    step    u64
    encoder: dim u32, levels u32, n_min u32, n_max u32,
             features_per_level u32, table_size u64, init_scale f32,
             then the per-level code tables as raw f32, level-major
             (row counts follow from the config)
    decoder: n_kernels u32, feature_dim u32, out_dim u32, mode u8
             (1 spherical / 0 anisotropic), then mu, rho (log bandwidths),
             w as raw f32, row-major

Payloads are stored exactly as the float32 training arrays, so save -> load
round-trips bit-identically.
"""

from __future__ import annotations

import struct

import numpy as np

from .decoder import GaussianRbfLayer
from .grid import FeatureGrid, GridConfig
from .model import FieldModel

MAGIC = b"GNF1"
VERSION = 1
_TASKS = ("sdf", "image", "radiance")


def save_checkpoint(path, model: FieldModel, step: int = 0) -> None:
    cfg = model.grid.config
    layer = model.layer
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IBQ", VERSION, _TASKS.index(model.task), step))
        fh.write(struct.pack(
            "<IIIIIQf", cfg.dim, cfg.levels, cfg.n_min, cfg.n_max,
            cfg.features_per_level, cfg.table_size, cfg.init_scale,
        ))
        fh.write(np.ascontiguousarray(model.grid.codes, dtype="<f4").tobytes())
        fh.write(struct.pack(
            "<IIIB", layer.n_kernels, layer.feature_dim, layer.out_dim,
            1 if layer.spherical else 0,
        ))
        for arr in (layer.mu, layer.rho, layer.w):
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path) -> tuple[FieldModel, int]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MAGIC:
        raise ValueError(f"load_checkpoint: bad magic in {path}")
    off = 4
    version, task_id, step = struct.unpack_from("<IBQ", data, off)
    off += struct.calcsize("<IBQ")
    if version != VERSION:
        raise ValueError(f"load_checkpoint: unsupported version {version}")
    if task_id >= len(_TASKS):
        raise ValueError(f"load_checkpoint: unknown task tag {task_id}")

    dim, levels, n_min, n_max, fpl, table_size, init_scale = struct.unpack_from(
        "<IIIIIQf", data, off
    )
    off += struct.calcsize("<IIIIIQf")
    cfg = GridConfig(dim=dim, levels=levels, n_min=n_min, n_max=n_max,
                     features_per_level=fpl, table_size=table_size,
                     init_scale=init_scale)
    grid = FeatureGrid(cfg, rng=None, dtype=np.float32)
    n_code = grid.codes.size
    codes = np.frombuffer(data, dtype="<f4", count=n_code, offset=off)
    grid.codes = codes.reshape(grid.codes.shape).copy()
    off += 4 * n_code

    n, m, q, mode = struct.unpack_from("<IIIB", data, off)
    off += struct.calcsize("<IIIB")
    if m != cfg.feature_dim:
        raise ValueError(
            f"load_checkpoint: decoder width {m} != encoder width {cfg.feature_dim}"
        )
    spherical = mode == 1
    shapes = [(n, m), (n, 1) if spherical else (n, m), (n, q)]
    arrays = []
    for shape in shapes:
        cnt = shape[0] * shape[1]
        if off + 4 * cnt > len(data):
            raise ValueError(f"load_checkpoint: truncated payload in {path}")
        arrays.append(
            np.frombuffer(data, dtype="<f4", count=cnt, offset=off)
            .reshape(shape).copy()
        )
        off += 4 * cnt
    layer = GaussianRbfLayer(*arrays, spherical=spherical)
    return FieldModel(grid, layer, _TASKS[task_id]), step
