"""Encoder + decoder composite with a task tag, plus the gradient buffer and
optimizer bundle used by every fit loop."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import decoder as dec
from . import grid as enc
from .numerics import AdamState, Rng, ScheduleSpec, adam_step, lr_schedule

TASKS = ("sdf", "image", "radiance")


class FieldModel:
    """A trainable field: points in [0,1]^d -> q values.

    ``encode_count`` / ``decode_count`` tally how many sample points have
    passed through each stage; render paths are expected to touch each point
    exactly once per stage.
    """

    def __init__(self, grid: enc.FeatureGrid, layer: dec.GaussianRbfLayer, task: str):
        if task not in TASKS:
            raise ValueError(f"unknown task {task!r}, expected one of {TASKS}")
        if layer.feature_dim != grid.feature_dim:
            raise ValueError(
                f"decoder width {layer.feature_dim} != encoder width {grid.feature_dim}"
            )
        self.grid = grid
        self.layer = layer
        self.task = task
        self.encode_count = 0
        self.decode_count = 0

    @property
    def dtype(self):
        return self.grid.dtype

    @property
    def out_dim(self) -> int:
        return self.layer.out_dim

    def encode(self, points: np.ndarray) -> np.ndarray:
        feats = enc.encode_batch(self.grid, points)
        self.encode_count += feats.shape[0]
        return feats

    def decode(self, feats: np.ndarray, dims: int | None = None) -> np.ndarray:
        out = dec.decode_batch(self.layer, feats, dims=dims)
        self.decode_count += feats.shape[0]
        return out

    def query(self, points: np.ndarray, levels: int | None = None) -> np.ndarray:
        """encode -> (optional level slice) -> decode."""
        feats = self.encode(points)
        if levels is not None:
            feats = enc.slice_levels(
                feats, levels, self.grid.config.features_per_level
            )
        return self.decode(feats)

    def astype(self, dtype) -> "FieldModel":
        return FieldModel(self.grid.astype(dtype), self.layer.astype(dtype), self.task)

    def n_params(self) -> int:
        return self.grid.codes.size + self.layer.n_params()


@dataclass
class GradBuffer:
    """Dense gradient accumulators mirroring every trainable parameter."""

    codes: np.ndarray
    mu: np.ndarray
    rho: np.ndarray
    w: np.ndarray

    @classmethod
    def zeros_like(cls, model: FieldModel) -> "GradBuffer":
        return cls(
            codes=np.zeros_like(model.grid.codes),
            mu=np.zeros_like(model.layer.mu),
            rho=np.zeros_like(model.layer.rho),
            w=np.zeros_like(model.layer.w),
        )

    def add_(self, other: "GradBuffer") -> "GradBuffer":
        self.codes += other.codes
        self.mu += other.mu
        self.rho += other.rho
        self.w += other.w
        return self

    def max_abs(self) -> float:
        return max(
            float(np.max(np.abs(a))) if a.size else 0.0
            for a in (self.codes, self.mu, self.rho, self.w)
        )


# Feature tables tolerate larger steps than the decoder parameters because
# each batch touches only a sparse subset of rows.
DEFAULT_LR_TABLES = 1e-2
DEFAULT_LR_DECODER = 1e-3


class ModelOptimizer:
    """Adam state for all four parameter groups plus their lr schedules."""

    def __init__(self, model: FieldModel,
                 table_schedule: ScheduleSpec | None = None,
                 decoder_schedule: ScheduleSpec | None = None):
        self.table_schedule = table_schedule or ScheduleSpec(base=DEFAULT_LR_TABLES)
        self.decoder_schedule = decoder_schedule or ScheduleSpec(base=DEFAULT_LR_DECODER)
        self.codes = AdamState.for_param(model.grid.codes, lr=self.table_schedule.base)
        self.mu = AdamState.for_param(model.layer.mu, lr=self.decoder_schedule.base)
        self.rho = AdamState.for_param(model.layer.rho, lr=self.decoder_schedule.base)
        self.w = AdamState.for_param(model.layer.w, lr=self.decoder_schedule.base)

    def step(self, model: FieldModel, grads: GradBuffer, step_index: int) -> float:
        """Apply one Adam step to every group; returns the table lr used."""
        lr_t = lr_schedule(step_index, self.table_schedule)
        lr_d = lr_schedule(step_index, self.decoder_schedule)
        self.codes.lr = lr_t
        self.mu.lr = lr_d
        self.rho.lr = lr_d
        self.w.lr = lr_d
        model.grid.codes = adam_step(model.grid.codes, grads.codes, self.codes)
        model.layer.mu = adam_step(model.layer.mu, grads.mu, self.mu)
        model.layer.rho = adam_step(model.layer.rho, grads.rho, self.rho)
        model.layer.w = adam_step(model.layer.w, grads.w, self.w)
        return lr_t


def model_forward(model: FieldModel, points: np.ndarray):
    """Forward pass that keeps the interpolation cache for the backward pass.

    Returns (values, ctx); feed ctx to :func:`model_backward`.
    """
    rows, weights = enc._interp_data(model.grid, points)
    feats = enc._encode_from_cache(model.grid, rows, weights)
    model.encode_count += feats.shape[0]
    values = dec.decode_batch(model.layer, feats)
    model.decode_count += feats.shape[0]
    return values, (rows, weights, feats)


def model_backward(model: FieldModel, ctx, dvalues: np.ndarray) -> GradBuffer:
    """Backpropagate d(loss)/d(values) to every trainable parameter."""
    rows, weights, feats = ctx
    layer_grads, dfeats = dec.decoder_backward(model.layer, feats, dvalues)
    codes_grad = enc._encoder_backward_from_cache(model.grid, rows, weights, dfeats)
    return GradBuffer(codes=codes_grad, mu=layer_grads.mu, rho=layer_grads.rho,
                      w=layer_grads.w)


def build_model(task: str, grid_config: enc.GridConfig, n_kernels: int,
                seed: int, spherical: bool | None = None,
                seed_points: np.ndarray | None = None,
                dtype=np.float32) -> FieldModel:
    """Construct an initialized model for a task.

    SDF and image tasks default to spherical kernels; radiance defaults to
    anisotropic. When ``seed_points`` is given the kernel centers start at
    the encodings of those points, otherwise at small random values.
    """
    out_dims = {"sdf": 1, "image": 3, "radiance": 49}
    if spherical is None:
        spherical = task != "radiance"
    rng = Rng(seed)
    grid = enc.FeatureGrid(grid_config, rng=rng, dtype=dtype)
    if seed_points is not None:
        layer = dec.init_centers_from_features(
            seed_points, grid, out_dims[task], rng, spherical=spherical
        )
    else:
        layer = dec.init_random(
            n_kernels, grid_config.feature_dim, out_dims[task], rng,
            spherical=spherical, dtype=dtype,
        )
    return FieldModel(grid, layer, task)


def default_grid_config(task: str, dim: int | None = None,
                        image_side: int = 256) -> enc.GridConfig:
    """Per-task encoder defaults: 16 levels 4..512 for SDF, 16 levels up to
    the image side for images, 32 levels for radiance."""
    if task == "sdf":
        return enc.GridConfig(dim=3, levels=16, n_min=4, n_max=512)
    if task == "image":
        return enc.GridConfig(dim=2, levels=16, n_min=4, n_max=max(image_side, 4))
    if task == "radiance":
        return enc.GridConfig(dim=3, levels=32, n_min=4, n_max=512)
    raise ValueError(f"unknown task {task!r}")
