"""Losses, point samplers, and the fit loop joining encoder and decoder."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from .model import FieldModel, GradBuffer, ModelOptimizer, model_backward, model_forward
from .numerics import Rng, ScheduleSpec


class TrainingDiverged(RuntimeError):
    """Raised when a step produces a non-finite loss."""

    def __init__(self, step: int, loss: float, max_grad: float):
        super().__init__(
            f"non-finite loss {loss} at step {step} (max |grad| {max_grad})"
        )
        self.step = step
        self.loss = loss
        self.max_grad = max_grad


@dataclass
class TrainBatch:
    points: np.ndarray   # (B, d) in [0,1]^d
    targets: np.ndarray  # (B, q)
    weights: np.ndarray  # (B,) non-negative per-sample loss weights

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points))
        self.targets = np.atleast_2d(np.asarray(self.targets))
        self.weights = np.asarray(self.weights).reshape(-1)
        b = self.points.shape[0]
        if b < 1:
            raise ValueError("TrainBatch: batch must contain at least one sample")
        if self.targets.shape[0] != b or self.weights.shape[0] != b:
            raise ValueError("TrainBatch: points/targets/weights lengths differ")
        if np.any(self.weights < 0):
            raise ValueError("TrainBatch: weights must be non-negative")
        for a in (self.points, self.targets, self.weights):
            if not np.all(np.isfinite(a)):
                raise ValueError("TrainBatch: non-finite values")

    @classmethod
    def of(cls, points, targets) -> "TrainBatch":
        points = np.atleast_2d(np.asarray(points))
        targets = np.atleast_2d(np.asarray(targets))
        return cls(points, targets, np.ones(points.shape[0]))

    @property
    def size(self) -> int:
        return self.points.shape[0]


@dataclass
class FitConfig:
    steps: int = 20000
    batch_size: int = 2 ** 14
    epsilon: float = 0.01          # near-surface emphasis in the SDF loss
    seed: int = 0
    task: str = "sdf"
    lr_tables: float = 1e-2
    lr_decoder: float = 1e-3
    decay_factor: float = 0.1      # lr multiplier reached at the final step
    warmup_steps: int = 0
    checkpoint_every: int = 0      # 0 disables the callback cadence

    def schedules(self) -> tuple[ScheduleSpec, ScheduleSpec]:
        decay_steps = max(self.steps - self.warmup_steps, 1)
        table = ScheduleSpec(self.lr_tables, self.warmup_steps,
                             self.decay_factor, decay_steps)
        decoder = ScheduleSpec(self.lr_decoder, self.warmup_steps,
                               self.decay_factor, decay_steps)
        return table, decoder


def sdf_loss(pred: np.ndarray, gt: np.ndarray, epsilon: float,
             weights: np.ndarray | None = None):
    """Scaled L1: mean of |pred - gt| / (|gt| + epsilon).

    Returns (loss, dpred). Small-|gt| samples weigh more, which is the whole
    point: accuracy concentrates near the surface. Subgradient at pred == gt
    is zero.
    """
    if epsilon <= 0:
        raise ValueError(f"sdf_loss: epsilon must be positive, got {epsilon}")
    pred = np.asarray(pred).reshape(-1)
    gt = np.asarray(gt).reshape(-1)
    b = pred.shape[0]
    scale = 1.0 / (np.abs(gt) + epsilon)
    if weights is not None:
        scale = scale * np.asarray(weights).reshape(-1)
    r = pred - gt
    loss = float(np.mean(np.abs(r) * scale))
    dpred = np.sign(r) * scale / b
    return loss, dpred


def rgb_loss(pred: np.ndarray, gt: np.ndarray, weights: np.ndarray | None = None):
    """Mean squared L2 norm of the color residual. Returns (loss, dpred)."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"rgb_loss: shape mismatch {pred.shape} vs {gt.shape}")
    b = pred.shape[0]
    r = pred - gt
    if weights is not None:
        w = np.asarray(weights).reshape(-1, 1)
        loss = float(np.sum(w * r * r) / b)
        dpred = 2.0 * w * r / b
    else:
        loss = float(np.sum(r * r) / b)
        dpred = 2.0 * r / b
    return loss, dpred


# Perturbation shells around surface samples: a coarse and a fine population,
# std in normalized [0,1]^3 units.
PERTURB_STD = (0.05, 0.005)
SDF_TARGET_CLAMP = 0.1


def sample_sdf_points(oracle, count: int, rng: Rng,
                      clamp: float | None = SDF_TARGET_CLAMP) -> TrainBatch:
    """80/20 sampling: 40% on-surface, 40% perturbed surface, 20% uniform.

    Counts are exact, not expected. Targets are the oracle's signed
    distances, clamped to +/- ``clamp`` (far-field exact distances do not
    help the surface and destabilize the scaled loss).
    """
    if count < 5:
        raise ValueError(f"sample_sdf_points: need count >= 5, got {count}")
    n_surf = (2 * count) // 5
    n_pert = n_surf
    n_unif = count - n_surf - n_pert

    r_surf = rng.substream("sdf-surface")
    r_pert = rng.substream("sdf-perturb")
    r_unif = rng.substream("sdf-uniform")

    surf = oracle.surface_samples(n_surf, r_surf)
    base = oracle.surface_samples(n_pert, r_pert)
    n_half = n_pert // 2
    noise = np.empty_like(base)
    noise[:n_half] = r_pert.normal(0.0, PERTURB_STD[0], size=(n_half, 3))
    noise[n_half:] = r_pert.normal(0.0, PERTURB_STD[1], size=(n_pert - n_half, 3))
    pert = np.clip(base + noise, 0.0, 1.0)
    unif = r_unif.uniform(0.0, 1.0, size=(n_unif, 3))

    points = np.concatenate([surf, pert, unif], axis=0)
    targets = oracle.sdf(points)
    if clamp is not None:
        targets = np.clip(targets, -clamp, clamp)
    return TrainBatch(points, targets.reshape(-1, 1), np.ones(count))


def sample_pixels(image, count: int, rng: Rng) -> TrainBatch:
    """Uniform pixel draws with replacement; points are pixel centers in
    [0,1]^2, targets the pixel colors."""
    h, w = image.height, image.width
    if h < 1 or w < 1:
        raise ValueError("sample_pixels: empty image")
    r = rng.substream("pixels")
    idx = r.integers(0, h * w, size=count)
    ys, xs = np.divmod(idx, w)
    points = np.stack([(xs + 0.5) / w, (ys + 0.5) / h], axis=1)
    targets = image.data[ys, xs, :]
    return TrainBatch(points, targets, np.ones(count))


def _task_loss(task: str, pred, batch: TrainBatch, epsilon: float):
    weights = None if np.all(batch.weights == 1.0) else batch.weights
    if task == "sdf":
        loss, dpred = sdf_loss(pred[:, 0], batch.targets[:, 0], epsilon, weights)
        return loss, dpred.reshape(-1, 1)
    if task == "image":
        return rgb_loss(pred, batch.targets, weights)
    raise ValueError(f"train_step does not handle task {task!r}")


def train_step(model: FieldModel, batch: TrainBatch, opt: ModelOptimizer,
               step_index: int, epsilon: float = 0.01) -> float:
    """One joint update of tables and decoder parameters.

    Forward -> task loss -> hand-derived backward -> Adam on every group.
    Returns the pre-update loss.
    """
    pred, ctx = model_forward(model, batch.points)
    loss, dpred = _task_loss(model.task, pred, batch, epsilon)
    if not np.isfinite(loss):
        finite = dpred[np.isfinite(dpred)]
        max_grad = float(np.max(np.abs(finite))) if finite.size else float("nan")
        raise TrainingDiverged(step_index, loss, max_grad)
    grads = model_backward(model, ctx, dpred.astype(model.dtype, copy=False))
    opt.step(model, grads, step_index)
    return loss


def fit(model: FieldModel, sampler, config: FitConfig,
        opt: ModelOptimizer | None = None, checkpoint_cb=None):
    """Run ``config.steps`` sample -> train_step iterations.

    ``sampler(rng, step) -> TrainBatch`` supplies data. ``checkpoint_cb``
    (optional) fires as checkpoint_cb(step, model) every
    ``config.checkpoint_every`` steps and once more after the last step.
    Returns (model, history) with one (step, loss, lr, wall_ms) row per step.
    """
    if opt is None:
        table_s, decoder_s = config.schedules()
        opt = ModelOptimizer(model, table_s, decoder_s)
    rng = Rng(config.seed).substream("fit-sampling")
    history: list[tuple[int, float, float, float]] = []
    for step in range(config.steps):
        t0 = time.perf_counter()
        batch = sampler(rng, step)
        loss = train_step(model, batch, opt, step, epsilon=config.epsilon)
        wall_ms = (time.perf_counter() - t0) * 1e3
        history.append((step, loss, opt.codes.lr, wall_ms))
        if (
            checkpoint_cb is not None
            and config.checkpoint_every > 0
            and ((step + 1) % config.checkpoint_every == 0 or step == config.steps - 1)
        ):
            checkpoint_cb(step, model)
    return model, history


def write_history_csv(path, history) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss", "lr", "wall_ms"])
        for step, loss, lr, wall_ms in history:
            writer.writerow([step, f"{loss:.8g}", f"{lr:.8g}", f"{wall_ms:.3f}"])
