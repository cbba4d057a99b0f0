"""Finite-difference verification of every hand-derived gradient path.

Three suites on tiny float64 configurations: decoder-only, encoder-only, and
end-to-end (loss through encoder and decoder). Each runs a number of random
instances and reports the worst relative error against central differences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import decoder as dec
from . import grid as enc
from .model import build_model, model_backward, model_forward
from .numerics import Rng
from .training import sdf_loss

TOLERANCE = 1e-4


@dataclass
class SuiteResult:
    name: str
    instances: int
    worst_rel_err: float
    worst_param: str

    @property
    def passed(self) -> bool:
        return self.worst_rel_err <= TOLERANCE


def _rel(a: float, b: float, floor: float = 1e-7) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def _central(fn, arr, idx, h):
    orig = arr[idx]
    arr[idx] = orig + h
    up = fn()
    arr[idx] = orig - h
    dn = fn()
    arr[idx] = orig
    return (up - dn) / (2.0 * h)


def check_decoder(instances: int = 20, seed: int = 0) -> SuiteResult:
    worst, worst_param = 0.0, ""
    for trial in range(instances):
        rng = Rng(seed * 1000 + trial)
        n, q, b = 4, 2, 6
        m = 2 + trial % 3  # feature widths 2..4
        spherical = trial % 2 == 0
        mu = rng.normal(0, 1.0, size=(n, m))
        rho = rng.normal(0, 0.3, size=(n, 1) if spherical else (n, m))
        w = rng.normal(0, 1.0, size=(n, q))
        layer = dec.GaussianRbfLayer(mu, rho, w, spherical)
        F = rng.normal(size=(b, m))
        up = rng.normal(size=(b, q))
        grads, dF = dec.decoder_backward(layer, F, up)

        def loss():
            return float(np.sum(dec.decode_batch(layer, F) * up))

        for name, arr, garr in (
            ("mu", layer.mu, grads.mu),
            ("rho", layer.rho, grads.rho),
            ("w", layer.w, grads.w),
        ):
            for idx in np.ndindex(arr.shape):
                fd = _central(loss, arr, idx, 1e-5)
                r = _rel(garr[idx], fd)
                if r > worst:
                    worst, worst_param = r, f"decoder[{trial}].{name}{list(idx)}"
        for idx in np.ndindex(F.shape):
            fd = _central(loss, F, idx, 1e-5)
            r = _rel(dF[idx], fd)
            if r > worst:
                worst, worst_param = r, f"decoder[{trial}].input{list(idx)}"
    return SuiteResult("decoder", instances, worst, worst_param)


def check_encoder(instances: int = 20, seed: int = 0) -> SuiteResult:
    cfg = enc.GridConfig(dim=3, levels=2, n_min=3, n_max=6, table_size=2 ** 7)
    worst, worst_param = 0.0, ""
    for trial in range(instances):
        rng = Rng(seed * 2000 + trial)
        grid = enc.FeatureGrid(cfg, rng=rng, dtype=np.float64)
        grid.codes = rng.normal(0, 0.5, size=grid.codes.shape)
        pts = rng.uniform(size=(8, 3))
        up = rng.normal(size=(8, grid.feature_dim))
        grad = enc.encoder_backward(grid, pts, up)

        def loss():
            return float(np.sum(enc.encode_batch(grid, pts) * up))

        touched = np.argwhere(grad != 0.0)
        step = max(1, len(touched) // 24)
        for row, col in touched[::step]:
            fd = _central(loss, grid.codes, (row, col), 1e-6)
            r = _rel(grad[row, col], fd)
            if r > worst:
                worst, worst_param = r, f"encoder[{trial}].codes[{row},{col}]"
    return SuiteResult("encoder", instances, worst, worst_param)


def check_end_to_end(instances: int = 20, seed: int = 0) -> SuiteResult:
    cfg = enc.GridConfig(dim=3, levels=2, n_min=3, n_max=6, table_size=2 ** 7)
    worst, worst_param = 0.0, ""
    for trial in range(instances):
        model = build_model("sdf", cfg, n_kernels=4, seed=seed * 3000 + trial,
                            dtype=np.float64)
        rng = Rng(seed * 4000 + trial)
        model.grid.codes = rng.normal(0, 0.5, size=model.grid.codes.shape)
        model.layer.mu = rng.normal(0, 0.3, size=model.layer.mu.shape)
        model.layer.w = rng.normal(0, 1.0, size=model.layer.w.shape)
        pts = rng.uniform(size=(8, 3))
        gt = rng.uniform(-0.1, 0.1, size=8)

        pred, ctx = model_forward(model, pts)
        _, dpred = sdf_loss(pred[:, 0], gt, 0.01)
        grads = model_backward(model, ctx, dpred.reshape(-1, 1))

        def loss():
            return sdf_loss(model.query(pts)[:, 0], gt, 0.01)[0]

        pick = np.random.default_rng(trial)
        touched = np.argwhere(grads.codes != 0.0)
        for row, col in touched[pick.permutation(len(touched))[:10]]:
            fd = _central(loss, model.grid.codes, (row, col), 1e-6)
            r = _rel(grads.codes[row, col], fd)
            if r > worst:
                worst, worst_param = r, f"end2end[{trial}].codes[{row},{col}]"
        for name in ("mu", "rho", "w"):
            arr = getattr(model.layer, name)
            garr = getattr(grads, name)
            flat = pick.permutation(arr.size)[:4]
            for fi in flat:
                idx = np.unravel_index(fi, arr.shape)
                fd = _central(loss, arr, idx, 1e-6)
                r = _rel(garr[idx], fd)
                if r > worst:
                    worst, worst_param = r, f"end2end[{trial}].{name}{list(idx)}"
    return SuiteResult("end-to-end", instances, worst, worst_param)


def run_all(instances: int = 20, seed: int = 0) -> list[SuiteResult]:
    return [
        check_decoder(instances, seed),
        check_encoder(instances, seed),
        check_end_to_end(instances, seed),
    ]
