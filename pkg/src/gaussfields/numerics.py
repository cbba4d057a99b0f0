"""Deterministic RNG, Adam updates, learning-rate schedule, and a
finite-difference gradient oracle shared by every training path."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np


class Rng:
    """Counter-based random generator with named, order-independent substreams.

    Built on numpy's Philox engine. Two instances constructed from the same
    seed yield identical streams. ``substream(name)`` derives an independent
    generator keyed by (parent key, name) without advancing the parent, so
    the draw order of sibling substreams does not matter.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._key = self.seed
        self.gen = np.random.Generator(np.random.Philox(key=self._key))

    def substream(self, name: str) -> "Rng":
        digest = hashlib.blake2b(
            f"{self._key:x}/{name}".encode(), digest_size=16
        ).digest()
        child = Rng.__new__(Rng)
        child.seed = self.seed
        child._key = int.from_bytes(digest, "little")
        child.gen = np.random.Generator(np.random.Philox(key=child._key))
        return child

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)


@dataclass
class AdamState:
    """Adam moment buffers for one parameter array.

    ``m`` and ``v`` always match the parameter shape; ``t`` counts completed
    steps. Defaults follow grid-training practice: small eps keeps sparse
    table updates responsive.
    """

    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-15

    @classmethod
    def for_param(cls, param: np.ndarray, lr: float = 1e-3, **kwargs) -> "AdamState":
        return cls(
            m=np.zeros_like(param), v=np.zeros_like(param), lr=lr, **kwargs
        )


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState) -> np.ndarray:
    """One Adam update with bias correction. Returns the new parameter array.

    ``state`` is mutated in place (moments and step count); ``param`` is left
    untouched. ``state.lr`` is read at call time so schedules can adjust it
    between steps.
    """
    if grad.shape != param.shape:
        raise ValueError(
            f"adam_step: grad shape {grad.shape} does not match param shape {param.shape}"
        )
    if state.lr <= 0:
        raise ValueError(f"adam_step: lr must be positive, got {state.lr}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    state.m *= b1
    state.m += (1.0 - b1) * grad
    state.v *= b2
    state.v += (1.0 - b2) * np.square(grad)
    m_hat = state.m / (1.0 - b1 ** state.t)
    v_hat = state.v / (1.0 - b2 ** state.t)
    denom = np.sqrt(v_hat)
    denom += state.eps
    m_hat /= denom
    m_hat *= state.lr
    return param - m_hat


@dataclass(frozen=True)
class ScheduleSpec:
    """Constant warmup followed by exponential decay.

    lr(step) = base                                    for step <= warmup_steps
             = base * decay_factor^((step - warmup_steps) / decay_steps)  after

    The two pieces agree at the warmup boundary, so the schedule is
    continuous. ``decay_factor = 1`` gives a flat schedule.
    """

    base: float
    warmup_steps: int = 0
    decay_factor: float = 1.0
    decay_steps: int = 1


def lr_schedule(step: int, spec: ScheduleSpec) -> float:
    if step < 0:
        raise ValueError(f"lr_schedule: step must be >= 0, got {step}")
    if step <= spec.warmup_steps:
        return spec.base
    exponent = (step - spec.warmup_steps) / spec.decay_steps
    return spec.base * spec.decay_factor ** exponent


def finite_diff_grad(f, theta: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of a scalar function of an array.

    Evaluates f at theta +/- h along every coordinate. Used as the
    independent oracle in all gradient tests; keep it dumb.
    """
    if h <= 0:
        raise ValueError(f"finite_diff_grad: h must be positive, got {h}")
    theta = np.asarray(theta, dtype=np.float64)
    grad = np.zeros_like(theta)
    it = np.nditer(theta, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        probe = theta.copy()
        probe[idx] = theta[idx] + h
        fp = float(f(probe))
        probe[idx] = theta[idx] - h
        fm = float(f(probe))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ValueError(
                f"finite_diff_grad: non-finite value at coordinate {idx} "
                f"(f+={fp}, f-={fm})"
            )
        grad[idx] = (fp - fm) / (2.0 * h)
        it.iternext()
    return grad
