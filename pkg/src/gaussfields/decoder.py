"""Single-layer Gaussian kernel decoder.

Decodes an m-dimensional feature vector into q outputs as a weighted sum of
N Gaussian responses measured in feature space:

    out_k = sum_i W[i,k] * exp(-sum_j beta[i,j] * (f[j] - mu[i,j])^2)

Bandwidths are stored as log values (rho = ln beta) so positivity survives
any optimizer step. Spherical mode shares one bandwidth per kernel;
anisotropic mode learns one per feature dimension.

The batched forward/backward paths expand the squared distance into matrix
products (the O(N*m)-per-point formulation) and run the expansion in float64
internally so cancellation stays far below test tolerances regardless of the
parameter dtype.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import FeatureGrid, encode_batch
from .numerics import Rng

# exp() is clamped below e^-60: responses under ~1e-26 are numerically zero
# and denormals are not worth their cost.
EXP_CLAMP = 60.0


class GaussianRbfLayer:
    def __init__(self, mu: np.ndarray, rho: np.ndarray, w: np.ndarray, spherical: bool):
        mu = np.asarray(mu)
        rho = np.asarray(rho)
        w = np.asarray(w)
        n, m = mu.shape
        if spherical:
            if rho.shape != (n, 1):
                raise ValueError(f"spherical layer needs rho of shape ({n}, 1), got {rho.shape}")
        elif rho.shape != (n, m):
            raise ValueError(f"anisotropic layer needs rho of shape ({n}, {m}), got {rho.shape}")
        if w.ndim != 2 or w.shape[0] != n:
            raise ValueError(f"w must be (n_kernels, q), got {w.shape}")
        self.mu = mu
        self.rho = rho
        self.w = w
        self.spherical = spherical

    @property
    def n_kernels(self) -> int:
        return self.mu.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.mu.shape[1]

    @property
    def out_dim(self) -> int:
        return self.w.shape[1]

    @property
    def beta(self) -> np.ndarray:
        return np.exp(self.rho)

    @property
    def dtype(self):
        return self.mu.dtype

    def astype(self, dtype) -> "GaussianRbfLayer":
        return GaussianRbfLayer(
            self.mu.astype(dtype), self.rho.astype(dtype), self.w.astype(dtype),
            self.spherical,
        )

    def n_params(self) -> int:
        return self.mu.size + self.rho.size + self.w.size


@dataclass
class DecoderOutput:
    values: np.ndarray       # (B, q)
    activations: np.ndarray  # (B, N), kernel responses in (0, 1]


@dataclass
class DecoderGrads:
    mu: np.ndarray
    rho: np.ndarray
    w: np.ndarray


def init_random(n_kernels: int, feature_dim: int, out_dim: int, rng: Rng,
                spherical: bool = True, dtype=np.float32) -> GaussianRbfLayer:
    """Random init: centers uniform in the feature-init range, all bandwidths
    exactly 1, blend weights uniform in +/- 1/sqrt(N)."""
    r = rng.substream("decoder-init")
    mu = r.uniform(-1e-4, 1e-4, size=(n_kernels, feature_dim)).astype(dtype)
    rho_shape = (n_kernels, 1) if spherical else (n_kernels, feature_dim)
    rho = np.zeros(rho_shape, dtype=dtype)  # beta = exp(0) = 1
    bound = 1.0 / np.sqrt(n_kernels)
    w = r.uniform(-bound, bound, size=(n_kernels, out_dim)).astype(dtype)
    return GaussianRbfLayer(mu, rho, w, spherical)


def init_centers_from_features(seed_points: np.ndarray, grid: FeatureGrid,
                               out_dim: int, rng: Rng,
                               spherical: bool = True) -> GaussianRbfLayer:
    """Place kernel centers at the encodings of the given seed points."""
    mu = encode_batch(grid, np.asarray(seed_points, dtype=np.float64))
    n = mu.shape[0]
    rho_shape = (n, 1) if spherical else (n, mu.shape[1])
    rho = np.zeros(rho_shape, dtype=grid.dtype)
    bound = 1.0 / np.sqrt(n)
    w = rng.substream("decoder-init").uniform(
        -bound, bound, size=(n, out_dim)
    ).astype(grid.dtype)
    return GaussianRbfLayer(mu, rho, w, spherical)


def _check_feature(layer: GaussianRbfLayer, f: np.ndarray, dims: int):
    if not np.all(np.isfinite(f)):
        raise ValueError("decode: feature vector contains non-finite values")
    if dims < 1 or dims > layer.feature_dim:
        raise ValueError(
            f"decode: feature width {dims} incompatible with layer width {layer.feature_dim}"
        )


def kernel_eval(layer: GaussianRbfLayer, f: np.ndarray, dims: int | None = None) -> np.ndarray:
    """Responses of all N kernels at a single feature vector.

    Uses the direct (f - mu)^2 form, so f == mu gives a response of exactly 1.
    """
    f = np.asarray(f)
    dims = f.shape[-1] if dims is None else dims
    _check_feature(layer, f, dims)
    t = f[None, :dims].astype(np.float64) - layer.mu[:, :dims].astype(np.float64)
    if layer.spherical:
        d2 = layer.beta[:, 0].astype(np.float64) * np.sum(t * t, axis=1)
    else:
        d2 = np.sum(layer.beta[:, :dims].astype(np.float64) * t * t, axis=1)
    return np.exp(-np.minimum(d2, EXP_CLAMP)).astype(layer.dtype)


def decode(layer: GaussianRbfLayer, f: np.ndarray) -> np.ndarray:
    """Decode one feature vector to q outputs (same path as decode_batch)."""
    return decode_batch(layer, np.asarray(f)[None, :])[0]


def _distances_expanded(layer, F64, dims):
    """Squared anisotropic distances (B, N) via the matrix-product expansion."""
    mu = layer.mu[:, :dims].astype(np.float64)
    if layer.spherical:
        beta = layer.beta[:, 0].astype(np.float64)  # (N,)
        sq = np.sum(F64 * F64, axis=1)[:, None] - 2.0 * (F64 @ mu.T) \
            + np.sum(mu * mu, axis=1)[None, :]
        d2 = beta[None, :] * sq
    else:
        beta = layer.beta[:, :dims].astype(np.float64)
        d2 = (F64 * F64) @ beta.T - 2.0 * (F64 @ (beta * mu).T) \
            + np.sum(beta * mu * mu, axis=1)[None, :]
    return np.clip(d2, 0.0, None)


def _forward(layer, F, dims):
    F64 = np.asarray(F)[:, :dims].astype(np.float64)
    d2 = _distances_expanded(layer, F64, dims)
    g = np.exp(-np.minimum(d2, EXP_CLAMP))
    return F64, d2, g


def decode_batch(layer: GaussianRbfLayer, F: np.ndarray, dims: int | None = None,
                 counter=None) -> np.ndarray:
    """Decode a (B, dims) feature batch to (B, q).

    ``dims`` defaults to the batch width; pass fewer dims to decode sliced
    features against the leading kernel coordinates. With ``counter`` set the
    canonical per-unit algorithm runs instead and tallies its scalar ops.
    """
    F = np.asarray(F)
    if F.ndim != 2:
        raise ValueError(f"decode_batch: expected (B, m) features, got {F.shape}")
    dims = F.shape[1] if dims is None else dims
    if F.shape[1] != dims:
        raise ValueError(f"decode_batch: feature width {F.shape[1]} != dims {dims}")
    _check_feature(layer, F, dims)
    if counter is not None:
        return _decode_counted(layer, F, dims, counter).values
    _, _, g = _forward(layer, F, dims)
    out = g @ layer.w.astype(np.float64)
    return out.astype(layer.dtype)


def decode_full(layer: GaussianRbfLayer, F: np.ndarray, dims: int | None = None) -> DecoderOutput:
    """decode_batch plus the kernel activations, for inspection in tests."""
    F = np.asarray(F)
    dims = F.shape[1] if dims is None else dims
    _check_feature(layer, F, dims)
    _, _, g = _forward(layer, F, dims)
    out = g @ layer.w.astype(np.float64)
    return DecoderOutput(values=out.astype(layer.dtype), activations=g.astype(layer.dtype))


def decode_sliced(layer: GaussianRbfLayer, f_sliced: np.ndarray, k: int | None = None) -> np.ndarray:
    """Decode features that keep only the first k levels; kernel coordinates
    beyond the slice are ignored, blend weights are untouched."""
    f_sliced = np.asarray(f_sliced)
    single = f_sliced.ndim == 1
    F = f_sliced[None, :] if single else f_sliced
    out = decode_batch(layer, F, dims=F.shape[1])
    return out[0] if single else out


def _decode_counted(layer, F, dims, counter) -> DecoderOutput:
    """Canonical per-unit evaluation with scalar-op tallies.

    Counts per (point, unit): m subtractions, m squarings, the bandwidth
    dot-product (spherical: m-1 adds + 1 multiply; anisotropic: m fused
    multiply-adds, tallied as one op each, the granularity the closed-form
    count implies), 1 exp, and q multiply + q add for the blend.
    """
    B, N, q = F.shape[0], layer.n_kernels, layer.out_dim
    t = F[:, None, :dims].astype(np.float64) - layer.mu[None, :, :dims].astype(np.float64)
    counter.sub += B * N * dims
    s = t * t
    counter.mul += B * N * dims
    if layer.spherical:
        d2 = layer.beta[:, 0].astype(np.float64)[None, :] * np.sum(s, axis=2)
        counter.add += B * N * (dims - 1)
        counter.mul += B * N
    else:
        d2 = np.einsum("bnj,nj->bn", s, layer.beta[:, :dims].astype(np.float64))
        counter.fma += B * N * dims
    g = np.exp(-np.minimum(d2, EXP_CLAMP))
    counter.exp += B * N
    out = g @ layer.w.astype(np.float64)
    counter.mul += B * N * q
    counter.add += B * N * q
    return DecoderOutput(values=out.astype(layer.dtype), activations=g.astype(layer.dtype))


def decoder_backward(layer: GaussianRbfLayer, F: np.ndarray, upstream: np.ndarray,
                     dims: int | None = None):
    """Closed-form gradients of the decode output.

    Returns (DecoderGrads, dF) where dF is (B, dims). All contractions over
    the batch are expressed as matrix products:

        A          = -(U @ W^T) * g              d(loss)/d(d^2)
        dW         = g^T @ U
        sum_b A*t  = A^T @ F - mu * colsum(A)
        sum_b A*t^2= A^T @ F^2 - 2 mu (A^T @ F) + mu^2 colsum(A)
    """
    F = np.asarray(F)
    upstream = np.asarray(upstream)
    dims = F.shape[1] if dims is None else dims
    _check_feature(layer, F, dims)
    B = F.shape[0]
    if upstream.shape != (B, layer.out_dim):
        raise ValueError(
            f"decoder_backward: upstream shape {upstream.shape} != {(B, layer.out_dim)}"
        )

    F64, d2, g = _forward(layer, F, dims)
    U = upstream.astype(np.float64)
    W64 = layer.w.astype(np.float64)
    mu = layer.mu[:, :dims].astype(np.float64)

    dW = g.T @ U
    A = -(U @ W64.T) * g
    A[d2 > EXP_CLAMP] = 0.0  # clamped responses are constants

    colA = A.sum(axis=0)                      # (N,)
    AF = A.T @ F64                            # (N, dims)
    sum_At = AF - mu * colA[:, None]          # sum_b A * (f - mu)
    sum_As = (A.T @ (F64 * F64)) - 2.0 * mu * AF + (mu * mu) * colA[:, None]

    dmu = np.zeros_like(layer.mu, dtype=np.float64)
    if layer.spherical:
        beta = layer.beta[:, 0].astype(np.float64)    # (N,)
        dbeta = sum_As.sum(axis=1)                    # (N,)
        dmu[:, :dims] = -2.0 * beta[:, None] * sum_At
        Ab = A * beta[None, :]
        dF = 2.0 * (F64 * Ab.sum(axis=1)[:, None] - Ab @ mu)
        drho = (dbeta * beta)[:, None]
    else:
        beta = layer.beta[:, :dims].astype(np.float64)
        dbeta = sum_As
        dmu[:, :dims] = -2.0 * beta * sum_At
        dF = 2.0 * (F64 * (A @ beta) - A @ (beta * mu))
        drho = np.zeros_like(layer.rho, dtype=np.float64)
        drho[:, :dims] = dbeta * beta

    grads = DecoderGrads(
        mu=dmu.astype(layer.dtype),
        rho=drho.astype(layer.dtype),
        w=dW.astype(layer.dtype),
    )
    return grads, dF.astype(layer.dtype)
