"""Toy radiance fields: density + degree-3 spherical harmonics color from a
single decoder pass, alpha-composited along camera rays.

The decoder emits 49 raw values per point: softplus of the first gives the
density, the remaining 48 are 16 SH coefficients per RGB channel pushed
through a sigmoid after the view-direction contraction. Scenes are procedural
(constant-density colored spheres) so ground truth comes from compositing the
analytic field with the same quadrature.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit as _sigmoid

from .image import ImageBuffer
from .model import FieldModel, GradBuffer, ModelOptimizer, model_backward, model_forward
from .numerics import Rng, ScheduleSpec
from .training import TrainingDiverged


# --------------------------------------------------------------------------
# Spherical harmonics, real basis, degrees 0..3, ordered l-major m-ascending.

_C0 = 0.28209479177387814
_C1 = 0.4886025119029199
_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
       -1.0925484305920792, 0.5462742152960396)
_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
       0.3731763325901154, -0.4570457994644658, 1.445305721320277,
       -0.5900435899266435)

SH_DIM = 16


def sh_basis(v) -> np.ndarray:
    """Real spherical harmonics Y_l^m for l <= 3 at unit directions.

    Accepts (..., 3); non-unit inputs are normalized first. Returns (..., 16).
    """
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(norm == 0):
        raise ValueError("sh_basis: zero direction")
    v = v / norm
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    xx, yy, zz = x * x, y * y, z * z
    out = np.empty(v.shape[:-1] + (SH_DIM,), dtype=np.float64)
    out[..., 0] = _C0
    out[..., 1] = -_C1 * y
    out[..., 2] = _C1 * z
    out[..., 3] = -_C1 * x
    out[..., 4] = _C2[0] * x * y
    out[..., 5] = _C2[1] * y * z
    out[..., 6] = _C2[2] * (2.0 * zz - xx - yy)
    out[..., 7] = _C2[3] * x * z
    out[..., 8] = _C2[4] * (xx - yy)
    out[..., 9] = _C3[0] * y * (3.0 * xx - yy)
    out[..., 10] = _C3[1] * x * y * z
    out[..., 11] = _C3[2] * y * (4.0 * zz - xx - yy)
    out[..., 12] = _C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy)
    out[..., 13] = _C3[4] * x * (4.0 * zz - xx - yy)
    out[..., 14] = _C3[5] * z * (xx - yy)
    out[..., 15] = _C3[6] * x * (xx - 3.0 * yy)
    return out


def _softplus(x):
    return np.logaddexp(0.0, x)


def raw_to_radiance(raw: np.ndarray, sh: np.ndarray):
    """Map raw decoder outputs (..., 49) + SH basis values (..., 16) to
    (sigma, rgb): softplus density, sigmoid of the per-channel SH blend."""
    sigma = _softplus(raw[..., 0])
    coefs = raw[..., 1:].reshape(raw.shape[:-1] + (3, SH_DIM))
    u = np.einsum("...cj,...j->...c", coefs, sh)
    return sigma, _sigmoid(u)


def decode_radiance(model: FieldModel, points: np.ndarray, viewdirs: np.ndarray):
    """(sigma, rgb) at points seen from unit directions viewdirs.

    One encode and one decode per point, by construction.
    """
    raw = model.decode(model.encode(points))
    return raw_to_radiance(raw, sh_basis(viewdirs))


# --------------------------------------------------------------------------
# Volume rendering

@dataclass
class RaySegmentation:
    """Strictly increasing sample depths along rays plus segment lengths."""

    t: np.ndarray      # (R, S)
    delta: np.ndarray  # (R, S), > 0

    def __post_init__(self):
        if np.any(np.diff(self.t, axis=-1) <= 0):
            raise ValueError("RaySegmentation: t values must strictly increase")
        if np.any(self.delta <= 0):
            raise ValueError("RaySegmentation: deltas must be positive")


def stratified_ts(n_rays: int, samples: int, near: float, far: float,
                  rng: Rng | None) -> RaySegmentation:
    """Stratified uniform depths in [near, far]; midpoints when rng is None."""
    if far <= near:
        raise ValueError(f"stratified_ts: need near < far, got {near}, {far}")
    width = (far - near) / samples
    jitter = (
        np.full((n_rays, samples), 0.5)
        if rng is None
        else rng.uniform(size=(n_rays, samples))
    )
    t = near + (np.arange(samples)[None, :] + jitter) * width
    delta = np.empty_like(t)
    delta[:, :-1] = np.diff(t, axis=1)
    delta[:, -1] = far - t[:, -1]
    return RaySegmentation(t=t, delta=delta)


def composite(sigma: np.ndarray, rgb: np.ndarray, delta: np.ndarray,
              background) -> tuple[np.ndarray, np.ndarray]:
    """Alpha-composite per-ray samples against a background color.

    sigma, delta: (R, S); rgb: (R, S, 3). Returns (colors (R, 3), opacity (R,)).
    """
    e = np.exp(-sigma * delta)                    # per-segment transmittance
    T = np.cumprod(e, axis=1)
    T = np.concatenate([np.ones_like(T[:, :1]), T[:, :-1]], axis=1)
    w = T * (1.0 - e)                             # contribution weights
    colors = np.einsum("rs,rsc->rc", w, rgb)
    opacity = w.sum(axis=1)
    colors = colors + (1.0 - opacity)[:, None] * np.asarray(background)[None, :]
    return colors, opacity


def composite_weights(sigma, delta):
    """The T_j * alpha_j weights alone (diagnostics and tests)."""
    e = np.exp(-sigma * delta)
    T = np.cumprod(e, axis=1)
    T = np.concatenate([np.ones_like(T[:, :1]), T[:, :-1]], axis=1)
    return T * (1.0 - e)


def composite_backward(sigma, rgb, delta, background, d_colors):
    """Gradients of composite() w.r.t. sigma and rgb.

    d(C)/d(sigma_j) = delta_j * [T_j e_j (c_j - bg) - (A_j - W_j bg)] where
    A_j / W_j are the weighted color / weight sums strictly after j; the
    division by (1 - alpha_j) cancels against d(alpha)/d(sigma), so the form
    is stable even for saturated samples.
    """
    bg = np.asarray(background)[None, None, :]
    e = np.exp(-sigma * delta)
    T = np.cumprod(e, axis=1)
    T = np.concatenate([np.ones_like(T[:, :1]), T[:, :-1]], axis=1)
    w = T * (1.0 - e)

    d_rgb = w[..., None] * d_colors[:, None, :]

    wc = w[..., None] * rgb                       # (R, S, 3)
    suffix_wc = np.flip(np.cumsum(np.flip(wc, 1), axis=1), 1) - wc
    suffix_w = np.flip(np.cumsum(np.flip(w, 1), axis=1), 1) - w
    inner = (T * e)[..., None] * (rgb - bg) - (suffix_wc - suffix_w[..., None] * bg)
    d_sigma = delta * np.einsum("rsc,rc->rs", inner, d_colors)
    return d_sigma, d_rgb


# --------------------------------------------------------------------------
# Cameras and rays

@dataclass
class Camera:
    """Pinhole camera looking down its -z axis; rotation columns are the
    camera axes in world coordinates."""

    position: np.ndarray
    rotation: np.ndarray  # (3, 3)
    focal: float          # pixels
    width: int
    height: int

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64)
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        err = np.max(np.abs(self.rotation @ self.rotation.T - np.eye(3)))
        if err > 1e-6:
            raise ValueError(f"Camera: rotation not orthonormal (err {err:.2e})")

    @property
    def forward(self) -> np.ndarray:
        return -self.rotation[:, 2]


def look_at_camera(position, target, focal, width, height, up=(0, 0, 1)) -> Camera:
    position = np.asarray(position, dtype=np.float64)
    z = position - np.asarray(target, dtype=np.float64)
    z /= np.linalg.norm(z)
    x = np.cross(np.asarray(up, dtype=np.float64), z)
    n = np.linalg.norm(x)
    if n < 1e-9:  # looking straight along up
        x = np.cross(np.array([0.0, 1.0, 0.0]), z)
        n = np.linalg.norm(x)
    x /= n
    y = np.cross(z, x)
    return Camera(position, np.stack([x, y, z], axis=1), focal, width, height)


def generate_rays(camera: Camera, pixels) -> tuple[np.ndarray, np.ndarray]:
    """Ray origins and unit directions through the given pixel centers.

    ``pixels`` is (N, 2) as (column, row) indices; image y grows downward,
    camera y upward.
    """
    px = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
    u = (px[:, 0] + 0.5 - camera.width / 2.0) / camera.focal
    v = -(px[:, 1] + 0.5 - camera.height / 2.0) / camera.focal
    d_cam = np.stack([u, v, -np.ones_like(u)], axis=1)
    d_world = d_cam @ camera.rotation.T
    d_world /= np.linalg.norm(d_world, axis=1, keepdims=True)
    origins = np.broadcast_to(camera.position, d_world.shape).copy()
    return origins, d_world


def all_pixels(width: int, height: int) -> np.ndarray:
    gx, gy = np.meshgrid(np.arange(width), np.arange(height))
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


# --------------------------------------------------------------------------
# Rendering

def render_rays(field, origins, dirs, samples: int, near: float, far: float,
                background, rng: Rng | None = None, chunk: int = 1 << 15):
    """Composite a (sigma, rgb) field along rays.

    ``field(points, viewdirs) -> (sigma, rgb)``; stratified sampling when an
    rng is supplied, midpoint otherwise. Returns (colors, opacity).
    """
    n = len(origins)
    colors = np.empty((n, 3))
    opacity = np.empty(n)
    rays_per_chunk = max(chunk // samples, 1)
    for start in range(0, n, rays_per_chunk):
        stop = min(start + rays_per_chunk, n)
        seg = stratified_ts(stop - start, samples, near, far, rng)
        pts = origins[start:stop, None, :] + seg.t[..., None] * dirs[start:stop, None, :]
        vdirs = np.repeat(dirs[start:stop], samples, axis=0)
        sigma, rgb = field(pts.reshape(-1, 3), vdirs)
        sigma = sigma.reshape(stop - start, samples)
        rgb = rgb.reshape(stop - start, samples, 3)
        colors[start:stop], opacity[start:stop] = composite(
            sigma, rgb, seg.delta, background
        )
    return colors, opacity


def render_view(model: FieldModel, camera: Camera, samples: int,
                near: float, far: float, background,
                seed: int | None = 0) -> ImageBuffer:
    """Render a full camera view of the model; deterministic for a fixed seed."""
    if samples < 8:
        raise ValueError(f"render_view: need samples >= 8, got {samples}")
    origins, dirs = generate_rays(camera, all_pixels(camera.width, camera.height))
    rng = None if seed is None else Rng(seed).substream("render-ts")

    def field(points, viewdirs):
        return decode_radiance(model, np.clip(points, 0.0, 1.0), viewdirs)

    colors, _ = render_rays(field, origins, dirs, samples, near, far,
                            background, rng)
    img = np.clip(colors, 0.0, 1.0).reshape(camera.height, camera.width, 3)
    return ImageBuffer(img)


# --------------------------------------------------------------------------
# Procedural toy scenes

@dataclass
class SceneSphere:
    center: np.ndarray
    radius: float
    rgb: np.ndarray
    sigma: float


@dataclass
class ToyScene:
    """Constant-density colored spheres in [0,1]^3 plus a background color."""

    spheres: list[SceneSphere]
    background: np.ndarray
    camera_distance: float = 1.6
    focal: float = 80.0
    width: int = 64
    height: int = 64
    n_train: int = 20
    n_test: int = 5
    margin: float = 0.1

    @classmethod
    def from_dict(cls, spec: dict) -> "ToyScene":
        spheres = [
            SceneSphere(
                center=np.asarray(s["center"], dtype=np.float64),
                radius=float(s["radius"]),
                rgb=np.asarray(s["rgb"], dtype=np.float64),
                sigma=float(s["sigma"]),
            )
            for s in spec["spheres"]
        ]
        cam = spec.get("camera", {})
        return cls(
            spheres=spheres,
            background=np.asarray(spec["background"], dtype=np.float64),
            camera_distance=float(cam.get("distance", 1.6)),
            focal=float(cam.get("focal", 80.0)),
            width=int(cam.get("width", 64)),
            height=int(cam.get("height", 64)),
            n_train=int(cam.get("n_train", 20)),
            n_test=int(cam.get("n_test", 5)),
            margin=float(cam.get("margin", 0.1)),
        )

    def to_dict(self) -> dict:
        return {
            "spheres": [
                {
                    "center": list(map(float, s.center)),
                    "radius": s.radius,
                    "rgb": list(map(float, s.rgb)),
                    "sigma": s.sigma,
                }
                for s in self.spheres
            ],
            "background": list(map(float, self.background)),
            "camera": {
                "distance": self.camera_distance,
                "focal": self.focal,
                "width": self.width,
                "height": self.height,
                "n_train": self.n_train,
                "n_test": self.n_test,
                "margin": self.margin,
            },
        }

    def field(self, points, viewdirs=None):
        """Analytic (sigma, rgb); earlier spheres take priority in overlaps."""
        p = np.atleast_2d(points)
        sigma = np.zeros(len(p))
        rgb = np.zeros((len(p), 3))
        unassigned = np.ones(len(p), dtype=bool)
        for s in self.spheres:
            inside = np.linalg.norm(p - s.center, axis=1) <= s.radius
            take = inside & unassigned
            sigma[take] = s.sigma
            rgb[take] = s.rgb
            unassigned &= ~inside
        return sigma, rgb

    def bounding_radius(self) -> float:
        center = np.full(3, 0.5)
        r = 0.0
        for s in self.spheres:
            r = max(r, float(np.linalg.norm(s.center - center)) + s.radius)
        return r + self.margin

    def near_far(self) -> tuple[float, float]:
        b = self.bounding_radius()
        return self.camera_distance - b, self.camera_distance + b

    def cameras(self) -> list[Camera]:
        """n_train + n_test cameras on a sphere around the scene center."""
        total = self.n_train + self.n_test
        center = np.full(3, 0.5)
        cams = []
        elevations = np.deg2rad([-20.0, 5.0, 30.0, 55.0])
        for i in range(total):
            azim = 2.0 * np.pi * i / total
            elev = elevations[i % len(elevations)]
            pos = center + self.camera_distance * np.array([
                np.cos(elev) * np.cos(azim),
                np.cos(elev) * np.sin(azim),
                np.sin(elev),
            ])
            cams.append(
                look_at_camera(pos, center, self.focal, self.width, self.height)
            )
        return cams

    def split(self) -> tuple[list[int], list[int]]:
        """Disjoint train/test camera indices (every 5th camera held out)."""
        total = self.n_train + self.n_test
        test = [i for i in range(total) if i % 5 == 2][: self.n_test]
        train = [i for i in range(total) if i not in test][: self.n_train]
        return train, test


def two_sphere_scene(width: int = 64, height: int = 64) -> ToyScene:
    return ToyScene(
        spheres=[
            SceneSphere(np.array([0.38, 0.45, 0.5]), 0.16, np.array([0.85, 0.25, 0.2]), 60.0),
            SceneSphere(np.array([0.64, 0.58, 0.52]), 0.12, np.array([0.2, 0.4, 0.85]), 60.0),
        ],
        background=np.array([1.0, 1.0, 1.0]),
        width=width,
        height=height,
    )


REFERENCE_SAMPLES = 256


def toy_scene_views(scene: ToyScene, seed: int = 0):
    """Ground-truth train/test views rendered from the analytic field with
    the reference quadrature. Returns (train list, test list) of
    (camera, ImageBuffer) pairs."""
    cams = scene.cameras()
    near, far = scene.near_far()
    train_idx, test_idx = scene.split()
    views = {}
    for i in sorted(train_idx + test_idx):
        origins, dirs = generate_rays(
            cams[i], all_pixels(scene.width, scene.height)
        )
        rng = Rng(seed).substream(f"gt-view-{i}")
        colors, _ = render_rays(
            scene.field, origins, dirs, REFERENCE_SAMPLES, near, far,
            scene.background, rng,
        )
        img = np.clip(colors, 0.0, 1.0).reshape(scene.height, scene.width, 3)
        views[i] = (cams[i], ImageBuffer(img))
    return [views[i] for i in train_idx], [views[i] for i in test_idx]


def save_scene(path, scene: ToyScene) -> None:
    with open(path, "w") as fh:
        json.dump(scene.to_dict(), fh, indent=2)


def load_scene(path) -> ToyScene:
    with open(path) as fh:
        return ToyScene.from_dict(json.load(fh))


def save_poses(path, cameras: list[Camera]) -> None:
    with open(path, "w") as fh:
        json.dump(
            [
                {
                    "position": list(map(float, c.position)),
                    "rotation": [list(map(float, row)) for row in c.rotation],
                    "focal": c.focal,
                    "width": c.width,
                    "height": c.height,
                }
                for c in cameras
            ],
            fh,
            indent=2,
        )


# --------------------------------------------------------------------------
# Training

@dataclass
class RadianceFitConfig:
    steps: int = 3000
    rays_per_batch: int = 512
    samples_per_ray: int = 64
    seed: int = 0
    lr_tables: float = 1e-2
    lr_decoder: float = 1e-3
    decay_factor: float = 0.1
    warmup_steps: int = 0

    def schedules(self):
        decay_steps = max(self.steps - self.warmup_steps, 1)
        return (
            ScheduleSpec(self.lr_tables, self.warmup_steps, self.decay_factor, decay_steps),
            ScheduleSpec(self.lr_decoder, self.warmup_steps, self.decay_factor, decay_steps),
        )


def radiance_step(model: FieldModel, origins, dirs, gt_colors, seg: RaySegmentation,
                  background, opt: ModelOptimizer, step_index: int) -> float:
    """One photometric-L1 update through compositing, decoder, and encoder."""
    n_rays, samples = seg.t.shape
    pts = origins[:, None, :] + seg.t[..., None] * dirs[:, None, :]
    pts = np.clip(pts.reshape(-1, 3), 0.0, 1.0)
    raw, ctx = model_forward(model, pts)
    raw = raw.astype(np.float64)

    sh = sh_basis(dirs)                                     # (R, 16)
    sigma_raw = raw[:, 0].reshape(n_rays, samples)
    coefs = raw[:, 1:].reshape(n_rays, samples, 3, SH_DIM)
    sigma = _softplus(sigma_raw)
    u = np.einsum("rscj,rj->rsc", coefs, sh)
    rgb = _sigmoid(u)

    colors, _ = composite(sigma, rgb, seg.delta, background)
    resid = colors - gt_colors
    loss = float(np.mean(np.abs(resid)))
    if not np.isfinite(loss):
        raise TrainingDiverged(step_index, loss, float(np.nanmax(np.abs(resid))))
    d_colors = np.sign(resid) / resid.size

    d_sigma, d_rgb = composite_backward(sigma, rgb, seg.delta, background, d_colors)
    d_u = d_rgb * rgb * (1.0 - rgb)
    d_coefs = np.einsum("rsc,rj->rscj", d_u, sh)
    d_raw = np.empty_like(raw)
    d_raw[:, 0] = (d_sigma * _sigmoid(sigma_raw)).reshape(-1)
    d_raw[:, 1:] = d_coefs.reshape(-1, 48)

    grads = model_backward(model, ctx, d_raw.astype(model.dtype))
    opt.step(model, grads, step_index)
    return loss


def fit_radiance(model: FieldModel, train_views, scene: ToyScene,
                 config: RadianceFitConfig, opt: ModelOptimizer | None = None):
    """Fit the model to posed ground-truth views of a toy scene.

    Returns (model, history) with (step, loss, lr, wall_ms) rows.
    """
    import time

    if opt is None:
        table_s, dec_s = config.schedules()
        opt = ModelOptimizer(model, table_s, dec_s)
    near, far = scene.near_far()
    rng = Rng(config.seed).substream("radiance-fit")

    # Precompute every train ray and its ground-truth color once.
    all_origins, all_dirs, all_colors = [], [], []
    for camera, image in train_views:
        o, d = generate_rays(camera, all_pixels(camera.width, camera.height))
        all_origins.append(o)
        all_dirs.append(d)
        all_colors.append(image.data.reshape(-1, 3))
    origins = np.concatenate(all_origins)
    dirs = np.concatenate(all_dirs)
    gt = np.concatenate(all_colors)

    history = []
    for step in range(config.steps):
        t0 = time.perf_counter()
        pick = rng.integers(0, len(origins), size=config.rays_per_batch)
        seg = stratified_ts(config.rays_per_batch, config.samples_per_ray,
                            near, far, rng)
        loss = radiance_step(model, origins[pick], dirs[pick], gt[pick], seg,
                             scene.background, opt, step)
        wall_ms = (time.perf_counter() - t0) * 1e3
        history.append((step, loss, opt.codes.lr, wall_ms))
    return model, history
