"""RGB image regression support: IO, full-frame rendering, PSNR, error maps."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from PIL import Image as _PILImage

from .grid import slice_levels


@dataclass
class ImageBuffer:
    """Row-major float RGB image with values in [0, 1]."""

    data: np.ndarray  # (h, w, 3)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or self.data.shape[2] != 3:
            raise ValueError(f"ImageBuffer: expected (h, w, 3), got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("ImageBuffer: non-finite pixel values")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def to_bytes(self) -> np.ndarray:
        return np.clip(np.round(self.data * 255.0), 0, 255).astype(np.uint8)

    @classmethod
    def from_bytes(cls, arr: np.ndarray) -> "ImageBuffer":
        return cls(np.asarray(arr, dtype=np.float64) / 255.0)


def load_image(path) -> ImageBuffer:
    """Load an 8-bit PNG or a binary PPM (P6); channels map to [0,1] by /255."""
    path = str(path)
    with open(path, "rb") as fh:
        magic = fh.read(2)
    if magic == b"P6":
        return _load_ppm(path)
    if magic == b"\x89P":
        img = _PILImage.open(path)
        if img.mode != "RGB":
            img = img.convert("RGB")
        return ImageBuffer.from_bytes(np.asarray(img))
    raise ValueError(f"load_image: {path} is neither PNG nor PPM (P6)")


def save_image(path, buf: ImageBuffer) -> None:
    path = str(path)
    if path.endswith(".ppm"):
        _save_ppm(path, buf)
    elif path.endswith(".png"):
        _PILImage.fromarray(buf.to_bytes(), mode="RGB").save(path, format="PNG")
    else:
        raise ValueError(f"save_image: unsupported extension on {path}")


def _load_ppm(path) -> ImageBuffer:
    with open(path, "rb") as fh:
        data = fh.read()
    # header: magic, width, height, maxval, separated by whitespace/comments
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"load_image: truncated PPM header in {path}")
        fields.append(int(data[start:pos]))
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise ValueError(f"load_image: only 8-bit PPM supported, maxval={maxval}")
    need = w * h * 3
    raw = data[pos : pos + need]
    if len(raw) < need:
        raise ValueError(f"load_image: truncated PPM payload in {path}")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3)
    return ImageBuffer.from_bytes(arr)


def _save_ppm(path, buf: ImageBuffer) -> None:
    with open(path, "wb") as fh:
        fh.write(f"P6\n{buf.width} {buf.height}\n255\n".encode("ascii"))
        fh.write(buf.to_bytes().tobytes())


def psnr(a: ImageBuffer, b: ImageBuffer) -> float:
    """Peak signal-to-noise ratio in dB over [0,1] floats; inf when equal."""
    if a.data.shape != b.data.shape:
        raise ValueError(f"psnr: shape mismatch {a.data.shape} vs {b.data.shape}")
    mse = float(np.mean((a.data - b.data) ** 2))
    if mse == 0.0:
        return float("inf")
    return -10.0 * np.log10(mse)


def pixel_centers(width: int, height: int) -> np.ndarray:
    """(h*w, 2) points at pixel centers, x then y, both in [0,1]."""
    xs = (np.arange(width) + 0.5) / width
    ys = (np.arange(height) + 0.5) / height
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


def render_image(model, width: int, height: int, levels: int | None = None,
                 workers: int = 1, chunk: int = 1 << 16) -> ImageBuffer:
    """Evaluate the field at every pixel center, clamped to [0,1].

    Rows are split into bands processed independently; the output does not
    depend on the band count or worker count.
    """
    pts = pixel_centers(width, height)

    def run_band(lo, hi):
        out = np.empty((hi - lo, 3))
        for start in range(lo, hi, chunk):
            stop = min(start + chunk, hi)
            feats = model.encode(pts[start:stop])
            if levels is not None:
                feats = slice_levels(
                    feats, levels, model.grid.config.features_per_level
                )
            out[start - lo : stop - lo] = model.decode(feats)
        return out

    n = len(pts)
    if workers <= 1:
        vals = run_band(0, n)
    else:
        bounds = np.linspace(0, n, workers + 1).astype(int)
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda se: run_band(*se), zip(bounds, bounds[1:])))
        vals = np.concatenate(parts, axis=0)
    return ImageBuffer(np.clip(vals, 0.0, 1.0).reshape(height, width, 3))


# 256-entry ramp, dark blue -> cyan -> yellow -> red, piecewise-linear
# between the anchors below; index = residual / cap.
_RAMP_ANCHORS = np.array([
    [0.05, 0.03, 0.30],
    [0.10, 0.60, 0.85],
    [0.95, 0.90, 0.25],
    [0.85, 0.10, 0.10],
])


def color_ramp() -> np.ndarray:
    """The documented 256-entry error-map ramp as an (256, 3) array."""
    stops = np.linspace(0.0, 1.0, len(_RAMP_ANCHORS))
    xs = np.linspace(0.0, 1.0, 256)
    ramp = np.stack(
        [np.interp(xs, stops, _RAMP_ANCHORS[:, c]) for c in range(3)], axis=1
    )
    return ramp


def error_map(a: ImageBuffer, b: ImageBuffer, cap: float = 0.1) -> ImageBuffer:
    """Heat map of the per-pixel Euclidean color error, normalized by ``cap``."""
    if a.data.shape != b.data.shape:
        raise ValueError(f"error_map: shape mismatch {a.data.shape} vs {b.data.shape}")
    if cap <= 0:
        raise ValueError("error_map: cap must be positive")
    residual = np.linalg.norm(a.data - b.data, axis=2)
    idx = np.clip(residual / cap * 255.0, 0, 255).astype(np.int64)
    return ImageBuffer(color_ramp()[idx])
