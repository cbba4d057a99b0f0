"""SDF task support: analytic ground-truth shapes, iso-surface extraction,
and the geometry metrics (chamfer, normal consistency/error, volumetric IoU).

Shapes live in the normalized domain [0,1]^3 and return exact signed
distances, negative inside.
"""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree
from skimage import measure as _sk_measure

from .mesh import MeshSdf, TriMesh
from .numerics import Rng


class SphereSdf:
    def __init__(self, center=(0.5, 0.5, 0.5), radius=0.3):
        self.center = np.asarray(center, dtype=np.float64)
        self.radius = float(radius)

    def sdf(self, points) -> np.ndarray:
        p = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return np.linalg.norm(p - self.center, axis=1) - self.radius

    def surface_samples(self, count: int, rng: Rng) -> np.ndarray:
        v = rng.normal(size=(count, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        return self.center + self.radius * v


class TorusSdf:
    """Torus around the z axis through ``center``: major radius R, tube r."""

    def __init__(self, center=(0.5, 0.5, 0.5), major_radius=0.3, minor_radius=0.1):
        self.center = np.asarray(center, dtype=np.float64)
        self.major_radius = float(major_radius)
        self.minor_radius = float(minor_radius)

    def sdf(self, points) -> np.ndarray:
        p = np.atleast_2d(np.asarray(points, dtype=np.float64)) - self.center
        ring = np.sqrt(p[:, 0] ** 2 + p[:, 1] ** 2) - self.major_radius
        return np.sqrt(ring ** 2 + p[:, 2] ** 2) - self.minor_radius

    def surface_samples(self, count: int, rng: Rng) -> np.ndarray:
        # Rejection on the tube angle keeps the sampling area-uniform: outer
        # regions of the tube carry more area by (R + r cos) / (R + r).
        R, r = self.major_radius, self.minor_radius
        out = np.empty((0, 3))
        while len(out) < count:
            n = max(count - len(out), 32)
            theta = rng.uniform(0, 2 * np.pi, size=2 * n)
            phi = rng.uniform(0, 2 * np.pi, size=2 * n)
            accept = rng.uniform(size=2 * n) < (R + r * np.cos(phi)) / (R + r)
            theta, phi = theta[accept][:n], phi[accept][:n]
            ring = R + r * np.cos(phi)
            pts = np.stack(
                [ring * np.cos(theta), ring * np.sin(theta), r * np.sin(phi)], axis=1
            )
            out = np.concatenate([out, self.center + pts], axis=0)
        return out[:count]


class BoxSdf:
    def __init__(self, center=(0.5, 0.5, 0.5), half_extents=(0.2, 0.2, 0.2)):
        self.center = np.asarray(center, dtype=np.float64)
        self.half = np.asarray(half_extents, dtype=np.float64)

    def sdf(self, points) -> np.ndarray:
        p = np.abs(np.atleast_2d(np.asarray(points, dtype=np.float64)) - self.center)
        q = p - self.half
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
        inside = np.minimum(np.max(q, axis=1), 0.0)
        return outside + inside

    def surface_samples(self, count: int, rng: Rng) -> np.ndarray:
        h = self.half
        areas = np.array([h[1] * h[2], h[0] * h[2], h[0] * h[1]]) * 4.0
        probs = np.repeat(areas / areas.sum() / 2.0, 2)
        face = rng.gen.choice(6, size=count, p=probs)
        uv = rng.uniform(-1.0, 1.0, size=(count, 2))
        pts = np.empty((count, 3))
        for axis in range(3):
            for side in (0, 1):
                m = face == 2 * axis + side
                others = [a for a in range(3) if a != axis]
                pts[m, axis] = (1.0 if side else -1.0) * h[axis]
                pts[m, others[0]] = uv[m, 0] * h[others[0]]
                pts[m, others[1]] = uv[m, 1] * h[others[1]]
        return self.center + pts


class CapsuleSdf:
    def __init__(self, a=(0.35, 0.5, 0.5), b=(0.65, 0.5, 0.5), radius=0.12):
        self.a = np.asarray(a, dtype=np.float64)
        self.b = np.asarray(b, dtype=np.float64)
        self.radius = float(radius)

    def sdf(self, points) -> np.ndarray:
        p = np.atleast_2d(np.asarray(points, dtype=np.float64))
        ab = self.b - self.a
        t = np.clip(((p - self.a) @ ab) / (ab @ ab), 0.0, 1.0)
        closest = self.a + t[:, None] * ab
        return np.linalg.norm(p - closest, axis=1) - self.radius

    def surface_samples(self, count: int, rng: Rng) -> np.ndarray:
        ab = self.b - self.a
        length = np.linalg.norm(ab)
        r = self.radius
        area_cyl = 2 * np.pi * r * length
        area_caps = 4 * np.pi * r * r
        n_cyl = int(round(count * area_cyl / (area_cyl + area_caps)))
        axis = ab / max(length, 1e-300)
        # orthonormal frame around the axis
        helper = np.array([1.0, 0.0, 0.0])
        if abs(axis @ helper) > 0.9:
            helper = np.array([0.0, 1.0, 0.0])
        u = np.cross(axis, helper)
        u /= np.linalg.norm(u)
        v = np.cross(axis, u)
        theta = rng.uniform(0, 2 * np.pi, size=n_cyl)
        t = rng.uniform(0, 1, size=n_cyl)
        side = (
            self.a[None]
            + t[:, None] * ab[None]
            + r * (np.cos(theta)[:, None] * u + np.sin(theta)[:, None] * v)
        )
        n_cap = count - n_cyl
        d = rng.normal(size=(n_cap, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        along = d @ axis
        ends = np.where((along > 0)[:, None], self.b[None], self.a[None])
        caps = ends + r * d
        return np.concatenate([side, caps], axis=0)


class UnionSdf:
    """min() combination of child shapes; exact away from overlap regions."""

    def __init__(self, parts):
        if not parts:
            raise ValueError("UnionSdf: needs at least one part")
        self.parts = list(parts)

    def sdf(self, points) -> np.ndarray:
        return np.min(np.stack([p.sdf(points) for p in self.parts]), axis=0)

    def surface_samples(self, count: int, rng: Rng) -> np.ndarray:
        # Oversample child surfaces, keep points on the union boundary.
        per = max(count // len(self.parts) + 1, 8)
        keep = []
        got = 0
        while got < count:
            for part in self.parts:
                pts = part.surface_samples(per, rng)
                on_boundary = np.abs(self.sdf(pts)) < 1e-9
                pts = pts[on_boundary]
                keep.append(pts)
                got += len(pts)
        return np.concatenate(keep, axis=0)[:count]


_ORACLE_KINDS = {
    "sphere": SphereSdf,
    "torus": TorusSdf,
    "box": BoxSdf,
    "capsule": CapsuleSdf,
}


def make_oracle(spec: dict):
    """Build a shape oracle from a config dict ({'kind': ..., params...})."""
    spec = dict(spec)
    kind = spec.pop("kind", None)
    if kind == "union":
        return UnionSdf([make_oracle(p) for p in spec.pop("parts")])
    if kind == "mesh":
        from .mesh import load_obj, load_ply

        path = str(spec.pop("path"))
        mesh = load_ply(path) if path.endswith(".ply") else load_obj(path)
        return MeshSdf(mesh)
    if kind not in _ORACLE_KINDS:
        raise ValueError(f"unknown shape kind {kind!r}")
    return _ORACLE_KINDS[kind](**spec)


def analytic_sdf(oracle, points) -> np.ndarray:
    """Signed distance of the oracle at the given points (negative inside)."""
    return oracle.sdf(points)


# ---------------------------------------------------------------------------
# Iso-surface extraction

def sample_lattice(field, resolution: int, chunk: int = 1 << 21) -> np.ndarray:
    """Evaluate a field callable on the regular lattice over [0,1]^3."""
    r = resolution
    axis = np.linspace(0.0, 1.0, r)
    vol = np.empty(r * r * r, dtype=np.float64)
    # x-fastest ordering matches meshgrid(indexing='ij') raveling below
    xs, ys, zs = np.meshgrid(axis, axis, axis, indexing="ij")
    pts = np.stack([xs.ravel(), ys.ravel(), zs.ravel()], axis=1)
    for start in range(0, len(pts), chunk):
        vol[start : start + chunk] = np.asarray(
            field(pts[start : start + chunk])
        ).reshape(-1)
    return vol.reshape(r, r, r)


def marching_cubes(field, resolution: int, iso: float = 0.0) -> TriMesh:
    """Extract the iso-surface of a field over [0,1]^3 at the given lattice
    resolution. A field with no sign change yields an empty mesh."""
    if resolution < 8:
        raise ValueError(f"marching_cubes: resolution must be >= 8, got {resolution}")
    vol = sample_lattice(field, resolution)
    spacing = 1.0 / (resolution - 1)
    try:
        verts, faces, _, _ = _sk_measure.marching_cubes(
            vol, level=iso, spacing=(spacing, spacing, spacing)
        )
    except ValueError:
        return TriMesh.empty()
    return TriMesh(verts.astype(np.float64), faces.astype(np.int64))


# ---------------------------------------------------------------------------
# Metrics

def chamfer_l1(points_a: np.ndarray, points_b: np.ndarray) -> float:
    """Symmetric mean nearest-neighbor distance between two point samples."""
    a = np.atleast_2d(np.asarray(points_a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(points_b, dtype=np.float64))
    if len(a) < 1 or len(b) < 1:
        raise ValueError("chamfer_l1: point sets must be non-empty")
    d_ab, _ = cKDTree(b).query(a)
    d_ba, _ = cKDTree(a).query(b)
    return 0.5 * float(np.mean(d_ab)) + 0.5 * float(np.mean(d_ba))


DEFAULT_METRIC_SAMPLES = 100_000


def mesh_chamfer_l1(mesh_a: TriMesh, mesh_b: TriMesh,
                    samples: int = DEFAULT_METRIC_SAMPLES,
                    rng: Rng | None = None) -> float:
    if mesh_a.is_empty or mesh_b.is_empty:
        raise ValueError("no surface extracted")
    rng = rng or Rng(0)
    # Common random numbers: identical meshes get identical samples.
    pa, _ = mesh_a.sample_surface(samples, rng.substream("chamfer"))
    pb, _ = mesh_b.sample_surface(samples, rng.substream("chamfer"))
    return chamfer_l1(pa, pb)


def normal_metrics(mesh_a: TriMesh, mesh_b: TriMesh,
                   samples: int = DEFAULT_METRIC_SAMPLES,
                   rng: Rng | None = None) -> tuple[float, float]:
    """(normal consistency, normal angular error in degrees), symmetrized.

    For area-uniform samples on one mesh, compares each sample's face normal
    with the normal at the nearest sample of the other mesh.
    """
    if mesh_a.is_empty or mesh_b.is_empty:
        raise ValueError("no surface extracted")
    rng = rng or Rng(0)
    pa, na = mesh_a.sample_surface(samples, rng.substream("normals"))
    pb, nb = mesh_b.sample_surface(samples, rng.substream("normals"))

    def one_way(p_src, n_src, p_dst, n_dst):
        _, idx = cKDTree(p_dst).query(p_src)
        cos = np.abs(np.einsum("ij,ij->i", n_src, n_dst[idx]))
        cos = np.clip(cos, 0.0, 1.0)
        return float(np.mean(cos)), float(np.degrees(np.mean(np.arccos(cos))))

    nc_ab, nae_ab = one_way(pa, na, pb, nb)
    nc_ba, nae_ba = one_way(pb, nb, pa, na)
    return 0.5 * (nc_ab + nc_ba), 0.5 * (nae_ab + nae_ba)


def volumetric_iou(field_a, field_b, resolution: int = 128) -> float:
    """Occupancy IoU of two fields on a lattice; both-empty counts as 1."""
    if resolution < 16:
        raise ValueError(f"volumetric_iou: resolution must be >= 16, got {resolution}")
    occ_a = sample_lattice(field_a, resolution) < 0
    occ_b = sample_lattice(field_b, resolution) < 0
    union = np.count_nonzero(occ_a | occ_b)
    if union == 0:
        return 1.0
    return np.count_nonzero(occ_a & occ_b) / union
