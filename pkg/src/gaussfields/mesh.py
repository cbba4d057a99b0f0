"""Triangle meshes: IO, area-uniform sampling, and signed distance queries.

Signed distance uses a median-split BVH for the nearest triangle and the
angle-weighted pseudonormal of the closest feature for the sign; queries
whose pseudonormal test is degenerate fall back to a parity ray vote and are
counted in ``ambiguous_count``.
"""

from __future__ import annotations

import struct

import numpy as np

from .numerics import Rng


class TriMesh:
    def __init__(self, vertices, faces, cleanup: bool = False):
        self.vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
        if self.faces.size and (
            self.faces.min() < 0 or self.faces.max() >= len(self.vertices)
        ):
            raise ValueError("TriMesh: face index out of range")
        if cleanup and len(self.faces):
            self.faces = self.faces[self.face_areas() > 0.0]

    @classmethod
    def empty(cls) -> "TriMesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    @property
    def is_empty(self) -> bool:
        return len(self.faces) == 0

    def _corners(self):
        v, f = self.vertices, self.faces
        return v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]

    def face_cross(self) -> np.ndarray:
        a, b, c = self._corners()
        return np.cross(b - a, c - a)

    def face_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self.face_cross(), axis=1)

    def face_normals(self) -> np.ndarray:
        cr = self.face_cross()
        n = np.linalg.norm(cr, axis=1, keepdims=True)
        return cr / np.where(n > 0, n, 1.0)

    def area(self) -> float:
        return float(self.face_areas().sum())

    def edge_counts(self) -> dict:
        counts: dict[tuple[int, int], int] = {}
        for tri in self.faces:
            for i, j in ((0, 1), (1, 2), (2, 0)):
                key = (min(tri[i], tri[j]), max(tri[i], tri[j]))
                counts[key] = counts.get(key, 0) + 1
        return counts

    def is_watertight(self) -> bool:
        """Closed surface: every edge is shared by exactly two triangles."""
        if self.is_empty:
            return False
        return all(c == 2 for c in self.edge_counts().values())

    def sample_surface(self, count: int, rng: Rng):
        """Area-uniform samples. Returns (points, face normals at samples)."""
        if self.is_empty:
            raise ValueError("sample_surface: no surface extracted")
        areas = self.face_areas()
        probs = areas / areas.sum()
        gen = rng.gen
        fidx = gen.choice(len(self.faces), size=count, p=probs)
        a, b, c = self._corners()
        u = gen.uniform(size=(count, 1))
        v = gen.uniform(size=(count, 1))
        flip = (u + v) > 1.0
        u = np.where(flip, 1.0 - u, u)
        v = np.where(flip, 1.0 - v, v)
        pts = a[fidx] + u * (b[fidx] - a[fidx]) + v * (c[fidx] - a[fidx])
        return pts, self.face_normals()[fidx]

    def transformed(self, rotation=None, translation=None) -> "TriMesh":
        v = self.vertices
        if rotation is not None:
            v = v @ np.asarray(rotation).T
        if translation is not None:
            v = v + np.asarray(translation)
        return TriMesh(v, self.faces.copy())


# ---------------------------------------------------------------------------
# OBJ / PLY IO

def save_obj(path, mesh: TriMesh) -> None:
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        for f in mesh.faces:
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")


def load_obj(path) -> TriMesh:
    verts, faces = [], []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(p.split("/")[0]) - 1 for p in parts[1:]]
                for k in range(1, len(idx) - 1):  # fan-triangulate polygons
                    faces.append([idx[0], idx[k], idx[k + 1]])
    if not verts:
        return TriMesh.empty()
    return TriMesh(np.array(verts), np.array(faces or np.zeros((0, 3))), cleanup=True)


def save_ply(path, mesh: TriMesh) -> None:
    header = (
        "ply\n"
        "format binary_little_endian 1.0\n"
        f"element vertex {len(mesh.vertices)}\n"
        "property float x\nproperty float y\nproperty float z\n"
        f"element face {len(mesh.faces)}\n"
        "property list uchar int vertex_indices\n"
        "end_header\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(mesh.vertices.astype("<f4").tobytes())
        for f in mesh.faces:
            fh.write(struct.pack("<Biii", 3, int(f[0]), int(f[1]), int(f[2])))


def load_ply(path) -> TriMesh:
    with open(path, "rb") as fh:
        data = fh.read()
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply") or end < 0:
        raise ValueError(f"load_ply: {path} is not a PLY file")
    header = data[:end].decode("ascii").splitlines()
    n_vert = n_face = 0
    for line in header:
        parts = line.split()
        if parts[:2] == ["format", "binary_little_endian"]:
            pass
        elif parts[:2] == ["element", "vertex"]:
            n_vert = int(parts[2])
        elif parts[:2] == ["element", "face"]:
            n_face = int(parts[2])
    body = data[end + len(b"end_header\n"):]
    vbytes = n_vert * 12
    if len(body) < vbytes:
        raise ValueError("load_ply: truncated vertex data")
    verts = np.frombuffer(body[:vbytes], dtype="<f4").reshape(-1, 3).astype(np.float64)
    faces = np.empty((n_face, 3), dtype=np.int64)
    off = vbytes
    for i in range(n_face):
        if len(body) < off + 13:
            raise ValueError("load_ply: truncated face data")
        n, a, b, c = struct.unpack_from("<Biii", body, off)
        if n != 3:
            raise ValueError("load_ply: only triangle faces supported")
        faces[i] = (a, b, c)
        off += 13
    return TriMesh(verts, faces, cleanup=True)


# ---------------------------------------------------------------------------
# Closest point on triangles (Ericson's region classification), vectorized.

def closest_point_triangles(p, a, b, c):
    """Closest points on triangles (a,b,c) to points p, all shaped (..., 3).

    Returns (closest, bary) with barycentric coordinates ordered (a, b, c);
    zero entries of bary identify the closest feature.
    """
    ab = b - a
    ac = c - a
    ap = p - a

    d1 = np.einsum("...k,...k->...", ab, ap)
    d2 = np.einsum("...k,...k->...", ac, ap)
    bp = p - b
    d3 = np.einsum("...k,...k->...", ab, bp)
    d4 = np.einsum("...k,...k->...", ac, bp)
    cp = p - c
    d5 = np.einsum("...k,...k->...", ab, cp)
    d6 = np.einsum("...k,...k->...", ac, cp)

    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4

    with np.errstate(divide="ignore", invalid="ignore"):
        v_ab = np.where(d1 != d3, d1 / (d1 - d3), 0.0)
        w_ac = np.where(d2 != d6, d2 / (d2 - d6), 0.0)
        denom_bc = (d4 - d3) + (d5 - d6)
        w_bc = np.where(denom_bc != 0, (d4 - d3) / denom_bc, 0.0)
        denom = va + vb + vc
        v_in = np.where(denom != 0, vb / denom, 0.0)
        w_in = np.where(denom != 0, vc / denom, 0.0)

    shape = np.broadcast_shapes(p.shape, a.shape)
    u_out = np.empty(shape[:-1])
    v_out = np.empty(shape[:-1])
    w_out = np.empty(shape[:-1])
    done = np.zeros(shape[:-1], dtype=bool)

    def assign(mask, u, v, w):
        m = mask & ~done
        u_out[m] = np.broadcast_to(u, m.shape)[m] if np.ndim(u) else u
        v_out[m] = np.broadcast_to(v, m.shape)[m] if np.ndim(v) else v
        w_out[m] = np.broadcast_to(w, m.shape)[m] if np.ndim(w) else w
        done[...] = done | mask

    assign((d1 <= 0) & (d2 <= 0), 1.0, 0.0, 0.0)                      # vertex a
    assign((d3 >= 0) & (d4 <= d3), 0.0, 1.0, 0.0)                     # vertex b
    assign((d6 >= 0) & (d5 <= d6), 0.0, 0.0, 1.0)                     # vertex c
    assign((vc <= 0) & (d1 >= 0) & (d3 <= 0), 1.0 - v_ab, v_ab, 0.0)  # edge ab
    assign((vb <= 0) & (d2 >= 0) & (d6 <= 0), 1.0 - w_ac, 0.0, w_ac)  # edge ac
    assign((va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0),
           0.0, 1.0 - w_bc, w_bc)                                     # edge bc
    assign(np.ones(shape[:-1], dtype=bool), 1.0 - v_in - w_in, v_in, w_in)

    bary = np.stack([u_out, v_out, w_out], axis=-1)
    closest = bary[..., :1] * a + bary[..., 1:2] * b + bary[..., 2:] * c
    return closest, bary


def brute_force_closest(points: np.ndarray, mesh: TriMesh):
    """All-triangles scan: (distances, closest points, face idx, bary)."""
    a, b, c = mesh._corners()
    p = points[:, None, :]
    closest, bary = closest_point_triangles(p, a[None], b[None], c[None])
    d2 = np.sum((p - closest) ** 2, axis=-1)
    best = np.argmin(d2, axis=1)
    rows = np.arange(len(points))
    return (
        np.sqrt(d2[rows, best]),
        closest[rows, best],
        best,
        bary[rows, best],
    )


# ---------------------------------------------------------------------------
# Median-split BVH over triangles.

_LEAF_SIZE = 8


class _BvhNode:
    __slots__ = ("lo", "hi", "left", "right", "start", "count")

    def __init__(self, lo, hi, left=-1, right=-1, start=0, count=0):
        self.lo = lo
        self.hi = hi
        self.left = left
        self.right = right
        self.start = start
        self.count = count


class MeshSdf:
    """Signed distance to a triangle mesh.

    Unsigned distance comes from BVH nearest-triangle queries; the sign from
    the angle-weighted pseudonormal at the closest feature, with a ray-parity
    vote when the pseudonormal test is degenerate.
    """

    def __init__(self, mesh: TriMesh):
        if mesh.is_empty:
            raise ValueError("MeshSdf: mesh has no faces")
        self.mesh = TriMesh(mesh.vertices, mesh.faces, cleanup=True)
        self.ambiguous_count = 0
        self._a, self._b, self._c = self.mesh._corners()
        self._face_normals = self.mesh.face_normals()
        self._build_pseudonormals()
        self._build_bvh()

    # -- precomputation ----------------------------------------------------
    def _build_pseudonormals(self):
        mesh = self.mesh
        n_vert = len(mesh.vertices)
        vert_normals = np.zeros((n_vert, 3))
        edge_normals: dict[tuple[int, int], np.ndarray] = {}
        a, b, c = self._a, self._b, self._c
        for k, tri in enumerate(mesh.faces):
            n = self._face_normals[k]
            corners = (a[k], b[k], c[k])
            for i in range(3):
                p0 = corners[i]
                e1 = corners[(i + 1) % 3] - p0
                e2 = corners[(i + 2) % 3] - p0
                cosang = np.dot(e1, e2) / max(
                    np.linalg.norm(e1) * np.linalg.norm(e2), 1e-300
                )
                angle = np.arccos(np.clip(cosang, -1.0, 1.0))
                vert_normals[tri[i]] += angle * n
            for i, j in ((0, 1), (1, 2), (2, 0)):
                key = (min(tri[i], tri[j]), max(tri[i], tri[j]))
                edge_normals[key] = edge_normals.get(key, 0.0) + n
        self._vert_normals = vert_normals
        self._edge_normals = edge_normals

    def _build_bvh(self):
        centroids = (self._a + self._b + self._c) / 3.0
        lo_all = np.minimum(np.minimum(self._a, self._b), self._c)
        hi_all = np.maximum(np.maximum(self._a, self._b), self._c)
        order = np.arange(len(self.mesh.faces))
        nodes: list[_BvhNode] = []

        def build(idx):
            lo = lo_all[idx].min(axis=0)
            hi = hi_all[idx].max(axis=0)
            node_id = len(nodes)
            nodes.append(_BvhNode(lo, hi))
            if len(idx) <= _LEAF_SIZE:
                start = build.cursor
                order[start : start + len(idx)] = idx
                nodes[node_id].start = start
                nodes[node_id].count = len(idx)
                build.cursor += len(idx)
                return node_id
            axis = int(np.argmax(hi - lo))
            med = np.argsort(centroids[idx, axis])
            half = len(idx) // 2
            nodes[node_id].left = build(idx[med[:half]])
            nodes[node_id].right = build(idx[med[half:]])
            return node_id

        build.cursor = 0
        build(order.copy())
        self._nodes = nodes
        self._order = order

    # -- queries -----------------------------------------------------------
    def _node_dist2(self, node: _BvhNode, p: np.ndarray) -> float:
        d = np.maximum(np.maximum(node.lo - p, 0.0), p - node.hi)
        return float(d @ d)

    def _closest(self, p: np.ndarray):
        """Nearest triangle to one point: (dist2, face idx, closest, bary)."""
        best = (np.inf, -1, None, None)
        stack = [0]
        while stack:
            node = self._nodes[stack.pop()]
            if self._node_dist2(node, p) >= best[0]:
                continue
            if node.count > 0:
                tris = self._order[node.start : node.start + node.count]
                closest, bary = closest_point_triangles(
                    p[None], self._a[tris], self._b[tris], self._c[tris]
                )
                d2 = np.sum((p[None] - closest) ** 2, axis=-1)
                k = int(np.argmin(d2))
                if d2[k] < best[0]:
                    best = (float(d2[k]), int(tris[k]), closest[k], bary[k])
            else:
                children = [self._nodes[node.left], self._nodes[node.right]]
                dists = [self._node_dist2(ch, p) for ch in children]
                near, far = (node.left, node.right)
                if dists[1] < dists[0]:
                    near, far = far, near
                stack.append(far)
                stack.append(near)
        return best

    def _pseudonormal(self, face: int, bary: np.ndarray) -> np.ndarray:
        tri = self.mesh.faces[face]
        zero = bary < 1e-9
        nz = int(zero.sum())
        if nz == 0:
            return self._face_normals[face]
        if nz == 1:
            i, j = [k for k in range(3) if not zero[k]]
            key = (min(tri[i], tri[j]), max(tri[i], tri[j]))
            return np.asarray(self._edge_normals[key])
        vid = tri[int(np.argmax(~zero))]
        return self._vert_normals[vid]

    def _parity_inside(self, p: np.ndarray) -> bool:
        # Irrational-ish direction keeps the ray off edges and vertices.
        d = np.array([0.57735026, 0.57735027, 0.57735028])
        eps = 1e-12
        e1 = self._b - self._a
        e2 = self._c - self._a
        h = np.cross(d[None], e2)
        det = np.einsum("ij,ij->i", e1, h)
        ok = np.abs(det) > eps
        inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
        s = p[None] - self._a
        u = np.einsum("ij,ij->i", s, h) * inv
        q = np.cross(s, e1)
        v = (q @ d) * inv
        t = np.einsum("ij,ij->i", e2, q) * inv
        hits = ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > eps)
        return bool(hits.sum() % 2)

    def sdf(self, points) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        out = np.empty(len(points))
        for i, p in enumerate(points):
            d2, face, closest, bary = self._closest(p)
            dist = np.sqrt(d2)
            diff = p - closest
            normal = self._pseudonormal(face, bary)
            dot = float(diff @ normal)
            if abs(dot) <= 1e-12 * max(dist, 1e-12) * max(np.linalg.norm(normal), 1e-12) \
                    and dist > 1e-12:
                self.ambiguous_count += 1
                inside = self._parity_inside(p)
                out[i] = -dist if inside else dist
            else:
                out[i] = dist if dot >= 0 else -dist
        return out

    def surface_samples(self, count: int, rng: Rng) -> np.ndarray:
        return self.mesh.sample_surface(count, rng)[0]


def mesh_sdf(mesh: TriMesh, points) -> np.ndarray:
    """One-shot signed distance of points to a mesh."""
    return MeshSdf(mesh).sdf(points)
