import numpy as np
import pytest

from gaussfields import (
    BoxSdf,
    CapsuleSdf,
    Rng,
    SphereSdf,
    TorusSdf,
    UnionSdf,
    analytic_sdf,
    chamfer_l1,
    make_oracle,
    marching_cubes,
    mesh_chamfer_l1,
    normal_metrics,
    volumetric_iou,
)
from gaussfields.mesh import TriMesh


class TestAnalyticSdf:
    def test_sphere_center(self):
        s = SphereSdf((0.5, 0.5, 0.5), 0.3)
        assert analytic_sdf(s, [[0.5, 0.5, 0.5]])[0] == pytest.approx(-0.3)

    def test_sphere_outside(self):
        s = SphereSdf((0.5, 0.5, 0.5), 0.3)
        assert analytic_sdf(s, [[1.0, 0.5, 0.5]])[0] == pytest.approx(0.2)

    def test_torus_axis_point_vs_brute_force(self):
        t = TorusSdf((0.5, 0.5, 0.5), 0.3, 0.1)
        p = np.array([[0.5, 0.5, 0.5]])
        assert t.sdf(p)[0] == pytest.approx(0.2, abs=1e-12)
        # brute force: nearest of a dense surface sampling
        surf = t.surface_samples(10 ** 6, Rng(0))
        nearest = np.min(np.linalg.norm(surf - p, axis=1))
        assert abs(t.sdf(p)[0] - nearest) < 1e-4

    def test_box_inside_and_outside(self):
        b = BoxSdf((0.5, 0.5, 0.5), (0.2, 0.2, 0.2))
        assert b.sdf([[0.5, 0.5, 0.5]])[0] == pytest.approx(-0.2)
        assert b.sdf([[0.9, 0.5, 0.5]])[0] == pytest.approx(0.2)
        # corner distance
        d = b.sdf([[0.8, 0.8, 0.8]])[0]
        assert d == pytest.approx(np.sqrt(3) * 0.1, rel=1e-12)

    def test_capsule_midpoint(self):
        c = CapsuleSdf((0.4, 0.5, 0.5), (0.6, 0.5, 0.5), 0.1)
        assert c.sdf([[0.5, 0.5, 0.5]])[0] == pytest.approx(-0.1)
        assert c.sdf([[0.8, 0.5, 0.5]])[0] == pytest.approx(0.1)

    def test_union_is_min(self):
        a = SphereSdf((0.3, 0.5, 0.5), 0.1)
        b = SphereSdf((0.7, 0.5, 0.5), 0.1)
        u = UnionSdf([a, b])
        p = Rng(1).uniform(size=(50, 3))
        assert np.array_equal(u.sdf(p), np.minimum(a.sdf(p), b.sdf(p)))

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError, match="unknown shape kind"):
            make_oracle({"kind": "donut"})

    def test_make_oracle_sphere(self):
        s = make_oracle({"kind": "sphere", "center": [0.5, 0.5, 0.5], "radius": 0.25})
        assert isinstance(s, SphereSdf)
        assert s.radius == 0.25

    @pytest.mark.parametrize("oracle", [
        SphereSdf((0.5, 0.5, 0.5), 0.3),
        TorusSdf((0.5, 0.5, 0.5), 0.3, 0.1),
        BoxSdf((0.5, 0.5, 0.5), (0.25, 0.2, 0.15)),
        CapsuleSdf((0.35, 0.5, 0.5), (0.65, 0.5, 0.5), 0.12),
    ])
    def test_surface_samples_lie_on_surface(self, oracle):
        pts = oracle.surface_samples(2000, Rng(3))
        assert np.max(np.abs(oracle.sdf(pts))) < 1e-9


class TestMarchingCubes:
    def test_constant_positive_field_empty_mesh(self):
        mesh = marching_cubes(lambda p: np.ones(len(p)), 16)
        assert mesh.is_empty

    def test_sphere_area_within_two_percent(self):
        s = SphereSdf((0.5, 0.5, 0.5), 0.3)
        mesh = marching_cubes(s.sdf, 128)
        expected = 4 * np.pi * 0.3 ** 2
        assert abs(mesh.area() - expected) / expected < 0.02

    def test_sphere_mesh_watertight(self):
        s = SphereSdf((0.5, 0.5, 0.5), 0.3)
        assert marching_cubes(s.sdf, 64).is_watertight()

    def test_sign_flip_preserves_vertices_flips_orientation(self):
        s = SphereSdf((0.5, 0.5, 0.5), 0.25)
        m1 = marching_cubes(s.sdf, 32)
        m2 = marching_cubes(lambda p: -s.sdf(p), 32)
        v1 = set(map(tuple, np.round(m1.vertices, 6)))
        v2 = set(map(tuple, np.round(m2.vertices, 6)))
        assert v1 == v2

        def signed_volume(m):
            a, b, c = m._corners()
            return np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0

        assert signed_volume(m1) * signed_volume(m2) < 0

    def test_low_resolution_rejected(self):
        with pytest.raises(ValueError):
            marching_cubes(lambda p: np.ones(len(p)), 7)

    def test_iso_offset_shifts_sphere_radius(self):
        s = SphereSdf((0.5, 0.5, 0.5), 0.25)
        mesh = marching_cubes(s.sdf, 96, iso=0.05)
        radii = np.linalg.norm(mesh.vertices - 0.5, axis=1)
        assert np.mean(radii) == pytest.approx(0.30, abs=2.0 / 95)


class TestChamfer:
    def test_identical_sets_zero(self, rng):
        pts = rng.uniform(size=(500, 3))
        assert chamfer_l1(pts, pts) == 0.0

    def test_parallel_planes_offset(self, rng):
        n = 20000
        a = np.column_stack([rng.uniform(size=n), rng.uniform(size=n), np.zeros(n)])
        b = a.copy()
        b[:, 2] = 0.05
        got = chamfer_l1(a, b)
        assert abs(got - 0.05) / 0.05 < 0.05

    def test_symmetry(self, rng):
        a = rng.uniform(size=(300, 3))
        b = rng.uniform(size=(400, 3))
        assert chamfer_l1(a, b) == pytest.approx(chamfer_l1(b, a), rel=1e-12)

    def test_empty_mesh_rejected(self):
        s = SphereSdf()
        mesh = marching_cubes(s.sdf, 32)
        with pytest.raises(ValueError, match="no surface extracted"):
            mesh_chamfer_l1(mesh, TriMesh.empty())


def _plane_mesh(normal_axis: int, offset: float, flip=False) -> TriMesh:
    # Unit square in the plane axis=offset.
    axes = [a for a in range(3) if a != normal_axis]
    corners = np.zeros((4, 3))
    uv = np.array([[0, 0], [1, 0], [1, 1], [0, 1]], dtype=np.float64)
    corners[:, axes[0]] = uv[:, 0]
    corners[:, axes[1]] = uv[:, 1]
    corners[:, normal_axis] = offset
    faces = np.array([[0, 1, 2], [0, 2, 3]])
    if flip:
        faces = faces[:, ::-1]
    return TriMesh(corners, faces)


class TestNormalMetrics:
    def test_identical_meshes(self):
        s = SphereSdf((0.5, 0.5, 0.5), 0.3)
        mesh = marching_cubes(s.sdf, 48)
        nc, nae = normal_metrics(mesh, mesh, samples=5000)
        assert nc == pytest.approx(1.0, abs=1e-9)
        assert nae == pytest.approx(0.0, abs=1e-6)

    def test_perpendicular_planes(self):
        a = _plane_mesh(2, 0.5)
        b = _plane_mesh(0, 0.5)
        nc, nae = normal_metrics(a, b, samples=4000)
        assert nc == pytest.approx(0.0, abs=1e-9)
        assert nae == pytest.approx(90.0, abs=1e-6)

    def test_sphere_vs_finer_tessellation(self):
        s = SphereSdf((0.5, 0.5, 0.5), 0.3)
        coarse = marching_cubes(s.sdf, 64)
        fine = marching_cubes(s.sdf, 128)
        nc, _ = normal_metrics(coarse, fine, samples=20000)
        assert nc >= 0.99


class TestVolumetricIou:
    def test_identical_fields(self):
        s = SphereSdf((0.5, 0.5, 0.5), 0.3)
        assert volumetric_iou(s.sdf, s.sdf, 64) == 1.0

    def test_disjoint_spheres(self):
        a = SphereSdf((0.25, 0.5, 0.5), 0.1)
        b = SphereSdf((0.75, 0.5, 0.5), 0.1)
        assert volumetric_iou(a.sdf, b.sdf, 64) == 0.0

    def test_both_empty(self):
        pos = lambda p: np.ones(len(p))
        assert volumetric_iou(pos, pos, 32) == 1.0

    @pytest.mark.slow
    def test_concentric_spheres_volume_ratio(self):
        a = SphereSdf((0.5, 0.5, 0.5), 0.2)
        b = SphereSdf((0.5, 0.5, 0.5), 0.3)
        got = volumetric_iou(a.sdf, b.sdf, 256)
        assert got == pytest.approx((0.2 / 0.3) ** 3, abs=0.01)


class TestRigidInvariance:
    def test_metrics_invariant_under_rigid_transform(self):
        rng = Rng(11)
        s1 = SphereSdf((0.45, 0.5, 0.5), 0.22)
        s2 = SphereSdf((0.55, 0.5, 0.5), 0.25)
        m1 = marching_cubes(s1.sdf, 48)
        m2 = marching_cubes(s2.sdf, 48)

        # random rotation via QR
        q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
        if np.linalg.det(q) < 0:
            q[:, 0] *= -1
        t = rng.uniform(-0.1, 0.1, size=3)
        r1 = m1.transformed(q, t)
        r2 = m2.transformed(q, t)

        cd0 = mesh_chamfer_l1(m1, m2, samples=20000, rng=Rng(5))
        cd1 = mesh_chamfer_l1(r1, r2, samples=20000, rng=Rng(5))
        assert cd1 == pytest.approx(cd0, rel=0.02)

        nc0, nae0 = normal_metrics(m1, m2, samples=20000, rng=Rng(5))
        nc1, nae1 = normal_metrics(r1, r2, samples=20000, rng=Rng(5))
        assert nc1 == pytest.approx(nc0, abs=0.01)
        assert nae1 == pytest.approx(nae0, abs=1.0)
