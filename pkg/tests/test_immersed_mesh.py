"""Tests for octree trimming, midpoint tessellation and face-set assembly."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scanflow.immersed_mesh import (
    build_immersed_mesh,
    export_immersed_vtk,
    mosaic_element,
    refine_geometry,
    trim_element,
)
from scanflow.scan_io import GrayscaleGrid
from scanflow.segmentation import GeometryError, smooth
from scanflow.spline_basis import HierarchicalMesh, build_space, uniform_mesh


def _segment_set(tess, digits=14):
    out = set()
    for seg, _ in tess.boundary:
        pair = tuple(sorted((tuple(np.round(seg[0], digits)),
                             tuple(np.round(seg[1], digits)))))
        out.add(pair)
    return out


def _disk(p, r=0.4, c=(0.5, 0.5)):
    p = np.atleast_2d(p)
    return r ** 2 - (p[:, 0] - c[0]) ** 2 - (p[:, 1] - c[1]) ** 2


class TestMosaic:
    def test_horizontal_cut(self):
        # linear field 1 - 4y: zero line at y = 0.25, bottom quarter inside
        v = np.array([[1.0, -3.0], [1.0, -3.0]])
        t = mosaic_element(v)
        assert t.status == "cut"
        assert np.allclose(t.midpoint, [0.5, 0.25], atol=1e-14)
        assert t.inside_area() == pytest.approx(0.25, abs=1e-14)
        assert _segment_set(t) == {(((0.0, 0.25)), (0.5, 0.25)),
                                   ((0.5, 0.25), (1.0, 0.25))}
        for _, n in t.boundary:
            assert np.allclose(n, [0.0, 1.0], atol=1e-12)  # outward = upward

    def test_complement_shares_interface(self):
        v = np.array([[1.0, -3.0], [1.0, -3.0]])
        t = mosaic_element(v)
        tn = mosaic_element(-v)
        assert tn.inside_area() == pytest.approx(0.75, abs=1e-14)
        assert _segment_set(tn) == _segment_set(t)

    def test_symmetric_cut(self):
        v = np.array([[1.0, -1.0], [1.0, -1.0]])
        t = mosaic_element(v)
        assert np.allclose(t.midpoint, [0.5, 0.5], atol=1e-14)
        assert t.inside_area() == pytest.approx(0.5, abs=1e-14)

    def test_uniform_signs(self):
        full = mosaic_element(np.ones((2, 2)))
        assert full.status == "full"
        assert full.inside_area() == pytest.approx(1.0, abs=1e-15)
        assert not full.boundary
        empty = mosaic_element(-np.ones((2, 2)))
        assert empty.status == "empty"
        assert not empty.triangles

    def test_side_edges_cover_inside_sides(self):
        v = np.array([[1.0, -3.0], [1.0, -3.0]])
        t = mosaic_element(v)
        bottom = t.side_edges[(1, 0)]
        assert len(bottom) == 1 and np.linalg.norm(bottom[0][1] - bottom[0][0]) == 1.0
        left = t.side_edges[(0, 0)]
        assert np.linalg.norm(left[0][1] - left[0][0]) == pytest.approx(0.25)
        assert (1, 1) not in t.side_edges  # top side is fully outside

    def test_triangles_counterclockwise(self):
        rng = np.random.default_rng(5)
        for _ in range(200):
            v = rng.uniform(-1, 1, (2, 2))
            v[np.abs(v) < 1e-3] = 1e-3
            t = mosaic_element(v)
            for tri in t.triangles:
                (x0, y0), (x1, y1), (x2, y2) = tri
                assert (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0) > 0

    def test_complementarity_random(self):
        # inside and complement tile the cell; interfaces coincide
        rng = np.random.default_rng(42)
        for _ in range(10_000):
            v = rng.uniform(-1, 1, (2, 2))
            v[np.abs(v) < 1e-3] = np.sign(v[np.abs(v) < 1e-3] + 0.5) * 1e-3
            t = mosaic_element(v)
            tn = mosaic_element(-v)
            assert abs(t.inside_area() + tn.inside_area() - 1.0) < 1e-12
            assert _segment_set(t) == _segment_set(tn)

    @given(st.lists(st.floats(min_value=1e-3, max_value=1.0), min_size=4, max_size=4),
           st.lists(st.booleans(), min_size=4, max_size=4))
    @settings(max_examples=300, deadline=None)
    def test_complementarity_property(self, mags, signs):
        v = np.array([m if s else -m for m, s in zip(mags, signs)]).reshape(2, 2)
        t = mosaic_element(v)
        tn = mosaic_element(-v)
        assert abs(t.inside_area() + tn.inside_area() - 1.0) < 1e-12
        assert _segment_set(t) == _segment_set(tn)

    def test_normals_outward_random(self):
        # bilinear interpolant decreases along +n at each segment midpoint
        rng = np.random.default_rng(9)
        for _ in range(500):
            v = rng.uniform(-1, 1, (2, 2))
            v[np.abs(v) < 1e-3] = 1e-3
            t = mosaic_element(v)
            for seg, n in t.boundary:
                m = 0.5 * (seg[0] + seg[1])
                eps = 1e-7

                def bilin(p):
                    return ((1 - p[0]) * (1 - p[1]) * v[0, 0] + p[0] * (1 - p[1]) * v[1, 0]
                            + (1 - p[0]) * p[1] * v[0, 1] + p[0] * p[1] * v[1, 1])

                assert bilin(m + eps * n) < bilin(m - eps * n)


class TestTrim:
    def test_all_positive_keeps_element(self):
        p = trim_element(np.ones((9, 9)), 3)
        assert len(p.subcells) == 1
        assert p.subcells[0].kind == "inside"
        assert p.subcells[0].octlevel == 0
        assert p.inside_volume() == 1.0

    def test_all_nonpositive_discards(self):
        assert trim_element(-np.ones((9, 9)), 3).is_empty
        assert trim_element(np.zeros((5, 5)), 2).is_empty  # 0 counts as outside

    def test_subcell_volumes_bounded(self):
        n = 2 ** 4 + 1
        xs = np.linspace(0, 1, n)
        X, Y = np.meshgrid(xs, xs, indexing="ij")
        p = trim_element(_disk(np.column_stack([X.ravel(), Y.ravel()])).reshape(n, n), 4)
        total = sum(sc.volume for sc in p.subcells)
        assert total <= 1.0 + 1e-12
        assert 0.0 < p.inside_volume() < total

    @pytest.mark.parametrize("depth", [1, 2, 3, 4])
    def test_linear_level_set_exact(self, depth):
        # every leaf cut is linear, so the recovered volume is exact
        n = 2 ** depth + 1
        xs = np.linspace(0, 1, n)
        X, Y = np.meshgrid(xs, xs, indexing="ij")
        vals = (X - 0.37).reshape(n, n)
        p = trim_element(vals, depth)
        assert p.inside_volume() == pytest.approx(0.63, abs=1e-12)

    def test_disk_area_convergence(self):
        errs = []
        for rho in range(2, 7):
            n = 2 ** rho + 1
            xs = np.linspace(0, 1, n)
            X, Y = np.meshgrid(xs, xs, indexing="ij")
            vals = _disk(np.column_stack([X.ravel(), Y.ravel()])).reshape(n, n)
            errs.append(abs(trim_element(vals, rho).inside_volume() - np.pi * 0.16))
        slope = np.polyfit(range(2, 7), np.log2(errs), 1)[0]
        assert -slope >= 1.8

    def test_validation(self):
        with pytest.raises(ValueError, match="samples"):
            trim_element(np.ones((4, 4)), 2)
        with pytest.raises(ValueError, match="depth"):
            trim_element(np.ones((2, 2)), -1)
        with pytest.raises(ValueError, match="finite"):
            trim_element(np.full((3, 3), np.nan), 1)


@pytest.fixture(scope="module")
def disk_mesh():
    mesh = HierarchicalMesh(uniform_mesh([0, 0], [1, 1], (8, 8)))
    return build_immersed_mesh(_disk, mesh, 3)


class TestBuildImmersedMesh:
    def test_constant_positive(self):
        mesh = HierarchicalMesh(uniform_mesh([0, 0], [1, 1], (4, 4)))
        im = build_immersed_mesh(lambda p: np.ones(len(np.atleast_2d(p))), mesh, 2)
        assert len(im.elements) == 16
        assert not im.crossed
        assert not im.ghost
        assert not im.boundary_faces
        assert len(im.skeleton) == 24  # 2 * 4 * 3 interior gridline faces
        assert im.inside_volume() == pytest.approx(1.0, abs=1e-15)
        # the whole box boundary is physical boundary here
        assert sum(f.length for f in im.outer_faces) == pytest.approx(4.0)

    def test_crossed_count_matches_circle_oracle(self, disk_mesh):
        hits = 0
        c = np.array([0.5, 0.5])
        for i in range(8):
            for j in range(8):
                lo = np.array([i, j]) / 8
                hi = lo + 1 / 8
                dmin = np.linalg.norm(np.clip(c, lo, hi) - c)
                dmax = max(np.linalg.norm([x, y] - c)
                           for x in (lo[0], hi[0]) for y in (lo[1], hi[1]))
                if dmin <= 0.4 <= dmax:
                    hits += 1
        assert len(disk_mesh.crossed) == hits

    def test_ghost_is_skeleton_subset(self, disk_mesh):
        assert all(any(f is g for g in disk_mesh.skeleton) for f in disk_mesh.ghost)
        crossed = disk_mesh.crossed
        for f in disk_mesh.skeleton:
            touches = f.left in crossed or f.right in crossed
            assert touches == any(f is g for g in disk_mesh.ghost)

    def test_skeleton_excludes_outer_and_dropped(self, disk_mesh):
        retained = set(disk_mesh.elements)
        for f in disk_mesh.skeleton:
            assert 0.0 < f.coord < 1.0
            assert f.left in retained and f.right in retained

    def test_boundary_faces_live_on_cut_elements(self, disk_mesh):
        assert disk_mesh.boundary_faces
        assert all(f.element in disk_mesh.crossed for f in disk_mesh.boundary_faces)
        assert not disk_mesh.outer_faces  # circle does not touch the box sides

    def test_boundary_normals_outward(self, disk_mesh):
        for f in disk_mesh.boundary_faces:
            m = f.midpoint
            eps = 1e-6
            assert _disk(m + eps * f.normal)[0] < _disk(m - eps * f.normal)[0]

    def test_boundary_length_and_volume(self, disk_mesh):
        assert disk_mesh.inside_volume() == pytest.approx(np.pi * 0.16, abs=5e-4)
        total = sum(f.length for f in disk_mesh.boundary_faces)
        assert total == pytest.approx(2 * np.pi * 0.4, rel=5e-3)

    def test_box_mismatch_raises(self):
        grid = GrayscaleGrid(values=np.ones((4, 4)), spacing=(0.25, 0.25),
                             origin=(0.0, 0.0))
        field = smooth(grid, build_space(uniform_mesh([0, 0], [1, 1], (4, 4)), 1))
        other = HierarchicalMesh(uniform_mesh([0, 0], [2, 2], (4, 4)))
        with pytest.raises(GeometryError):
            build_immersed_mesh(field, other, 2)

    def test_spline_field_matches_callable(self):
        # a spline level set and the equivalent callable trim identically
        grid = GrayscaleGrid(values=np.ones((8, 8)) * 0.2, spacing=(0.125, 0.125),
                             origin=(0.0, 0.0))
        space = build_space(uniform_mesh([0, 0], [1, 1], (8, 8)), 2)
        field = smooth(grid, space).with_threshold(0.5)  # constant 0.2 - 0.5 < 0
        mesh = HierarchicalMesh(uniform_mesh([0, 0], [1, 1], (8, 8)))
        im = build_immersed_mesh(field, mesh, 2)
        assert not im.elements  # everything outside

    def test_refine_geometry_reuses_partitions(self, disk_mesh):
        elem = sorted(disk_mesh.crossed)[0]
        finer = disk_mesh.mesh.refine({elem})
        im2 = refine_geometry(disk_mesh, finer)
        survivors = [e for e in im2.partitions if e in disk_mesh.partitions]
        assert survivors
        assert all(im2.partitions[e] is disk_mesh.partitions[e] for e in survivors)
        assert elem not in im2.partitions
        # children sample the frozen level set at their own lattice
        kids = [e for e in im2.partitions if e[0] == 1]
        assert kids
        assert im2.inside_volume() == pytest.approx(np.pi * 0.16, abs=5e-4)

    def test_cross_level_faces_split_to_finer_side(self, disk_mesh):
        elem = sorted(disk_mesh.crossed)[0]
        im2 = refine_geometry(disk_mesh, disk_mesh.mesh.refine({elem}))
        jumps = [f for f in im2.skeleton if f.left[0] != f.right[0]]
        assert jumps
        for f in jumps:
            fine_level = max(f.left[0], f.right[0])
            h_fine = 1 / 8 / 2 ** fine_level
            assert f.length == pytest.approx(h_fine, abs=1e-12)
            assert f.h_F == pytest.approx(h_fine, abs=1e-12)

    def test_vtk_export(self, disk_mesh, tmp_path):
        out = tmp_path / "cutmesh.vtk"
        export_immersed_vtk(disk_mesh, out)
        text = out.read_text()
        assert "POLYDATA" in text
        assert "POLYGONS" in text
        assert "LINES" in text
