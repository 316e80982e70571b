"""Immersed analysis geometry from a level set over a background mesh.

Elements crossed by the zero contour are bisected octree-fashion; mixed leaf
cells receive a midpoint tessellation whose fan triangles cover the inside
fragment and whose interface segments approximate the zero contour.  On top
of the per-element partitions the module assembles the face sets needed by a
stabilized immersed discretization: the interior skeleton, the ghost subset
next to crossed elements, and the physical boundary (interface segments plus
the covered part of the outer box boundary).
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .segmentation import GeometryError
from .spline_basis import HierarchicalMesh, RectMesh

# relative tolerance below which tessellation fragments are dropped
_DEGEN = 1e-14

MAX_OCTREE_DEPTH = 6


def _tri_area(tri):
    (x0, y0), (x1, y1), (x2, y2) = tri
    return 0.5 * ((x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0))


@dataclass(frozen=True, eq=False)
class BoundaryFace:
    """Oriented boundary segment owned by one background element."""

    a: np.ndarray
    b: np.ndarray
    normal: np.ndarray
    element: tuple | None
    kind: str  # "immersed" (zero contour) or "outer" (box boundary)

    @property
    def midpoint(self):
        return 0.5 * (self.a + self.b)

    @property
    def length(self):
        return float(np.linalg.norm(self.b - self.a))


@dataclass(frozen=True, eq=False)
class SkeletonFace:
    """Interior face between two active elements, stored at the finer side.

    The normal axis points from `left` to `right`; h_F is the smaller of the
    two adjacent element sizes normal to the face.
    """

    axis: int
    coord: float
    span: tuple
    left: tuple
    right: tuple
    h_F: float

    @property
    def length(self):
        return self.span[1] - self.span[0]

    @property
    def midpoint(self):
        m = [0.0, 0.0]
        m[self.axis] = self.coord
        m[1 - self.axis] = 0.5 * (self.span[0] + self.span[1])
        return np.array(m)

    @property
    def normal(self):
        n = np.zeros(2)
        n[self.axis] = 1.0
        return n

    def endpoints(self):
        a = [0.0, 0.0]
        b = [0.0, 0.0]
        a[self.axis] = b[self.axis] = self.coord
        a[1 - self.axis], b[1 - self.axis] = self.span
        return np.array(a), np.array(b)


@dataclass
class Tessellation:
    """Midpoint tessellation of one leaf cell.

    triangles cover the inside fragment (counterclockwise); boundary pairs
    (segment, outward unit normal) approximate the zero contour; side_edges
    maps (axis, side) to the inside pieces of the cell's own sides.
    """

    status: str  # "cut", "full" or "empty"
    triangles: list = dc_field(default_factory=list)
    boundary: list = dc_field(default_factory=list)
    midpoint: np.ndarray | None = None
    side_edges: dict = dc_field(default_factory=dict)

    def inside_area(self):
        return float(sum(_tri_area(t) for t in self.triangles))


@dataclass(frozen=True, eq=False)
class SubCell:
    """Axis-aligned box of the octree partition; cut leaves carry a mosaic."""

    kind: str  # "inside" or "cut"
    octlevel: int
    lo: np.ndarray
    hi: np.ndarray
    tess: Tessellation | None = None

    @property
    def volume(self):
        return float(np.prod(self.hi - self.lo))

    def inside_volume(self):
        if self.kind == "inside":
            return self.volume
        return self.tess.inside_area()


@dataclass
class Partition:
    """Octree decomposition of one element into inside boxes and cut leaves."""

    element: tuple | None
    lo: np.ndarray
    hi: np.ndarray
    depth: int
    subcells: list

    def inside_volume(self):
        return float(sum(sc.inside_volume() for sc in self.subcells))

    @property
    def has_cut(self):
        return any(sc.kind == "cut" for sc in self.subcells)

    @property
    def is_empty(self):
        return not self.subcells

    def boundary_pairs(self):
        for sc in self.subcells:
            if sc.kind == "cut":
                yield from sc.tess.boundary


def _edge_mosaic(a, b, pa, pb):
    """Inside piece and zero point of one edge; vertex value 0 is outside."""
    if a > 0 and b > 0:
        return (pa, pb), None
    if a > 0 or b > 0:
        t = a / (a - b)
        z = pa + t * (pb - pa)
        piece = (pa, z) if a > 0 else (z, pb)
        return piece, z
    return None, None


def _full_tess(lo, hi):
    p00 = np.array([lo[0], lo[1]])
    p10 = np.array([hi[0], lo[1]])
    p11 = np.array([hi[0], hi[1]])
    p01 = np.array([lo[0], hi[1]])
    return Tessellation(
        status="full",
        triangles=[np.array([p00, p10, p11]), np.array([p00, p11, p01])],
        side_edges={(1, 0): [np.array([p00, p10])], (0, 1): [np.array([p10, p11])],
                    (1, 1): [np.array([p11, p01])], (0, 0): [np.array([p01, p00])]})


def _bilinear(v, lo, hi, p):
    s = (p[0] - lo[0]) / (hi[0] - lo[0])
    t = (p[1] - lo[1]) / (hi[1] - lo[1])
    return ((1 - s) * (1 - t) * v[0, 0] + s * (1 - t) * v[1, 0]
            + (1 - s) * t * v[0, 1] + s * t * v[1, 1])


def mosaic_element(values, dim=2, lo=None, hi=None) -> Tessellation:
    """Midpoint tessellation of a single cell from its vertex values.

    Intersected edges are truncated at linearly interpolated zero points; the
    interface midpoint is the mean of the zero points on sign-changing
    centroid-vertex diagonals (centroid value = mean of vertex values), the
    inside fragment is the fan over the truncated edges.  Negating the values
    yields the complementary fragment with the identical interface.
    """
    if dim != 2:
        raise NotImplementedError("midpoint tessellation is implemented in 2D")
    v = np.asarray(values, dtype=float).reshape(2, 2)
    if not np.all(np.isfinite(v)):
        raise ValueError("level-set values must be finite")
    lo = np.array([0.0, 0.0]) if lo is None else np.asarray(lo, dtype=float)
    hi = np.array([1.0, 1.0]) if hi is None else np.asarray(hi, dtype=float)

    if np.all(v > 0):
        return _full_tess(lo, hi)

    p00 = np.array([lo[0], lo[1]])
    p10 = np.array([hi[0], lo[1]])
    p11 = np.array([hi[0], hi[1]])
    p01 = np.array([lo[0], hi[1]])
    # counterclockwise side walk; key = (normal axis, side)
    sides = [((1, 0), v[0, 0], v[1, 0], p00, p10),
             ((0, 1), v[1, 0], v[1, 1], p10, p11),
             ((1, 1), v[1, 1], v[0, 1], p11, p01),
             ((0, 0), v[0, 1], v[0, 0], p01, p00)]
    pieces = []
    side_edges = {}
    zeros = []
    for key, a, b, pa, pb in sides:
        piece, z = _edge_mosaic(a, b, pa, pb)
        if piece is not None:
            pieces.append(piece)
            side_edges.setdefault(key, []).append(np.array(piece))
        if z is not None:
            zeros.append(z)

    center = 0.5 * (lo + hi)
    cval = float(v.mean())
    diag_zeros = []
    for pq, vq in ((p00, v[0, 0]), (p10, v[1, 0]), (p11, v[1, 1]), (p01, v[0, 1])):
        if (cval > 0) != (vq > 0):
            t = cval / (cval - vq)
            diag_zeros.append(center + t * (pq - center))

    if diag_zeros:
        midpoint = np.mean(diag_zeros, axis=0)
    elif zeros:
        midpoint = np.mean(zeros, axis=0)
    else:
        # degenerate: no crossing detected anywhere, classify by majority sign
        if np.any(v > 0):
            return _full_tess(lo, hi)
        return Tessellation(status="empty")

    cell_area = float(np.prod(hi - lo))
    diag = float(np.linalg.norm(hi - lo))
    triangles = [np.array([qa, qb, midpoint]) for qa, qb in pieces]
    triangles = [t for t in triangles if _tri_area(t) > _DEGEN * cell_area]

    boundary = []
    delta = 1e-3 * min(hi - lo)
    for z in zeros:
        tang = midpoint - z
        nrm = np.linalg.norm(tang)
        if nrm <= _DEGEN * diag:
            continue
        n = np.array([tang[1], -tang[0]]) / nrm
        mid = 0.5 * (z + midpoint)
        if _bilinear(v, lo, hi, mid + delta * n) > _bilinear(v, lo, hi, mid - delta * n):
            n = -n
        boundary.append((np.array([z, midpoint]), n))

    return Tessellation(status="cut", triangles=triangles, boundary=boundary,
                        midpoint=midpoint, side_edges=side_edges)


def _trim_rec(vals, lo, hi, octlevel, depth, out):
    if np.all(vals > 0):
        out.append(SubCell(kind="inside", octlevel=octlevel, lo=lo, hi=hi))
        return
    if not np.any(vals > 0):
        return
    if octlevel == depth:
        tess = mosaic_element(vals, 2, lo, hi)
        if tess.status == "full":
            out.append(SubCell(kind="inside", octlevel=octlevel, lo=lo, hi=hi))
        elif tess.status == "cut" and tess.triangles:
            out.append(SubCell(kind="cut", octlevel=octlevel, lo=lo, hi=hi, tess=tess))
        return
    h = (vals.shape[0] - 1) // 2
    mid = 0.5 * (lo + hi)
    for i in (0, 1):
        for j in (0, 1):
            sub = vals[i * h:i * h + h + 1, j * h:j * h + h + 1]
            slo = np.array([lo[0] if i == 0 else mid[0], lo[1] if j == 0 else mid[1]])
            shi = np.array([mid[0] if i == 0 else hi[0], mid[1] if j == 0 else hi[1]])
            _trim_rec(sub, slo, shi, octlevel + 1, depth, out)


def trim_element(values, depth, dim=2, lo=None, hi=None, element=None) -> Partition:
    """Octree partition of one element from level-set samples.

    values holds samples at the (2^depth + 1)^dim lattice vertices of the
    element, values[i, j] = f(x_i, y_j).  Boxes whose samples are all positive
    are kept whole, all-nonpositive boxes are dropped, mixed boxes bisect
    until single lattice cells are tessellated.
    """
    if dim != 2:
        raise NotImplementedError("octree trimming is implemented in 2D")
    if depth < 0:
        raise ValueError("depth must be >= 0")
    if depth > MAX_OCTREE_DEPTH:
        raise ValueError(f"depth {depth} exceeds the supported maximum "
                         f"{MAX_OCTREE_DEPTH}")
    n = 2 ** depth + 1
    vals = np.asarray(values, dtype=float)
    if vals.shape != (n,) * dim:
        raise ValueError(f"expected {(n,) * dim} samples, got {vals.shape}")
    if not np.all(np.isfinite(vals)):
        raise ValueError("level-set values must be finite")
    lo = np.zeros(dim) if lo is None else np.asarray(lo, dtype=float)
    hi = np.ones(dim) if hi is None else np.asarray(hi, dtype=float)
    subcells = []
    _trim_rec(vals, lo, hi, 0, depth, subcells)
    return Partition(element=element, lo=lo, hi=hi, depth=depth, subcells=subcells)


@dataclass
class ImmersedMesh:
    """Background mesh restricted to the physical domain, with face sets."""

    mesh: HierarchicalMesh
    field: object
    depth: int
    elements: list
    partitions: dict
    classification: dict
    crossed: set
    skeleton: list
    ghost: list
    boundary_faces: list
    outer_faces: list

    def partition(self, element):
        return self.partitions[element]

    def inside_volume(self):
        return float(sum(p.inside_volume() for p in self.partitions.values()))

    def all_boundary_faces(self):
        return list(self.boundary_faces) + list(self.outer_faces)


def _lattice(lo, hi, depth):
    n = 2 ** depth + 1
    xs = np.linspace(lo[0], hi[0], n)
    ys = np.linspace(lo[1], hi[1], n)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    return np.column_stack([gx.ravel(), gy.ravel()])


def _eval_on_box(field, lo, hi, pts):
    space = getattr(field, "space", None)
    if space is not None:
        lev, cell = space.mesh.find_cell(0.5 * (lo + hi))
        clo, chi = space.mesh.cell_box(lev, cell)
        tol = 1e-12 * np.max(chi - clo)
        if np.all(clo <= lo + tol) and np.all(hi <= chi + tol):
            return field.values_on_cell(lev, cell, pts)
    return np.asarray(field(pts), dtype=float)


def _skeleton_faces(mesh, retained, crossed):
    skeleton, ghost = [], []
    for lev, cell in retained:
        clo, chi = mesh.cell_box(lev, cell)
        for axis in range(2):
            nb = list(cell)
            nb[axis] += 1
            if nb[axis] >= mesh.nelems(lev)[axis]:
                continue  # outer box boundary is never skeleton
            nb = tuple(nb)
            cov = mesh.covering_active(lev, nb)
            if cov is not None:
                neighbors = [cov]
            else:
                neighbors = mesh._active_descendants_on_face(lev, nb, axis, 0)
            for nlev, ncell in sorted(neighbors):
                if (nlev, ncell) not in retained:
                    continue
                nlo, nhi = mesh.cell_box(nlev, ncell)
                t = 1 - axis
                span = (float(max(clo[t], nlo[t])), float(min(chi[t], nhi[t])))
                if span[1] - span[0] <= 0:
                    continue
                face = SkeletonFace(axis=axis, coord=float(chi[axis]), span=span,
                                    left=(lev, cell), right=(nlev, ncell),
                                    h_F=float(min(chi[axis] - clo[axis],
                                                  nhi[axis] - nlo[axis])))
                skeleton.append(face)
                if face.left in crossed or face.right in crossed:
                    ghost.append(face)
    return skeleton, ghost


def _outer_faces(mesh, element, part):
    """Inside pieces of the element's sides lying on the root box boundary."""
    rlo, rhi = mesh.root.box
    lev, cell = element
    clo, chi = mesh.cell_box(lev, cell)
    tol = 1e-12 * np.max(rhi - rlo)
    faces = []
    for axis in range(2):
        for side, coord, onroot in ((0, clo[axis], abs(clo[axis] - rlo[axis]) < tol),
                                    (1, chi[axis], abs(chi[axis] - rhi[axis]) < tol)):
            if not onroot:
                continue
            normal = np.zeros(2)
            normal[axis] = -1.0 if side == 0 else 1.0
            for sc in part.subcells:
                sc_coord = sc.lo[axis] if side == 0 else sc.hi[axis]
                if abs(sc_coord - coord) > tol:
                    continue
                if sc.kind == "inside":
                    a = sc.lo.copy()
                    b = sc.hi.copy()
                    a[axis] = b[axis] = coord
                    segs = [np.array([a, b])]
                else:
                    segs = sc.tess.side_edges.get((axis, side), [])
                for seg in segs:
                    if np.linalg.norm(seg[1] - seg[0]) <= tol:
                        continue
                    faces.append(BoundaryFace(a=seg[0], b=seg[1], normal=normal,
                                              element=element, kind="outer"))
    return faces


def build_immersed_mesh(field, ambient, depth) -> ImmersedMesh:
    """Trim every active element of `ambient` against the level set.

    `field` is any callable mapping (n, 2) points to level-set values
    (positive inside); a spline level set additionally has its box checked
    against the ambient mesh.  Partitions of previously trimmed elements can
    be reused through `refine_geometry`, which re-trims only new elements.
    """
    if isinstance(ambient, RectMesh):
        ambient = HierarchicalMesh(ambient)
    if depth < 0 or depth > MAX_OCTREE_DEPTH:
        raise ValueError(f"depth must lie in 0..{MAX_OCTREE_DEPTH}")
    space = getattr(field, "space", None)
    if space is not None:
        flo, fhi = space.mesh.root.box
        alo, ahi = ambient.root.box
        scale = max(np.max(np.abs(ahi - alo)), 1.0)
        if (np.max(np.abs(flo - alo)) > 1e-9 * scale
                or np.max(np.abs(fhi - ahi)) > 1e-9 * scale):
            raise GeometryError(f"level-set box {flo}..{fhi} does not match "
                                f"mesh box {alo}..{ahi}")
    return _assemble(field, ambient, depth, reuse=None)


def refine_geometry(imesh: ImmersedMesh, new_mesh: HierarchicalMesh) -> ImmersedMesh:
    """Rebuild the immersed mesh on a refined background mesh.

    The geometry approximation is frozen: surviving elements keep their
    partitions and new elements are trimmed at a reduced octree depth on the
    same lattice points, so children tile their parent's trimmed geometry
    exactly.  Elements at the octree depth cannot be refined further.
    """
    return _assemble(imesh.field, new_mesh, imesh.depth, reuse=imesh.partitions)


def _assemble(field, ambient, depth, reuse):
    partitions = {}
    classification = {}
    for lev, cell in ambient.active_cells():
        key = (lev, cell)
        if reuse is not None and key in reuse:
            part = reuse[key]
        else:
            # a level-l element keeps the root lattice resolution: its own
            # octree depth shrinks so the trimmed geometry never changes
            # under refinement
            eff = max(depth - lev, 0)
            lo, hi = ambient.cell_box(lev, cell)
            vals = _eval_on_box(field, lo, hi, _lattice(lo, hi, eff))
            part = trim_element(vals.reshape((2 ** eff + 1,) * 2), eff,
                                lo=lo, hi=hi, element=key)
        if part.is_empty:
            continue
        partitions[key] = part
        classification[key] = "cut" if part.has_cut else "inside"

    elements = sorted(partitions)
    crossed = {e for e, c in classification.items() if c == "cut"}
    retained = set(elements)
    skeleton, ghost = _skeleton_faces(ambient, retained, crossed)

    boundary_faces = []
    outer_faces = []
    for e in elements:
        part = partitions[e]
        for seg, normal in part.boundary_pairs():
            boundary_faces.append(BoundaryFace(a=seg[0], b=seg[1], normal=normal,
                                               element=e, kind="immersed"))
        outer_faces.extend(_outer_faces(ambient, e, part))

    return ImmersedMesh(mesh=ambient, field=field, depth=depth, elements=elements,
                        partitions=partitions, classification=classification,
                        crossed=crossed, skeleton=skeleton, ghost=ghost,
                        boundary_faces=boundary_faces, outer_faces=outer_faces)


def export_immersed_vtk(imesh: ImmersedMesh, path):
    """Cut-mesh polygons plus boundary faces as legacy-VTK polydata."""
    from ._vtk import write_polydata

    points = []
    polygons = []
    lines = []

    def add_pts(arr):
        base = len(points)
        points.extend(arr)
        return list(range(base, base + len(arr)))

    for part in imesh.partitions.values():
        for sc in part.subcells:
            if sc.kind == "inside":
                lo, hi = sc.lo, sc.hi
                quad = [(lo[0], lo[1]), (hi[0], lo[1]), (hi[0], hi[1]), (lo[0], hi[1])]
                polygons.append(add_pts(quad))
            else:
                for tri in sc.tess.triangles:
                    polygons.append(add_pts(tri))
    for face in imesh.all_boundary_faces():
        lines.append(add_pts([face.a, face.b]))
    write_polydata(path, np.asarray(points, dtype=float), polygons=polygons,
                   lines=lines)
    return path
