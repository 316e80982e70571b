"""Voxel image to smooth spline level set.

The level set is obtained by weighting each basis function with the mean image
intensity over its support, a_i = int(phi_i g) / int(phi_i).  Because g is
piecewise constant per voxel the integrals are evaluated exactly (Gauss rules
on voxel/knot-span intersection pieces), which makes the gray-scale intensity
of the image an exact invariant of the smoothing and bounds the level set by
local image extrema.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy import ndimage

from ._gauss import gauss_box
from .scan_io import GrayscaleGrid
from .spline_basis import SplineSpace, refine as refine_space


class GeometryError(ValueError):
    """Scan box and spline-space box do not match."""


@dataclass
class LevelSetField:
    """Smooth scalar field sum(phi_i * a_i) with a segmentation threshold.

    coeffs stay in image scale; calling the field returns the shifted value
    f(x) - f_crit, so inside/outside is decided by the sign. ``intensity``
    returns the unshifted value.
    """

    space: SplineSpace
    coeffs: np.ndarray
    f_crit: float = 0.0

    def intensity_on_cell(self, level, cell, pts, derivs=None):
        derivs = derivs or ((0,) * self.space.mesh.ndim,)
        gids, vals = self.space.eval_on_cell(level, cell, pts, derivs=derivs)
        return np.tensordot(self.coeffs[gids], vals, axes=(0, 1))

    def intensity(self, pts):
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        out = np.empty(len(pts))
        for i, x in enumerate(pts):
            lev, cell = self.space.mesh.find_cell(x)
            out[i] = self.intensity_on_cell(lev, cell, x[None, :])[0, 0]
        return out

    def __call__(self, pts):
        return self.intensity(pts) - self.f_crit

    def values_on_cell(self, level, cell, pts):
        return self.intensity_on_cell(level, cell, pts)[0] - self.f_crit

    def with_threshold(self, f_crit):
        return LevelSetField(space=self.space, coeffs=self.coeffs,
                             f_crit=float(f_crit))


@dataclass
class AttenuationQuery:
    """Feature size relative to the mesh, for the smoothing-filter estimate."""

    lhat: float
    k: int
    h: float = 1.0

    def __post_init__(self):
        if self.lhat <= 0:
            raise ValueError("lhat must be positive")
        if self.k < 1:
            raise ValueError("degree must be >= 1")
        if self.h <= 0:
            raise ValueError("h must be positive")

    @property
    def sigma(self):
        """Standard deviation of the approximating Gaussian kernel."""
        return self.h * math.sqrt((self.k + 1) / 6.0)


@dataclass
class BoundsReport:
    violations: np.ndarray
    max_violation: float

    @property
    def n_violations(self):
        return int((self.violations > 1e-10).sum())


@dataclass
class TopologyReport:
    iterations: int
    mismatched_windows: int
    status: str
    dims: list = dc_field(default_factory=list)


def _voxel_range(lo, hi, origin, delta, n):
    i0 = int(math.floor((lo - origin) / delta + 1e-12))
    i1 = int(math.ceil((hi - origin) / delta - 1e-12))
    return max(i0, 0), min(i1, n)


def _check_boxes(space, grid):
    slo, shi = space.mesh.root.box
    glo, ghi = grid.box
    d = space.mesh.ndim
    if d == 1:
        if grid.shape[1] != 1:
            raise GeometryError("1D space needs a height-1 image")
        glo, ghi = glo[:1], ghi[:1]
    scale = max(np.max(np.abs(ghi - glo)), 1.0)
    if np.max(np.abs(slo - glo)) > 1e-9 * scale or np.max(np.abs(shi - ghi)) > 1e-9 * scale:
        raise GeometryError(f"space box {slo}..{shi} does not match scan box {glo}..{ghi}")


def smooth(grid: GrayscaleGrid, space: SplineSpace) -> LevelSetField:
    """Support-averaged image intensities as spline coefficients."""
    _check_boxes(space, grid)
    d = space.mesh.ndim
    k = space.degree
    spacing = np.asarray(grid.spacing[:d], dtype=float)
    origin = np.asarray(grid.origin[:d], dtype=float)
    nvox = grid.shape[:d]
    num = np.zeros(space.dim)
    den = np.zeros(space.dim)
    for lev, cell in space.mesh.active_cells():
        clo, chi = space.mesh.cell_box(lev, cell)
        ranges = [range(*_voxel_range(clo[a], chi[a], origin[a], spacing[a], nvox[a]))
                  for a in range(d)]
        for vox in np.ndindex(*[len(r) for r in ranges]):
            vidx = tuple(ranges[a][vox[a]] for a in range(d))
            plo = np.maximum(clo, origin + np.array(vidx) * spacing)
            phi_ = np.minimum(chi, origin + (np.array(vidx) + 1) * spacing)
            if np.any(phi_ - plo < 1e-14 * spacing):
                continue
            pts, w = gauss_box(k + 1, plo, phi_)
            gids, vals = space.eval_on_cell(lev, cell, pts, derivs=((0,) * d,))
            integrals = vals[0] @ w
            gval = grid.values[vidx if d > 1 else (vidx[0], 0)]
            num[gids] += gval * integrals
            den[gids] += integrals
    return LevelSetField(space=space, coeffs=num / den, f_crit=0.0)


def predict_attenuation(q: AttenuationQuery) -> float:
    """Peak value of the smoothed unit-height feature of relative width lhat."""
    return q.lhat * math.sqrt(3.0 / (math.pi * (q.k + 1))) * math.exp(
        -3.0 * q.lhat ** 2 / (16.0 * (q.k + 1)))


def check_bounds(field: LevelSetField, grid: GrayscaleGrid, samples: int = 4) -> BoundsReport:
    """Verify the level set stays within local image extrema.

    For every voxel the field is sampled on a samples^d interior lattice and
    compared against the extrema of g over the voxel's support extension (all
    voxels intersecting a support of a basis function alive on the voxel).
    """
    space = field.space
    _check_boxes(space, grid)
    d = space.mesh.ndim
    spacing = np.asarray(grid.spacing[:d], dtype=float)
    origin = np.asarray(grid.origin[:d], dtype=float)
    nvox = grid.shape[:d]
    vals2d = grid.values if d > 1 else grid.values[:, :1]

    # physical support boxes per active cell (everything alive there)
    cell_ext = {}
    for lev, cell in space.mesh.active_cells():
        gids, C = space.cell_ops(lev, cell)
        boxes = [space.function_support_box(g)
                 for g, row in zip(gids, C) if np.abs(row).max() > 1e-14]
        cell_ext[(lev, cell)] = boxes

    violations = np.zeros(nvox)
    offs = (np.arange(samples) + 0.5) / samples
    for vidx in np.ndindex(*nvox):
        vlo = origin + np.array(vidx) * spacing
        vhi = vlo + spacing
        # union of support extensions of every cell overlapping this voxel
        boxes = []
        for lev, cell in space.mesh.active_cells():
            clo, chi = space.mesh.cell_box(lev, cell)
            if np.all(np.minimum(chi, vhi) - np.maximum(clo, vlo) > 1e-14):
                boxes.extend(cell_ext[(lev, cell)])
        gmin, gmax = np.inf, -np.inf
        for blo, bhi in boxes:
            sl = tuple(slice(*_voxel_range(blo[a], bhi[a], origin[a], spacing[a], nvox[a]))
                       for a in range(d))
            if any(s.start >= s.stop for s in sl):
                continue
            sub = vals2d[sl] if d > 1 else vals2d[sl[0], :]
            gmin = min(gmin, sub.min())
            gmax = max(gmax, sub.max())
        grids = np.meshgrid(*[vlo[a] + offs * spacing[a] for a in range(d)], indexing="ij")
        pts = np.stack([g.ravel() for g in grids], axis=-1)
        fvals = field.intensity(pts)
        violations[vidx] = max(0.0, gmin - fvals.min(), fvals.max() - gmax)
    return BoundsReport(violations=violations, max_violation=float(violations.max()))


_CROSS = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])


def _count_components(mask):
    _, n = ndimage.label(mask, structure=_CROSS)
    return n


def preserve_topology(grid: GrayscaleGrid, field: LevelSetField, g_crit: float,
                      window: int = 4, max_depth: int = 3):
    """Repair topological mismatches between voxel mask and level set.

    A window of window x window voxels slides with half-window stride; in each
    position the 4-connected component counts of the thresholded voxel mask and
    of the level set (sampled at voxel centers, image scale, thresholded at
    g_crit) are compared.  Mismatching windows mark the overlapping active
    spline elements (below the max_depth level cap) for bisection, the field is
    re-smoothed on the refined space, and the scan repeats.  Non-convergence is
    reported, not raised.
    """
    if window < 2:
        raise ValueError("window must span at least 2 voxels")
    if max_depth < 1:
        raise ValueError("max_depth must be >= 1")
    space = field.space
    if space.mesh.ndim != 2:
        raise ValueError("topology repair is a 2D operation")
    _check_boxes(space, grid)
    spacing = np.asarray(grid.spacing, dtype=float)
    origin = np.asarray(grid.origin, dtype=float)
    nx, ny = grid.shape
    stride = max(window // 2, 1)
    mask_vox = grid.values > g_crit
    centers = np.stack(np.meshgrid(origin[0] + (np.arange(nx) + 0.5) * spacing[0],
                                   origin[1] + (np.arange(ny) + 0.5) * spacing[1],
                                   indexing="ij"), axis=-1).reshape(-1, 2)

    dims = [space.dim]
    iterations = 0
    status = "ok"
    while True:
        mask_f = (field.intensity(centers) > g_crit).reshape(nx, ny)
        marked = set()
        mismatched = 0
        for x0 in range(0, max(nx - window, 0) + 1, stride):
            for y0 in range(0, max(ny - window, 0) + 1, stride):
                wa = mask_vox[x0:x0 + window, y0:y0 + window]
                wb = mask_f[x0:x0 + window, y0:y0 + window]
                if _count_components(wa) == _count_components(wb):
                    continue
                mismatched += 1
                wlo = origin + np.array([x0, y0]) * spacing
                whi = origin + np.array([x0 + window, y0 + window]) * spacing
                for lev, cell in space.mesh.active_cells():
                    if lev >= max_depth:
                        continue
                    clo, chi = space.mesh.cell_box(lev, cell)
                    if np.all(np.minimum(chi, whi) - np.maximum(clo, wlo) > 1e-14):
                        marked.add((lev, cell))
        if mismatched == 0:
            break
        if not marked:
            status = "depth-capped"
            break
        iterations += 1
        space = refine_space(space, marked)
        field = smooth(grid, space).with_threshold(field.f_crit)
        dims.append(space.dim)
    return field, TopologyReport(iterations=iterations, mismatched_windows=mismatched,
                                 status=status, dims=dims)


def export_levelset_vtk(field: LevelSetField, path, resolution=64):
    """Sample the field on a lattice and write legacy-VTK structured points."""
    from ._vtk import write_structured_points

    mesh = field.space.mesh
    lo, hi = mesh.root.box
    d = mesh.ndim
    if np.isscalar(resolution):
        resolution = (int(resolution),) * d
    axes = [np.linspace(lo[a], hi[a], resolution[a]) for a in range(d)]
    grids = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([g.ravel() for g in grids], axis=-1)
    vals = field(pts)
    # VTK lattices are x-fastest
    lattice = vals.reshape(resolution).T.ravel() if d == 2 else vals
    spacing = [(hi[a] - lo[a]) / max(resolution[a] - 1, 1) for a in range(d)]
    write_structured_points(path, lo, spacing, resolution, {"levelset": lattice})
    return path
