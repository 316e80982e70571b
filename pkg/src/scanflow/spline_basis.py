"""Truncated hierarchical B-spline spaces on dyadically refined box meshes.

The mesh is a tensor-product box mesh whose elements can be bisected per level
(each refinement halves an element in every axis).  On top of it lives an
equal-degree truncated hierarchical B-spline space: per level a tensor-product
space over uniform open knot vectors, with the classical selection rule (keep a
level-l function when its support is covered by level >= l elements but not
entirely by level >= l+1 elements) and coefficient truncation on finer levels.

Everything an assembler needs funnels through ``SplineSpace.eval_on_cell``:
values and derivatives of every function that is not identically zero on one
active element, returned as dense local tables.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np


def ders_basis_funs(span, u, p, n, knots):
    """All nonzero B-spline basis functions and derivatives on one knot span.

    Parameters
    ----------
    span : int
        Knot span index with knots[span] <= u <= knots[span+1].
    u : float
        Evaluation coordinate.
    p : int
        Polynomial degree.
    n : int
        Highest derivative order requested (rows n+1); orders beyond p are zero.
    knots : ndarray
        Full clamped knot vector.

    Returns
    -------
    ders : ndarray, shape (n+1, p+1)
        ders[m, j] is the m-th derivative of basis function span-p+j at u.
    """
    ne = min(n, p)
    ndu = np.empty((p + 1, p + 1))
    ndu[0, 0] = 1.0
    left = np.empty(p + 1)
    right = np.empty(p + 1)
    for j in range(1, p + 1):
        left[j] = u - knots[span + 1 - j]
        right[j] = knots[span + j] - u
        saved = 0.0
        for r in range(j):
            ndu[j, r] = right[r + 1] + left[j - r]
            temp = ndu[r, j - 1] / ndu[j, r]
            ndu[r, j] = saved + right[r + 1] * temp
            saved = left[j - r] * temp
        ndu[j, j] = saved
    ders = np.zeros((n + 1, p + 1))
    ders[0, :] = ndu[:, p]
    a = np.empty((2, p + 1))
    for r in range(p + 1):
        s1, s2 = 0, 1
        a[0, 0] = 1.0
        for kk in range(1, ne + 1):
            d = 0.0
            rk = r - kk
            pk = p - kk
            if r >= kk:
                a[s2, 0] = a[s1, 0] / ndu[pk + 1, rk]
                d = a[s2, 0] * ndu[rk, pk]
            j1 = 1 if rk >= -1 else -rk
            j2 = kk - 1 if r - 1 <= pk else p - r
            for j in range(j1, j2 + 1):
                a[s2, j] = (a[s1, j] - a[s1, j - 1]) / ndu[pk + 1, rk + j]
                d += a[s2, j] * ndu[rk + j, pk]
            if r <= pk:
                a[s2, kk] = -a[s1, kk - 1] / ndu[pk + 1, r]
                d += a[s2, kk] * ndu[r, pk]
            ders[kk, r] = d
            s1, s2 = s2, s1
    fac = float(p)
    for kk in range(1, ne + 1):
        ders[kk, :] *= fac
        fac *= p - kk
    return ders


def open_knots(breaks, p):
    """Clamped knot vector over the given breakpoints, maximal smoothness."""
    breaks = np.asarray(breaks, dtype=float)
    return np.concatenate([np.full(p, breaks[0]), breaks, np.full(p, breaks[-1])])


@dataclass(frozen=True)
class RectMesh:
    """Tensor-product box mesh given by per-axis breakpoints."""

    breakpoints: tuple

    def __post_init__(self):
        for b in self.breakpoints:
            if len(b) < 2 or np.any(np.diff(b) <= 0):
                raise ValueError("breakpoints must be strictly increasing, length >= 2")

    @property
    def ndim(self):
        return len(self.breakpoints)

    @property
    def nelems(self):
        return tuple(len(b) - 1 for b in self.breakpoints)

    @property
    def box(self):
        lo = np.array([b[0] for b in self.breakpoints])
        hi = np.array([b[-1] for b in self.breakpoints])
        return lo, hi

    def cell_box(self, cell):
        lo = np.array([self.breakpoints[a][cell[a]] for a in range(self.ndim)])
        hi = np.array([self.breakpoints[a][cell[a] + 1] for a in range(self.ndim)])
        return lo, hi

    def h_K(self, cell):
        lo, hi = self.cell_box(cell)
        return float(np.linalg.norm(hi - lo))


def uniform_mesh(lo, hi, nelems):
    lo = np.atleast_1d(np.asarray(lo, dtype=float))
    hi = np.atleast_1d(np.asarray(hi, dtype=float))
    if np.isscalar(nelems):
        nelems = (int(nelems),) * lo.size
    breaks = tuple(np.linspace(lo[a], hi[a], nelems[a] + 1) for a in range(lo.size))
    return RectMesh(breaks)


class HierarchicalMesh:
    """Dyadic hierarchy of box elements; the active cells partition the root box."""

    def __init__(self, root: RectMesh, active=None):
        self.root = root
        if active is None:
            active = [set(product(*[range(n) for n in root.nelems]))]
        self.active = [set(s) for s in active]
        while len(self.active) > 1 and not self.active[-1]:
            self.active.pop()
        self._breaks_cache = {}
        self._omega = None

    # -- basic geometry -------------------------------------------------

    @property
    def ndim(self):
        return self.root.ndim

    @property
    def max_level(self):
        return len(self.active) - 1

    def nelems(self, level):
        return tuple(n * (1 << level) for n in self.root.nelems)

    def breaks(self, level, axis):
        key = (level, axis)
        if key not in self._breaks_cache:
            b = np.asarray(self.root.breakpoints[axis], dtype=float)
            for _ in range(level):
                mid = 0.5 * (b[:-1] + b[1:])
                bb = np.empty(2 * b.size - 1)
                bb[0::2] = b
                bb[1::2] = mid
                b = bb
            self._breaks_cache[key] = b
        return self._breaks_cache[key]

    def cell_box(self, level, cell):
        lo = np.array([self.breaks(level, a)[cell[a]] for a in range(self.ndim)])
        hi = np.array([self.breaks(level, a)[cell[a] + 1] for a in range(self.ndim)])
        return lo, hi

    def cell_sizes(self, level, cell):
        lo, hi = self.cell_box(level, cell)
        return hi - lo

    def h_K(self, level, cell):
        lo, hi = self.cell_box(level, cell)
        return float(np.linalg.norm(hi - lo))

    # -- hierarchy bookkeeping -------------------------------------------

    def is_active(self, level, cell):
        return level <= self.max_level and cell in self.active[level]

    def active_cells(self):
        out = []
        for lev, cells in enumerate(self.active):
            out.extend((lev, c) for c in sorted(cells))
        return out

    def ancestor(self, level, cell, target_level):
        shift = level - target_level
        if shift < 0:
            raise ValueError("target level must not exceed cell level")
        return tuple(c >> shift for c in cell)

    def children(self, level, cell):
        return [tuple(2 * c + t for c, t in zip(cell, offs))
                for offs in product((0, 1), repeat=self.ndim)]

    def find_cell(self, x):
        """Active cell containing point x (ties on gridlines go to the upper cell,
        clamped at the domain boundary)."""
        x = np.asarray(x, dtype=float)
        lev = 0
        cell = []
        for a in range(self.ndim):
            b = self.breaks(0, a)
            i = int(np.searchsorted(b, x[a], side="right") - 1)
            cell.append(min(max(i, 0), len(b) - 2))
        cell = tuple(cell)
        while not self.is_active(lev, cell):
            if lev >= self.max_level:
                raise ValueError(f"point {x} not covered by an active cell")
            lev += 1
            nxt = []
            for a in range(self.ndim):
                b = self.breaks(lev, a)
                lo2 = 2 * cell[a]
                nxt.append(lo2 + (1 if x[a] >= b[lo2 + 1] and lo2 + 1 < self.nelems(lev)[a] else 0))
            cell = tuple(nxt)
        return lev, cell

    def covering_active(self, level, cell):
        """Active cell equal to or an ancestor of (level, cell), or None."""
        for lev in range(level, -1, -1):
            anc = self.ancestor(level, cell, lev)
            if self.is_active(lev, anc):
                return lev, anc
        return None

    def _active_descendants_on_face(self, level, cell, axis, side):
        """Active descendants of (level, cell) touching its face on `axis`/`side`."""
        out = []
        stack = [(level, cell)]
        while stack:
            lev, c = stack.pop()
            if self.is_active(lev, c):
                out.append((lev, c))
                continue
            if lev >= self.max_level:
                continue
            for child in self.children(lev, c):
                if child[axis] == 2 * c[axis] + side:
                    stack.append((lev + 1, child))
        return out

    def face_neighbors(self, level, cell):
        """Active cells sharing a face with (level, cell)."""
        out = set()
        for axis in range(self.ndim):
            for side, step in ((0, -1), (1, +1)):
                nb = list(cell)
                nb[axis] += step
                if not 0 <= nb[axis] < self.nelems(level)[axis]:
                    continue
                nb = tuple(nb)
                cov = self.covering_active(level, nb)
                if cov is not None:
                    out.add(cov)
                else:
                    out.update(self._active_descendants_on_face(level, nb, axis, 1 - side))
        out.discard((level, cell))
        return out

    def refine(self, marked):
        """Bisect the given active cells; returns a new mesh."""
        marked = set(marked)
        for lev, c in marked:
            if not self.is_active(lev, c):
                raise ValueError(f"cell {(lev, c)} is not active")
        active = [set(s) for s in self.active]
        top = max((lev for lev, _ in marked), default=-1)
        while len(active) <= top + 1:
            active.append(set())
        for lev, c in marked:
            active[lev].discard(c)
            active[lev + 1].update(self.children(lev, c))
        return HierarchicalMesh(self.root, active)

    def omega_cells(self):
        """Per level l: cells covered by active cells of level >= l (the nested
        domains of the hierarchical construction)."""
        if self._omega is None:
            L = self.max_level
            omega = [set(self.active[L])]
            for lev in range(L - 1, -1, -1):
                finer = omega[0]
                cells = set(self.active[lev])
                parents = {self.ancestor(lev + 1, c, lev) for c in finer}
                for par in parents:
                    if all(ch in finer for ch in self.children(lev, par)):
                        cells.add(par)
                omega.insert(0, cells)
            self._omega = omega
        return self._omega


class SplineSpace:
    """Truncated hierarchical B-spline space of one degree on a HierarchicalMesh."""

    def __init__(self, mesh: HierarchicalMesh, degree: int):
        if degree < 1:
            raise ValueError("degree must be >= 1")
        self.mesh = mesh
        self.degree = int(degree)
        self._knots = {}
        self._ders_memo = {}
        self._ops_cache = {}
        self._transfer_cache = {}
        self._supp_memo = {}
        self.functions = []
        self.index = {}
        self._select_functions()

    # -- construction -----------------------------------------------------

    def knots(self, level, axis):
        key = (level, axis)
        if key not in self._knots:
            self._knots[key] = open_knots(self.mesh.breaks(level, axis), self.degree)
        return self._knots[key]

    def _support_cells_1d(self, level, axis, f):
        k = self.degree
        nel = self.mesh.nelems(level)[axis]
        return range(max(0, f - k), min(nel - 1, f) + 1)

    def _supp_in_set(self, level, idx, cellset):
        ranges = [self._support_cells_1d(level, a, idx[a]) for a in range(self.mesh.ndim)]
        return all(c in cellset for c in product(*ranges))

    def _supp_meets_set(self, level, idx, cellset):
        ranges = [self._support_cells_1d(level, a, idx[a]) for a in range(self.mesh.ndim)]
        return any(c in cellset for c in product(*ranges))

    def _select_functions(self):
        mesh = self.mesh
        k = self.degree
        omega = mesh.omega_cells()
        for lev in range(mesh.max_level + 1):
            cellset = omega[lev]
            if not cellset:
                continue
            candidates = set()
            for c in cellset:
                ranges = [range(c[a], c[a] + k + 1) for a in range(mesh.ndim)]
                candidates.update(product(*ranges))
            selected = []
            for idx in candidates:
                if not self._supp_in_set(lev, idx, cellset):
                    continue
                if not self._supp_meets_set(lev, idx, mesh.active[lev]):
                    continue
                selected.append(idx)
            for idx in sorted(selected):
                self.index[(lev, idx)] = len(self.functions)
                self.functions.append((lev, idx))

    @property
    def dim(self):
        return len(self.functions)

    # -- truncation chain ---------------------------------------------------

    def _supp_in_omega(self, level, idx):
        key = (level, idx)
        if key not in self._supp_memo:
            omega = self.mesh.omega_cells()
            inside = level <= self.mesh.max_level and self._supp_in_set(level, idx, omega[level])
            self._supp_memo[key] = inside
        return self._supp_memo[key]

    def _transfer(self, level, axis, parent_elem, child_elem):
        """(k+1)x(k+1) map of local coefficients from level to level+1 on one cell."""
        key = (level, axis, parent_elem, child_elem)
        T = self._transfer_cache.get(key)
        if T is None:
            k = self.degree
            bc = self.mesh.breaks(level + 1, axis)
            lo, hi = bc[child_elem], bc[child_elem + 1]
            mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
            pts = mid + half * np.cos(np.pi * (2 * np.arange(k + 1) + 1) / (2 * (k + 1)))
            Uc = self.knots(level + 1, axis)
            Up = self.knots(level, axis)
            Mc = np.empty((k + 1, k + 1))
            Mp = np.empty((k + 1, k + 1))
            for t, x in enumerate(pts):
                Mc[t] = ders_basis_funs(child_elem + k, x, k, 0, Uc)[0]
                Mp[t] = ders_basis_funs(parent_elem + k, x, k, 0, Up)[0]
            T = np.linalg.solve(Mc, Mp)
            self._transfer_cache[key] = T
        return T

    def _chain_coeffs(self, lev, idx, target_level, target_cell):
        """Coefficients of THB function (lev, idx) in the level-target tensor basis,
        restricted to one cell, with truncation applied at each intermediate level."""
        mesh = self.mesh
        k = self.degree
        d = mesh.ndim
        cur = mesh.ancestor(target_level, target_cell, lev)
        C = np.zeros((k + 1,) * d)
        C[tuple(idx[a] - cur[a] for a in range(d))] = 1.0
        for m in range(lev, target_level):
            child = mesh.ancestor(target_level, target_cell, m + 1)
            Ts = [self._transfer(m, a, cur[a], child[a]) for a in range(d)]
            if d == 1:
                C = Ts[0] @ C
            else:
                C = Ts[0] @ C @ Ts[1].T
            # truncation: zero the coefficients of finer functions living
            # entirely inside the next nested domain
            for off in np.argwhere(np.abs(C) > 0):
                fidx = tuple(child[a] + off[a] for a in range(d))
                if self._supp_in_omega(m + 1, fidx):
                    C[tuple(off)] = 0.0
            cur = child
        return C

    def cell_ops(self, level, cell):
        """Functions alive on one active cell and their local polynomial tables.

        Returns (gids, C) where C[i] holds the coefficients of function gids[i]
        with respect to the (k+1)^d level-`level` tensor B-splines that are
        nonzero on the cell (C has shape (nf, (k+1)^d), row-major local order).
        """
        key = (level, cell)
        hit = self._ops_cache.get(key)
        if hit is not None:
            return hit
        mesh = self.mesh
        k = self.degree
        d = mesh.ndim
        gids, rows = [], []
        for lev in range(level + 1):
            anc = mesh.ancestor(level, cell, lev)
            for off in product(*[range(k + 1)] * d):
                idx = tuple(anc[a] + off[a] for a in range(d))
                gid = self.index.get((lev, idx))
                if gid is None:
                    continue
                C = self._chain_coeffs(lev, idx, level, cell)
                if np.any(np.abs(C) > 1e-14):
                    gids.append(gid)
                    rows.append(C.ravel())
        gids = np.array(gids, dtype=int)
        C = np.vstack(rows) if rows else np.zeros((0, (k + 1) ** d))
        self._ops_cache[key] = (gids, C)
        return gids, C

    # -- evaluation -----------------------------------------------------------

    def _ders_1d(self, level, axis, elem, x, nmax):
        key = (level, axis, elem, float(x), nmax)
        tab = self._ders_memo.get(key)
        if tab is None:
            U = self.knots(level, axis)
            tab = ders_basis_funs(elem + self.degree, float(x), self.degree,
                                  nmax, U)
            self._ders_memo[key] = tab
        return tab

    def eval_on_cell(self, level, cell, pts, derivs=((0,),)):
        """Evaluate all functions alive on an active cell at given points.

        Parameters
        ----------
        level, cell : active cell id.
        pts : ndarray (m, d); points inside the closed cell (the cell's
            polynomial is used, so face points evaluate one-sided).
        derivs : sequence of per-axis derivative multi-indices.

        Returns
        -------
        gids : ndarray (nf,)
        vals : ndarray (len(derivs), nf, m)
        """
        gids, C = self.cell_ops(level, cell)
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        d = self.mesh.ndim
        k = self.degree
        m = pts.shape[0]
        nmax = [max(dv[a] for dv in derivs) for a in range(d)]
        tabs = []
        for a in range(d):
            t = np.empty((m, nmax[a] + 1, k + 1))
            for q in range(m):
                t[q] = self._ders_1d(level, a, cell[a], pts[q, a], nmax[a])
            tabs.append(t)
        out = np.empty((len(derivs), gids.size, m))
        for di, dv in enumerate(derivs):
            if d == 1:
                B = tabs[0][:, dv[0], :].T
            else:
                # local tensor table (k+1)^2 x m, row-major (jx, jy)
                B = (tabs[0][:, dv[0], :, None] * tabs[1][:, dv[1], None, :])
                B = B.reshape(m, -1).T
            out[di] = C @ B
        return gids, out

    def eval(self, x, deriv=None):
        """Sparse evaluation at one point: (gids, values) for the requested
        derivative multi-index (defaults to plain values)."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        if deriv is None:
            deriv = (0,) * self.mesh.ndim
        lev, cell = self.mesh.find_cell(x)
        gids, vals = self.eval_on_cell(lev, cell, x[None, :], derivs=(tuple(deriv),))
        return gids, vals[0, :, 0]

    def function_support_box(self, gid):
        """Physical bounding box of one basis function's nominal support."""
        lev, idx = self.functions[gid]
        k = self.degree
        lo, hi = [], []
        for a in range(self.mesh.ndim):
            U = self.knots(lev, a)
            lo.append(U[idx[a]])
            hi.append(U[idx[a] + k + 1])
        return np.array(lo), np.array(hi)

    def refine(self, marked):
        return refine(self, marked)


def build_space(mesh, degree):
    """Spec op: hierarchical spline space of the given degree on the mesh."""
    if isinstance(mesh, RectMesh):
        mesh = HierarchicalMesh(mesh)
    return SplineSpace(mesh, degree)


def eval_basis(space, x, deriv=None):
    """Spec op: ids and values of the basis functions alive at x."""
    return space.eval(x, deriv)


def refine(space, marked, max_level_jump=None):
    """Spec op: bisect the marked active elements and rebuild the space.

    The marked set is grown (by face neighbors of the marked region) until the
    refined space's dimension strictly exceeds the old one, so refinement is
    never silently a no-op.  ``max_level_jump``, when given, additionally grows
    the set until no two face-adjacent active elements differ by more than that
    many levels.
    """
    marked = set(marked)
    if not marked:
        return space
    mesh = space.mesh
    for mc in marked:
        if not mesh.is_active(*mc):
            raise ValueError(f"marked cell {mc} is not active")
    cur = set(marked)
    while True:
        work = set(cur)
        if max_level_jump is not None:
            work = _complete_level_jump(mesh, work, max_level_jump)
        newmesh = mesh.refine(work)
        news = SplineSpace(newmesh, space.degree)
        if news.dim > space.dim:
            return news
        grown = set(cur)
        for mc in cur:
            grown.update(mesh.face_neighbors(*mc))
        if grown == cur:
            return news
        cur = grown


def _complete_level_jump(mesh, marked, jump):
    marked = set(marked)
    while True:
        extra = set()
        for lev, c in marked:
            for nlev, nc in mesh.face_neighbors(lev, c):
                if (lev, nc) in marked or (nlev, nc) in marked:
                    continue
                if lev + 1 - nlev > jump and (nlev, nc) not in marked:
                    extra.add((nlev, nc))
        extra -= marked
        if not extra:
            return marked
        marked |= extra


def l2_project(space, fn, order=None):
    """L2 projection of a callable onto the space over the full root box."""
    from scipy.sparse import coo_matrix
    from scipy.sparse.linalg import spsolve

    from ._gauss import gauss_box

    k = space.degree
    order = order or k + 1
    n = space.dim
    rows, cols, vals = [], [], []
    rhs = np.zeros(n)
    for lev, cell in space.mesh.active_cells():
        lo, hi = space.mesh.cell_box(lev, cell)
        pts, w = gauss_box(order, lo, hi)
        gids, V = space.eval_on_cell(lev, cell, pts,
                                     derivs=((0,) * space.mesh.ndim,))
        N = V[0]
        M = (N * w) @ N.T
        rows.append(np.repeat(gids, gids.size))
        cols.append(np.tile(gids, gids.size))
        vals.append(M.ravel())
        rhs[gids] += (N * w) @ np.asarray(fn(pts), dtype=float)
    M = coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                   shape=(n, n)).tocsc()
    return spsolve(M, rhs)
