"""Moment-defect-driven quadrature optimization for trimmed elements.

The integration error of a quadrature rule on the polynomial space of per-axis
degree 2k is governed by the worst-case unit-norm polynomial (the supremizer),
whose error has the closed form ||xi - xi_bar||_{G^-1} in terms of the exact
and approximate basis moments.  The optimizer starts from one point per
sub-cell and greedily raises the per-axis Gauss order where the estimated
error per added point is largest, either on single sub-cells or on whole
octree levels.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np
from numpy.polynomial import legendre as npleg
from scipy.linalg import cho_solve, cholesky, solve_triangular

from ._gauss import gauss_box, gauss_triangle, triangle_area
from .immersed_mesh import Partition

# order caps: k+1 points per axis are already moment-exact on boxes, 2k+1 on
# triangles through the collapsed map (exact to total degree 4k)
def _order_cap(kind: str, k: int) -> int:
    return k + 2 if kind == "box" else 2 * k + 1


def _raise_cost(order: int) -> int:
    return (order + 1) ** 2 - order ** 2


@dataclass
class SubRule:
    """One quadrature sub-cell: a retained box or a tessellation triangle."""

    kind: str  # "box" or "tri"
    octlevel: int
    geom: tuple
    order: int
    pts: np.ndarray = dc_field(default=None, repr=False)
    wts: np.ndarray = dc_field(default=None, repr=False)
    moments: np.ndarray = dc_field(default=None, repr=False)

    def __post_init__(self):
        if self.pts is None:
            self.set_order(self.order)

    def set_order(self, order):
        self.order = order
        if self.kind == "box":
            lo, hi = self.geom
            self.pts, self.wts = gauss_box(order, lo, hi)
        else:
            self.pts, self.wts = gauss_triangle(order, self.geom)

    @property
    def npts(self):
        return len(self.wts)

    @property
    def volume(self):
        if self.kind == "box":
            lo, hi = self.geom
            return float(np.prod(np.asarray(hi) - np.asarray(lo)))
        return triangle_area(self.geom)


@dataclass
class QuadRule:
    """Per-sub-cell tensor rules plus the flattened global point list."""

    subrules: list

    @property
    def total_points(self):
        return sum(s.npts for s in self.subrules)

    def points(self):
        return np.concatenate([s.pts for s in self.subrules], axis=0)

    def weights(self):
        return np.concatenate([s.wts for s in self.subrules])

    def integrate(self, fn):
        pts = self.points()
        return float(np.asarray(fn(pts)) @ self.weights())


def _subrules_from_partition(partition: Partition, order=1):
    subs = []
    for sc in partition.subcells:
        if sc.kind == "inside":
            subs.append(SubRule(kind="box", octlevel=sc.octlevel,
                                geom=(sc.lo, sc.hi), order=order))
        else:
            for tri in sc.tess.triangles:
                subs.append(SubRule(kind="tri", octlevel=sc.octlevel,
                                    geom=tri, order=order))
    return subs


class MomentBasis:
    """Tensor polynomial basis of per-axis degree 2k over the element box.

    kind "legendre" (default) is orthonormal in L2 of the uncut box, so the
    Gramian is the identity; kind "monomial" uses scaled monomials with the
    Gramian assembled from closed-form integrals.  `xi` holds the exact
    moments over the trimmed geometry, integrated fragment-exactly with
    2k+1 points per axis.
    """

    def __init__(self, partition: Partition, k: int, kind: str = "legendre"):
        if k < 1:
            raise ValueError("degree k must be >= 1")
        self.k = k
        self.degree = 2 * k
        self.kind = kind
        self.lo = np.asarray(partition.lo, dtype=float)
        self.hi = np.asarray(partition.hi, dtype=float)
        self.width = self.hi - self.lo
        n1 = self.degree + 1
        self.nfun = n1 * n1
        if kind == "legendre":
            self.G = np.eye(self.nfun)
            self._chol = None
        elif kind == "monomial":
            # G[(ij),(kl)] = w0*w1 / ((i+k+1)(j+l+1)) for unit-box monomials
            idx = np.arange(n1)
            g1 = 1.0 / (idx[:, None] + idx[None, :] + 1.0)
            self.G = np.prod(self.width) * np.kron(g1, g1)
            self._chol = cholesky(self.G, lower=True)
        else:
            raise ValueError(f"unknown basis kind {kind!r}")
        self.xi = self.exact_moments_of(partition)

    def eval(self, pts):
        """Basis values, shape (nfun, npts); function index is i*(2k+1)+j."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        u = (pts - self.lo) / self.width
        n1 = self.degree + 1
        if self.kind == "legendre":
            va = npleg.legvander(2.0 * u[:, 0] - 1.0, self.degree)
            vb = npleg.legvander(2.0 * u[:, 1] - 1.0, self.degree)
            norms = np.sqrt((2.0 * np.arange(n1) + 1.0))
            va = va * (norms / np.sqrt(self.width[0]))
            vb = vb * (norms / np.sqrt(self.width[1]))
        else:
            va = np.vander(u[:, 0], n1, increasing=True)
            vb = np.vander(u[:, 1], n1, increasing=True)
        return (va[:, :, None] * vb[:, None, :]).reshape(len(pts), -1).T

    def subcell_moments(self, sub: SubRule):
        """Exact integrals of the basis over one sub-cell (2k+1 points/axis)."""
        n = self.degree + 1  # 2k+1
        if sub.kind == "box":
            lo, hi = sub.geom
            pts, wts = gauss_box(n, lo, hi)
        else:
            pts, wts = gauss_triangle(n, sub.geom)
        return self.eval(pts) @ wts

    def exact_moments_of(self, partition: Partition):
        xi = np.zeros(self.nfun)
        for sub in _subrules_from_partition(partition):
            xi += self.subcell_moments(sub)
        return xi

    def dual_norm_sq(self, vec):
        if self._chol is None:
            return float(vec @ vec)
        y = solve_triangular(self._chol, vec, lower=True)
        return float(y @ y)

    def dual_solve(self, vec):
        if self._chol is None:
            return vec.copy()
        return cho_solve((self._chol, True), vec)


def supremizer(basis: MomentBasis, xi_bar):
    """Worst-case unit-norm polynomial and its integration error.

    Returns (coefficients, e_K) with p_max = Phi^T G^-1 (xi - xi_bar) / e_K
    and e_K = ||xi - xi_bar||_{G^-1}.  A zero defect yields a null supremizer.
    """
    defect = basis.xi - np.asarray(xi_bar, dtype=float)
    e_sq = basis.dual_norm_sq(defect)
    if e_sq <= 0.0 or not np.isfinite(e_sq):
        return np.zeros(basis.nfun), 0.0
    e = float(np.sqrt(e_sq))
    return basis.dual_solve(defect) / e, e


@dataclass
class OptimizerState:
    basis: MomentBasis
    rule: QuadRule
    xi_bar: np.ndarray
    coeffs: np.ndarray
    e_K: float
    e_sub: np.ndarray


def _evaluate_state(basis, rule):
    xi_bar = np.zeros(basis.nfun)
    for sub in rule.subrules:
        xi_bar += basis.eval(sub.pts) @ sub.wts
    coeffs, e_K = supremizer(basis, xi_bar)
    state = OptimizerState(basis=basis, rule=rule, xi_bar=xi_bar,
                           coeffs=coeffs, e_K=e_K, e_sub=None)
    state.e_sub = subcell_errors(state)
    return state

def subcell_errors(state: OptimizerState):
    """Per-sub-cell defect |int_p p_max - sum_l w_l p_max(x_l)|."""
    basis, coeffs = state.basis, state.coeffs
    errs = np.empty(len(state.rule.subrules))
    for i, sub in enumerate(state.rule.subrules):
        if sub.moments is None:
            sub.moments = basis.subcell_moments(sub)
        exact = coeffs @ sub.moments
        approx = (coeffs @ basis.eval(sub.pts)) @ sub.wts
        errs[i] = abs(exact - approx)
    return errs


@dataclass
class StopRule:
    """Stopping criterion: any subset of budget, target error, max iterations."""

    max_points: int | None = None
    target_error: float | None = None
    max_iters: int | None = None

    def __post_init__(self):
        if self.max_points is None and self.target_error is None \
                and self.max_iters is None:
            raise ValueError("at least one stopping criterion must be set")


@dataclass
class OptimizeResult:
    rule: QuadRule
    trace: list  # rows (iter, points, error, strategy)
    status: str  # "met" once the criterion fired, "capped" if unreachable
    state: OptimizerState


def _mark(state, strategy, candidates):
    subs = state.rule.subrules
    if strategy == "subcell":
        scores = [state.e_sub[i] / _raise_cost(subs[i].order) for i in candidates]
        return [candidates[int(np.argmax(scores))]]
    if strategy == "octree-level":
        # error per added point, aggregated per level, so a level of many
        # cheap low-error cells cannot outrank one dominant coarse cell
        levels = sorted({subs[i].octlevel for i in candidates})
        scores = []
        for lev in levels:
            idx = [i for i in candidates if subs[i].octlevel == lev]
            scores.append(sum(state.e_sub[i] for i in idx)
                          / sum(_raise_cost(subs[i].order) for i in idx))
        best = levels[int(np.argmax(scores))]
        return [i for i in candidates if subs[i].octlevel == best]
    raise ValueError(f"unknown marking strategy {strategy!r}")


def _copy_rule(rule: QuadRule) -> QuadRule:
    subs = []
    for s in rule.subrules:
        c = SubRule(kind=s.kind, octlevel=s.octlevel, geom=s.geom, order=s.order)
        c.moments = s.moments
        subs.append(c)
    return QuadRule(subs)


def optimize(partition: Partition, k: int, criterion: StopRule,
             strategy: str = "subcell", basis_kind: str = "legendre"):
    """Greedy error-per-cost order elevation, starting from one-point rules.

    The best rule seen so far is tracked and returned; the trace reports its
    error at each point count, so traces are non-increasing even though the
    raw greedy path may wobble by quadrature round-off.
    """
    if partition.is_empty:
        raise ValueError("partition has no retained sub-cells")
    if strategy not in ("subcell", "octree-level"):
        raise ValueError(f"unknown marking strategy {strategy!r}")
    basis = MomentBasis(partition, k, kind=basis_kind)
    rule = QuadRule(_subrules_from_partition(partition, order=1))
    trace = []
    it = 0
    status = None
    best_e = np.inf
    best_rule = None

    def record(state):
        # best-so-far within the point budget; the trace stays monotone
        nonlocal best_e, best_rule
        within = criterion.max_points is None \
            or rule.total_points <= criterion.max_points
        if best_rule is None or (within and state.e_K < best_e):
            best_e = state.e_K
            best_rule = _copy_rule(rule)
        trace.append((it, rule.total_points, best_e, strategy))
        if criterion.target_error is not None and best_e <= criterion.target_error:
            return "met"
        if criterion.max_points is not None \
                and rule.total_points >= criterion.max_points:
            return "met"
        return None

    state = _evaluate_state(basis, rule)
    while True:
        status = record(state)
        if status is not None:
            break
        if criterion.max_iters is not None and it >= criterion.max_iters:
            status = "met"
            break
        candidates = [i for i, s in enumerate(rule.subrules)
                      if s.order < _order_cap(s.kind, k)]
        if not candidates:
            status = "capped"
            break
        # apply the marked raises best-value-first, logging every
        # intermediate point count so the strategies compare pointwise
        marked = sorted(_mark(state, strategy, candidates),
                        key=lambda i: -state.e_sub[i]
                        / _raise_cost(rule.subrules[i].order))
        for i in marked[:-1]:
            rule.subrules[i].set_order(rule.subrules[i].order + 1)
            status = record(_evaluate_state(basis, rule))
            if status is not None:
                break
        if status is not None:
            break
        rule.subrules[marked[-1]].set_order(rule.subrules[marked[-1]].order + 1)
        it += 1
        state = _evaluate_state(basis, rule)
    final = _evaluate_state(basis, best_rule)
    return OptimizeResult(rule=best_rule, trace=trace, status=status, state=final)


def equal_order_rule(partition: Partition, points_per_axis: int) -> QuadRule:
    """Reference rule: the same tensor order on every box and triangle."""
    if points_per_axis < 1:
        raise ValueError("points_per_axis must be >= 1")
    return QuadRule(_subrules_from_partition(partition, order=points_per_axis))


def rule_error(partition: Partition, rule: QuadRule, k: int,
               basis_kind: str = "legendre") -> float:
    """e_K^p of an arbitrary rule on the partition's moment problem."""
    basis = MomentBasis(partition, k, kind=basis_kind)
    xi_bar = np.zeros(basis.nfun)
    for sub in rule.subrules:
        xi_bar += basis.eval(sub.pts) @ sub.wts
    return supremizer(basis, xi_bar)[1]
