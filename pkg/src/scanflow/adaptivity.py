"""Residual-driven mesh adaptivity for the immersed Stokes solver.

Element indicators combine the strong-form interior residuals with boundary
and jump residuals, each scaled by the local mesh size to bound the energy
error.  Doerfler marking selects a minimal element set carrying a fixed
fraction of the squared estimator; marked elements are refined dyadically
while the trimmed geometry stays frozen at the original octree resolution.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.optimize import brentq

from ._gauss import gauss_segment
from .immersed_mesh import build_immersed_mesh, refine_geometry
from .quadrature_opt import equal_order_rule
from .spline_basis import build_space, uniform_mesh
from .stokes_solver import (
    SolverError,
    StabilizationParams,
    StokesProblem,
    _kth_normal_jump,
    assemble,
    l2_errors,
    solve,
    true_energy_error,
)

_D00, _D10, _D01 = (0, 0), (1, 0), (0, 1)
_D20, _D11, _D02 = (2, 0), (1, 1), (0, 2)

PART_NAMES = ("momentum", "mass", "neumann", "nitsche", "nitsche_penalty",
              "stress_jump", "ghost", "pressure_jump")


@dataclass
class ElementIndicators:
    """Squared indicator contributions per element, split by named part."""

    squares: dict  # element -> {part name: squared contribution}

    def eta(self, element):
        return float(np.sqrt(sum(self.squares[element].values())))

    def eta_squared(self, element):
        return float(sum(self.squares[element].values()))

    @property
    def elements(self):
        return sorted(self.squares)

    @property
    def estimator(self):
        return float(np.sqrt(sum(self.eta_squared(e) for e in self.squares)))


@dataclass(frozen=True)
class AdaptConfig:
    """Marking fraction, step budget, depth cap and estimator tolerance.

    `max_depth` limits the hierarchical level an element may reach; it never
    exceeds the geometry's octree depth (refining further would require
    information the frozen level-set lattice does not carry).
    """

    theta: float = 0.5
    max_steps: int = 8
    max_depth: int | None = None
    tol: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.theta < 1.0:
            raise ValueError("theta must lie in (0, 1)")
        if self.max_steps < 1:
            raise ValueError("max_steps must be at least 1")
        if self.tol < 0:
            raise ValueError("tol must be nonnegative")


def _sigma_n(mu, dux, duy, nrm, ph=None):
    """Rows of (2 mu grad^s u - p I) n from one-sided derivative tables."""
    tn = np.empty_like(dux)
    dn = nrm[0] * dux + nrm[1] * duy
    tn[0] = mu * (dn[0] + dux[0] * nrm[0] + dux[1] * nrm[1])
    tn[1] = mu * (dn[1] + duy[0] * nrm[0] + duy[1] * nrm[1])
    if ph is not None:
        tn[0] -= ph * nrm[0]
        tn[1] -= ph * nrm[1]
    return tn


def _element_interior_squares(solution, problem, element, order):
    imesh, space = solution.imesh, solution.space
    mu = problem.viscosity
    lev, cell = element
    h_K = imesh.mesh.h_K(lev, cell)
    rule = equal_order_rule(imesh.partition(element), order)
    pts, w = rule.points(), rule.weights()
    gids, vals = space.eval_on_cell(
        lev, cell, pts, derivs=(_D10, _D01, _D20, _D11, _D02))
    Nx, Ny, Nxx, Nxy, Nyy = vals
    uloc = solution.u[:, gids]
    ploc = solution.p[gids]
    f = np.asarray(problem.body_force(pts), dtype=float)
    # div(2 mu grad^s u): x row 2uxx_x + uyy_x + uxy_y, y row symmetric
    rx = (f[:, 0] + mu * (2.0 * uloc[0] @ Nxx + uloc[0] @ Nyy
                          + uloc[1] @ Nxy) - ploc @ Nx)
    ry = (f[:, 1] + mu * (uloc[1] @ Nxx + uloc[0] @ Nxy
                          + 2.0 * uloc[1] @ Nyy) - ploc @ Ny)
    div = uloc[0] @ Nx + uloc[1] @ Ny
    return {"momentum": h_K ** 2 / mu * (w @ (rx ** 2 + ry ** 2)),
            "mass": mu * (w @ (div * div))}


def _element_boundary_squares(solution, problem, params, element):
    imesh, space = solution.imesh, solution.space
    mu = problem.viscosity
    k = space.degree
    lev, cell = element
    h_K = imesh.mesh.h_K(lev, cell)
    out = {"neumann": 0.0, "nitsche": 0.0, "nitsche_penalty": 0.0}
    for face in imesh.all_boundary_faces():
        if face.element != element or face.length <= 0:
            continue
        pts, w = gauss_segment(k + 1, face.a, face.b)
        gids, vals = space.eval_on_cell(lev, cell, pts,
                                        derivs=(_D00, _D10, _D01))
        N, Nx, Ny = vals
        uloc = solution.u[:, gids]
        if problem.face_kind(face) == "neumann":
            tn = _sigma_n(mu, uloc @ Nx, uloc @ Ny, face.normal,
                          ph=solution.p[gids] @ N)
            t = np.asarray(problem.neumann(pts), dtype=float).T
            r = t - tn
            out["neumann"] += h_K / mu * (w @ (r[0] ** 2 + r[1] ** 2))
        else:
            r = np.asarray(problem.dirichlet(pts), dtype=float).T - uloc @ N
            val = w @ (r[0] ** 2 + r[1] ** 2)
            out["nitsche"] += 9.0 * mu / h_K * val
            out["nitsche_penalty"] += mu * params.beta ** 2 / h_K * val
    return out


def _face_jump_squares(solution, problem, params, face):
    """Whole-face squared jump terms (stress, ghost, pressure), unsplit."""
    imesh, space = solution.imesh, solution.space
    mu = problem.viscosity
    k = space.degree
    pts, w = gauss_segment(k + 1, *face.endpoints())
    nrm = face.normal

    def side(element):
        lev, cell = element
        gids, vals = space.eval_on_cell(lev, cell, pts, derivs=(_D10, _D01))
        uloc = solution.u[:, gids]
        return _sigma_n(mu, uloc @ vals[0], uloc @ vals[1], nrm)

    jump = side(face.left) - side(face.right)
    stress = w @ (jump[0] ** 2 + jump[1] ** 2)

    union, J, wj = _kth_normal_jump(space, face, k)
    ju = solution.u[:, union] @ J
    ghost = wj @ (ju[0] ** 2 + ju[1] ** 2)
    jp = solution.p[union] @ J
    press = wj @ (jp * jp)
    return stress, ghost, press


def element_indicator(solution, element, problem,
                      params: StabilizationParams | None = None,
                      order=None) -> dict:
    """Named squared contributions of one element's error indicator.

    Interior residuals integrate over the element's trimmed partition,
    boundary residuals over its boundary faces, and every face jump enters
    with the one-half split shared with the neighbor element.
    """
    params = StabilizationParams() if params is None else params
    imesh, space = solution.imesh, solution.space
    mu = problem.viscosity
    k = space.degree
    order = order or k + 1
    lev, cell = element
    h_K = imesh.mesh.h_K(lev, cell)

    sq = dict.fromkeys(PART_NAMES, 0.0)
    sq.update(_element_interior_squares(solution, problem, element, order))
    sq.update(_element_boundary_squares(solution, problem, params, element))
    ghost_faces = {id(f) for f in imesh.ghost}
    for face in imesh.skeleton:
        if element not in (face.left, face.right):
            continue
        stress, ghost, press = _face_jump_squares(solution, problem, params,
                                                  face)
        sq["stress_jump"] += h_K / mu * 0.25 * stress
        if id(face) in ghost_faces:
            sq["ghost"] += (mu * params.gamma_ghost ** 2
                            * face.h_F ** (2 * k - 1) * 0.25 * ghost)
        sq["pressure_jump"] += (params.gamma_skeleton ** 2 / mu
                                * face.h_F ** (2 * k + 1) * 0.25 * press)
    return sq


def compute_indicators(solution, problem,
                       params: StabilizationParams | None = None,
                       order=None) -> ElementIndicators:
    """All element indicators in one pass (each face evaluated once)."""
    params = StabilizationParams() if params is None else params
    imesh, space = solution.imesh, solution.space
    mu = problem.viscosity
    k = space.degree
    order = order or k + 1

    squares = {}
    for element in imesh.elements:
        sq = dict.fromkeys(PART_NAMES, 0.0)
        sq.update(_element_interior_squares(solution, problem, element,
                                            order))
        sq.update(_element_boundary_squares(solution, problem, params,
                                            element))
        squares[element] = sq

    ghost_faces = {id(f) for f in imesh.ghost}
    for face in imesh.skeleton:
        stress, ghost, press = _face_jump_squares(solution, problem, params,
                                                  face)
        for element in (face.left, face.right):
            h_K = imesh.mesh.h_K(*element)
            sq = squares[element]
            sq["stress_jump"] += h_K / mu * 0.25 * stress
            if id(face) in ghost_faces:
                sq["ghost"] += (mu * params.gamma_ghost ** 2
                                * face.h_F ** (2 * k - 1) * 0.25 * ghost)
            sq["pressure_jump"] += (params.gamma_skeleton ** 2 / mu
                                    * face.h_F ** (2 * k + 1) * 0.25 * press)
    return ElementIndicators(squares=squares)


def dorfler_mark(indicators: ElementIndicators, theta: float) -> list:
    """Minimal element set whose squared indicators reach theta of the total.

    Greedy on descending eta with element-id tiebreak; theta = 1 marks every
    element with a positive indicator (used for uniform-refinement runs).
    """
    if not 0.0 < theta <= 1.0:
        raise ValueError("theta must lie in (0, 1]")
    etas = [(indicators.eta_squared(e), e) for e in indicators.elements]
    total = sum(v for v, _ in etas)
    if total == 0.0:
        return []
    if theta == 1.0:
        return [e for v, e in etas if v > 0.0]
    ordered = sorted(etas, key=lambda ve: (-ve[0], ve[1]))
    marked = []
    acc = 0.0
    for v, e in ordered:
        if acc >= theta * total:
            break
        marked.append((v, e))
        acc += v
    # minimality: the set without its smallest member misses the fraction
    assert acc - marked[-1][0] < theta * total
    return sorted(e for _, e in marked)


def _mask_completion(mesh, marked, degree):
    """Grow the marked set so refinement adds finer spline functions.

    Refining one element is not enough for a new function of the next level
    to fit inside the refined region once degree > 1; padding the marked
    cells by half the support width guarantees it away from level jumps.
    """
    pad = degree // 2
    if pad == 0:
        return set(marked)
    out = set(marked)
    for lev, cell in marked:
        nel = mesh.nelems(lev)
        for dx in range(-pad, pad + 1):
            for dy in range(-pad, pad + 1):
                nb = (cell[0] + dx, cell[1] + dy)
                if not (0 <= nb[0] < nel[0] and 0 <= nb[1] < nel[1]):
                    continue
                cov = mesh.covering_active(lev, nb)
                if cov is not None:
                    out.add(cov)
    return out


def _anchor_completion(imesh, space, marked):
    """Extend a refinement set so the masked basis stays independent.

    A selected function whose own-level support cells survive only outside
    the trimmed domain, while all its retained support cells get refined,
    shows up on the physical domain purely as its truncation remnant;
    remnants of different functions can coincide there, which makes the
    masked system exactly singular.  Refining the surviving own-level cells
    of every such function hands its role to the finer level.  The added
    cells are never retained and sit strictly below the depth cap, so a
    single sweep over the current basis suffices.
    """
    from itertools import product

    mesh = imesh.mesh
    retained = set(imesh.elements)
    phys_at = {}

    def physical_cells(lev):
        if lev not in phys_at:
            phys_at[lev] = {mesh.ancestor(el, ec, lev)
                            for el, ec in retained if el >= lev}
        return phys_at[lev]

    refine = {e for e in marked}
    for lev, idx in space.functions:
        supp = list(product(*(space._support_cells_1d(lev, a, idx[a])
                              for a in range(mesh.ndim))))
        alive = [c for c in supp
                 if c in mesh.active[lev] and (lev, c) not in refine]
        if not alive:
            continue  # deselected by this round's refinement anyway
        if not physical_cells(lev).intersection(supp):
            continue  # invisible on the trimmed domain; masked out
        if any((lev, c) in retained for c in alive):
            continue  # keeps a physical anchor at its own level
        refine.update((lev, c) for c in alive)
    return sorted(refine)


def adapt_loop(problem: StokesProblem, imesh, space, config: AdaptConfig,
               params: StabilizationParams | None = None, uniform=False,
               snapshot_dir=None):
    """Solve / estimate / mark / refine until a stopping criterion fires.

    The level set is frozen: refinement re-trims only the new elements at
    their reduced octree depth.  Marked elements at the depth cap are
    discarded; the loop stops with status "capped" when nothing refinable
    remains, "tol" on reaching the estimator tolerance and "steps" at the
    step budget.  With `uniform` every element is marked and no completion
    mask is applied.  Returns (final imesh, final solution, trace, status);
    trace rows carry step, ndof, estimator and true errors (NaN without an
    exact solution).
    """
    params = StabilizationParams() if params is None else params
    cap = imesh.depth if config.max_depth is None \
        else min(config.max_depth, imesh.depth)
    degree = space.degree
    trace = []
    status = "steps"
    solution = None

    for step in range(config.max_steps + 1):
        try:
            solution = solve(assemble(problem, imesh, space, params=params))
        except SolverError as exc:
            raise SolverError(f"step {step}: {exc}") from exc
        indicators = compute_indicators(solution, problem, params=params)
        estimator = indicators.estimator
        if problem.exact_velocity is not None:
            align = not any(problem.face_kind(f) == "neumann"
                            for f in imesh.all_boundary_faces())
            err_e = true_energy_error(solution, problem, params=params,
                                      align_pressure_mean=align)
            err_u = l2_errors(imesh, space, solution.u, solution.p,
                              problem.exact_velocity, problem.exact_pressure,
                              align_pressure_mean=align)[0]
        else:
            err_e = err_u = float("nan")
        trace.append({"step": step, "ndof": solution.report["dim"],
                      "estimator": estimator, "err_energy": err_e,
                      "err_u_l2": err_u})
        if snapshot_dir is not None:
            from .immersed_mesh import export_immersed_vtk
            export_immersed_vtk(imesh, f"{snapshot_dir}/adapt_step_{step}.vtk")

        if config.tol > 0 and estimator <= config.tol:
            status = "tol"
            break
        if step == config.max_steps:
            status = "steps"
            break
        marked = dorfler_mark(indicators, 1.0 if uniform else config.theta)
        marked = [e for e in marked if e[0] < cap]
        if not uniform:
            masked = _mask_completion(imesh.mesh, marked, degree)
            marked = sorted(e for e in masked if e[0] < cap)
        if not marked:
            status = "capped"
            break
        new_mesh = imesh.mesh.refine(marked)
        imesh = refine_geometry(imesh, new_mesh)
        space = build_space(imesh.mesh, degree)

    return imesh, solution, trace, status


def write_adapt_csv(trace, path):
    """`step,ndof,estimator,err_energy,err_u_l2` with full-precision floats."""
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "ndof", "estimator", "err_energy",
                         "err_u_l2"])
        for row in trace:
            writer.writerow([row["step"], row["ndof"],
                             repr(float(row["estimator"])),
                             repr(float(row["err_energy"])),
                             repr(float(row["err_u_l2"]))])


# -- re-entrant corner benchmark ----------------------------------------------

CORNER_ANGLE = 1.5 * np.pi


def corner_exponent():
    """Smallest positive root of sin(lw) + l sin(w) = 0 for w = 3 pi / 2."""
    w = CORNER_ANGLE
    return brentq(lambda lam: np.sin(lam * w) + lam * np.sin(w),
                  0.5, 0.6, xtol=1e-15)


def corner_level_set():
    """Positive on (-1,1)^2 minus the closed quadrant x >= 0, y <= 0."""

    def phi(pts):
        pts = np.atleast_2d(pts)
        return np.maximum(-pts[:, 0], pts[:, 1])

    return phi


def _corner_psi(lam):
    w = CORNER_ANGLE
    cw = np.cos(lam * w)
    lp, lm = 1.0 + lam, 1.0 - lam

    def psi(t):
        return (np.sin(lp * t) * cw / lp - np.cos(lp * t)
                - np.sin(lm * t) * cw / lm + np.cos(lm * t))

    def dpsi(t):
        return (np.cos(lp * t) * cw + lp * np.sin(lp * t)
                - np.cos(lm * t) * cw - lm * np.sin(lm * t))

    def d2psi(t):
        return (-lp * np.sin(lp * t) * cw + lp ** 2 * np.cos(lp * t)
                + lm * np.sin(lm * t) * cw - lm ** 2 * np.cos(lm * t))

    def d3psi(t):
        return (-lp ** 2 * np.cos(lp * t) * cw - lp ** 3 * np.sin(lp * t)
                + lm ** 2 * np.cos(lm * t) * cw + lm ** 3 * np.sin(lm * t))

    return psi, dpsi, d2psi, d3psi


def corner_problem(viscosity=1.0) -> StokesProblem:
    """Stokes flow with the weakly singular corner solution.

    The velocity vanishes on both legs of the re-entrant corner, the body
    force is zero, and the top edge y = 1 of the background box carries the
    exact traction as a Neumann condition; all other boundary parts take the
    exact velocity as Dirichlet data.
    """
    lam = corner_exponent()
    mu = viscosity
    psi, dpsi, d2psi, d3psi = _corner_psi(lam)
    lp = 1.0 + lam

    def polar(pts):
        pts = np.atleast_2d(pts)
        x, y = pts[:, 0], pts[:, 1]
        r = np.hypot(x, y)
        t = np.arctan2(y, x)
        t = np.where(t < 0, t + 2.0 * np.pi, t)
        return r, t

    def u(pts):
        r, t = polar(pts)
        ct, st = np.cos(t), np.sin(t)
        rl = r ** lam
        return np.column_stack([rl * (lp * st * psi(t) + ct * dpsi(t)),
                                rl * (st * dpsi(t) - lp * ct * psi(t))])

    def grad_u(pts):
        r, t = polar(pts)
        ct, st = np.cos(t), np.sin(t)
        rl1 = r ** (lam - 1.0)
        # polar derivatives of the two Cartesian components
        fx = lp * st * psi(t) + ct * dpsi(t)
        fy = st * dpsi(t) - lp * ct * psi(t)
        dfx = lp * ct * psi(t) + lp * st * dpsi(t) \
            - st * dpsi(t) + ct * d2psi(t)
        dfy = ct * dpsi(t) + st * d2psi(t) \
            - lp * (-st) * psi(t) - lp * ct * dpsi(t)
        dr_ux, dt_ux = lam * rl1 * fx, r ** lam * dfx
        dr_uy, dt_uy = lam * rl1 * fy, r ** lam * dfy
        g = np.empty((len(r), 2, 2))
        g[:, 0, 0] = ct * dr_ux - st / r * dt_ux
        g[:, 0, 1] = st * dr_ux + ct / r * dt_ux
        g[:, 1, 0] = ct * dr_uy - st / r * dt_uy
        g[:, 1, 1] = st * dr_uy + ct / r * dt_uy
        return g

    def p(pts):
        r, t = polar(pts)
        return -mu * r ** (lam - 1.0) * (lp ** 2 * dpsi(t) + d3psi(t)) \
            / (1.0 - lam)

    def traction(pts):
        # only sampled on the y = 1 outer edge, normal (0, 1)
        g = grad_u(pts)
        pe = p(pts)
        return np.column_stack([mu * (g[:, 0, 1] + g[:, 1, 0]),
                                2.0 * mu * g[:, 1, 1] - pe])

    def classify(face):
        return ("neumann"
                if face.kind == "outer" and face.normal[1] > 0.5
                else "dirichlet")

    return StokesProblem(viscosity=viscosity, dirichlet=u, neumann=traction,
                         classify=classify, exact_velocity=u,
                         exact_pressure=p, exact_velocity_gradient=grad_u)


def corner_setup(nelems, degree, depth=6):
    """Immersed corner geometry on (-1,1)^2 and its analysis space."""
    mesh = uniform_mesh([-1.0, -1.0], [1.0, 1.0], nelems)
    imesh = build_immersed_mesh(corner_level_set(), mesh, depth)
    return imesh, build_space(imesh.mesh, degree)


def corner_benchmark(degree, steps=8, theta=0.5, nelems=8, depth=6,
                     uniform_steps=None, params=None):
    """Adaptive vs uniform refinement traces for the corner problem."""
    problem = corner_problem()
    imesh, space = corner_setup(nelems, degree, depth)
    config = AdaptConfig(theta=theta, max_steps=steps)
    _, _, adaptive, status = adapt_loop(problem, imesh, space, config,
                                        params=params)
    if uniform_steps is None:
        uniform_steps = min(steps, 3)
    imesh, space = corner_setup(nelems, degree, depth)
    ucfg = AdaptConfig(theta=theta, max_steps=uniform_steps)
    _, _, uniform, _ = adapt_loop(problem, imesh, space, ucfg, params=params,
                                  uniform=True)
    return {"adaptive": adaptive, "uniform": uniform, "status": status,
            "degree": degree}


def rate_vs_ndof(trace, key="err_energy"):
    """Least-squares slope of log(error) against log(ndof)."""
    nd = np.array([row["ndof"] for row in trace], dtype=float)
    err = np.array([row[key] for row in trace], dtype=float)
    keep = np.isfinite(err) & (err > 0)
    return float(np.polyfit(np.log(nd[keep]), np.log(err[keep]), 1)[0])
