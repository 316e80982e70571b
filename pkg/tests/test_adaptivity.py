"""Tests for error indicators, Doerfler marking and the adaptive loop."""

import csv
import itertools
import tempfile

import numpy as np
import pytest
from scipy.stats import spearmanr

from scanflow.adaptivity import (
    AdaptConfig,
    ElementIndicators,
    PART_NAMES,
    adapt_loop,
    compute_indicators,
    corner_benchmark,
    corner_exponent,
    corner_level_set,
    corner_problem,
    corner_setup,
    dorfler_mark,
    element_indicator,
    rate_vs_ndof,
    write_adapt_csv,
)
from scanflow.immersed_mesh import build_immersed_mesh
from scanflow.spline_basis import build_space, uniform_mesh
from scanflow.stokes_solver import (
    SolverError,
    StokesProblem,
    disk_convergence_study,
    disk_setup,
    manufactured_disk_problem,
    solve_stokes,
)


def _interior_points(n, seed=7):
    rng = np.random.default_rng(seed)
    pts = []
    while len(pts) < n:
        q = rng.uniform(-1, 1, size=2)
        if max(-q[0], q[1]) > 0.15 and np.hypot(*q) > 0.15:
            pts.append(q)
    return np.array(pts)


def _quadratic_problem():
    # u = curl(x^2 y) is quadratic and divergence free, p linear w/ zero mean
    mu = 1.0

    def u(pts):
        x, y = pts[:, 0], pts[:, 1]
        return np.column_stack([x ** 2, -2 * x * y])

    def grad_u(pts):
        x, y = pts[:, 0], pts[:, 1]
        g = np.zeros((len(pts), 2, 2))
        g[:, 0, 0] = 2 * x
        g[:, 1, 0] = -2 * y
        g[:, 1, 1] = -2 * x
        return g

    def p(pts):
        return pts[:, 0] + pts[:, 1] - 1.0

    def f(pts):
        out = np.ones((len(pts), 2))
        out[:, 0] -= 2 * mu
        return out

    return StokesProblem(viscosity=mu, body_force=f, dirichlet=u,
                         exact_velocity=u, exact_pressure=p,
                         exact_velocity_gradient=grad_u)


def _uncut_square(nelems, degree, depth=1):
    mesh = uniform_mesh([0.0, 0.0], [1.0, 1.0], nelems)
    imesh = build_immersed_mesh(
        lambda q: np.ones(len(np.atleast_2d(q))), mesh, depth)
    return imesh, build_space(imesh.mesh, degree)


@pytest.fixture(scope="module")
def disk_solution():
    problem = manufactured_disk_problem()
    imesh, space = disk_setup(8, 2)
    return problem, solve_stokes(problem, imesh, space)


@pytest.fixture(scope="module")
def corner_k1():
    return corner_benchmark(1, steps=8, uniform_steps=3)


@pytest.fixture(scope="module")
def corner_k2():
    return corner_benchmark(2, steps=8, uniform_steps=3)


class TestCornerSolution:
    def test_exponent_solves_transcendental(self):
        lam = corner_exponent()
        w = 1.5 * np.pi
        assert abs(np.sin(lam * w) + lam * np.sin(w)) <= 1e-14
        assert lam == pytest.approx(0.54448373678246, abs=1e-12)

    def test_velocity_vanishes_on_legs(self):
        problem = corner_problem()
        legs = np.array([[0.2, 0.0], [0.7, 0.0], [1.0, 0.0],
                         [0.0, -0.2], [0.0, -0.7], [0.0, -1.0]])
        assert abs(problem.exact_velocity(legs)).max() <= 1e-12

    def test_gradient_matches_fd(self):
        problem = corner_problem()
        h = 1e-6
        for q in _interior_points(20):
            g = problem.exact_velocity_gradient(q[None])[0]
            fd = np.empty((2, 2))
            for d in range(2):
                e = np.zeros(2)
                e[d] = h
                fd[:, d] = (problem.exact_velocity((q + e)[None])[0]
                            - problem.exact_velocity((q - e)[None])[0]) / (2 * h)
            assert np.allclose(g, fd, rtol=1e-6, atol=1e-6)

    def test_fields_solve_homogeneous_stokes(self):
        # -mu lap(u) + grad p = 0 checked by second differences
        problem = corner_problem(viscosity=1.0)
        h = 1e-4
        for q in _interior_points(20):
            lap = np.zeros(2)
            gp = np.zeros(2)
            for d in range(2):
                e = np.zeros(2)
                e[d] = h
                lap += (problem.exact_velocity((q + e)[None])[0]
                        - 2 * problem.exact_velocity(q[None])[0]
                        + problem.exact_velocity((q - e)[None])[0]) / h ** 2
                gp[d] = (problem.exact_pressure((q + e)[None])[0]
                         - problem.exact_pressure((q - e)[None])[0]) / (2 * h)
            scale = max(abs(gp).max(), abs(lap).max(), 1.0)
            assert abs(-lap + gp).max() / scale <= 1e-5
            g = problem.exact_velocity_gradient(q[None])[0]
            assert abs(g[0, 0] + g[1, 1]) <= 1e-12

    def test_traction_consistent_with_fields(self):
        problem = corner_problem(viscosity=1.0)
        pts = np.column_stack([np.linspace(-0.9, 0.9, 7), np.ones(7)])
        g = problem.exact_velocity_gradient(pts)
        pe = problem.exact_pressure(pts)
        expect = np.column_stack([g[:, 0, 1] + g[:, 1, 0],
                                  2 * g[:, 1, 1] - pe])
        assert np.allclose(problem.neumann(pts), expect, atol=1e-13)

    def test_level_set_carves_quadrant(self):
        phi = corner_level_set()
        vals = phi(np.array([[0.5, -0.5], [-0.5, -0.5], [0.5, 0.5],
                             [-0.5, 0.5], [0.5, 0.0], [0.0, -0.5]]))
        assert vals[0] < 0
        assert (vals[1:4] > 0).all()
        assert vals[4] == 0.0 and vals[5] == 0.0


class TestIndicators:
    def test_exact_insertion_all_parts_vanish(self):
        problem = _quadratic_problem()
        imesh, space = _uncut_square(4, 2)
        assert not imesh.crossed and not imesh.boundary_faces
        sol = solve_stokes(problem, imesh, space)
        ind = compute_indicators(sol, problem)
        for sq in ind.squares.values():
            for name in PART_NAMES:
                assert np.sqrt(sq[name]) <= 1e-9
        assert ind.estimator <= 1e-9

    def test_interior_elements_have_no_boundary_parts(self, disk_solution):
        problem, sol = disk_solution
        imesh = sol.imesh
        ind = compute_indicators(sol, problem)
        owners = {f.element for f in imesh.all_boundary_faces()}
        near_ghost = {e for f in imesh.ghost for e in (f.left, f.right)}
        interior = [e for e in imesh.elements
                    if e not in imesh.crossed and e not in owners
                    and e not in near_ghost]
        assert interior
        for element in interior:
            sq = ind.squares[element]
            assert sq["neumann"] == 0.0
            assert sq["nitsche"] == 0.0
            assert sq["nitsche_penalty"] == 0.0
            assert sq["ghost"] == 0.0
            assert sq["momentum"] > 0.0

    def test_estimator_is_root_sum_of_squares(self, disk_solution):
        problem, sol = disk_solution
        ind = compute_indicators(sol, problem)
        total = sum(ind.eta_squared(e) for e in ind.elements)
        assert ind.estimator ** 2 == pytest.approx(total, rel=1e-12)
        assert all(ind.eta(e) >= 0.0 for e in ind.elements)

    def test_element_loop_matches_face_loop(self, disk_solution):
        # double assembly: per-element scan vs single pass over faces
        problem, sol = disk_solution
        batch = compute_indicators(sol, problem)
        total_batch = batch.estimator ** 2
        total_single = 0.0
        for element in sol.imesh.elements:
            sq = element_indicator(sol, element, problem)
            total_single += sum(sq.values())
            for name in PART_NAMES:
                assert sq[name] == pytest.approx(
                    batch.squares[element][name], rel=1e-12, abs=1e-15)
        assert total_single == pytest.approx(total_batch, rel=1e-12)

    def test_smooth_splines_drop_stress_jump(self, disk_solution):
        # quadratic velocities have continuous gradients: only the k-th
        # derivative jump feeds the face terms
        problem, sol = disk_solution
        ind = compute_indicators(sol, problem)
        stress = max(sq["stress_jump"] for sq in ind.squares.values())
        press = max(sq["pressure_jump"] for sq in ind.squares.values())
        assert stress <= 1e-18
        assert press > 0.0

    def test_linear_splines_keep_stress_jump(self):
        problem = manufactured_disk_problem()
        imesh, space = disk_setup(8, 1)
        sol = solve_stokes(problem, imesh, space)
        ind = compute_indicators(sol, problem)
        assert max(sq["stress_jump"] for sq in ind.squares.values()) > 0.0


class TestDorflerMarking:
    @staticmethod
    def _indicators(values):
        squares = {(0, (i, 0)): {"momentum": float(v) ** 2}
                   for i, v in enumerate(values)}
        return ElementIndicators(squares=squares)

    def test_three_two_one(self):
        marked = dorfler_mark(self._indicators([3.0, 2.0, 1.0]), 0.5)
        assert marked == [(0, (0, 0))]

    def test_theta_one_marks_all_positive(self):
        marked = dorfler_mark(self._indicators([3.0, 0.0, 1.0]), 1.0)
        assert marked == [(0, (0, 0)), (0, (2, 0))]

    def test_equal_etas_mark_half(self):
        marked = dorfler_mark(self._indicators([1.0, 1.0, 1.0, 1.0]), 0.5)
        assert len(marked) == 2

    def test_tie_break_by_element_id(self):
        marked = dorfler_mark(self._indicators([2.0, 2.0, 2.0]), 0.3)
        assert marked == [(0, (0, 0))]

    def test_zero_total_marks_nothing(self):
        assert dorfler_mark(self._indicators([0.0, 0.0]), 0.5) == []

    def test_invalid_theta(self):
        ind = self._indicators([1.0])
        for theta in (0.0, -0.5, 1.5):
            with pytest.raises(ValueError, match="theta"):
                dorfler_mark(ind, theta)

    def test_matches_exhaustive_enumeration(self):
        rng = np.random.default_rng(41)
        for _ in range(100):
            n = int(rng.integers(1, 13))
            etas = rng.uniform(0.05, 1.0, size=n)
            theta = float(rng.uniform(0.05, 0.95))
            ind = self._indicators(etas)
            marked = dorfler_mark(ind, theta)
            total = float(np.sum(etas ** 2))
            got = sum(etas[e[1][0]] ** 2 for e in marked)
            assert got >= theta * total
            # smallest subset reaching the fraction, by brute force
            best = n + 1
            for size in range(1, n + 1):
                if any(sum(etas[list(s)] ** 2) >= theta * total
                       for s in itertools.combinations(range(n), size)):
                    best = size
                    break
            assert len(marked) == best


class TestAdaptLoop:
    def test_config_validation(self):
        for theta in (0.0, 1.0, 1.5):
            with pytest.raises(ValueError, match="theta"):
                AdaptConfig(theta=theta)
        with pytest.raises(ValueError, match="max_steps"):
            AdaptConfig(max_steps=0)
        with pytest.raises(ValueError, match="tol"):
            AdaptConfig(tol=-1.0)

    def test_tol_stops_immediately(self):
        problem = corner_problem()
        imesh, space = corner_setup(8, 1)
        _, _, trace, status = adapt_loop(problem, imesh, space,
                                         AdaptConfig(max_steps=5, tol=1e3))
        assert status == "tol"
        assert len(trace) == 1

    def test_step_budget(self):
        problem = corner_problem()
        imesh, space = corner_setup(8, 1)
        _, _, trace, status = adapt_loop(problem, imesh, space,
                                         AdaptConfig(max_steps=1))
        assert status == "steps"
        assert len(trace) == 2
        assert trace[1]["ndof"] >= trace[0]["ndof"]

    def test_depth_cap_terminates(self):
        problem = corner_problem()
        imesh, space = corner_setup(8, 1, depth=4)
        config = AdaptConfig(max_steps=30, max_depth=1)
        fin, _, trace, status = adapt_loop(problem, imesh, space, config)
        assert status == "capped"
        assert max(lev for lev, _ in fin.elements) <= 1
        assert len(trace) < 31

    def test_geometry_frozen_across_steps(self):
        problem = manufactured_disk_problem()
        imesh, space = disk_setup(8, 1)
        before = imesh.inside_volume()
        fin, _, _, _ = adapt_loop(problem, imesh, space,
                                  AdaptConfig(max_steps=2))
        assert fin.inside_volume() == pytest.approx(before, rel=1e-12)
        assert max(lev for lev, _ in fin.elements) >= 1

    def test_uniform_mode_refines_everything(self):
        problem = manufactured_disk_problem()
        imesh, space = disk_setup(8, 1)
        fin, _, trace, _ = adapt_loop(problem, imesh, space,
                                      AdaptConfig(max_steps=1), uniform=True)
        assert all(lev == 1 for lev, _ in fin.elements)
        assert trace[1]["ndof"] > 2 * trace[0]["ndof"]

    def test_solver_failure_carries_step(self, monkeypatch):
        problem = manufactured_disk_problem()
        imesh, space = disk_setup(8, 1)

        def boom(system):
            raise SolverError("singular factorization")

        monkeypatch.setattr("scanflow.adaptivity.solve", boom)
        with pytest.raises(SolverError, match="step 0"):
            adapt_loop(problem, imesh, space, AdaptConfig(max_steps=2))

    def test_snapshots_written(self):
        problem = manufactured_disk_problem()
        imesh, space = disk_setup(8, 1)
        with tempfile.TemporaryDirectory() as tmp:
            adapt_loop(problem, imesh, space, AdaptConfig(max_steps=1),
                       snapshot_dir=tmp)
            for step in (0, 1):
                text = open(f"{tmp}/adapt_step_{step}.vtk").read()
                assert text.startswith("# vtk DataFile")

    def test_trace_csv(self):
        problem = manufactured_disk_problem()
        imesh, space = disk_setup(8, 1)
        _, _, trace, _ = adapt_loop(problem, imesh, space,
                                    AdaptConfig(max_steps=1))
        with tempfile.NamedTemporaryFile("r", suffix=".csv") as fh:
            write_adapt_csv(trace, fh.name)
            lines = fh.read().splitlines()
        assert lines[0] == "step,ndof,estimator,err_energy,err_u_l2"
        row = next(csv.DictReader(lines))
        assert float(row["estimator"]) == trace[0]["estimator"]
        assert float(row["err_u_l2"]) == trace[0]["err_u_l2"]


class TestCornerBenchmark:
    def test_adaptive_rate_near_optimal(self, corner_k1):
        rate = rate_vs_ndof(corner_k1["adaptive"])
        assert abs(rate - (-0.5)) <= 0.15 * 0.5

    def test_adaptive_beats_uniform(self, corner_k1):
        adaptive = rate_vs_ndof(corner_k1["adaptive"])
        uniform = rate_vs_ndof(corner_k1["uniform"])
        assert adaptive < uniform
        est_a = rate_vs_ndof(corner_k1["adaptive"], "estimator")
        est_u = rate_vs_ndof(corner_k1["uniform"], "estimator")
        assert est_a < est_u

    def test_quadratic_adaptive_at_least_uniform(self, corner_k2):
        adaptive = rate_vs_ndof(corner_k2["adaptive"])
        uniform = rate_vs_ndof(corner_k2["uniform"])
        assert adaptive <= uniform

    def test_refinement_localizes_at_corner(self):
        problem = corner_problem()
        imesh, space = corner_setup(8, 1)
        fin, _, _, _ = adapt_loop(problem, imesh, space,
                                  AdaptConfig(max_steps=5))
        top = max(lev for lev, _ in fin.elements)
        assert top >= 3
        for lev, cell in fin.elements:
            if lev != top:
                continue
            lo, hi = fin.mesh.cell_box(lev, cell)
            far = np.maximum(np.abs(lo), np.abs(hi))
            assert np.hypot(*far) <= 0.1


class TestDiskEstimator:
    def test_estimator_tracks_error(self):
        problem = manufactured_disk_problem()
        rows = disk_convergence_study(1, nelems=(8, 16, 32, 64))
        est = [compute_indicators(r["solution"], problem).estimator
               for r in rows]
        err = [r["err_energy"] for r in rows]
        assert spearmanr(est, err).statistic == 1.0
        assert all(b < a for a, b in zip(est, est[1:]))
