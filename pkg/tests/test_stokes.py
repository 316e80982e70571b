"""Tests for the stabilized immersed Stokes solver."""

import csv
import tempfile
import warnings

import numpy as np
import pytest
import sympy as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from scanflow.immersed_mesh import build_immersed_mesh
from scanflow.spline_basis import build_space, uniform_mesh
from scanflow.stokes_solver import (
    SolverError,
    StabilizationParams,
    StokesProblem,
    _kth_normal_jump,
    assemble,
    conditioning_proxy,
    disk_convergence_study,
    disk_level_set,
    disk_setup,
    divergence_l2,
    energy_norm,
    export_solution_vtk,
    interpolate_exact,
    l2_errors,
    manufactured_disk_problem,
    solve,
    solve_stokes,
    volume_rules,
    write_convergence_csv,
)


@pytest.fixture(scope="module")
def disk8():
    problem = manufactured_disk_problem()
    imesh, space = disk_setup(8, 2)
    system = assemble(problem, imesh, space)
    return problem, imesh, space, system


@pytest.fixture(scope="module")
def disk8_solution(disk8):
    return solve(disk8[3])


@pytest.fixture(scope="module")
def study_k1():
    return disk_convergence_study(1, nelems=(8, 16, 32, 64))


@pytest.fixture(scope="module")
def study_k2():
    return disk_convergence_study(2, nelems=(8, 16, 32, 64))


def _fit_order(errors):
    # least-squares slope of log2(err) against the dyadic level
    lev = np.arange(len(errors))
    return float(-np.polyfit(lev, np.log2(errors), 1)[0])


class TestAssembly:
    def test_velocity_block_symmetric(self, disk8):
        A = disk8[3].A
        assert abs(A - A.T).max() <= 1e-12 * abs(A).max()

    def test_stabilization_blocks_psd(self, disk8):
        problem, imesh, space, system = disk8
        noghost = assemble(problem, imesh, space,
                           params=StabilizationParams(gamma_ghost=0.0))
        ghost = (system.A - noghost.A).toarray()
        S = system.S.toarray()
        rng = np.random.default_rng(3)
        for _ in range(20):
            x = rng.standard_normal(ghost.shape[0])
            x /= np.linalg.norm(x)
            assert x @ ghost @ x >= -1e-12
            y = rng.standard_normal(S.shape[0])
            y /= np.linalg.norm(y)
            assert y @ S @ y >= -1e-12

    def test_only_kth_normal_jump_survives(self, disk8):
        # C^1 quadratics: jumps of the 0th and 1st normal derivative vanish
        # on every interior face, the 2nd carries the penalty
        _, imesh, space, _ = disk8
        assert space.degree == 2 and imesh.skeleton
        top = 0.0
        for face in imesh.skeleton:
            for low in (0, 1):
                _, J, _ = _kth_normal_jump(space, face, low)
                assert abs(J).max() <= 1e-12
            _, J, _ = _kth_normal_jump(space, face, 2)
            top = max(top, abs(J).max())
        assert top > 1.0

    def test_pressure_zero_mean_constraint(self, disk8, disk8_solution):
        system = disk8[3]
        sol = disk8_solution
        assert sol.multiplier is not None
        mean = system.mean_vector @ sol.p[system.active_dofs]
        assert abs(mean) <= 1e-10 * abs(sol.p).max()

    def test_face_classifier_validated(self, disk8):
        problem, imesh, space, _ = disk8
        bad = StokesProblem(body_force=problem.body_force,
                            classify=lambda face: "robin")
        with pytest.raises(ValueError, match="robin"):
            assemble(bad, imesh, space)

    def test_parameter_validation(self):
        with pytest.raises(ValueError, match="beta"):
            StabilizationParams(beta=0.0)
        with pytest.raises(ValueError, match="nonnegative"):
            StabilizationParams(gamma_skeleton=-1.0)
        with pytest.raises(ValueError, match="viscosity"):
            StokesProblem(viscosity=-2.0)

    def test_volume_rule_override(self, disk8):
        problem, imesh, space, system = disk8
        element = sorted(imesh.crossed)[0]
        override = {element: volume_rules(imesh, space.degree + 2)[element]}
        sys2 = assemble(problem, imesh, space, quad=override)
        base = solve(system)
        up = solve(sys2)
        ref = l2_errors(imesh, space, base.u, base.p, problem.exact_velocity,
                        problem.exact_pressure, align_pressure_mean=True)[0]
        alt = l2_errors(imesh, space, up.u, up.p, problem.exact_velocity,
                        problem.exact_pressure, align_pressure_mean=True)[0]
        assert alt == pytest.approx(ref, rel=0.2)


class TestManufactured:
    def test_forcing_matches_strong_form(self):
        # independent route: symbolic substitution into momentum balance
        x, y = sp.symbols("x y")
        mu = sp.Rational(7, 10)
        psi = sp.sin(sp.pi * x) * sp.sin(sp.pi * y)
        u = sp.Matrix([sp.diff(psi, y), -sp.diff(psi, x)])
        p = sp.cos(sp.pi * x) * sp.cos(sp.pi * y)
        grad = u.jacobian([x, y])
        strain = (grad + grad.T) / 2
        f = sp.Matrix([
            -sum(sp.diff(2 * mu * strain[i, j], v)
                 for j, v in enumerate((x, y))) + sp.diff(p, (x, y)[i])
            for i in range(2)
        ])
        assert sp.simplify(sp.diff(u[0], x) + sp.diff(u[1], y)) == 0
        f_num = sp.lambdify((x, y), f, "numpy")
        u_num = sp.lambdify((x, y), u, "numpy")
        g_num = sp.lambdify((x, y), grad, "numpy")

        problem = manufactured_disk_problem(viscosity=0.7)
        rng = np.random.default_rng(5)
        pts = rng.uniform(0.2, 0.8, size=(40, 2))
        fh = problem.body_force(pts)
        uh = problem.exact_velocity(pts)
        gh = problem.exact_velocity_gradient(pts)
        for i, (px, py) in enumerate(pts):
            assert np.allclose(fh[i], np.ravel(f_num(px, py)), rtol=1e-12,
                               atol=1e-12)
            assert np.allclose(uh[i], np.ravel(u_num(px, py)), rtol=1e-12,
                               atol=1e-12)
            assert np.allclose(gh[i], np.asarray(g_num(px, py)), rtol=1e-12,
                               atol=1e-12)

    def test_zero_data_zero_solution(self, disk8):
        _, imesh, space, _ = disk8
        sol = solve_stokes(StokesProblem(), imesh, space)
        assert abs(sol.u).max() == 0.0
        assert abs(sol.p).max() == 0.0

    def test_residual_and_report(self, disk8, disk8_solution):
        system = disk8[3]
        report = disk8_solution.report
        assert report["residual"] <= 1e-10
        assert report["dim"] == system.ndof + 1  # pure Dirichlet multiplier
        assert report["nnz"] > 0

    def test_exterior_coefficients_stay_zero(self, disk8, disk8_solution):
        _, _, space, system = disk8
        outside = np.setdiff1d(np.arange(space.dim), system.active_dofs)
        assert outside.size > 0
        assert abs(disk8_solution.u[:, outside]).max() == 0.0
        assert abs(disk8_solution.p[outside]).max() == 0.0

    def test_point_values_near_exact(self, disk8_solution):
        pt = np.array([0.45, 0.55])
        exact_u = np.array([np.pi * np.sin(np.pi * 0.45) * np.cos(np.pi * 0.55),
                            -np.pi * np.cos(np.pi * 0.45) * np.sin(np.pi * 0.55)])
        exact_p = np.cos(np.pi * 0.45) * np.cos(np.pi * 0.55)
        assert np.allclose(disk8_solution.velocity_at(pt), exact_u, atol=5e-3)
        assert disk8_solution.pressure_at(pt) == pytest.approx(exact_p,
                                                               abs=5e-2)

    def test_neumann_boundary_path(self):
        # western half of the circle gets the exact traction instead of g
        problem = manufactured_disk_problem()
        mu = problem.viscosity

        def traction(pts):
            pts = np.atleast_2d(pts)
            nrm = (pts - np.array([0.5, 0.5]))
            nrm /= np.linalg.norm(nrm, axis=1)[:, None]
            grad = problem.exact_velocity_gradient(pts)
            strain = 0.5 * (grad + np.transpose(grad, (0, 2, 1)))
            sig = 2 * mu * strain
            sig[:, 0, 0] -= problem.exact_pressure(pts)
            sig[:, 1, 1] -= problem.exact_pressure(pts)
            return np.einsum("nij,nj->ni", sig, nrm)

        problem.neumann = traction
        problem.classify = lambda face: ("neumann"
                                         if face.midpoint[0] < 0.35
                                         else "dirichlet")
        imesh, space = disk_setup(16, 1)
        system = assemble(problem, imesh, space)
        assert system.has_neumann
        sol = solve(system)
        assert sol.multiplier is None
        err_u, _ = l2_errors(imesh, space, sol.u, sol.p,
                             problem.exact_velocity, problem.exact_pressure,
                             align_pressure_mean=True)
        assert err_u < 5e-2


class TestConvergence:
    @pytest.mark.parametrize("degree", [1, 2])
    def test_velocity_rate(self, degree, study_k1, study_k2):
        rows = study_k1 if degree == 1 else study_k2
        order = _fit_order([r["err_u_l2"] for r in rows])
        assert order >= degree + 0.8

    @pytest.mark.parametrize("degree", [1, 2])
    def test_divergence_monotone(self, degree, study_k1, study_k2):
        rows = study_k1 if degree == 1 else study_k2
        divs = [divergence_l2(r["imesh"], r["space"], r["solution"].u)
                for r in rows]
        assert all(b < a for a, b in zip(divs, divs[1:]))

    @pytest.mark.parametrize("degree", [1, 2])
    def test_energy_interpolant_rate(self, degree, study_k1, study_k2):
        rows = study_k1 if degree == 1 else study_k2
        order = _fit_order([r["err_energy"] for r in rows])
        assert order >= degree - 0.2

    def test_convergence_csv(self, study_k1):
        with tempfile.NamedTemporaryFile("r", suffix=".csv") as fh:
            write_convergence_csv(study_k1, fh.name)
            lines = fh.read().splitlines()
        assert lines[0] == "level,ndof,err_u_l2,err_p_l2,err_energy"
        assert len(lines) == 1 + len(study_k1)
        row = next(csv.DictReader(lines))
        assert int(row["ndof"]) == study_k1[0]["ndof"]
        assert float(row["err_u_l2"]) == study_k1[0]["err_u_l2"]


class TestEnergyNorm:
    def test_zero_fields(self, disk8):
        _, imesh, space, _ = disk8
        zero = np.zeros((2, space.dim)), np.zeros(space.dim)
        assert energy_norm(zero, imesh, space) == 0.0

    @settings(max_examples=20, deadline=None)
    @given(st.floats(min_value=-8.0, max_value=8.0)
           .filter(lambda c: abs(c) > 1e-3))
    def test_absolute_homogeneity(self, disk8, disk8_solution, c):
        _, imesh, space, _ = disk8
        sol = disk8_solution
        base = energy_norm((sol.u, sol.p), imesh, space)
        scaled = energy_norm((c * sol.u, c * sol.p), imesh, space)
        assert scaled == pytest.approx(abs(c) * base, rel=1e-12)

    def test_interpolant_error_positive(self, disk8, disk8_solution):
        problem, imesh, space, _ = disk8
        pi_u, pi_p = interpolate_exact(space, problem.exact_velocity,
                                       problem.exact_pressure)
        err = energy_norm((disk8_solution.u - pi_u, disk8_solution.p - pi_p),
                          imesh, space)
        assert 0.0 < err < 1.0


class TestStabilizationEffects:
    def test_skeleton_suppresses_sliver_pressure(self):
        # slivers: min inside-fraction ~2e-5 for this offset
        phi = disk_level_set(radius=0.3, center=(0.5 + 1e-4, 0.5))
        mesh = uniform_mesh([0.0, 0.0], [1.0, 1.0], 10)
        imesh = build_immersed_mesh(phi, mesh, 3)
        fractions = [imesh.partitions[el].inside_volume() / 0.01
                     for el in imesh.elements]
        assert min(fractions) < 1e-3
        space = build_space(imesh.mesh, 2)
        problem = manufactured_disk_problem()
        stable = solve_stokes(problem, imesh, space)
        wild = solve_stokes(problem, imesh, space,
                            params=StabilizationParams(gamma_skeleton=0.0))
        assert abs(wild.p).max() >= 10.0 * abs(stable.p).max()

    def test_ghost_bounds_conditioning(self):
        problem = manufactured_disk_problem()
        mesh = uniform_mesh([0.0, 0.0], [1.0, 1.0], 8)
        space = None
        rng = np.random.default_rng(11)
        spread = {}
        for gamma in (5e-2, 0.0):
            proxies = []
            rng = np.random.default_rng(11)
            for _ in range(20):
                center = 0.5 + rng.uniform(-0.06, 0.06, size=2)
                imesh = build_immersed_mesh(disk_level_set(0.3, center),
                                            mesh, 3)
                if space is None:
                    space = build_space(imesh.mesh, 2)
                params = StabilizationParams(gamma_ghost=gamma)
                proxies.append(conditioning_proxy(
                    assemble(problem, imesh, space, params=params)))
            spread[gamma] = max(proxies) / min(proxies)
        assert spread[5e-2] <= 1e2
        assert spread[0.0] >= 1e3


class TestSolveDiagnostics:
    def test_singular_system_reported(self, disk8):
        problem, imesh, space, _ = disk8
        system = assemble(problem, imesh, space)
        # orphan the first velocity dof: its row/column vanish entirely
        A = system.A.tolil()
        A[0, :] = 0.0
        A[:, 0] = 0.0
        system.A = A.tocsr()
        B = system.B.tolil()
        B[:, 0] = 0.0
        system.B = B.tocsr()
        system.F[0] = 0.0
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            with pytest.raises(SolverError, match="singular|residual"):
                solve(system)

    def test_vtk_export(self, disk8_solution):
        with tempfile.NamedTemporaryFile("r", suffix=".vtk") as fh:
            export_solution_vtk(disk8_solution, fh.name)
            text = fh.read()
        assert text.startswith("# vtk DataFile")
        assert "VECTORS velocity double" in text
        assert "SCALARS pressure double" in text
        assert "POLYGONS" in text
