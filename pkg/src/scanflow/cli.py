"""Command-line driver for the scan-to-flow pipeline.

Subcommands: ``segment`` (scan to spline level set), ``quadrature``
(cut-cell rule optimization trace), ``solve`` (uniform refinement study on
the immersed disk), ``adapt`` (residual-driven refinement on the immersed
disk), ``bench corner`` (adaptive vs uniform on the re-entrant corner) and
``bench quad-circle`` (rule strategies on a square with a circular hole).

Runs are configured by an INI file; unknown sections or keys are rejected
so stale manifests fail loudly.  Outputs are CSV with shortest round-trip
float formatting plus legacy-VTK ASCII, and rerunning a config reproduces
the bytes exactly.  Exit codes: 0 success, 2 bad configuration or input,
3 numerical failure.
"""

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from .adaptivity import (AdaptConfig, adapt_loop, corner_benchmark,
                         rate_vs_ndof, write_adapt_csv)
from .immersed_mesh import build_immersed_mesh, trim_element
from .quadrature_opt import StopRule, equal_order_rule, optimize, rule_error
from .scan_io import ScanFormatError, load_pgm
from .segmentation import GeometryError, preserve_topology, smooth
from .spline_basis import build_space, uniform_mesh
from .stokes_solver import (SolverError, StabilizationParams,
                            disk_convergence_study, export_solution_vtk,
                            manufactured_disk_problem, disk_setup,
                            write_convergence_csv)
from ._gauss import gauss_box


class ConfigError(ValueError):
    """Bad or missing configuration; maps to exit code 2."""


def _parse_bool(raw):
    low = raw.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _parse_pair(raw):
    parts = [float(p) for p in raw.split(",")]
    if len(parts) != 2:
        raise ValueError("expected two comma-separated numbers")
    return tuple(parts)


def _parse_dims(raw):
    parts = [int(p) for p in raw.split(",")]
    if len(parts) != 2 or min(parts) < 1:
        raise ValueError("expected two comma-separated positive integers")
    return tuple(parts)


def _parse_formats(raw):
    fmts = tuple(sorted({p.strip() for p in raw.split(",") if p.strip()}))
    bad = [f for f in fmts if f not in ("csv", "vtk")]
    if bad:
        raise ValueError(f"unknown format {bad[0]!r} (known: csv, vtk)")
    return fmts


_SCHEMA = {
    "scan": {"input": str, "spacing": _parse_pair, "threshold": float,
             "repair": _parse_bool},
    "spline": {"degree": int, "mesh": _parse_dims, "max_level_jump": int,
               "levels": int},
    "tessellation": {"depth": int},
    "quadrature": {"strategy": str, "criterion": str, "budget": int,
                   "target": float},
    "stokes": {"viscosity": float, "beta": float, "gamma_ghost": float,
               "gamma_skeleton": float, "boundary": str},
    "adaptivity": {"theta": float, "steps": int, "tol": float},
    "output": {"directory": str, "formats": _parse_formats},
}


class RunConfig:
    """Typed view of an INI run manifest.

    Values are parsed eagerly so every config mistake is reported with the
    file and key that caused it, before any computation starts.
    """

    def __init__(self, path, data, out=None, spacing=None, threads=1):
        self.path = path
        self.data = data
        self.out_override = out
        self.spacing_override = spacing
        self.threads = threads

    @classmethod
    def load(cls, path, out=None, spacing=None, threads=1):
        import configparser

        path = Path(path)
        parser = configparser.ConfigParser(interpolation=None)
        try:
            with open(path) as fh:
                parser.read_file(fh, source=str(path))
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from exc
        except configparser.Error as exc:
            raise ConfigError(str(exc)) from exc
        data = {}
        for section in parser.sections():
            if section not in _SCHEMA:
                raise ConfigError(f"{path}: unknown section [{section}]")
            known = _SCHEMA[section]
            data[section] = {}
            for key, raw in parser.items(section):
                if key not in known:
                    raise ConfigError(
                        f"{path}: unknown key {key!r} in [{section}]")
                try:
                    data[section][key] = known[key](raw)
                except ValueError as exc:
                    raise ConfigError(
                        f"{path}: [{section}] {key} = {raw!r}: {exc}") from exc
        return cls(path, data, out=out, spacing=spacing, threads=threads)

    def get(self, section, key, default=None):
        return self.data.get(section, {}).get(key, default)

    def require(self, section, key):
        value = self.get(section, key)
        if value is None:
            raise ConfigError(
                f"{self.path}: missing required key {key!r} in [{section}]")
        return value

    def outdir(self):
        raw = self.out_override or self.get("output", "directory")
        if raw is None:
            raise ConfigError(
                f"{self.path}: no output directory ([output] directory or --out)")
        out = Path(raw)
        out.mkdir(parents=True, exist_ok=True)
        return out

    def formats(self):
        return self.get("output", "formats", ("csv", "vtk"))

    def spacing(self):
        return self.spacing_override or self.get("scan", "spacing")

    def stabilization(self):
        try:
            return StabilizationParams(
                beta=self.get("stokes", "beta", 100.0),
                gamma_ghost=self.get("stokes", "gamma_ghost", 5e-2),
                gamma_skeleton=self.get("stokes", "gamma_skeleton", 5e-2))
        except ValueError as exc:
            raise ConfigError(f"{self.path}: [stokes] {exc}") from exc

    def viscosity(self):
        mu = self.get("stokes", "viscosity", 1.0)
        if mu <= 0:
            raise ConfigError(f"{self.path}: [stokes] viscosity must be > 0")
        return mu

    def adapt_config(self, **overrides):
        try:
            return AdaptConfig(
                theta=overrides.get("theta", self.get("adaptivity", "theta", 0.5)),
                max_steps=self.get("adaptivity", "steps", 8),
                tol=self.get("adaptivity", "tol", 0.0))
        except ValueError as exc:
            raise ConfigError(f"{self.path}: [adaptivity] {exc}") from exc


def _write_csv(path, header, rows):
    def fmt(v):
        return repr(float(v)) if isinstance(v, float) else v

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([fmt(v) for v in row])


def _field_mean(field):
    # exact: the field is polynomial on every active cell
    space = field.space
    k = space.degree
    total = 0.0
    for lev, cell in space.mesh.active_cells():
        lo, hi = space.mesh.cell_box(lev, cell)
        pts, w = gauss_box(k + 1, lo, hi)
        total += field.intensity_on_cell(lev, cell, pts)[0] @ w
    lo, hi = space.mesh.root.box
    return float(total / np.prod(np.asarray(hi) - np.asarray(lo)))


def disk_exclusion_partition(depth, radius=0.55, center=(0.0, 0.0)):
    """Unit square as one cut element with a circular hole carved out."""
    n = 2 ** depth + 1
    xs = np.linspace(0.0, 1.0, n)
    X, Y = np.meshgrid(xs, xs, indexing="ij")
    vals = (X - center[0]) ** 2 + (Y - center[1]) ** 2 - radius ** 2
    return trim_element(vals, depth)


def _segment_field(cfg):
    path = Path(cfg.require("scan", "input"))
    if not path.is_absolute():
        path = cfg.path.parent / path
    grid = load_pgm(path, spacing=cfg.spacing())
    lo, hi = grid.box
    mesh = uniform_mesh(lo, hi, cfg.get("spline", "mesh", (8, 8)))
    space = build_space(mesh, cfg.get("spline", "degree", 2))
    threshold = cfg.get("scan", "threshold", 0.5)
    field = smooth(grid, space).with_threshold(threshold)
    report = None
    if cfg.get("scan", "repair", False):
        field, report = preserve_topology(grid, field, threshold)
    return grid, field, report


def cmd_segment(cfg):
    from .segmentation import export_levelset_vtk

    grid, field, report = _segment_field(cfg)
    out = cfg.outdir()
    field_mean = _field_mean(field)
    gap = abs(field_mean - grid.mean)
    print(f"conservation: field mean {field_mean!r} "
          f"vs voxel mean {grid.mean!r} (gap {gap:.3e})")
    rows = [("voxel_mean", grid.mean),
            ("field_mean", field_mean),
            ("conservation_gap", gap),
            ("threshold", field.f_crit),
            ("space_dim", field.space.dim)]
    if report is not None:
        print(f"topology repair: {report.iterations} refinement pass(es), "
              f"{report.mismatched_windows} window(s) unresolved, "
              f"status {report.status}")
        rows += [("repair_iterations", report.iterations),
                 ("repair_unresolved", report.mismatched_windows),
                 ("repair_status", report.status)]
    if "csv" in cfg.formats():
        _write_csv(out / "segment.csv", ("quantity", "value"), rows)
    if "vtk" in cfg.formats():
        export_levelset_vtk(field, out / "levelset.vtk")


def _stop_rule(cfg):
    kind = cfg.get("quadrature", "criterion", "budget")
    if kind == "budget":
        budget = cfg.require("quadrature", "budget")
        if budget < 1:
            raise ConfigError(f"{cfg.path}: [quadrature] budget must be >= 1")
        return StopRule(max_points=budget)
    if kind == "target":
        target = cfg.require("quadrature", "target")
        if target <= 0:
            raise ConfigError(f"{cfg.path}: [quadrature] target must be > 0")
        return StopRule(target_error=target)
    raise ConfigError(f"{cfg.path}: [quadrature] criterion must be "
                      f"'budget' or 'target', not {kind!r}")


def _quadrature_partition(cfg):
    depth = cfg.get("tessellation", "depth", 3)
    if cfg.get("scan", "input") is None:
        return disk_exclusion_partition(depth)
    _, field, _ = _segment_field(cfg)
    imesh = build_immersed_mesh(field, field.space.mesh, depth)
    if not imesh.crossed:
        raise ConfigError(f"{cfg.path}: scan yields no cut elements "
                          f"at threshold {field.f_crit!r}")

    def fraction(element):
        part = imesh.partitions[element]
        return part.inside_volume() / float(np.prod(part.hi - part.lo))

    return imesh.partitions[min(sorted(imesh.crossed), key=fraction)]


def cmd_quadrature(cfg):
    k = cfg.get("spline", "degree", 2)
    strategy = cfg.get("quadrature", "strategy", "subcell")
    if strategy not in ("subcell", "octree-level"):
        raise ConfigError(f"{cfg.path}: [quadrature] strategy must be "
                          f"'subcell' or 'octree-level', not {strategy!r}")
    partition = _quadrature_partition(cfg)
    result = optimize(partition, k, _stop_rule(cfg), strategy=strategy)
    last = result.trace[-1]
    print(f"quadrature: {result.status} at {last[1]} points, "
          f"error {last[2]!r}")
    if "csv" in cfg.formats():
        _write_csv(cfg.outdir() / "quadrature.csv",
                   ("iter", "points", "error", "strategy"), result.trace)


def cmd_bench_quad_circle(cfg):
    k = cfg.get("spline", "degree", 2)
    depth = cfg.get("tessellation", "depth", 3)
    budget = cfg.get("quadrature", "budget", 144)
    partition = disk_exclusion_partition(depth)
    rows = []
    for i, ppa in enumerate(range(1, 11)):
        rule = equal_order_rule(partition, ppa)
        rows.append((i, rule.total_points,
                     rule_error(partition, rule, k), "equal-order"))
    reference = rows[1][2]
    best = {}
    for strategy in ("subcell", "octree-level"):
        result = optimize(partition, k, StopRule(max_points=budget),
                          strategy=strategy)
        rows.extend(result.trace)
        best[strategy] = result.trace[-1][2]
    print(f"equal-order 2/axis: {rows[1][1]} points, error {reference!r}")
    for strategy, error in best.items():
        print(f"{strategy} at budget {budget}: error {error!r} "
              f"({error / reference:.3e} of equal-order)")
    if "csv" in cfg.formats():
        _write_csv(cfg.outdir() / "quad_circle.csv",
                   ("iter", "points", "error", "strategy"), rows)


def _check_boundary(cfg):
    boundary = cfg.get("stokes", "boundary", "dirichlet")
    if boundary != "dirichlet":
        raise ConfigError(f"{cfg.path}: [stokes] boundary: the immersed disk "
                          f"benchmark supports only 'dirichlet', "
                          f"not {boundary!r}")


def cmd_solve(cfg):
    k = cfg.get("spline", "degree", 2)
    levels = cfg.get("spline", "levels", 4)
    if levels < 2:
        raise ConfigError(f"{cfg.path}: [spline] levels must be >= 2")
    base = cfg.get("spline", "mesh", (8, 8))[0]
    depth = cfg.get("tessellation", "depth", 3)
    _check_boundary(cfg)
    rows = disk_convergence_study(
        k, nelems=tuple(base * 2 ** i for i in range(levels)), depth=depth,
        viscosity=cfg.viscosity(), params=cfg.stabilization())
    for prev, cur in zip(rows, rows[1:]):
        order = np.log2(prev["err_u_l2"] / cur["err_u_l2"])
        print(f"level {cur['level']}: ndof {cur['ndof']}, "
              f"err_u {cur['err_u_l2']:.3e}, velocity order {order:.2f}")
    out = cfg.outdir()
    if "csv" in cfg.formats():
        write_convergence_csv(rows, out / "convergence.csv")
    if "vtk" in cfg.formats():
        export_solution_vtk(rows[-1]["solution"], out / "solution.vtk")


def cmd_adapt(cfg):
    k = cfg.get("spline", "degree", 2)
    base = cfg.get("spline", "mesh", (8, 8))[0]
    depth = cfg.get("tessellation", "depth", 3)
    _check_boundary(cfg)
    problem = manufactured_disk_problem(cfg.viscosity())
    imesh, space = disk_setup(base, k, depth)
    out = cfg.outdir()
    snapshots = str(out) if "vtk" in cfg.formats() else None
    _, _, trace, status = adapt_loop(problem, imesh, space, cfg.adapt_config(),
                                     params=cfg.stabilization(),
                                     snapshot_dir=snapshots)
    print(f"adapt: {status} after {len(trace) - 1} step(s), "
          f"estimator {trace[-1]['estimator']!r}")
    if "csv" in cfg.formats():
        write_adapt_csv(trace, out / "adapt.csv")


def cmd_bench_corner(cfg):
    degree = cfg.get("spline", "degree", 1)
    result = corner_benchmark(
        degree,
        steps=cfg.get("adaptivity", "steps", 8),
        theta=cfg.get("adaptivity", "theta", 0.5),
        nelems=cfg.get("spline", "mesh", (8, 8))[0],
        depth=cfg.get("tessellation", "depth", 6),
        params=cfg.stabilization())
    slope_a = rate_vs_ndof(result["adaptive"])
    slope_u = rate_vs_ndof(result["uniform"])
    print(f"corner k={degree}: adaptive energy slope {slope_a:.3f}, "
          f"uniform {slope_u:.3f} (optimal -{degree}/2)")
    out = cfg.outdir()
    if "csv" in cfg.formats():
        write_adapt_csv(result["adaptive"], out / "corner_adaptive.csv")
        write_adapt_csv(result["uniform"], out / "corner_uniform.csv")


def _positive_int(raw):
    value = int(raw)
    if value < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return value


def _spacing_flag(raw):
    try:
        pair = _parse_pair(raw)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None
    if min(pair) <= 0:
        raise argparse.ArgumentTypeError("spacing must be positive")
    return pair


def _add_run_flags(parser, handler):
    parser.add_argument("--config", required=True, help="INI run manifest")
    parser.add_argument("--out", help="output directory (overrides [output])")
    parser.add_argument("--threads", type=_positive_int, default=1,
                        help="worker count cap")
    parser.add_argument("--spacing", type=_spacing_flag, metavar="DX,DY",
                        help="voxel spacing override")
    parser.set_defaults(handler=handler)


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="scanflow",
        description="voxel scans to spline level sets to immersed Stokes flow")
    sub = parser.add_subparsers(dest="command", required=True)
    _add_run_flags(sub.add_parser("segment"), cmd_segment)
    _add_run_flags(sub.add_parser("quadrature"), cmd_quadrature)
    _add_run_flags(sub.add_parser("solve"), cmd_solve)
    _add_run_flags(sub.add_parser("adapt"), cmd_adapt)
    bench = sub.add_parser("bench").add_subparsers(dest="benchmark",
                                                   required=True)
    _add_run_flags(bench.add_parser("corner"), cmd_bench_corner)
    _add_run_flags(bench.add_parser("quad-circle"), cmd_bench_quad_circle)
    return parser


def main(argv=None):
    args = _build_parser().parse_args(argv)
    try:
        cfg = RunConfig.load(args.config, out=args.out, spacing=args.spacing,
                             threads=args.threads)
        args.handler(cfg)
    except (ConfigError, ScanFormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (SolverError, GeometryError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
