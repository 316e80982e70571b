"""Minimal legacy-VTK ASCII writers (structured points and polydata)."""

import numpy as np


def _fmt(x):
    return repr(float(x))


def write_structured_points(path, origin, spacing, dims, point_data):
    """Scalar fields sampled on a regular lattice.

    dims: lattice point counts per axis (2D inputs are padded to 3D).
    point_data: name -> flat array in x-fastest order.
    """
    dims = tuple(dims) + (1,) * (3 - len(dims))
    origin = tuple(origin) + (0.0,) * (3 - len(origin))
    spacing = tuple(spacing) + (1.0,) * (3 - len(spacing))
    n = dims[0] * dims[1] * dims[2]
    lines = [
        "# vtk DataFile Version 3.0",
        "scanflow lattice",
        "ASCII",
        "DATASET STRUCTURED_POINTS",
        f"DIMENSIONS {dims[0]} {dims[1]} {dims[2]}",
        f"ORIGIN {_fmt(origin[0])} {_fmt(origin[1])} {_fmt(origin[2])}",
        f"SPACING {_fmt(spacing[0])} {_fmt(spacing[1])} {_fmt(spacing[2])}",
        f"POINT_DATA {n}",
    ]
    for name, arr in point_data.items():
        arr = np.asarray(arr, dtype=float).ravel()
        if arr.size != n:
            raise ValueError(f"field {name}: {arr.size} values for {n} points")
        lines.append(f"SCALARS {name} double 1")
        lines.append("LOOKUP_TABLE default")
        lines.extend(_fmt(v) for v in arr)
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def write_polydata(path, points, polygons=(), lines=(), point_data=None):
    """Polygon/line soup with optional per-point scalar or vector fields."""
    points = np.asarray(points, dtype=float)
    if points.ndim != 2:
        raise ValueError("points must be (n, 2) or (n, 3)")
    if points.shape[1] == 2:
        points = np.column_stack([points, np.zeros(len(points))])
    out = [
        "# vtk DataFile Version 3.0",
        "scanflow geometry",
        "ASCII",
        "DATASET POLYDATA",
        f"POINTS {len(points)} double",
    ]
    out.extend(" ".join(_fmt(c) for c in p) for p in points)
    if polygons:
        size = sum(len(p) + 1 for p in polygons)
        out.append(f"POLYGONS {len(polygons)} {size}")
        out.extend(f"{len(p)} " + " ".join(str(i) for i in p) for p in polygons)
    if lines:
        size = sum(len(l) + 1 for l in lines)
        out.append(f"LINES {len(lines)} {size}")
        out.extend(f"{len(l)} " + " ".join(str(i) for i in l) for l in lines)
    if point_data:
        out.append(f"POINT_DATA {len(points)}")
        for name, arr in point_data.items():
            arr = np.asarray(arr, dtype=float)
            if arr.ndim == 1:
                out.append(f"SCALARS {name} double 1")
                out.append("LOOKUP_TABLE default")
                out.extend(_fmt(v) for v in arr)
            else:
                if arr.shape[1] == 2:
                    arr = np.column_stack([arr, np.zeros(len(arr))])
                out.append(f"VECTORS {name} double")
                out.extend(" ".join(_fmt(c) for c in v) for v in arr)
    with open(path, "w") as fh:
        fh.write("\n".join(out) + "\n")
