"""Gauss-Legendre tables and rules mapped to boxes and triangles."""

import functools

import numpy as np


@functools.lru_cache(maxsize=None)
def gauss_1d(n):
    """Nodes and weights on [-1, 1]."""
    x, w = np.polynomial.legendre.leggauss(int(n))
    return x, w


def gauss_interval(n, lo, hi):
    """Nodes and weights on [lo, hi]."""
    x, w = gauss_1d(n)
    half = 0.5 * (hi - lo)
    return lo + half * (x + 1.0), w * half


def gauss_box(orders, lo, hi):
    """Tensor rule on an axis-aligned box.

    orders: int or per-axis sequence of point counts.
    lo, hi: box corners, length d.
    Returns (points (m, d), weights (m,)).
    """
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    d = lo.size
    if np.isscalar(orders):
        orders = (int(orders),) * d
    axes = [gauss_interval(orders[a], lo[a], hi[a]) for a in range(d)]
    grids = np.meshgrid(*[ax[0] for ax in axes], indexing="ij")
    pts = np.stack([g.ravel() for g in grids], axis=-1)
    wts = np.ones(1)
    for a in range(d):
        wts = np.multiply.outer(wts, axes[a][1]).ravel()
    return pts, wts


def _cross2(a, b):
    return a[0] * b[1] - a[1] * b[0]


def triangle_area(tri):
    v0, v1, v2 = np.asarray(tri, dtype=float)
    return 0.5 * abs(_cross2(v1 - v0, v2 - v0))


def gauss_triangle(n, tri):
    """Rule on a triangle via the collapsed-square map, n points per axis.

    Map: x(u, v) = v0 + u*((1-v)(v1-v0) + v(v2-v0)), det J = 2*A*u.
    Exact for total polynomial degree 2n - 2 (the extra factor u costs one order).
    Returns (points (n*n, 2), weights (n*n,)).
    """
    v0, v1, v2 = [np.asarray(v, dtype=float) for v in tri]
    xu, wu = gauss_interval(n, 0.0, 1.0)
    xv, wv = gauss_interval(n, 0.0, 1.0)
    u = np.repeat(xu, n)
    v = np.tile(xv, n)
    w = np.repeat(wu * xu, n) * np.tile(wv, n)
    pts = v0[None, :] + u[:, None] * ((1.0 - v)[:, None] * (v1 - v0)[None, :]
                                      + v[:, None] * (v2 - v0)[None, :])
    area2 = _cross2(v1 - v0, v2 - v0)
    return pts, w * abs(area2)


def gauss_segment(n, a, b):
    """Rule on the straight segment a-b, arclength weights."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    x, w = gauss_interval(n, 0.0, 1.0)
    pts = a[None, :] + x[:, None] * (b - a)[None, :]
    return pts, w * np.linalg.norm(b - a)
