"""Grayscale scan input: PGM images plus a sidecar INI carrying geometry.

PGM payloads are row-major with the top row first; on load the rows are
flipped so the value array is indexed ``values[ix, iy]`` with y increasing
upward and the origin at the lower-left voxel corner.  Intensities are
normalized by maxval into [0, 1]; maxval is kept so an ASCII round trip is
bit exact.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class ScanFormatError(ValueError):
    """Malformed scan input; the message carries the byte offset."""


@dataclass
class GrayscaleGrid:
    """Normalized voxel intensities with physical placement.

    values[ix, iy] in [0, 1], iy = 0 is the bottom row.
    """

    values: np.ndarray
    spacing: tuple
    origin: tuple
    maxval: int = 255

    @property
    def shape(self):
        return self.values.shape

    @property
    def box(self):
        lo = np.asarray(self.origin, dtype=float)
        hi = lo + np.asarray(self.shape) * np.asarray(self.spacing, dtype=float)
        return lo, hi

    def voxel_center(self, idx):
        return (np.asarray(self.origin, dtype=float)
                + (np.asarray(idx) + 0.5) * np.asarray(self.spacing, dtype=float))

    @property
    def mean(self):
        return float(self.values.mean())


@dataclass
class VoxelDomain:
    """Boolean voxel mask from thresholding a grid."""

    mask: np.ndarray
    g_crit: float
    spacing: tuple
    origin: tuple

    @property
    def n_inside(self):
        return int(self.mask.sum())


class _Tokenizer:
    """Whitespace/comment-aware PGM header tokenizer that tracks byte offsets."""

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def _skip(self):
        d = self.data
        while self.pos < len(d):
            c = d[self.pos:self.pos + 1]
            if c == b"#":
                nl = d.find(b"\n", self.pos)
                self.pos = len(d) if nl < 0 else nl + 1
            elif c.isspace():
                self.pos += 1
            else:
                return

    def next_token(self, what):
        self._skip()
        if self.pos >= len(self.data):
            raise ScanFormatError(
                f"unexpected end of file at byte {self.pos}: expected {what}")
        start = self.pos
        while self.pos < len(self.data):
            c = self.data[self.pos:self.pos + 1]
            if c.isspace() or c == b"#":
                break
            self.pos += 1
        return self.data[start:self.pos], start

    def next_int(self, what):
        tok, start = self.next_token(what)
        try:
            return int(tok)
        except ValueError:
            raise ScanFormatError(
                f"invalid {what} {tok!r} at byte {start}") from None


def _sidecar_path(path):
    return Path(path).with_suffix(".ini")


def _read_sidecar(path):
    side = _sidecar_path(path)
    spacing = [1.0, 1.0]
    origin = [0.0, 0.0]
    if side.exists():
        cp = configparser.ConfigParser()
        cp.read(side)
        if not cp.has_section("scan"):
            raise ScanFormatError(f"{side}: sidecar must have a [scan] section")
        sec = cp["scan"]
        known = {"spacing_x", "spacing_y", "origin_x", "origin_y"}
        unknown = set(sec) - known
        if unknown:
            raise ScanFormatError(f"{side}: unknown keys {sorted(unknown)}")
        spacing[0] = sec.getfloat("spacing_x", 1.0)
        spacing[1] = sec.getfloat("spacing_y", 1.0)
        origin[0] = sec.getfloat("origin_x", 0.0)
        origin[1] = sec.getfloat("origin_y", 0.0)
        if spacing[0] <= 0 or spacing[1] <= 0:
            raise ScanFormatError(f"{side}: spacing must be positive")
    return tuple(spacing), tuple(origin)


def load_pgm(path, spacing=None, origin=None):
    """Load a P2 or P5 PGM plus its optional sidecar INI.

    Explicit spacing/origin arguments override the sidecar.
    """
    data = Path(path).read_bytes()
    tk = _Tokenizer(data)
    magic, at = tk.next_token("magic number")
    if magic not in (b"P2", b"P5"):
        raise ScanFormatError(f"unsupported magic {magic!r} at byte {at}")
    width = tk.next_int("width")
    height = tk.next_int("height")
    maxval = tk.next_int("maxval")
    if width <= 0 or height <= 0:
        raise ScanFormatError(f"bad dimensions {width}x{height}")
    if not 0 < maxval <= 65535:
        raise ScanFormatError(f"maxval {maxval} outside 1..65535")

    n = width * height
    if magic == b"P2":
        raster = np.empty(n, dtype=np.int64)
        for i in range(n):
            raster[i] = tk.next_int("pixel value")
    else:
        # exactly one whitespace byte separates header and raster
        if tk.pos >= len(data) or not data[tk.pos:tk.pos + 1].isspace():
            raise ScanFormatError(f"missing raster separator at byte {tk.pos}")
        start = tk.pos + 1
        wide = maxval > 255
        need = n * (2 if wide else 1)
        if len(data) - start < need:
            raise ScanFormatError(
                f"truncated raster at byte {len(data)}: need {need} bytes from {start}")
        raw = data[start:start + need]
        raster = np.frombuffer(raw, dtype=">u2" if wide else "u1").astype(np.int64)
    if raster.min() < 0 or raster.max() > maxval:
        raise ScanFormatError(
            f"pixel value {raster.max() if raster.max() > maxval else raster.min()} "
            f"outside 0..{maxval}")

    rows = raster.reshape(height, width)
    values = (rows[::-1, :].T).astype(float) / float(maxval)

    side_spacing, side_origin = _read_sidecar(path)
    spacing = tuple(spacing) if spacing is not None else side_spacing
    origin = tuple(origin) if origin is not None else side_origin
    return GrayscaleGrid(values=values, spacing=spacing, origin=origin, maxval=maxval)


def write_pgm(path, grid: GrayscaleGrid, sidecar=True):
    """Write an ASCII (P2) PGM; with sidecar=True also writes the geometry INI."""
    path = Path(path)
    nx, ny = grid.shape
    ints = np.rint(grid.values * grid.maxval).astype(np.int64)
    if ints.min() < 0 or ints.max() > grid.maxval:
        raise ValueError("grid values outside [0, 1]")
    rows = ints.T[::-1, :]
    lines = [f"P2\n{nx} {ny}\n{grid.maxval}\n"]
    for r in rows:
        lines.append(" ".join(str(v) for v in r) + "\n")
    path.write_text("".join(lines))
    if sidecar:
        side = _sidecar_path(path)
        side.write_text(
            "[scan]\n"
            f"spacing_x = {grid.spacing[0]!r}\n"
            f"spacing_y = {grid.spacing[1]!r}\n"
            f"origin_x = {grid.origin[0]!r}\n"
            f"origin_y = {grid.origin[1]!r}\n")
    return path


def threshold(grid: GrayscaleGrid, g_crit: float) -> VoxelDomain:
    """Voxels with intensity strictly above g_crit."""
    if not 0.0 <= g_crit <= 1.0:
        raise ValueError("g_crit must lie in [0, 1]")
    return VoxelDomain(mask=grid.values > g_crit, g_crit=float(g_crit),
                       spacing=grid.spacing, origin=grid.origin)
