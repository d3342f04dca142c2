"""Synthetic annotation noise: contour tracing, vertex-removal simplification,
bounding rectangles, maximal masks, and polygon rasterization.

Polygons are ``(n, 2)`` float arrays of ``(row, col)`` pixel-corner
coordinates, closed implicitly.  Orientation is measured in the Cartesian
frame ``x = col, y = row``: a polygon is counter-clockwise when
:func:`signed_area` is positive.  Pixel ``(r, c)`` covers the square
``[r, r+1] x [c, c+1]`` and has its centre at ``(r + 0.5, c + 0.5)``.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ContractError


class NoiseWarning(UserWarning):
    """Non-fatal condition met while synthesizing a noisy annotation."""


# -- polygon basics ----------------------------------------------------------

def signed_area(poly) -> float:
    p = np.asarray(poly, dtype=float)
    r, c = p[:, 0], p[:, 1]
    r2, c2 = np.roll(r, -1), np.roll(c, -1)
    return 0.5 * float(np.sum(c * r2 - c2 * r))


def as_polygon(vertices) -> np.ndarray:
    p = np.asarray(vertices, dtype=float)
    if p.ndim != 2 or p.shape[1] != 2 or len(p) < 3:
        raise ContractError(f"a polygon needs >= 3 (row, col) vertices, got shape {p.shape}")
    return p


# -- contour extraction ------------------------------------------------------

def largest_component(mask) -> np.ndarray:
    m = np.asarray(mask).astype(bool)
    if not m.any():
        raise ContractError("mask is empty")
    labels, n = ndimage.label(m)  # default structure: 4-connectivity
    if n == 1:
        return m
    sizes = np.bincount(labels.ravel())[1:]
    warnings.warn(f"mask has {n} 4-connected components; using the largest", NoiseWarning, stacklevel=3)
    return labels == (int(np.argmax(sizes)) + 1)


def mask_to_polygon(mask) -> np.ndarray:
    """Outer boundary of the largest 4-connected component, CCW, corner coordinates.

    Follows pixel edges with foreground kept on one side; diagonal-only
    contacts are treated as disconnected.  Only direction changes are
    emitted, so collinear runs collapse to their end corners.  Holes are
    ignored.
    """
    fg = largest_component(mask)
    h, w = fg.shape

    def is_fg(r, c):
        return 0 <= r < h and 0 <= c < w and fg[r, c]

    def pixel(pr, pc, d, n):
        return (pr + min(0, d[0], n[0], d[0] + n[0]), pc + min(0, d[1], n[1], d[1] + n[1]))

    rows = np.flatnonzero(fg.any(axis=1))
    r0 = int(rows[0])
    c0 = int(np.flatnonzero(fg[r0])[0])
    start, d0 = (r0, c0), (0, 1)
    pos, d = start, d0
    vertices = [start]
    limit = 4 * (h + 1) * (w + 1)
    for _ in range(limit):
        pos = (pos[0] + d[0], pos[1] + d[1])
        n = (d[1], -d[0])  # foreground-side normal
        ahead_fg = is_fg(*pixel(pos[0], pos[1], d, n))
        ahead_bg = is_fg(*pixel(pos[0], pos[1], d, (-n[0], -n[1])))
        if ahead_fg and ahead_bg:
            nd = (-n[0], -n[1])
        elif ahead_fg:
            nd = d
        else:
            nd = n
        if pos == start and nd == d0:
            break
        if nd != d:
            vertices.append(pos)
        d = nd
    else:  # pragma: no cover - tracing always closes on a finite grid
        raise RuntimeError("contour tracing did not close")
    poly = np.asarray(vertices, dtype=float)
    if signed_area(poly) < 0:
        poly = poly[::-1]
    return poly


# -- simplification ----------------------------------------------------------

def angle_length_importance(prev, v, nxt, orientation=1.0) -> float:
    """(pi - interior angle) * mean adjacent edge length.

    The turning angle equals pi minus the interior angle, so acute corners
    on long edges score high, collinear vertices score 0 and reflex vertices
    score negative.
    """
    e1 = (v[1] - prev[1], v[0] - prev[0])
    e2 = (nxt[1] - v[1], nxt[0] - v[0])
    turn = math.atan2(e1[0] * e2[1] - e1[1] * e2[0], e1[0] * e2[0] + e1[1] * e2[1])
    return orientation * turn * 0.5 * (math.hypot(*e1) + math.hypot(*e2))


def triangle_area_importance(prev, v, nxt, orientation=1.0) -> float:
    """Visvalingam-Whyatt effective area."""
    return 0.5 * abs((v[1] - prev[1]) * (nxt[0] - prev[0]) - (nxt[1] - prev[1]) * (v[0] - prev[0]))


IMPORTANCE = {"angle_length": angle_length_importance, "area": triangle_area_importance}

_TIE_RTOL = 1e-9


def simplify_to_k(poly, k: int, importance: str = "angle_length") -> np.ndarray:
    """Repeatedly drop the least important vertex until ``k`` remain.

    Neighbour importances are recomputed after each removal.  Importances
    within a relative 1e-9 of the minimum count as tied, and ties go to the
    lowest original vertex index.
    """
    poly = as_polygon(poly)
    if k < 3:
        raise ContractError(f"k must be >= 3, got {k}")
    n = len(poly)
    if k > n:
        warnings.warn(f"polygon has {n} vertices, fewer than k={k}; returned unchanged", NoiseWarning, stacklevel=2)
        return poly.copy()
    score = IMPORTANCE[importance]
    orient = 1.0 if signed_area(poly) >= 0 else -1.0
    alive = list(range(n))

    def imp(pos):
        m = len(alive)
        a, b, c = alive[(pos - 1) % m], alive[pos], alive[(pos + 1) % m]
        return score(poly[a], poly[b], poly[c], orient)

    scores = [imp(i) for i in range(n)]
    while len(alive) > k:
        lo = min(scores)
        tol = _TIE_RTOL * max(1.0, max(abs(s) for s in scores))
        pos = min((i for i, s in enumerate(scores) if s <= lo + tol), key=lambda i: alive[i])
        del alive[pos]
        del scores[pos]
        m = len(alive)
        for j in ((pos - 1) % m, pos % m):
            scores[j] = imp(j)
    return poly[alive].copy()


# -- other noise kinds -------------------------------------------------------

def axis_aligned_4(mask) -> np.ndarray:
    """Tight bounding rectangle of the foreground in corner coordinates."""
    m = np.asarray(mask).astype(bool)
    if not m.any():
        raise ContractError("mask is empty")
    rows = np.flatnonzero(m.any(axis=1))
    cols = np.flatnonzero(m.any(axis=0))
    r0, r1 = float(rows[0]), float(rows[-1] + 1)
    c0, c1 = float(cols[0]), float(cols[-1] + 1)
    return np.array([(r0, c0), (r0, c1), (r1, c1), (r1, c0)])


def default_band(side: int) -> int:
    """Perimeter band: 2 px at 96 px, scaled with image size, at least 1."""
    return max(1, int(math.floor(2 * side / 96 + 0.5)))


def maximal_mask(h: int, w: int, band: int) -> np.ndarray:
    if band < 0 or h <= 2 * band or w <= 2 * band:
        raise ContractError(f"band {band} too large for a {h}x{w} image")
    m = np.zeros((h, w), dtype=np.uint8)
    m[band:h - band, band:w - band] = 1
    return m


# -- rasterization -----------------------------------------------------------

def rasterize(poly, h: int, w: int) -> np.ndarray:
    """Even-odd scanline fill sampled at pixel centres."""
    p = as_polygon(poly)
    if abs(signed_area(p)) < 1e-12:
        raise ContractError("degenerate polygon (zero area)")
    out = np.zeros((h, w), dtype=np.uint8)
    r0, c0 = p[:, 0], p[:, 1]
    r1, c1 = np.roll(r0, -1), np.roll(c0, -1)
    centers = np.arange(w) + 0.5
    for row in range(h):
        y = row + 0.5
        crossing = (r0 <= y) != (r1 <= y)
        if not crossing.any():
            continue
        xs = np.sort(c0[crossing] + (y - r0[crossing]) * (c1[crossing] - c0[crossing]) / (r1[crossing] - r0[crossing]))
        for xa, xb in zip(xs[0::2], xs[1::2]):
            out[row, (centers >= xa) & (centers < xb)] = 1
    return out


# -- noise specification and pipeline ----------------------------------------

@dataclass(frozen=True)
class NoiseSpec:
    """``kind`` is one of ``k_vertex``, ``axis_aligned_4``, ``maximal`` or ``none``."""

    kind: str
    k: int = 0
    band: int | None = None

    def __post_init__(self):
        if self.kind not in ("k_vertex", "axis_aligned_4", "maximal", "none"):
            raise ContractError(f"unknown noise kind '{self.kind}'")
        if self.kind == "k_vertex" and self.k < 3:
            raise ContractError(f"k_vertex needs k >= 3, got {self.k}")
        if self.kind == "maximal" and self.band is not None and self.band < 1:
            raise ContractError(f"band must be >= 1, got {self.band}")

    @classmethod
    def parse(cls, text: str) -> "NoiseSpec":
        """``k_vertex:7``, ``axis_aligned_4``, ``maximal`` / ``maximal:2`` or ``none``."""
        kind, _, arg = text.strip().partition(":")
        if kind == "k_vertex":
            if not arg:
                raise ContractError("k_vertex needs a vertex count, e.g. k_vertex:7")
            return cls(kind, k=int(arg))
        if kind == "maximal":
            return cls(kind, band=int(arg) if arg else None)
        return cls(kind)

    def __str__(self):
        if self.kind == "k_vertex":
            return f"k_vertex:{self.k}"
        if self.kind == "maximal" and self.band is not None:
            return f"maximal:{self.band}"
        return self.kind


def noisy_annotation(mask, spec: NoiseSpec, importance: str = "angle_length"):
    """Return ``(noisy_mask, polygon_or_None)`` for a clean mask."""
    m = np.asarray(mask)
    h, w = m.shape
    if spec.kind == "none":
        return m.astype(np.uint8).copy(), None
    if spec.kind == "maximal":
        band = spec.band if spec.band is not None else default_band(min(h, w))
        return maximal_mask(h, w, band), None
    if spec.kind == "axis_aligned_4":
        poly = axis_aligned_4(m)
    else:
        poly = simplify_to_k(mask_to_polygon(m), spec.k, importance)
    return rasterize(poly, h, w), poly


# -- polygon text format -----------------------------------------------------

def format_polygon(poly) -> str:
    p = as_polygon(poly)
    lines = [f"POLY {len(p)}"] + [f"{r!r},{c!r}" for r, c in p.tolist()]
    return "\n".join(lines) + "\n"


def parse_polygon(text: str) -> np.ndarray:
    lines = [ln.strip() for ln in text.strip().splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("POLY "):
        raise ContractError("polygon text must start with 'POLY <n>'")
    n = int(lines[0].split()[1])
    if len(lines) - 1 != n:
        raise ContractError(f"polygon header says {n} vertices, found {len(lines) - 1}")
    return as_polygon([tuple(float(v) for v in ln.split(",")) for ln in lines[1:]])


def save_polygon(path, poly) -> None:
    Path(path).write_text(format_polygon(poly))


def load_polygon(path) -> np.ndarray:
    return parse_polygon(Path(path).read_text())
