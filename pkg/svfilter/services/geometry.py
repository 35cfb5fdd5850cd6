"""Convex polygon clipping and piecewise-quadratic patch tables.

Pure computation, no I/O. Polygons are stored as fixed-capacity vertex
arrays of shape (N, V, 2) with a vertex count per polygon, so thousands of
clips run as a handful of numpy operations. Clipping is Sutherland-Hodgman
against one half-plane n·x <= b at a time; areas use the shoelace formula.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.spatial import ConvexHull

logger = logging.getLogger(__name__)


# ── Polygon clipping ────────────────────────────────────────────────────────


def _successor(counts: np.ndarray, capacity: int) -> np.ndarray:
    idx = np.arange(capacity)[None, :]
    return np.where(idx + 1 < counts[:, None], idx + 1, 0)


def clip_convex(vertices: np.ndarray, counts: np.ndarray, normal, bound
                ) -> tuple[np.ndarray, np.ndarray]:
    """Clip convex polygons against the half-plane normal·x <= bound.

    `normal` broadcasts to (N, 2) and `bound` to (N,). The output capacity
    grows by one vertex.
    """
    n_poly, capacity, _ = vertices.shape
    rows = np.arange(n_poly)[:, None]
    valid = np.arange(capacity)[None, :] < counts[:, None]
    p = vertices
    q = vertices[rows, _successor(counts, capacity)]

    normal = np.broadcast_to(np.asarray(normal, dtype=float), (n_poly, 2))
    bound = np.broadcast_to(np.asarray(bound, dtype=float), (n_poly,))
    dp = np.einsum("nvk,nk->nv", p, normal) - bound[:, None]
    dq = np.einsum("nvk,nk->nv", q, normal) - bound[:, None]
    inside_p = dp <= 0
    inside_q = dq <= 0
    crosses = valid & (inside_p != inside_q)

    with np.errstate(invalid="ignore", divide="ignore"):
        t = np.where(crosses, dp / (dp - dq), 0.0)
    crossing = p + t[..., None] * (q - p)

    candidates = np.stack([p, crossing], axis=2).reshape(n_poly, 2 * capacity, 2)
    keep = np.stack([valid & inside_p, crosses], axis=2).reshape(n_poly, 2 * capacity)
    order = np.argsort(~keep, axis=1, kind="stable")[:, :capacity + 1]
    return candidates[rows, order], keep.sum(axis=1)


def polygon_area(vertices: np.ndarray, counts: np.ndarray) -> np.ndarray:
    n_poly, capacity, _ = vertices.shape
    rows = np.arange(n_poly)[:, None]
    valid = np.arange(capacity)[None, :] < counts[:, None]
    q = vertices[rows, _successor(counts, capacity)]
    cross = vertices[..., 0] * q[..., 1] - q[..., 0] * vertices[..., 1]
    area = 0.5 * np.abs(np.where(valid, cross, 0.0).sum(axis=1))
    return np.where(counts >= 3, area, 0.0)


def rectangle_vertices(centers: np.ndarray, axis1, half1, axis2, half2) -> np.ndarray:
    """Corners of rectangles centers ± half1·axis1 ± half2·axis2, shape (N, 4, 2)."""
    e1 = np.broadcast_to(np.asarray(axis1, dtype=float), centers.shape)
    e2 = np.broadcast_to(np.asarray(axis2, dtype=float), centers.shape)
    h1 = np.asarray(half1, dtype=float)[..., None] * e1
    h2 = np.asarray(half2, dtype=float)[..., None] * e2
    return np.stack([centers - h1 - h2, centers + h1 - h2,
                     centers + h1 + h2, centers - h1 + h2], axis=1)


def rectangle_overlap(fixed: tuple, moving: tuple, centers: np.ndarray) -> np.ndarray:
    """Area of (fixed rectangle at origin) ∩ (moving rectangle at each center).

    Each rectangle is (axis1, half1, axis2, half2); halves broadcast to (N,).
    """
    f_axis1, f_half1, f_axis2, f_half2 = fixed
    m_axis1, m_half1, m_axis2, m_half2 = moving
    n = centers.shape[0]
    vertices = rectangle_vertices(centers, m_axis1, m_half1, m_axis2, m_half2)
    counts = np.full(n, 4)
    f_half1 = np.broadcast_to(np.asarray(f_half1, dtype=float), (n,))
    f_half2 = np.broadcast_to(np.asarray(f_half2, dtype=float), (n,))
    for axis, half in ((f_axis1, f_half1), (f_axis2, f_half2)):
        axis = np.asarray(axis, dtype=float)
        vertices, counts = clip_convex(vertices, counts, axis, half)
        vertices, counts = clip_convex(vertices, counts, -axis, half)
    return polygon_area(vertices, counts)


def segment_overlap(fixed: tuple, direction: np.ndarray, half_length,
                    centers: np.ndarray) -> np.ndarray:
    """Length of centered segments (direction, half_length) at centers inside the fixed rectangle."""
    f_axis1, f_half1, f_axis2, f_half2 = fixed
    n = centers.shape[0]
    direction = np.broadcast_to(np.asarray(direction, dtype=float), (n, 2))
    half_length = np.broadcast_to(np.asarray(half_length, dtype=float), (n,))
    lo = -half_length.copy()
    hi = half_length.copy()
    for axis, half in ((f_axis1, f_half1), (f_axis2, f_half2)):
        axis = np.asarray(axis, dtype=float)
        half = np.broadcast_to(np.asarray(half, dtype=float), (n,))
        p0 = centers @ axis
        pd = direction @ axis
        parallel = np.abs(pd) < 1e-15
        with np.errstate(divide="ignore", invalid="ignore"):
            s1 = (-half - p0) / pd
            s2 = (half - p0) / pd
        lo = np.where(parallel, np.where(np.abs(p0) <= half, lo, np.inf), np.maximum(lo, np.minimum(s1, s2)))
        hi = np.where(parallel, hi, np.minimum(hi, np.maximum(s1, s2)))
    return np.maximum(hi - lo, 0.0)


def convex_hull(points: np.ndarray) -> np.ndarray:
    """Counter-clockwise hull vertices of a 2-D point set."""
    hull = ConvexHull(np.asarray(points, dtype=float))
    return hull.points[hull.vertices]


# ── Patch tables ────────────────────────────────────────────────────────────


def _clip_single(polygon: np.ndarray, normal: np.ndarray, bound: float) -> np.ndarray:
    out, count = clip_convex(polygon[None], np.array([len(polygon)]), normal, bound)
    return out[0, :count[0]]


def _single_area(polygon: np.ndarray) -> float:
    if len(polygon) < 3:
        return 0.0
    return float(polygon_area(polygon[None], np.array([len(polygon)]))[0])


def merge_close(values, tol: float) -> np.ndarray:
    """Sorted values with runs closer than `tol` collapsed to their first entry."""
    values = np.sort(np.asarray(values, dtype=float))
    keep = np.append(True, np.diff(values) > tol)
    return values[keep]


def _fit_points(polygon: np.ndarray) -> np.ndarray:
    center = polygon.mean(axis=0)
    mids = 0.5 * (polygon + np.roll(polygon, -1, axis=0))
    pts = [center[None]]
    for lam in (0.3, 0.6, 0.9):
        pts.append(center + lam * (polygon - center))
    pts.append(center + 0.6 * (mids - center))
    return np.concatenate(pts)


def _monomials(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    return np.stack([np.ones_like(u), u, v, u * u, u * v, v * v], axis=-1)


@dataclass(frozen=True)
class PatchTable:
    """A piecewise-quadratic function on an arrangement of line families.

    Family k consists of the lines normals[k]·p = offsets[k][i]. Every cell
    of the arrangement carries one quadratic in coordinates local to the
    cell, per output component when the function is array-valued. Points
    outside all cells evaluate to 0.
    """

    normals: np.ndarray
    offsets: tuple[np.ndarray, ...]
    strides: np.ndarray
    lookup: np.ndarray
    centers: np.ndarray
    spans: np.ndarray
    coefs: np.ndarray             # (cells + 1, 6, components)
    value_shape: tuple[int, ...] = ()

    @property
    def n_cells(self) -> int:
        return len(self.coefs) - 1

    @classmethod
    def build(cls, support: np.ndarray, normals: np.ndarray, offsets: list[np.ndarray],
              evaluate: Callable[[np.ndarray, np.ndarray], np.ndarray]) -> PatchTable:
        """Enumerate the arrangement inside `support` and fit each cell.

        `evaluate(x, y)` must be exactly quadratic on every cell. It may
        return a trailing value shape, fitted component by component.
        """
        normals = np.asarray(normals, dtype=float)
        offsets = tuple(np.asarray(o, dtype=float) for o in offsets)
        area_tol = 1e-12 * max(_single_area(support), 1e-300)

        cells: list[tuple[tuple[int, ...], np.ndarray]] = []

        def descend(k: int, polygon: np.ndarray, key: tuple[int, ...]) -> None:
            if k == len(normals):
                cells.append((key, polygon))
                return
            edges = np.concatenate([[-np.inf], offsets[k], [np.inf]])
            for i in range(len(edges) - 1):
                piece = polygon
                if np.isfinite(edges[i + 1]):
                    piece = _clip_single(piece, normals[k], edges[i + 1])
                if np.isfinite(edges[i]) and len(piece):
                    piece = _clip_single(piece, -normals[k], -edges[i])
                if _single_area(piece) > area_tol:
                    descend(k + 1, piece, key + (i,))

        descend(0, np.asarray(support, dtype=float), ())

        sizes = np.array([len(o) + 1 for o in offsets])
        strides = np.append(np.cumprod(sizes[::-1])[::-1][1:], 1)
        lookup = np.full(int(np.prod(sizes)), -1, dtype=np.int64)

        samples = [_fit_points(polygon) for _, polygon in cells]
        flat = np.concatenate(samples)
        values = np.asarray(evaluate(flat[:, 0], flat[:, 1]), dtype=float)
        value_shape = values.shape[1:]
        values = values.reshape(len(flat), -1)

        centers = np.zeros((len(cells) + 1, 2))
        spans = np.ones(len(cells) + 1)
        coefs = np.zeros((len(cells) + 1, 6, values.shape[1]))
        start = 0
        for cell_id, ((key, polygon), pts) in enumerate(zip(cells, samples)):
            stop = start + len(pts)
            center = polygon.mean(axis=0)
            span = float(np.max(np.hypot(*(polygon - center).T)))
            design = _monomials((pts[:, 0] - center[0]) / span, (pts[:, 1] - center[1]) / span)
            coefs[cell_id] = np.linalg.lstsq(design, values[start:stop], rcond=None)[0]
            centers[cell_id] = center
            spans[cell_id] = span
            lookup[int(np.dot(key, strides))] = cell_id
            start = stop

        logger.debug("patch table: %d cells over %d line families", len(cells), len(normals))
        return cls(normals, offsets, strides, lookup, centers, spans, coefs, value_shape)

    def locate(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Cell id per point, -1 outside every cell."""
        flat = np.zeros(np.broadcast(x, y).shape, dtype=np.int64)
        for normal, offs, stride in zip(self.normals, self.offsets, self.strides):
            s = normal[0] * x + normal[1] * y
            flat += np.searchsorted(offs, s, side="right") * stride
        return self.lookup[flat]

    def __call__(self, x, y) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        cell = self.locate(x, y)
        center = self.centers[cell]
        span = self.spans[cell]
        u = (x - center[..., 0]) / span
        v = (y - center[..., 1]) / span
        terms = _monomials(u, v)
        out = terms[..., 0, None] * self.coefs[cell, 0]
        for k in range(1, 6):
            out = out + terms[..., k, None] * self.coefs[cell, k]
        return out.reshape(cell.shape + self.value_shape)
