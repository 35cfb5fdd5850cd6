"""O(1) space-variant box-spline filtering.

Model
-----
1. Four nested running sums along the basis' step vectors turn the image
   into g4, a discrete fourth-order antiderivative. The sums count samples
   and the step lengths are applied once at the end, putting the
   antiderivative in continuous units.
2. F(x, y) = Σ g4(m, n)·K(x − m, y − n) extends g4 to the continuum. K is
   the box spline whose displacements are the step vectors themselves, so
   the discrete sums and K together act as an exact continuous
   antiderivative.
3. A box spline of widths a is the 16-tap finite difference of that
   antiderivative, taps at the subset sums s_i of d_k = a_k·u_k with
   weights ±1/(a1·a2·a3·a4). Evaluating at p + τ − s_i with
   τ = ½·Σ(a_k − h_k)·u_k centers the result on p.
4. Dividing by the same computation on an all-ones image makes the
   discrete DC gain exactly one, which also makes the output equal to
   direct filtering with the renormalized sampled kernel.

Per-pixel cost is 16 taps × a fixed interpolation window, whatever the
kernel size. Only the padding margin grows with the largest scale.

Rasters are indexed [row, col]; positions and steps are (x, y) = (col, row).
"""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from svfilter.config import settings
from svfilter.services.geometry import PatchTable, merge_close
from svfilter.services.kernel_lab import EDGE_POLICIES, KernelSpec, kernel_support_half_width, patch_table
from svfilter.services.shape_algebra import DirectionBasis, InvalidArgument, ScaleVector, get_basis

logger = logging.getLogger(__name__)

# Subset S of the four directions per tap: bit k of the tap index selects d_(k+1).
SUBSETS = np.array([[(i >> k) & 1 for k in range(4)] for i in range(16)], dtype=float)
SUBSET_SIGNS = np.where(SUBSETS.sum(axis=1) % 2 == 0, 1.0, -1.0)


class DomainError(InvalidArgument):
    """Raised when an interpolation window leaves the padded domain."""


# ── Interpolation kernel ────────────────────────────────────────────────────


def interpolation_spec(basis: DirectionBasis) -> KernelSpec:
    """The box spline whose displacements are the basis' step vectors."""
    return KernelSpec(basis, ScaleVector.from_array(basis.step_lengths))


@lru_cache(maxsize=None)
def window_offsets(basis: DirectionBasis) -> tuple[np.ndarray, np.ndarray]:
    """Node offsets (jx, jy) relative to floor(x), floor(y) that K can reach."""
    hx, hy = kernel_support_half_width(basis, interpolation_spec(basis).scales)
    jx = np.arange(math.floor(-hx) + 1, math.ceil(hx) + 1)
    jy = np.arange(math.floor(-hy) + 1, math.ceil(hy) + 1)
    return jx, jy


def _window_radius(basis: DirectionBasis) -> int:
    jx, jy = window_offsets(basis)
    return int(max(-jx[0], jx[-1], -jy[0], jy[-1]))


# Fractional offsets lie in [0, 1)²; the table reaches past that cell so no
# query sits on the table's outer edge.
_CELL_SUPPORT = np.array([[-0.5, -0.5], [1.5, -0.5], [1.5, 1.5], [-0.5, 1.5]])


@lru_cache(maxsize=None)
def window_table(basis: DirectionBasis) -> PatchTable:
    """Every window weight K(f − j) as one piecewise-quadratic table in f.

    Each weight is quadratic between K's breaklines shifted by j, so the
    union of the shifted lines cuts the cell into patches on which all
    weights are exact quadratics.
    """
    jx, jy = window_offsets(basis)
    kernel = patch_table(basis, interpolation_spec(basis).scales)
    nodes = np.stack(np.meshgrid(jx, jy), axis=-1).reshape(-1, 2)
    offsets = []
    for normal, breaks in zip(kernel.normals, kernel.offsets):
        reach = _CELL_SUPPORT @ normal
        shifted = (breaks[:, None] + (nodes @ normal)[None, :]).ravel()
        offsets.append(merge_close(shifted[(shifted > reach.min()) & (shifted < reach.max())], 1e-9))

    def weights(x, y):
        return kernel(x[:, None, None] - jx[None, None, :], y[:, None, None] - jy[None, :, None])

    table = PatchTable.build(_CELL_SUPPORT, kernel.normals, offsets, weights)
    logger.debug("%s window table: %d patches, %dx%d weights", basis.name, table.n_cells, len(jy), len(jx))
    return table


def window_weights(basis: DirectionBasis, fx, fy) -> np.ndarray:
    """Normalized kernel weights over the window, shape (..., len(jy), len(jx)).

    fx, fy are fractional offsets in [0, 1).
    """
    w = window_table(basis)(fx, fy)
    return w / w.sum(axis=(-2, -1), keepdims=True)


# ── Running sums ────────────────────────────────────────────────────────────


@dataclass(frozen=True)
class RunningSumStack:
    """g1..g4 over the padded domain; the image sits at [margin, margin].

    Normalizer stacks keep g4 alone.
    """

    basis: DirectionBasis
    sums: tuple[np.ndarray, ...]
    margin: int
    shape: tuple[int, int]

    @property
    def g4(self) -> np.ndarray:
        return self.sums[-1]

    @property
    def padded_shape(self) -> tuple[int, int]:
        return self.g4.shape


def min_margin(basis: DirectionBasis) -> int:
    return _window_radius(basis) + 1


def _directional_sum(f: np.ndarray, step: tuple[int, int]) -> np.ndarray:
    """g(x, y) = f(x, y) + g(x − dx, y − dy), zero outside the array."""
    dx, dy = step
    if dy == 0:
        # only (1, 0) has no row component
        return np.cumsum(f, axis=1)
    g = f.copy()
    for row in range(dy, g.shape[0]):
        prev = g[row - dy]
        if dx > 0:
            g[row, dx:] += prev[:-dx]
        elif dx < 0:
            g[row, :dx] += prev[-dx:]
        else:
            g[row] += prev
    return g


def compute_running_sums(image, basis: DirectionBasis, margin: int, edge: str = "zero", *,
                         level: float = 0.0) -> RunningSumStack:
    """Pad the image and run the basis' four recursions in sum order.

    The right side gets extra padding so every backwards ray of a
    negative-x step leaves the domain through the top row. `level` is
    subtracted from the whole padded domain before summing.
    """
    image = np.asarray(image, dtype=float)
    if image.ndim != 2 or image.size == 0:
        raise InvalidArgument(f"image must be a non-empty 2-D array, got shape {image.shape}")
    if not np.isfinite(image).all():
        raise InvalidArgument("image contains non-finite samples")
    if margin < min_margin(basis):
        raise InvalidArgument(f"margin {margin} is below the {basis.name} minimum {min_margin(basis)}")
    if edge not in EDGE_POLICIES:
        raise InvalidArgument(f"unknown edge policy {edge!r} (expected one of {EDGE_POLICIES})")

    height, width = image.shape
    padded_height = height + 2 * margin
    extra = int(math.ceil(basis.drift * padded_height))
    pad = ((margin, margin), (margin, margin + extra))
    g = np.pad(image, pad, mode="constant" if edge == "zero" else "edge")
    if level:
        g = g - level

    # Sums count samples and take the step lengths at the end, so integer
    # images (the all-ones normalizer) stay exact until that one multiply.
    sums = []
    length = 1.0
    for k in basis.sum_order:
        g = _directional_sum(g, basis.steps[k])
        length *= float(basis.step_lengths[k])
        scaled = g * length
        scaled.setflags(write=False)
        sums.append(scaled)
    logger.debug("running sums on %s: %dx%d padded to %dx%d", basis.name, width, height,
                 g.shape[1], g.shape[0])
    return RunningSumStack(basis, tuple(sums), margin, (height, width))


@lru_cache(maxsize=4)
def unit_stack(basis: DirectionBasis, height: int, width: int, margin: int) -> RunningSumStack:
    """g4 of an all-ones image extended over the whole padded domain."""
    full = compute_running_sums(np.ones((height, width)), basis, margin, edge="replicate")
    return RunningSumStack(basis, (full.g4,), margin, full.shape)


# ── Mesh ────────────────────────────────────────────────────────────────────


@dataclass(frozen=True)
class MeshSpec:
    """16 taps (offset, weight) and the recentering shift τ."""

    basis: DirectionBasis
    scales: ScaleVector
    offsets: np.ndarray     # (16, 2) as (x, y)
    weights: np.ndarray     # (16,)
    tau: np.ndarray         # (2,)

    @property
    def taps(self) -> list[tuple[tuple[float, float], float]]:
        return [((float(x), float(y)), float(w)) for (x, y), w in zip(self.offsets, self.weights)]


def mesh_arrays(scales, basis: DirectionBasis) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized build_mesh over scale arrays with a trailing axis of 4.

    Returns offsets (..., 16, 2), weights (..., 16) and tau (..., 2).
    """
    a = np.asarray(scales, dtype=float)
    d = a[..., :, None] * basis.directions                         # (..., 4, 2)
    offsets = np.einsum("ik,...kc->...ic", SUBSETS, d)
    weights = SUBSET_SIGNS / a.prod(axis=-1)[..., None]
    tau = 0.5 * np.einsum("...k,kc->...c", a - basis.step_lengths, basis.directions)
    return offsets, weights, tau


def build_mesh(scales: ScaleVector, basis: DirectionBasis) -> MeshSpec:
    if min(scales.as_tuple()) <= 0:
        raise InvalidArgument(f"scale vector {scales.as_tuple()} has a zero width; "
                              "the finite-difference mesh needs four")
    offsets, weights, tau = mesh_arrays(scales.as_array(), basis)
    return MeshSpec(basis, scales, offsets, weights, tau)


def _reach(scales, basis: DirectionBasis) -> np.ndarray:
    offsets, _, tau = mesh_arrays(scales, basis)
    return np.abs(tau[..., None, :] - offsets).max(axis=(-2, -1))


def required_margin(scales, basis: DirectionBasis) -> int:
    """Smallest padding margin that holds every tap's window for these scales."""
    scales = scales.as_array() if isinstance(scales, ScaleVector) else np.asarray(scales, dtype=float)
    reach = float(np.max(_reach(scales, basis))) if scales.size else 0.0
    return int(math.ceil(reach)) + min_margin(basis)


# ── Interpolation and mesh application ─────────────────────────────────────


def _window(px: np.ndarray, py: np.ndarray, basis: DirectionBasis):
    """Node rows, cols and weights of the windows at padded-domain positions."""
    jx, jy = window_offsets(basis)
    ix = np.floor(px)
    iy = np.floor(py)
    w = window_weights(basis, px - ix, py - iy)
    cols = ix.astype(np.int64)[..., None, None] + jx[None, :]
    rows = iy.astype(np.int64)[..., None, None] + jy[:, None]
    return rows, cols, w


def _gather(g4: np.ndarray, px: np.ndarray, py: np.ndarray, basis: DirectionBasis) -> np.ndarray:
    """F at padded-domain positions px, py (any shape)."""
    rows, cols, w = _window(px, py, basis)
    return (g4[rows, cols] * w).sum(axis=(-2, -1))


def interpolate(stack: RunningSumStack, x, y):
    """F(x, y) in image coordinates (x = col, y = row)."""
    px = np.asarray(x, dtype=float) + stack.margin
    py = np.asarray(y, dtype=float) + stack.margin
    jx, jy = window_offsets(stack.basis)
    rows, cols = stack.padded_shape
    lo_x, lo_y = np.floor(px) + jx[0], np.floor(py) + jy[0]
    hi_x, hi_y = np.floor(px) + jx[-1], np.floor(py) + jy[-1]
    if np.any(lo_x < 0) or np.any(lo_y < 0) or np.any(hi_x >= cols) or np.any(hi_y >= rows):
        raise DomainError(f"interpolation window at ({x}, {y}) leaves the padded domain")
    out = _gather(stack.g4, px, py, stack.basis)
    return float(out) if np.ndim(out) == 0 else out


def _resolve_threads(threads: int | None) -> int:
    threads = settings.THREADS if threads is None else threads
    return threads if threads > 0 else (os.cpu_count() or 1)


def _apply_block(stack: RunningSumStack, unit: RunningSumStack | None, rows: np.ndarray,
                 cols: np.ndarray, scales: np.ndarray) -> np.ndarray:
    offsets, weights, tau = mesh_arrays(scales, stack.basis)
    px = (cols + stack.margin)[:, None] + tau[:, None, 0] - offsets[..., 0]
    py = (rows + stack.margin)[:, None] + tau[:, None, 1] - offsets[..., 1]
    win_rows, win_cols, w = _window(px, py, stack.basis)
    value = (weights * (stack.g4[win_rows, win_cols] * w).sum(axis=(-2, -1))).sum(axis=-1)
    if unit is not None:
        value = value / (weights * (unit.g4[win_rows, win_cols] * w).sum(axis=(-2, -1))).sum(axis=-1)
    return value


def mesh_filter(stack: RunningSumStack, scales: np.ndarray, *, unit: RunningSumStack | None = None,
                mask: np.ndarray | None = None, threads: int | None = None) -> np.ndarray:
    """Apply each pixel's mesh to the stack; pixels outside `mask` are 0.

    `unit` is the normalizer stack (same basis, shape and margin); when
    given, every pixel is divided by its response on it.
    """
    height, width = stack.shape
    scales = np.asarray(scales, dtype=float)
    if scales.shape != (height, width, 4):
        raise InvalidArgument(f"scale map {scales.shape} does not match image {(height, width)}")
    mask = np.ones((height, width), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)

    rows, cols = np.nonzero(mask)
    active = scales[rows, cols]
    if active.size:
        too_far = _reach(active, stack.basis) + min_margin(stack.basis) > stack.margin
        if too_far.any():
            i = int(np.argmax(too_far))
            raise InvalidArgument(f"scales {active[i].tolist()} at pixel (row={rows[i]}, col={cols[i]}) "
                                  f"reach past the {stack.margin}px margin")

    out = np.zeros((height, width))
    block = max(settings.PIXEL_BLOCK, 1)
    starts = range(0, len(rows), block)

    def work(start: int) -> None:
        sl = slice(start, start + block)
        out[rows[sl], cols[sl]] = _apply_block(stack, unit, rows[sl], cols[sl], active[sl])

    n_threads = _resolve_threads(threads)
    if n_threads == 1 or len(starts) <= 1:
        for start in starts:
            work(start)
    else:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            list(pool.map(work, starts))
    return out


def _validate_scale_map(scalemap, shape: tuple[int, int], min_scale: float,
                        mask: np.ndarray | None) -> np.ndarray:
    if isinstance(scalemap, ScaleVector):
        scalemap = np.broadcast_to(scalemap.as_array(), shape + (4,))
    scales = np.asarray(scalemap, dtype=float)
    if scales.shape != shape + (4,):
        raise InvalidArgument(f"scale map {scales.shape} does not match image {shape}")
    bad = ~np.isfinite(scales).all(axis=-1) | (scales < min_scale).any(axis=-1)
    if mask is not None:
        bad &= mask
    if bad.any():
        row, col = (int(v) for v in np.argwhere(bad)[0])
        raise InvalidArgument(f"scales {scales[row, col].tolist()} at pixel (row={row}, col={col}) "
                              f"are below the {min_scale:g}px minimum or not finite")
    return scales


def filter_space_variant(image, scalemap, basis: str | DirectionBasis, edge: str = "zero", *,
                         threads: int | None = None, normalize_dc: bool | None = None,
                         min_scale: float | None = None, mask: np.ndarray | None = None) -> np.ndarray:
    """Filter every pixel with its own box spline in O(1) per pixel.

    `scalemap` is a ScaleVector (applied everywhere) or an (H, W, 4) array.
    """
    basis = get_basis(basis)
    image = np.asarray(image, dtype=float)
    if image.ndim != 2:
        raise InvalidArgument(f"image must be 2-D, got shape {image.shape}")
    normalize_dc = settings.NORMALIZE_DC if normalize_dc is None else normalize_dc
    min_scale = settings.MIN_SCALE if min_scale is None else min_scale
    mask = None if mask is None else np.asarray(mask, dtype=bool)
    scales = _validate_scale_map(scalemap, image.shape, min_scale, mask)
    active = scales if mask is None else scales[mask]
    margin = required_margin(active.reshape(-1, 4), basis)

    if not normalize_dc:
        stack = compute_running_sums(image, basis, margin, edge)
        return mesh_filter(stack, scales, mask=mask, threads=threads)

    # Normalized output commutes with adding a constant over the padded
    # domain, so filtering (f − c) keeps the sums small and maps c back exactly.
    level = float(image.mean())
    stack = compute_running_sums(image, basis, margin, edge, level=level)
    unit = unit_stack(basis, image.shape[0], image.shape[1], margin)
    out = mesh_filter(stack, scales, unit=unit, mask=mask, threads=threads)
    if mask is None:
        return out + level
    return np.where(mask, out + level, 0.0)
