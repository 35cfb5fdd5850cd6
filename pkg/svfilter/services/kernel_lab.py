"""Kernel lab: exact box-spline evaluation, sampling, moments and oracles.

Everything here is the slow, trustworthy side of the project. The O(1)
engine is tested against it.

Model
-----
1. A four-direction box spline splits into two orthogonal pairs,
   (u1, u3) and (u2, u4). Each pair convolves to a uniform rectangle, so
   the kernel at p is Area(R1 ∩ (R2 + p)) / (a1·a2·a3·a4), with R1 the
   a1 × a3 rectangle and R2 the a2 × a4 rectangle, both centered.
2. A scale vector with one zero entry leaves a rectangle and a segment.
   The value is then the length of the segment inside the rectangle,
   divided by the product of the three nonzero widths.
3. Inside each cell of the knot-line arrangement the kernel is a single
   quadratic, so a patch table fitted once reproduces the clipping path to
   rounding error at a fraction of the cost.
4. The brute-force filter samples each pixel's kernel at integer offsets,
   renormalizes the samples to unit sum and sums them against the image.
   O(size) per pixel.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.signal import convolve2d, fftconvolve

from svfilter.services.geometry import PatchTable, convex_hull, merge_close, rectangle_overlap, segment_overlap
from svfilter.services.scale_solver import InfeasibleCovariance, solve_dual_map, solve_scale_map
from svfilter.services.shape_algebra import (
    THETA,
    THETA_PRIME,
    Covariance,
    CovarianceMap,
    DirectionBasis,
    InvalidArgument,
    ScaleVector,
    box_spline_covariance,
    get_basis,
)

logger = logging.getLogger(__name__)

EVAL_CHUNK = 65536          # points per vectorized clipping batch
GAUSSIAN_RADIUS = 7.0       # sampled Gaussians reach this many std devs
BORDER_TOL = 1e-9           # relative border mass tolerated by numeric_moments
EDGE_POLICIES = ("zero", "replicate")


class InsufficientSupport(InvalidArgument):
    """Raised when a sampled raster is too small to contain its kernel."""


# ── Kernel specs ────────────────────────────────────────────────────────────


@dataclass(frozen=True)
class KernelSpec:
    basis: DirectionBasis
    scales: ScaleVector

    @property
    def covariance(self) -> Covariance:
        return box_spline_covariance(self.scales, self.basis)

    @property
    def half_width(self) -> tuple[float, float]:
        return kernel_support_half_width(self.basis, self.scales)

    def __call__(self, x, y) -> np.ndarray:
        return eval_box_spline(self.basis, self.scales, x, y)


def _scale_array(scales) -> np.ndarray:
    if isinstance(scales, ScaleVector):
        return scales.as_array()
    return np.asarray(scales, dtype=float)


def kernel_support_half_width(basis: DirectionBasis, scales) -> tuple[float, float]:
    """Half extents (x, y) of the kernel's bounding box."""
    a = _scale_array(scales)
    reach = 0.5 * a[..., None] * np.abs(basis.directions)
    hx, hy = np.moveaxis(reach.sum(axis=-2), -1, 0)
    return (float(hx), float(hy)) if np.ndim(hx) == 0 else (hx, hy)


def box_spline_knots(basis: DirectionBasis, scales) -> np.ndarray:
    """The 16 subset sums of a_k·u_k, recentered on the origin."""
    d = _scale_array(scales)[:, None] * basis.directions
    subsets = np.array(list(itertools.product((0, 1), repeat=4)), dtype=float)
    return subsets @ d - 0.5 * d.sum(axis=0)


def support_polygon(basis: DirectionBasis, scales) -> np.ndarray:
    return convex_hull(box_spline_knots(basis, scales))


# ── Evaluation ──────────────────────────────────────────────────────────────


def _eval_chunk(basis: DirectionBasis, a: np.ndarray, pts: np.ndarray) -> np.ndarray:
    u = basis.directions
    zero = a <= 0
    value = np.zeros(len(pts))

    regular = ~zero.any(axis=1)
    if regular.any():
        r = regular
        area = rectangle_overlap((u[0], 0.5 * a[r, 0], u[2], 0.5 * a[r, 2]),
                                 (u[1], 0.5 * a[r, 1], u[3], 0.5 * a[r, 3]), pts[r])
        value[r] = area / a[r].prod(axis=1)

    # one zero width: the pair holding it collapses to a segment
    for pair, other_pair, sign in (((1, 3), (0, 2), 1.0), ((0, 2), (1, 3), -1.0)):
        i, j = other_pair
        for z, keep in (pair, pair[::-1]):
            m = zero[:, z]
            if not m.any():
                continue
            length = segment_overlap((u[i], 0.5 * a[m, i], u[j], 0.5 * a[m, j]),
                                     u[keep], 0.5 * a[m, keep], sign * pts[m])
            value[m] = length / (a[m, i] * a[m, j] * a[m, keep])
    return value


def eval_box_spline(basis: DirectionBasis, scales, x, y) -> np.ndarray | float:
    """Exact box-spline value by rectangle clipping.

    `scales` is a ScaleVector or an array with a trailing axis of 4 that
    broadcasts against x and y (one scale vector per point).
    """
    a = _scale_array(scales)
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    shape = np.broadcast_shapes(x.shape, y.shape, a.shape[:-1])
    pts = np.stack([np.broadcast_to(x, shape).ravel(), np.broadcast_to(y, shape).ravel()], axis=1)
    a = np.broadcast_to(a, shape + (4,)).reshape(-1, 4)

    out = np.empty(len(pts))
    for start in range(0, len(pts), EVAL_CHUNK):
        sl = slice(start, start + EVAL_CHUNK)
        out[sl] = _eval_chunk(basis, a[sl], pts[sl])
    out = out.reshape(shape)
    return float(out) if out.ndim == 0 else out


def eval_beta(scales: ScaleVector, x, y):
    return eval_box_spline(THETA, scales, x, y)


def eval_beta_prime(scales: ScaleVector, x, y):
    return eval_box_spline(THETA_PRIME, scales, x, y)


@lru_cache(maxsize=64)
def patch_table(basis: DirectionBasis, scales: ScaleVector) -> PatchTable:
    """Piecewise-quadratic table of a box spline, one quadratic per cell."""
    knots = box_spline_knots(basis, scales)
    u = basis.directions
    normals = np.stack([-u[:, 1], u[:, 0]], axis=1)
    tol = 1e-9 * max(1.0, float(np.abs(knots).max()))
    offsets = [merge_close(knots @ n, tol) for n in normals]
    return PatchTable.build(convex_hull(knots), normals, offsets,
                            lambda x, y: eval_box_spline(basis, scales, x, y))


def gaussian_eval(cov: Covariance, x, y) -> np.ndarray | float:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    det = cov.c11 * cov.c22 - cov.c12 * cov.c12
    quad = (cov.c22 * x * x - 2.0 * cov.c12 * x * y + cov.c11 * y * y) / det
    out = np.exp(-0.5 * quad) / (2.0 * math.pi * math.sqrt(det))
    return float(out) if np.ndim(out) == 0 else out


# ── Sampled kernels ─────────────────────────────────────────────────────────


@dataclass(frozen=True)
class SampledKernel:
    """Origin-centered raster [row=y, col=x] of kernel values at `pitch`."""

    values: np.ndarray
    pitch: float
    normalized: bool = False

    @property
    def mass(self) -> float:
        return float(self.values.sum()) * self.pitch ** 2

    def coordinates(self) -> tuple[np.ndarray, np.ndarray]:
        return sample_grid(self.pitch, self.values.shape)


@dataclass(frozen=True)
class Moments:
    mass: float
    mean: np.ndarray
    cov: Covariance


def sample_grid(pitch: float, shape: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    rows, cols = shape
    if rows % 2 == 0 or cols % 2 == 0:
        raise InvalidArgument(f"sample grids must have odd dimensions, got {shape}")
    xs = (np.arange(cols) - cols // 2) * pitch
    ys = (np.arange(rows) - rows // 2) * pitch
    return np.meshgrid(xs, ys)


def _grid_shape(half_x: float, half_y: float, pitch: float, pad: int = 2) -> tuple[int, int]:
    return (2 * (math.ceil(half_y / pitch) + pad) + 1, 2 * (math.ceil(half_x / pitch) + pad) + 1)


def _finish(values: np.ndarray, pitch: float, normalize: bool) -> SampledKernel:
    if normalize:
        values = values / (values.sum() * pitch ** 2)
    return SampledKernel(values, pitch, normalize)


def sample_kernel(spec: KernelSpec, pitch: float, *, shape: tuple[int, int] | None = None,
                  method: str = "patches", normalize: bool = False) -> SampledKernel:
    """Sample a box spline on an odd grid covering its support.

    `method` is "patches" (patch table) or "clip" (direct clipping).
    """
    if pitch <= 0:
        raise InvalidArgument(f"pitch must be positive, got {pitch}")
    if shape is None:
        shape = _grid_shape(*spec.half_width, pitch)
    x, y = sample_grid(pitch, shape)
    if method == "patches":
        values = patch_table(spec.basis, spec.scales)(x, y)
    elif method == "clip":
        values = eval_box_spline(spec.basis, spec.scales, x, y)
    else:
        raise InvalidArgument(f"unknown sampling method {method!r}")
    return _finish(np.maximum(values, 0.0), pitch, normalize)


def sample_gaussian(cov: Covariance, pitch: float, *, shape: tuple[int, int] | None = None,
                    normalize: bool = False) -> SampledKernel:
    if pitch <= 0:
        raise InvalidArgument(f"pitch must be positive, got {pitch}")
    if shape is None:
        shape = _grid_shape(GAUSSIAN_RADIUS * math.sqrt(cov.c11),
                            GAUSSIAN_RADIUS * math.sqrt(cov.c22), pitch)
    x, y = sample_grid(pitch, shape)
    return _finish(gaussian_eval(cov, x, y), pitch, normalize)


def compose_kernels(f: SampledKernel, g: SampledKernel) -> SampledKernel:
    """Continuous-domain convolution of two sampled kernels on the same pitch."""
    if not math.isclose(f.pitch, g.pitch):
        raise InvalidArgument(f"pitch mismatch: {f.pitch} vs {g.pitch}")
    values = fftconvolve(f.values, g.values, mode="full") * f.pitch ** 2
    return SampledKernel(values, f.pitch, f.normalized and g.normalized)


def embed(k: SampledKernel, shape: tuple[int, int]) -> SampledKernel:
    """Zero-pad (or center-crop) a sampled kernel to `shape`."""
    out = np.zeros(shape)
    rows, cols = k.values.shape
    r0, c0 = shape[0] // 2 - rows // 2, shape[1] // 2 - cols // 2
    src_r = slice(max(0, -r0), min(rows, shape[0] - r0))
    src_c = slice(max(0, -c0), min(cols, shape[1] - c0))
    dst_r = slice(src_r.start + r0, src_r.stop + r0)
    dst_c = slice(src_c.start + c0, src_c.stop + c0)
    out[dst_r, dst_c] = k.values[src_r, src_c]
    return SampledKernel(out, k.pitch, k.normalized)


def _moments(values: np.ndarray, x: np.ndarray, y: np.ndarray, cell: float) -> Moments:
    mass = float(values.sum()) * cell
    if mass == 0:
        raise InvalidArgument("raster has zero mass")
    mx = float((values * x).sum()) * cell / mass
    my = float((values * y).sum()) * cell / mass
    dx, dy = x - mx, y - my
    c11 = float((values * dx * dx).sum()) * cell / mass
    c12 = float((values * dx * dy).sum()) * cell / mass
    c22 = float((values * dy * dy).sum()) * cell / mass
    return Moments(mass, np.array([mx, my]), Covariance(c11, c12, c22))


def numeric_moments(k: SampledKernel, *, border_tol: float = BORDER_TOL) -> Moments:
    """Mass, mean and covariance by Riemann sums at the kernel's pitch."""
    v = k.values
    border = max(np.abs(v[0]).max(), np.abs(v[-1]).max(), np.abs(v[:, 0]).max(), np.abs(v[:, -1]).max())
    if border > border_tol * np.abs(v).max():
        raise InsufficientSupport(f"kernel raster {v.shape} at pitch {k.pitch} does not cover the support")
    x, y = k.coordinates()
    return _moments(v, x, y, k.pitch ** 2)


def impulse_moments(raster: np.ndarray, center: tuple[int, int]) -> Moments:
    """Moments of a filter response around the impulse at (row, col)."""
    raster = np.asarray(raster, dtype=float)
    rows, cols = np.indices(raster.shape)
    return _moments(raster, cols - center[1], rows - center[0], 1.0)


def _pair(f, g) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(f, SampledKernel) and isinstance(g, SampledKernel) and not math.isclose(f.pitch, g.pitch):
        raise InvalidArgument(f"pitch mismatch: {f.pitch} vs {g.pitch}")
    fv = f.values if isinstance(f, SampledKernel) else np.asarray(f, dtype=float)
    gv = g.values if isinstance(g, SampledKernel) else np.asarray(g, dtype=float)
    if fv.shape != gv.shape:
        raise InvalidArgument(f"raster shapes differ: {fv.shape} vs {gv.shape}")
    return fv, gv


def normalized_l2_error(f, g) -> float:
    fv, gv = _pair(f, g)
    return float(np.linalg.norm(fv - gv) / np.linalg.norm(gv))


def max_pointwise_error(f, g) -> float:
    fv, gv = _pair(f, g)
    return float(np.abs(fv - gv).max() / np.abs(gv).max())


# ── Central limit demonstration ─────────────────────────────────────────────


@dataclass(frozen=True)
class CltResult:
    kernel: SampledKernel
    max_err_fraction: float


def _segment_raster(width: float, angle: float, pitch: float) -> np.ndarray:
    """Unit-mass centered segment, bilinearly splatted onto an odd grid."""
    half = math.ceil(0.5 * width / pitch) + 1
    raster = np.zeros((2 * half + 1, 2 * half + 1))
    n = max(int(math.ceil(4.0 * width / pitch)), 2)
    s = (np.arange(n) + 0.5) / n - 0.5
    px = half + s * width * math.cos(angle) / pitch
    py = half + s * width * math.sin(angle) / pitch
    i0, j0 = np.floor(py).astype(int), np.floor(px).astype(int)
    fy, fx = py - i0, px - j0
    for di, wy in ((0, 1.0 - fy), (1, fy)):
        for dj, wx in ((0, 1.0 - fx), (1, fx)):
            np.add.at(raster, (i0 + di, j0 + dj), wy * wx / n)
    return raster


def clt_demo(n: int, sigma: float = 1.0, pitch: float | None = None) -> CltResult:
    """Convolve n equal boxes at angles kπ/n and compare with the Gaussian σ²·I.

    Each box has width σ·√(24/n), so the composite covariance is exactly σ²·I.
    """
    if n < 2:
        raise InvalidArgument(f"n must be at least 2, got {n}")
    pitch = 0.02 * sigma if pitch is None else pitch
    if pitch > 0.05 * sigma:
        raise InvalidArgument(f"pitch {pitch} is coarser than 0.05·sigma")
    width = sigma * math.sqrt(24.0 / n)
    half = math.ceil(0.5 * n * width / pitch) + 2
    acc = np.zeros((2 * half + 1, 2 * half + 1))
    acc[half, half] = 1.0
    for k in range(n):
        acc = fftconvolve(acc, _segment_raster(width, k * math.pi / n, pitch), mode="same")
    kernel = SampledKernel(acc / pitch ** 2, pitch, normalized=True)
    target = sample_gaussian(Covariance.isotropic(sigma * sigma), pitch, shape=acc.shape)
    err = max_pointwise_error(kernel, target)
    logger.debug("clt n=%d: max error %.4f of peak", n, err)
    return CltResult(kernel, err)


# ── Brute-force space-variant filter ────────────────────────────────────────


def _pad(image: np.ndarray, radius_y: int, radius_x: int, edge: str) -> np.ndarray:
    if edge not in EDGE_POLICIES:
        raise InvalidArgument(f"unknown edge policy {edge!r} (expected one of {EDGE_POLICIES})")
    mode = "constant" if edge == "zero" else "edge"
    return np.pad(image, ((radius_y, radius_y), (radius_x, radius_x)), mode=mode)


def _first_pixel(mask: np.ndarray) -> tuple[int, int]:
    row, col = np.argwhere(mask)[0]
    return int(row), int(col)


def _resolve_scales(source, basis, shape) -> tuple[np.ndarray, np.ndarray]:
    """(H, W, 4) scales and a per-pixel THETA_PRIME mask."""
    if isinstance(source, CovarianceMap):
        if source.shape != shape:
            raise InvalidArgument(f"covariance map {source.shape} does not match image {shape}")
        if basis == "dual":
            scales, use_prime, ok = solve_dual_map(source.c11, source.c12, source.c22)
        else:
            basis = get_basis(basis)
            scales, ok = solve_scale_map(source.c11, source.c12, source.c22, basis)
            use_prime = np.full(shape, basis is THETA_PRIME)
        if not ok.all():
            row, col = _first_pixel(~ok)
            raise InfeasibleCovariance(f"covariance at pixel (row={row}, col={col}) is infeasible "
                                       f"on {basis if isinstance(basis, str) else basis.name}")
        return scales, use_prime

    scales = np.asarray(source, dtype=float)
    if scales.shape != shape + (4,):
        raise InvalidArgument(f"scale map {scales.shape} does not match image {shape}")
    bad = ~np.isfinite(scales).all(axis=-1) | (scales < 0).any(axis=-1) | ((scales == 0).sum(axis=-1) > 1)
    if bad.any():
        row, col = _first_pixel(bad)
        raise InvalidArgument(f"invalid scale vector at pixel (row={row}, col={col}): {scales[row, col]}")
    basis = get_basis(basis)
    return scales, np.full(shape, basis is THETA_PRIME)


def brute_force_filter(image, source, basis: str | DirectionBasis = "theta", edge: str = "zero"
                       ) -> np.ndarray:
    """Direct space-variant filtering; the reference for the O(1) engine.

    `source` is a CovarianceMap (solved per pixel on `basis`, which may be
    "dual"), an (H, W, 4) scale map on `basis`, or a 2-D odd-sized kernel
    indexed [dy, dx] applied as a plain convolution.
    """
    image = np.asarray(image, dtype=float)
    if image.ndim != 2:
        raise InvalidArgument(f"image must be 2-D, got shape {image.shape}")

    if isinstance(source, np.ndarray) and source.ndim == 2:
        ky, kx = source.shape
        if ky % 2 == 0 or kx % 2 == 0:
            raise InvalidArgument(f"explicit kernels must have odd dimensions, got {source.shape}")
        padded = _pad(image, ky // 2, kx // 2, edge)
        return convolve2d(padded, source / source.sum(), mode="valid")

    scales, use_prime = _resolve_scales(source, basis, image.shape)
    half = np.zeros(image.shape + (2,))
    for b, mask in ((THETA, ~use_prime), (THETA_PRIME, use_prime)):
        if mask.any():
            hx, hy = kernel_support_half_width(b, scales[mask])
            half[mask] = np.stack([hx, hy], axis=-1)
    rx, ry = (int(math.floor(v)) for v in half.reshape(-1, 2).max(axis=0))

    padded = _pad(image, ry, rx, edge)
    height, width = image.shape
    acc = np.zeros(image.shape)
    norm = np.zeros(image.shape)
    for dy in range(-ry, ry + 1):
        for dx in range(-rx, rx + 1):
            reach = (np.abs(dx) < half[..., 0]) & (np.abs(dy) < half[..., 1])
            if not reach.any():
                continue
            k = np.zeros(image.shape)
            for b, mask in ((THETA, reach & ~use_prime), (THETA_PRIME, reach & use_prime)):
                if mask.any():
                    k[mask] = eval_box_spline(b, scales[mask], float(dx), float(dy))
            window = padded[ry - dy: ry - dy + height, rx - dx: rx - dx + width]
            acc += k * window
            norm += k
    logger.debug("brute force: %dx%d image, window %dx%d", width, height, 2 * rx + 1, 2 * ry + 1)
    return acc / norm
