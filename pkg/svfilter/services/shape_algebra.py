"""Shape algebra for four-directional box splines.

Pure computation, no I/O. Every other service builds on the types defined
here, so this module also owns the shared error hierarchy.

Model
-----
1. A box spline on a direction basis is the convolution of four centered
   box distributions of widths a1..a4 along unit directions u1..u4. Its
   covariance is (1/12)·Σ a_k²·u_k·u_kᵀ, which on each basis reduces to an
   integer pattern matrix applied to the squared scales (u_k = a_k²).
2. A covariance is summarised by its shape: size s (trace), elongation ρ
   (eigenvalue ratio) and orientation θ (major eigenvector, in [0, π)).
3. Four directions can only realize elongations up to a bound e(φ) that
   depends on the orientation φ: infinite along a basis axis, smallest
   mid-way between two adjacent axes.
4. Splitting C = σ²·I + ΔC lets an isotropic pass absorb part of the
   covariance. σ² must stay below the bound that keeps ΔC positive definite
   and within the basis' elongation bound.
5. Two bases with interleaved axes (THETA and THETA_PRIME) cover each
   other's weak orientations; a pixel uses the basis with the larger bound.

Orientation angles follow image axes: x is the column index, y the row
index, and angles are measured from +x towards +y.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from svfilter.config import settings


class InvalidArgument(ValueError):
    """Raised when an argument violates a documented precondition."""


class InfeasibleError(ValueError):
    """Raised when a requested kernel cannot be realized."""


class InfeasibleSplit(InfeasibleError):
    """Raised when no positive σ² keeps ΔC within the basis' elongation bound."""


# ── Direction bases ─────────────────────────────────────────────────────────


@dataclass(frozen=True)
class DirectionBasis:
    """Four grid directions with integer steps and their moment patterns."""

    name: str
    steps: tuple[tuple[int, int], ...]          # (dx, dy) per direction
    sum_order: tuple[int, ...]                  # running-sum order over steps
    moment_pattern: tuple[tuple[int, ...], ...]  # rows: C11, C12, C22
    moment_denominator: int

    @cached_property
    def step_vectors(self) -> np.ndarray:
        return np.array(self.steps, dtype=float)

    @cached_property
    def step_lengths(self) -> np.ndarray:
        return np.hypot(self.step_vectors[:, 0], self.step_vectors[:, 1])

    @cached_property
    def directions(self) -> np.ndarray:
        """Unit direction vectors u_k, shape (4, 2)."""
        return self.step_vectors / self.step_lengths[:, None]

    @cached_property
    def axis_angles(self) -> np.ndarray:
        """Direction angles in [0, π), ascending."""
        ang = np.mod(np.arctan2(self.directions[:, 1], self.directions[:, 0]), math.pi)
        return np.sort(ang)

    @cached_property
    def pattern(self) -> np.ndarray:
        return np.array(self.moment_pattern, dtype=float)

    @cached_property
    def drift(self) -> float:
        """Horizontal travel per row of the trailing negative-x directions."""
        neg = [abs(dx) / dy for dx, dy in self.steps if dx < 0]
        return max(neg) if neg else 0.0

    def __repr__(self) -> str:
        return f"DirectionBasis({self.name})"


THETA = DirectionBasis(
    name="theta",
    steps=((1, 0), (1, 1), (0, 1), (-1, 1)),
    sum_order=(0, 1, 2, 3),
    moment_pattern=((2, 1, 0, 1), (0, 1, 0, -1), (0, 1, 2, 1)),
    moment_denominator=24,
)

# The (1,2) sum runs first: g1 of an impulse lies on (k, 2k).
THETA_PRIME = DirectionBasis(
    name="theta-prime",
    steps=((2, 1), (1, 2), (-1, 2), (-2, 1)),
    sum_order=(1, 0, 2, 3),
    moment_pattern=((4, 1, 1, 4), (2, 2, -2, -2), (1, 4, 4, 1)),
    moment_denominator=60,
)

BASES = {THETA.name: THETA, THETA_PRIME.name: THETA_PRIME}


def get_basis(name: str | DirectionBasis) -> DirectionBasis:
    if isinstance(name, DirectionBasis):
        return name
    try:
        return BASES[name]
    except KeyError:
        raise InvalidArgument(f"unknown basis {name!r} (expected one of {sorted(BASES)})") from None


# ── Value types ─────────────────────────────────────────────────────────────


@dataclass(frozen=True)
class Covariance:
    """Symmetric positive-definite 2×2 matrix, squared pixels."""

    c11: float
    c12: float
    c22: float

    def __post_init__(self):
        vals = (self.c11, self.c12, self.c22)
        if not all(math.isfinite(v) for v in vals):
            raise InvalidArgument(f"covariance entries must be finite, got {vals}")
        det = self.c11 * self.c22 - self.c12 * self.c12
        if self.c11 <= 0 or self.c22 <= 0 or det <= 0:
            raise InvalidArgument(f"covariance {vals} is not positive definite")
        lam_max, lam_min = self.eigenvalues
        if lam_min <= 0 or lam_max / lam_min > settings.MAX_EIGEN_RATIO:
            raise InvalidArgument(
                f"covariance {vals} is a sliver (eigenvalue ratio above {settings.MAX_EIGEN_RATIO:g})"
            )

    @classmethod
    def from_matrix(cls, m) -> Covariance:
        m = np.asarray(m, dtype=float)
        if m.shape != (2, 2) or abs(m[0, 1] - m[1, 0]) > 1e-12 * max(1.0, abs(m).max()):
            raise InvalidArgument("covariance matrix must be a symmetric 2x2 array")
        return cls(float(m[0, 0]), float(m[0, 1]), float(m[1, 1]))

    @classmethod
    def isotropic(cls, variance: float) -> Covariance:
        return cls(variance, 0.0, variance)

    def as_matrix(self) -> np.ndarray:
        return np.array([[self.c11, self.c12], [self.c12, self.c22]])

    def as_array(self) -> np.ndarray:
        return np.array([self.c11, self.c12, self.c22])

    @property
    def eigenvalues(self) -> tuple[float, float]:
        """(λ_max, λ_min)."""
        tr = self.c11 + self.c22
        disc = math.hypot(self.c11 - self.c22, 2.0 * self.c12)
        return 0.5 * (tr + disc), 0.5 * (tr - disc)

    def scaled(self, factor: float) -> Covariance:
        return Covariance(self.c11 * factor, self.c12 * factor, self.c22 * factor)

    def minus_isotropic(self, variance: float) -> Covariance:
        return Covariance(self.c11 - variance, self.c12, self.c22 - variance)


@dataclass(frozen=True)
class ShapeParams:
    """Size (trace), elongation (λ_max/λ_min) and orientation in [0, π)."""

    size: float
    elongation: float
    orientation: float

    def __post_init__(self):
        if not (self.size > 0 and math.isfinite(self.size)):
            raise InvalidArgument(f"size must be positive, got {self.size}")
        if not (self.elongation >= 1 and math.isfinite(self.elongation)):
            raise InvalidArgument(f"elongation must be >= 1, got {self.elongation}")
        if not (0 <= self.orientation < math.pi):
            raise InvalidArgument(f"orientation must lie in [0, pi), got {self.orientation}")

    @classmethod
    def from_degrees(cls, size: float, elongation: float, degrees: float) -> ShapeParams:
        return cls(size, elongation, math.radians(degrees) % math.pi)


@dataclass(frozen=True)
class ScaleVector:
    """Box widths a1..a4 along the basis directions, pixels."""

    a1: float
    a2: float
    a3: float
    a4: float

    def __post_init__(self):
        vals = self.as_tuple()
        if not all(math.isfinite(v) and v >= 0 for v in vals):
            raise InvalidArgument(f"scales must be finite and nonnegative, got {vals}")
        if sum(v == 0 for v in vals) > 1:
            raise InvalidArgument(f"at most one scale may be zero, got {vals}")

    @classmethod
    def from_array(cls, a) -> ScaleVector:
        a = np.asarray(a, dtype=float).reshape(4)
        return cls(*(float(v) for v in a))

    @classmethod
    def equal(cls, a: float) -> ScaleVector:
        return cls(a, a, a, a)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.a1, self.a2, self.a3, self.a4)

    def as_array(self) -> np.ndarray:
        return np.array(self.as_tuple())

    @property
    def squares(self) -> np.ndarray:
        return self.as_array() ** 2


@dataclass(frozen=True)
class CovarianceMap:
    """Per-pixel covariance planes, indexed [row, col]. Not validated here."""

    c11: np.ndarray
    c12: np.ndarray
    c22: np.ndarray

    def __post_init__(self):
        planes = [np.asarray(p, dtype=float) for p in (self.c11, self.c12, self.c22)]
        if planes[0].ndim != 2 or any(p.shape != planes[0].shape for p in planes):
            raise InvalidArgument("covariance planes must be 2-D arrays of equal shape")
        object.__setattr__(self, "c11", planes[0])
        object.__setattr__(self, "c12", planes[1])
        object.__setattr__(self, "c22", planes[2])

    @classmethod
    def constant(cls, height: int, width: int, cov: Covariance) -> CovarianceMap:
        if height < 1 or width < 1:
            raise InvalidArgument(f"map dimensions must be positive, got {width}x{height}")
        return cls(np.full((height, width), cov.c11),
                   np.full((height, width), cov.c12),
                   np.full((height, width), cov.c22))

    @classmethod
    def from_stack(cls, planes) -> CovarianceMap:
        planes = np.asarray(planes, dtype=float)
        if planes.ndim != 3 or planes.shape[-1] != 3:
            raise InvalidArgument("expected an (H, W, 3) array of (c11, c12, c22)")
        return cls(planes[..., 0], planes[..., 1], planes[..., 2])

    @property
    def shape(self) -> tuple[int, int]:
        return self.c11.shape

    def stack(self) -> np.ndarray:
        return np.stack([self.c11, self.c12, self.c22], axis=-1)

    def at(self, row: int, col: int) -> Covariance:
        return Covariance(float(self.c11[row, col]), float(self.c12[row, col]),
                          float(self.c22[row, col]))

    def is_constant(self) -> bool:
        return all(np.all(p == p.flat[0]) for p in (self.c11, self.c12, self.c22))


# ── Scale vector -> covariance ──────────────────────────────────────────────


def moments_from_squares(u, basis: DirectionBasis) -> np.ndarray:
    """(C11, C12, C22) for squared scales u, broadcasting over leading axes."""
    u = np.asarray(u, dtype=float)
    return u @ basis.pattern.T / basis.moment_denominator


def box_spline_covariance(a: ScaleVector, basis: DirectionBasis) -> Covariance:
    c11, c12, c22 = moments_from_squares(a.squares, basis)
    try:
        return Covariance(float(c11), float(c12), float(c22))
    except InvalidArgument as exc:
        raise InvalidArgument(f"scale vector {a.as_tuple()} is degenerate on {basis.name}") from exc


def beta_covariance(a: ScaleVector) -> Covariance:
    return box_spline_covariance(a, THETA)


def beta_prime_covariance(a: ScaleVector) -> Covariance:
    return box_spline_covariance(a, THETA_PRIME)


# ── Shape parameters ────────────────────────────────────────────────────────


def shape_arrays(c11, c12, c22) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized (size, elongation, orientation); isotropic entries get θ = 0."""
    c11, c12, c22 = (np.asarray(v, dtype=float) for v in (c11, c12, c22))
    tr = c11 + c22
    disc = np.hypot(c11 - c22, 2.0 * c12)
    lam_max = 0.5 * (tr + disc)
    lam_min = 0.5 * (tr - disc)
    with np.errstate(divide="ignore", invalid="ignore"):
        rho = np.where(lam_min > 0, lam_max / lam_min, np.inf)
    theta = np.mod(0.5 * np.arctan2(2.0 * c12, c11 - c22), math.pi)
    theta = np.where(disc == 0, 0.0, theta)
    # mod can round a tiny negative angle up to exactly π
    theta = np.where(theta >= math.pi, 0.0, theta)
    return tr, np.maximum(rho, 1.0), theta


def shape_from_covariance(cov: Covariance) -> ShapeParams:
    s, rho, theta = shape_arrays(cov.c11, cov.c12, cov.c22)
    return ShapeParams(float(s), float(rho), float(theta))


def covariance_from_shape(p: ShapeParams) -> Covariance:
    lam_max = p.size * p.elongation / (1.0 + p.elongation)
    lam_min = p.size / (1.0 + p.elongation)
    c, s = math.cos(p.orientation), math.sin(p.orientation)
    return Covariance(
        lam_max * c * c + lam_min * s * s,
        (lam_max - lam_min) * s * c,
        lam_max * s * s + lam_min * c * c,
    )


def covariance_arrays_from_shape(size, elongation, orientation):
    size, elongation, orientation = np.broadcast_arrays(
        *(np.asarray(v, dtype=float) for v in (size, elongation, orientation)))
    lam_max = size * elongation / (1.0 + elongation)
    lam_min = size / (1.0 + elongation)
    c, s = np.cos(orientation), np.sin(orientation)
    return (lam_max * c * c + lam_min * s * s,
            (lam_max - lam_min) * s * c,
            lam_max * s * s + lam_min * c * c)


def shape_from_scales(a: ScaleVector, basis: DirectionBasis) -> ShapeParams:
    """Shape of the box spline with scales a, without building the matrix first.

    The size is (a·a)/12 on both bases because every u_k is a unit vector.
    """
    c11, c12, c22 = moments_from_squares(a.squares, basis)
    size = float(a.squares.sum()) / 12.0
    disc = math.hypot(c11 - c22, 2.0 * c12)
    if disc >= size:
        raise InvalidArgument(f"scale vector {a.as_tuple()} is degenerate on {basis.name}")
    rho = (size + disc) / (size - disc)
    theta = 0.0 if disc == 0 else (0.5 * math.atan2(2.0 * c12, c11 - c22)) % math.pi
    return ShapeParams(size, rho, theta if theta < math.pi else 0.0)


# ── Elongation bounds ───────────────────────────────────────────────────────


def _on_axis(phi: np.ndarray, basis: DirectionBasis, tol: float = 1e-12) -> np.ndarray:
    d = np.abs(np.mod(phi[..., None] - basis.axis_angles + math.pi / 2, math.pi) - math.pi / 2)
    return np.any(d < tol, axis=-1)


def _theta_bound(phi: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.abs(np.tan(phi) - 1.0 / np.tan(phi)) / 2.0
        r = np.sqrt(1.0 + t * t)
        # (1+t+r)/(1+t−r) rationalized: (1+t+r)² / 2t
        e = (1.0 + t + r) ** 2 / (2.0 * t)
    return np.where(np.isfinite(e) & (t > 0), e, np.inf)


def _cone_bound(phi: np.ndarray, basis: DirectionBasis) -> np.ndarray:
    """Largest elongation inside the cone spanned by the two axes around φ."""
    axes = basis.axis_angles
    upper = np.append(axes, axes[0] + math.pi)
    shifted = np.mod(phi - axes[0], math.pi) + axes[0]
    idx = np.clip(np.searchsorted(upper, shifted, side="right") - 1, 0, len(axes) - 1)
    psi = shifted - upper[idx]
    gamma = upper[idx + 1] - upper[idx]
    with np.errstate(divide="ignore", invalid="ignore"):
        alpha = np.sin(2.0 * (gamma - psi)) / np.sin(2.0 * psi)
        sin2 = np.sin(gamma) ** 2
        d = (1.0 + alpha) ** 2 - 4.0 * alpha * sin2
        e = (1.0 + alpha + np.sqrt(np.maximum(d, 0.0))) ** 2 / (4.0 * alpha * sin2)
    return np.where(np.isfinite(e) & (alpha > 0), e, np.inf)


def elongation_bound_array(phi, basis: DirectionBasis) -> np.ndarray:
    phi = np.mod(np.asarray(phi, dtype=float), math.pi)
    e = _theta_bound(phi) if basis is THETA else _cone_bound(phi, basis)
    return np.where(_on_axis(phi, basis), np.inf, e)


def elongation_bound(phi: float, basis: DirectionBasis) -> float:
    """Largest eigenvalue ratio `basis` can realize at orientation `phi`.

    Returns math.inf along a basis axis.
    """
    return float(elongation_bound_array(phi, basis))


def sector_select_array(phi) -> np.ndarray:
    """True where THETA_PRIME has the strictly larger bound."""
    return elongation_bound_array(phi, THETA_PRIME) > elongation_bound_array(phi, THETA)


def sector_select(phi: float) -> DirectionBasis:
    return THETA_PRIME if bool(sector_select_array(phi)) else THETA


# ── Covariance splitting ────────────────────────────────────────────────────


def _bound_coefficient(e: np.ndarray) -> np.ndarray:
    with np.errstate(invalid="ignore", divide="ignore"):
        k = (e + 1.0) / (e - 1.0)
    return np.where(np.isinf(e), 1.0, k)


def sigma_bound_elongation_array(c11, c12, c22, bound) -> np.ndarray:
    """Vectorized `sigma_bound` with a precomputed elongation bound per entry."""
    c11, c12, c22 = (np.asarray(v, dtype=float) for v in (c11, c12, c22))
    disc = np.hypot(c11 - c22, 2.0 * c12)
    return 0.5 * (c11 + c22 - _bound_coefficient(np.asarray(bound, dtype=float)) * disc)


def sigma_bound_pd(cov: Covariance) -> float:
    return cov.eigenvalues[1]


def sigma_bound_elongation(cov: Covariance, basis: DirectionBasis) -> float:
    """Supremum of σ² keeping C − σ²I within the basis' elongation bound.

    Non-positive when C itself is already too elongated for the basis.
    """
    phi = shape_from_covariance(cov).orientation
    e = elongation_bound_array(phi, basis)
    return float(sigma_bound_elongation_array(cov.c11, cov.c12, cov.c22, e))


def split_covariance(cov: Covariance, fraction: float,
                     basis: DirectionBasis) -> tuple[float, Covariance]:
    if not 0 < fraction < 1:
        raise InvalidArgument(f"fraction must lie in (0, 1), got {fraction}")
    bound = sigma_bound_elongation(cov, basis)
    if bound <= 0:
        s = shape_from_covariance(cov)
        raise InfeasibleSplit(
            f"elongation {s.elongation:.3g} at {math.degrees(s.orientation):.1f} deg "
            f"exceeds the {basis.name} bound {elongation_bound(s.orientation, basis):.3g}"
        )
    sigma2 = fraction * bound
    return sigma2, cov.minus_isotropic(sigma2)
