"""Scale-vector solver: the inverse of the box-spline covariance map.

Pure computation, no I/O.

Model
-----
1. The covariance is linear in the squared scales u_k = a_k², giving three
   equations in four unknowns. The solutions form a line u(t) = u0 + t·v,
   and the realizable part of that line (every u_k ≥ min_scale²) is an
   interval [t_lo, t_hi].
2. On THETA the free parameter is t = u2 + u4. On THETA_PRIME it is u1.
   Both null directions are (±1, ∓1, ±1, ∓1).
3. Among the family, pick the kernel with the least kurtosis: the Frobenius
   norm of the fourth-moment pattern matrix applied to u². Along the line
   that norm is convex in t, so a golden-section search on [t_lo, t_hi]
   finds it without derivatives.

The golden-section width is relative to the feasible interval, so every
pixel of a map runs the same number of iterations, and scaling C by λ
scales the solution's u by λ.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from svfilter.config import settings
from svfilter.services.shape_algebra import (
    THETA,
    THETA_PRIME,
    Covariance,
    DirectionBasis,
    InfeasibleError,
    InvalidArgument,
    ScaleVector,
    covariance_arrays_from_shape,
    elongation_bound,
    sector_select_array,
    shape_arrays,
    shape_from_covariance,
)

logger = logging.getLogger(__name__)

INV_PHI = (math.sqrt(5) - 1) / 2          # 1 / phi
INV_PHI_SQUARE = (3 - math.sqrt(5)) / 2   # 1 / phi^2


class InfeasibleCovariance(InfeasibleError):
    """Raised when a covariance lies outside the basis' realizable set."""

    def __init__(self, message: str, *, basis: DirectionBasis | None = None,
                 bound: float | None = None):
        super().__init__(message)
        self.basis = basis
        self.bound = bound


@dataclass(frozen=True)
class SolverFamily:
    """Squared scales u(t) = offset + t·slope for t in [t_lo, t_hi]."""

    basis: DirectionBasis
    offset: np.ndarray     # (..., 4)
    slope: np.ndarray      # (4,)
    t_lo: np.ndarray
    t_hi: np.ndarray

    @property
    def feasible(self) -> np.ndarray:
        return self.t_lo <= self.t_hi

    def squares(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        return self.offset + t[..., None] * self.slope


def _family_coefficients(c11, c12, c22, basis: DirectionBasis):
    c11, c12, c22 = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (c11, c12, c22)))
    if basis is THETA:
        offset = np.stack([12.0 * c11, 12.0 * c12, 12.0 * c22, -12.0 * c12], axis=-1)
        return offset, np.array([-0.5, 0.5, -0.5, 0.5])

    # 60·C11 = 4u1+u2+u3+4u4, 60·C22 = u1+4u2+4u3+u4, 30·C12 = u1+u2−u3−u4
    a, b, d = 60.0 * c11, 60.0 * c22, 30.0 * c12
    inner = (4.0 * b - a) / 15.0      # u2 + u3
    outer = (4.0 * a - b) / 15.0      # u1 + u4
    u2 = 0.5 * (inner + d + outer)
    u3 = 0.5 * (inner - d - outer)
    offset = np.stack([np.zeros_like(a), u2, u3, outer], axis=-1)
    return offset, np.array([1.0, -1.0, 1.0, -1.0])


def build_family_arrays(c11, c12, c22, basis: DirectionBasis, *,
                        min_scale: float = 0.0) -> SolverFamily:
    """Vectorized build_family; infeasible entries have t_lo > t_hi."""
    offset, slope = _family_coefficients(c11, c12, c22, basis)
    floor = min_scale * min_scale
    limits = (floor - offset) / slope
    t_lo = np.max(np.where(slope > 0, limits, -np.inf), axis=-1)
    t_hi = np.min(np.where(slope < 0, limits, np.inf), axis=-1)
    return SolverFamily(basis, offset, slope, t_lo, t_hi)


def build_family(cov: Covariance, basis: DirectionBasis, *,
                 min_scale: float = 0.0) -> SolverFamily:
    family = build_family_arrays(cov.c11, cov.c12, cov.c22, basis, min_scale=min_scale)
    if not bool(family.feasible):
        shape = shape_from_covariance(cov)
        bound = elongation_bound(shape.orientation, basis)
        detail = (f"elongation {shape.elongation:.3g} at {math.degrees(shape.orientation):.2f} deg, "
                  f"{basis.name} bound {bound:.3g}")
        if min_scale > 0 and shape.elongation < bound:
            detail += f", but a box would be narrower than {min_scale:g} px"
        raise InfeasibleCovariance(f"covariance {cov.as_array().tolist()} is infeasible: {detail}",
                                   basis=basis, bound=bound)
    return family


def kurtosis_objective(u, basis: DirectionBasis) -> np.ndarray | float:
    """Frobenius norm of the fourth-moment pattern matrix at squared scales u."""
    q = np.square(np.asarray(u, dtype=float))
    m11, m12, m22 = np.moveaxis(q @ basis.pattern.T, -1, 0)
    value = np.sqrt(m11 * m11 + 2.0 * m12 * m12 + m22 * m22)
    return float(value) if value.ndim == 0 else value


def _golden_section(fun, lo: np.ndarray, hi: np.ndarray, rel_tol: float) -> np.ndarray:
    """Lockstep golden-section search over arrays of intervals.

    Returns the best of the final midpoint and the two original endpoints,
    so boundary minimizers are returned exactly.
    """
    a = np.array(lo, dtype=float)
    b = np.array(hi, dtype=float)
    h = b - a
    steps = max(int(math.ceil(math.log(rel_tol) / math.log(INV_PHI))), 1)

    c = a + INV_PHI_SQUARE * h
    d = a + INV_PHI * h
    fc, fd = fun(c), fun(d)
    for _ in range(steps):
        left = fc < fd
        h = INV_PHI * h
        a_next = np.where(left, a, c)
        b_next = np.where(left, d, b)
        kept_x = np.where(left, c, d)
        kept_f = np.where(left, fc, fd)
        trial = np.where(left, a_next + INV_PHI_SQUARE * h, a_next + INV_PHI * h)
        fp = fun(trial)
        c, fc = np.where(left, trial, kept_x), np.where(left, fp, kept_f)
        d, fd = np.where(left, kept_x, trial), np.where(left, kept_f, fp)
        a, b = a_next, b_next

    candidates = np.stack([0.5 * (a + b), np.asarray(lo, dtype=float), np.asarray(hi, dtype=float)])
    values = np.stack([fun(x) for x in candidates])
    best = np.asarray(np.argmin(values, axis=0))
    return np.take_along_axis(candidates, best[None, ...], axis=0)[0]


def _minimize(family: SolverFamily, rel_tol: float) -> np.ndarray:
    ok = family.feasible
    lo = np.where(ok, family.t_lo, 0.0)
    hi = np.where(ok, family.t_hi, 0.0)

    def objective(t):
        return kurtosis_objective(family.squares(t), family.basis)

    return _golden_section(objective, lo, hi, rel_tol)


def solve_scale_map(c11, c12, c22, basis: DirectionBasis, *, min_scale: float = 0.0,
                    rel_tol: float | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Solve every entry of a covariance map at once.

    Returns (scales, feasible): scales has a trailing axis of 4 and holds NaN
    where the entry is infeasible.
    """
    rel_tol = settings.SOLVER_REL_TOL if rel_tol is None else rel_tol
    family = build_family_arrays(c11, c12, c22, basis, min_scale=min_scale)
    t = _minimize(family, rel_tol)
    u = np.maximum(family.squares(t), 0.0)
    # sqrt may round a floored u to just under min_scale
    scales = np.maximum(np.sqrt(u), min_scale)
    feasible = np.asarray(family.feasible)
    scales[~feasible] = np.nan
    if logger.isEnabledFor(logging.DEBUG):
        logger.debug("solved %d covariances on %s (%d infeasible)",
                     feasible.size, basis.name, int((~feasible).sum()))
    return scales, feasible


def solve_scales(cov: Covariance, basis: DirectionBasis, *, min_scale: float = 0.0,
                 rel_tol: float | None = None) -> ScaleVector:
    """Minimum-kurtosis scale vector whose box spline has covariance `cov`."""
    rel_tol = settings.SOLVER_REL_TOL if rel_tol is None else rel_tol
    family = build_family(cov, basis, min_scale=min_scale)
    t = _minimize(family, rel_tol)
    u = np.maximum(family.squares(t), 0.0)
    if np.count_nonzero(u <= 1e-12 * u.max()) > 1:
        raise InvalidArgument(f"covariance {cov.as_array().tolist()} only admits a degenerate kernel "
                              f"on {basis.name}")
    return ScaleVector.from_array(np.maximum(np.sqrt(u), min_scale))


def solve_dual_map(c11, c12, c22, *, near_isotropic: float | None = None,
                   min_scale: float = 0.0, rel_tol: float | None = None
                   ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-entry basis choice and scales for the dual-basis method.

    Near-isotropic entries go to THETA. The rest go to the basis with the
    larger elongation bound at their orientation, falling back to the other
    basis when the preferred one cannot realize the entry (for instance
    because of `min_scale`). Returns (scales, use_prime, feasible).
    """
    near_isotropic = settings.NEAR_ISOTROPIC if near_isotropic is None else near_isotropic
    _, rho, theta = shape_arrays(c11, c12, c22)
    prefer_prime = sector_select_array(theta) & (rho >= near_isotropic)

    theta_scales, theta_ok = solve_scale_map(c11, c12, c22, THETA, min_scale=min_scale, rel_tol=rel_tol)
    prime_scales, prime_ok = solve_scale_map(c11, c12, c22, THETA_PRIME, min_scale=min_scale,
                                             rel_tol=rel_tol)
    use_prime = np.where(prefer_prime, prime_ok | ~theta_ok, ~theta_ok & prime_ok)
    scales = np.where(use_prime[..., None], prime_scales, theta_scales)
    return scales, use_prime, theta_ok | prime_ok


def empirical_elongation_bound(phi: float, basis: DirectionBasis, *, rho_max: float = 1e6,
                               iterations: int = 80) -> float:
    """Largest elongation at orientation `phi` for which build_family is feasible.

    Bisects log ρ; returns math.inf when ρ = rho_max is still feasible.
    """

    def feasible(rho: float) -> bool:
        c11, c12, c22 = covariance_arrays_from_shape(2.0, rho, phi)
        return bool(build_family_arrays(c11, c12, c22, basis).feasible)

    if feasible(rho_max):
        return math.inf
    lo, hi = 0.0, math.log(rho_max)
    for _ in range(iterations):
        mid = 0.5 * (lo + hi)
        if feasible(math.exp(mid)):
            lo = mid
        else:
            hi = mid
    return math.exp(lo)
