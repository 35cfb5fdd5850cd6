"""Accuracy and elongation tables, computed in the continuous domain.

Each function returns a pandas DataFrame that the CLI prints as CSV. See
docs/ACCURACY.md for the reference values and the known deviations.

- `error_table`: single-stage vs two-stage normalized L2 error against the
  target Gaussian for representative (size, elongation, orientation).
- `sigma_sweep`: the two-stage improvement as the Stage-A variance moves
  from 10% to 80% of its bound.
- `bound_table`: elongation bounds per orientation, closed form and by
  bisection over solver feasibility.
- `clt_table`: max pointwise error of n-fold box convolutions vs the
  Gaussian.
"""

from __future__ import annotations

import logging
import math

import numpy as np
import pandas as pd

from svfilter.config import settings
from svfilter.services.kernel_lab import (
    KernelSpec,
    SampledKernel,
    clt_demo,
    compose_kernels,
    embed,
    max_pointwise_error,
    normalized_l2_error,
    sample_gaussian,
    sample_kernel,
)
from svfilter.services.scale_solver import empirical_elongation_bound, solve_scales
from svfilter.services.shape_algebra import (
    THETA,
    THETA_PRIME,
    Covariance,
    DirectionBasis,
    ScaleVector,
    ShapeParams,
    covariance_from_shape,
    elongation_bound,
    sigma_bound_elongation,
)

logger = logging.getLogger(__name__)

# (size, elongation, orientation in radians)
ERROR_TABLE_SHAPES = (
    (1.0, 1.0, 0.0),
    (5.0, 1.0, 0.0),
    (1.0, 4.0, 0.0),
    (5.0, 4.0, 0.0),
    (5.0, 3.0, math.pi / 8),
    (5.0, 8.0, math.pi / 3),
    (5.0, 5.0, math.pi / 2),
)
SWEEP_SHAPE = (5.0, 3.0, math.pi / 4)
SWEEP_FRACTIONS = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8)
BOUND_ORIENTATIONS_DEG = (0.0, 5.0, 13.3, 20.0, 22.5, 25.0, math.degrees(math.atan(0.5)), 30.0, 40.0, 45.0)
CLT_SIZES = (4, 8)


def _target(shape: tuple[float, float, float]) -> Covariance:
    size, rho, theta = shape
    return covariance_from_shape(ShapeParams(size, rho, theta % math.pi))


def table_basis(cov: Covariance, phi: float) -> DirectionBasis:
    """THETA when it can realize the target, otherwise THETA_PRIME."""
    eigen_max, eigen_min = cov.eigenvalues
    return THETA if eigen_max / eigen_min < elongation_bound(phi, THETA) else THETA_PRIME


def _errors(kernel: SampledKernel, cov: Covariance) -> tuple[float, float]:
    gauss = sample_gaussian(cov, kernel.pitch)
    shape = tuple(max(a, b) for a, b in zip(kernel.values.shape, gauss.values.shape))
    k = embed(kernel, shape)
    g = sample_gaussian(cov, kernel.pitch, shape=shape)
    return normalized_l2_error(k, g), max_pointwise_error(k, g)


def single_stage_kernel(cov: Covariance, basis: DirectionBasis, pitch: float) -> SampledKernel:
    return sample_kernel(KernelSpec(basis, solve_scales(cov, basis)), pitch)


def two_stage_kernel(cov: Covariance, basis: DirectionBasis, fraction: float,
                     pitch: float) -> tuple[SampledKernel, float]:
    """Isotropic THETA kernel of variance σ² convolved with the ΔC kernel."""
    sigma2 = fraction * sigma_bound_elongation(cov, basis)
    stage_a = KernelSpec(THETA, ScaleVector.equal(math.sqrt(6.0 * sigma2)))
    stage_b = KernelSpec(basis, solve_scales(cov.minus_isotropic(sigma2), basis))
    return compose_kernels(sample_kernel(stage_a, pitch), sample_kernel(stage_b, pitch)), sigma2


def _improvement(old: float, new: float) -> float:
    return 100.0 * (old - new) / old


def error_table(pitch: float | None = None, fraction: float | None = None,
                shapes=ERROR_TABLE_SHAPES) -> pd.DataFrame:
    pitch = settings.TABLE_PITCH if pitch is None else pitch
    fraction = settings.SIGMA_FRACTION if fraction is None else fraction
    rows = []
    for shape in shapes:
        cov = _target(shape)
        basis = table_basis(cov, shape[2] % math.pi)
        old_l2, old_max = _errors(single_stage_kernel(cov, basis, pitch), cov)
        composite, sigma2 = two_stage_kernel(cov, basis, fraction, pitch)
        new_l2, new_max = _errors(composite, cov)
        rows.append({
            "s": shape[0], "rho": shape[1], "theta_deg": round(math.degrees(shape[2]), 2),
            "basis": basis.name, "sigma2": sigma2,
            "old_error_pct": 100.0 * old_l2, "new_error_pct": 100.0 * new_l2,
            "improvement_pct": _improvement(old_l2, new_l2),
            "old_max_pct": 100.0 * old_max, "new_max_pct": 100.0 * new_max,
        })
        logger.debug("error table %s: %.2f%% -> %.2f%%", shape, 100 * old_l2, 100 * new_l2)
    return pd.DataFrame(rows)


def sigma_sweep(pitch: float | None = None, fractions=SWEEP_FRACTIONS,
                shape: tuple[float, float, float] = SWEEP_SHAPE) -> pd.DataFrame:
    pitch = settings.TABLE_PITCH if pitch is None else pitch
    cov = _target(shape)
    basis = table_basis(cov, shape[2] % math.pi)
    old, _ = _errors(single_stage_kernel(cov, basis, pitch), cov)
    rows = []
    for fraction in fractions:
        composite, sigma2 = two_stage_kernel(cov, basis, fraction, pitch)
        new, _ = _errors(composite, cov)
        rows.append({"fraction_pct": round(100.0 * fraction), "sigma2": sigma2,
                     "old_error_pct": 100.0 * old, "new_error_pct": 100.0 * new,
                     "improvement_pct": _improvement(old, new)})
    return pd.DataFrame(rows)


def bound_table(orientations_deg=BOUND_ORIENTATIONS_DEG, *, empirical: bool = True) -> pd.DataFrame:
    rows = []
    for deg in orientations_deg:
        phi = math.radians(deg)
        theta = elongation_bound(phi, THETA)
        prime = elongation_bound(phi, THETA_PRIME)
        row = {"orientation_deg": round(deg, 2), "theta": theta, "theta_prime": prime}
        if empirical:
            row["theta_prime_empirical"] = empirical_elongation_bound(phi, THETA_PRIME)
        row["dual"] = max(theta, prime)
        rows.append(row)
    return pd.DataFrame(rows)


def clt_table(sizes=CLT_SIZES, sigma: float = 1.0, pitch: float | None = None) -> pd.DataFrame:
    pitch = settings.TABLE_PITCH * sigma if pitch is None else pitch
    rows = [{"n": n, "max_error_pct": 100.0 * clt_demo(n, sigma, pitch).max_err_fraction} for n in sizes]
    return pd.DataFrame(rows)


def impulse_image(width: int, height: int) -> tuple[np.ndarray, tuple[int, int]]:
    """Zero image with a unit sample at the center; returns (image, (row, col))."""
    image = np.zeros((height, width))
    center = (height // 2, width // 2)
    image[center] = 1.0
    return image, center
