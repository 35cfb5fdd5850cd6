"""Filtering pipelines built on the O(1) engine.

Three methods share one plan/run structure:

1. **basic**: solve every pixel's covariance on one basis (or route it
   between both, see *dual*) and run a single space-variant pass.
2. **accurate**: split C = σ²·I + ΔC. Stage A is a plain convolution with
   the isotropic THETA kernel of variance σ²; Stage B filters the result
   with ΔC per pixel. Covariances of the two passes add, so the composite
   kernel still has covariance C, but it is closer to a Gaussian. σ² is a
   single map-wide value (fraction × the smallest per-pixel bound) so that
   Stage A stays a convolution.
3. **dual**: run the running sums on both bases and give every pixel the
   basis with the larger elongation bound at its orientation. Elongations
   one basis cannot reach are routed to the other.

Every plan starts from `validate_covmap`, which flags each pixel and
computes the clamp policy's replacement covariances. Under `reject` any
flag raises `InfeasiblePixels`; under `clamp` the replacements are used and
the report is logged.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from pydantic import BaseModel, Field

from svfilter.config import settings
from svfilter.services.filter_engine import filter_space_variant
from svfilter.services.scale_solver import build_family_arrays, solve_dual_map, solve_scale_map
from svfilter.services.shape_algebra import (
    THETA,
    THETA_PRIME,
    CovarianceMap,
    InfeasibleError,
    InvalidArgument,
    ScaleVector,
    covariance_arrays_from_shape,
    elongation_bound_array,
    get_basis,
    shape_arrays,
    sigma_bound_elongation_array,
)

logger = logging.getLogger(__name__)

METHODS = ("basic", "accurate", "dual")

FLAG_OK = 0
FLAG_NOT_PD = 1
FLAG_EXCEEDS = 2
FLAG_SPLIT = 3
FLAG_UNDERSIZED = 4
FLAG_NAMES = ("ok", "not-positive-definite", "exceeds-elongation-bound", "split-infeasible", "undersized")


class PipelinePolicy(BaseModel):
    model_config = {"frozen": True}

    fraction: float = Field(default_factory=lambda: settings.SIGMA_FRACTION, gt=0, lt=1)
    basis: Literal["theta", "theta-prime", "dual"] = "theta"
    edge: Literal["zero", "replicate"] = "zero"
    infeasible: Literal["reject", "clamp"] = "reject"
    threads: int | None = None


# ── Feasibility ─────────────────────────────────────────────────────────────


@dataclass
class FeasibilityReport:
    """Per-pixel flags plus the covariances the clamp policy would use."""

    method: str
    routing: str
    flags: np.ndarray                 # (H, W) uint8 codes into FLAG_NAMES
    replacement: CovarianceMap        # clamped covariances (unchanged where ok)
    sigma2: float | None = None       # Stage-A variance, accurate method only

    @property
    def counts(self) -> dict[str, int]:
        return {name: int(np.count_nonzero(self.flags == code)) for code, name in enumerate(FLAG_NAMES)}

    @property
    def ok(self) -> bool:
        return not np.any(self.flags != FLAG_OK)

    def offending(self, limit: int = 5) -> list[tuple[int, int, str]]:
        rows, cols = np.nonzero(self.flags != FLAG_OK)
        return [(int(r), int(c), FLAG_NAMES[self.flags[r, c]]) for r, c in zip(rows[:limit], cols[:limit])]

    def summary(self) -> str:
        counts = ", ".join(f"{name}={n}" for name, n in self.counts.items() if n)
        line = f"{self.method}/{self.routing}: {self.flags.size} pixels ({counts})"
        if self.sigma2 is not None:
            line += f", sigma2={self.sigma2:.6g}"
        bad = self.offending()
        if bad:
            line += "; first offending: " + ", ".join(f"(row={r}, col={c}) {name}" for r, c, name in bad)
        return line


class InfeasiblePixels(InfeasibleError):
    """Raised under the reject policy when any pixel is flagged."""

    def __init__(self, report: FeasibilityReport):
        super().__init__(f"infeasible covariance map: {report.summary()}")
        self.report = report


def _routing(method: str, policy: PipelinePolicy) -> str:
    if method not in METHODS:
        raise InvalidArgument(f"unknown method {method!r} (expected one of {METHODS})")
    return "dual" if method == "dual" else policy.basis


def _bound(theta: np.ndarray, routing: str) -> np.ndarray:
    if routing == "dual":
        return np.maximum(elongation_bound_array(theta, THETA), elongation_bound_array(theta, THETA_PRIME))
    return elongation_bound_array(theta, get_basis(routing))


def _feasible(c11, c12, c22, routing: str, min_scale: float) -> np.ndarray:
    if routing == "dual":
        return (build_family_arrays(c11, c12, c22, THETA, min_scale=min_scale).feasible
                | build_family_arrays(c11, c12, c22, THETA_PRIME, min_scale=min_scale).feasible)
    return build_family_arrays(c11, c12, c22, get_basis(routing), min_scale=min_scale).feasible


def _positive_definite(c11, c12, c22) -> np.ndarray:
    finite = np.isfinite(c11) & np.isfinite(c12) & np.isfinite(c22)
    det = c11 * c22 - c12 * c12
    with np.errstate(invalid="ignore", divide="ignore"):
        _, rho, _ = shape_arrays(c11, c12, c22)
        pd = finite & (c11 > 0) & (c22 > 0) & (det > 0) & (rho <= settings.MAX_EIGEN_RATIO)
    return pd


def validate_covmap(covmap: CovarianceMap, policy: PipelinePolicy | None = None, *,
                    method: str = "basic") -> FeasibilityReport:
    """Flag every pixel for `method` under `policy`; never raises on bad pixels."""
    policy = policy or PipelinePolicy()
    routing = _routing(method, policy)
    min_scale = settings.MIN_SCALE
    flags = np.zeros(covmap.shape, dtype=np.uint8)

    pd = _positive_definite(covmap.c11, covmap.c12, covmap.c22)
    flags[~pd] = FLAG_NOT_PD
    # placeholders keep the vectorized math finite on rejected pixels
    c11 = np.where(pd, covmap.c11, 1.0)
    c12 = np.where(pd, covmap.c12, 0.0)
    c22 = np.where(pd, covmap.c22, 1.0)

    size, rho, theta = shape_arrays(c11, c12, c22)
    bound = _bound(theta, routing)
    if method == "accurate":
        too_long = pd & (sigma_bound_elongation_array(c11, c12, c22, bound) <= 0)
        flags[too_long] = FLAG_SPLIT
    else:
        too_long = pd & ~_feasible(c11, c12, c22, routing, 0.0)
        flags[too_long] = FLAG_EXCEEDS
    if too_long.any():
        n11, n12, n22 = covariance_arrays_from_shape(size, settings.CLAMP_FRACTION * np.where(
            np.isfinite(bound), bound, 1.0), theta)
        c11, c12, c22 = (np.where(too_long, n, c) for n, c in ((n11, c11), (n12, c12), (n22, c22)))

    sigma2 = None
    if method == "accurate":
        c11, c12, c22, sigma2 = _split(c11, c12, c22, pd, routing, policy.fraction, flags)
        residual = (c11 - sigma2, c12, c22 - sigma2)
    else:
        residual = (c11, c12, c22)

    usable = pd & (flags == FLAG_OK)
    undersized = usable & ~_feasible(*residual, routing, min_scale)
    flags[undersized] = FLAG_UNDERSIZED

    report = FeasibilityReport(method, routing, flags, CovarianceMap(c11, c12, c22), sigma2)
    logger.debug("validate_covmap %s", report.summary())
    return report


def _split(c11, c12, c22, pd, routing, fraction, flags):
    """Pick the global σ² and enlarge pixels whose Stage-A share is too thin."""
    floor = settings.MIN_SCALE ** 2 / 6.0
    _, _, theta = shape_arrays(c11, c12, c22)
    bound = sigma_bound_elongation_array(c11, c12, c22, _bound(theta, routing))
    thin = pd & (fraction * bound < floor)
    if thin.any():
        flags[thin & (flags == FLAG_OK)] = FLAG_UNDERSIZED
        # C + δ·I raises the σ² bound by δ and keeps the orientation
        grow = np.where(thin, (floor / fraction) * (1 + 1e-9) - bound, 0.0)
        c11, c22 = c11 + grow, c22 + grow
        bound = bound + grow
    sigma2 = fraction * float(np.min(bound[pd])) if pd.any() else floor
    return c11, c12, c22, sigma2


# ── Plans ───────────────────────────────────────────────────────────────────


@dataclass
class FilterPlan:
    """Everything needed to filter, solved up front."""

    method: str
    routing: str
    scales: np.ndarray                # (H, W, 4) Stage-B scales
    use_prime: np.ndarray             # (H, W) True where THETA_PRIME filters the pixel
    report: FeasibilityReport
    sigma2: float = 0.0
    stage_a: ScaleVector | None = None

    @property
    def bases_used(self) -> dict[str, int]:
        n_prime = int(self.use_prime.sum())
        return {THETA.name: self.use_prime.size - n_prime, THETA_PRIME.name: n_prime}


@dataclass
class FilterResult:
    output: np.ndarray
    plan: FilterPlan
    timings: dict[str, float] = field(default_factory=dict)


def _accept(report: FeasibilityReport, policy: PipelinePolicy) -> None:
    if np.any(report.flags == FLAG_NOT_PD):
        r, c = (int(v) for v in np.argwhere(report.flags == FLAG_NOT_PD)[0])
        raise InvalidArgument(f"covariance at pixel (row={r}, col={c}) is not positive definite")
    if report.ok:
        return
    if policy.infeasible == "reject":
        raise InfeasiblePixels(report)
    logger.warning("clamping infeasible pixels: %s", report.summary())


def _solve_stage(c11, c12, c22, routing: str) -> tuple[np.ndarray, np.ndarray]:
    min_scale = settings.MIN_SCALE
    if routing == "dual":
        scales, use_prime, ok = solve_dual_map(c11, c12, c22, min_scale=min_scale)
    else:
        basis = get_basis(routing)
        scales, ok = solve_scale_map(c11, c12, c22, basis, min_scale=min_scale)
        use_prime = np.full(np.shape(c11), basis is THETA_PRIME)

    missing = ~ok
    if missing.any():
        # undersized under the clamp policy: solve unfloored, then widen
        sub = (c11[missing], c12[missing], c22[missing])
        if routing == "dual":
            loose, loose_prime, loose_ok = solve_dual_map(*sub)
            use_prime[missing] = loose_prime
        else:
            loose, loose_ok = solve_scale_map(*sub, get_basis(routing))
        if not loose_ok.all():
            raise InfeasibleError(f"{int((~loose_ok).sum())} pixels stayed infeasible after clamping")
        scales[missing] = np.maximum(loose, min_scale)
    return scales, use_prime


def _plan(covmap: CovarianceMap, policy: PipelinePolicy, method: str) -> FilterPlan:
    report = validate_covmap(covmap, policy, method=method)
    _accept(report, policy)
    target = report.replacement
    if method != "accurate":
        scales, use_prime = _solve_stage(target.c11, target.c12, target.c22, report.routing)
        return FilterPlan(method, report.routing, scales, use_prime, report)

    sigma2 = report.sigma2
    stage_a = ScaleVector.equal(math.sqrt(6.0 * sigma2))
    scales, use_prime = _solve_stage(target.c11 - sigma2, target.c12, target.c22 - sigma2, report.routing)
    logger.debug("accurate plan: sigma2=%.6g, stage A scale %.4f", sigma2, stage_a.a1)
    return FilterPlan(method, report.routing, scales, use_prime, report, sigma2, stage_a)


def plan_basic(covmap: CovarianceMap, policy: PipelinePolicy | None = None) -> FilterPlan:
    return _plan(covmap, policy or PipelinePolicy(), "basic")


def plan_accurate(covmap: CovarianceMap, policy: PipelinePolicy | None = None) -> FilterPlan:
    return _plan(covmap, policy or PipelinePolicy(), "accurate")


def plan_dual(covmap: CovarianceMap, policy: PipelinePolicy | None = None) -> FilterPlan:
    return _plan(covmap, policy or PipelinePolicy(), "dual")


# ── Execution ───────────────────────────────────────────────────────────────


def _check_shapes(image: np.ndarray, covmap: CovarianceMap) -> np.ndarray:
    image = np.asarray(image, dtype=float)
    if image.shape != covmap.shape:
        raise InvalidArgument(f"covariance map {covmap.shape} does not match image {image.shape}")
    return image


def run_plan(image, plan: FilterPlan, policy: PipelinePolicy | None = None) -> FilterResult:
    policy = policy or PipelinePolicy()
    image = np.asarray(image, dtype=float)
    timings: dict[str, float] = {}
    opts = {"edge": policy.edge, "threads": policy.threads}

    if plan.stage_a is not None:
        start = time.perf_counter()
        image = filter_space_variant(image, plan.stage_a, THETA, **opts)
        timings["stage_a"] = time.perf_counter() - start

    start = time.perf_counter()
    if plan.routing != "dual":
        out = filter_space_variant(image, plan.scales, plan.routing, **opts)
    else:
        out = np.zeros(image.shape)
        for basis, mask in ((THETA, ~plan.use_prime), (THETA_PRIME, plan.use_prime)):
            if mask.any():
                part = filter_space_variant(image, plan.scales, basis, mask=mask, **opts)
                out = np.where(mask, part, out)
    timings["stage_b" if plan.stage_a is not None else "filter"] = time.perf_counter() - start
    logger.info("%s filter on %dx%d done in %.3fs (%s)", plan.method, image.shape[1], image.shape[0],
                sum(timings.values()), plan.bases_used)
    return FilterResult(out, plan, timings)


def execute(image, covmap: CovarianceMap, method: str, policy: PipelinePolicy | None = None
            ) -> FilterResult:
    """Plan and run `method`; the entry point the CLI uses."""
    policy = policy or PipelinePolicy()
    image = _check_shapes(image, covmap)
    start = time.perf_counter()
    plan = _plan(covmap, policy, method)
    planned = time.perf_counter() - start
    result = run_plan(image, plan, policy)
    result.timings = {"plan": planned, **result.timings}
    return result


def filter_basic(image, covmap: CovarianceMap, basis: str = "theta", edge: str = "zero",
                 policy: PipelinePolicy | None = None) -> np.ndarray:
    policy = policy or PipelinePolicy(basis=basis, edge=edge)
    return execute(image, covmap, "basic", policy).output


def filter_accurate(image, covmap: CovarianceMap, policy: PipelinePolicy | None = None) -> np.ndarray:
    return execute(image, covmap, "accurate", policy).output


def filter_dual(image, covmap: CovarianceMap, policy: PipelinePolicy | None = None) -> np.ndarray:
    return execute(image, covmap, "dual", policy).output
