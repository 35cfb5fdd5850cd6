"""Unit tests for feasibility checks and the three filtering pipelines — pure computation, no I/O."""

import math
import time

import numpy as np
import pytest
from pydantic import ValidationError

from svfilter.services.kernel_lab import brute_force_filter, impulse_moments
from svfilter.services.pipelines import (
    FLAG_EXCEEDS,
    FLAG_NOT_PD,
    FLAG_OK,
    FLAG_SPLIT,
    InfeasiblePixels,
    PipelinePolicy,
    execute,
    filter_accurate,
    filter_basic,
    filter_dual,
    plan_accurate,
    plan_basic,
    plan_dual,
    validate_covmap,
)
from svfilter.services.shape_algebra import (
    THETA,
    THETA_PRIME,
    Covariance,
    CovarianceMap,
    InvalidArgument,
    ScaleVector,
    ShapeParams,
    covariance_arrays_from_shape,
    covariance_from_shape,
    elongation_bound,
    shape_from_covariance,
)

IDENTITY = Covariance.isotropic(1.0)
# elongation 7 at 22.5°: past the THETA bound (5.83), within THETA_PRIME's (12.2)
TOO_LONG = covariance_from_shape(ShapeParams.from_degrees(40.0, 7.0, 22.5))
TOO_LONG_ENTRY = (TOO_LONG.c11, TOO_LONG.c12, TOO_LONG.c22)


def _map_with(height, width, base, special, at):
    covmap = CovarianceMap.constant(height, width, base)
    r, c = at
    covmap.c11[r, c], covmap.c12[r, c], covmap.c22[r, c] = special
    return covmap


def _rel_frobenius(c1, c2):
    return float(np.linalg.norm(c1.as_matrix() - c2.as_matrix()) / np.linalg.norm(c2.as_matrix()))


# ── Feasibility ─────────────────────────────────────────────────────────────


def test_identity_map_is_feasible_everywhere():
    report = validate_covmap(CovarianceMap.constant(4, 5, IDENTITY))
    assert report.ok
    assert report.counts["ok"] == 20
    assert report.offending() == []


def test_non_positive_definite_pixel_is_flagged():
    covmap = _map_with(4, 5, IDENTITY, (1.0, 2.0, 1.0), (2, 1))
    report = validate_covmap(covmap)
    assert report.flags[2, 1] == FLAG_NOT_PD
    assert report.offending() == [(2, 1, "not-positive-definite")]


def test_elongation_past_the_bound_is_flagged_per_basis():
    covmap = _map_with(3, 3, IDENTITY, TOO_LONG_ENTRY, (1, 1))
    theta = validate_covmap(covmap, PipelinePolicy(basis="theta"))
    assert theta.flags[1, 1] == FLAG_EXCEEDS
    assert "(row=1, col=1) exceeds-elongation-bound" in theta.summary()
    assert validate_covmap(covmap, PipelinePolicy(basis="theta-prime")).ok
    assert validate_covmap(covmap, method="dual").ok


def test_clamped_replacement_sits_just_inside_the_bound():
    covmap = _map_with(3, 3, IDENTITY, TOO_LONG_ENTRY, (1, 1))
    report = validate_covmap(covmap, PipelinePolicy(basis="theta"))
    clamped = shape_from_covariance(report.replacement.at(1, 1))
    bound = elongation_bound(math.radians(22.5), THETA)
    assert clamped.elongation == pytest.approx(0.95 * bound, rel=1e-9)
    assert clamped.size == pytest.approx(40.0)
    assert clamped.orientation == pytest.approx(math.radians(22.5))
    assert report.replacement.at(0, 0) == IDENTITY


def test_accurate_method_flags_an_unsplittable_pixel():
    covmap = _map_with(3, 3, IDENTITY, TOO_LONG_ENTRY, (0, 2))
    report = validate_covmap(covmap, method="accurate")
    assert report.flags[0, 2] == FLAG_SPLIT
    assert report.flags[1, 1] == FLAG_OK


def test_unknown_method_is_rejected():
    with pytest.raises(InvalidArgument):
        validate_covmap(CovarianceMap.constant(2, 2, IDENTITY), method="fast")


def test_policy_fraction_must_lie_strictly_inside_the_unit_interval():
    with pytest.raises(ValidationError):
        PipelinePolicy(fraction=1.0)
    with pytest.raises(ValidationError):
        PipelinePolicy(infeasible="ignore")


# ── Plans ───────────────────────────────────────────────────────────────────


def test_accurate_plan_for_the_identity_splits_in_half():
    plan = plan_accurate(CovarianceMap.constant(3, 4, IDENTITY))
    assert plan.sigma2 == pytest.approx(0.5)
    np.testing.assert_allclose(plan.stage_a.as_array(), math.sqrt(3.0))
    np.testing.assert_allclose(plan.scales, math.sqrt(3.0), rtol=1e-6)


def test_basic_plan_solves_every_pixel():
    plan = plan_basic(CovarianceMap.constant(2, 3, IDENTITY))
    assert plan.scales.shape == (2, 3, 4)
    np.testing.assert_allclose(plan.scales, math.sqrt(6.0), rtol=1e-6)
    assert plan.bases_used == {"theta": 6, "theta-prime": 0}


def test_dual_plan_routes_the_elongated_pixel_to_prime():
    covmap = _map_with(3, 3, IDENTITY, TOO_LONG_ENTRY, (1, 1))
    plan = plan_dual(covmap)
    assert plan.use_prime[1, 1]
    assert plan.bases_used == {"theta": 8, "theta-prime": 1}


def test_reject_policy_raises_with_the_report():
    covmap = _map_with(3, 3, IDENTITY, TOO_LONG_ENTRY, (1, 1))
    with pytest.raises(InfeasiblePixels) as exc:
        plan_basic(covmap, PipelinePolicy(infeasible="reject"))
    assert exc.value.report.flags[1, 1] == FLAG_EXCEEDS
    assert "row=1, col=1" in str(exc.value)


def test_non_positive_definite_pixels_raise_even_when_clamping():
    covmap = _map_with(3, 3, IDENTITY, (-1.0, 0.0, 1.0), (0, 0))
    with pytest.raises(InvalidArgument, match=r"row=0, col=0"):
        plan_basic(covmap, PipelinePolicy(infeasible="clamp"))


# ── Filtering ───────────────────────────────────────────────────────────────


def test_clamp_policy_filters_an_infeasible_map():
    covmap = _map_with(12, 12, covariance_from_shape(ShapeParams(6.0, 2.0, 0.3)), TOO_LONG_ENTRY, (6, 6))
    policy = PipelinePolicy(basis="theta", infeasible="clamp", edge="replicate")
    result = execute(np.full((12, 12), 3.0), covmap, "basic", policy)
    np.testing.assert_allclose(result.output, 3.0, atol=1e-6)
    assert result.plan.report.counts["exceeds-elongation-bound"] == 1


def test_every_method_keeps_a_constant_image_constant():
    covmap = CovarianceMap.constant(20, 22, covariance_from_shape(ShapeParams.from_degrees(8.0, 3.0, 70.0)))
    image = np.full((20, 22), 0.4)
    policy = PipelinePolicy(edge="replicate")
    for out in (filter_basic(image, covmap, edge="replicate"),
                filter_accurate(image, covmap, policy),
                filter_dual(image, covmap, policy)):
        np.testing.assert_allclose(out, 0.4, atol=1e-6)


def test_accurate_impulse_response_has_the_target_covariance():
    cov = covariance_from_shape(ShapeParams.from_degrees(12.0, 3.0, 60.0))
    image = np.zeros((61, 61))
    image[30, 30] = 1.0
    out = filter_accurate(image, CovarianceMap.constant(61, 61, cov))
    m = impulse_moments(out, (30, 30))
    assert m.mass == pytest.approx(1.0, abs=1e-6)
    assert np.hypot(*m.mean) < 0.1
    assert _rel_frobenius(m.cov, cov) < 0.03


def test_accurate_output_matches_the_two_pass_oracle():
    rng = np.random.default_rng(13)
    image = rng.uniform(size=(40, 40))
    covmap = CovarianceMap.constant(40, 40, covariance_from_shape(ShapeParams.from_degrees(10.0, 2.5, 35.0)))
    plan = plan_accurate(covmap)
    stage_a = np.broadcast_to(plan.stage_a.as_array(), (40, 40, 4))
    ref = brute_force_filter(brute_force_filter(image, stage_a, "theta"), plan.scales, plan.routing)
    out = filter_accurate(image, covmap)
    inner = slice(10, -10)
    err = np.sqrt(np.mean((out[inner, inner] - ref[inner, inner]) ** 2))
    assert err / np.sqrt(np.mean(ref[inner, inner] ** 2)) <= 2e-2


def test_dual_filter_matches_the_dual_oracle():
    rng = np.random.default_rng(14)
    image = rng.uniform(size=(30, 30))
    covmap = CovarianceMap.constant(30, 30, covariance_from_shape(ShapeParams.from_degrees(9.0, 2.0, 10.0)))
    covmap.c11[:, 15:], covmap.c12[:, 15:], covmap.c22[:, 15:] = TOO_LONG_ENTRY
    plan = plan_dual(covmap)
    assert plan.use_prime[:, 15:].all() and not plan.use_prime[:, :15].any()
    out = filter_dual(image, covmap)
    ref = np.where(plan.use_prime, brute_force_filter(image, plan.scales, "theta-prime"),
                   brute_force_filter(image, plan.scales, "theta"))
    inner = slice(12, -12)
    np.testing.assert_allclose(out[inner, inner], ref[inner, inner], rtol=2e-2)


def test_execute_reports_plan_and_filter_timings():
    covmap = CovarianceMap.constant(8, 8, IDENTITY)
    basic = execute(np.ones((8, 8)), covmap, "basic")
    assert set(basic.timings) == {"plan", "filter"}
    accurate = execute(np.ones((8, 8)), covmap, "accurate")
    assert set(accurate.timings) == {"plan", "stage_a", "stage_b"}


def test_execute_checks_the_map_shape():
    with pytest.raises(InvalidArgument):
        execute(np.ones((8, 9)), CovarianceMap.constant(8, 8, IDENTITY), "basic")


def test_stage_a_kernel_is_isotropic():
    plan = plan_accurate(CovarianceMap.constant(3, 3, covariance_from_shape(ShapeParams(5.0, 2.0, 1.0))))
    assert isinstance(plan.stage_a, ScaleVector)
    assert len(set(plan.stage_a.as_tuple())) == 1


def _smooth_covmap(height, width):
    """Size 10..20, elongation 1.5..3 and orientation 0..π varying across the map."""
    rows, cols = np.indices((height, width))
    u, v = cols / (width - 1), rows / (height - 1)
    return CovarianceMap(*covariance_arrays_from_shape(10.0 + 10.0 * u, 1.5 + 1.5 * v,
                                                       math.pi * (0.5 * u + 0.5 * v) % math.pi))


def _interior_rel_rms(out, ref, border):
    o, r = out[border:-border, border:-border], ref[border:-border, border:-border]
    return float(np.sqrt(np.mean((o - r) ** 2)) / np.sqrt(np.mean(r ** 2)))


def test_accurate_matches_the_two_pass_oracle_on_a_smooth_map():
    rng = np.random.default_rng(15)
    image = rng.uniform(size=(64, 64))
    covmap = _smooth_covmap(64, 64)
    plan = plan_accurate(covmap)
    stage_a = np.broadcast_to(plan.stage_a.as_array(), (64, 64, 4))
    ref = brute_force_filter(brute_force_filter(image, stage_a, "theta"), plan.scales, plan.routing)
    out = filter_accurate(image, covmap)
    assert _interior_rel_rms(out, ref, 14) <= 1e-6


def test_dual_matches_the_dual_oracle_on_a_smooth_map():
    rng = np.random.default_rng(16)
    image = rng.uniform(size=(64, 64))
    covmap = _smooth_covmap(64, 64)
    plan = plan_dual(covmap)
    assert plan.use_prime.any() and not plan.use_prime.all()
    ref = np.where(plan.use_prime, brute_force_filter(image, plan.scales, "theta-prime"),
                   brute_force_filter(image, plan.scales, "theta"))
    out = filter_dual(image, covmap)
    assert _interior_rel_rms(out, ref, 14) <= 1e-6


# Narrowest box on the 0.3 px minimum under the prime basis.
FLOOR_BOUND = covariance_from_shape(ShapeParams.from_degrees(3.6 * 3.58, 2.58, 154.5))


def _random_targets(rng, basis, n):
    for _ in range(n):
        theta = rng.uniform(0.0, math.pi)
        rho = rng.uniform(1.0, min(0.8 * elongation_bound(theta, basis), 5.0))
        minor = rng.uniform(2.25, 4.0)
        yield covariance_from_shape(ShapeParams(minor * (1 + rho), rho, theta))


@pytest.mark.parametrize("method", ["basic", "accurate", "dual"])
def test_impulse_moments_follow_random_targets_for_every_method(method):
    """Centroid within 0.1 px and covariance within 3% for 20 shapes per basis."""
    rng = np.random.default_rng(23)
    image = np.zeros((65, 65))
    image[32, 32] = 1.0
    for basis in (THETA, THETA_PRIME):
        targets = list(_random_targets(rng, basis, 20))
        if basis is THETA_PRIME:
            targets.append(FLOOR_BOUND)
        policy = PipelinePolicy(basis=basis.name, infeasible="reject")
        for cov in targets:
            out = execute(image, CovarianceMap.constant(65, 65, cov), method, policy).output
            m = impulse_moments(out, (32, 32))
            assert np.hypot(*m.mean) < 0.1, (method, basis.name, cov)
            assert _rel_frobenius(m.cov, cov) < 0.03, (method, basis.name, cov)


@pytest.mark.parametrize("method", ["basic", "dual"])
def test_floor_bound_pixels_pass_the_reject_policy(method):
    covmap = CovarianceMap.constant(9, 11, FLOOR_BOUND)
    policy = PipelinePolicy(basis="theta-prime", infeasible="reject", edge="replicate")
    result = execute(np.full((9, 11), 1.5), covmap, method, policy)
    assert result.plan.report.ok
    assert result.plan.scales.min() == pytest.approx(0.3)
    assert (result.plan.scales >= 0.3).all()
    np.testing.assert_allclose(result.output, 1.5, atol=1e-9)


def test_accurate_runtime_does_not_grow_with_kernel_size():
    """Wall time on 256² varies by less than 25% across sizes 1, 25 and 100."""
    rng = np.random.default_rng(0)
    image = rng.uniform(size=(256, 256))
    covmaps = [CovarianceMap.constant(256, 256, covariance_from_shape(ShapeParams(s, 1.0, 0.0)))
               for s in (1.0, 25.0, 100.0)]
    policy = PipelinePolicy(threads=1)
    for covmap in covmaps:
        filter_accurate(image, covmap, policy)
    best = []
    for covmap in covmaps:
        runs = []
        for _ in range(2):
            start = time.perf_counter()
            filter_accurate(image, covmap, policy)
            runs.append(time.perf_counter() - start)
        best.append(min(runs))
    assert max(best) / min(best) < 1.25, best
