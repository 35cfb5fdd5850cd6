"""Unit tests for the O(1) filter engine — pure computation, no I/O.

The brute-force filter in kernel_lab is the oracle: the engine must agree
with it to rounding error.
"""

import math
import time

import numpy as np
import pytest

from svfilter.config import settings
from svfilter.services.filter_engine import (
    DomainError,
    build_mesh,
    compute_running_sums,
    filter_space_variant,
    interpolate,
    interpolation_spec,
    min_margin,
    required_margin,
    unit_stack,
    window_offsets,
    window_table,
    window_weights,
)
from svfilter.services.kernel_lab import brute_force_filter, eval_box_spline, impulse_moments
from svfilter.services.scale_solver import solve_scale_map, solve_scales
from svfilter.services.shape_algebra import (
    THETA,
    THETA_PRIME,
    InvalidArgument,
    ScaleVector,
    ShapeParams,
    covariance_arrays_from_shape,
    covariance_from_shape,
    elongation_bound,
)

A = ScaleVector(2.0, 3.0, 2.5, 1.5)


def _interior_rel_rms(out, ref, border):
    o, r = out[border:-border, border:-border], ref[border:-border, border:-border]
    return float(np.sqrt(np.mean((o - r) ** 2)) / np.sqrt(np.mean(r ** 2)))


def _scale_map(shape, size, rho, theta, basis, min_scale=None):
    min_scale = settings.MIN_SCALE if min_scale is None else min_scale
    c11, c12, c22 = covariance_arrays_from_shape(size, rho, theta)
    c11, c12, c22 = (np.broadcast_to(c, shape) for c in (c11, c12, c22))
    scales, ok = solve_scale_map(c11, c12, c22, basis, min_scale=min_scale)
    assert ok.all()
    return scales


def _smooth_shapes(height, width):
    """Size 10..20, elongation 1.5..3 and orientation 0..π varying across the image."""
    rows, cols = np.indices((height, width))
    u, v = cols / (width - 1), rows / (height - 1)
    return 10.0 + 10.0 * u, 1.5 + 1.5 * v, math.pi * (0.5 * u + 0.5 * v) % math.pi


# ── Mesh ────────────────────────────────────────────────────────────────────


def test_mesh_taps_are_signed_subset_sums():
    mesh = build_mesh(A, THETA_PRIME)
    d = A.as_array()[:, None] * THETA_PRIME.directions
    w = 1.0 / np.prod(A.as_array())
    taps = mesh.taps
    assert taps[0] == ((0.0, 0.0), pytest.approx(w))
    # tap index bits select directions: 5 = d1 + d3, 14 = d2 + d3 + d4
    np.testing.assert_allclose(taps[5][0], d[0] + d[2])
    assert taps[5][1] == pytest.approx(w)
    np.testing.assert_allclose(taps[14][0], d[1] + d[2] + d[3])
    assert taps[14][1] == pytest.approx(-w)
    np.testing.assert_allclose(taps[15][0], d.sum(axis=0))


# Prime-basis taps as integer combinations of a′ = a / √5: x, y coefficients and sign.
PRIME_TAPS = [
    ((0, 0, 0, 0), (0, 0, 0, 0), +1),
    ((2, 0, 0, 0), (1, 0, 0, 0), -1),
    ((0, 1, 0, 0), (0, 2, 0, 0), -1),
    ((2, 1, 0, 0), (1, 2, 0, 0), +1),
    ((0, 0, -1, 0), (0, 0, 2, 0), -1),
    ((2, 0, -1, 0), (1, 0, 2, 0), +1),
    ((0, 1, -1, 0), (0, 2, 2, 0), +1),
    ((2, 1, -1, 0), (1, 2, 2, 0), -1),
    ((0, 0, 0, -2), (0, 0, 0, 1), -1),
    ((2, 0, 0, -2), (1, 0, 0, 1), +1),
    ((0, 1, 0, -2), (0, 2, 0, 1), +1),
    ((2, 1, 0, -2), (1, 2, 0, 1), -1),
    ((0, 0, -1, -2), (0, 0, 2, 1), +1),
    ((2, 0, -1, -2), (1, 0, 2, 1), -1),
    ((0, 1, -1, -2), (0, 2, 2, 1), -1),
    ((2, 1, -1, -2), (1, 2, 2, 1), +1),
]


@pytest.mark.parametrize("index", range(16))
def test_prime_mesh_taps_entry_by_entry(index):
    x_coef, y_coef, sign = PRIME_TAPS[index]
    a_prime = A.as_array() / math.sqrt(5.0)
    (x, y), weight = build_mesh(A, THETA_PRIME).taps[index]
    assert x == pytest.approx(np.dot(x_coef, a_prime), abs=1e-12)
    assert y == pytest.approx(np.dot(y_coef, a_prime), abs=1e-12)
    assert weight == pytest.approx(sign / np.prod(A.as_array()), rel=1e-12)


def test_mesh_weights_sum_to_zero_and_annihilate_cubics():
    """A fourth-order difference kills every polynomial of degree three or less."""
    for basis in (THETA, THETA_PRIME):
        mesh = build_mesh(A, basis)
        x, y = mesh.offsets[:, 0], mesh.offsets[:, 1]
        scale = np.abs(mesh.weights).sum()
        for p in range(4):
            for q in range(4 - p):
                moment = (mesh.weights * x ** p * y ** q).sum()
                assert abs(moment) <= 1e-9 * scale * max(1.0, np.abs(x ** p * y ** q).max())


def test_shift_vanishes_at_the_interpolation_scales():
    for basis in (THETA, THETA_PRIME):
        mesh = build_mesh(ScaleVector.from_array(basis.step_lengths), basis)
        np.testing.assert_allclose(mesh.tau, 0.0, atol=1e-15)


def test_prime_shift_has_the_closed_form():
    mesh = build_mesh(A, THETA_PRIME)
    a1, a2, a3, a4 = A.as_tuple()
    r5 = math.sqrt(5.0)
    tau_x = (2 * a1 + a2 - a3 - 2 * a4) / (2 * r5)
    tau_y = (a1 + 2 * a2 + 2 * a3 + a4 - 6 * r5) / (2 * r5)
    np.testing.assert_allclose(mesh.tau, [tau_x, tau_y], atol=1e-12)


def test_mesh_rejects_a_zero_width():
    with pytest.raises(InvalidArgument):
        build_mesh(ScaleVector(0.0, 1.0, 1.0, 1.0), THETA)


def test_required_margin_grows_with_scale():
    small = required_margin(ScaleVector.equal(1.0), THETA)
    large = required_margin(ScaleVector.equal(20.0), THETA)
    assert min_margin(THETA) <= small < large


# ── Running sums ────────────────────────────────────────────────────────────


def test_first_prime_running_sum_of_an_impulse_lies_on_the_1_2_line():
    image = np.zeros((6, 6))
    image[0, 0] = 1.0
    margin = min_margin(THETA_PRIME)
    stack = compute_running_sums(image, THETA_PRIME, margin)
    g1 = stack.sums[0]
    rows, cols = np.nonzero(g1)
    np.testing.assert_array_equal(cols - margin, (rows - margin) // 2)
    np.testing.assert_array_equal((rows - margin) % 2, 0)
    np.testing.assert_allclose(g1[rows, cols], math.sqrt(5.0))


def test_running_sums_are_read_only():
    stack = compute_running_sums(np.ones((4, 4)), THETA, min_margin(THETA))
    with pytest.raises(ValueError):
        stack.g4[0, 0] = 1.0


def test_normalizer_stack_keeps_only_g4():
    margin = min_margin(THETA_PRIME)
    unit = unit_stack(THETA_PRIME, 6, 7, margin)
    assert len(unit.sums) == 1
    assert unit_stack.cache_info().maxsize == 4
    full = compute_running_sums(np.ones((6, 7)), THETA_PRIME, margin, edge="replicate")
    np.testing.assert_array_equal(unit.g4, full.g4)


def test_running_sums_validate_their_inputs():
    with pytest.raises(InvalidArgument):
        compute_running_sums(np.ones((4, 4)), THETA, 0)
    with pytest.raises(InvalidArgument):
        compute_running_sums(np.full((4, 4), np.nan), THETA, 4)
    with pytest.raises(InvalidArgument):
        compute_running_sums(np.ones((4, 4)), THETA, 4, edge="wrap")


def test_interpolation_window_weights_sum_to_one():
    rng = np.random.default_rng(2)
    fx, fy = rng.uniform(0, 1, (2, 50))
    for basis in (THETA, THETA_PRIME):
        w = window_weights(basis, fx, fy)
        np.testing.assert_allclose(w.sum(axis=(-2, -1)), 1.0)
        assert w.min() >= -1e-12


def test_window_table_matches_the_kernel_at_every_node():
    rng = np.random.default_rng(3)
    fx, fy = rng.uniform(0, 1, (2, 200))
    for basis in (THETA, THETA_PRIME):
        jx, jy = window_offsets(basis)
        direct = eval_box_spline(basis, interpolation_spec(basis).scales,
                                 fx[:, None, None] - jx[None, None, :], fy[:, None, None] - jy[None, :, None])
        np.testing.assert_allclose(window_table(basis)(fx, fy), direct, atol=1e-12)


def test_interpolate_refuses_points_outside_the_padded_domain():
    stack = compute_running_sums(np.ones((5, 5)), THETA, min_margin(THETA))
    interpolate(stack, 2.0, 2.0)
    with pytest.raises(DomainError):
        interpolate(stack, -50.0, 2.0)


# ── Filtering ───────────────────────────────────────────────────────────────


def test_engine_reproduces_the_oracle_to_rounding():
    rng = np.random.default_rng(4)
    image = rng.uniform(size=(24, 26))
    for basis in (THETA, THETA_PRIME):
        scales = _scale_map(image.shape, 8.0, 2.0, math.radians(35.0), basis)
        out = filter_space_variant(image, scales, basis, threads=1)
        ref = brute_force_filter(image, scales, basis)
        np.testing.assert_allclose(out, ref, rtol=1e-6, atol=1e-9)


def test_constant_covariance_matches_the_oracle():
    rng = np.random.default_rng(8)
    image = rng.uniform(size=(64, 64))
    for basis in (THETA, THETA_PRIME):
        scales = _scale_map(image.shape, 12.0, 2.5, math.radians(120.0), basis)
        out = filter_space_variant(image, scales, basis)
        ref = brute_force_filter(image, scales, basis)
        assert _interior_rel_rms(out, ref, 12) <= 1e-6


def test_smoothly_varying_covariance_matches_the_oracle():
    rng = np.random.default_rng(9)
    image = rng.uniform(size=(64, 64))
    size, rho, theta = _smooth_shapes(*image.shape)
    for basis in (THETA, THETA_PRIME):
        scales = _scale_map(image.shape, size, rho, theta, basis)
        out = filter_space_variant(image, scales, basis)
        ref = brute_force_filter(image, scales, basis)
        assert _interior_rel_rms(out, ref, 14) <= 1e-6


def test_constant_image_stays_constant():
    scales = _scale_map((30, 40), 9.0, 2.0, 0.7, THETA_PRIME)
    for edge in ("zero", "replicate"):
        out = filter_space_variant(np.full((30, 40), 0.25), scales, THETA_PRIME, edge=edge)
        inner = out if edge == "replicate" else out[10:-10, 10:-10]
        np.testing.assert_allclose(inner, 0.25, atol=1e-6)


def test_unnormalized_output_is_close_to_unit_gain():
    scales = _scale_map((30, 30), 9.0, 2.0, 0.4, THETA)
    out = filter_space_variant(np.ones((30, 30)), scales, THETA, edge="replicate", normalize_dc=False)
    np.testing.assert_allclose(out, 1.0, atol=2e-2)


# Shapes whose narrowest box sits on the minimum scale.
FLOOR_BOUND_SHAPES = [
    (THETA_PRIME, math.radians(154.5), 2.58, 3.6),
]


def _random_shapes(rng, basis, n):
    for _ in range(n):
        theta = rng.uniform(0.0, math.pi)
        rho = rng.uniform(1.0, min(0.8 * elongation_bound(theta, basis), 5.0))
        yield theta, rho, rng.uniform(2.25, 4.0)


def test_impulse_moments_follow_random_targets():
    """Centroid within 0.1 px and covariance within 3%, floored boxes included."""
    rng = np.random.default_rng(17)
    image = np.zeros((65, 65))
    image[32, 32] = 1.0
    floored = 0
    for basis in (THETA, THETA_PRIME):
        shapes = list(_random_shapes(rng, basis, 20))
        shapes += [s[1:] for s in FLOOR_BOUND_SHAPES if s[0] is basis]
        for theta, rho, minor in shapes:
            cov = covariance_from_shape(ShapeParams(minor * (1 + rho), rho, theta))
            scales = solve_scales(cov, basis, min_scale=settings.MIN_SCALE)
            floored += min(scales.as_tuple()) == pytest.approx(settings.MIN_SCALE)
            out = filter_space_variant(image, scales, basis)
            m = impulse_moments(out, (32, 32))
            assert np.hypot(*m.mean) < 0.1
            dev = np.linalg.norm(m.cov.as_matrix() - cov.as_matrix()) / np.linalg.norm(cov.as_matrix())
            assert dev < 0.03, (basis.name, theta, rho, minor)
    assert floored >= len(FLOOR_BOUND_SHAPES)


def test_floored_scale_maps_pass_the_engine_minimum():
    for basis, theta, rho, minor in FLOOR_BOUND_SHAPES:
        scales = _scale_map((9, 11), minor * (1 + rho), rho, theta, basis)
        assert (scales >= settings.MIN_SCALE).all()
        out = filter_space_variant(np.full((9, 11), 2.0), scales, basis, edge="replicate")
        np.testing.assert_allclose(out, 2.0, atol=1e-9)


def test_filtering_is_linear():
    rng = np.random.default_rng(12)
    f, g = rng.uniform(size=(2, 40, 40))
    size, rho, theta = _smooth_shapes(40, 40)
    for basis in (THETA, THETA_PRIME):
        scales = _scale_map((40, 40), size, rho, theta, basis)
        combined = filter_space_variant(2.5 * f - 0.75 * g, scales, basis)
        separate = 2.5 * filter_space_variant(f, scales, basis) - 0.75 * filter_space_variant(g, scales, basis)
        np.testing.assert_allclose(combined, separate, rtol=0, atol=1e-9)


def test_thread_count_does_not_change_the_output(monkeypatch):
    monkeypatch.setattr(settings, "PIXEL_BLOCK", 97)
    rng = np.random.default_rng(6)
    image = rng.uniform(size=(32, 33))
    scales = _scale_map(image.shape, 6.0, 2.0, 1.0, THETA)
    one = filter_space_variant(image, scales, THETA, threads=1)
    four = filter_space_variant(image, scales, THETA, threads=4)
    np.testing.assert_array_equal(one, four)


def test_masked_pixels_are_left_at_zero():
    image = np.ones((10, 10))
    scales = np.full((10, 10, 4), np.nan)
    mask = np.zeros((10, 10), dtype=bool)
    mask[3:7, 3:7] = True
    scales[mask] = 2.0
    out = filter_space_variant(image, scales, THETA, edge="replicate", mask=mask)
    np.testing.assert_allclose(out[mask], 1.0, atol=1e-9)
    assert not out[~mask].any()


def test_scales_below_the_minimum_are_rejected_with_the_pixel():
    scales = np.full((5, 6, 4), 2.0)
    scales[1, 4, 2] = 0.1
    with pytest.raises(InvalidArgument, match=r"row=1, col=4"):
        filter_space_variant(np.ones((5, 6)), scales, THETA)


def test_runtime_does_not_grow_with_kernel_size():
    """Wall time on 512² varies by less than 25% across sizes 1, 25 and 100."""
    rng = np.random.default_rng(0)
    image = rng.uniform(size=(512, 512))
    scale_sets = [solve_scales(covariance_from_shape(ShapeParams(s, 1.0, 0.0)), THETA) for s in (1.0, 25.0, 100.0)]
    for scales in scale_sets:
        filter_space_variant(image, scales, THETA, threads=1)
    best = []
    for scales in scale_sets:
        runs = []
        for _ in range(2):
            start = time.perf_counter()
            filter_space_variant(image, scales, THETA, threads=1)
            runs.append(time.perf_counter() - start)
        best.append(min(runs))
    assert max(best) / min(best) < 1.25, best
