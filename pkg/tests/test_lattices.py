import itertools

import numpy as np
import pytest

from fedcpu.errors import ConfigurationError
from fedcpu.lattices import (
    LatticeSpec,
    brute_force_nearest,
    closed_form_second_moment,
    custom_lattice,
    e8_lattice,
    hexagonal_lattice,
    identity_lattice,
    make_lattice,
    nearest_point,
    packing_radius,
    quantize_blocks,
    sample_dither,
    second_moment,
    shortest_vector_norm,
)

HEX_BASIS = np.array([[1.0, 0.0], [0.5, np.sqrt(3.0) / 2.0]])


def hex_grid_points(zmax, rho=1.0):
    zs = np.array(list(itertools.product(range(-zmax, zmax + 1), repeat=2)), dtype=float)
    return rho * (zs @ HEX_BASIS)


def hex_brute(x, zmax=6, rho=1.0):
    pts = hex_grid_points(zmax, rho)
    return pts[np.argmin(((pts - x) ** 2).sum(axis=1))]


def test_identity_rounding():
    lat = identity_lattice()
    assert nearest_point(lat, np.array([0.4])) == pytest.approx(0.0)
    assert nearest_point(lat, np.array([0.6])) == pytest.approx(1.0)
    assert nearest_point(lat, np.array([-1.7])) == pytest.approx(-2.0)


def test_hexagonal_origin_is_lattice_point():
    lat = hexagonal_lattice()
    assert np.allclose(nearest_point(lat, np.zeros(2)), 0.0)


def test_hexagonal_matches_small_grid_example():
    # Exhaustive search over z in {-4..4}^2 around the example input.
    lat = hexagonal_lattice()
    x = np.array([1.1, 0.05])
    assert np.allclose(nearest_point(lat, x), hex_brute(x, zmax=4), atol=1e-12)


def test_hexagonal_matches_enumeration_on_random_inputs():
    lat = hexagonal_lattice()
    rng = np.random.default_rng(3)
    xs = rng.uniform(-2.0, 2.0, (300, 2))
    fast = nearest_point(lat, xs)
    for x, y in zip(xs, fast):
        assert np.allclose(y, hex_brute(x), atol=1e-9)


def test_hexagonal_scaled():
    lat = hexagonal_lattice(rho=0.5)
    rng = np.random.default_rng(4)
    xs = rng.uniform(-1.0, 1.0, (100, 2))
    fast = nearest_point(lat, xs)
    for x, y in zip(xs, fast):
        pts = hex_grid_points(6, rho=0.5)
        assert np.allclose(y, pts[np.argmin(((pts - x) ** 2).sum(axis=1))], atol=1e-9)


def test_e8_recovers_point_within_packing_radius():
    lat = e8_lattice()
    rng = np.random.default_rng(5)
    radius = packing_radius(lat)
    zs = rng.integers(-3, 4, (200, 8)).astype(float)
    points = zs @ lat.generator.T
    direction = rng.normal(size=(200, 8))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    noise = direction * rng.uniform(0.0, 0.499 * radius, (200, 1))
    decoded = nearest_point(lat, points + noise)
    assert np.allclose(decoded, points, atol=1e-9)


def test_e8_matches_enumeration():
    lat = e8_lattice()
    rng = np.random.default_rng(6)
    xs = rng.normal(0.0, 1.0, (200, 8))
    assert np.allclose(nearest_point(lat, xs), brute_force_nearest(lat, xs), atol=1e-9)


def test_e8_generator_spans_decoded_points():
    # Every decoder output must be an integer combination of the generator.
    lat = e8_lattice()
    assert abs(abs(np.linalg.det(lat.generator)) - 1.0) < 1e-12
    rng = np.random.default_rng(7)
    decoded = nearest_point(lat, rng.normal(0.0, 2.0, (100, 8)))
    coords = np.linalg.solve(lat.generator, decoded.T).T
    assert np.allclose(coords, np.rint(coords), atol=1e-8)


def test_closure_under_integer_combinations():
    rng = np.random.default_rng(8)
    for lat in (identity_lattice(0.7), hexagonal_lattice(1.3), e8_lattice(0.9)):
        n = lat.block_dim
        z1 = rng.integers(-3, 4, (50, n)).astype(float)
        z2 = rng.integers(-3, 4, (50, n)).astype(float)
        coeffs = rng.integers(-2, 3, (50, 2)).astype(float)
        combo = (coeffs[:, :1] * z1 + coeffs[:, 1:] * z2) @ lat.scaled_generator.T
        assert np.allclose(nearest_point(lat, combo), combo, atol=1e-9)


def test_idempotence():
    rng = np.random.default_rng(9)
    for lat in (identity_lattice(), hexagonal_lattice(), e8_lattice()):
        x = rng.normal(0.0, 2.0, (40, lat.block_dim))
        once = nearest_point(lat, x)
        assert np.allclose(nearest_point(lat, once), once, atol=1e-12)


def test_dither_identity_support():
    lat = identity_lattice()
    rng = np.random.default_rng(10)
    d = sample_dither(lat, 5000, rng)
    assert np.all(d >= -0.5) and np.all(d < 0.5)


def test_dither_second_moment_identity():
    lat = identity_lattice()
    rng = np.random.default_rng(11)
    d = sample_dither(lat, 100_000, rng)
    assert np.mean(d**2) == pytest.approx(1.0 / 12.0, rel=0.02)


def test_second_moment_scales_with_rho():
    rng = np.random.default_rng(12)
    assert second_moment(identity_lattice(0.5), 100_000, rng) == pytest.approx(1.0 / 48.0, rel=0.02)


def test_second_moment_caches():
    lat = hexagonal_lattice()
    value = second_moment(lat, 20_000, np.random.default_rng(13))
    assert lat.second_moment == value


def test_second_moment_rejects_small_sample():
    with pytest.raises(ConfigurationError):
        second_moment(identity_lattice(), 5000, np.random.default_rng(0))


def test_hexagonal_second_moment_against_integration():
    # Independent oracle: integrate ||x||^2 over the Voronoi hexagon, whose
    # facets bisect the segments to the six nearest neighbors.
    axes = np.array([[1.0, 0.0], [0.5, np.sqrt(3.0) / 2.0], [-0.5, np.sqrt(3.0) / 2.0]])
    grid = np.linspace(-0.6, 0.6, 1201)
    gx, gy = np.meshgrid(grid, grid, indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
    inside = np.all(np.abs(pts @ axes.T) <= 0.5 + 1e-12, axis=1)
    integral = float(np.mean((pts[inside] ** 2).sum(axis=1)) / 2.0)
    assert integral == pytest.approx(5.0 / 72.0, rel=2e-3)

    mc = second_moment(hexagonal_lattice(), 200_000, np.random.default_rng(14))
    assert mc == pytest.approx(integral, rel=0.02)


def test_e8_dither_moment_self_consistent():
    reference = second_moment(e8_lattice(), 200_000, np.random.default_rng(15))
    lat = e8_lattice()
    rng = np.random.default_rng(16)
    d = sample_dither(lat, 8 * 50_000, rng).reshape(-1, 8)
    per_block = (d**2).sum(axis=1) / 8.0
    se = per_block.std(ddof=1) / np.sqrt(len(per_block))
    se_ref = per_block.std(ddof=1) / np.sqrt(200_000)
    assert abs(per_block.mean() - reference) < 3.0 * (se + se_ref)


def test_quantization_error_moment():
    # epsilon = Q(w + d) - d - w should carry the lattice second moment.
    rng = np.random.default_rng(17)
    for lat, sigma_q2 in (
        (identity_lattice(), 1.0 / 12.0),
        (hexagonal_lattice(), second_moment(hexagonal_lattice(), 200_000, np.random.default_rng(18))),
        (e8_lattice(), second_moment(e8_lattice(), 200_000, np.random.default_rng(19))),
    ):
        n = lat.block_dim
        blocks = 30_000
        w = rng.normal(0.0, 1.0, (blocks, n))
        d = sample_dither(lat, blocks * n, rng).reshape(blocks, n)
        eps = nearest_point(lat, w + d) - d - w
        per_block = (eps**2).sum(axis=1) / n
        se = per_block.std(ddof=1) / np.sqrt(blocks)
        assert abs(per_block.mean() - sigma_q2) < 3.0 * se, lat.name


def test_packing_radii():
    assert packing_radius(identity_lattice()) == pytest.approx(0.5)
    assert packing_radius(hexagonal_lattice()) == pytest.approx(0.5)
    assert packing_radius(e8_lattice()) == pytest.approx(np.sqrt(2.0) / 2.0)
    assert packing_radius(e8_lattice(rho=2.0)) == pytest.approx(np.sqrt(2.0))


def test_custom_lattice_uses_babai_and_is_flagged():
    gen = np.array([[2.0, 0.3], [0.0, 1.5]])
    lat = custom_lattice(gen)
    assert not lat.exact_decoder
    rng = np.random.default_rng(20)
    xs = rng.uniform(-2.0, 2.0, (50, 2))
    decoded = nearest_point(lat, xs)
    coords = np.linalg.solve(lat.scaled_generator, decoded.T).T
    assert np.allclose(coords, np.rint(coords), atol=1e-9)
    # Babai agrees with true enumeration for this well-conditioned basis.
    assert np.allclose(decoded, brute_force_nearest(lat, xs, zrange=4), atol=1e-9)
    assert shortest_vector_norm(lat) == pytest.approx(1.5)


def test_singular_generator_rejected():
    with pytest.raises(ConfigurationError):
        custom_lattice(np.array([[1.0, 2.0], [2.0, 4.0]]))


def test_nearest_point_input_validation():
    lat = hexagonal_lattice()
    with pytest.raises(ValueError):
        nearest_point(lat, np.array([np.nan, 0.0]))
    with pytest.raises(ConfigurationError):
        nearest_point(lat, np.zeros(3))


def test_quantize_blocks_divisibility():
    lat = e8_lattice()
    with pytest.raises(ConfigurationError):
        quantize_blocks(lat, np.zeros(12))
    out = quantize_blocks(lat, np.zeros(16))
    assert out.shape == (16,)


def test_sample_dither_divisibility():
    with pytest.raises(ConfigurationError):
        sample_dither(e8_lattice(), 10, np.random.default_rng(0))


def test_make_lattice_dispatch():
    assert make_lattice("identity").block_dim == 1
    assert make_lattice("hexagonal").block_dim == 2
    assert make_lattice("e8", rho=0.5).scale == 0.5
    with pytest.raises(ConfigurationError):
        make_lattice("leech")
    with pytest.raises(ConfigurationError):
        make_lattice("custom")


def test_closed_form_second_moment():
    assert closed_form_second_moment(identity_lattice(2.0)) == pytest.approx(4.0 / 12.0)
    assert closed_form_second_moment(e8_lattice()) is None
