"""Lattice definitions, exact nearest-point decoders, and Voronoi dither sampling.

A lattice is the set of integer combinations of the columns of a generator
matrix, scaled by a positive factor rho.  Three families ship with exact
decoders: the integer lattice (per-coordinate rounding), the hexagonal lattice
(coset comparison over its rectangular sublattice), and the 8-dimensional E8
lattice (two-coset decoding over D8).  Arbitrary generators are accepted but
decoded approximately with Babai rounding.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError

_SQRT3 = np.sqrt(3.0)

# Basis vectors as columns: (1, 0) and (1/2, sqrt(3)/2), unit nearest-neighbor
# distance, covolume sqrt(3)/2.
_HEX_GENERATOR = np.array([[1.0, 0.5], [0.0, _SQRT3 / 2.0]])

# E8 basis as columns: seven even-sum integer vectors spanning D8 plus the
# all-halves glue vector.  |det| = 1.
_E8_GENERATOR = np.array(
    [
        [2, 0, 0, 0, 0, 0, 0, 0],
        [-1, 1, 0, 0, 0, 0, 0, 0],
        [0, -1, 1, 0, 0, 0, 0, 0],
        [0, 0, -1, 1, 0, 0, 0, 0],
        [0, 0, 0, -1, 1, 0, 0, 0],
        [0, 0, 0, 0, -1, 1, 0, 0],
        [0, 0, 0, 0, 0, -1, 1, 0],
        [0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5],
    ],
    dtype=float,
).T

# Exact shortest-vector norms of the unit-scale named lattices.
_KNOWN_SHORTEST = {"identity": 1.0, "hexagonal": 1.0, "e8": np.sqrt(2.0)}


@dataclass
class LatticeSpec:
    """A scaled lattice rho*G together with cached geometry.

    ``generator`` holds the unit-scale basis vectors as columns; every lattice
    point is ``scale * generator @ z`` for integer ``z``.  ``second_moment`` is
    the per-dimension second moment of a uniform distribution over the
    fundamental Voronoi cell; it is filled lazily (see
    :func:`ensure_second_moment`).  ``exact_decoder`` is False only for custom
    generators, whose nearest-point results are Babai approximations.
    """

    name: str
    generator: np.ndarray
    block_dim: int
    scale: float = 1.0
    second_moment: float | None = None
    exact_decoder: bool = True
    _shortest: float | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        self.generator = np.asarray(self.generator, dtype=float)
        if self.scale <= 0:
            raise ConfigurationError(f"lattice scale must be positive, got {self.scale}")
        if self.generator.shape != (self.block_dim, self.block_dim):
            raise ConfigurationError(
                f"generator must be {self.block_dim}x{self.block_dim}, got {self.generator.shape}"
            )
        if abs(np.linalg.det(self.scale * self.generator)) <= 0:
            raise ConfigurationError("lattice generator is singular")

    @property
    def scaled_generator(self) -> np.ndarray:
        return self.scale * self.generator


def identity_lattice(rho: float = 1.0) -> LatticeSpec:
    return LatticeSpec("identity", np.eye(1), 1, rho)


def hexagonal_lattice(rho: float = 1.0) -> LatticeSpec:
    return LatticeSpec("hexagonal", _HEX_GENERATOR.copy(), 2, rho)


def e8_lattice(rho: float = 1.0) -> LatticeSpec:
    return LatticeSpec("e8", _E8_GENERATOR.copy(), 8, rho)


def custom_lattice(generator: np.ndarray, rho: float = 1.0) -> LatticeSpec:
    generator = np.asarray(generator, dtype=float)
    return LatticeSpec("custom", generator, generator.shape[0], rho, exact_decoder=False)


def make_lattice(name: str, rho: float = 1.0, generator: np.ndarray | None = None) -> LatticeSpec:
    """Build a lattice from a config-style name."""
    if name == "identity":
        return identity_lattice(rho)
    if name == "hexagonal":
        return hexagonal_lattice(rho)
    if name == "e8":
        return e8_lattice(rho)
    if name == "custom":
        if generator is None:
            raise ConfigurationError("custom lattice requires a generator matrix")
        return custom_lattice(generator, rho)
    raise ConfigurationError(f"unknown lattice {name!r}")


def _decode_identity(x: np.ndarray) -> np.ndarray:
    return np.rint(x)


def _decode_hexagonal(x: np.ndarray) -> np.ndarray:
    # The hexagonal lattice splits into the rectangular sublattice spanned by
    # (1, 0), (0, sqrt(3)) and its translate by (1/2, sqrt(3)/2).
    spacing = np.array([1.0, _SQRT3])
    offset = np.array([0.5, _SQRT3 / 2.0])
    c0 = np.rint(x / spacing) * spacing
    c1 = np.rint((x - offset) / spacing) * spacing + offset
    d0 = np.sum((x - c0) ** 2, axis=-1)
    d1 = np.sum((x - c1) ** 2, axis=-1)
    return np.where((d0 <= d1)[..., None], c0, c1)


def _round_to_d8(x: np.ndarray) -> np.ndarray:
    """Nearest point of D8 = {z integer, sum(z) even} for each row of x."""
    f = np.rint(x)
    bad = (f.sum(axis=-1) % 2) != 0
    if np.any(bad):
        xb, fb = x[bad], f[bad]
        # Re-round the coordinate with the largest rounding error to its
        # second-nearest integer, flipping the parity of the sum.
        k = np.argmax(np.abs(xb - fb), axis=-1)
        rows = np.arange(len(xb))
        step = np.where(xb[rows, k] - fb[rows, k] >= 0, 1.0, -1.0)
        fb[rows, k] += step
        f[bad] = fb
    return f


def _decode_e8(x: np.ndarray) -> np.ndarray:
    # E8 = D8 union (D8 + 1/2): decode both cosets, keep the closer point.
    y0 = _round_to_d8(x)
    y1 = _round_to_d8(x - 0.5) + 0.5
    d0 = np.sum((x - y0) ** 2, axis=-1)
    d1 = np.sum((x - y1) ** 2, axis=-1)
    return np.where((d0 <= d1)[..., None], y0, y1)


def _decode_babai(spec: LatticeSpec, x: np.ndarray) -> np.ndarray:
    g = spec.scaled_generator
    z = np.rint(np.linalg.solve(g, x.T)).T
    return z @ g.T


def nearest_point(spec: LatticeSpec, x: np.ndarray) -> np.ndarray:
    """Quantize x (shape (n,) or (m, n)) to the nearest lattice point.

    Exact for the named lattices; Babai rounding for custom generators
    (``spec.exact_decoder`` is False in that case).
    """
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("nearest_point requires finite input")
    if x.shape[-1] != spec.block_dim:
        raise ConfigurationError(
            f"input dimension {x.shape[-1]} does not match block_dim {spec.block_dim}"
        )
    pts = np.atleast_2d(x)
    if spec.name == "identity":
        out = spec.scale * _decode_identity(pts / spec.scale)
    elif spec.name == "hexagonal":
        out = spec.scale * _decode_hexagonal(pts / spec.scale)
    elif spec.name == "e8":
        out = spec.scale * _decode_e8(pts / spec.scale)
    else:
        out = _decode_babai(spec, pts)
    return out.reshape(x.shape)


def quantize_blocks(spec: LatticeSpec, vec: np.ndarray) -> np.ndarray:
    """Apply nearest_point blockwise to a flat vector of length s = m*block_dim."""
    vec = np.asarray(vec, dtype=float)
    n = spec.block_dim
    if vec.ndim != 1 or vec.size % n != 0:
        raise ConfigurationError(f"vector length {vec.size} is not a multiple of block_dim {n}")
    return nearest_point(spec, vec.reshape(-1, n)).ravel()


def sample_dither(spec: LatticeSpec, size: int, rng: np.random.Generator) -> np.ndarray:
    """Draw a length-``size`` dither, each block uniform over the Voronoi cell.

    Draws uniformly over the fundamental parallelepiped rho*G*[0,1)^n and folds
    by subtracting the nearest lattice point; the fold is a volume-preserving
    bijection onto the Voronoi cell, so no rejection step is needed.
    """
    n = spec.block_dim
    if size % n != 0:
        raise ConfigurationError(f"dither length {size} is not a multiple of block_dim {n}")
    u = rng.random((size // n, n)) @ spec.scaled_generator.T
    d = u - nearest_point(spec, u)
    return d.ravel()


def second_moment(spec: LatticeSpec, num_samples: int, rng: np.random.Generator) -> float:
    """Monte-Carlo estimate of the per-dimension Voronoi second moment.

    Averages ||d||^2 / n over ``num_samples`` dither blocks and caches the
    result on the spec.  Scales as rho^2 with the lattice scale.
    """
    if num_samples < 10_000:
        raise ConfigurationError("second_moment requires at least 10^4 samples")
    d = sample_dither(spec, num_samples * spec.block_dim, rng)
    value = float(np.mean(d**2))
    spec.second_moment = value
    return value


def closed_form_second_moment(spec: LatticeSpec) -> float | None:
    """Exact second moment where a closed form is used (identity only)."""
    if spec.name == "identity":
        return spec.scale**2 / 12.0
    return None


def ensure_second_moment(
    spec: LatticeSpec, num_samples: int = 100_000, rng: np.random.Generator | None = None
) -> float:
    """Return the cached second moment, filling it from the closed form or MC."""
    if spec.second_moment is not None:
        return spec.second_moment
    closed = closed_form_second_moment(spec)
    if closed is not None:
        spec.second_moment = closed
        return closed
    if rng is None:
        rng = np.random.default_rng(0)
    return second_moment(spec, num_samples, rng)


def shortest_vector_norm(spec: LatticeSpec) -> float:
    """Norm of the shortest nonzero lattice vector (exact for named lattices).

    Custom generators are searched over integer coordinates in {-2..2}^n, which
    is exhaustive only for reasonably reduced bases.
    """
    if spec._shortest is None:
        known = _KNOWN_SHORTEST.get(spec.name)
        if known is not None:
            spec._shortest = known
        else:
            n = spec.block_dim
            grid = np.array(list(itertools.product(range(-2, 3), repeat=n)), dtype=float)
            grid = grid[np.any(grid != 0, axis=1)]
            norms = np.linalg.norm(grid @ spec.generator.T, axis=1)
            spec._shortest = float(norms.min())
    return spec.scale * spec._shortest


def packing_radius(spec: LatticeSpec) -> float:
    """Largest radius of disjoint balls centered at lattice points."""
    return 0.5 * shortest_vector_norm(spec)


def brute_force_nearest(spec: LatticeSpec, x: np.ndarray, zrange: int = 6) -> np.ndarray:
    """Exhaustive nearest-point search, used only for validation.

    For the named small lattices the search enumerates integer coordinates in
    {-zrange..zrange}^n; inputs must lie well inside the enumerated region.
    For E8 the candidates are instead enumerated from the definition (integer
    and half-integer vectors with even coordinate sum near x), which stays
    tractable in 8 dimensions.
    """
    x = np.asarray(x, dtype=float)
    pts = np.atleast_2d(x) / spec.scale
    if spec.name == "e8":
        out = _e8_enumerated_nearest(pts)
    else:
        n = spec.block_dim
        grid = np.array(list(itertools.product(range(-zrange, zrange + 1), repeat=n)), dtype=float)
        cand = grid @ spec.generator.T
        d2 = np.sum((pts[:, None, :] - cand[None, :, :]) ** 2, axis=-1)
        out = cand[np.argmin(d2, axis=1)]
    return (spec.scale * out).reshape(x.shape)


def _e8_enumerated_nearest(pts: np.ndarray) -> np.ndarray:
    offsets = np.array(list(itertools.product((-1.0, 0.0, 1.0), repeat=8)))
    out = np.empty_like(pts)
    best = np.full(len(pts), np.inf)
    for shift in (0.0, 0.5):
        base = np.rint(pts - shift) + shift
        cand = base[:, None, :] + offsets[None, :, :]
        # Coordinate sums are exact in binary floating point (multiples of 1/2),
        # so the even-sum membership test is an exact comparison.
        valid = (cand.sum(axis=-1) % 2.0) == 0.0
        d2 = np.sum((pts[:, None, :] - cand) ** 2, axis=-1)
        d2[~valid] = np.inf
        idx = np.argmin(d2, axis=1)
        better = d2[np.arange(len(pts)), idx] < best
        best[better] = d2[np.arange(len(pts)), idx][better]
        out[better] = cand[np.arange(len(pts)), idx][better]
    return out
