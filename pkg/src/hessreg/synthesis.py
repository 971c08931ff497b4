"""Synthetic test data: analytic phantoms, functionally dependent pairs, bias fields."""

from __future__ import annotations

from typing import Callable, NamedTuple

import numpy as np

from .errors import ParameterError
from .transform import AffineTransform, invert, rotation_matrix
from .volume_io import LandmarkSet, Volume

KINDS = ("gaussian_blobs", "shepp_logan_like")
MIN_SYNTH_DIM = 32


def default_intensity_map(t):
    """Smooth non-monotone map used to derive the moving image: exp(-t) + t^2/2."""
    return np.exp(-t) + 0.5 * t * t


class Phantom:
    """Analytic scalar field evaluated at arbitrary world points."""

    def __init__(self, centers, inv_covs, amplitudes, edge=None):
        self.centers = np.asarray(centers, dtype=np.float64)
        self.inv_covs = np.asarray(inv_covs, dtype=np.float64)
        self.amplitudes = np.asarray(amplitudes, dtype=np.float64)
        # edge=None: Gaussian profiles; otherwise smoothed ellipsoid indicators
        self.edge = edge

    def __call__(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        out = np.zeros(len(pts))
        for c, ic, a in zip(self.centers, self.inv_covs, self.amplitudes):
            d = pts - c
            rho2 = np.einsum("ni,ij,nj->n", d, ic, d)
            if self.edge is None:
                out += a * np.exp(-0.5 * rho2)
            else:
                out += a * 0.5 * (1.0 - np.tanh((np.sqrt(rho2) - 1.0) / self.edge))
        return out


def _random_rotation(rng) -> np.ndarray:
    return rotation_matrix(rng.uniform(-180.0, 180.0, size=3))


def _blob_phantom(extent, rng) -> Phantom:
    margin = 4.0
    n = max(12, int(np.prod(extent) / 2500.0))
    centers = rng.uniform(margin, extent - margin, size=(n, 3))
    inv_covs = []
    for _ in range(n):
        r = _random_rotation(rng)
        s = rng.uniform(2.5, 6.0, size=3)
        inv_covs.append(r @ np.diag(1.0 / s**2) @ r.T)
    amps = rng.uniform(0.4, 1.0, size=n)
    return Phantom(centers, inv_covs, amps)


# (center, semi-axes, amplitude) as fractions of the half extent, Shepp-Logan style
_ELLIPSOIDS = [
    ((0.0, 0.0, 0.0), (0.69, 0.92, 0.81), 1.0),
    ((0.0, -0.0184, 0.0), (0.6624, 0.874, 0.78), -0.6),
    ((0.22, 0.0, 0.0), (0.11, 0.31, 0.22), -0.25),
    ((-0.22, 0.0, 0.0), (0.16, 0.41, 0.28), -0.25),
    ((0.0, 0.35, -0.15), (0.21, 0.25, 0.41), 0.3),
    ((0.0, 0.1, 0.25), (0.046, 0.046, 0.05), 0.3),
    ((0.0, -0.1, 0.25), (0.046, 0.046, 0.05), 0.3),
    ((-0.08, -0.605, 0.0), (0.046, 0.023, 0.05), 0.3),
    ((0.0, -0.605, 0.0), (0.023, 0.023, 0.02), 0.3),
    ((0.06, -0.605, 0.0), (0.023, 0.046, 0.02), 0.3),
    ((0.0, -0.1, -0.25), (0.056, 0.056, 0.1), 0.2),
    ((0.06, -0.105, 0.0625), (0.056, 0.056, 0.1), -0.2),
]


def _ellipsoid_phantom(extent, rng) -> Phantom:
    half = extent / 2.0
    centers, inv_covs, amps = [], [], []
    for c, ax, a in _ELLIPSOIDS:
        jitter = rng.uniform(-0.03, 0.03, size=3)
        centers.append(half + (np.asarray(c) + jitter) * half)
        axes = np.asarray(ax) * half * rng.uniform(0.9, 1.1, size=3)
        r = rotation_matrix(rng.uniform(-20.0, 20.0, size=3))
        inv_covs.append(r @ np.diag(1.0 / axes**2) @ r.T)
        amps.append(a)
    # edge width is relative to the normalised radius
    return Phantom(centers, inv_covs, amps, edge=0.08)


def make_phantom(kind: str, dims, spacing, seed: int) -> Phantom:
    if kind not in KINDS:
        raise ParameterError(f"unknown phantom kind {kind!r}; choose from {KINDS}")
    extent = (np.asarray(dims) - 1) * np.asarray(spacing, dtype=np.float64)
    rng = np.random.default_rng(seed)
    if kind == "gaussian_blobs":
        return _blob_phantom(extent, rng)
    return _ellipsoid_phantom(extent, rng)


class SyntheticPair(NamedTuple):
    fixed: Volume
    moving: Volume
    fixed_landmarks: LandmarkSet
    moving_landmarks: LandmarkSet


def _grid_points(dims, spacing, origin):
    axes = [origin[a] + spacing[a] * np.arange(dims[a]) for a in range(3)]
    g = np.meshgrid(*axes, indexing="ij")
    return np.stack([x.ravel() for x in g], axis=1)


def synthesize_pair(
    kind: str = "gaussian_blobs",
    dims=(64, 64, 64),
    spacing=(1.0, 1.0, 1.0),
    seed: int = 0,
    noise: float = 0.0,
    deformation: AffineTransform | None = None,
    intensity_map: Callable = default_intensity_map,
    n_landmarks: int = 10,
) -> SyntheticPair:
    """Fixed phantom F and moving image M = g(F) (+ noise) on the same grid.

    ``noise`` is the std of additive Gaussian noise relative to the std of
    the noise-free moving image. With ``deformation`` P, the moving image is
    ``g(F(P(y)))`` so that P realigns it onto F; moving landmarks are then
    ``P^-1`` of the fixed ones, i.e. the fixed-to-moving ground truth.
    """
    dims = tuple(int(n) for n in dims)
    if len(dims) != 3 or min(dims) < MIN_SYNTH_DIM:
        raise ParameterError(f"synthetic volumes need >= {MIN_SYNTH_DIM} voxels per axis")
    if noise < 0:
        raise ParameterError("noise must be >= 0")
    spacing = tuple(float(s) for s in spacing)
    origin = (0.0, 0.0, 0.0)
    phantom = make_phantom(kind, dims, spacing, seed)
    pts = _grid_points(dims, spacing, origin)
    fixed = Volume(phantom(pts).reshape(dims), spacing, origin)

    src = pts if deformation is None else deformation(pts)
    m = intensity_map(phantom(src)).reshape(dims)
    rng = np.random.default_rng([seed, 1])
    if noise > 0:
        m = m + rng.normal(0.0, noise * m.std(), size=dims)
    moving = Volume(m, spacing, origin)

    extent = (np.asarray(dims) - 1) * np.asarray(spacing)
    lm = rng.uniform(0.25 * extent, 0.75 * extent, size=(n_landmarks, 3))
    lm_moving = lm if deformation is None else invert(deformation)(lm)
    return SyntheticPair(
        fixed, moving, LandmarkSet(lm, "fixed"), LandmarkSet(lm_moving, "moving")
    )


def bias_field(dims, strength: float, seed: int) -> np.ndarray:
    """Smooth positive field in [1 - strength, 1 + strength] from a random
    degree-2 polynomial in coordinates normalised to [-1, 1]."""
    if not 0.0 <= strength < 1.0:
        raise ParameterError("bias strength must be in [0, 1)")
    rng = np.random.default_rng(seed)
    coef = rng.normal(size=9)
    u = [np.linspace(-1.0, 1.0, n) for n in dims]
    x, y, z = np.meshgrid(*u, indexing="ij")
    terms = (x, y, z, x * x, y * y, z * z, x * y, x * z, y * z)
    p = sum(c * t for c, t in zip(coef, terms))
    span = p.max() - p.min()
    if span <= 0:
        return np.ones(dims)
    return (1.0 - strength) + 2.0 * strength * (p - p.min()) / span


def apply_bias_field(v: Volume, strength: float, seed: int) -> Volume:
    """Multiply ``v`` voxel-wise by ``bias_field(v.dims, strength, seed)``."""
    if strength == 0.0:
        return v.with_data(v.data)
    return v.with_data(v.data * bias_field(v.dims, strength, seed))
