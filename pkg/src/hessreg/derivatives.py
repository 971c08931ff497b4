"""Gaussian-derivative gradient and Hessian fields at a physical scale.

Kernels are sampled Gaussians (or their first/second derivatives) truncated
at ``ceil(4 sigma)`` and then moment-corrected, so that smoothing preserves
constants and the derivative kernels differentiate polynomials up to degree
two exactly. Convolution is done along one axis at a time with half-sample
symmetric ("reflect") boundaries.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError
from .volume_io import Volume

MIN_SIGMA_VOXELS = 0.3

# order of the six unique Hessian components
HESS_COMPONENTS = ("xx", "yy", "zz", "xy", "xz", "yz")
_HESS_ORDERS = {
    "xx": (2, 0, 0),
    "yy": (0, 2, 0),
    "zz": (0, 0, 2),
    "xy": (1, 1, 0),
    "xz": (1, 0, 1),
    "yz": (0, 1, 1),
}
_GRAD_ORDERS = ((1, 0, 0), (0, 1, 0), (0, 0, 1))


@dataclass(frozen=True)
class GaussianKernel1D:
    """Convolution taps ``taps[radius + i]`` for offsets ``i = -radius..radius``."""

    order: int
    sigma_voxels: float
    taps: np.ndarray
    radius: int

    def offsets(self) -> np.ndarray:
        return np.arange(-self.radius, self.radius + 1, dtype=np.float64)


def make_kernel(order: int, sigma_voxels: float) -> GaussianKernel1D:
    """Sampled, moment-corrected Gaussian derivative kernel.

    Under the convolution convention ``out[n] = sum_i taps[i] * f[n - i]``:

    * order 0: taps sum to 1;
    * order 1: taps sum to 0 and ``sum(i * taps) == -1``;
    * order 2: taps sum to 0 and ``sum(i**2 * taps) == 2``.
    """
    if order not in (0, 1, 2):
        raise ParameterError(f"kernel order must be 0, 1 or 2, got {order}")
    sigma = float(sigma_voxels)
    if not np.isfinite(sigma) or sigma < MIN_SIGMA_VOXELS:
        raise ParameterError(
            f"sigma {sigma_voxels} voxels is undersampled (need >= {MIN_SIGMA_VOXELS})"
        )
    radius = int(math.ceil(4.0 * sigma))
    i = np.arange(-radius, radius + 1, dtype=np.float64)
    g = np.exp(-0.5 * (i / sigma) ** 2)
    g /= g.sum()
    if order == 0:
        taps = g
    elif order == 1:
        taps = -i / sigma**2 * g
        taps = 0.5 * (taps - taps[::-1])  # exact antisymmetry
        taps /= -np.dot(i, taps)
    else:
        taps = (i**2 / sigma**4 - 1.0 / sigma**2) * g
        taps = taps - taps.sum() * g
        taps = 0.5 * (taps + taps[::-1])
        taps /= 0.5 * np.dot(i**2, taps)
        # centre tap defined from the others so the zero-sum holds exactly
        taps[radius] = -2.0 * taps[radius + 1 :].sum()
    taps.setflags(write=False)
    return GaussianKernel1D(order, sigma, taps, radius)


def convolve_axis(a: np.ndarray, kernel: GaussianKernel1D, axis: int) -> np.ndarray:
    """1-D convolution along ``axis`` with reflect (half-sample symmetric) boundary.

    Taps are applied in symmetric/antisymmetric pairs so that derivative
    kernels return exact zeros on constant input.
    """
    r = kernel.radius
    n = a.shape[axis]
    if r >= n:
        raise ParameterError(f"kernel radius {r} does not fit an axis of {n} voxels")
    pad = [(0, 0)] * a.ndim
    pad[axis] = (r, r)
    p = np.pad(a, pad, mode="symmetric")

    def shifted(k):
        # element n of the result reads f[n + k]
        sl = [slice(None)] * a.ndim
        sl[axis] = slice(r + k, r + k + n)
        return p[tuple(sl)]

    taps = kernel.taps
    centre = shifted(0)
    if kernel.order == 0:
        out = taps[r] * centre
        for k in range(1, r + 1):
            out = out + taps[r + k] * (shifted(-k) + shifted(k))
    elif kernel.order == 1:
        out = np.zeros_like(centre)
        for k in range(1, r + 1):
            out = out + taps[r + k] * (shifted(-k) - shifted(k))
    else:
        out = np.zeros_like(centre)
        for k in range(1, r + 1):
            out = out + taps[r + k] * ((shifted(-k) - centre) + (shifted(k) - centre))
    return out


@dataclass(frozen=True, eq=False)
class DerivativeField:
    """Gradient (per mm) and Hessian (per mm^2) sampled on the source grid.

    ``grad`` has shape (nx, ny, nz, 3); ``hess`` has shape (nx, ny, nz, 6)
    with components ordered xx, yy, zz, xy, xz, yz.
    """

    grad: np.ndarray
    hess: np.ndarray
    sigma_mm: float
    dims: tuple
    spacing: tuple
    origin: tuple

    def hessian_matrices(self) -> np.ndarray:
        return hess6_to_matrix(self.hess)

    def component(self, name: str) -> np.ndarray:
        if name in ("x", "y", "z"):
            return self.grad[..., "xyz".index(name)]
        return self.hess[..., HESS_COMPONENTS.index(name)]

    def as_volume(self, name: str) -> Volume:
        """One component as a Volume, e.g. for a debug dump with ``save_volume``."""
        return Volume(self.component(name), self.spacing, self.origin)

    def kernel_radius(self) -> tuple:
        return tuple(
            int(math.ceil(4.0 * self.sigma_mm / s)) for s in self.spacing
        )


def hess6_to_matrix(h6: np.ndarray) -> np.ndarray:
    """(..., 6) unique components -> (..., 3, 3) symmetric matrices."""
    h6 = np.asarray(h6, dtype=np.float64)
    xx, yy, zz, xy, xz, yz = np.moveaxis(h6, -1, 0)
    rows = [
        np.stack([xx, xy, xz], axis=-1),
        np.stack([xy, yy, yz], axis=-1),
        np.stack([xz, yz, zz], axis=-1),
    ]
    return np.stack(rows, axis=-2)


def matrix_to_hess6(h: np.ndarray) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    return np.stack(
        [h[..., 0, 0], h[..., 1, 1], h[..., 2, 2], h[..., 0, 1], h[..., 0, 2], h[..., 1, 2]],
        axis=-1,
    )


def axis_sigmas(spacing, sigma_mm: float) -> tuple:
    if not np.isfinite(sigma_mm) or sigma_mm <= 0:
        raise ParameterError(f"sigma_mm must be positive, got {sigma_mm}")
    return tuple(float(sigma_mm) / float(s) for s in spacing)


def compute_derivative_field(v: Volume, sigma_mm: float, workers: int = 1) -> DerivativeField:
    """Gradient and Hessian of ``v`` by separable Gaussian-derivative convolution.

    Parameters
    ----------
    v : Volume
    sigma_mm : float
        Gaussian standard deviation in mm, converted per axis with the voxel
        spacing (so anisotropic grids are handled).
    workers : int
        Threads used for independent convolution passes. The result does not
        depend on this value.
    """
    sig = axis_sigmas(v.spacing, sigma_mm)
    kernels = [[make_kernel(o, s) for o in (0, 1, 2)] for s in sig]
    for a in range(3):
        if kernels[a][0].radius >= v.dims[a]:
            raise ParameterError(
                f"sigma {sigma_mm} mm gives kernel radius {kernels[a][0].radius} "
                f"on axis {a} with only {v.dims[a]} voxels"
            )
    f = v.data
    needed = set(_GRAD_ORDERS) | set(_HESS_ORDERS.values())

    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None

    def run(jobs):
        if pool is None:
            return [convolve_axis(src, k, ax) for src, k, ax in jobs]
        return list(pool.map(lambda j: convolve_axis(*j), jobs))

    try:
        # pass 1: x; pass 2: y; pass 3: z. Intermediates are shared between outputs.
        px = sorted({o[0] for o in needed})
        xs = dict(zip(px, run([(f, kernels[0][ox], 0) for ox in px])))
        pxy = sorted({o[:2] for o in needed})
        xys = dict(zip(pxy, run([(xs[ox], kernels[1][oy], 1) for ox, oy in pxy])))
        pxyz = sorted(needed)
        res = dict(zip(pxyz, run([(xys[o[:2]], kernels[2][o[2]], 2) for o in pxyz])))
    finally:
        if pool is not None:
            pool.shutdown()

    sp = v.spacing
    grad = np.stack([res[o] / sp[a] for a, o in enumerate(_GRAD_ORDERS)], axis=-1)
    hess = []
    for name in HESS_COMPONENTS:
        o = _HESS_ORDERS[name]
        denom = 1.0
        for a in range(3):
            denom *= sp[a] ** o[a]
        hess.append(res[o] / denom)
    hess = np.stack(hess, axis=-1)
    grad.setflags(write=False)
    hess.setflags(write=False)
    return DerivativeField(grad, hess, float(sigma_mm), v.dims, v.spacing, v.origin)
