"""Pointwise similarity between a fixed image F and a moving image M.

Hessian-based similarity
------------------------
If ``M = g(F)`` on a neighbourhood, the moving Hessian lies in the plane
spanned by ``H_F`` and ``gF gF^T`` (``gF`` the fixed gradient)::

    H_M = mu * H_F + nu * gF gF^T

The similarity ``S`` is one minus the smallest normalised squared Frobenius
residual of that decomposition, i.e. the squared cosine between ``H_M`` and
its orthogonal projection onto the plane. ``S = 1`` means local functional
dependence and ``S = 0`` means ``H_M`` is orthogonal to the plane. The metric is
not symmetric in F and M.

Three independent evaluations are provided (closed form, angle form and a
normal-equations solve) together with the gradient-orientation-alignment
baseline ``cos^2`` of the angle between ``gF`` and ``gM``.

All inner products are Frobenius products of full 3x3 matrices, so every
off-diagonal entry counts twice.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, HessregError

EPS = 1e-12
RANGE_TOL = 1e-9


@dataclass(frozen=True)
class PointwiseInputs:
    grad_f: np.ndarray
    hess_f: np.ndarray
    hess_m: np.ndarray
    grad_m: np.ndarray | None = None

    def __post_init__(self):
        gf = np.asarray(self.grad_f, dtype=np.float64).reshape(3)
        hf = np.asarray(self.hess_f, dtype=np.float64).reshape(3, 3)
        hm = np.asarray(self.hess_m, dtype=np.float64).reshape(3, 3)
        gm = None if self.grad_m is None else np.asarray(self.grad_m, dtype=np.float64).reshape(3)
        for name, arr in (("grad_f", gf), ("hess_f", hf), ("hess_m", hm), ("grad_m", gm)):
            if arr is not None and not np.all(np.isfinite(arr)):
                raise DataError(f"{name} contains non-finite values")
        for name, h in (("hess_f", hf), ("hess_m", hm)):
            if not np.allclose(h, h.T, rtol=1e-12, atol=1e-12 * (1.0 + np.abs(h).max())):
                raise DataError(f"{name} is not symmetric")
        object.__setattr__(self, "grad_f", gf)
        object.__setattr__(self, "hess_f", hf)
        object.__setattr__(self, "hess_m", hm)
        object.__setattr__(self, "grad_m", gm)


@dataclass(frozen=True)
class SimilarityValue:
    s: float
    valid: bool
    mu_star: float | None = None
    nu_star: float | None = None


INVALID = SimilarityValue(0.0, False)


def _check_range(s, valid):
    """Snap values within RANGE_TOL of [0, 1]; anything further out is a bug."""
    s = np.asarray(s, dtype=np.float64)
    bad = valid & ((s < -RANGE_TOL) | (s > 1.0 + RANGE_TOL))
    if np.any(bad):
        raise HessregError(f"similarity {s[bad].ravel()[0]!r} outside [0, 1] beyond tolerance")
    return np.where(valid, np.clip(s, 0.0, 1.0), 0.0)


def _frob(x, y):
    return np.einsum("...ij,...ij->...", x, y)


def _stack_inputs(grad_f, hess_f, hess_m):
    g = np.asarray(grad_f, dtype=np.float64)
    hf = np.asarray(hess_f, dtype=np.float64)
    hm = np.asarray(hess_m, dtype=np.float64)
    if not (np.all(np.isfinite(g)) and np.all(np.isfinite(hf)) and np.all(np.isfinite(hm))):
        raise DataError("non-finite metric input")
    return g, hf, hm


def closed_form_arrays(grad_f, hess_f, hess_m):
    """Closed-form similarity for stacks of full 3x3 matrices.

    Returns ``(s, valid, mu_star, nu_star)``. With a = <H_M, H_F>,
    b = gF'H_M gF, c = gF'H_F gF, n = |gF|^2::

        S = (n^2 a^2 + |H_F|^2 b^2 - 2abc) / (|H_M|^2 (n^2 |H_F|^2 - c^2))
    """
    g, hf, hm = _stack_inputs(grad_f, hess_f, hess_m)
    a = _frob(hm, hf)
    b = np.einsum("...i,...ij,...j->...", g, hm, g)
    c = np.einsum("...i,...ij,...j->...", g, hf, g)
    n = np.einsum("...i,...i->...", g, g)
    hf2, hm2 = _frob(hf, hf), _frob(hm, hm)
    q = n * n * hf2 - c * c
    # q <= 0 also covers gF = 0 and H_F = 0
    valid = (q > EPS * n * n * hf2) & (hm2 > EPS * np.maximum(hf2, n * n))
    with np.errstate(divide="ignore", invalid="ignore"):
        s = (n * n * a * a + hf2 * b * b - 2.0 * a * b * c) / (hm2 * q)
        mu = np.where(valid, (a * n * n - b * c) / q, 0.0)
        nu = np.where(valid, (b * hf2 - a * c) / q, 0.0)
    return _check_range(s, valid), valid, mu, nu


def angle_form_arrays(grad_f, hess_f, hess_m):
    """Similarity from the pairwise angles between vec(H_M), vec(H_F) and
    vec(gF gF^T)::

        S = (cos^2 a + cos^2 b - 2 cos a cos b cos g) / sin^2 g

    Returns ``(s, valid)``.
    """
    g, hf, hm = _stack_inputs(grad_f, hess_f, hess_m)
    ggt = g[..., :, None] * g[..., None, :]
    nm, nf, ng = (np.sqrt(_frob(x, x)) for x in (hm, hf, ggt))
    with np.errstate(divide="ignore", invalid="ignore"):
        cos_a = _frob(hm, hf) / (nm * nf)
        cos_b = _frob(hm, ggt) / (nm * ng)
        cos_g = _frob(hf, ggt) / (nf * ng)
        sin2_g = 1.0 - cos_g * cos_g
        s = (cos_a**2 + cos_b**2 - 2.0 * cos_a * cos_b * cos_g) / sin2_g
    valid = (
        (nm > 0) & (nf > 0) & (ng > 0) & (sin2_g > EPS)
        & (nm * nm > EPS * np.maximum(nf * nf, ng * ng))
    )
    return _check_range(s, valid), valid


def oracle_arrays(grad_f, hess_f, hess_m):
    """Reference similarity ``1 - E*`` from the 2x2 normal equations of
    ``min |H_M - mu H_F - nu gF gF^T|^2 / |H_M|^2``.

    Returns ``(s, valid, mu_star, nu_star)``; ``s`` is not clipped.
    """
    g, hf, hm = _stack_inputs(grad_f, hess_f, hess_m)
    ggt = g[..., :, None] * g[..., None, :]
    gram = np.stack(
        [
            np.stack([_frob(hf, hf), _frob(hf, ggt)], axis=-1),
            np.stack([_frob(ggt, hf), _frob(ggt, ggt)], axis=-1),
        ],
        axis=-2,
    )
    rhs = np.stack([_frob(hm, hf), _frob(hm, ggt)], axis=-1)
    hm2 = _frob(hm, hm)
    det = np.linalg.det(gram)
    valid = (hm2 > 0) & (det > EPS * gram[..., 0, 0] * gram[..., 1, 1])
    safe = np.where(valid[..., None, None], gram, np.eye(2))
    sol = np.linalg.solve(safe, np.where(valid[..., None], rhs, 0.0)[..., None])[..., 0]
    mu, nu = sol[..., 0], sol[..., 1]
    resid = hm - mu[..., None, None] * hf - nu[..., None, None] * ggt
    with np.errstate(divide="ignore", invalid="ignore"):
        s = 1.0 - _frob(resid, resid) / hm2
    return np.where(valid, s, 0.0), valid, mu, nu


def gradient_alignment_arrays(grad_f, grad_m):
    """cos^2 of the angle between gradients; returns ``(s, valid)``."""
    gf = np.asarray(grad_f, dtype=np.float64)
    gm = np.asarray(grad_m, dtype=np.float64)
    if not (np.all(np.isfinite(gf)) and np.all(np.isfinite(gm))):
        raise DataError("non-finite metric input")
    nf = np.einsum("...i,...i->...", gf, gf)
    nm = np.einsum("...i,...i->...", gm, gm)
    d = np.einsum("...i,...i->...", gf, gm)
    valid = np.minimum(nf, nm) > EPS * np.maximum(nf, nm)
    with np.errstate(divide="ignore", invalid="ignore"):
        s = d * d / (nf * nm)
    return _check_range(s, valid), valid


def _value(s, valid, mu=None, nu=None) -> SimilarityValue:
    if not bool(valid):
        return INVALID
    return SimilarityValue(
        float(s), True, None if mu is None else float(mu), None if nu is None else float(nu)
    )


def hessian_similarity_closed_form(p: PointwiseInputs) -> SimilarityValue:
    return _value(*closed_form_arrays(p.grad_f, p.hess_f, p.hess_m))


def hessian_similarity_angle_form(p: PointwiseInputs) -> SimilarityValue:
    return _value(*angle_form_arrays(p.grad_f, p.hess_f, p.hess_m))


def hessian_similarity_oracle(p: PointwiseInputs) -> SimilarityValue:
    return _value(*oracle_arrays(p.grad_f, p.hess_f, p.hess_m))


def gradient_orientation_alignment(p: PointwiseInputs) -> SimilarityValue:
    if p.grad_m is None:
        raise DataError("gradient orientation alignment needs grad_m")
    return _value(*gradient_alignment_arrays(p.grad_f, p.grad_m))


# ------------------------------------------------------------ vectorised forms


def _sym_inner(h1, h2):
    """Frobenius product of (..., 6) packed symmetric matrices."""
    return (
        h1[..., 0] * h2[..., 0]
        + h1[..., 1] * h2[..., 1]
        + h1[..., 2] * h2[..., 2]
        + 2.0 * (h1[..., 3] * h2[..., 3] + h1[..., 4] * h2[..., 4] + h1[..., 5] * h2[..., 5])
    )


def _quad_form(h, g):
    """g^T H g for packed H."""
    x, y, z = g[..., 0], g[..., 1], g[..., 2]
    return (
        h[..., 0] * x * x
        + h[..., 1] * y * y
        + h[..., 2] * z * z
        + 2.0 * (h[..., 3] * x * y + h[..., 4] * x * z + h[..., 5] * y * z)
    )


def fixed_degenerate_hessian(grad_f, hess_f6):
    """True where the fixed-image side makes the Hessian metric undefined."""
    n = np.einsum("...i,...i->...", grad_f, grad_f)
    hf2 = _sym_inner(hess_f6, hess_f6)
    c = _quad_form(hess_f6, grad_f)
    q = n * n * hf2 - c * c
    return q <= EPS * n * n * hf2


def fixed_degenerate_gradient(grad_f):
    """Fixed-side test for the gradient baseline: exactly vanishing gradient."""
    return ~np.any(grad_f != 0, axis=-1)


def hessian_similarity_batch(grad_f, hess_f6, hess_m6):
    """Hessian similarity for arrays of points.

    Inputs are (..., 3) gradients and (..., 6) packed Hessians (xx, yy, zz,
    xy, xz, yz). Returns ``(s, valid)``; ``s`` is 0 where invalid.

    Uses the projection form ``cos^2(a) + (cos(b) - cos(a)cos(g))^2 / sin^2(g)``,
    which is algebraically the closed form but keeps every term non-negative,
    so rounding cannot push ``s`` below zero near the degeneracy threshold.
    """
    grad_f = np.asarray(grad_f, dtype=np.float64)
    hess_f6 = np.asarray(hess_f6, dtype=np.float64)
    hess_m6 = np.asarray(hess_m6, dtype=np.float64)
    n = np.einsum("...i,...i->...", grad_f, grad_f)
    hf2 = _sym_inner(hess_f6, hess_f6)
    hm2 = _sym_inner(hess_m6, hess_m6)
    a = _sym_inner(hess_m6, hess_f6)
    b = _quad_form(hess_m6, grad_f)
    c = _quad_form(hess_f6, grad_f)
    q = n * n * hf2 - c * c
    valid = (q > EPS * n * n * hf2) & (hm2 > EPS * np.maximum(hf2, n * n))
    with np.errstate(divide="ignore", invalid="ignore"):
        nm, nf = np.sqrt(hm2), np.sqrt(hf2)
        cos_a = a / (nm * nf)
        cos_b = b / (nm * n)
        cos_g = c / (nf * n)
        sin2_g = q / (n * n * hf2)
        s = cos_a * cos_a + (cos_b - cos_a * cos_g) ** 2 / sin2_g
    s = np.where(valid, np.clip(s, 0.0, 1.0), 0.0)
    return s, valid


def gradient_alignment_batch(grad_f, grad_m):
    """Vectorised gradient orientation alignment; returns ``(s, valid)``."""
    return gradient_alignment_arrays(grad_f, grad_m)
