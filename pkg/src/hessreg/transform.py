"""Affine transforms, trilinear interpolation and Hessian transport.

A deformation is parameterised by 12 numbers::

    [tx, ty, tz,  rx, ry, rz,  s_xy, s_xz, s_yz,  kx, ky, kz]

translation (mm), Euler angles (degrees, composed Rz @ Ry @ Rx), the upper
entries of a unit upper-triangular shear matrix, and diagonal scales. The
linear part is ``A = R @ Sh @ Sc`` and a point maps as
``x -> A (x - center) + center + t``.

For a linear map with Jacobian ``J`` the Hessian of the deformed image is
``J^-T H J^-1`` and its gradient ``J^-T g``; the second-derivative term that
appears for non-linear maps vanishes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .derivatives import DerivativeField, hess6_to_matrix, matrix_to_hess6
from .errors import FormatError, ParameterError
from .volume_io import Volume

N_PARAMS = 12
PARAM_NAMES = (
    "tx", "ty", "tz",
    "rx", "ry", "rz",
    "shear_xy", "shear_xz", "shear_yz",
    "scale_x", "scale_y", "scale_z",
)
IDENTITY_PARAMS = np.array([0, 0, 0, 0, 0, 0, 0, 0, 0, 1, 1, 1], dtype=np.float64)
_DET_MIN = 1e-9


@dataclass(frozen=True)
class AffineParams:
    translation: tuple = (0.0, 0.0, 0.0)
    rotation: tuple = (0.0, 0.0, 0.0)
    shear: tuple = (0.0, 0.0, 0.0)
    scale: tuple = (1.0, 1.0, 1.0)

    @classmethod
    def from_vector(cls, vec) -> "AffineParams":
        v = np.asarray(vec, dtype=np.float64).reshape(N_PARAMS)
        return cls(tuple(v[0:3]), tuple(v[3:6]), tuple(v[6:9]), tuple(v[9:12]))

    def to_vector(self) -> np.ndarray:
        return np.array(
            [*self.translation, *self.rotation, *self.shear, *self.scale], dtype=np.float64
        )


def rotation_matrix(angles_deg) -> np.ndarray:
    rx, ry, rz = np.deg2rad(np.asarray(angles_deg, dtype=np.float64))
    cx, sx, cy, sy, cz, sz = np.cos(rx), np.sin(rx), np.cos(ry), np.sin(ry), np.cos(rz), np.sin(rz)
    r_x = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    r_y = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    r_z = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return r_z @ r_y @ r_x


def linear_part(p: AffineParams) -> np.ndarray:
    sxy, sxz, syz = p.shear
    shear = np.array([[1.0, sxy, sxz], [0.0, 1.0, syz], [0.0, 0.0, 1.0]])
    return rotation_matrix(p.rotation) @ shear @ np.diag(p.scale)


@dataclass(frozen=True, eq=False)
class AffineTransform:
    """``x -> linear @ x + offset`` in world mm.

    ``params``/``center`` record how the transform was built; when
    ``params_inverted`` is set the transform is the inverse of the one
    those parameters describe.
    """

    linear: np.ndarray
    offset: np.ndarray
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    params: AffineParams | None = None
    params_inverted: bool = False

    def __post_init__(self):
        lin = np.array(self.linear, dtype=np.float64).reshape(3, 3)
        off = np.array(self.offset, dtype=np.float64).reshape(3)
        ctr = np.array(self.center, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(lin)) and np.all(np.isfinite(off))):
            raise ParameterError("transform entries must be finite")
        for a in (lin, off, ctr):
            a.setflags(write=False)
        object.__setattr__(self, "linear", lin)
        object.__setattr__(self, "offset", off)
        object.__setattr__(self, "center", ctr)

    @classmethod
    def identity(cls, center=(0.0, 0.0, 0.0)) -> "AffineTransform":
        return cls(np.eye(3), np.zeros(3), center)

    @property
    def jacobian(self) -> np.ndarray:
        return self.linear

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return x @ self.linear.T + self.offset

    def matrix34(self) -> np.ndarray:
        return np.hstack([self.linear, self.offset[:, None]])


def build_transform(p, center=(0.0, 0.0, 0.0)) -> AffineTransform:
    """Affine transform from parameters (an ``AffineParams`` or a 12-vector)."""
    if not isinstance(p, AffineParams):
        p = AffineParams.from_vector(p)
    if not all(s > 0 for s in p.scale):
        raise ParameterError(f"scale factors must be positive, got {p.scale}")
    a = linear_part(p)
    if abs(np.linalg.det(a)) <= _DET_MIN:
        raise ParameterError("linear part is not invertible")
    c = np.asarray(center, dtype=np.float64).reshape(3)
    offset = c + np.asarray(p.translation) - a @ c
    return AffineTransform(a, offset, c, p, False)


def invert(t: AffineTransform) -> AffineTransform:
    if abs(np.linalg.det(t.linear)) <= _DET_MIN:
        raise ParameterError("cannot invert a singular transform")
    inv = np.linalg.inv(t.linear)
    return AffineTransform(inv, -inv @ t.offset, t.center, t.params, not t.params_inverted)


def compose(t1: AffineTransform, t2: AffineTransform) -> AffineTransform:
    """``t1 o t2``: apply ``t2`` first."""
    return AffineTransform(t1.linear @ t2.linear, t1.linear @ t2.offset + t1.offset, t2.center)


def transport_hessian(h, t: AffineTransform) -> np.ndarray:
    """Hessian in the deformed frame: ``J^-T H J^-1`` with ``J`` the Jacobian of ``t``.

    Accepts a single 3x3 matrix or a stack (..., 3, 3).
    """
    if abs(np.linalg.det(t.linear)) <= _DET_MIN:
        raise ParameterError("singular Jacobian")
    jinv = np.linalg.inv(t.linear)
    h = np.asarray(h, dtype=np.float64)
    out = np.einsum("ki,...kl,lj->...ij", jinv, h, jinv)
    return 0.5 * (out + np.swapaxes(out, -1, -2))


def hessian_transport_operator(jinv: np.ndarray) -> np.ndarray:
    """6x6 matrix ``T`` with ``pack(jinv^T H jinv) == T @ pack(H)``.

    The congruence is linear in the six unique components, so for many
    points it is cheaper to apply this matrix than to form 3x3 products.
    """
    basis = hess6_to_matrix(np.eye(6))
    moved = np.einsum("ki,ckl,lj->cij", jinv, basis, jinv)
    return matrix_to_hess6(moved).T


def transport_hessian6(h6, jinv: np.ndarray) -> np.ndarray:
    """Packed-component variant for the registration inner loop.

    ``jinv`` is the inverse Jacobian; takes and returns (..., 6) components.
    """
    return np.asarray(h6, dtype=np.float64) @ hessian_transport_operator(jinv).T


def transport_gradient(g, t: AffineTransform) -> np.ndarray:
    """Gradient in the deformed frame: ``J^-T g``."""
    jinv = np.linalg.inv(t.linear)
    return np.asarray(g, dtype=np.float64) @ jinv


# ---------------------------------------------------------------- interpolation


def _trilinear_setup(dims, spacing, origin, points):
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    u = (pts - np.asarray(origin)) / np.asarray(spacing)
    hi = np.asarray(dims, dtype=np.float64) - 1.0
    inside = np.all((u >= 0.0) & (u <= hi), axis=1)
    u = np.where(inside[:, None], u, 0.0)
    i0 = np.minimum(np.floor(u), hi - 1.0).astype(np.intp)
    frac = u - i0
    return i0, frac, inside


def trilinear(array: np.ndarray, dims, spacing, origin, points):
    """Trilinear interpolation of ``array`` (shape dims + trailing) at world points.

    Returns ``(values, inside)``. Points whose enclosing cell is not fully
    inside the grid get ``inside=False`` and value 0; nothing is extrapolated.
    """
    i0, f, inside = _trilinear_setup(dims, spacing, origin, points)
    nx, ny, nz = (int(n) for n in dims)
    flat = np.asarray(array).reshape(nx * ny * nz, -1)
    base = (i0[:, 0] * ny + i0[:, 1]) * nz + i0[:, 2]
    fx, fy, fz = f[:, 0:1], f[:, 1:2], f[:, 2:3]
    sx, sy = ny * nz, nz

    def at(off):
        return flat.take(base + off, axis=0)

    c00 = at(0) * (1 - fx) + at(sx) * fx
    c10 = at(sy) * (1 - fx) + at(sx + sy) * fx
    c01 = at(1) * (1 - fx) + at(sx + 1) * fx
    c11 = at(sy + 1) * (1 - fx) + at(sx + sy + 1) * fx
    c0 = c00 * (1 - fy) + c10 * fy
    c1 = c01 * (1 - fy) + c11 * fy
    vals = c0 * (1 - fz) + c1 * fz
    vals[~inside] = 0.0
    return vals.reshape((len(vals),) + np.asarray(array).shape[3:]), inside


def interpolate_scalar(v: Volume, x_world):
    """Value at one world point, or ``None`` when out of bounds."""
    vals, inside = trilinear(v.data, v.dims, v.spacing, v.origin, x_world)
    return float(vals[0]) if inside[0] else None


def interpolate_scalar_points(v: Volume, points):
    return trilinear(v.data, v.dims, v.spacing, v.origin, points)


def interpolate_hessian(f: DerivativeField, x_world):
    """Symmetric 3x3 Hessian at one world point, or ``None`` when out of bounds."""
    vals, inside = trilinear(f.hess, f.dims, f.spacing, f.origin, x_world)
    return hess6_to_matrix(vals[0]) if inside[0] else None


def resample(v: Volume, t: AffineTransform, reference: Volume | None = None, fill: float = 0.0) -> Volume:
    """Sample ``v`` at ``t(x)`` for every voxel ``x`` of ``reference`` (default: ``v``'s grid)."""
    ref = reference if reference is not None else v
    grids = np.meshgrid(*ref.world_axes(), indexing="ij")
    pts = np.stack([g.ravel(order="C") for g in grids], axis=1)
    vals, inside = trilinear(v.data, v.dims, v.spacing, v.origin, t(pts))
    vals[~inside] = fill
    return ref.with_data(vals.reshape(ref.dims))


# ---------------------------------------------------------------- serialization


def _fmt(values) -> str:
    return " ".join(repr(float(x)) for x in values)


def save_transform(t: AffineTransform, path) -> None:
    """Text format: optional ``params``/``params_inverted`` lines, ``center``,
    then ``matrix`` followed by three rows of the 3x4 matrix."""
    lines = ["# hessreg affine transform (maps x -> matrix[:, :3] @ x + matrix[:, 3], mm)"]
    if t.params is not None:
        lines.append("params: " + _fmt(t.params.to_vector()))
        lines.append(f"params_inverted: {str(t.params_inverted).lower()}")
    lines.append("center: " + _fmt(t.center))
    lines.append("matrix:")
    lines += [_fmt(row) for row in t.matrix34()]
    Path(path).write_text("\n".join(lines) + "\n")


def load_transform(path) -> AffineTransform:
    path = Path(path)
    params, inverted, center, rows = None, False, np.zeros(3), []
    in_matrix = False
    try:
        for line in path.read_text().splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if in_matrix:
                rows.append([float(x) for x in line.split()])
                continue
            key, _, val = line.partition(":")
            key = key.strip()
            if key == "params":
                params = AffineParams.from_vector([float(x) for x in val.split()])
            elif key == "params_inverted":
                inverted = val.strip().lower() == "true"
            elif key == "center":
                center = np.array([float(x) for x in val.split()])
            elif key == "matrix":
                in_matrix = True
            else:
                raise FormatError(f"{path}: unknown key {key!r}")
        m = np.array(rows, dtype=np.float64)
        if m.shape != (3, 4):
            raise FormatError(f"{path}: matrix must be 3x4, got {m.shape}")
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None
    return AffineTransform(m[:, :3], m[:, 3], center, params, inverted)
