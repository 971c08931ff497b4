"""Scalar volumes and landmark sets with physical (mm) geometry.

Two on-disk volume formats are supported:

* a minimal NIfTI-1 subset (single-file ``.nii``, uncompressed, axis-aligned),
* a raw float32 blob (``<name>.raw``) with a small JSON sidecar (``<name>.json``).

Arrays are held as ``data[i, j, k]`` with ``i`` running along x. On disk both
formats store x fastest, i.e. Fortran order for this indexing.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError, GeometryError

MIN_DIM = 8

_NIFTI_DTYPES = {
    2: np.dtype("u1"),
    4: np.dtype("i2"),
    16: np.dtype("f4"),
    64: np.dtype("f8"),
}

RAW_FORMAT_TAG = "hessreg-raw-1"


@dataclass(frozen=True, eq=False)
class Volume:
    """Immutable scalar 3-D grid.

    Parameters
    ----------
    data : array_like, shape (nx, ny, nz)
        Intensities; stored as a read-only float64 copy.
    spacing : 3 floats
        Voxel size in mm along x, y, z.
    origin : 3 floats
        World position (mm) of voxel (0, 0, 0).
    """

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64, copy=True)
        if arr.ndim != 3:
            raise GeometryError(f"volume must be 3-D, got shape {arr.shape}")
        if min(arr.shape) < MIN_DIM:
            raise GeometryError(f"every axis needs >= {MIN_DIM} voxels, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise DataError("volume contains non-finite values")
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        if len(spacing) != 3 or len(origin) != 3:
            raise GeometryError("spacing and origin need 3 components")
        if not all(np.isfinite(s) and s > 0 for s in spacing):
            raise GeometryError(f"spacing must be positive, got {spacing}")
        if not all(np.isfinite(o) for o in origin):
            raise GeometryError(f"origin must be finite, got {origin}")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @property
    def dims(self) -> tuple:
        return tuple(int(n) for n in self.data.shape)

    def with_data(self, data) -> "Volume":
        """Same geometry, new intensities."""
        return Volume(data, self.spacing, self.origin)

    def same_grid(self, other: "Volume") -> bool:
        return (
            self.dims == other.dims
            and np.allclose(self.spacing, other.spacing, rtol=0, atol=1e-9)
            and np.allclose(self.origin, other.origin, rtol=0, atol=1e-9)
        )

    def world_to_voxel(self, x_world) -> np.ndarray:
        x = np.asarray(x_world, dtype=np.float64)
        return (x - np.asarray(self.origin)) / np.asarray(self.spacing)

    def voxel_to_world(self, ijk) -> np.ndarray:
        u = np.asarray(ijk, dtype=np.float64)
        return u * np.asarray(self.spacing) + np.asarray(self.origin)

    def center(self) -> np.ndarray:
        """World coordinate of the geometric grid center."""
        return self.voxel_to_world((np.asarray(self.dims) - 1) / 2.0)

    def world_axes(self):
        """Per-axis world coordinate vectors (for ``np.meshgrid(..., indexing='ij')``)."""
        return tuple(
            self.origin[a] + self.spacing[a] * np.arange(self.dims[a]) for a in range(3)
        )


@dataclass(frozen=True)
class LandmarkSet:
    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    label: str = ""

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64, copy=True).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise DataError("landmarks must be finite")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return len(self.points)


def normalize_intensities(v: Volume) -> Volume:
    """Zero mean, unit variance. A constant volume is only mean-shifted."""
    d = v.data - v.data.mean()
    sd = d.std()
    if sd > 0:
        d = d / sd
    return v.with_data(d)


# --------------------------------------------------------------------- NIfTI-1


def _reduce_affine(mat: np.ndarray, offset: np.ndarray, dims):
    """Turn an axis-aligned 3x3 voxel-to-world matrix into spacing/origin/flips."""
    diag = np.diag(mat)
    off = mat - np.diag(diag)
    scale = np.max(np.abs(diag)) if diag.size else 1.0
    if np.any(np.abs(diag) <= 0) or np.max(np.abs(off)) > 1e-6 * scale:
        raise GeometryError("oblique or permuted orientation is not supported")
    spacing = np.abs(diag)
    flips = diag < 0
    origin = offset.astype(np.float64).copy()
    for a in range(3):
        if flips[a]:
            origin[a] = offset[a] + diag[a] * (dims[a] - 1)
    return spacing, origin, flips


def _quaternion_matrix(b, c, d, qfac, pixdim):
    a2 = 1.0 - (b * b + c * c + d * d)
    a = np.sqrt(a2) if a2 > 0 else 0.0
    r = np.array(
        [
            [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
            [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
            [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - c * c - b * b],
        ]
    )
    return r @ np.diag([pixdim[0], pixdim[1], qfac * pixdim[2]])


def _read_nifti(path: Path) -> tuple:
    raw = path.read_bytes()
    if len(raw) < 348:
        raise FormatError(f"{path}: truncated NIfTI header ({len(raw)} bytes)")
    for endian in "<>":
        if struct.unpack(endian + "i", raw[:4])[0] == 348:
            break
    else:
        raise FormatError(f"{path}: sizeof_hdr is not 348")
    magic = raw[344:348]
    if magic != b"n+1\x00":
        raise FormatError(f"{path}: unsupported NIfTI magic {magic!r} (need single-file n+1)")

    def unpack(fmt, offset):
        return struct.unpack_from(endian + fmt, raw, offset)

    dim = unpack("8h", 40)
    ndim = dim[0]
    if ndim < 3 or ndim > 7 or any(n != 1 for n in dim[4 : ndim + 1]):
        raise FormatError(f"{path}: only 3-D scalar volumes are supported (dim={dim})")
    dims = tuple(int(n) for n in dim[1:4])
    if min(dims) < MIN_DIM:
        raise GeometryError(f"{path}: every axis needs >= {MIN_DIM} voxels, got {dims}")
    datatype = unpack("h", 70)[0]
    if datatype not in _NIFTI_DTYPES:
        raise FormatError(f"{path}: unsupported NIfTI datatype code {datatype}")
    pixdim = unpack("8f", 76)
    vox_offset = int(unpack("f", 108)[0])
    slope, inter = unpack("2f", 112)
    qform_code, sform_code = unpack("2h", 252)

    dtype = _NIFTI_DTYPES[datatype].newbyteorder(endian)
    count = dims[0] * dims[1] * dims[2]
    nbytes = count * dtype.itemsize
    if vox_offset < 348 or len(raw) < vox_offset + nbytes:
        raise FormatError(f"{path}: file too short for declared image data")
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=vox_offset)
    data = data.astype(np.float64).reshape(dims, order="F")
    if slope != 0 and np.isfinite(slope):
        data = data * float(slope) + float(inter)

    if sform_code > 0:
        srow = np.array(unpack("12f", 280), dtype=np.float64).reshape(3, 4)
        mat, offset = srow[:, :3], srow[:, 3]
    elif qform_code > 0:
        b, c, d, qx, qy, qz = unpack("6f", 256)
        qfac = -1.0 if pixdim[0] < 0 else 1.0
        mat = _quaternion_matrix(b, c, d, qfac, pixdim[1:4])
        offset = np.array([qx, qy, qz], dtype=np.float64)
    else:
        mat = np.diag(np.asarray(pixdim[1:4], dtype=np.float64))
        offset = np.zeros(3)
    spacing, origin, flips = _reduce_affine(mat, offset, dims)
    for a in range(3):
        if flips[a]:
            data = np.flip(data, axis=a)
    return data, spacing, origin


def _write_nifti(v: Volume, path: Path) -> None:
    hdr = bytearray(352)
    struct.pack_into("<i", hdr, 0, 348)
    struct.pack_into("<8h", hdr, 40, 3, *v.dims, 1, 1, 1, 1)
    struct.pack_into("<3h", hdr, 70, 16, 32, 0)
    struct.pack_into("<8f", hdr, 76, 1.0, *v.spacing, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<3f", hdr, 108, 352.0, 1.0, 0.0)
    hdr[123] = 2  # xyzt_units: mm
    struct.pack_into("<2h", hdr, 252, 1, 1)
    struct.pack_into("<6f", hdr, 256, 0.0, 0.0, 0.0, *v.origin)
    sx, sy, sz = v.spacing
    ox, oy, oz = v.origin
    struct.pack_into("<12f", hdr, 280, sx, 0, 0, ox, 0, sy, 0, oy, 0, 0, sz, oz)
    hdr[344:348] = b"n+1\x00"
    payload = v.data.astype("<f4").tobytes(order="F")
    path.write_bytes(bytes(hdr) + payload)


# ------------------------------------------------------------------ raw+sidecar


def _raw_paths(path: Path):
    base = path.with_suffix("")
    return base.with_suffix(".raw"), base.with_suffix(".json")


def _read_raw(path: Path) -> tuple:
    raw_path, side_path = _raw_paths(path)
    try:
        meta = json.loads(side_path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{side_path}: malformed sidecar ({exc})") from None
    try:
        dims = tuple(int(n) for n in meta["dims"])
        spacing = [float(s) for s in meta["spacing"]]
        origin = [float(o) for o in meta["origin"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{side_path}: missing or invalid field ({exc})") from None
    if meta.get("dtype", "float32-le") != "float32-le":
        raise FormatError(f"{side_path}: unsupported dtype {meta.get('dtype')!r}")
    if len(dims) != 3:
        raise FormatError(f"{side_path}: dims must have 3 entries")
    if min(dims) < MIN_DIM:
        raise GeometryError(f"{side_path}: every axis needs >= {MIN_DIM} voxels, got {dims}")
    blob = raw_path.read_bytes()
    count = dims[0] * dims[1] * dims[2]
    if len(blob) != 4 * count:
        raise FormatError(f"{raw_path}: expected {4 * count} bytes, found {len(blob)}")
    data = np.frombuffer(blob, dtype="<f4").astype(np.float64).reshape(dims, order="F")
    return data, spacing, origin


def _write_raw(v: Volume, path: Path) -> None:
    raw_path, side_path = _raw_paths(path)
    meta = {
        "format": RAW_FORMAT_TAG,
        "dtype": "float32-le",
        "dims": list(v.dims),
        "spacing": list(v.spacing),
        "origin": list(v.origin),
    }
    lines = ",\n".join(f"  {json.dumps(k)}: {json.dumps(val)}" for k, val in meta.items())
    raw_path.write_bytes(v.data.astype("<f4").tobytes(order="F"))
    side_path.write_text("{\n" + lines + "\n}\n")


def _kind(path: Path) -> str:
    suffix = path.suffix.lower()
    if suffix == ".nii":
        return "nifti"
    if suffix in (".raw", ".json"):
        return "raw"
    if suffix == ".gz":
        raise FormatError(f"{path}: compressed NIfTI is not supported")
    raise FormatError(f"{path}: unknown volume format (use .nii, .raw or .json)")


def load_volume(path, normalize: bool = False) -> Volume:
    """Read a volume from ``.nii`` or raw+sidecar and convert it to float64.

    ``normalize=True`` rescales intensities to zero mean and unit variance.
    """
    path = Path(path)
    if _kind(path) == "nifti":
        data, spacing, origin = _read_nifti(path)
    else:
        data, spacing, origin = _read_raw(path)
    v = Volume(data, tuple(spacing), tuple(origin))
    return normalize_intensities(v) if normalize else v


def save_volume(v: Volume, path) -> None:
    """Write ``v`` as float32. Geometry is kept exactly; OSError on I/O failure."""
    if not isinstance(v, Volume):
        raise DataError("save_volume expects a Volume")
    if not np.all(np.isfinite(v.data)):
        raise DataError("refusing to save non-finite data")
    path = Path(path)
    if _kind(path) == "nifti":
        _write_nifti(v, path)
    else:
        _write_raw(v, path)


# -------------------------------------------------------------------- landmarks


def load_landmarks(path, label: str | None = None) -> LandmarkSet:
    """Plain text, one ``x y z`` triple per line; ``#`` starts a comment."""
    path = Path(path)
    pts = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.replace(",", " ").split()
        if len(parts) != 3:
            raise FormatError(f"{path}:{lineno}: expected 3 coordinates, got {len(parts)}")
        try:
            pts.append([float(p) for p in parts])
        except ValueError:
            raise FormatError(f"{path}:{lineno}: non-numeric coordinate") from None
    return LandmarkSet(np.array(pts).reshape(-1, 3), label if label is not None else path.stem)


def save_landmarks(lms: LandmarkSet, path) -> None:
    lines = [f"# {lms.label}" if lms.label else "# landmarks"]
    lines += [" ".join(repr(float(c)) for c in p) for p in lms.points]
    Path(path).write_text("\n".join(lines) + "\n")
