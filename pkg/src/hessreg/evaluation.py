"""Accuracy and behaviour checks: mTRE, similarity maps, bias robustness, scatter data."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .derivatives import compute_derivative_field
from .errors import DataError, GeometryError
from .metrics import gradient_alignment_batch, hessian_similarity_batch
from .optimizer import OptimizationTrace
from .registration import METRICS, deformation_to_transform
from .synthesis import apply_bias_field
from .transform import AffineTransform
from .volume_io import LandmarkSet, Volume


@dataclass(frozen=True)
class TREReport:
    errors: np.ndarray
    mean: float
    min: float
    max: float

    def __str__(self):
        return f"mTRE {self.mean:.3f} mm (range {self.min:.3f}-{self.max:.3f}, n={len(self.errors)})"


def compute_mtre(fixed_lms: LandmarkSet, moving_lms: LandmarkSet, t: AffineTransform) -> TREReport:
    """Distances ``|t(fixed_i) - moving_i|`` in mm."""
    if len(fixed_lms) != len(moving_lms):
        raise DataError(f"landmark count mismatch: {len(fixed_lms)} vs {len(moving_lms)}")
    if len(fixed_lms) == 0:
        raise DataError("need at least one landmark pair")
    err = np.linalg.norm(t(fixed_lms.points) - moving_lms.points, axis=1)
    return TREReport(err, float(err.mean()), float(err.min()), float(err.max()))


@dataclass(frozen=True, eq=False)
class SimilarityMap:
    volume: Volume
    valid: np.ndarray
    metric: str
    sigma_mm: float


def similarity_map(fixed: Volume, moving: Volume, metric: str = "hessian", sigma_mm: float = 1.5) -> SimilarityMap:
    """Voxel-wise similarity of two images already on the same grid.

    Voxels within one kernel radius of the border, and voxels where the
    metric is undefined, are set to 0 and flagged invalid.
    """
    if metric not in METRICS:
        raise DataError(f"unknown metric {metric!r}")
    if not fixed.same_grid(moving):
        raise GeometryError("similarity maps need both images on the same grid")
    ff = compute_derivative_field(fixed, sigma_mm)
    mf = compute_derivative_field(moving, sigma_mm)
    if metric == "hessian":
        s, valid = hessian_similarity_batch(ff.grad, ff.hess, mf.hess)
    else:
        s, valid = gradient_alignment_batch(ff.grad, mf.grad)
    border = np.zeros(fixed.dims, dtype=bool)
    for a, r in enumerate(ff.kernel_radius()):
        sl = [slice(None)] * 3
        sl[a] = slice(0, r)
        border[tuple(sl)] = True
        sl[a] = slice(fixed.dims[a] - r, None)
        border[tuple(sl)] = True
    valid = valid & ~border
    s = np.where(valid, s, 0.0)
    return SimilarityMap(fixed.with_data(s), valid, metric, float(sigma_mm))


class BiasDelta(NamedTuple):
    delta: float
    difference: Volume  # S_corrupted - S_original
    original: SimilarityMap
    corrupted: SimilarityMap


def bias_robustness_delta(
    fixed: Volume,
    moving: Volume,
    metric: str = "hessian",
    sigma_mm: float = 1.5,
    strength: float = 0.4,
    seed: int = 0,
) -> BiasDelta:
    """Mean |S_corrupted - S_original| over voxels valid in the original map.

    Both images receive independent bias fields derived from ``seed``.
    """
    original = similarity_map(fixed, moving, metric, sigma_mm)
    fb = apply_bias_field(fixed, strength, (seed, 0))
    mb = apply_bias_field(moving, strength, (seed, 1))
    corrupted = similarity_map(fb, mb, metric, sigma_mm)
    diff = corrupted.volume.data - original.volume.data
    mask = original.valid
    delta = float(np.abs(diff[mask]).mean()) if mask.any() else 0.0
    return BiasDelta(delta, fixed.with_data(diff), original, corrupted)


def scatter_rows(trace: OptimizationTrace, fixed_lms: LandmarkSet, moving_lms: LandmarkSet, center):
    """(iteration, similarity, mTRE) for every evaluated deformation."""
    rows = []
    for it, x, c in zip(trace.iterations, trace.vectors, trace.costs):
        t = deformation_to_transform(x, center)
        rows.append((it, -c, compute_mtre(fixed_lms, moving_lms, t).mean))
    return rows


def write_scatter_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "similarity", "mtre_mm"])
        for it, s, e in rows:
            w.writerow([it, repr(float(s)), repr(float(e))])


def scatter_export(trace, fixed_lms, moving_lms, center, path=None):
    rows = scatter_rows(trace, fixed_lms, moving_lms, center)
    if path is not None:
        write_scatter_csv(rows, path)
    return rows


def write_pgm_slices(v: Volume, prefix) -> list:
    """Central axial/coronal/sagittal slices as 8-bit binary PGM, min-max windowed.

    Returns the written paths.
    """
    prefix = Path(prefix)
    d = v.data
    cx, cy, cz = (n // 2 for n in v.dims)
    slices = {
        "axial": d[:, :, cz].T,
        "coronal": d[:, cy, :].T,
        "sagittal": d[cx, :, :].T,
    }
    lo, hi = float(d.min()), float(d.max())
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    paths = []
    for name, img in slices.items():
        # row 0 at the top: flip so +y / +z points up
        img8 = np.round((img[::-1] - lo) * scale).astype(np.uint8)
        path = prefix.with_name(f"{prefix.name}_{name}.pgm")
        h, w = img8.shape
        path.write_bytes(f"P5\n{w} {h}\n255\n".encode() + img8.tobytes())
        paths.append(path)
    return paths
