"""Sampled affine registration driven by a pointwise similarity metric.

Fixed-image derivatives are evaluated once at N random voxels. The moving
image's gradient/Hessian fields are also computed once; for every candidate
deformation P the sample locations are mapped through P^-1, the moving
field is trilinearly interpolated there, and its derivatives are carried
into the fixed frame with the Jacobian of P. The cost is the negated mean
similarity over usable samples.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .derivatives import DerivativeField, compute_derivative_field
from .errors import ParameterError, PreprocessingError
from .metrics import (
    fixed_degenerate_gradient,
    fixed_degenerate_hessian,
    gradient_alignment_batch,
    hessian_similarity_batch,
)
from .optimizer import DEConfig, OptimizationTrace, minimize
from .transform import (
    IDENTITY_PARAMS,
    AffineTransform,
    build_transform,
    invert,
    transport_hessian6,
    trilinear,
)
from .volume_io import Volume, normalize_intensities

log = logging.getLogger(__name__)

METRICS = ("hessian", "goa")


@dataclass
class RegistrationConfig:
    sigma_mm: float = 1.5
    num_samples: int = 5000
    metric: str = "hessian"
    max_translation_mm: float = 10.0
    max_rotation_deg: float = 5.0
    max_shear: float = 0.05
    max_scale_change: float = 0.05
    de: DEConfig = field(default_factory=DEConfig)
    sample_margin_mm: float = 0.0
    seed: int = 0
    min_valid_fraction: float = 0.25
    normalize: bool = True
    workers: int = 1

    def validate(self) -> None:
        if self.metric not in METRICS:
            raise ParameterError(f"metric must be one of {METRICS}, got {self.metric!r}")
        if self.num_samples < 100:
            raise ParameterError("num_samples must be >= 100")
        if not self.sigma_mm > 0:
            raise ParameterError("sigma_mm must be positive")
        bounds = (self.max_translation_mm, self.max_rotation_deg, self.max_shear, self.max_scale_change)
        if not all(b > 0 for b in bounds):
            raise ParameterError("all search bounds must be positive")
        if self.max_scale_change >= 1:
            raise ParameterError("max_scale_change must be < 1")
        if not 0 <= self.min_valid_fraction <= 1:
            raise ParameterError("min_valid_fraction must be in [0, 1]")
        if self.sample_margin_mm < 0:
            raise ParameterError("sample_margin_mm must be >= 0")

    def bounds(self) -> np.ndarray:
        t, r, s, k = (
            self.max_translation_mm,
            self.max_rotation_deg,
            self.max_shear,
            self.max_scale_change,
        )
        return np.array(
            [(-t, t)] * 3 + [(-r, r)] * 3 + [(-s, s)] * 3 + [(1 - k, 1 + k)] * 3,
            dtype=np.float64,
        )


@dataclass(frozen=True, eq=False)
class SampleSet:
    points: np.ndarray  # (N, 3) world mm
    grad_f: np.ndarray  # (N, 3)
    hess_f: np.ndarray  # (N, 6) xx, yy, zz, xy, xz, yz
    degenerate: np.ndarray  # (N,) bool

    def __len__(self):
        return len(self.points)


@dataclass(eq=False)
class PreprocessedState:
    samples: SampleSet
    moving_field: DerivativeField
    center: np.ndarray
    metric: str
    min_valid: float
    # F-valid subset, cached for the cost loop
    _pts: np.ndarray = field(init=False, repr=False)
    _gf: np.ndarray = field(init=False, repr=False)
    _hf: np.ndarray = field(init=False, repr=False)
    _moving: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        ok = ~self.samples.degenerate
        self._pts = self.samples.points[ok]
        self._gf = self.samples.grad_f[ok]
        self._hf = self.samples.hess_f[ok]
        src = self.moving_field.hess if self.metric == "hessian" else self.moving_field.grad
        self._moving = np.ascontiguousarray(src)


def _sample_voxels(fixed: Volume, n: int, margin_vox, rng) -> np.ndarray:
    lo = np.asarray(margin_vox)
    hi = np.asarray(fixed.dims) - 1 - lo
    if np.any(hi < lo):
        raise PreprocessingError("sampling margin leaves no voxels in the fixed image")
    extent = hi - lo + 1
    total = int(np.prod(extent))
    flat = rng.choice(total, size=n, replace=total < n)
    flat.sort()
    return np.stack(np.unravel_index(flat, tuple(extent)), axis=1) + lo


def preprocess(fixed: Volume, moving: Volume, cfg: RegistrationConfig) -> PreprocessedState:
    """Derivative fields for both images and the fixed-image sample set."""
    cfg.validate()
    if cfg.normalize:
        fixed, moving = normalize_intensities(fixed), normalize_intensities(moving)
    fixed_field = compute_derivative_field(fixed, cfg.sigma_mm, workers=cfg.workers)
    moving_field = compute_derivative_field(moving, cfg.sigma_mm, workers=cfg.workers)

    margin = [
        max(r, int(math.ceil(cfg.sample_margin_mm / s)))
        for r, s in zip(fixed_field.kernel_radius(), fixed.spacing)
    ]
    rng = np.random.default_rng(cfg.seed)
    ijk = _sample_voxels(fixed, cfg.num_samples, margin, rng)
    i, j, k = ijk.T
    grad_f = fixed_field.grad[i, j, k]
    hess_f = fixed_field.hess[i, j, k]
    if cfg.metric == "hessian":
        degenerate = fixed_degenerate_hessian(grad_f, hess_f)
    else:
        degenerate = fixed_degenerate_gradient(grad_f)
    n_ok = int(np.count_nonzero(~degenerate))
    if n_ok < cfg.min_valid_fraction * cfg.num_samples:
        raise PreprocessingError(
            f"only {n_ok} of {cfg.num_samples} fixed-image samples are usable "
            f"(need {cfg.min_valid_fraction:.0%}); image too flat or masked?"
        )
    samples = SampleSet(fixed.voxel_to_world(ijk), grad_f, hess_f, degenerate)
    return PreprocessedState(
        samples, moving_field, fixed.center(), cfg.metric, cfg.min_valid_fraction * cfg.num_samples
    )


def evaluate_similarity(params, state: PreprocessedState):
    """Per-sample similarity of the F-valid samples under deformation ``params``.

    Returns ``(s, valid)`` arrays; ``valid`` is False for samples mapped
    outside the moving grid or where the metric is undefined.
    """
    p = build_transform(params, state.center)
    q = invert(p)
    jinv = q.linear  # inverse Jacobian of p
    mf = state.moving_field
    vals, inside = trilinear(state._moving, mf.dims, mf.spacing, mf.origin, q(state._pts))
    if state.metric == "hessian":
        s, ok = hessian_similarity_batch(state._gf, state._hf, transport_hessian6(vals, jinv))
    else:
        s, ok = gradient_alignment_batch(state._gf, vals @ jinv)
    return s, ok & inside


def cost(params, state: PreprocessedState) -> float:
    """Negated mean similarity over usable samples; +inf if too few remain."""
    try:
        s, ok = evaluate_similarity(params, state)
    except ParameterError:
        return math.inf
    n = int(np.count_nonzero(ok))
    if n == 0 or n < state.min_valid:
        return math.inf
    return -float(np.mean(s[ok]))


class RegistrationResult(NamedTuple):
    transform: AffineTransform  # fixed world -> moving world
    trace: OptimizationTrace
    preprocess_seconds: float
    optimize_seconds: float


def deformation_to_transform(params, center) -> AffineTransform:
    """Fixed-to-moving mapping for a deformation parameter vector."""
    return invert(build_transform(params, center))


def register(fixed: Volume, moving: Volume, cfg: RegistrationConfig | None = None) -> RegistrationResult:
    """Affine registration of ``moving`` onto ``fixed``.

    The returned transform maps fixed-image world coordinates to the
    corresponding moving-image world coordinates.
    """
    cfg = cfg or RegistrationConfig()
    t0 = time.perf_counter()
    state = preprocess(fixed, moving, cfg)
    t1 = time.perf_counter()
    de = DEConfig(
        bounds=cfg.bounds(),
        population_size=cfg.de.population_size,
        max_iterations=cfg.de.max_iterations,
        crossover_prob=cfg.de.crossover_prob,
        weight_range=cfg.de.weight_range,
        termination_ratio=cfg.de.termination_ratio,
        seed=cfg.de.seed,
        seed_initial=cfg.de.seed_initial,
        initial=IDENTITY_PARAMS,
        workers=cfg.workers,
    )
    trace = minimize(lambda x: cost(x, state), de)
    t2 = time.perf_counter()
    log.info(
        "registration: %d evaluations, %d iterations (%s), best cost %.6f",
        len(trace), trace.n_iterations, trace.termination_reason, trace.best_cost,
    )
    return RegistrationResult(
        deformation_to_transform(trace.best_vector, state.center), trace, t1 - t0, t2 - t1
    )
