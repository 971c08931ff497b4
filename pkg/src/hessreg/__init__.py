"""Multimodal affine registration with a Hessian-based similarity metric."""

__version__ = "0.1.0"

from .derivatives import DerivativeField, compute_derivative_field, make_kernel
from .errors import (
    DataError,
    FormatError,
    GeometryError,
    HessregError,
    OptimizationError,
    ParameterError,
    PreprocessingError,
)
from .evaluation import bias_robustness_delta, compute_mtre, similarity_map
from .metrics import (
    PointwiseInputs,
    SimilarityValue,
    gradient_orientation_alignment,
    hessian_similarity_angle_form,
    hessian_similarity_closed_form,
    hessian_similarity_oracle,
)
from .optimizer import DEConfig, OptimizationTrace, minimize
from .registration import RegistrationConfig, cost, preprocess, register
from .synthesis import apply_bias_field, synthesize_pair
from .transform import AffineParams, AffineTransform, build_transform, invert, transport_hessian
from .volume_io import LandmarkSet, Volume, load_landmarks, load_volume, save_volume
