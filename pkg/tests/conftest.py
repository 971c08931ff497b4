import numpy as np
import pytest

from hessreg.synthesis import synthesize_pair


@pytest.fixture(scope="session")
def blob_pair():
    """Aligned, noise-free phantom pair M = g(F) on a 64^3 grid at 1 mm."""
    return synthesize_pair("gaussian_blobs", (64, 64, 64), (1.0, 1.0, 1.0), seed=7)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def random_symmetric(rng, n):
    a = rng.normal(size=(n, 3, 3))
    return 0.5 * (a + np.swapaxes(a, -1, -2))


# deformation realigning the moving image onto the fixed one, inside the default search box
KNOWN_WARP = np.array([4.0, -3.0, 2.0, 2.0, -1.0, 3.0, 0.02, -0.01, 0.015, 1.02, 0.98, 1.01])


def warped_instance(seed, noise=0.01, bias=0.3, dims=(64, 64, 64)):
    """Phantom pair with M = g(F o P) + noise, both images bias-corrupted.

    Returns ``(fixed, moving, fixed_landmarks, moving_landmarks)``.
    """
    from hessreg.synthesis import apply_bias_field
    from hessreg.transform import build_transform

    center = (np.asarray(dims) - 1) / 2.0
    pair = synthesize_pair(
        "gaussian_blobs", dims, (1.0, 1.0, 1.0), seed, noise=noise,
        deformation=build_transform(KNOWN_WARP, center),
    )
    fixed = apply_bias_field(pair.fixed, bias, (seed, 2))
    moving = apply_bias_field(pair.moving, bias, (seed, 3))
    return fixed, moving, pair.fixed_landmarks, pair.moving_landmarks
