import numpy as np
import pytest
from numpy.lib.stride_tricks import sliding_window_view

from hessreg.derivatives import (
    HESS_COMPONENTS,
    compute_derivative_field,
    convolve_axis,
    make_kernel,
)
from hessreg.errors import ParameterError
from hessreg.volume_io import Volume, load_volume, save_volume

_ORDERS = {"xx": (2, 0, 0), "yy": (0, 2, 0), "zz": (0, 0, 2),
           "xy": (1, 1, 0), "xz": (1, 0, 1), "yz": (0, 1, 1)}


def gaussian_blob(n, spacing, s, center=None):
    """Volume of exp(-|x-c|^2 / 2s^2), its analytic Hessian and distance map."""
    c = (n - 1) * spacing / 2.0 if center is None else center
    ax = np.arange(n) * spacing - c
    d = np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), axis=-1)
    f = np.exp(-(d**2).sum(-1) / (2 * s * s))
    hess = f[..., None, None] / s**2 * (d[..., :, None] * d[..., None, :] / s**2 - np.eye(3))
    return Volume(f, (spacing,) * 3), hess, np.linalg.norm(d, axis=-1)


@pytest.mark.parametrize("sigma", [0.3, 0.7, 1.0, 1.5, 3.0])
def test_kernel_moments(sigma):
    k0, k1, k2 = (make_kernel(o, sigma) for o in (0, 1, 2))
    i = k0.offsets()
    assert k0.radius == int(np.ceil(4 * sigma))
    assert len(k0.taps) == 2 * k0.radius + 1
    assert abs(k0.taps.sum() - 1) < 1e-12
    assert abs(k1.taps.sum()) < 1e-12 and abs(i @ k1.taps + 1) < 1e-12
    assert abs(k2.taps.sum()) < 1e-12 and abs(i**2 @ k2.taps - 2) < 1e-12


def test_kernel_sigma_too_small():
    with pytest.raises(ParameterError):
        make_kernel(0, 0.29)
    with pytest.raises(ParameterError):
        make_kernel(3, 1.0)


def test_first_derivative_of_ramp():
    f = np.arange(60, dtype=float)[None, :]
    out = convolve_axis(f, make_kernel(1, 1.5), axis=1)[0, 7:-7]
    assert np.abs(out - 1).max() < 1e-10


def test_second_derivative_of_square():
    i = np.arange(60, dtype=float)
    out = convolve_axis((i**2)[None, :], make_kernel(2, 1.5), axis=1)[0, 7:-7]
    assert np.abs(out - 2).max() < 1e-8


def test_constant_volume_gives_exact_zeros():
    v = Volume(np.full((12, 10, 14), 3.7), (0.5, 1.0, 2.0))
    d = compute_derivative_field(v, 1.0)
    assert np.all(d.grad == 0)
    assert np.all(d.hess == 0)


def test_world_ramp_in_physical_units():
    sp = (0.5, 1.0, 1.0)
    x = np.arange(40) * sp[0]
    v = Volume(np.broadcast_to(2.0 * x[:, None, None], (40, 20, 20)), sp)
    d = compute_derivative_field(v, 1.5)
    inner = (slice(13, -13), slice(7, -7), slice(7, -7))
    np.testing.assert_allclose(d.grad[inner], np.broadcast_to([2.0, 0, 0], d.grad[inner].shape), atol=1e-8)
    assert np.abs(d.hess[inner]).max() < 1e-8


def test_gaussian_blob_hessian_matches_closed_form():
    # s = 18 mm >> sigma = 1.5 mm; the residual is the smoothing bias
    # (about 2.5 sigma^2 / s^2 = 1.7 %), checked out to |x - c| < 2s.
    v, hess, r = gaussian_blob(96, 1.0, 18.0)
    d = compute_derivative_field(v, 1.5)
    h = d.hessian_matrices()
    rel = np.linalg.norm(h - hess, axis=(-2, -1)) / np.linalg.norm(hess, axis=(-2, -1))
    assert rel[r < 36.0].max() < 0.02


def _brute_force(data, spacing, sigma_mm, orders):
    """Direct 3-D convolution with the outer-product kernel."""
    ks = [make_kernel(o, sigma_mm / s) for o, s in zip(orders, spacing)]
    r = [k.radius for k in ks]
    p = np.pad(data, [(ri, ri) for ri in r], mode="symmetric")
    win = sliding_window_view(p, tuple(2 * ri + 1 for ri in r))
    # window offset a reads f[i + a - r]; convolution weights that by taps[r - a]
    out = np.einsum("ijkabc,a,b,c->ijk", win, ks[0].taps[::-1], ks[1].taps[::-1], ks[2].taps[::-1])
    return out / np.prod([s**o for s, o in zip(spacing, orders)])


def test_separable_equals_brute_force_3d(rng):
    spacing = (1.0, 0.8, 1.25)
    data = rng.normal(size=(8, 8, 8))
    v = Volume(data, spacing)
    d = compute_derivative_field(v, 1.0)
    for a, o in enumerate([(1, 0, 0), (0, 1, 0), (0, 0, 1)]):
        np.testing.assert_allclose(d.grad[..., a], _brute_force(data, spacing, 1.0, o), atol=1e-10)
    for c, name in enumerate(HESS_COMPONENTS):
        np.testing.assert_allclose(d.hess[..., c], _brute_force(data, spacing, 1.0, _ORDERS[name]), atol=1e-10)


def test_physical_units_consistent_across_resolutions():
    fine, _, _ = gaussian_blob(64, 1.0, 6.0, center=31.0)
    coarse, _, _ = gaussian_blob(32, 2.0, 6.0, center=31.0)
    df = compute_derivative_field(fine, 2.0)
    dc = compute_derivative_field(coarse, 2.0)
    inner = (slice(4, -4),) * 3
    hf, hc = df.hess[::2, ::2, ::2][inner], dc.hess[inner]
    gf, gc = df.grad[::2, ::2, ::2][inner], dc.grad[inner]
    assert np.abs(hf - hc).max() < 5e-3 * np.abs(hf).max()
    assert np.abs(gf - gc).max() < 5e-3 * np.abs(gf).max()


def test_axis_permutation_equivariance(rng):
    data = rng.normal(size=(10, 12, 14))
    d = compute_derivative_field(Volume(data), 1.0)
    dp = compute_derivative_field(Volume(np.transpose(data, (1, 2, 0))), 1.0)
    # new axes (x', y', z') = old (y, z, x)
    np.testing.assert_allclose(dp.grad, np.transpose(d.grad, (1, 2, 0, 3))[..., [1, 2, 0]], atol=1e-12)
    h = np.transpose(d.hessian_matrices(), (1, 2, 0, 3, 4))[..., [1, 2, 0], :][..., :, [1, 2, 0]]
    np.testing.assert_allclose(dp.hessian_matrices(), h, atol=1e-12)


def test_hessian_symmetric_by_construction(rng):
    d = compute_derivative_field(Volume(rng.normal(size=(9, 9, 9))), 0.8)
    h = d.hessian_matrices()
    assert np.array_equal(h, np.swapaxes(h, -1, -2))


def test_workers_do_not_change_result(rng):
    v = Volume(rng.normal(size=(16, 12, 10)), (1.0, 0.9, 1.1))
    a = compute_derivative_field(v, 1.2)
    b = compute_derivative_field(v, 1.2, workers=4)
    assert np.array_equal(a.grad, b.grad) and np.array_equal(a.hess, b.hess)


def test_sigma_grid_checks():
    v = Volume(np.zeros((8, 8, 8)), (1.0, 1.0, 1.0))
    with pytest.raises(ParameterError):
        compute_derivative_field(v, 2.0)  # radius 8 on an 8-voxel axis
    with pytest.raises(ParameterError):
        compute_derivative_field(Volume(np.zeros((8, 8, 8)), (1.0, 1.0, 10.0)), 1.0)
    with pytest.raises(ParameterError):
        compute_derivative_field(v, -1.0)


def test_component_debug_dump(tmp_path, rng):
    d = compute_derivative_field(Volume(rng.normal(size=(10, 10, 10)), (0.5, 0.5, 0.5)), 1.0)
    save_volume(d.as_volume("xy"), tmp_path / "hxy.raw")
    back = load_volume(tmp_path / "hxy.raw")
    np.testing.assert_allclose(back.data, d.component("xy"), rtol=1e-6, atol=1e-6)
    assert back.spacing == (0.5, 0.5, 0.5)
