import math

import numpy as np
import pytest

from conftest import KNOWN_WARP, warped_instance
from hessreg.errors import ParameterError, PreprocessingError
from hessreg.evaluation import compute_mtre
from hessreg.optimizer import DEConfig
from hessreg.registration import (
    RegistrationConfig,
    cost,
    evaluate_similarity,
    preprocess,
    register,
)
from hessreg.transform import IDENTITY_PARAMS
from hessreg.volume_io import Volume


@pytest.fixture(scope="module")
def warped():
    return warped_instance(11)


@pytest.fixture(scope="module")
def aligned_state(blob_pair):
    return preprocess(blob_pair.fixed, blob_pair.moving, RegistrationConfig(seed=3))


def test_defaults():
    cfg = RegistrationConfig()
    assert (cfg.sigma_mm, cfg.num_samples, cfg.metric) == (1.5, 5000, "hessian")
    b = cfg.bounds()
    assert b.shape == (12, 2)
    assert np.array_equal(b[:3], [[-10, 10]] * 3)
    assert np.array_equal(b[3:6], [[-5, 5]] * 3)
    assert np.array_equal(b[6:9], [[-0.05, 0.05]] * 3)
    assert np.allclose(b[9:], [[0.95, 1.05]] * 3)
    assert np.all((IDENTITY_PARAMS >= b[:, 0]) & (IDENTITY_PARAMS <= b[:, 1]))


@pytest.mark.parametrize(
    "kwargs",
    [{"metric": "mi"}, {"num_samples": 50}, {"sigma_mm": 0.0}, {"max_translation_mm": 0.0},
     {"max_scale_change": 1.0}, {"min_valid_fraction": 1.5}, {"sample_margin_mm": -1.0}],
)
def test_config_validation(kwargs):
    with pytest.raises(ParameterError):
        RegistrationConfig(**kwargs).validate()


@pytest.mark.parametrize("metric", ["hessian", "goa"])
def test_constant_fixed_image(metric, blob_pair):
    flat = blob_pair.fixed.with_data(np.full(blob_pair.fixed.dims, 2.0))
    with pytest.raises(PreprocessingError):
        preprocess(flat, blob_pair.moving, RegistrationConfig(metric=metric, normalize=False))


def test_preprocess_deterministic(blob_pair):
    cfg = RegistrationConfig(seed=9)
    a = preprocess(blob_pair.fixed, blob_pair.moving, cfg)
    b = preprocess(blob_pair.fixed, blob_pair.moving, cfg)
    for name in ("points", "grad_f", "hess_f", "degenerate"):
        assert np.array_equal(getattr(a.samples, name), getattr(b.samples, name))
    c = preprocess(blob_pair.fixed, blob_pair.moving, RegistrationConfig(seed=10))
    assert not np.array_equal(a.samples.points, c.samples.points)


def test_samples_inside_eroded_domain(aligned_state, blob_pair):
    s = aligned_state.samples
    assert len(s) == 5000
    r = 3  # ceil(4 * 1.5 / 1.0) voxels at 1 mm spacing
    assert s.points.min() >= r and s.points.max() <= 63 - r
    # distinct voxels
    assert len(np.unique(s.points, axis=0)) == len(s)


def test_sample_margin(blob_pair):
    st = preprocess(blob_pair.fixed, blob_pair.moving, RegistrationConfig(sample_margin_mm=10.0))
    assert st.samples.points.min() >= 10 and st.samples.points.max() <= 53


def test_mostly_non_degenerate(aligned_state):
    assert np.mean(~aligned_state.samples.degenerate) >= 0.8


def test_identity_cost_on_aligned_pair(aligned_state):
    s, ok = evaluate_similarity(IDENTITY_PARAMS, aligned_state)
    assert ok.mean() > 0.8
    assert s[ok].mean() > 0.97
    assert -cost(IDENTITY_PARAMS, aligned_state) > 0.97


def test_cost_deterministic(aligned_state):
    p = IDENTITY_PARAMS.copy()
    p[:3] = (1.3, -0.4, 2.2)
    assert cost(p, aligned_state) == cost(p, aligned_state)


def test_cost_infinite_when_samples_leave_volume(blob_pair):
    cfg = RegistrationConfig(max_translation_mm=500.0)
    st = preprocess(blob_pair.fixed, blob_pair.moving, cfg)
    p = IDENTITY_PARAMS.copy()
    p[:3] = (200.0, 0.0, 0.0)
    assert cost(p, st) == math.inf


def test_cost_infinite_below_valid_fraction(blob_pair):
    st = preprocess(blob_pair.fixed, blob_pair.moving, RegistrationConfig(max_translation_mm=100.0))
    p = IDENTITY_PARAMS.copy()
    p[0] = 40.0  # keeps roughly a third of the samples inside
    s, ok = evaluate_similarity(p, st)
    assert 0 < ok.sum() < 0.5 * 5000
    strict = preprocess(blob_pair.fixed, blob_pair.moving, RegistrationConfig(min_valid_fraction=0.5))
    assert cost(p, strict) == math.inf
    assert math.isfinite(cost(p, st)) == (ok.sum() >= 0.25 * 5000)


def test_metric_ranges(warped):
    fixed, moving, _, _ = warped
    p = IDENTITY_PARAMS.copy()
    p[:3] = (2.0, 1.0, -1.0)
    vals = {}
    for metric in ("hessian", "goa"):
        st = preprocess(fixed, moving, RegistrationConfig(metric=metric))
        vals[metric] = cost(p, st)
        assert -1.0 <= vals[metric] <= 0.0
    assert vals["hessian"] != vals["goa"]


@pytest.mark.parametrize("metric", ["hessian", "goa"])
def test_ground_truth_beats_identity(metric, warped):
    fixed, moving, _, _ = warped
    st = preprocess(fixed, moving, RegistrationConfig(metric=metric))
    assert cost(KNOWN_WARP, st) < cost(IDENTITY_PARAMS, st)


def _small_de(**kw):
    return DEConfig(population_size=12, max_iterations=25, **kw)


def test_self_registration(blob_pair):
    f = blob_pair.fixed
    res = register(f, f, RegistrationConfig(num_samples=2000, de=_small_de()))
    t = res.transform
    pts = np.array([[16.0, 16.0, 16.0], [48.0, 16.0, 40.0], [31.5, 31.5, 31.5], [20.0, 50.0, 45.0]])
    assert np.abs(t(pts) - pts).max() < 0.5
    rot = np.rad2deg(np.arccos(np.clip((np.trace(t.linear) - 1) / 2, -1, 1)))
    assert rot < 0.5
    assert res.trace.best_cost <= res.trace.costs[0]


def test_zero_iterations_bookkeeping(blob_pair):
    cfg = RegistrationConfig(num_samples=500, de=DEConfig(max_iterations=0))
    res = register(blob_pair.fixed, blob_pair.moving, cfg)
    assert len(res.trace) == 24
    assert np.array_equal(res.trace.vectors[0], IDENTITY_PARAMS)
    assert res.trace.best_cost == min(res.trace.costs)
    assert res.preprocess_seconds >= 0 and res.optimize_seconds >= 0


def test_register_deterministic_across_workers(blob_pair):
    base = dict(num_samples=500, de=DEConfig(population_size=8, max_iterations=3))
    a = register(blob_pair.fixed, blob_pair.moving, RegistrationConfig(**base))
    b = register(blob_pair.fixed, blob_pair.moving, RegistrationConfig(workers=3, **base))
    assert a.trace.costs == b.trace.costs
    assert np.array_equal(a.transform.matrix34(), b.transform.matrix34())


@pytest.mark.slow
def test_recovers_known_warp(warped):
    fixed, moving, lf, lm = warped
    res = register(fixed, moving, RegistrationConfig(seed=11, workers=4))
    assert compute_mtre(lf, lm, res.transform).mean < 1.0


def test_unnormalized_input_scale_invariance(blob_pair):
    # normalisation makes the cost independent of intensity scale
    f, m = blob_pair.fixed, blob_pair.moving
    a = preprocess(f, m, RegistrationConfig(num_samples=500))
    b = preprocess(f.with_data(f.data * 7 + 3), m.with_data(m.data * 0.01), RegistrationConfig(num_samples=500))
    p = IDENTITY_PARAMS.copy()
    p[3] = 2.0
    assert abs(cost(p, a) - cost(p, b)) < 1e-12


def test_margin_leaves_no_voxels():
    v = Volume(np.random.default_rng(0).normal(size=(8, 8, 8)))
    with pytest.raises(PreprocessingError):
        preprocess(v, v, RegistrationConfig(sample_margin_mm=4.0))
