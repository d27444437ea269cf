import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from swimcal import params as P


def test_bounds_layout(bounds):
    assert bounds.dim == 16
    assert len(set(bounds.labels)) == 16
    np.testing.assert_array_equal(bounds.lower[P.FLUID], 0.0)
    np.testing.assert_array_equal(bounds.upper[P.FLUID], 10.0)
    assert (bounds.lower[P.ARM], bounds.upper[P.ARM]) == (0.01, 0.06)
    np.testing.assert_array_equal(bounds.lower[P.STIFFNESS], 0.1)
    np.testing.assert_array_equal(bounds.upper[P.STIFFNESS], 5.0)
    np.testing.assert_array_equal(bounds.lower[P.DAMPING], 0.0)
    np.testing.assert_array_equal(bounds.upper[P.DAMPING], 2.0)


def test_bounds_validation():
    with pytest.raises(ValueError):
        P.ParamBounds(("a", "b"), np.array([0.0, 1.0]), np.array([1.0, 1.0]), ("", ""))
    with pytest.raises(ValueError):
        P.ParamBounds(("a", "a"), np.array([0.0, 0.0]), np.array([1.0, 1.0]), ("", ""))


def test_bounds_list_roundtrip(bounds):
    again = P.ParamBounds.from_list(bounds.to_list())
    assert again.labels == bounds.labels
    np.testing.assert_array_equal(again.lower, bounds.lower)
    np.testing.assert_array_equal(again.upper, bounds.upper)
    assert set(bounds.to_list()[0]) == {"label", "lower", "upper", "unit"}


def test_clip_examples(bounds):
    theta = bounds.midpoint.copy()
    theta[0] = 12.5
    theta[P.ARM] = 0.005
    out = P.clip(theta, bounds)
    assert out[0] == 10.0
    assert out[P.ARM] == 0.01
    mid = bounds.midpoint
    np.testing.assert_array_equal(P.clip(mid, bounds), mid)


def test_clip_rejects_nonfinite(bounds):
    theta = bounds.midpoint.copy()
    theta[3] = np.nan
    with pytest.raises(ValueError):
        P.clip(theta, bounds)
    theta[3] = np.inf
    with pytest.raises(ValueError):
        P.clip(theta, bounds)


def test_normalize_examples(bounds):
    np.testing.assert_array_equal(P.normalize(bounds.lower, bounds), np.zeros(16))
    np.testing.assert_array_equal(P.normalize(bounds.upper, bounds), np.ones(16))
    theta = bounds.midpoint.copy()
    theta[P.ARM] = 0.035
    assert P.normalize(theta, bounds)[P.ARM] == pytest.approx(0.5, abs=1e-12)
    bad = bounds.upper + 1.0
    with pytest.raises(ValueError):
        P.normalize(bad, bounds)


def test_random_init_deterministic(bounds):
    a = P.random_init(0, bounds)
    b = P.random_init(0, bounds)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, P.random_init(1, bounds))


def test_random_init_support_and_mean(bounds):
    draws = np.array([P.random_init(s, bounds) for s in range(1000)])
    assert np.all(draws >= bounds.lower) and np.all(draws <= bounds.upper)
    # arm length dimension: mean within 5% of the midpoint
    assert abs(draws[:, P.ARM].mean() - 0.035) <= 0.05 * 0.035
    samples = P.uniform_samples(P.make_rng(3), bounds, 1000)
    assert np.all(samples >= bounds.lower) and np.all(samples <= bounds.upper)


unit_vectors = st.lists(st.floats(0.0, 1.0, allow_nan=False), min_size=16, max_size=16)
wide_vectors = st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=16, max_size=16)


@settings(max_examples=200, deadline=None)
@given(unit_vectors)
def test_roundtrip_property(u):
    bounds = P.swimmer_bounds()
    theta = P.denormalize(np.array(u), bounds)
    assert bounds.contains(theta)
    back = P.denormalize(P.normalize(theta, bounds), bounds)
    np.testing.assert_allclose(back, theta, rtol=1e-12, atol=1e-15)


@settings(max_examples=200, deadline=None)
@given(wide_vectors)
def test_clip_idempotent_property(x):
    bounds = P.swimmer_bounds()
    once = P.clip(np.array(x), bounds)
    assert bounds.contains(once)
    np.testing.assert_array_equal(P.clip(once, bounds), once)


def test_roundtrip_1000_points(bounds):
    pts = P.uniform_samples(P.make_rng(99), bounds, 1000)
    back = np.array([P.denormalize(P.normalize(p, bounds), bounds) for p in pts])
    rel = np.abs(back - pts) / np.maximum(np.abs(pts), 1e-300)
    assert np.all(rel[pts != 0] <= 1e-12)


def test_unit_box():
    b = P.ParamBounds.unit_box(3)
    assert b.dim == 3
    np.testing.assert_array_equal(b.span, np.ones(3))
