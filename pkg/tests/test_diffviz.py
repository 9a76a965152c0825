import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cxreg.diffviz import (GaussianMixture1D, GmmHistogramMatcher,
                           colormap_index, control_points, difference_image,
                           difference_pipeline, fit_gmm_1d,
                           histogram_transfer, load_colormap, render,
                           rib_hull_roi)
from cxreg.exceptions import DimensionMismatch, EmptyMask
from cxreg.phantom import OpacityBlob, PhantomParams, deform_phantom, generate_phantom


def test_colormap_table():
    cm = load_colormap()
    assert cm.shape == (256, 3) and cm.dtype == np.uint8
    assert tuple(cm[0]) == (0, 0, 139) and tuple(cm[255]) == (255, 255, 0)
    assert tuple(cm[127]) == tuple(cm[128]) == (255, 255, 255)


def test_colormap_index_symmetric():
    v = np.array([-1.0, -0.5, 0.0, 0.5, 1.0, 2.0])
    idx = colormap_index(v, 1.0)
    assert list(idx) == [0, 64, 128, 192, 255, 255]
    assert (colormap_index(np.ones(3), 0.0) == 128).all()


def test_roi_examples():
    one = np.zeros((9, 9), bool)
    one[4, 4] = True
    assert np.array_equal(rib_hull_roi(one, 0), one)
    rect = np.zeros((30, 30), bool)
    rect[10:15, 8:20] = True
    roi = rib_hull_roi(rect, 3)
    # the corners of a rectangle dilated by a disk are rounded
    assert roi[7, 8] and roi[10, 5] and not roi[7, 5]
    assert roi[10:15, 8:20].all() and not roi[:6].any()
    with pytest.raises(EmptyMask):
        rib_hull_roi(np.zeros((4, 4), bool))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**16), st.integers(0, 5))
def test_roi_contains_mask_and_hull(seed, margin):
    m = np.random.default_rng(seed).random((20, 20)) < 0.05
    if not m.any():
        return
    roi = rib_hull_roi(m, margin)
    assert roi[m].all()
    if margin:
        assert rib_hull_roi(m, 0).sum() < roi.sum()


def test_gmm_recovers_two_gaussians():
    rng = np.random.default_rng(0)
    x = np.r_[rng.normal(0.2, 0.03, 4000), rng.normal(0.7, 0.05, 6000)]
    g = fit_gmm_1d(x, k=2)
    assert np.allclose(g.means_, [0.2, 0.7], atol=0.02)
    assert np.allclose(g.weights_, [0.4, 0.6], atol=0.02)
    assert abs(g.weights_.sum() - 1) <= 1e-9


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**16), st.integers(1, 10))
def test_gmm_invariants(seed, k):
    x = np.random.default_rng(seed).beta(2, 5, size=500)
    g = GaussianMixture1D(n_components=k).fit(x)
    assert np.all(np.diff(g.loglik_trace_) >= -1e-9)
    assert np.all(np.diff(g.means_) >= 0)
    assert np.all(g.variances_ >= 1e-6) and np.all(g.weights_ >= 0)
    assert abs(g.weights_.sum() - 1) <= 1e-9
    assert g.n_iter_ <= 300


def test_gmm_constant_data_collapses():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        g = fit_gmm_1d(np.full(50, 0.4), k=10)
    assert g.means_.size == 1 and g.means_[0] == pytest.approx(0.4)


def test_gmm_few_distinct_values_warns():
    with pytest.warns(RuntimeWarning):
        g = fit_gmm_1d(np.repeat([0.1, 0.5, 0.9], 20), k=10)
    assert np.allclose(g.means_, [0.1, 0.5, 0.9], atol=1e-6)


def test_gmm_estimator_api():
    x = np.random.default_rng(1).random(300)
    g = GaussianMixture1D(n_components=3).fit(x)
    assert g.get_params()["n_components"] == 3
    assert g.score_samples(x).shape == (300,) and set(g.predict(x)) <= {0, 1, 2}


@pytest.fixture(scope="module")
def phantom():
    return generate_phantom(PhantomParams(seed=0))


def test_transfer_identity(phantom):
    roi = rib_hull_roi(phantom.ribcage)
    m = GmmHistogramMatcher().fit(phantom.image, phantom.image, roi)
    assert np.allclose(m.source_points_, m.target_points_, atol=1e-6)
    assert np.allclose(m.transform(phantom.image), phantom.image, atol=1e-6)


def test_transfer_linear_relation(phantom):
    roi = rib_hull_roi(phantom.ribcage)
    target = 0.5 * phantom.image
    out = histogram_transfer(phantom.image, target, roi)
    assert np.abs(out - target).mean() <= 0.02
    assert out.min() >= 0 and out.max() <= target.max()


def test_transfer_zero_anchor_endpoints(phantom):
    roi = rib_hull_roi(phantom.ribcage)
    m = GmmHistogramMatcher(anchor="zero").fit(phantom.image, 0.8 * phantom.image, roi)
    assert m.source_points_[0] == 0.0 and m.target_points_[0] == 0.0
    assert len(m.source_points_) == len(m.target_points_) == 12
    with pytest.raises(ValueError):
        control_points(phantom.image, m.source_gmm_, anchor="median")


def test_difference_identical_is_neutral(phantom):
    roi = rib_hull_roi(phantom.ribcage)
    d = difference_image(phantom.image, phantom.image, roi)
    assert not d.signed.any()
    assert (d.rgb == 255).all()


def test_difference_properties(phantom):
    roi = rib_hull_roi(phantom.ribcage)
    other = np.clip(phantom.image + 0.05 * np.random.default_rng(2).standard_normal(roi.shape), 0, 1)
    d = difference_image(phantom.image, other, roi)
    assert abs(d.signed[roi].mean()) <= 1e-6
    assert not d.signed[~roi].any()
    assert (d.rgb[~roi] == 255).all()
    raw = (phantom.image - other)[roi]
    lo, hi = d.clip_bounds
    assert lo == pytest.approx(raw.mean() - 4 * raw.std())
    assert hi == pytest.approx(raw.mean() + 4 * raw.std())
    assert d.vmax == pytest.approx(4 * raw.std())
    codes, scale = d.encode_16bit()
    assert np.abs((codes.astype(float) - 32768) * scale - d.signed).max() <= scale / 2 + 1e-15
    with pytest.raises(DimensionMismatch):
        difference_image(phantom.image, phantom.image[:-1], roi)


def test_blob_renders_yellow(phantom):
    blob = OpacityBlob(center=(0.33, 0.45), radius=0.04, intensity=0.3)
    fixed, _ = deform_phantom(phantom, blob)
    d = difference_pipeline(fixed.image, phantom.image, phantom.ribcage)
    region = blob.region(phantom.image.shape[0])
    assert np.median(d.signed[region]) > 0
    yellow = (d.rgb[..., 0] > 200) & (d.rgb[..., 1] > 200) & (d.rgb[..., 2] < 128)
    assert yellow[region].mean() > 0.8
    assert yellow[d.roi & ~region].mean() < 0.02


def test_render_matches_index(phantom):
    v = np.linspace(-2, 2, 17)
    assert np.array_equal(render(v, 1.5), load_colormap()[colormap_index(v, 1.5)])
