"""Difference images between a fixed image and a registered moving image.

Pipeline: rib-hull region of interest, per-image 1D Gaussian mixture fits,
piecewise-linear histogram transfer through the sorted component means,
subtraction, clipping at mean +/- 4 std and rendering on a zero-centred
blue-white-yellow colormap.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from importlib import resources

import numpy as np
from scipy import ndimage
from scipy.special import logsumexp
from skimage.morphology import convex_hull_image
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import DimensionMismatch, EmptyMask, NonMonotoneControlPoints
from .validation import check_image

VAR_FLOOR = 1e-6
CLIP_STD = 4.0
NEUTRAL_INDEX = 128
_LOG_2PI = np.log(2.0 * np.pi)


def load_colormap():
    """The shipped (256, 3) uint8 diverging colormap."""
    text = resources.files("cxreg").joinpath("data/colormap_bwy.csv").read_text()
    rows = [ln for ln in text.splitlines() if ln and not ln.startswith("#")][1:]
    return np.array([[int(v) for v in ln.split(",")] for ln in rows], dtype=np.uint8)


_CMAP = None


def _cmap():
    global _CMAP
    if _CMAP is None:
        _CMAP = load_colormap()
    return _CMAP


def rib_hull_roi(ribcage, margin=20):
    """Convex hull of the rib-cage foreground dilated by ``margin`` pixels."""
    m = np.asarray(ribcage).astype(bool)
    if m.ndim != 2:
        raise DimensionMismatch("rib cage mask must be 2D")
    if not m.any():
        raise EmptyMask("rib cage mask is empty")
    if margin < 0:
        raise ValueError("margin must be non-negative")
    hull = convex_hull_image(m) | m
    if margin == 0:
        return hull
    return ndimage.distance_transform_edt(~hull) <= margin


class GaussianMixture1D(BaseEstimator):
    """Expectation-maximization fit of a 1D Gaussian mixture.

    Means start at evenly spaced quantiles (``(i + 0.5) / k``), variances at
    the data variance and weights uniform.  Iteration stops when the mean
    per-sample log-likelihood gains less than ``tol`` or after ``max_iter``
    steps.  Variances never drop below ``var_floor``.  With fewer distinct values
    than components, ``k`` falls back to the number of distinct values.

    Attributes
    ----------
    weights_, means_, variances_ : ndarray
        Sorted by ascending mean.
    loglik_trace_ : list of float
        Mean per-sample log-likelihood before each M-step and after the
        last one.
    """

    def __init__(self, n_components=10, tol=1e-6, max_iter=300,
                 var_floor=VAR_FLOOR, random_state=0):
        self.n_components = n_components
        self.tol = tol
        self.max_iter = max_iter
        self.var_floor = var_floor
        self.random_state = random_state

    def _log_joint(self, x):
        """(k, n) array of log weight + log density."""
        w, mu, var = self.weights_, self.means_, self.variances_
        with np.errstate(divide="ignore"):
            c = np.log(w) - 0.5 * (_LOG_2PI + np.log(var))
        d = x[None, :] - mu[:, None]
        d *= d
        d *= (-0.5 / var)[:, None]
        d += c[:, None]
        return d

    def fit(self, X, y=None):
        x = np.asarray(X, dtype=np.float64).ravel()
        if x.size == 0 or not np.all(np.isfinite(x)):
            raise ValueError("need a non-empty finite sample")
        n_distinct = np.unique(x).size
        k = int(self.n_components)
        if n_distinct < k:
            warnings.warn(f"only {n_distinct} distinct values, fitting {n_distinct} components",
                          RuntimeWarning, stacklevel=2)
            k = n_distinct
        mu = np.quantile(x, (np.arange(k) + 0.5) / k)
        spread = x.std()
        dup = np.r_[False, np.diff(mu) == 0]
        if dup.any() and spread > 0:
            # identical starts would stay identical forever
            rng = np.random.default_rng(self.random_state)
            mu[dup] += 1e-3 * spread * rng.standard_normal(int(dup.sum()))
        self.means_ = mu
        self.variances_ = np.full(k, max(x.var(), self.var_floor))
        self.weights_ = np.full(k, 1.0 / k)

        trace = []
        xx = x * x
        for it in range(self.max_iter + 1):
            lj = self._log_joint(x)
            top = lj.max(axis=0)
            np.subtract(lj, top, out=lj)
            np.exp(lj, out=lj)
            tot = lj.sum(axis=0)
            ll = float(np.mean(top + np.log(tot)))
            trace.append(ll)
            if it == self.max_iter or (it > 0 and ll - trace[-2] < self.tol):
                break
            resp = np.divide(lj, tot, out=lj)
            nk = resp.sum(axis=1)
            alive = nk > 0
            mu = self.means_.copy()
            var = self.variances_.copy()
            mu[alive] = (resp[alive] @ x) / nk[alive]
            var[alive] = (resp[alive] @ xx) / nk[alive] - mu[alive] ** 2
            self.means_ = mu
            self.variances_ = np.maximum(var, self.var_floor)
            self.weights_ = nk / nk.sum()
        order = np.argsort(self.means_, kind="stable")
        self.means_ = self.means_[order]
        self.variances_ = self.variances_[order]
        self.weights_ = self.weights_[order]
        self.loglik_trace_ = trace
        self.n_iter_ = len(trace) - 1
        return self

    def score_samples(self, X):
        check_is_fitted(self, "means_")
        x = np.asarray(X, dtype=np.float64).ravel()
        return logsumexp(self._log_joint(x), axis=0)

    def predict(self, X):
        check_is_fitted(self, "means_")
        x = np.asarray(X, dtype=np.float64).ravel()
        return np.argmax(self._log_joint(x), axis=0)


def fit_gmm_1d(values, k=10, seed=0):
    return GaussianMixture1D(n_components=k, random_state=seed).fit(values)


def control_points(img, gmm, anchor="min"):
    """``[low, sorted component means, max(img)]``.

    ``low`` is the image minimum for ``anchor="min"`` and 0 for
    ``anchor="zero"``.  The two agree on min-max normalized images; only the
    minimum keeps the transfer equivariant under an intensity offset.
    """
    if anchor not in ("min", "zero"):
        raise ValueError(f"anchor must be 'min' or 'zero', got {anchor!r}")
    low = float(np.min(img)) if anchor == "min" else 0.0
    pts = np.concatenate([[low], np.sort(gmm.means_), [float(np.max(img))]])
    if np.any(np.diff(pts) < 0):
        raise NonMonotoneControlPoints(f"control points not monotone: {pts}")
    return pts


class GmmHistogramMatcher(TransformerMixin, BaseEstimator):
    """Map the intensities of a source image onto a target image.

    ``fit(source, target, roi)`` fits one mixture per image on its ROI
    values; ``transform(img)`` maps intensities piecewise linearly through
    the paired control points.
    """

    def __init__(self, n_components=10, anchor="min", random_state=0):
        self.n_components = n_components
        self.anchor = anchor
        self.random_state = random_state

    def fit(self, X, y, roi=None):
        src = check_image(X, "source")
        tgt = check_image(y, "target")
        if src.shape != tgt.shape:
            raise DimensionMismatch(f"source {src.shape} vs target {tgt.shape}")
        sel = np.ones(src.shape, bool) if roi is None else np.asarray(roi, bool)
        if sel.shape != src.shape:
            raise DimensionMismatch("roi does not match the images")
        if not sel.any():
            raise EmptyMask("roi is empty")
        gs = fit_gmm_1d(src[sel], self.n_components, self.random_state)
        gt = fit_gmm_1d(tgt[sel], self.n_components, self.random_state)
        k = min(gs.means_.size, gt.means_.size)
        if gs.means_.size != gt.means_.size:
            gs = fit_gmm_1d(src[sel], k, self.random_state)
            gt = fit_gmm_1d(tgt[sel], k, self.random_state)
        self.source_gmm_, self.target_gmm_ = gs, gt
        self.source_points_ = control_points(src, gs, self.anchor)
        self.target_points_ = control_points(tgt, gt, self.anchor)
        return self

    def transform(self, X):
        check_is_fitted(self, "source_points_")
        img = np.asarray(X, dtype=np.float64)
        return np.interp(img, self.source_points_, self.target_points_)


def histogram_transfer(source, target, roi=None, n_components=10, anchor="min", seed=0):
    """Source image with the intensity distribution of ``target``."""
    matcher = GmmHistogramMatcher(n_components, anchor, seed)
    return matcher.fit(source, target, roi).transform(source)


@dataclass
class DifferenceImage:
    signed: np.ndarray
    roi: np.ndarray
    clip_bounds: tuple
    vmax: float
    rgb: np.ndarray

    def encode_16bit(self):
        """Signed values as uint16 with ``value = (code - 32768) * scale``.

        Returns ``(codes, scale)``.
        """
        scale = self.vmax / 32767.0 if self.vmax > 0 else 1.0
        codes = np.clip(np.rint(self.signed / scale), -32767, 32767) + 32768
        return codes.astype(np.uint16), scale


def colormap_index(signed, vmax):
    """Colormap entry of each signed value; 0 maps to the neutral entry."""
    if vmax <= 0:
        return np.full(np.shape(signed), NEUTRAL_INDEX, dtype=np.intp)
    idx = np.floor((np.asarray(signed) / vmax + 1.0) * 128.0)
    return np.clip(idx, 0, 255).astype(np.intp)


def render(signed, vmax):
    return _cmap()[colormap_index(signed, vmax)]


def difference_image(fixed, matched_warped, roi) -> DifferenceImage:
    """Clipped, mean-free ``fixed - matched_warped`` inside ``roi``.

    The difference is clipped to mean +/- 4 std, then the mean of the clipped
    values is removed; pixels outside the ROI are 0 and render neutral.
    Positive values (structures only in the fixed image) render yellow,
    negative ones dark blue.
    """
    fixed = np.asarray(fixed, dtype=np.float64)
    matched_warped = np.asarray(matched_warped, dtype=np.float64)
    roi = np.asarray(roi, dtype=bool)
    if not (fixed.shape == matched_warped.shape == roi.shape):
        raise DimensionMismatch(
            f"fixed {fixed.shape}, warped {matched_warped.shape}, roi {roi.shape}")
    if not roi.any():
        raise EmptyMask("roi is empty")
    d = fixed[roi] - matched_warped[roi]
    mean, std = float(d.mean()), float(d.std())
    lo, hi = mean - CLIP_STD * std, mean + CLIP_STD * std
    clipped = np.clip(d, lo, hi)
    signed = np.zeros(fixed.shape)
    signed[roi] = clipped - clipped.mean()
    vmax = CLIP_STD * std
    return DifferenceImage(signed, roi, (lo, hi), vmax, render(signed, vmax))


def difference_pipeline(fixed, warped, ribcage, margin=20, n_components=10,
                        anchor="min", seed=0):
    """ROI, histogram transfer of ``warped`` onto ``fixed`` and difference."""
    fixed = check_image(fixed, "fixed")
    warped = check_image(warped, "warped")
    if fixed.shape != warped.shape or fixed.shape != np.shape(ribcage):
        raise DimensionMismatch("fixed, warped and rib cage mask must share one grid")
    roi = rib_hull_roi(ribcage, margin)
    matched = histogram_transfer(warped, fixed, roi, n_components, anchor, seed)
    return difference_image(fixed, matched, roi)
