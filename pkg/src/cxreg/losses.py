"""Registration objective: image similarity, field smoothness, mask overlap.

    total = -ncc(M o T, F) + lambda_r * tv(T) + lambda_seg * ce(S_M o T, S_F)

Every term has an analytic gradient with respect to the displacement field
so the field itself can be optimized directly.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import DimensionMismatch, LabelSetMismatch
from .grid import _Sampler, mask_labels, sample_coords
from .validation import (LabelSemantics, check_field, check_image,
                         check_label_mask, check_same_shape)

NCC_EPS = 1e-8
CE_EPS = 1e-7


@dataclass(frozen=True)
class LossWeights:
    lambda_r: float = 6e-5
    lambda_seg: float = 3.0

    def __post_init__(self):
        for name in ("lambda_r", "lambda_seg"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and non-negative, got {v}")


@dataclass(frozen=True)
class LossBreakdown:
    ncc_term: float
    tv_term: float
    ce_term: float
    total: float
    degenerate: bool = False

    def as_dict(self):
        return {"ncc": self.ncc_term, "tv": self.tv_term, "ce": self.ce_term,
                "total": self.total, "degenerate": self.degenerate}


def _ncc_parts(a, b):
    da = a - a.mean()
    db = b - b.mean()
    saa = float(np.sum(da * da))
    sbb = float(np.sum(db * db))
    sab = float(np.sum(da * db))
    denom = np.sqrt(saa * sbb + NCC_EPS)
    return da, db, saa, sbb, sab, denom


def ncc(a, b):
    """Global zero-mean normalized cross-correlation of two images."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatch(f"ncc inputs differ in shape: {a.shape} vs {b.shape}")
    *_, sab, denom = _ncc_parts(a, b)
    return sab / denom


def _ncc_grad_a(a, b):
    """d ncc(a, b) / d a."""
    da, db, saa, sbb, sab, denom = _ncc_parts(a, b)
    return db / denom - sab * sbb * da / denom**3


def _forward_diffs(u):
    return u[:, 1:] - u[:, :-1], u[1:, :] - u[:-1, :]


def total_variation(field):
    """Squared forward-difference smoothness of a displacement field.

    Each of the four (component, axis) difference grids contributes its
    mean square; the sum is divided by the number of components.
    """
    field = check_field(field)
    total = 0.0
    for c in range(2):
        dx, dy = _forward_diffs(field[..., c])
        total += np.mean(dx * dx) + np.mean(dy * dy)
    return total / 2.0


def total_variation_grad(field):
    field = np.asarray(field, dtype=np.float64)
    h, w = field.shape[:2]
    g = np.zeros_like(field)
    nx = h * (w - 1)
    ny = (h - 1) * w
    for c in range(2):
        dx, dy = _forward_diffs(field[..., c])
        gx = dx / nx  # d/d dx of mean(dx^2) / 2
        gy = dy / ny
        g[:, 1:, c] += gx
        g[:, :-1, c] -= gx
        g[1:, :, c] += gy
        g[:-1, :, c] -= gy
    return g


def _fixed_label_index(fixed, labels):
    lut = {lab: i for i, lab in enumerate(labels)}
    present = np.unique(fixed)
    missing = [int(v) for v in present if int(v) not in lut]
    if missing:
        raise LabelSetMismatch(f"fixed mask labels {missing} not among {list(labels)}")
    idx = np.zeros(fixed.shape, dtype=np.intp)
    for lab in present:
        idx[fixed == lab] = lut[int(lab)]
    return idx


def cross_entropy(labels, occupancy, fixed):
    """Mean over pixels of ``-log`` occupancy of the fixed pixel's label.

    ``labels`` names the channels of ``occupancy`` (as returned by
    :func:`cxreg.grid.warp_mask_soft`).
    """
    occupancy = np.asarray(occupancy, dtype=np.float64)
    fixed = check_label_mask(fixed, name="fixed mask")
    if occupancy.ndim != 3 or occupancy.shape[0] != len(labels):
        raise DimensionMismatch("occupancy must be (n_labels, H, W)")
    if occupancy.shape[1:] != fixed.shape:
        raise DimensionMismatch(
            f"occupancy grid {occupancy.shape[1:]} vs fixed mask {fixed.shape}")
    idx = _fixed_label_index(fixed, labels)
    occ = np.take_along_axis(occupancy, idx[None], axis=0)[0]
    return float(np.mean(-np.log(np.clip(occ, CE_EPS, 1.0))))


class _Problem:
    """Validated, pre-processed inputs of one loss evaluation."""

    def __init__(self, m, f, s_m=None, s_f=None, weights=None,
                 semantics: LabelSemantics | None = None):
        self.m = check_image(m, "moving")
        self.f = check_image(f, "fixed")
        check_same_shape(self.m, self.f, names=("moving", "fixed"))
        if (s_m is None) != (s_f is None):
            raise ValueError("moving and fixed masks must be both given or both absent")
        self.weights = weights or LossWeights()
        self.supervised = s_m is not None
        if self.supervised:
            s_m = check_label_mask(s_m, semantics, "moving mask")
            s_f = check_label_mask(s_f, semantics, "fixed mask")
            check_same_shape(self.m, s_m, s_f, names=("moving", "moving mask", "fixed mask"))
            if semantics is not None:
                self.labels = semantics.all_labels
            else:
                self.labels = tuple(sorted(set(mask_labels(s_m)) | set(mask_labels(s_f))))
            _fixed_label_index(s_f, self.labels)
            self.s_m, self.s_f = s_m, s_f

    def evaluate(self, field, with_grad=True):
        field = check_field(field)
        check_same_shape(self.m, field, names=("moving", "field"))
        x, y = sample_coords(field)
        h, w = self.m.shape
        sampler = _Sampler(x, y, h, w)
        m_flat = self.m.ravel()
        get_img = lambda idx, pixels: m_flat[idx]
        img_corners = sampler.corners(get_img)
        warped = sampler.value(get_img, img_corners)
        wts = self.weights

        ncc_val = ncc(warped, self.f)
        degenerate = np.ptp(warped) == 0.0 or np.ptp(self.f) == 0.0
        tv_val = total_variation(field)
        ce_val = 0.0
        if self.supervised:
            sm_flat, s_f = self.s_m.ravel(), self.s_f

            def get_lab(idx, pixels):
                # indicator of "moving label equals this pixel's fixed label"
                ref = s_f if pixels is None else s_f[pixels]
                return (sm_flat[idx] == ref).astype(np.float64)

            lab_corners = sampler.corners(get_lab)
            occ = sampler.value(get_lab, lab_corners)
            ce_val = float(np.mean(-np.log(np.clip(occ, CE_EPS, 1.0))))
        total = -ncc_val + wts.lambda_r * tv_val + wts.lambda_seg * ce_val
        breakdown = LossBreakdown(ncc_val, tv_val, ce_val, total, bool(degenerate))
        if not with_grad:
            return breakdown, None

        # d(-ncc)/d warped, chained through the sampler
        dw = -_ncc_grad_a(warped, self.f)
        gx, gy = sampler.grad(get_img, img_corners)
        grad = np.stack([dw * gx, dw * gy], axis=-1)
        if wts.lambda_r:
            grad += wts.lambda_r * total_variation_grad(field)
        if self.supervised and wts.lambda_seg:
            ox, oy = sampler.grad(get_lab, lab_corners)
            coef = np.where(occ > CE_EPS, -1.0 / (np.maximum(occ, CE_EPS) * occ.size), 0.0)
            grad[..., 0] += wts.lambda_seg * coef * ox
            grad[..., 1] += wts.lambda_seg * coef * oy
        return breakdown, grad


def combined_loss(m, f, field, s_m=None, s_f=None, weights=None, semantics=None):
    """Evaluate the full objective and return its :class:`LossBreakdown`.

    Without masks (``s_m`` and ``s_f`` both ``None``) the overlap term is 0.
    """
    return _Problem(m, f, s_m, s_f, weights, semantics).evaluate(field, with_grad=False)[0]


def loss_gradient(m, f, field, s_m=None, s_f=None, weights=None, semantics=None):
    """Analytic gradient of the objective w.r.t. every displacement, (H, W, 2)."""
    return _Problem(m, f, s_m, s_f, weights, semantics).evaluate(field)[1]
