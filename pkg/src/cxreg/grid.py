"""Bilinear resampling and warping on 2D pixel grids.

Conventions used everywhere in the package:

* pixel-center coordinates, ``(x, y) = (column, row)`` with pixel ``(0, 0)``
  centered at the origin;
* backward warping: output pixel ``p`` reads the input at ``p + u(p)``;
* samples outside the grid are clamped to the border pixel.
"""
from __future__ import annotations

import numpy as np
from scipy import ndimage

from .exceptions import DimensionMismatch
from .validation import (LabelSemantics, check_field, check_image,
                         check_label_mask, check_same_shape)


def identity_grid(height, width):
    """Return ``(xs, ys)`` pixel-center coordinate arrays of shape (H, W)."""
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    return xs, ys


def _cell(coord, n):
    """Clamp coordinates and split them into a cell index and fraction."""
    c = np.clip(coord, 0.0, n - 1.0)
    i0 = np.minimum(np.floor(c).astype(np.intp), n - 2)
    return i0, c - i0


class _Sampler:
    """Bilinear sampling at fixed coordinates ``(x, y)``, reusable across
    several grids.

    Grids are read through ``get(flat_index, pixels)`` callables returning
    the grid values at the flat indices for the output pixels selected by
    ``pixels`` (a boolean mask over the output, ``None`` for all), so callers
    can sample derived quantities such as a per-pixel label indicator without
    materializing them.  Where the bilinear surface has a kink (integer
    coordinates, the clamp border) the derivative is the mean of the
    one-sided slopes, which is what a central finite difference measures.
    """

    def __init__(self, x, y, h, w):
        self.w = w
        self.x0, self.fx = _cell(x, w)
        self.y0, self.fy = _cell(y, h)
        self.i00 = self.y0 * w + self.x0
        self.outside = ((x < 0.0) | (x > w - 1.0), (y < 0.0) | (y > h - 1.0))
        self.kink = (self.fx == 0.0, self.fy == 0.0)
        self.top = (self.fx == 1.0, self.fy == 1.0)

    def corners(self, get):
        i, w = self.i00, self.w
        return get(i, None), get(i + 1, None), get(i + w, None), get(i + w + 1, None)

    def value(self, get, corners=None):
        v00, v01, v10, v11 = corners or self.corners(get)
        fx, fy = self.fx, self.fy
        top = v00 + fx * (v01 - v00)
        bot = v10 + fx * (v11 - v10)
        return top + fy * (bot - top)

    def grad(self, get, corners=None):
        v00, v01, v10, v11 = corners or self.corners(get)
        fx, fy = self.fx, self.fy
        gx = (v01 - v00) + fy * ((v11 - v10) - (v01 - v00))
        gy = (v10 - v00) + fx * ((v11 - v01) - (v10 - v00))
        w = self.w
        for axis, g in ((0, gx), (1, gy)):
            kink = self.kink[axis]
            if np.any(kink):
                # slope of the neighbouring cell below the kink
                sel = kink & ((self.x0 if axis == 0 else self.y0) > 0)
                step = 1 if axis == 0 else w
                i = self.i00[sel]
                a, b = get(i - step, sel), get(i, sel)
                other = w if axis == 0 else 1
                c, d = get(i - step + other, sel), get(i + other, sel)
                frac = (fy if axis == 0 else fx)[sel]
                left = np.zeros_like(g)
                left[sel] = (b - a) + frac * ((d - c) - (b - a))
                g[kink] = 0.5 * (left[kink] + g[kink])
            top = self.top[axis]
            if np.any(top):
                g[top] *= 0.5
            g[self.outside[axis]] = 0.0
        return gx, gy


def _sample_stack(stack, x, y, with_grad=False):
    """Sample every channel of ``stack`` (C, H, W) at ``(x, y)``."""
    _, h, w = stack.shape
    s = _Sampler(np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64), h, w)
    outs = []
    for ch in stack:
        flat = ch.ravel()
        get = lambda idx, pixels: flat[idx]
        cs = s.corners(get)
        if with_grad:
            outs.append((s.value(get, cs),) + s.grad(get, cs))
        else:
            outs.append((s.value(get, cs),))
    res = [np.stack([o[k] for o in outs]) for k in range(len(outs[0]))]
    return res[0] if not with_grad else tuple(res)


def bilinear_sample(img, x, y):
    """Sample ``img`` at real pixel coordinates, clamping at the border.

    ``x`` and ``y`` may be scalars or arrays of equal shape.
    """
    img = np.asarray(img, dtype=np.float64)
    xa = np.asarray(x, dtype=np.float64)
    ya = np.asarray(y, dtype=np.float64)
    out = _sample_stack(img[None], xa, ya)[0]
    return float(out) if out.ndim == 0 else out


def sample_coords(field):
    """Absolute sampling coordinates ``p + u(p)`` of a displacement field."""
    h, w = field.shape[:2]
    xs, ys = identity_grid(h, w)
    return xs + field[..., 0], ys + field[..., 1]


def warp_image(img, field):
    """Backward-warp ``img`` with ``field``: ``out[p] = img(p + u(p))``."""
    img = check_image(img)
    field = check_field(field)
    check_same_shape(img, field, names=("image", "field"))
    if not np.any(field):
        return img.copy()
    x, y = sample_coords(field)
    return _sample_stack(img[None], x, y)[0]


def one_hot(mask, labels):
    """Stack of float indicator grids, one per entry of ``labels``."""
    return np.stack([(mask == lab) for lab in labels]).astype(np.float64)


def mask_labels(mask, semantics: LabelSemantics | None = None):
    if semantics is not None:
        return semantics.all_labels
    return tuple(int(v) for v in np.union1d(np.unique(mask), [0]))


def warp_mask_soft(mask, field, semantics: LabelSemantics | None = None):
    """Bilinearly warp each label indicator of ``mask``.

    Returns ``(labels, occupancy)`` where ``occupancy`` has shape
    ``(len(labels), H, W)`` and sums to one over labels at every pixel.
    Background (label 0) is always the first channel.
    """
    mask = check_label_mask(mask, semantics)
    field = check_field(field)
    check_same_shape(mask, field, names=("mask", "field"))
    labels = mask_labels(mask, semantics)
    stack = one_hot(mask, labels)
    if not np.any(field):
        return labels, stack
    x, y = sample_coords(field)
    return labels, _sample_stack(stack, x, y)


def warp_mask_hard(mask, field):
    """Nearest-neighbour warp of a label mask."""
    mask = check_label_mask(mask)
    field = check_field(field)
    check_same_shape(mask, field, names=("mask", "field"))
    h, w = mask.shape
    x, y = sample_coords(field)
    xi = np.clip(np.floor(x + 0.5), 0, w - 1).astype(np.intp)
    yi = np.clip(np.floor(y + 0.5), 0, h - 1).astype(np.intp)
    return mask[yi, xi]


def _scaled_coords(n_old, n_new):
    # pixel-center (align_corners=False) correspondence between grids
    return (np.arange(n_new, dtype=np.float64) + 0.5) * (n_old / n_new) - 0.5


def resample_image(img, new_w, new_h, antialias=True):
    """Bilinear resize.  Downscaling pre-smooths with a Gaussian whose sigma
    follows the usual ``(factor - 1) / 2`` rule so thin structures do not alias.
    """
    img = check_image(img)
    h, w = img.shape
    if (new_h, new_w) == (h, w):
        return img.copy()
    src = img
    if antialias:
        sig = [max(0.0, (h / new_h - 1) / 2), max(0.0, (w / new_w - 1) / 2)]
        if any(s > 0 for s in sig):
            src = ndimage.gaussian_filter(img, sig, mode="nearest")
    ys = _scaled_coords(h, new_h)
    xs = _scaled_coords(w, new_w)
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return np.clip(_sample_stack(src[None], xx, yy)[0], 0.0, 1.0)


def resample_mask(mask, new_w, new_h):
    """Nearest-neighbour resize: each output pixel takes the label of the
    input pixel containing its center."""
    mask = check_label_mask(mask)
    h, w = mask.shape
    yi = np.minimum(((np.arange(new_h) + 0.5) * h / new_h).astype(np.intp), h - 1)
    xi = np.minimum(((np.arange(new_w) + 0.5) * w / new_w).astype(np.intp), w - 1)
    return mask[np.ix_(yi, xi)]


def _linear_interp_axis(values, coords, axis):
    """Linear interpolation along ``axis`` with linear extrapolation past the
    end samples, so affine functions are reproduced exactly everywhere."""
    n = values.shape[axis]
    i0 = np.clip(np.floor(coords).astype(np.intp), 0, n - 2)
    f = coords - i0
    a = np.take(values, i0, axis=axis)
    b = np.take(values, i0 + 1, axis=axis)
    shape = [1] * values.ndim
    shape[axis] = -1
    f = f.reshape(shape)
    return a + f * (b - a)


def upsample_field(field, new_w, new_h):
    """Bilinearly upsample a displacement field to a finer grid.

    Displacement components are multiplied by the per-axis scale factor so
    the geometric transformation is preserved.
    """
    field = check_field(field)
    h, w = field.shape[:2]
    if new_w < w or new_h < h:
        raise DimensionMismatch(f"cannot upsample {w}x{h} to {new_w}x{new_h}")
    if (new_h, new_w) == (h, w):
        return field.copy()
    out = _linear_interp_axis(field, _scaled_coords(h, new_h), axis=0)
    out = _linear_interp_axis(out, _scaled_coords(w, new_w), axis=1)
    out[..., 0] *= new_w / w
    out[..., 1] *= new_h / h
    return out


def downsample_field(field, new_w, new_h):
    """Inverse of :func:`upsample_field` for coarse initialisations."""
    field = check_field(field)
    h, w = field.shape[:2]
    ys = _scaled_coords(h, new_h)
    xs = _scaled_coords(w, new_w)
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    stack = np.moveaxis(field, -1, 0)
    out = np.moveaxis(_sample_stack(stack, xx, yy), 0, -1)
    out[..., 0] *= new_w / w
    out[..., 1] *= new_h / h
    return out
