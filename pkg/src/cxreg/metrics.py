"""Registration quality metrics.

Overlap (dice, Hausdorff, 95th-percentile Hausdorff) per anatomical
structure, their rib-pair and lung aggregates, warp folding (fraction of
negative Jacobian determinants), MSE and SSIM.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field as dc_field

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .exceptions import DimensionMismatch, EmptyMask, TooSmall
from .validation import LabelSemantics, check_field, check_label_mask

RIB_LABELS = LabelSemantics.RIB_PAIRS.labels
LUNG_LABELS = LabelSemantics.LUNGS.labels

SSIM_WIN = 7
SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_DATA_RANGE = 1.0


def _binary_pair(x, y):
    x = np.asarray(x).astype(bool)
    y = np.asarray(y).astype(bool)
    if x.shape != y.shape:
        raise DimensionMismatch(f"masks differ in shape: {x.shape} vs {y.shape}")
    return x, y


def dice(x, y, return_flag=False):
    """Dice overlap ``2|X & Y| / (|X| + |Y|)``.

    Two empty masks score 1.0 and one empty mask 0.0; ``return_flag`` also
    returns ``"both_empty"``/``"one_empty"`` (or ``None``) so callers can audit
    those cases.
    """
    x, y = _binary_pair(x, y)
    sx, sy = int(x.sum()), int(y.sum())
    if sx + sy == 0:
        value, flag = 1.0, "both_empty"
    else:
        value = 2.0 * int(np.logical_and(x, y).sum()) / (sx + sy)
        flag = "one_empty" if min(sx, sy) == 0 else None
    return (value, flag) if return_flag else value


_CROSS = ndimage.generate_binary_structure(2, 1)


def boundary_points(mask):
    """(row, col) of foreground pixels having a background 4-neighbour.

    Pixels on the image edge count as boundary (outside is background).
    """
    m = np.asarray(mask).astype(bool)
    inner = ndimage.binary_erosion(m, structure=_CROSS, border_value=0)
    return np.argwhere(m & ~inner).astype(np.float64)


def _directed(a_pts, b_pts):
    return cKDTree(b_pts).query(a_pts, k=1)[0]


def _boundaries(x, y):
    x, y = _binary_pair(x, y)
    if not x.any() or not y.any():
        raise EmptyMask("Hausdorff distance is undefined for an empty mask")
    return boundary_points(x), boundary_points(y)


def hausdorff(x, y):
    """Symmetric Hausdorff distance between mask boundaries (pixels)."""
    bx, by = _boundaries(x, y)
    return float(max(_directed(bx, by).max(), _directed(by, bx).max()))


def hausdorff95(x, y):
    """95th-percentile Hausdorff distance between mask boundaries.

    Each direction takes the 95th percentile (linear interpolation) of the
    nearest-boundary distances; the larger direction is returned.
    """
    bx, by = _boundaries(x, y)
    return float(max(np.percentile(_directed(bx, by), 95),
                     np.percentile(_directed(by, bx), 95)))


@dataclass
class LabelScore:
    label: int
    dice: float
    h95: float | None
    flag: str | None = None


def label_scores(a, b, labels):
    """Per-label dice and h95 for every label present in either mask."""
    a = check_label_mask(a)
    b = check_label_mask(b)
    if a.shape != b.shape:
        raise DimensionMismatch(f"masks differ in shape: {a.shape} vs {b.shape}")
    out = []
    for lab in labels:
        xa, xb = a == lab, b == lab
        if not xa.any() and not xb.any():
            continue
        d, flag = dice(xa, xb, return_flag=True)
        h = hausdorff95(xa, xb) if flag is None else None
        out.append(LabelScore(int(lab), d, h, flag))
    return out


def _mean_dice(scores):
    return float(np.mean([s.dice for s in scores])) if scores else None


def _mean_h95(scores):
    vals = [s.h95 for s in scores if s.h95 is not None]
    return float(np.mean(vals)) if vals else None


def dcr(a, b):
    """Mean dice over rib pairs 2..10 present in either mask."""
    return _mean_dice(label_scores(a, b, RIB_LABELS))


def h95r(a, b):
    return _mean_h95(label_scores(a, b, RIB_LABELS))


def dcl(a, b):
    """Mean dice over the two lung fields."""
    return _mean_dice(label_scores(a, b, LUNG_LABELS))


def h95l(a, b):
    return _mean_h95(label_scores(a, b, LUNG_LABELS))


def jacobian_determinant(field):
    """Per-pixel ``det(I + du/dx)``.

    Derivatives use central differences in the interior and one-sided
    differences on the border (``numpy.gradient``).
    """
    field = check_field(field)
    dux_dy, dux_dx = np.gradient(field[..., 0])
    duy_dy, duy_dx = np.gradient(field[..., 1])
    return (1.0 + dux_dx) * (1.0 + duy_dy) - dux_dy * duy_dx


def neg_jacobian_fraction(field):
    """Fraction of pixels of the whole grid with a negative Jacobian determinant."""
    det = jacobian_determinant(field)
    return float(np.count_nonzero(det < 0)) / det.size


def mse(a, b):
    """Mean squared intensity difference."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatch(f"images differ in shape: {a.shape} vs {b.shape}")
    # correctly rounded sum: independent of summation order
    return math.fsum(((a - b) ** 2).ravel()) / a.size


def ssim(a, b):
    """Mean SSIM over 7x7 uniform windows (K1=0.01, K2=0.03, data range 1).

    Window statistics use the unbiased (N-1) covariance and windows that
    would cross the border are excluded from the mean.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatch(f"images differ in shape: {a.shape} vs {b.shape}")
    if min(a.shape) < SSIM_WIN:
        raise TooSmall(f"SSIM needs at least {SSIM_WIN}x{SSIM_WIN} pixels")
    np_ = SSIM_WIN ** 2
    cov_norm = np_ / (np_ - 1)
    filt = lambda z: ndimage.uniform_filter(z, size=SSIM_WIN, mode="reflect")
    ux, uy = filt(a), filt(b)
    vx = cov_norm * (filt(a * a) - ux * ux)
    vy = cov_norm * (filt(b * b) - uy * uy)
    vxy = cov_norm * (filt(a * b) - ux * uy)
    c1 = (SSIM_K1 * SSIM_DATA_RANGE) ** 2
    c2 = (SSIM_K2 * SSIM_DATA_RANGE) ** 2
    s = ((2 * ux * uy + c1) * (2 * vxy + c2)) / ((ux ** 2 + uy ** 2 + c1) * (vx + vy + c2))
    pad = (SSIM_WIN - 1) // 2
    return float(s[pad:-pad, pad:-pad].mean())


@dataclass
class MetricsReport:
    mse: float
    ssim: float
    negjac: float
    dcr: float | None = None
    h95r: float | None = None
    dcl: float | None = None
    h95l: float | None = None
    ribs: list = dc_field(default_factory=list)
    lungs: list = dc_field(default_factory=list)
    provenance: dict = dc_field(default_factory=dict)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["ribs"] = [LabelScore(**s) for s in d.get("ribs", [])]
        d["lungs"] = [LabelScore(**s) for s in d.get("lungs", [])]
        return cls(**d)

    def get(self, name):
        return getattr(self, name)


def full_report(warped, fixed, field, warped_ribs=None, fixed_ribs=None,
                warped_lungs=None, fixed_lungs=None, provenance=None):
    """Every metric that the given inputs allow."""
    rep = MetricsReport(mse=mse(warped, fixed), ssim=ssim(warped, fixed),
                        negjac=neg_jacobian_fraction(field),
                        provenance=dict(provenance or {}))
    if warped_ribs is not None and fixed_ribs is not None:
        rep.ribs = label_scores(warped_ribs, fixed_ribs, RIB_LABELS)
        rep.dcr, rep.h95r = _mean_dice(rep.ribs), _mean_h95(rep.ribs)
    if warped_lungs is not None and fixed_lungs is not None:
        rep.lungs = label_scores(warped_lungs, fixed_lungs, LUNG_LABELS)
        rep.dcl, rep.h95l = _mean_dice(rep.lungs), _mean_h95(rep.lungs)
    return rep

