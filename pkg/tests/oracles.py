"""Brute-force reference implementations written directly from the metric
and test definitions, independent of the package code paths."""
from __future__ import annotations

import itertools
import math

import numpy as np

from cxreg.losses import loss_gradient
from cxreg.validation import LabelSemantics

FD_STEP = 1e-4


# --- loss gradient ------------------------------------------------------------

MODE_SEMANTICS = {
    "unsup": None,
    "lung": LabelSemantics.LUNGS,
    "ribcage": LabelSemantics.BINARY,
    "ribpairs": LabelSemantics.RIB_PAIRS,
}


def _blocky_mask(rng, labels, n, block=4):
    coarse = rng.choice(labels, size=(n // block, n // block))
    return np.kron(coarse, np.ones((block, block), dtype=np.int64))


def random_problem(seed, mode, n=16):
    """Random smooth images, blocky masks and a field whose sampling points
    keep at least 0.2 px from every grid line (bilinear kinks)."""
    rng = np.random.default_rng(seed)
    xs = np.linspace(0, 1, n)
    m = np.clip(0.5 + 0.3 * np.outer(np.sin(3 * xs + rng.normal()), np.cos(2 * xs + rng.normal()))
                + 0.1 * rng.random((n, n)), 0, 1)
    f = np.clip(0.5 + 0.3 * np.outer(np.cos(2 * xs + rng.normal()), np.sin(3 * xs + rng.normal()))
                + 0.1 * rng.random((n, n)), 0, 1)
    field = rng.integers(-2, 3, size=(n, n, 2)) + rng.uniform(0.2, 0.8, size=(n, n, 2))
    sem = MODE_SEMANTICS[mode]
    if sem is None:
        return m, f, field, None, None, None
    labels = list(sem.all_labels)
    return m, f, field, _blocky_mask(rng, labels, n), _blocky_mask(rng, labels, n), sem


def loss_oracle(m, f, field, s_m=None, s_f=None, lambda_r=6e-5, lambda_seg=3.0):
    """The registration objective evaluated from its definition in extended
    precision: bilinear pull-back with border clamping, global NCC
    (eps 1e-8), mean squared forward differences of the field and the
    clipped (1e-7) cross-entropy of the fixed label's warped occupancy."""
    ld = np.longdouble
    m = np.asarray(m, ld)
    f = np.asarray(f, ld)
    u = np.asarray(field, ld)
    h, w = m.shape
    rows, cols = np.mgrid[0:h, 0:w]
    x = np.clip(cols + u[..., 0], 0, w - 1)
    y = np.clip(rows + u[..., 1], 0, h - 1)
    x0 = np.minimum(np.floor(x), w - 2).astype(int)
    y0 = np.minimum(np.floor(y), h - 2).astype(int)
    fx, fy = x - x0, y - y0
    corners = [(y0, x0, (1 - fx) * (1 - fy)), (y0, x0 + 1, fx * (1 - fy)),
               (y0 + 1, x0, (1 - fx) * fy), (y0 + 1, x0 + 1, fx * fy)]
    warped = sum(wt * m[r, c] for r, c, wt in corners)
    da, db = warped - warped.mean(), f - f.mean()
    ncc = (da * db).sum() / np.sqrt((da * da).sum() * (db * db).sum() + ld(1e-8))
    tv = ld(0)
    for k in range(2):
        tv += (np.diff(u[..., k], axis=1) ** 2).mean() + (np.diff(u[..., k], axis=0) ** 2).mean()
    tv /= 2
    total = -ncc + ld(lambda_r) * tv
    if s_m is not None:
        occ = sum(wt * (s_m[r, c] == s_f) for r, c, wt in corners)
        ce = (-np.log(np.clip(occ, ld(1e-7), ld(1)))).mean()
        total += ld(lambda_seg) * ce
    return total


def fd_relative_errors(m, f, field, s_m, s_f, sem, pixels, h=FD_STEP):
    """Relative error of the analytic gradient against central differences
    of :func:`loss_oracle` at the given (row, col) pixels, both components."""
    grad = loss_gradient(m, f, field, s_m, s_f, semantics=sem)
    errs = []
    for (r, c) in pixels:
        for k in range(2):
            fp = field.astype(np.longdouble)
            fm = field.astype(np.longdouble)
            fp[r, c, k] += h
            fm[r, c, k] -= h
            num = float((loss_oracle(m, f, fp, s_m, s_f) - loss_oracle(m, f, fm, s_m, s_f)) / (2 * h))
            ana = grad[r, c, k]
            scale = max(abs(num), abs(ana))
            errs.append(0.0 if scale < 1e-12 else abs(num - ana) / scale)
    return np.array(errs)


# --- metrics ------------------------------------------------------------------

def dice_oracle(x, y):
    x = np.asarray(x, bool).ravel().tolist()
    y = np.asarray(y, bool).ravel().tolist()
    inter = sum(1 for a, b in zip(x, y) if a and b)
    s = sum(x) + sum(y)
    return 1.0 if s == 0 else 2.0 * inter / s


def mse_oracle(a, b):
    a = np.asarray(a, float).ravel().tolist()
    b = np.asarray(b, float).ravel().tolist()
    return math.fsum((p - q) ** 2 for p, q in zip(a, b)) / len(a)


def boundary_oracle(mask):
    mask = np.asarray(mask, bool)
    h, w = mask.shape
    pts = []
    for r in range(h):
        for c in range(w):
            if not mask[r, c]:
                continue
            for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                rr, cc = r + dr, c + dc
                if not (0 <= rr < h and 0 <= cc < w) or not mask[rr, cc]:
                    pts.append((r, c))
                    break
    return pts


def percentile_oracle(vals, q):
    """Linear-interpolation percentile (the usual default definition)."""
    v = sorted(vals)
    pos = (len(v) - 1) * q / 100.0
    lo = int(math.floor(pos))
    hi = min(lo + 1, len(v) - 1)
    return v[lo] + (v[hi] - v[lo]) * (pos - lo)


def h95_oracle(x, y):
    bx, by = boundary_oracle(x), boundary_oracle(y)

    def directed(a, b):
        return [min(math.dist(p, q) for q in b) for p in a]

    return max(percentile_oracle(directed(bx, by), 95), percentile_oracle(directed(by, bx), 95))


def _reflect(i, n):
    # half-sample symmetric reflection: -1 -> 0, n -> n - 1
    while i < 0 or i >= n:
        i = -i - 1 if i < 0 else 2 * n - i - 1
    return i


def ssim_oracle(a, b, win=7, k1=0.01, k2=0.03, data_range=1.0):
    """Mean over windows not crossing the border of the per-window SSIM with
    unbiased (N - 1) variances."""
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    h, w = a.shape
    r = win // 2
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    n = win * win
    vals = []
    for i in range(r, h - r):
        for j in range(r, w - r):
            pa = [a[_reflect(i + di, h), _reflect(j + dj, w)] for di in range(-r, r + 1) for dj in range(-r, r + 1)]
            pb = [b[_reflect(i + di, h), _reflect(j + dj, w)] for di in range(-r, r + 1) for dj in range(-r, r + 1)]
            ma, mb = sum(pa) / n, sum(pb) / n
            va = sum((p - ma) ** 2 for p in pa) / (n - 1)
            vb = sum((p - mb) ** 2 for p in pb) / (n - 1)
            cov = sum((p - ma) * (q - mb) for p, q in zip(pa, pb)) / (n - 1)
            vals.append(((2 * ma * mb + c1) * (2 * cov + c2))
                        / ((ma * ma + mb * mb + c1) * (va + vb + c2)))
    return sum(vals) / len(vals)


def negjac_oracle(field):
    """det(I + du/dx) with central differences inside, one-sided at borders."""
    h, w = field.shape[:2]

    def d(comp, r, c, axis):
        n = h if axis == 0 else w
        i = r if axis == 0 else c
        get = (lambda k: field[k, c, comp]) if axis == 0 else (lambda k: field[r, k, comp])
        if i == 0:
            return get(1) - get(0)
        if i == n - 1:
            return get(n - 1) - get(n - 2)
        return (get(i + 1) - get(i - 1)) / 2.0

    neg = 0
    for r in range(h):
        for c in range(w):
            det = (1 + d(0, r, c, 1)) * (1 + d(1, r, c, 0)) - d(0, r, c, 0) * d(1, r, c, 1)
            neg += det < 0
    return neg / (h * w)


# --- statistics -----------------------------------------------------------------

def rank_oracle(values):
    """Mean ranks, 1 = smallest."""
    order = sorted(range(len(values)), key=lambda i: values[i])
    ranks = [0.0] * len(values)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and values[order[j + 1]] == values[order[i]]:
            j += 1
        for k in range(i, j + 1):
            ranks[order[k]] = (i + j) / 2.0 + 1
        i = j + 1
    return ranks


def wilcoxon_enumeration(a, b):
    """W+ and two-sided p by listing all 2**n sign assignments."""
    d = [x - y for x, y in zip(a, b) if x != y]
    ranks = rank_oracle([abs(v) for v in d])
    w = sum(r for r, v in zip(ranks, d) if v > 0)
    le = ge = 0
    total = 0
    for signs in itertools.product((0, 1), repeat=len(d)):
        s = sum(r for r, on in zip(ranks, signs) if on)
        le += s <= w + 1e-9
        ge += s >= w - 1e-9
        total += 1
    return w, min(1.0, 2 * min(le, ge) / total)


def friedman_oracle(rows, higher_is_better=True):
    n, k = len(rows), len(rows[0])
    sums = [0.0] * k
    for row in rows:
        vals = [-v for v in row] if higher_is_better else list(row)
        for j, r in enumerate(rank_oracle(vals)):
            sums[j] += r
    mean = [s / n for s in sums]
    stat = 12 * n / (k * (k + 1)) * (sum(r * r for r in mean) - k * (k + 1) ** 2 / 4)
    return stat, mean
