"""Synthetic chest phantoms with known ground-truth deformations.

The phantom is a stylized frontal radiograph: a soft-tissue body, two dark
lung fields cut by a domed diaphragm, a heart shadow and nine bright rib
pairs (labels 2..10).  Geometry is analytic, so images and masks can be
rendered at arbitrary (deformed) coordinates without interpolation.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Union

import numpy as np
from scipy import ndimage

from .exceptions import GeometryOverflow
from .grid import identity_grid, upsample_field


@dataclass(frozen=True)
class PhantomParams:
    """Phantom geometry.  Lengths are fractions of the image side."""

    size: int = 256
    n_rib_pairs: int = 9
    rib_thickness: float = 0.03
    rib_spacing: float = 0.072
    rib_top: float = 0.17
    rib_length: float = 0.30
    rib_inner: float = 0.035
    rib_arch: float = 0.045
    rib_slope: float = 0.30
    lung_offset: float = 0.205
    lung_cy: float = 0.47
    lung_rx: float = 0.165
    lung_ry: float = 0.32
    heart_cx: float = 0.56
    heart_cy: float = 0.66
    heart_rx: float = 0.15
    heart_ry: float = 0.12
    diaphragm: float = 0.76
    diaphragm_dome: float = 0.05
    noise: float = 0.01
    blur: float = 0.7
    seed: int = 0

    def __post_init__(self):
        if self.size < 32:
            raise GeometryOverflow("phantom size must be at least 32 px")
        if not 1 <= self.n_rib_pairs <= 9:
            raise GeometryOverflow("rib pair count must be between 1 and 9")
        last = self.rib_top + (self.n_rib_pairs - 1) * self.rib_spacing
        bottom = last + self.rib_slope * self.rib_length + self.rib_thickness
        if self.rib_top - self.rib_arch - self.rib_thickness < 0 or bottom >= 1.0:
            raise GeometryOverflow("rib cage does not fit inside the grid")
        if self.rib_inner + self.rib_length >= 0.5:
            raise GeometryOverflow("ribs extend past the image side")
        for c, r in ((0.5 - self.lung_offset, self.lung_rx),
                     (0.5 + self.lung_offset, self.lung_rx)):
            if c - r <= 0 or c + r >= 1:
                raise GeometryOverflow("lung field does not fit inside the grid")
        if self.lung_cy - self.lung_ry <= 0 or self.diaphragm >= 1:
            raise GeometryOverflow("lung field does not fit inside the grid")

    def jittered(self, seed, scale=1.0):
        """A randomly perturbed copy; ``scale`` widens the perturbations."""
        rng = np.random.default_rng(seed)
        j = lambda s: float(rng.uniform(-s, s)) * scale
        return replace(
            self,
            rib_spacing=self.rib_spacing * (1 + j(0.04)),
            rib_top=self.rib_top + j(0.01),
            rib_arch=self.rib_arch * (1 + j(0.2)),
            rib_slope=self.rib_slope * (1 + j(0.1)),
            lung_cy=self.lung_cy + j(0.01),
            lung_rx=self.lung_rx * (1 + j(0.05)),
            lung_ry=self.lung_ry * (1 + j(0.04)),
            heart_rx=self.heart_rx * (1 + j(0.08)),
            heart_ry=self.heart_ry * (1 + j(0.08)),
            diaphragm=self.diaphragm + j(0.01),
            seed=int(rng.integers(0, 2**31 - 1)),
        )


@dataclass
class Phantom:
    params: PhantomParams
    image: np.ndarray
    ribs: np.ndarray
    lungs: np.ndarray
    ribcage: np.ndarray


# intensities
_BACKGROUND = 0.05
_BODY = 0.62
_LUNG = 0.24
_HEART = 0.58
_RIB = 0.10


def _rib_length(p: PhantomParams, i):
    # upper ribs are shorter, mid-cage ribs longest
    t = (i + 1) / (p.n_rib_pairs + 1)
    return p.rib_length * (0.62 + 0.38 * np.sin(np.pi * t) ** 0.7)


def _rib_labels(p: PhantomParams, X, Y):
    """Rib-pair label at normalized coordinates (X, Y in [0, 1])."""
    out = np.zeros(X.shape, dtype=np.int64)
    d = np.abs(X - 0.5) - p.rib_inner
    for i in range(p.n_rib_pairs):
        length = _rib_length(p, i)
        t = d / length
        y0 = p.rib_top + i * p.rib_spacing
        yc = y0 + p.rib_slope * length * np.clip(t, 0, None) ** 1.5 - p.rib_arch * np.sin(np.pi * np.clip(t, 0, 1) * 0.9)
        inside = (t >= 0) & (t <= 1) & (np.abs(Y - yc) <= p.rib_thickness / 2)
        out[inside & (out == 0)] = i + 2
    return out


def _heart(p: PhantomParams, X, Y):
    return ((X - p.heart_cx) / p.heart_rx) ** 2 + ((Y - p.heart_cy) / p.heart_ry) ** 2 <= 1


def _lung_labels(p: PhantomParams, X, Y):
    out = np.zeros(X.shape, dtype=np.int64)
    heart = _heart(p, X, Y)
    for label, cx in ((1, 0.5 - p.lung_offset), (2, 0.5 + p.lung_offset)):
        u = (X - cx) / p.lung_rx
        ell = u ** 2 + ((Y - p.lung_cy) / p.lung_ry) ** 2 <= 1
        dome = p.diaphragm - p.diaphragm_dome * (1 - np.clip(u, -1, 1) ** 2)
        out[ell & (Y <= dome) & ~heart] = label
    return out


def _body(X, Y):
    return ((X - 0.5) / 0.47) ** 2 + ((Y - 0.55) / 0.56) ** 2 <= 1


def render(p: PhantomParams, xs=None, ys=None, blobs=(), noise_key=0):
    """Render image and masks, evaluating the geometry at pixel coordinates
    ``(xs, ys)`` (defaults to the regular grid)."""
    n = p.size
    if xs is None:
        xs, ys = identity_grid(n, n)
    X = (xs + 0.5) / n
    Y = (ys + 0.5) / n
    ribs = _rib_labels(p, X, Y)
    lungs = _lung_labels(p, X, Y)
    img = np.where(_body(X, Y), _BODY, _BACKGROUND)
    img = np.where(lungs > 0, _LUNG, img)
    img = np.where(_heart(p, X, Y), _HEART, img)
    img = img + _RIB * (ribs > 0)
    for b in blobs:
        img = img + b.intensity_at(xs, ys)
    if p.blur > 0:
        img = ndimage.gaussian_filter(img, p.blur, mode="nearest")
    if p.noise > 0:
        rng = np.random.default_rng([p.seed, noise_key])
        img = img + rng.normal(0.0, p.noise, img.shape)
    img = np.clip(img, 0.0, 1.0)
    return Phantom(p, img, ribs, lungs, (ribs > 0).astype(np.int64))


def generate_phantom(params: PhantomParams | None = None) -> Phantom:
    """Image plus rib-pair, lung and binary rib-cage masks."""
    return render(params or PhantomParams())


# --- deformations -----------------------------------------------------------

@dataclass(frozen=True)
class Translation:
    dx: float
    dy: float

    def field(self, p: PhantomParams):
        f = np.zeros((p.size, p.size, 2))
        f[..., 0] = self.dx
        f[..., 1] = self.dy
        return f


@dataclass(frozen=True)
class AffineScaleRotate:
    scale: float = 1.0
    angle_deg: float = 0.0

    def field(self, p: PhantomParams):
        xs, ys = identity_grid(p.size, p.size)
        c = (p.size - 1) / 2
        a = np.deg2rad(self.angle_deg)
        cos, sin = np.cos(a) / self.scale, np.sin(a) / self.scale
        dx, dy = xs - c, ys - c
        return np.stack([cos * dx - sin * dy + c - xs,
                         sin * dx + cos * dy + c - ys], axis=-1)


@dataclass(frozen=True)
class SmoothRandomField:
    """Seeded control-grid noise, bilinearly upsampled, peak norm ``amplitude``."""

    amplitude: float
    smoothness: int = 4
    seed: int = 0

    def field(self, p: PhantomParams):
        rng = np.random.default_rng(self.seed)
        k = max(2, int(self.smoothness))
        ctrl = rng.normal(size=(k, k, 2))
        f = upsample_field(ctrl, p.size, p.size)
        peak = np.max(np.hypot(f[..., 0], f[..., 1]))
        return f * (self.amplitude / peak) if peak > 0 else f


def _smoothstep(t):
    t = np.clip(t, 0.0, 1.0)
    return t * t * (3 - 2 * t)


@dataclass(frozen=True)
class HeartEnlargement:
    """Magnify the heart by ``factor``; the field vanishes beyond 1.5 heart radii."""

    factor: float = 1.2

    def field(self, p: PhantomParams):
        n = p.size
        xs, ys = identity_grid(n, n)
        cx, cy = p.heart_cx * n - 0.5, p.heart_cy * n - 0.5
        dx, dy = xs - cx, ys - cy
        r = np.sqrt((dx / (p.heart_rx * n)) ** 2 + (dy / (p.heart_ry * n)) ** 2)
        w = 1.0 - _smoothstep((r - 1.0) / 0.5)
        k = -(1.0 - 1.0 / self.factor) * w
        return np.stack([k * dx, k * dy], axis=-1)

    def support(self, p: PhantomParams):
        n = p.size
        xs, ys = identity_grid(n, n)
        cx, cy = p.heart_cx * n - 0.5, p.heart_cy * n - 0.5
        r = np.sqrt(((xs - cx) / (p.heart_rx * n)) ** 2 + ((ys - cy) / (p.heart_ry * n)) ** 2)
        return r < 1.5


@dataclass(frozen=True)
class DiaphragmRaise:
    """Lift everything near and below the diaphragm by ``px`` pixels."""

    px: float = 8.0
    ramp: float = 0.25

    def field(self, p: PhantomParams):
        n = p.size
        _, ys = identity_grid(n, n)
        top = (p.diaphragm - self.ramp) * n
        w = _smoothstep((ys - top) / (self.ramp * n))
        return np.stack([np.zeros_like(ys), self.px * w], axis=-1)


@dataclass(frozen=True)
class OpacityBlob:
    """Additive Gaussian-profile opacity; geometry is unchanged."""

    center: tuple = (0.35, 0.5)
    radius: float = 0.05
    intensity: float = 0.3

    def field(self, p: PhantomParams):
        return np.zeros((p.size, p.size, 2))

    def intensity_at(self, xs, ys, size):
        n = size
        cx, cy = self.center[0] * n - 0.5, self.center[1] * n - 0.5
        r2 = ((xs - cx) ** 2 + (ys - cy) ** 2) / (self.radius * n) ** 2
        return self.intensity * np.exp(-0.5 * r2 * 4.0) * (r2 <= 1)

    def region(self, size):
        xs, ys = identity_grid(size, size)
        cx, cy = self.center[0] * size - 0.5, self.center[1] * size - 0.5
        return (xs - cx) ** 2 + (ys - cy) ** 2 <= (self.radius * size) ** 2


DeformationSpec = Union[Translation, AffineScaleRotate, SmoothRandomField,
                        HeartEnlargement, DiaphragmRaise, OpacityBlob]


class _SizedBlob:
    def __init__(self, blob, size):
        self.blob, self.size = blob, size

    def intensity_at(self, xs, ys):
        return self.blob.intensity_at(xs, ys, size=self.size)


def deform_phantom(phantom: Phantom, spec: DeformationSpec, noise_key=1):
    """Re-render ``phantom`` at ``p + g(p)`` for the spec's field ``g``.

    Returns ``(deformed, gt_field)``.  Registering the original phantom
    (moving) onto the deformed one (fixed) has ``gt_field`` as its exact
    answer under the backward-warp convention.
    """
    p = phantom.params
    g = spec.field(p)
    xs, ys = identity_grid(p.size, p.size)
    blobs = (_SizedBlob(spec, p.size),) if isinstance(spec, OpacityBlob) else ()
    out = render(p, xs + g[..., 0], ys + g[..., 1], blobs=blobs, noise_key=noise_key)
    return out, g


@dataclass(frozen=True)
class PhantomPair:
    moving: Phantom
    fixed: Phantom
    gt_field: np.ndarray


def phantom_pair(seed, size=256, amplitude=4.0, anatomy_change=1.0):
    """Benchmark pair in which lungs and ribs do not move consistently.

    The fixed image comes from a perturbed geometry (heart size, diaphragm
    height, rib spacing, lung extent) further deformed by a smooth random
    field, mimicking follow-up images taken at a different inspiration depth
    or after cardiopulmonary change.  ``gt_field`` is the smooth field alone;
    it is exact only when ``anatomy_change`` is 0.
    """
    rng = np.random.default_rng([seed, 7])
    base = PhantomParams(size=size).jittered(seed)
    c = anatomy_change
    changed = replace(
        base,
        heart_rx=base.heart_rx * (1 + c * rng.uniform(0.05, 0.15)),
        heart_ry=base.heart_ry * (1 + c * rng.uniform(0.05, 0.15)),
        diaphragm=base.diaphragm - c * rng.uniform(0.015, 0.035),
        lung_rx=base.lung_rx * (1 + c * rng.uniform(-0.06, 0.06)),
        rib_spacing=base.rib_spacing * (1 + c * rng.uniform(0.04, 0.08)),
        seed=base.seed + 1,
    )
    moving = generate_phantom(base)
    spec = SmoothRandomField(amplitude, smoothness=4, seed=int(rng.integers(2**31 - 1)))
    fixed, g = deform_phantom(generate_phantom(changed), spec)
    return PhantomPair(moving, fixed, g)
