"""Two-stage coarse-to-fine deformable registration.

The displacement field at each stage resolution is optimized directly with
first-order steps on the combined objective of :mod:`cxreg.losses`.  Stage 1
runs at 64x64 from the zero field; its result is bilinearly upsampled to
128x128 and refined there; the refined field is upsampled to the input
resolution and applied to the moving image.
"""
from __future__ import annotations

import enum
import logging
import warnings
from dataclasses import asdict, dataclass, field as dc_field, fields, replace

import numpy as np
from scipy import ndimage
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import DimensionMismatch, NonFiniteLoss
from .grid import (resample_image, resample_mask, upsample_field, warp_image,
                   warp_mask_hard)
from .losses import LossBreakdown, LossWeights, _Problem
from .validation import (LabelSemantics, check_field, check_image,
                         check_label_mask, check_same_shape)

log = logging.getLogger(__name__)


class PenalizationMode(enum.Enum):
    UNSUPERVISED = "unsup"
    LUNG = "lung"
    RIBCAGE = "ribcage"
    RIBPAIRS = "ribpairs"

    @property
    def semantics(self) -> LabelSemantics | None:
        return {
            PenalizationMode.UNSUPERVISED: None,
            PenalizationMode.LUNG: LabelSemantics.LUNGS,
            PenalizationMode.RIBCAGE: LabelSemantics.BINARY,
            PenalizationMode.RIBPAIRS: LabelSemantics.RIB_PAIRS,
        }[self]


class Optimizer(enum.Enum):
    GRADIENT_DESCENT = "gd"
    ADAM = "adam"


@dataclass(frozen=True)
class RegistrationConfig:
    """Engine settings.

    ``lr`` is a step size for displacements measured in units of the image
    side (the transformation maps the unit square onto itself), so one Adam
    step moves a pixel by about ``lr * stage_size`` stage pixels.

    ``smoothing_sigma`` (stage pixels) low-pass filters every update step
    and ``diffusion_sigma`` (stage-1 pixels, scaled with the stage size)
    diffuses the field itself after each step.  Together they act as the
    fluid/elastic smoothness prior of demons-style registration; the
    gradient of the TV term alone is too weak at the default ``lambda_r`` to
    keep a directly optimized field from folding.  ``pooled_second_moment``
    shares one Adam second-moment estimate across the whole field so the
    step keeps the direction of the (smoothed) gradient instead of being
    rescaled per pixel.
    """

    mode: PenalizationMode = PenalizationMode.UNSUPERVISED
    stage1_size: int = 64
    stage2_size: int = 128
    lr: float = 1e-3
    lambda_seg: float = 3.0
    lambda_r_stage1: float = 6e-5
    lambda_r_stage2: float = 3e-5
    iters_stage1: int = 400
    iters_stage2: int = 400
    optimizer: Optimizer = Optimizer.ADAM
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    smoothing_sigma: float = 2.0
    diffusion_sigma: float = 0.35
    pooled_second_moment: bool = True
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "mode", PenalizationMode(self.mode))
        object.__setattr__(self, "optimizer", Optimizer(self.optimizer))
        if self.stage1_size < 2 or self.stage2_size < self.stage1_size:
            raise ValueError("need 2 <= stage1_size <= stage2_size")
        if self.iters_stage1 < 1 or self.iters_stage2 < 0:
            raise ValueError("iteration budgets must be positive")
        for name in ("lr", "beta1", "beta2", "adam_eps"):
            v = getattr(self, name)
            if not np.isfinite(v) or v <= 0:
                raise ValueError(f"{name} must be finite and positive")
        for name in ("lambda_seg", "lambda_r_stage1", "lambda_r_stage2", "smoothing_sigma",
                     "diffusion_sigma"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and non-negative")
        if not 0 <= self.seed < 2**32:
            raise ValueError("seed must be an unsigned 32-bit integer")

    def to_dict(self):
        d = asdict(self)
        d["mode"] = self.mode.value
        d["optimizer"] = self.optimizer.value
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class StageResult:
    field: np.ndarray
    trace: list
    best_index: int
    diagnostic: str | None = None


@dataclass
class RegistrationResult:
    field_native: np.ndarray
    field_stage1: np.ndarray
    field_stage2: np.ndarray
    loss_trace: list
    warped: np.ndarray
    config: RegistrationConfig = dc_field(default_factory=RegistrationConfig)
    stage1_trace_len: int = 0
    diagnostics: list = dc_field(default_factory=list)


def _smooth(grad, sigma):
    if sigma <= 0:
        return grad
    return ndimage.gaussian_filter(grad, (sigma, sigma, 0), mode="nearest")


def register_stage(m, f, s_m, s_f, init, weights: LossWeights,
                   cfg: RegistrationConfig, iters: int,
                   semantics: LabelSemantics | None = None) -> StageResult:
    """Minimize the objective over the field at the inputs' resolution.

    Returns the iterate with the lowest total loss seen (the start included).
    A non-finite loss stops the run early; the best finite iterate is kept
    and the reason is recorded in ``diagnostic``.
    """
    if semantics is None:
        semantics = cfg.mode.semantics
    problem = _Problem(m, f, s_m, s_f, weights, semantics)
    field = check_field(init).copy()
    check_same_shape(problem.m, field, names=("moving", "init"))
    h, w = field.shape[:2]
    # displacement per unit of the normalized (unit-square) parameter
    unit = np.array([w, h], dtype=np.float64)

    diffusion = cfg.diffusion_sigma * h / cfg.stage1_size
    mom = np.zeros_like(field)
    vel = np.zeros(()) if cfg.pooled_second_moment else np.zeros_like(field)
    trace: list[LossBreakdown] = []
    best, best_field, best_idx = np.inf, field.copy(), 0
    diagnostic = None

    for k in range(iters + 1):
        loss, grad = problem.evaluate(field, with_grad=k < iters)
        if not np.isfinite(loss.total) or (grad is not None and not np.all(np.isfinite(grad))):
            diagnostic = f"non-finite loss at iteration {k}"
            warnings.warn(diagnostic, RuntimeWarning, stacklevel=2)
            break
        trace.append(loss)
        if loss.total < best:
            best, best_field, best_idx = loss.total, field.copy(), k
        if k == iters:
            break
        g = grad * unit
        if cfg.optimizer is Optimizer.ADAM:
            t = k + 1
            mom = cfg.beta1 * mom + (1 - cfg.beta1) * g
            g2 = np.mean(g * g) if cfg.pooled_second_moment else g * g
            vel = cfg.beta2 * vel + (1 - cfg.beta2) * g2
            mhat = mom / (1 - cfg.beta1 ** t)
            vhat = vel / (1 - cfg.beta2 ** t)
            step = mhat / (np.sqrt(vhat) + cfg.adam_eps)
        else:
            step = g
        field = field - cfg.lr * _smooth(step, cfg.smoothing_sigma) * unit
        field = _smooth(field, diffusion)

    if not trace:
        raise NonFiniteLoss("loss is not finite at the initial field")
    return StageResult(best_field, trace, best_idx, diagnostic)


def _stage_inputs(m, f, s_m, s_f, size):
    ms = resample_image(m, size, size)
    fs = resample_image(f, size, size)
    if s_m is None:
        return ms, fs, None, None
    return ms, fs, resample_mask(s_m, size, size), resample_mask(s_f, size, size)


def _check_masks(mode: PenalizationMode, s_m, s_f):
    if mode is PenalizationMode.UNSUPERVISED:
        return None, None
    if s_m is None or s_f is None:
        raise ValueError(f"mode {mode.value!r} needs moving and fixed masks")
    sem = mode.semantics
    return (check_label_mask(s_m, sem, "moving mask"),
            check_label_mask(s_f, sem, "fixed mask"))


def register_multistage(m, f, s_m=None, s_f=None,
                        cfg: RegistrationConfig | None = None) -> RegistrationResult:
    """Full coarse-to-fine pipeline at the inputs' native resolution.

    Masks are ignored in unsupervised mode; in the other modes they must use
    the label semantics of the mode (lungs 1/2, binary rib cage, rib pairs
    2..10).
    """
    cfg = cfg or RegistrationConfig()
    m = check_image(m, "moving")
    f = check_image(f, "fixed")
    check_same_shape(m, f, names=("moving", "fixed"))
    s_m, s_f = _check_masks(cfg.mode, s_m, s_f)
    if s_m is not None:
        check_same_shape(m, s_m, s_f, names=("moving", "moving mask", "fixed mask"))
    h, w = m.shape
    sem = cfg.mode.semantics

    n1, n2 = cfg.stage1_size, cfg.stage2_size
    inputs1 = _stage_inputs(m, f, s_m, s_f, n1)
    w1 = LossWeights(cfg.lambda_r_stage1, cfg.lambda_seg)
    st1 = register_stage(*inputs1, np.zeros((n1, n1, 2)), w1, cfg,
                         cfg.iters_stage1, sem)
    log.debug("stage 1: best %.6f at %d", st1.trace[st1.best_index].total, st1.best_index)

    init2 = upsample_field(st1.field, n2, n2)
    inputs2 = _stage_inputs(m, f, s_m, s_f, n2)
    w2 = LossWeights(cfg.lambda_r_stage2, cfg.lambda_seg)
    st2 = register_stage(*inputs2, init2, w2, cfg, cfg.iters_stage2, sem)
    log.debug("stage 2: best %.6f at %d", st2.trace[st2.best_index].total, st2.best_index)

    if (h, w) == (n2, n2):
        native = st2.field.copy()
    else:
        native = upsample_field(st2.field, w, h)
    diagnostics = [d for d in (st1.diagnostic, st2.diagnostic) if d]
    return RegistrationResult(
        field_native=native,
        field_stage1=st1.field,
        field_stage2=st2.field,
        loss_trace=st1.trace + st2.trace,
        warped=warp_image(m, native),
        config=cfg,
        stage1_trace_len=len(st1.trace),
        diagnostics=diagnostics,
    )


def stage1_native_field(result: RegistrationResult):
    """The stage-1 field alone, upsampled to the native resolution."""
    h, w = result.field_native.shape[:2]
    return upsample_field(result.field_stage1, w, h)


def apply_registration(m_native, result: RegistrationResult):
    """Warp a native-resolution moving image with the registration field."""
    m_native = check_image(m_native, "moving")
    if m_native.shape != result.field_native.shape[:2]:
        raise DimensionMismatch(
            f"image {m_native.shape} does not match field {result.field_native.shape[:2]}")
    return warp_image(m_native, result.field_native)


class DeformableRegistration(TransformerMixin, BaseEstimator):
    """Estimator wrapper around :func:`register_multistage`.

    ``fit(moving, fixed, moving_mask=None, fixed_mask=None)`` estimates the
    displacement field; ``transform`` warps any image on the same grid with
    it and ``transform_mask`` does the same for label masks.

    Examples
    --------
    >>> reg = DeformableRegistration(mode="ribpairs").fit(m, f, ribs_m, ribs_f)
    >>> warped = reg.transform(m)
    """

    def __init__(self, mode="unsup", stage1_size=64, stage2_size=128, lr=1e-3,
                 lambda_seg=3.0, lambda_r_stage1=6e-5, lambda_r_stage2=3e-5,
                 iters_stage1=400, iters_stage2=400, optimizer="adam",
                 smoothing_sigma=2.0, diffusion_sigma=0.35,
                 pooled_second_moment=True, seed=0):
        self.mode = mode
        self.stage1_size = stage1_size
        self.stage2_size = stage2_size
        self.lr = lr
        self.lambda_seg = lambda_seg
        self.lambda_r_stage1 = lambda_r_stage1
        self.lambda_r_stage2 = lambda_r_stage2
        self.iters_stage1 = iters_stage1
        self.iters_stage2 = iters_stage2
        self.optimizer = optimizer
        self.smoothing_sigma = smoothing_sigma
        self.diffusion_sigma = diffusion_sigma
        self.pooled_second_moment = pooled_second_moment
        self.seed = seed

    def get_config(self) -> RegistrationConfig:
        return RegistrationConfig(**self.get_params())

    def fit(self, X, y, moving_mask=None, fixed_mask=None):
        """``X`` is the moving image, ``y`` the fixed image."""
        self.result_ = register_multistage(X, y, moving_mask, fixed_mask, self.get_config())
        self.field_ = self.result_.field_native
        self.loss_trace_ = self.result_.loss_trace
        return self

    def transform(self, X):
        check_is_fitted(self, "field_")
        return apply_registration(X, self.result_)

    def transform_mask(self, mask):
        check_is_fitted(self, "field_")
        return warp_mask_hard(mask, self.field_)
