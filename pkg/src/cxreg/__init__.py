"""Deformable registration of chest radiographs with anatomy penalization.

Submodules: :mod:`~cxreg.grid` (warping and resampling), :mod:`~cxreg.losses`,
:mod:`~cxreg.registration`, :mod:`~cxreg.metrics`, :mod:`~cxreg.qc`,
:mod:`~cxreg.diffviz`, :mod:`~cxreg.stats`, :mod:`~cxreg.phantom`,
:mod:`~cxreg.io` and :mod:`~cxreg.cli`.
"""
from .exceptions import *  # noqa: F401,F403
from .losses import LossWeights, combined_loss, loss_gradient
from .metrics import MetricsReport, full_report
from .phantom import PhantomParams, deform_phantom, generate_phantom, phantom_pair
from .qc import QcThresholds, qc_mask
from .registration import (DeformableRegistration, PenalizationMode,
                           RegistrationConfig, register_multistage)
from .validation import LabelSemantics

__version__ = "0.1.0"
