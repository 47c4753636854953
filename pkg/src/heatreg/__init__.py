"""Deformable image registration with a heatmap-driven tight upper-bound
surrogate cost: demons/L-BFGS solvers alternating with a small convolutional
network that perturbs the reference image under a soft-threshold bound."""

from .bound import BoundState, alpha2, fit_threshold, gap_integral, soft_threshold, soft_threshold_deriv
from .cost import CostReport, alpha1, energy, energy_gradient, ssd, ub_ssd
from .driver import DdrConfig, RegistrationResult, TraceRecord, convergence_check, outer_step, register
from .errors import FileFormatError, HeatregError, InputError, StaleCacheError
from .fcnn import ActivationCache, Network, NetworkConfig, backward, build_network, forward, sgd_step
from .grid import (
    VectorField,
    Volume,
    compose,
    gaussian_smooth,
    gradient,
    min_jacobian_det,
    sample_linear,
    warp,
)
from .metrics import MetricsReport, improvement_percent, mean_ssd, psnr, ssim
from .registration import (
    DeformationState,
    LbfgsResult,
    RegParams,
    demons_force,
    demons_iterate,
    exp_field,
    lbfgs_minimize,
    lbfgs_register,
)
from .synth import SynthSpec, synth_pair
from .volio import read_field, read_volume, write_field, write_volume

__version__ = "0.1.0"
