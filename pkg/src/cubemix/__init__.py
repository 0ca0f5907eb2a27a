"""Multi-scale cubic-mixer image deblurring on a small numpy autodiff core."""
from .autodiff import GradTape, Tensor, backward, grad_check
from .errors import ConfigError, DimensionError, NumericError, ValidationError
from .mixer import CubicMixerParams, MixerBlockParams, cubic_mixer, mixer_block, wfp_apply
from .network import (
    ABLATIONS,
    NetworkConfig,
    NetworkParams,
    SliceMaps,
    apply_ablation,
    deblur_forward,
    identity_params,
    init_params,
    param_count,
)
from .spectral import SpectralPlanes, fft2, ifft2_real, phase_spectrum, render_spectrum

__version__ = "0.1.0"
