"""Socio-temporal transformer for stochastic multi-agent trajectory forecasting.

A flattened multi-agent sequence representation with agent-aware attention
drives a CVAE over per-agent latent intent, decoded autoregressively into
future trajectories; a post-hoc sampler maps shared noise through K learned
affine maps for diverse best-of-K prediction. Built on an in-repo float64
tensor library with reverse-mode automatic differentiation.
"""

__version__ = "0.1.0"

from .config import ModelConfig, RunConfig  # noqa: F401
from .data import Scene, SampleSet, ade_fde, generate_synthetic  # noqa: F401
from .cvae import CvaeModel, elbo_loss, train_cvae, variety_loss  # noqa: F401
from .sampler import SamplerModel, sampler_loss, train_sampler  # noqa: F401
