"""Noise uncertainty quantification for diffusion MRI.

Fits a closed-form Bayesian posterior over linear diffusion-model
coefficients in every voxel, samples derived microstructure properties
from it, and pools the discrepancy between independent sample sets into
voxel, patch and subject quality scores.
"""

__version__ = "0.1.0"

from .errors import ContractError, NuqError  # noqa: F401
