"""Entropy-regularised GAN with a prescribed Gaussian output layer.

Hand-written numpy networks, HMC posterior sampling for the entropy
gradient, importance-sampled likelihoods and mode-coverage metrics for
synthetic 2-D mixtures.
"""
from .errors import CheckpointError, ConfigError, NumericError

__version__ = "0.1.0"

__all__ = ["CheckpointError", "ConfigError", "NumericError", "__version__"]
