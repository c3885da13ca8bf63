"""Latent causal invariance modeling toolkit.

Subpackages cover the full desk-scale pipeline: synthetic multi-environment
data generation from a ground-truth structural causal model, variational
training of an environment-indexed latent variable model with shared
decoders, test-time latent inference, identifiability scoring, and
numerical checks of the supporting theory.
"""

__version__ = "0.1.0"
