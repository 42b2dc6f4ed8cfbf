"""Decoupled latent-space sequence reasoning at desk scale.

A reasoner predicts unit-norm latent vectors autoregressively; separate
talker models reconstruct tokens from the latent chain. The package also
ships coupled baselines, synthetic tree/grammar corpora, training
pipelines, a noise-robustness harness and latent-space analysis tools.
"""

__version__ = "0.1.0"
