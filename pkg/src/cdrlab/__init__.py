"""Contrastive domain randomization on a small 2D physics simulator.

Subpackages and modules:

- :mod:`cdrlab.worldsim`: rigid-body discs and squares in a walled frame
- :mod:`cdrlab.renderer`: procedural-texture software rasterizer
- :mod:`cdrlab.autodiff`: reverse-mode automatic differentiation on numpy
- :mod:`cdrlab.models`: encoder, forward model, GRU predictor
- :mod:`cdrlab.contrastive`: similarity kinds and InfoNCE losses
- :mod:`cdrlab.datagen`: paired-domain episode datasets and batches
- :mod:`cdrlab.training`: Adam training loop with early stopping
- :mod:`cdrlab.evaluation`: retrieval, invariance, separable-encoder study
- :mod:`cdrlab.planner`: one-step latent MPC
- :mod:`cdrlab.cli`: the ``cdrlab`` command
"""

__version__ = "0.1.0"
