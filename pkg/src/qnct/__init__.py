"""Sparse-view CT reconstruction with quasi-Newton unrolling.

Subpackages cover the tomographic operators, classical solvers, the mixer
regularization network with its autodiff substrate, the latent-BFGS
unrolled reconstructor, and training/evaluation protocols.
"""

__version__ = "0.1.0"
