"""Registration-based model reduction with spatio-parameter adaptivity.

Quasi-1D Euler nozzle flows discretized with DG, parametric shock-aligning maps,
hyper-reduced LSPG reduced-order models trained in an adaptive loop, plus a 2D
Riemannian metric toolkit.
"""

__version__ = "0.1.0"
