"""Loss-landscape visualization and Hessian spectral analysis for small neural networks."""

__version__ = "0.1.0"
