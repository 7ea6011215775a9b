"""Symmetric operators, Lanczos and stochastic Lanczos quadrature."""
from .lanczos import TridiagonalMatrix, lanczos, quadrature_rule, ritz_pairs, tridiag_eigh
from .operators import (DiagonalOperator, ExplicitOperator, HessianOperator, SymOperator,
                        data_parallel_hvp)
from .slq import (DEFAULT_K, DEFAULT_M, ProbeResult, RitzDirections, SpectrumEstimate, assemble,
                  density_eval, gaussian_kernel, iteration_parallel_slq, l1_distance, probe_seed,
                  probe_vector, slq_spectrum, smoothed_density, top_eigenpairs)

__all__ = [
    "DEFAULT_K", "DEFAULT_M", "DiagonalOperator", "ExplicitOperator", "HessianOperator",
    "ProbeResult", "RitzDirections", "SpectrumEstimate", "SymOperator", "TridiagonalMatrix",
    "assemble", "data_parallel_hvp", "density_eval", "gaussian_kernel", "iteration_parallel_slq",
    "l1_distance", "lanczos", "probe_seed", "probe_vector", "quadrature_rule", "ritz_pairs",
    "slq_spectrum", "smoothed_density", "top_eigenpairs", "tridiag_eigh",
]
