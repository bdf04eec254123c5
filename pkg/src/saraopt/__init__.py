"""Importance-sampled subspace selection for low-rank optimizers.

Low-rank optimizers keep their moment states in an r-dimensional subspace of
each layer's gradient space. This package provides the subspace selectors
(dominant, importance-sampled, random), the optimizer family they plug into,
synthetic objectives to drive them, overlap/spectrum diagnostics, numerical
verifiers for the convergence analysis, and an experiment harness with a CLI.
"""

from . import harness, matcore, metrics, objectives, optimizers, subspace, theory

__all__ = [
    "harness",
    "matcore",
    "metrics",
    "objectives",
    "optimizers",
    "subspace",
    "theory",
]

__version__ = "0.1.0"
