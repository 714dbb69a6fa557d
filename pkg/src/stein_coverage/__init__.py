"""Ergodic coverage trajectory optimization on SE(3) with Stein variational particles.

Modules: ``liegroup`` (SE(3) algebra), ``surface`` (point clouds, graph
spectra, deposition), ``sdf``, ``energy``, ``solvers``, ``scenarios`` /
``config`` (scenario files), ``bench`` and ``cli``.
"""

__version__ = "0.1.0"
