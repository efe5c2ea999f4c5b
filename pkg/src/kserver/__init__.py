"""Randomized k-server on dynamically fused hierarchically separated trees.

The package provides a library and CLI for simulating a fractional k-server
algorithm on a universal tree over a finite metric, with online cluster
fusion/fission, dependent rounding to integral server motions, an offline
optimum oracle, and per-step potential instrumentation.
"""

__version__ = "0.1.0"
