"""farflux: footprint-aware regression for eddy-covariance carbon flux.

Jointly learns a tower's measurement footprint (softmax attention over a
pixel grid) and a pixel-level flux predictor from tower measurements,
with the full pipeline around it: dataset formats, cleaning, synthetic
verification landscapes, training, evaluation, footprint diagnostics,
and regional upscaling.
"""

__version__ = "0.1.0"

from . import kernels  # noqa: F401  (selects the kernel backend on import)
