"""Conformal prediction sets for multi-hypothesis pose-shape regression.

Subpackages and modules:

- ``mathcore``: float64 tensors, taped autodiff, counter-based RNG, Adam,
  parameter store.
- ``kernels``: numeric hot loops, compiled (Cython) with a bit-identical
  pure-Python fallback selected at import.
- ``synth``: synthetic trajectory episodes and regime-switching streams.
- ``model``: masked encoder-decoder pose-shape estimator with a global
  path, a windowed local correction, and Monte-Carlo hypothesis sampling.
- ``duf``: learned nonconformity scorer and its adversarial-style losses.
- ``conformal``: weighted split conformal calibration and prediction sets.
- ``bounds``: coverage-gap bounds (Beta overlap, changepoint decay) and
  numeric TV/Hellinger oracles.
- ``pipeline``: end-to-end training, evaluation and ablations.
- ``cli``: reproducible command-line front end with run manifests.
"""

__version__ = "0.1.0"
