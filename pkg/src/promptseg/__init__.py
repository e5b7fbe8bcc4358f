"""promptseg: desk-scale promptable segmentation with frozen-backbone adaptation.

The package provides:

- ``tensor``: a reverse-mode automatic differentiation tensor library on
  float32 numpy arrays, with a finite-difference gradient checker.
- ``backbone``: a miniature promptable mask predictor (patch transformer
  encoder, Fourier point prompts, two-way mask decoder, IoU ranking head).
- ``prompt_adapter``: a residual prompt-embedding offset module trained
  while the backbone stays frozen.
- ``point_refiner``: boundary extraction, per-point feature gathering, a
  boundary transformer that regresses point offsets, and polygon
  rasterization for two-step mask refinement.
- ``losses``: focal, dice, IoU-regression, and point-matching losses plus
  their weighted composition.
- ``trainer``: prompt sampling, a warmup+milestone learning-rate schedule,
  decoupled-weight-decay Adam, training loops, and checkpoint IO.
- ``synth``: deterministic synthetic task generators and PGM dataset IO.
- ``evaluate``: IoU metrics, evaluation protocols, prompt-position sweeps,
  and a fixed-blend mask combination baseline.
- ``cli``: the ``promptseg`` command line entry point.
"""

from . import errors

__all__ = ["errors"]
__version__ = "0.1.0"
