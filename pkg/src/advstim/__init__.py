"""advstim: adversarial stimulus pipeline for time-limited perception studies.

Subpackages/modules:
  nn        small convnet stack (layers, training, checkpoints) on numpy
  retina    eccentricity-dependent low-pass preprocessing, differentiable
  coarse    coarse-class probabilities and the ensemble loss/gradient
  attack    iterative targeted perturbations, controls, retention filtering
  stimuli   rescaling, stimulus export, balanced session assembly
  transfer  model-transfer evaluation and ablation sweeps
  stats     self-contained hypothesis tests
  analysis  response-set analyses over the service's JSONL log
  service   small HTTP service for running sessions
"""

__version__ = "0.1.0"
