"""Attribute-enhanced vehicle re-identification at desk scale.

Library layout:
  numerics   differentiable-array primitives with verified gradients
  layers     parameterized building blocks (conv, norm, SE, CBAM, ...)
  backbone   shared residual trunk
  heads      global re-id head and attribute branches
  joint      attribute fusion, distillation and compensation
  losses     triplet / cross-entropy / amelioration objectives
  trainer    two-stage schedule, Amsgrad, freezing, checkpoints
  evaluate   feature extraction, mAP/CMC, retrieval protocols
  data       manifests, PK sampling, augmentation; synth generates data
  cli        command-line front end (gen-data / train / eval / ablate /
             gradcheck / report)
"""

__version__ = "0.1.0"
