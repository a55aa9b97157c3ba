"""Desk-scale two-stage video action detection on a synthetic actor world.

Subsystems: ``autodiff`` (tape-based gradients over float64 tensors),
``boxes`` (normalized box algebra), ``model`` (actor-scene relation
transformer and variants), ``matching`` (set matching and training
loss), ``longterm`` (sliding windows and score aggregation),
``synthdata`` (deterministic clip generator), ``evaluation``
(frame-level mAP), ``training`` (two-phase optimization), ``cli``.
"""

__version__ = "0.1.0"
