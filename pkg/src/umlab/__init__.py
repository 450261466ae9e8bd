"""Desk-scale unsupervised meta-learning over vector datasets.

Subpackages cover data synthesis and pseudo-episodes, task re-splitting,
similarity metrics and the episode loss, mixed-support distractors, the
set-to-set projection head, a small MLP with explicit gradients, training
and fine-tuning loops, and few-shot/linear-probe evaluation.
"""

__version__ = "0.1.0"
