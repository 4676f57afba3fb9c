"""Bi-trajectory co-distillation of paired image-text data, at desk scale.

Modules: ``tensor`` (graph-building autodiff), ``datagen`` (synthetic paired
data), ``model`` (encoders and contrastive loss), ``experts`` (trajectories),
``coresets``, ``distill``, ``retrieval`` and ``cli``.
"""

__version__ = "0.1.0"
