"""Adversarial self-supervised distillation with projected features.

Modules: ``data``, ``augment``, ``models``, ``losses``, ``attacks``,
``training``, ``evaluation``, ``experiment`` and ``cli``.
"""

__version__ = "0.1.0"
