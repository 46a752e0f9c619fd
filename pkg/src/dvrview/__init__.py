"""Viewpoint estimation for direct volume rendering.

Modules: ``viewsphere`` (equal-area sphere labels), ``volume``, ``transfer``,
``render`` (raycaster), ``datagen`` (randomized training images), ``model``
(numpy CNN and losses), ``evaluation``, ``selection`` (viewing maps and
voting) and ``cli``.
"""
__version__ = "0.1.0"
