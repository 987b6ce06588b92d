"""Underwater dense stereo reconstruction toolkit.

Bubble-robust multi-scale CNN patch matching, mask-constrained cost
volumes with semi-global aggregation, refraction-aware rectification,
procedural bubble augmentation for transfer training, CNN texture
recovery, and metric point-cloud export.
"""

__version__ = "0.1.0"
