"""Desk-scale chart component segmentation and chart question answering.

Everything runs on a small numpy-backed reverse-mode autodiff core
(:mod:`chartlab.tensor`); no deep-learning framework is involved.
"""

__version__ = "0.1.0"
