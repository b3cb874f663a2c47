"""Compound batch normalization for long-tailed classification.

Gaussian-mixture feature normalization estimated with moving-average EM,
class-split normalization, and a dual-path training harness, all with
hand-written forward and backward passes on top of numpy.
"""

__version__ = "0.1.0"
