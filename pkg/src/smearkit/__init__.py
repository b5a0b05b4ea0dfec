"""Desk-scale Gram-smear species identification toolkit.

Pipeline: instance segmentation -> cell-centered patch bags -> multi-head
attention MIL pooling -> species classification, with patient-stratified
cross-validated evaluation, a synthetic smear generator for verification,
and an active-learning annotation service.
"""

__version__ = "0.1.0"
