"""Spatio-temporal driver action classification pipeline.

Sparse frame selection, optical-flow-fused inputs, a shared-weight CNN
backbone with an MLP head, and a training/evaluation harness with
subject-disjoint cross validation.
"""

__version__ = "0.1.0"
