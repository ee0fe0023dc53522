"""Desk-scale domain-adaptive object detection.

A toy two-stage detector trained across a synthetic clean-to-foggy domain
shift, with hierarchical adversarial domain classifiers (gradient reversal),
a gradient-detached context sub-network, an instance-context alignment loss
and a reproducible experiment harness (ablations, sweeps, feature dumps).
"""

__version__ = "0.1.0"
