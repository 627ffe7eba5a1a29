"""Multi-view contrastive learning for online knowledge distillation.

Peers trained jointly with cross-entropy, distillation from their online
ensemble, and pairwise NCE contrastive losses over memory-bank negatives;
only the last peer is kept for deployment.
"""
__version__ = "0.1.0"
