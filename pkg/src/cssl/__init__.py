"""Continual self-supervised pretraining with latent replay and feature distillation.

A small numpy autograd engine drives a masked autoencoder, a k-means replay
buffer of encoder features, and a Wasserstein plus batch-ensemble
distillation loss across sequential pretraining stages.
"""
__version__ = "0.1.0"
