"""Time-equivariant contrastive pretraining on longitudinal visit sequences."""

__version__ = "0.1.0"
