"""Contrastive numeric/symbolic encoders, a latent-conditioned expression
decoder and latent-space search for symbolic regression."""

__version__ = "0.1.0"
