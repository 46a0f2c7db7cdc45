"""Two-stage gap filling for stripe-gapped imagery: latent residual-shifting
diffusion followed by mask-guided pixel-space harmonization."""

__version__ = "0.1.0"
