"""Self-supervised latent-domain mining with domain-routed CTR prediction."""

__version__ = "0.1.0"
