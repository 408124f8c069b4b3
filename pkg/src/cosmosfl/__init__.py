"""Model-agnostic clustered personalized federated learning via pseudo-label exchange."""

__version__ = "0.1.0"
