"""Portrait relighting from OLAT captures and latent-space appearance editing."""

from . import envmap, latent, metrics, olat, radiometry, training

__all__ = ["envmap", "latent", "metrics", "olat", "radiometry", "training"]
__version__ = "0.1.0"
