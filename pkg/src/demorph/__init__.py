"""Reference-free face demorphing with a coupled conditional diffusion model."""

__version__ = "0.1.0"
