"""Low-dose CT restoration: fan-beam simulation, projection-domain
self-supervised denoising, latent diffusion refinement and image fusion."""

__version__ = "0.1.0"
