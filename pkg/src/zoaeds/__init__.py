"""Black-box defense by zeroth-order denoised smoothing with an autoencoder."""

__version__ = "0.1.0"
