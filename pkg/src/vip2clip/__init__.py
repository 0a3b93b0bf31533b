"""Zero-shot anomaly detection with image-conditioned prompts over a frozen dual encoder."""

__version__ = "0.1.0"
