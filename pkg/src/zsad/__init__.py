"""Zero-shot anomaly detection with decoupled fixed and learnable text prompts."""

__version__ = "0.1.0"
