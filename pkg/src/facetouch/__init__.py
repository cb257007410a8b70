"""Hand-to-face touch detection: contrastive training, cascade inference, metrics."""

__version__ = "0.1.0"
