"""Target-guided dynamic mixup for cross-domain few-shot learning, in numpy."""
__version__ = "0.1.0"
