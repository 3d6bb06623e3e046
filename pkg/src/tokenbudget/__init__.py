"""Supervised visual-token reduction: importance predictor, anchor-context
merging, attention-derived pseudo-labels and operation accounting."""

__version__ = "0.1.0"
