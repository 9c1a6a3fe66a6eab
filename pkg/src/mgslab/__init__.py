"""MLE-guided parameter search for sequence models, with its baselines and oracles."""

__version__ = "0.1.0"
