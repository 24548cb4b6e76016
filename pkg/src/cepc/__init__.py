"""Multi-source domain adaptation with coordinated encoders and paired classifiers."""

__version__ = "0.1.0"
