"""From-scratch CNN training engine and experiment harness for 3-class chest X-ray classification."""

__version__ = "0.1.0"
