"""Explainability-guided evasion measurement for boolean-feature malware detectors."""

__version__ = "0.1.0"
