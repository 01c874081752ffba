"""Continuous-time recurrent networks for retinal spike-rate prediction."""

__version__ = "0.1.0"
