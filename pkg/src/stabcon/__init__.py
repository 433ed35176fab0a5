"""Stability-constraint compiler: metrics over commitment scenarios, compiled to SOC surrogates."""

__version__ = "0.1.0"
