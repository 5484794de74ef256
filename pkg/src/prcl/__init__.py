"""Gradient-ranked mixed-precision layouts for small neural networks.

The package trains desk-scale networks with its own reverse-mode autodiff,
profiles per-unit sensitivities, assigns quantization levels to units and
measures the resulting loss change by noise injection.
"""

__version__ = "0.1.0"
