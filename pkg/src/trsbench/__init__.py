"""Transferability-reduced smooth (TRS) ensembles: training, attacks, and bound checks."""

__version__ = "0.1.0"
