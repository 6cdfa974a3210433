"""Measure-valued single-server queue dynamics and their mean-field network."""

__version__ = "0.1.0"
