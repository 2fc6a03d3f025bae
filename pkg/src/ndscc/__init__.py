"""Simulation and analysis of nanodiamond NV charge and spin-to-charge readout."""

__version__ = "0.1.0"
