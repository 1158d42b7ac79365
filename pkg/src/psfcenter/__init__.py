"""Optical-center estimation from bundles of PSF principal axes."""

__version__ = "0.1.0"
