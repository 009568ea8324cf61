"""Levitated-nanoparticle Fano force sensing: simulation, spectra, fits and inversion."""

__version__ = "0.1.0"
