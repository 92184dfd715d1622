"""Etch-pit analysis pipeline for KOH-etched SiC wafer micrographs."""

__version__ = "0.1.0"
