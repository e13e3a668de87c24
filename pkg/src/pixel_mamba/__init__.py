"""Pixel-Mamba - hierarchical state-space modelling of gigapixel images."""

__version__ = "0.1.0"
__author__ = "Guilherme Gouw"
__email__ = "guilherme.gouw@gmail.com"
