"""Dual-path GELAN detectors on a numpy autograd engine."""
