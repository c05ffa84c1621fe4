"""Desk-scale lab for crafting and scoring universal face-spoofing perturbations."""

__version__ = "0.1.0"
