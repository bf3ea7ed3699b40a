"""
Road-Sign Attack Toolkit.
This package trains road-sign classifiers and attention networks, learns
universal attention-weighted targeted perturbations against them and compares
those with RP2 and single-image baselines.
"""

# Version information
__version__ = '1.0.0'
