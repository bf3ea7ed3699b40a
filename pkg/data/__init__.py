"""
Data module for the road-sign attack toolkit.
This module contains the synthetic sign generators used by the toy and desk configs.
"""
