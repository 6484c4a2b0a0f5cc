"""Popularity-bias deconfounding (PD/PDA) and multi-behavior debiasing (MBD) for MF recommenders."""

__version__ = "0.1.0"
