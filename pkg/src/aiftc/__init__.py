"""Fault-tolerant unbiased active inference control of a simulated 2-DOF arm."""

__version__ = "0.1.0"
