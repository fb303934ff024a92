"""Finite-element simulation of a pneumatically actuated soft arm with a PI pressure controller."""

__version__ = "0.1.0"
