"""uwbmesh: deterministic simulation of a sovereign UWB data network."""

__version__ = "0.1.0"
