"""Learning-based fast uplink grant simulation for massive machine-type traffic."""

__version__ = "0.1.0"
