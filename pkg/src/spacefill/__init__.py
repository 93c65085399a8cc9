"""Space-filling input design for known nonlinear state-space systems."""

__version__ = "0.1.0"
