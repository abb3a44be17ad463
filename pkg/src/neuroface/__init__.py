"""Biomechanical face-head-neck simulation and AU-driven expression transfer."""

__version__ = "0.1.0"
