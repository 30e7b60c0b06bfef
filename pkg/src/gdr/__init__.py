"""Geodesic density regression of image time-series with artifact masks."""

__version__ = "0.1.0"
