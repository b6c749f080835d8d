"""Image-to-video person re-identification with joint verification and identification losses."""

__version__ = "0.1.0"
