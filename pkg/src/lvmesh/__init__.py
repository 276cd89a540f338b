"""Dynamic left-ventricle myocardial model construction from 4D image sequences."""

__version__ = "0.1.0"
