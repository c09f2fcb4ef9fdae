"""Shape, texture, appearance and directional (STAD) liver features."""
from .extract import FEATURE_NAMES, StadFeatureVector, StadParams, extract_stad

__all__ = ["FEATURE_NAMES", "StadFeatureVector", "StadParams", "extract_stad"]
