# aogdet/utils/__init__.py
"""
Utility functions package.

This package contains reusable helpers organized by domain:
- general.py: box geometry and JSON-safe conversion
- math_utils.py: grid resampling and robust point-set statistics
"""

from .general import box_area, box_intersection, convert_to_json_safe
from .math_utils import resample_grid, median_pairwise_distance, principal_spread

__all__ = [
    'box_area',
    'box_intersection',
    'convert_to_json_safe',
    'resample_grid',
    'median_pairwise_distance',
    'principal_spread',
]
