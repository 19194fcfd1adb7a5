# aogdet/utils/general.py
"""
General-purpose helpers.

Boxes are (x_min, y_min, x_max, y_max) in pixels, inclusive-exclusive, so a
box's area is (x_max - x_min) * (y_max - y_min).
"""

import math

import numpy as np


def box_area(box):
    x0, y0, x1, y1 = box
    return max(0.0, x1 - x0) * max(0.0, y1 - y0)


def box_intersection(a, b):
    """Area of the overlap of two boxes (0 when disjoint)."""
    w = min(a[2], b[2]) - max(a[0], b[0])
    h = min(a[3], b[3]) - max(a[1], b[1])
    if w <= 0 or h <= 0:
        return 0.0
    return w * h


def convert_to_json_safe(obj):
    """
    Recursively converts values to JSON-safe types.
    numpy scalars/arrays become Python numbers/lists; NaN and infinities become None.
    """
    if isinstance(obj, dict):
        return {str(k): convert_to_json_safe(v) for k, v in obj.items()}
    elif isinstance(obj, (list, tuple)):
        return [convert_to_json_safe(i) for i in obj]
    elif isinstance(obj, np.ndarray):
        return convert_to_json_safe(obj.tolist())
    elif isinstance(obj, np.integer):
        return int(obj)
    elif isinstance(obj, (float, np.floating)):
        value = float(obj)
        if math.isnan(value) or math.isinf(value):
            return None
        return value
    return obj
