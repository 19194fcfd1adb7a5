# aogdet/utils/math_utils.py
"""
Numerical helpers shared by clustering and structure learning.
"""

import numpy as np
from scipy import ndimage
from scipy.spatial.distance import pdist


def resample_grid(grid, shape):
    """
    Bilinear resampling of a (rows, cols, features) HOG grid to shape
    (new_rows, new_cols). Returns a copy unchanged when the shape already matches.
    """
    grid = np.asarray(grid, dtype=np.float64)
    rows, cols = shape
    if grid.shape[:2] == (rows, cols):
        return grid.copy()
    factors = (rows / grid.shape[0], cols / grid.shape[1], 1.0)
    return ndimage.zoom(grid, factors, order=1, mode='nearest', grid_mode=False)


def median_pairwise_distance(points):
    """Median Euclidean distance over all point pairs (0.0 for fewer than 2 points)."""
    points = np.asarray(points, dtype=np.float64)
    if len(points) < 2:
        return 0.0
    return float(np.median(pdist(points)))


def principal_spread(points):
    """
    Standard deviation of a point set along its principal axis.

    Returns:
        (spread, axis): spread >= 0 and the unit principal direction
    """
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if n < 2:
        return 0.0, np.zeros(points.shape[1] if points.ndim == 2 else 0)
    centered = points - points.mean(axis=0)
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    return float(s[0] / np.sqrt(n)), vt[0]
