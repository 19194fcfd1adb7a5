# aogdet/services/imaging.py
# Image ingestion, HOG feature pyramids and every raw feature extractor used by
# the model: part features, root features, deformation and pairwise features.

import logging
import os
from dataclasses import dataclass, field
from typing import Tuple

import numpy as np
from PIL import Image as PILImage, UnidentifiedImageError
from scipy import ndimage

from aogdet.errors import ConfigError, FormatError, ImageTooSmall, IoError, LevelMismatch, OutOfBounds

logger = logging.getLogger(__name__)

# Felzenszwalb-style truncation of block-normalized histograms.
HOG_TRUNCATION = 0.2
MIN_IMAGE_SIDE = 16
# PGM and PPM are read in their binary encodings only
BINARY_PNM_MAGIC = (b'P5', b'P6')


# --- 1. Domain types ---

@dataclass(frozen=True)
class Image:
    """8-bit image of at least 16x16 pixels, data laid out as (height, width, channels)."""
    width: int
    height: int
    channels: int
    data: np.ndarray

    def __post_init__(self):
        if self.channels not in (1, 3):
            raise FormatError(f"Unsupported channel count: {self.channels}")
        expected = (self.height, self.width, self.channels)
        if tuple(self.data.shape) != expected:
            raise FormatError(f"Pixel array shape {self.data.shape} does not match {expected}")
        if self.data.dtype != np.uint8:
            raise FormatError(f"Pixel data must be 8-bit, got {self.data.dtype}")
        if self.width < MIN_IMAGE_SIDE or self.height < MIN_IMAGE_SIDE:
            raise ImageTooSmall(f"Image {self.width}x{self.height} is below {MIN_IMAGE_SIDE}px per side",
                                width=self.width, height=self.height)

    @classmethod
    def from_array(cls, array):
        """Wraps a (h, w) or (h, w, 3) uint8-compatible array."""
        array = np.asarray(array)
        if array.ndim == 2:
            array = array[:, :, None]
        array = np.clip(np.rint(array), 0, 255).astype(np.uint8) if array.dtype != np.uint8 else array
        return cls(width=array.shape[1], height=array.shape[0], channels=array.shape[2],
                   data=np.ascontiguousarray(array))

    def luminance(self):
        """Float luminance plane (ITU-R 601 weights for color images)."""
        pixels = self.data.astype(np.float64)
        if self.channels == 1:
            return pixels[:, :, 0]
        return pixels @ np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class HogConfig:
    cell_size: int = 8
    orientation_bins: int = 9
    levels_per_octave: int = 5
    min_level_cells: int = 5
    block_norm_epsilon: float = 1e-4

    def __post_init__(self):
        if self.cell_size < 2:
            raise ConfigError(f"cell_size must be >= 2, got {self.cell_size}")
        if self.orientation_bins < 2:
            raise ConfigError(f"orientation_bins must be >= 2, got {self.orientation_bins}")
        if self.levels_per_octave < 1:
            raise ConfigError(f"levels_per_octave must be >= 1, got {self.levels_per_octave}")
        if self.min_level_cells < 1:
            raise ConfigError(f"min_level_cells must be >= 1, got {self.min_level_cells}")
        if self.block_norm_epsilon <= 0:
            raise ConfigError("block_norm_epsilon must be positive")

    @property
    def feature_dim(self):
        """Length of one cell descriptor (4 normalizations of the histogram)."""
        return self.orientation_bins * 4


@dataclass(frozen=True, order=True)
class Placement:
    level: int
    row: int
    col: int


@dataclass(frozen=True, order=True)
class PartShape:
    rows: int
    cols: int

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ConfigError(f"PartShape needs rows, cols >= 1, got ({self.rows}, {self.cols})")


@dataclass(frozen=True)
class HogLevel:
    scale_factor: float
    # actual (sy, sx) ratio of the resized image to the original
    pixel_scale: Tuple[float, float]
    full_res_grid: np.ndarray
    half_res_grid: np.ndarray


@dataclass(frozen=True)
class HogPyramid:
    levels: Tuple[HogLevel, ...]
    config: HogConfig
    image_size: Tuple[int, int] = field(default=(0, 0))  # (width, height)

    def window_box(self, p, shape, half=False):
        """Pixel box, in original image coordinates, covered by a window at p."""
        level = self.levels[p.level]
        cell = self.config.cell_size * (2 if half else 1)
        sy, sx = level.pixel_scale
        return (p.col * cell / sx, p.row * cell / sy,
                (p.col + shape.cols) * cell / sx, (p.row + shape.rows) * cell / sy)


# --- 2. Image ingestion ---

def _magic(path):
    with open(path, 'rb') as fh:
        return fh.read(2)


def load_image(path):
    """
    Decodes a PGM (P5), PPM (P6) or PNG file.
    ASCII variants (P2, P3) and bitmaps are rejected.

    Raises:
        IoError: missing or unreadable file
        FormatError: unsupported or corrupt encoding
        ImageTooSmall: fewer than 16 pixels per side
    """
    if not os.path.isfile(path) or not os.access(path, os.R_OK):
        raise IoError(f"Cannot read image file: {path}", path=path)

    try:
        with PILImage.open(path) as pil:
            if pil.format not in ('PPM', 'PNG'):
                raise FormatError(f"Unsupported image format {pil.format} in {path}", path=path)
            if pil.format == 'PPM' and _magic(path) not in BINARY_PNM_MAGIC:
                raise FormatError(f"Only binary PGM (P5) and PPM (P6) are supported: {path}", path=path)
            pil.load()
            if pil.mode in ('L', 'RGB'):
                decoded = pil
            elif pil.format == 'PNG' and pil.mode in ('LA', 'I;16', 'I'):
                decoded = pil.convert('L')
            elif pil.format == 'PNG':
                decoded = pil.convert('RGB')
            else:
                raise FormatError(f"Unsupported PNM mode {pil.mode} in {path}", path=path)
            array = np.asarray(decoded, dtype=np.uint8)
    except FormatError:
        raise
    except (UnidentifiedImageError, SyntaxError, ValueError, OSError, EOFError) as e:
        raise FormatError(f"Corrupt or unsupported image {path}: {e}", path=path)

    return Image.from_array(array)


def save_image(path, image):
    """Writes an Image as PGM/PPM (by channel count) or PNG (by extension)."""
    data = image.data[:, :, 0] if image.channels == 1 else image.data
    try:
        PILImage.fromarray(data).save(path)
    except (OSError, ValueError) as e:
        raise IoError(f"Cannot write image {path}: {e}", path=path)


# --- 3. HOG extraction ---

def _gradients(pixels, bins):
    """Per-pixel magnitude and unsigned orientation bin from the strongest channel."""
    padded = np.pad(pixels, ((1, 1), (1, 1), (0, 0)), mode='edge')
    dx = padded[1:-1, 2:, :] - padded[1:-1, :-2, :]
    dy = padded[2:, 1:-1, :] - padded[:-2, 1:-1, :]
    energy = dx * dx + dy * dy
    channel = np.argmax(energy, axis=2)[:, :, None]
    dx = np.take_along_axis(dx, channel, axis=2)[:, :, 0]
    dy = np.take_along_axis(dy, channel, axis=2)[:, :, 0]
    magnitude = np.sqrt(np.take_along_axis(energy, channel, axis=2)[:, :, 0])
    angle = np.mod(np.arctan2(dy, dx), np.pi)
    orientation = np.minimum((angle / np.pi * bins).astype(np.int64), bins - 1)
    return magnitude, orientation


def compute_hog_grid(pixels, cell_size, bins, epsilon):
    """
    HOG cell descriptors of a float image (h, w, c).

    Each cell's histogram is normalized by the energy of the four 2x2 cell
    blocks that contain it, truncated, and the four results concatenated.
    Border cells see edge-replicated neighbour energies.

    Returns:
        array (rows, cols, bins * 4); rows = h // cell_size
    """
    rows, cols = pixels.shape[0] // cell_size, pixels.shape[1] // cell_size
    if rows < 1 or cols < 1:
        return np.zeros((max(rows, 0), max(cols, 0), bins * 4))

    magnitude, orientation = _gradients(pixels, bins)
    magnitude = magnitude[:rows * cell_size, :cols * cell_size]
    orientation = orientation[:rows * cell_size, :cols * cell_size]

    cell_r = np.arange(rows * cell_size) // cell_size
    cell_c = np.arange(cols * cell_size) // cell_size
    index = ((cell_r[:, None] * cols + cell_c[None, :]) * bins + orientation).ravel()
    hist = np.bincount(index, weights=magnitude.ravel(), minlength=rows * cols * bins)
    hist = hist.reshape(rows, cols, bins)

    energy = np.pad((hist ** 2).sum(axis=2), 1, mode='edge')
    blocks = energy[:-1, :-1] + energy[1:, :-1] + energy[:-1, 1:] + energy[1:, 1:]
    parts = []
    for dr, dc in ((0, 0), (0, 1), (1, 0), (1, 1)):
        norm = 1.0 / np.sqrt(blocks[dr:dr + rows, dc:dc + cols] + epsilon)
        parts.append(np.minimum(hist * norm[:, :, None], HOG_TRUNCATION))
    return np.concatenate(parts, axis=2)


def build_hog_pyramid(image, config=None):
    """
    Builds the HOG pyramid of an image, finest level first.

    Consecutive levels differ by 2^(1/levels_per_octave); each level carries
    the full-resolution grid (part features) and a grid at twice the cell
    size (root features).

    Raises:
        ImageTooSmall: no level reaches min_level_cells cells per side
    """
    config = config or HogConfig()
    pixels = image.data.astype(np.float64)
    # Per-channel offset removal keeps the pyramid invariant to intensity shifts.
    pixels -= pixels.min(axis=(0, 1), keepdims=True)
    height, width = pixels.shape[:2]
    cell = config.cell_size

    levels = []
    index = 0
    while True:
        scale = 2.0 ** (-index / config.levels_per_octave)
        h_l, w_l = int(round(height * scale)), int(round(width * scale))
        if h_l // cell < config.min_level_cells or w_l // cell < config.min_level_cells:
            break
        if index == 0:
            resized = pixels
        else:
            resized = ndimage.zoom(pixels, (h_l / height, w_l / width, 1.0), order=1, mode='nearest')
        full = compute_hog_grid(resized, cell, config.orientation_bins, config.block_norm_epsilon)
        half = compute_hog_grid(resized, cell * 2, config.orientation_bins, config.block_norm_epsilon)
        if half.shape[0] < 1 or half.shape[1] < 1:
            break
        full.flags.writeable = False
        half.flags.writeable = False
        levels.append(HogLevel(scale_factor=scale,
                               pixel_scale=(resized.shape[0] / height, resized.shape[1] / width),
                               full_res_grid=full,
                               half_res_grid=half))
        index += 1

    if not levels:
        raise ImageTooSmall(
            f"Image {width}x{height} has fewer than {config.min_level_cells} cells of "
            f"{cell}px per side", width=width, height=height)

    logger.debug(f"HOG pyramid: {len(levels)} levels for {width}x{height} image")
    return HogPyramid(levels=tuple(levels), config=config, image_size=(width, height))


# --- 4. Window extractors ---

def _window(grid, p, shape):
    if p.row < 0 or p.col < 0 or p.row + shape.rows > grid.shape[0] or p.col + shape.cols > grid.shape[1]:
        raise OutOfBounds(
            f"Window {shape.rows}x{shape.cols} at ({p.row}, {p.col}) exceeds grid "
            f"{grid.shape[0]}x{grid.shape[1]} at level {p.level}")
    return grid[p.row:p.row + shape.rows, p.col:p.col + shape.cols].flatten()


def _level(pyramid, p):
    if not 0 <= p.level < len(pyramid.levels):
        raise OutOfBounds(f"Pyramid has no level {p.level}")
    return pyramid.levels[p.level]


def extract_part_feature(pyramid, p, shape):
    """Concatenated full-resolution cell descriptors of the window at p (phi^l)."""
    return _window(_level(pyramid, p).full_res_grid, p, shape)


def extract_root_feature(pyramid, p, shape):
    """Concatenated half-resolution cell descriptors of the window at p (phi^a)."""
    return _window(_level(pyramid, p).half_res_grid, p, shape)


# --- 5. Geometric features ---

def deformation_feature(anchor, p):
    """(dx, dy, dx^2, dy^2) of p relative to its anchor, in cells."""
    if anchor.level != p.level:
        raise LevelMismatch(f"Anchor at level {anchor.level}, placement at level {p.level}")
    dx = float(p.col - anchor.col)
    dy = float(p.row - anchor.row)
    return np.array([dx, dy, dx * dx, dy * dy])


def deformation_cost(weights, dy, dx):
    """weights . (dx, dy, dx^2, dy^2); dy/dx may be scalars or arrays."""
    return weights[0] * dx + weights[1] * dy + weights[2] * (dx * dx) + weights[3] * (dy * dy)


def _center(p, shape):
    return p.col + shape.cols / 2.0, p.row + shape.rows / 2.0


LEAF_PAIR_BINS = ('clockwise', 'anti-clockwise', 'near', 'far')
AND_PAIR_BINS = ('above', 'below', 'beside', 'overlap', 'near', 'far')


def leaf_pair_feature(p_i, shape_i, p_j, shape_j, anchor_i, anchor_j):
    """
    Binary (clockwise, anti-clockwise, near, far) relation of leaf j to leaf i.

    near: j's center lies in i's window dilated by one window width/height on
    each side. Rotation compares the anchor-to-anchor segment with the deformed
    center-to-center segment; zero deviation counts as clockwise.
    """
    if len({p_i.level, p_j.level, anchor_i.level, anchor_j.level}) != 1:
        raise LevelMismatch("Leaf pair feature needs all placements on one level")

    feature = np.zeros(4)
    ax0, ay0 = _center(anchor_i, shape_i)
    ax1, ay1 = _center(anchor_j, shape_j)
    dx0, dy0 = _center(p_i, shape_i)
    dx1, dy1 = _center(p_j, shape_j)
    a_x, a_y = ax1 - ax0, ay1 - ay0
    d_x, d_y = dx1 - dx0, dy1 - dy0
    # image rows grow downwards, so a positive cross product turns clockwise on screen
    cross = a_x * d_y - a_y * d_x
    feature[0 if cross >= 0 else 1] = 1.0

    inside_x = p_i.col - shape_i.cols <= dx1 < p_i.col + 2 * shape_i.cols
    inside_y = p_i.row - shape_i.rows <= dy1 < p_i.row + 2 * shape_i.rows
    feature[2 if (inside_x and inside_y) else 3] = 1.0
    return feature


def and_pair_feature(box_r, box_rp):
    """
    Binary (above, below, beside, overlap, near, far) relation of box_rp's
    center to box_r: bands are one box dimension wide, near is the box dilated
    by two box dimensions on each side. Exactly one bin is set.
    """
    x0, y0, x1, y1 = box_r
    w, h = x1 - x0, y1 - y0
    cx, cy = (box_rp[0] + box_rp[2]) / 2.0, (box_rp[1] + box_rp[3]) / 2.0
    in_x = x0 <= cx < x1
    in_y = y0 <= cy < y1

    feature = np.zeros(6)
    if in_x and in_y:
        feature[3] = 1.0
    elif in_x and y0 - h <= cy < y0:
        feature[0] = 1.0
    elif in_x and y1 <= cy < y1 + h:
        feature[1] = 1.0
    elif in_y and (x0 - w <= cx < x0 or x1 <= cx < x1 + w):
        feature[2] = 1.0
    elif x0 - 2 * w <= cx < x1 + 2 * w and y0 - 2 * h <= cy < y1 + 2 * h:
        feature[4] = 1.0
    else:
        feature[5] = 1.0
    return feature


# --- 6. Filter visualization ---

def render_hog_glyphs(weights, shape, bins=9, cell_pixels=20):
    """
    Draws the positive part of a HOG filter as oriented strokes, one glyph per
    cell, the way learned part templates are usually inspected.

    Returns:
        Image (grayscale)
    """
    grid = np.asarray(weights, dtype=np.float64).reshape(shape.rows, shape.cols, bins * 4)
    strength = np.maximum(grid, 0).reshape(shape.rows, shape.cols, 4, bins).sum(axis=2)
    peak = strength.max()
    canvas = np.zeros((shape.rows * cell_pixels, shape.cols * cell_pixels))
    if peak <= 0:
        return Image.from_array(canvas)

    half = cell_pixels / 2.0
    t = np.linspace(-half + 1, half - 1, cell_pixels * 2)
    for b in range(bins):
        # edges run perpendicular to the gradient orientation of the bin
        theta = (b + 0.5) * np.pi / bins + np.pi / 2
        xs, ys = np.cos(theta) * t, np.sin(theta) * t
        for r in range(shape.rows):
            for c in range(shape.cols):
                value = 255.0 * strength[r, c, b] / peak
                if value <= 0:
                    continue
                px = np.clip((c * cell_pixels + half + xs).astype(int), 0, canvas.shape[1] - 1)
                py = np.clip((r * cell_pixels + half + ys).astype(int), 0, canvas.shape[0] - 1)
                canvas[py, px] = np.maximum(canvas[py, px], value)
    return Image.from_array(canvas)
