import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image as PILImage

from aogdet.errors import FormatError, ImageTooSmall, IoError, LevelMismatch, OutOfBounds
from aogdet.services.imaging import (HOG_TRUNCATION, HogConfig, Image, PartShape, Placement, and_pair_feature,
                                     build_hog_pyramid, compute_hog_grid, deformation_feature,
                                     extract_part_feature, extract_root_feature, leaf_pair_feature, load_image,
                                     render_hog_glyphs, save_image)

from conftest import SMALL_HOG, random_image


def scalar_hog(pixels, cell, bins, eps):
    """Cell-by-cell reference of the HOG descriptor."""
    h, w, channels = pixels.shape
    rows, cols = h // cell, w // cell
    hist = np.zeros((rows, cols, bins))
    for y in range(rows * cell):
        for x in range(cols * cell):
            best = (-1.0, 0.0, 0.0)
            for c in range(channels):
                dx = pixels[y, min(x + 1, w - 1), c] - pixels[y, max(x - 1, 0), c]
                dy = pixels[min(y + 1, h - 1), x, c] - pixels[max(y - 1, 0), x, c]
                if dx * dx + dy * dy > best[0]:
                    best = (dx * dx + dy * dy, dx, dy)
            energy, dx, dy = best
            angle = np.mod(np.arctan2(dy, dx), np.pi)
            b = min(int(angle / np.pi * bins), bins - 1)
            hist[y // cell, x // cell, b] += np.sqrt(energy)

    cell_energy = (hist ** 2).sum(axis=2)

    def e(r, c):
        return cell_energy[min(max(r, 0), rows - 1), min(max(c, 0), cols - 1)]

    out = np.zeros((rows, cols, 4 * bins))
    for r in range(rows):
        for c in range(cols):
            for part, (dr, dc) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
                block = sum(e(r + dr + i, c + dc + j) for i in (-1, 0) for j in (-1, 0))
                out[r, c, part * bins:(part + 1) * bins] = np.minimum(hist[r, c] / np.sqrt(block + eps),
                                                                      HOG_TRUNCATION)
    return out


class TestImage:
    def test_from_array_gray(self):
        image = Image.from_array(np.zeros((16, 21)))
        assert (image.width, image.height, image.channels) == (21, 16, 1)

    def test_rejects_images_below_minimum_side(self):
        with pytest.raises(ImageTooSmall):
            Image.from_array(np.zeros((15, 40)))
        with pytest.raises(ImageTooSmall):
            Image(width=8, height=32, channels=1, data=np.zeros((32, 8, 1), dtype=np.uint8))

    def test_rejects_bad_channel_count(self):
        with pytest.raises(FormatError):
            Image(width=2, height=2, channels=2, data=np.zeros((2, 2, 2), dtype=np.uint8))

    def test_save_and_load(self, tmp_path, rng):
        image = random_image(rng, 20, 30)
        path = str(tmp_path / 'x.pgm')
        save_image(path, image)
        loaded = load_image(path)
        assert np.array_equal(loaded.data, image.data)

    def test_color_png(self, tmp_path, rng):
        image = random_image(rng, 16, 16, channels=3)
        path = str(tmp_path / 'x.png')
        save_image(path, image)
        assert load_image(path).channels == 3

    def test_missing_file(self, tmp_path):
        with pytest.raises(IoError):
            load_image(str(tmp_path / 'nothing.pgm'))

    def test_ascii_pnm_is_rejected(self, tmp_path):
        path = tmp_path / 'ascii.pgm'
        pixels = ' '.join('128' for _ in range(16 * 16))
        path.write_text(f'P2\n16 16\n255\n{pixels}\n')
        with pytest.raises(FormatError):
            load_image(str(path))

    def test_small_file_is_rejected(self, tmp_path):
        path = str(tmp_path / 'small.pgm')
        PILImage.new('L', (8, 8), 90).save(path)
        with pytest.raises(ImageTooSmall):
            load_image(path)

    def test_corrupt_file(self, tmp_path):
        path = tmp_path / 'broken.pgm'
        path.write_bytes(b'P5\n4 4\n255\n\x00\x01')
        with pytest.raises(FormatError):
            load_image(str(path))


class TestHog:
    def test_matches_scalar_reference(self, rng):
        pixels = rng.integers(0, 256, size=(24, 20, 3)).astype(np.float64)
        fast = compute_hog_grid(pixels, 4, 9, 1e-4)
        slow = scalar_hog(pixels, 4, 9, 1e-4)
        assert fast.shape == (6, 5, 36)
        assert np.allclose(fast, slow, atol=1e-12)

    def test_values_truncated(self, rng):
        grid = compute_hog_grid(rng.integers(0, 256, size=(32, 32, 1)).astype(np.float64), 8, 9, 1e-4)
        assert grid.min() >= 0.0
        assert grid.max() <= HOG_TRUNCATION

    def test_flat_image_has_no_gradient(self):
        grid = compute_hog_grid(np.full((16, 16, 1), 90.0), 4, 9, 1e-4)
        assert not grid.any()

    def test_pyramid_levels_shrink(self, rng):
        pyramid = build_hog_pyramid(random_image(rng, 64, 64), SMALL_HOG)
        scales = [level.scale_factor for level in pyramid.levels]
        assert scales[0] == 1.0
        assert all(a > b for a, b in zip(scales, scales[1:]))
        for level in pyramid.levels:
            assert level.full_res_grid.shape[0] >= SMALL_HOG.min_level_cells
            assert level.full_res_grid.shape[2] == SMALL_HOG.feature_dim

    def test_pyramid_ignores_intensity_offset(self, rng):
        data = rng.integers(0, 200, size=(40, 40))
        a = build_hog_pyramid(Image.from_array(data), SMALL_HOG)
        b = build_hog_pyramid(Image.from_array(data + 30), SMALL_HOG)
        for la, lb in zip(a.levels, b.levels):
            assert np.allclose(la.full_res_grid, lb.full_res_grid)

    def test_too_small(self):
        with pytest.raises(ImageTooSmall):
            build_hog_pyramid(Image.from_array(np.zeros((24, 24))), HogConfig())

    def test_window_out_of_bounds(self, toy_pyramid):
        grid = toy_pyramid.levels[0].full_res_grid
        with pytest.raises(OutOfBounds):
            extract_part_feature(toy_pyramid, Placement(0, grid.shape[0] - 1, 0), PartShape(2, 2))
        with pytest.raises(OutOfBounds):
            extract_root_feature(toy_pyramid, Placement(len(toy_pyramid.levels), 0, 0), PartShape(1, 1))

    def test_window_feature_length(self, toy_pyramid):
        feature = extract_part_feature(toy_pyramid, Placement(0, 1, 2), PartShape(2, 3))
        assert feature.shape == (2 * 3 * SMALL_HOG.feature_dim,)


class TestGeometry:
    def test_deformation_feature(self):
        assert np.array_equal(deformation_feature(Placement(0, 4, 4), Placement(0, 6, 3)), [-1, 2, 1, 4])

    def test_deformation_needs_one_level(self):
        with pytest.raises(LevelMismatch):
            deformation_feature(Placement(0, 0, 0), Placement(1, 0, 0))

    @given(st.tuples(*[st.integers(-50, 50)] * 4), st.integers(1, 20), st.integers(1, 20))
    @settings(max_examples=200, deadline=None)
    def test_and_pair_one_hot(self, other, w, h):
        box = (0.0, 0.0, float(w), float(h))
        x, y, dw, dh = other
        feature = and_pair_feature(box, (x, y, x + abs(dw) + 1, y + abs(dh) + 1))
        assert feature.sum() == 1.0

    def test_and_pair_bins(self):
        box = (10, 10, 20, 20)
        assert np.argmax(and_pair_feature(box, (12, 12, 18, 18))) == 3
        assert np.argmax(and_pair_feature(box, (10, 0, 20, 10))) == 0
        assert np.argmax(and_pair_feature(box, (10, 20, 20, 30))) == 1
        assert np.argmax(and_pair_feature(box, (20, 10, 30, 20))) == 2
        assert np.argmax(and_pair_feature(box, (28, 28, 34, 34))) == 4
        assert np.argmax(and_pair_feature(box, (200, 200, 210, 210))) == 5

    def test_leaf_pair_sets_rotation_and_distance(self):
        shape = PartShape(2, 2)
        at = Placement(0, 0, 0)
        feature = leaf_pair_feature(at, shape, Placement(0, 0, 2), shape, at, Placement(0, 0, 2))
        assert feature[0] + feature[1] == 1.0
        assert feature[2] + feature[3] == 1.0
        assert feature[2] == 1.0
        far = leaf_pair_feature(at, shape, Placement(0, 9, 9), shape, at, Placement(0, 0, 2))
        assert far[3] == 1.0


def test_glyphs_render_positive_weights():
    shape = PartShape(2, 2)
    weights = np.zeros(2 * 2 * 36)
    weights[3] = 1.0
    glyphs = render_hog_glyphs(weights, shape, bins=9, cell_pixels=10)
    assert (glyphs.height, glyphs.width) == (20, 20)
    assert glyphs.data.max() == 255
    assert not render_hog_glyphs(-np.ones(2 * 2 * 36), shape).data.any()
