import filecmp
import os

import numpy as np
import pytest

from aogdet.errors import ConfigError
from aogdet.models import SLOTS
from aogdet.services.datasets import load_manifest
from aogdet.services.imaging import compute_hog_grid
from aogdet.services.synthetic import (MIN_HAMMING, PRIMITIVES, VIEW_SHAPES, SynthConfig, build_archetypes,
                                       generate_synthetic_corpus, parse_sharing_pairs, primitive_kind, render_scene)

SMALL = SynthConfig(classes=3, views=1, archetypes_per_slot=1, sharing_pairs=((0, 2, 4),), image_size=64,
                    noise=0.1, train_images=4, test_images=2, background_images=2, seed=11)


def test_same_seed_same_corpus(tmp_path):
    first = generate_synthetic_corpus(str(tmp_path / 'a'), SMALL)
    generate_synthetic_corpus(str(tmp_path / 'b'), SMALL)
    for split in ('train', 'test'):
        names = sorted(os.listdir(tmp_path / 'a' / split))
        assert names == sorted(os.listdir(tmp_path / 'b' / split))
        _, mismatch, errors = filecmp.cmpfiles(tmp_path / 'a' / split, tmp_path / 'b' / split, names, shallow=False)
        assert not mismatch and not errors
    assert (tmp_path / 'a' / 'train.txt').read_text() == (tmp_path / 'b' / 'train.txt').read_text()
    assert first.train_path == str(tmp_path / 'a' / 'train.txt')


def test_manifests_describe_the_images(tmp_path):
    corpus = generate_synthetic_corpus(str(tmp_path), SMALL)
    train = load_manifest(corpus.train_path)
    test = load_manifest(corpus.test_path)
    assert (train.split, test.split) == ('train', 'test')
    assert len(train.entries) == SMALL.train_images + SMALL.background_images
    assert len(test.entries) == SMALL.test_images
    for entry in train.entries + test.entries:
        for label, (x0, y0, x1, y1) in entry.annotations:
            assert label in {'class0', 'class1', 'class2'}
            assert 0 <= x0 < x1 <= SMALL.image_size and 0 <= y0 < y1 <= SMALL.image_size


def slot_descriptors(config, bank, rng, class_index, slot, count=16):
    """HOG descriptors of one slot's region, cropped from freshly rendered scenes."""
    row, col = divmod(slot, 3)
    height, width = VIEW_SHAPES[0]
    part_h, part_w = height // 3, width // 3
    rows = []
    for _ in range(count):
        image, annotations = render_scene(config, bank, rng, [(class_index, 0)])
        x0, y0 = (int(v) for v in annotations[0][1][:2])
        crop = image.data[y0 + row * part_h:y0 + (row + 1) * part_h, x0 + col * part_w:x0 + (col + 1) * part_w]
        rows.append(compute_hog_grid(crop.astype(np.float64), 4, 9, 1e-4).ravel())
    return np.vstack(rows)


def test_shared_slot_patches_look_alike_across_classes():
    config = SynthConfig(classes=2, views=1, archetypes_per_slot=1, sharing_pairs=((0, 1, 4),), image_size=64,
                         noise=0.1, seed=5)
    rng = np.random.default_rng(5)
    bank = build_archetypes(config, rng)
    shared = [slot_descriptors(config, bank, rng, c, 4) for c in (0, 1)]
    own = [slot_descriptors(config, bank, rng, c, 3) for c in (0, 1)]

    within = np.mean(np.linalg.norm(shared[0] - shared[0].mean(axis=0), axis=1))
    across_shared = np.linalg.norm(shared[0].mean(axis=0) - shared[1].mean(axis=0))
    across_own = np.linalg.norm(own[0].mean(axis=0) - own[1].mean(axis=0))
    assert across_shared < within
    assert across_own > across_shared


def test_archetypes_mix_all_primitive_kinds():
    bank = build_archetypes(SynthConfig(classes=4, archetypes_per_slot=2, sharing_pairs=()),
                            np.random.default_rng(3))
    codes = {int(code) for entries in bank.values() for arch in entries for code in arch.ravel()}
    assert codes <= set(range(PRIMITIVES))
    assert {primitive_kind(code) for code in codes} == {'bar', 'corner', 'blob'}


def test_archetypes_are_distinct():
    config = SynthConfig(classes=2, archetypes_per_slot=2, sharing_pairs=())
    bank = build_archetypes(config, np.random.default_rng(2))
    drawn = [arch for entries in bank.values() for arch in entries]
    assert len(drawn) == 2 * SLOTS * 2
    for i in range(len(drawn)):
        for j in range(i + 1, len(drawn)):
            assert np.count_nonzero(drawn[i] != drawn[j]) >= MIN_HAMMING


def test_noise_free_objects_render_identically():
    config = SynthConfig(classes=1, views=1, archetypes_per_slot=1, sharing_pairs=(), image_size=128, noise=0.0)
    rng = np.random.default_rng(4)
    bank = build_archetypes(config, rng)
    crops = []
    for _ in range(3):
        image, annotations = render_scene(config, bank, rng, [(0, 0)])
        x0, y0, x1, y1 = (int(v) for v in annotations[0][1])
        crops.append(image.data[y0:y1, x0:x1])
    assert all(np.array_equal(crops[0], crop) for crop in crops[1:])


class TestConfig:
    def test_parse_sharing_pairs(self):
        assert parse_sharing_pairs(['0:1:7', '2:3:0']) == ((0, 1, 7), (2, 3, 0))
        with pytest.raises(ConfigError):
            parse_sharing_pairs(['0:1'])
        with pytest.raises(ConfigError):
            parse_sharing_pairs(['a:1:2'])

    def test_invalid_settings(self):
        with pytest.raises(ConfigError):
            SynthConfig(sharing_pairs=((1, 1, 0),))
        with pytest.raises(ConfigError):
            SynthConfig(sharing_pairs=((0, 9, 0),))
        with pytest.raises(ConfigError):
            SynthConfig(image_size=50)
        with pytest.raises(ConfigError):
            SynthConfig(views=3)

    def test_single_view_fits_small_images(self):
        assert SynthConfig(views=1, image_size=64, sharing_pairs=()).image_size == 64
