# tests/conftest.py
# Shared fixtures: small HOG settings, random toy graphs and a tiny corpus.

import numpy as np
import pytest

from aogdet.models import SLOT_EDGES, SLOTS, AndOrGraph, part_shape_for
from aogdet.services.imaging import HogConfig, Image, PartShape, build_hog_pyramid
from aogdet.services.inference import DetectionConfig
from aogdet.services.synthetic import SynthConfig, generate_synthetic_corpus

SMALL_HOG = HogConfig(cell_size=4, orientation_bins=9, levels_per_octave=2, min_level_cells=3)


def random_image(rng, height=48, width=48, channels=1):
    return Image.from_array(rng.integers(0, 256, size=(height, width, channels)))


def random_graph(rng, classes=('a',), views=1, max_children=1, leaf_edges=False, and_edges=False,
                 root_shape=PartShape(3, 3), feature_dim=None):
    """
    Graph with random weights: `max_children` leaves per or-node (at least one),
    convex deformation costs and optional random edges on every candidate pair.
    """
    feature_dim = feature_dim or SMALL_HOG.feature_dim
    graph = AndOrGraph(feature_dim=feature_dim)
    part = part_shape_for(root_shape)
    for name in classes:
        for view in range(views):
            r = graph.add_and_node(name, view, root_shape,
                                   weights=rng.normal(size=root_shape.rows * root_shape.cols * feature_dim),
                                   bias=float(rng.normal()))
            for slot in range(SLOTS):
                for _ in range(int(rng.integers(1, max_children + 1)) - 1):
                    graph.attach_leaf(r, slot, graph.add_leaf(slot, part))
                node = graph.or_node(r, slot)
                node.deform_weights = np.array([rng.normal() * 0.1, rng.normal() * 0.1,
                                                rng.uniform(0.05, 0.5), rng.uniform(0.05, 0.5)])
    for leaf in graph.leaves:
        leaf.weights = rng.normal(size=leaf.weights.size)
    if leaf_edges:
        for r in range(1, graph.m + 1):
            for slot_a, slot_b in SLOT_EDGES:
                for a in graph.or_node(r, slot_a).children:
                    for b in graph.or_node(r, slot_b).children:
                        graph.edges.leaf_edges[(a, b)] = rng.normal(size=4)
    if and_edges:
        for r in range(1, graph.m + 1):
            for rp in range(1, graph.m + 1):
                graph.edges.and_edges[(r, rp)] = rng.normal(size=6)
    return graph


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def small_hog():
    return SMALL_HOG


@pytest.fixture
def detection_config():
    return DetectionConfig(hog=SMALL_HOG, search_radius=2, threshold=-1.0, nms_iou=0.5)


@pytest.fixture
def toy_pyramid(rng):
    return build_hog_pyramid(random_image(rng), SMALL_HOG)


@pytest.fixture(scope='session')
def tiny_corpus(tmp_path_factory):
    """Two classes, one view, 64x64 images: small enough for a full training step."""
    out = tmp_path_factory.mktemp('tiny_corpus')
    config = SynthConfig(classes=2, views=1, archetypes_per_slot=1, sharing_pairs=(), image_size=64,
                         noise=0.05, train_images=8, test_images=4, background_images=3, seed=3)
    return generate_synthetic_corpus(str(out), config)
