import numpy as np
import pytest

from aogdet.errors import InvalidAssignment
from aogdet.models import BACKGROUND, SLOTS, LatentAssignment, SlotChoice, flatten_parameters
from aogdet.services.features import joint_feature, latent_score, leaf_edge_score, slot_anchors
from aogdet.services.imaging import (Placement, build_hog_pyramid, deformation_feature, extract_part_feature,
                                     extract_root_feature)
from aogdet.services.inference import ResponseMaps, score_subgraph

from conftest import SMALL_HOG, random_graph, random_image


def random_latent(graph, pyramid, rng, r=1):
    """A latent with random leaves and random in-bounds placements on level 0."""
    node = graph.and_node(r)
    half = pyramid.levels[0].half_res_grid
    full = pyramid.levels[0].full_res_grid
    root = Placement(0, int(rng.integers(0, half.shape[0] - node.root_shape.rows + 1)),
                     int(rng.integers(0, half.shape[1] - node.root_shape.cols + 1)))
    slots = []
    for slot in range(SLOTS):
        children = graph.or_node(r, slot).children
        handle = children[int(rng.integers(len(children)))]
        shape = graph.leaf(handle).shape
        slots.append(SlotChoice(handle, Placement(0, int(rng.integers(0, full.shape[0] - shape.rows + 1)),
                                                  int(rng.integers(0, full.shape[1] - shape.cols + 1)))))
    return LatentAssignment(and_node=r, root=root, slots=tuple(slots))


def test_inner_product_equals_window_score():
    rng = np.random.default_rng(11)
    for trial in range(100):
        graph = random_graph(rng, classes=('a', 'b'), max_children=2, leaf_edges=trial % 2 == 0)
        pyramid = build_hog_pyramid(random_image(rng), SMALL_HOG)
        maps = ResponseMaps(graph, pyramid, search_radius=2)
        r = int(rng.integers(1, graph.m + 1))
        half = pyramid.levels[0].half_res_grid
        root = Placement(0, int(rng.integers(0, half.shape[0] - 2)), int(rng.integers(0, half.shape[1] - 2)))
        window = score_subgraph(graph, r, root, pyramid, maps)
        assert latent_score(graph, pyramid, window.latent) == pytest.approx(window.score, abs=1e-9)


def test_joint_feature_sums_node_terms(rng, toy_pyramid):
    graph = random_graph(rng, max_children=3)
    latent = random_latent(graph, toy_pyramid, rng)
    node = graph.and_node(1)
    expected = node.bias + float(node.weights @ extract_root_feature(toy_pyramid, latent.root, node.root_shape))
    for slot, (choice, anchor) in enumerate(zip(latent.slots, slot_anchors(graph, toy_pyramid, latent))):
        leaf = graph.leaf(choice.leaf)
        expected += float(leaf.weights @ extract_part_feature(toy_pyramid, choice.placement, leaf.shape))
        expected -= float(graph.or_node(1, slot).deform_weights @ deformation_feature(anchor, choice.placement))
    phi = joint_feature(graph, toy_pyramid, 1, latent)
    assert float(flatten_parameters(graph) @ phi) == pytest.approx(expected, abs=1e-9)
    assert phi[graph.layout().bias[1]] == 1.0


def test_background_maps_to_zero(rng, toy_pyramid):
    graph = random_graph(rng)
    phi = joint_feature(graph, toy_pyramid, BACKGROUND, None)
    assert phi.shape == (graph.layout().size,)
    assert not phi.any()


def test_label_must_match_latent(rng, toy_pyramid):
    graph = random_graph(rng, classes=('a', 'b'))
    latent = random_latent(graph, toy_pyramid, rng, r=1)
    with pytest.raises(InvalidAssignment):
        joint_feature(graph, toy_pyramid, 2, latent)


def test_foreign_leaf_is_rejected(rng, toy_pyramid):
    graph = random_graph(rng, classes=('a', 'b'))
    latent = random_latent(graph, toy_pyramid, rng, r=1)
    foreign = graph.or_node(2, 0).children[0]
    broken = LatentAssignment(1, latent.root, (SlotChoice(foreign, latent.slots[0].placement),) + latent.slots[1:])
    with pytest.raises(InvalidAssignment):
        joint_feature(graph, toy_pyramid, 1, broken)


def test_level_mismatch_is_rejected(rng):
    pyramid = build_hog_pyramid(random_image(rng, 64, 64), SMALL_HOG)
    graph = random_graph(rng)
    latent = random_latent(graph, pyramid, rng)
    moved = latent.slots[0].placement
    broken = LatentAssignment(1, latent.root, (SlotChoice(latent.slots[0].leaf, Placement(1, moved.row // 2,
                                                                                         moved.col // 2)),)
                              + latent.slots[1:])
    with pytest.raises(InvalidAssignment):
        joint_feature(graph, pyramid, 1, broken)


def test_leaf_edges_stay_outside_omega(rng, toy_pyramid):
    graph = random_graph(rng, leaf_edges=True)
    latent = random_latent(graph, toy_pyramid, rng)
    without = graph.copy()
    without.edges.leaf_edges = {}
    assert leaf_edge_score(without, toy_pyramid, latent) == 0.0
    assert np.array_equal(joint_feature(graph, toy_pyramid, 1, latent),
                          joint_feature(without, toy_pyramid, 1, latent))
