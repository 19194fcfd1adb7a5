import numpy as np
import pytest

from aogdet.errors import DimensionMismatch, OutOfBounds
from aogdet.models import (SLOTS, AndOrGraph, anchor_placement, flatten_parameters, part_shape_for,
                           slot_anchor_center, unflatten_parameters, validate)
from aogdet.services.imaging import PartShape, Placement

from conftest import random_graph


def two_class_graph():
    graph = AndOrGraph(feature_dim=4)
    graph.add_and_node('car', 0, PartShape(3, 3))
    graph.add_and_node('bus', 0, PartShape(3, 3))
    return graph


class TestIndexLayout:
    def test_ids_are_contiguous(self):
        graph = two_class_graph()
        assert graph.m == 2 and graph.n == 2 * SLOTS
        assert [node.id for node in graph.and_nodes] == [1, 2]
        assert [node.id for node in graph.or_nodes] == list(range(3, 21))
        assert graph.or_node(2, 4).id == 2 + SLOTS + 4 + 1
        assert [leaf.id for leaf in graph.leaves] == list(range(21, 21 + 18))
        assert graph.and_node(2).or_children == list(range(12, 21))

    def test_ids_follow_structural_edits(self):
        graph = two_class_graph()
        extra = graph.add_leaf(3, PartShape(2, 2))
        graph.attach_leaf(1, 3, extra)
        assert graph.leaf(extra).id == graph.last_leaf_id
        first = graph.leaves[0].handle
        graph.attach_leaf(1, 0, graph.add_leaf(0, PartShape(2, 2)))
        graph.remove_leaf(first)
        assert [leaf.id for leaf in graph.leaves] == list(range(graph.first_leaf_id, graph.last_leaf_id + 1))
        assert validate(graph) == []

    def test_or_by_id(self):
        graph = two_class_graph()
        node = graph.or_by_id(graph.or_id(2, 7))
        assert (node.owner_class, node.part_slot) == (2, 7)


class TestSharing:
    def test_shared_leaf_counts_once(self):
        graph = two_class_graph()
        handle = graph.or_node(1, 5).children[0]
        graph.attach_leaf(2, 5, handle)
        assert graph.is_shared(handle)
        assert graph.shared_leaf_count() == 1
        assert len(graph.owners(handle)) == 2

    def test_views_of_one_class_are_not_sharing(self):
        graph = AndOrGraph(feature_dim=4)
        graph.add_and_node('car', 0, PartShape(3, 3))
        graph.add_and_node('car', 1, PartShape(3, 4))
        graph.attach_leaf(2, 0, graph.or_node(1, 0).children[0])
        assert graph.shared_leaf_count() == 0
        assert graph.views_of('car') == [1, 2]

    def test_remove_leaf_drops_its_edges(self):
        graph = two_class_graph()
        a, b = graph.or_node(1, 0).children[0], graph.or_node(1, 1).children[0]
        graph.edges.leaf_edges[(a, b)] = np.ones(4)
        graph.attach_leaf(1, 0, graph.add_leaf(0, PartShape(2, 2)))
        graph.remove_leaf(a)
        assert graph.edges.leaf_edges == {}


class TestValidation:
    def test_fresh_graph_is_valid(self, rng):
        assert validate(random_graph(rng, classes=('a', 'b'), views=2, max_children=3, leaf_edges=True)) == []

    def test_reports_empty_or_node(self):
        graph = two_class_graph()
        handle = graph.or_node(1, 2).children[0]
        graph.detach_leaf(1, 2, handle)
        problems = validate(graph)
        assert any('no children' in p for p in problems)
        assert any('not referenced' in p for p in problems)

    def test_reports_negative_quadratic_weight(self):
        graph = two_class_graph()
        graph.or_node(1, 0).deform_weights = np.array([0.0, 0.0, -1.0, 0.1])
        assert any('quadratic' in p for p in validate(graph))

    def test_reports_cross_slot_edge(self):
        graph = two_class_graph()
        a, b = graph.or_node(1, 0).children[0], graph.or_node(1, 8).children[0]
        graph.edges.leaf_edges[(a, b)] = np.ones(4)
        assert any('non-adjacent' in p for p in validate(graph))


class TestParameters:
    def test_flatten_then_unflatten(self, rng):
        graph = random_graph(rng, classes=('a', 'b'), max_children=2)
        omega = flatten_parameters(graph)
        assert omega.size == graph.layout().size
        other = graph.copy()
        unflatten_parameters(other, rng.normal(size=omega.size))
        unflatten_parameters(other, omega)
        assert np.array_equal(flatten_parameters(other), omega)

    def test_wrong_length(self):
        with pytest.raises(DimensionMismatch):
            unflatten_parameters(two_class_graph(), np.zeros(3))

    def test_quadratic_indices_point_at_quadratic_weights(self):
        graph = two_class_graph()
        for node in graph.or_nodes:
            node.deform_weights = np.array([0.0, 0.0, 7.0, 7.0])
        omega = flatten_parameters(graph)
        assert np.all(omega[graph.quadratic_indices()] == 7.0)
        assert graph.quadratic_indices().size == 2 * SLOTS * graph.m

    def test_copy_is_independent(self):
        graph = two_class_graph()
        copy = graph.copy()
        copy.leaves[0].weights[:] = 5.0
        assert not graph.leaves[0].weights.any()


class TestGeometry:
    def test_part_shape(self):
        assert part_shape_for(PartShape(3, 3)) == PartShape(2, 2)
        assert part_shape_for(PartShape(6, 3)) == PartShape(4, 2)

    def test_slot_anchor_centers(self):
        assert slot_anchor_center(PartShape(3, 3), 0) == (1, 1)
        assert slot_anchor_center(PartShape(3, 3), 4) == (3, 3)
        assert slot_anchor_center(PartShape(3, 3), 8) == (5, 5)

    def test_anchor_is_clamped(self):
        graph = two_class_graph()
        node = graph.or_node(1, 8)
        anchor = anchor_placement(node, PartShape(2, 2), Placement(0, 3, 3), (8, 8, 4))
        assert anchor == Placement(0, 6, 6)

    def test_anchor_out_of_bounds(self):
        graph = two_class_graph()
        with pytest.raises(OutOfBounds):
            anchor_placement(graph.or_node(1, 0), PartShape(5, 5), Placement(0, 0, 0), (4, 4, 4))
