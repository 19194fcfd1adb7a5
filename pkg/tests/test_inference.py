from itertools import product

import numpy as np
import pytest

from aogdet.models import SLOTS, AndOrGraph
from aogdet.services.imaging import Image, PartShape, Placement, build_hog_pyramid, deformation_cost
from aogdet.services.inference import (DetectionConfig, ResponseMaps, ScoredWindow, brute_force_activations,
                                       compute_response_maps, deformation_transform, detect_class,
                                       detect_multiclass, greedy_forward, greedy_forward_scores,
                                       instance_objective, local_testing, non_maximum_suppression,
                                       select_activations, window_scores, score_subgraph, _pair_gain)

from conftest import SMALL_HOG, random_graph, random_image


def random_root(rng, pyramid, shape=PartShape(3, 3)):
    half = pyramid.levels[0].half_res_grid
    return Placement(0, int(rng.integers(0, half.shape[0] - shape.rows + 1)),
                     int(rng.integers(0, half.shape[1] - shape.cols + 1)))


class TestBindingTesting:
    def test_dp_matches_enumeration(self):
        rng = np.random.default_rng(5)
        mismatches = 0
        for _ in range(200):
            graph = random_graph(rng, max_children=3, leaf_edges=True)
            pyramid = build_hog_pyramid(random_image(rng, 32, 32), SMALL_HOG)
            maps = ResponseMaps(graph, pyramid, search_radius=1)
            tables = local_testing(graph, 1, random_root(rng, pyramid), maps)
            activation = select_activations(graph, 1, tables)
            _, best = brute_force_activations(graph, 1, tables)
            if abs(activation.score - best) > 1e-9:
                mismatches += 1
        assert mismatches == 0

    def test_without_edges_slots_decouple(self, rng, toy_pyramid):
        graph = random_graph(rng, max_children=3)
        maps = ResponseMaps(graph, toy_pyramid, search_radius=2)
        tables = local_testing(graph, 1, random_root(rng, toy_pyramid), maps)
        activation = select_activations(graph, 1, tables)
        assert activation.edge_score == 0.0
        assert activation.score == pytest.approx(sum(table.scores.max() for table in tables))
        for slot, table in enumerate(tables):
            assert activation.leaves[slot] == table.leaves[int(np.argmax(table.scores))]


class TestLocalTesting:
    def test_matches_exhaustive_scan(self):
        rng = np.random.default_rng(9)
        for _ in range(100):
            graph = random_graph(rng, max_children=2)
            pyramid = build_hog_pyramid(random_image(rng, 40, 40), SMALL_HOG)
            radius = int(rng.integers(0, 4))
            maps = ResponseMaps(graph, pyramid, search_radius=radius)
            root = random_root(rng, pyramid)
            for table in local_testing(graph, 1, root, maps):
                node = graph.or_node(1, table.slot)
                for index, handle in enumerate(table.leaves):
                    response = maps.leaf_map(handle, 0)
                    anchor = table.anchors[index]
                    best = -np.inf
                    for row, col in product(range(response.shape[0]), range(response.shape[1])):
                        dy, dx = row - anchor.row, col - anchor.col
                        if max(abs(dy), abs(dx)) > radius:
                            continue
                        best = max(best, response[row, col] - deformation_cost(node.deform_weights, dy, dx))
                    assert table.scores[index] == pytest.approx(best, abs=1e-12)
                    placed = table.placements[index]
                    dy, dx = placed.row - anchor.row, placed.col - anchor.col
                    assert response[placed.row, placed.col] - deformation_cost(node.deform_weights, dy, dx) \
                        == pytest.approx(best, abs=1e-12)

    def test_cached_transform_agrees_with_lazy_lookup(self, rng, toy_pyramid):
        graph = random_graph(rng, max_children=2)
        lazy = ResponseMaps(graph, toy_pyramid, search_radius=2)
        cached = ResponseMaps(graph, toy_pyramid, search_radius=2)
        root = random_root(rng, toy_pyramid)
        for slot in range(SLOTS):
            for handle in graph.or_node(1, slot).children:
                cached.deformed(handle, 1, slot, 0)
        for a, b in zip(local_testing(graph, 1, root, lazy), local_testing(graph, 1, root, cached)):
            assert np.allclose(a.scores, b.scores)
            assert a.placements == b.placements

    def test_transform_takes_the_first_maximum(self):
        values, dy, dx = deformation_transform(np.zeros((3, 3)), np.zeros(4), 1)
        assert not values.any()
        assert dy[1, 1] == -1 and dx[1, 1] == -1

    def test_shared_leaf_map_computed_once(self, rng, toy_pyramid):
        graph = random_graph(rng, classes=('a', 'b'))
        shared = graph.or_node(1, 4).children[0]
        graph.attach_leaf(2, 4, shared)
        maps = compute_response_maps(graph, toy_pyramid, 2)
        for r in (1, 2):
            local_testing(graph, r, random_root(rng, toy_pyramid), maps)
        assert maps.compute_counts[shared] == 1
        assert maps.compute_count == graph.n


class TestWindows:
    def test_fast_scores_match_per_window_scoring(self, rng, toy_pyramid):
        graph = random_graph(rng, max_children=2)
        maps = compute_response_maps(graph, toy_pyramid, 2)
        scores = window_scores(graph, 1, toy_pyramid, maps, 0)
        for (row, col), value in np.ndenumerate(scores):
            window = score_subgraph(graph, 1, Placement(0, row, col), toy_pyramid, maps)
            assert value == pytest.approx(window.score, abs=1e-9)

    def test_nms_keeps_best_of_overlapping(self):
        def window(score, box):
            return ScoredWindow(and_node=1, class_name='a', root=Placement(0, 0, 0), box=box, score=score,
                                latent=None)
        kept = non_maximum_suppression([window(1.0, (0, 0, 10, 10)), window(2.0, (1, 1, 11, 11)),
                                        window(0.5, (50, 50, 60, 60))], 0.5)
        assert [w.score for w in kept] == [2.0, 0.5]

    def test_infinite_threshold_yields_nothing(self, rng, toy_pyramid):
        assert detect_class(random_graph(rng), 1, toy_pyramid, threshold=np.inf) == []

    def test_blank_image_has_no_detections(self):
        graph = AndOrGraph(feature_dim=SMALL_HOG.feature_dim)
        graph.add_and_node('a', 0, PartShape(3, 3), bias=-5.0)
        for node in graph.or_nodes:
            node.deform_weights = np.array([0.0, 0.0, 1.0, 1.0])
        image = Image.from_array(np.full((48, 48), 128))
        config = DetectionConfig(hog=SMALL_HOG, search_radius=2, threshold=-1.0)
        assert detect_multiclass(graph, image, config) == []

    def test_detections_carry_their_latent(self, rng):
        graph = random_graph(rng, classes=('a', 'b'))
        image = random_image(rng, 48, 48)
        config = DetectionConfig(hog=SMALL_HOG, search_radius=1, threshold=-np.inf)
        detections = detect_multiclass(graph, image, config)
        assert detections
        for detection in detections:
            assert detection.latent.and_node == detection.and_node
            assert graph.and_node(detection.and_node).class_name == detection.class_name


def reference_greedy(scores, boxes, alpha):
    """Step-by-step forward selection recomputing every gain from the admitted set."""
    K, L = scores.shape
    chosen = []
    while True:
        best, pick = 0.0, None
        for k in range(K):
            if any(k == c for c, _ in chosen):
                continue
            for y in range(L):
                if not np.isfinite(scores[k, y]):
                    continue
                gain = scores[k, y] + sum(_pair_gain(boxes, alpha, c, cy, k, y) for c, cy in chosen)
                if gain > best:
                    best, pick = gain, (k, y)
        if pick is None:
            return chosen
        chosen.append(pick)


def random_instance(rng, with_edges=True):
    K, L = int(rng.integers(1, 5)), int(rng.integers(1, 4))
    scores = rng.normal(size=(K, L))
    scores[rng.random((K, L)) < 0.2] = -np.inf
    xy = rng.uniform(0, 50, size=(K, 2))
    boxes = [(x, y, x + 10.0, y + 10.0) for x, y in xy]
    alpha = {(a, b): rng.normal(size=6) for a in range(L) for b in range(L)} if with_edges else {}
    return scores, boxes, alpha


class TestGreedyForward:
    def test_reproduces_step_by_step_execution(self):
        rng = np.random.default_rng(21)
        for _ in range(500):
            scores, boxes, alpha = random_instance(rng)
            result = greedy_forward_scores(scores, boxes, alpha)
            assert result.chosen == reference_greedy(scores, boxes, alpha)
            assert result.total == pytest.approx(instance_objective(scores, boxes, alpha, result.chosen), abs=1e-9)

    def test_without_context_reaches_the_optimum(self):
        rng = np.random.default_rng(22)
        for _ in range(500):
            scores, boxes, _ = random_instance(rng, with_edges=False)
            K, L = scores.shape
            best = 0.0
            for labels in product(range(L + 1), repeat=K):
                chosen = [(k, y) for k, y in enumerate(labels) if y < L and np.isfinite(scores[k, y])]
                best = max(best, instance_objective(scores, boxes, {}, chosen))
            result = greedy_forward_scores(scores, boxes, {})
            assert result.total == pytest.approx(best, abs=1e-9)

    def test_gains_are_positive(self):
        rng = np.random.default_rng(23)
        scores, boxes, alpha = random_instance(rng)
        assert all(g > 0 for g in greedy_forward_scores(scores, boxes, alpha).gains)

    def test_window_labels_come_from_their_and_node(self):
        windows = [ScoredWindow(and_node=r, class_name=str(r), root=Placement(0, 0, 0),
                                box=(10.0 * r, 0.0, 10.0 * r + 5, 5.0), score=s, latent=None)
                   for r, s in ((2, 1.0), (1, 0.5), (2, -0.3))]
        result = greedy_forward(windows, {})
        assert result.chosen == [(0, 2), (1, 1)]
