# aogdet/services/combine.py
# Merging per-group models into one graph and learning the final reweighting
# (beta per node) with leaf and and-node collaborative edges by structural SVM
# over whole annotated images, loss K - tp.

import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy import sparse

from aogdet.errors import DimensionMismatch, InsufficientData, LabelCollision
from aogdet.models import (AND_EDGE_DIM, LEAF_EDGE_DIM, SLOT_EDGES, AndOrGraph, validate)
from aogdet.services.evaluation import match_and_count
from aogdet.services.features import slot_anchors
from aogdet.services.imaging import (Image, and_pair_feature, build_hog_pyramid, deformation_feature,
                                     extract_part_feature, extract_root_feature, leaf_pair_feature,
                                     load_image)
from aogdet.services.inference import DetectionConfig, class_windows, greedy_forward
from aogdet.services.ssvm import (Constraint, ConstraintOracle, SolverConfig, TrainingSample, best_true_latent,
                                  detection_count_loss, solve_convex)

logger = logging.getLogger(__name__)


# --- 1. Types ---

@dataclass(frozen=True)
class CombineConfig:
    detection: DetectionConfig = field(default_factory=DetectionConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    positive_overlap: float = 0.7


@dataclass
class CombinedTrainingImage:
    """A whole training image with every annotated object: [(class_name, box)]."""
    image_id: str
    objects: List[Tuple[str, Tuple[float, float, float, float]]]
    image_path: Optional[str] = None
    image: Optional[Image] = None
    _pyramid: object = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if not self.objects:
            raise InsufficientData(f"Combination image {self.image_id} has no annotated object")

    def pyramid(self, hog_config):
        if self._pyramid is None or self._pyramid.config != hog_config:
            image = self.image if self.image is not None else load_image(self.image_path)
            self._pyramid = build_hog_pyramid(image, hog_config)
        return self._pyramid


@dataclass
class CombinationParams:
    # index = node id - 1 over and-nodes, or-nodes, then leaves
    beta: np.ndarray
    leaf_alpha: Dict[Tuple[int, int], np.ndarray] = field(default_factory=dict)
    and_alpha: Dict[Tuple[int, int], np.ndarray] = field(default_factory=dict)

    @classmethod
    def identity(cls, graph):
        return cls(beta=np.ones(10 * graph.m + graph.n))


@dataclass
class ObjectResponses:
    """Per-node responses of one object's window (the terms of its score)."""
    and_node: int
    box: Tuple[float, float, float, float]
    leaf: Dict[int, float]
    deformation: Dict[int, float]
    root: float
    leaf_pairs: List[Tuple[Tuple[int, int], np.ndarray]]


@dataclass
class CombinationFeatures:
    objects: List[ObjectResponses]
    # ((r, r'), psi) for every ordered pair of distinct objects
    and_pairs: List[Tuple[Tuple[int, int], np.ndarray]]


# --- 2. Merging ---

def merge_models(models):
    """
    Joins group models under one root: and-nodes in model order, leaves
    re-handled in model order, per-group sharing and edges carried over.

    Raises:
        LabelCollision: two models declare the same class name
        DimensionMismatch: models built on different feature dimensions
    """
    if not models:
        raise InsufficientData("Nothing to merge")
    merged = AndOrGraph(feature_dim=models[0].feature_dim)
    seen = {}
    for index, model in enumerate(models):
        if model.feature_dim != merged.feature_dim:
            raise DimensionMismatch(f"Model {index} uses feature dimension {model.feature_dim}, "
                                    f"expected {merged.feature_dim}")
        for name in model.class_names():
            if name in seen:
                raise LabelCollision(f"Class '{name}' appears in models {seen[name]} and {index}",
                                     class_name=name)
            seen[name] = index

        and_map = {}
        for node in model.and_nodes:
            and_map[node.id] = merged.add_and_node(node.class_name, node.view, node.root_shape,
                                                   node.weights, node.bias, with_leaves=False)
        leaf_map = {leaf.handle: merged.add_leaf(leaf.part_slot, leaf.shape, leaf.weights)
                    for leaf in model.leaves}
        for node in model.or_nodes:
            target = merged.or_node(and_map[node.owner_class], node.part_slot)
            target.anchor_offset = tuple(node.anchor_offset)
            target.deform_weights = node.deform_weights.copy()
            target.children = sorted(leaf_map[h] for h in node.children)
        for (a, b), alpha in model.edges.leaf_edges.items():
            merged.edges.leaf_edges[(leaf_map[a], leaf_map[b])] = alpha.copy()
        for (r, rp), alpha in model.edges.and_edges.items():
            merged.edges.and_edges[(and_map[r], and_map[rp])] = alpha.copy()
    merged.compact()

    problems = validate(merged)
    if problems:
        raise DimensionMismatch(f"Merged model is invalid: {problems[0]}", problems=problems)
    logger.info(f"Merged {len(models)} models: m={merged.m}, n={merged.n}, classes {merged.class_names()}")
    return merged


# --- 3. Combination features ---

def window_responses(graph, pyramid, latent, box):
    """Leaf, deformation and root(+bias) responses of one window plus its adjacent leaf-pair features."""
    r = latent.and_node
    node = graph.and_node(r)
    anchors = slot_anchors(graph, pyramid, latent)
    leaf, deformation = {}, {}
    for slot, choice in enumerate(latent.slots):
        part = graph.leaf(choice.leaf)
        leaf[part.id] = leaf.get(part.id, 0.0) + float(part.weights @ extract_part_feature(pyramid, choice.placement,
                                                                                          part.shape))
        or_node = graph.or_node(r, slot)
        deformation[or_node.id] = -float(or_node.deform_weights @ deformation_feature(anchors[slot],
                                                                                      choice.placement))
    root = float(node.weights @ extract_root_feature(pyramid, latent.root, node.root_shape)) + node.bias
    pairs = []
    for slot_a, slot_b in SLOT_EDGES:
        a, b = latent.slots[slot_a], latent.slots[slot_b]
        psi = leaf_pair_feature(a.placement, graph.leaf(a.leaf).shape, b.placement, graph.leaf(b.leaf).shape,
                                anchors[slot_a], anchors[slot_b])
        pairs.append(((a.leaf, b.leaf), psi))
    return ObjectResponses(and_node=r, box=tuple(box), leaf=leaf, deformation=deformation, root=root,
                           leaf_pairs=pairs)


def _and_pairs(objects):
    pairs = []
    for i, a in enumerate(objects):
        for j, b in enumerate(objects):
            if i != j:
                pairs.append(((a.and_node, b.and_node), and_pair_feature(a.box, b.box)))
    return pairs


def extract_combination_features(graph, image, config=None):
    """
    Responses of every annotated object at its best own-class window among
    placements overlapping its box, and the and-node pair features between
    objects. Objects no view can be placed on are skipped with a warning.

    Args:
        image: CombinedTrainingImage
    """
    config = config or CombineConfig()
    pyramid = image.pyramid(config.detection.hog)
    objects = []
    for index, (label, box) in enumerate(image.objects):
        sample = TrainingSample(f"{image.image_id}#{index}", label, box, image=image.image,
                                image_path=image.image_path, _pyramid=pyramid)
        window = best_true_latent(graph, sample, config.detection, positive_overlap=config.positive_overlap)
        if window is None:
            logger.warning(f"Object {index} of {image.image_id} ({label}) has no placement; skipped")
            continue
        objects.append(window_responses(graph, pyramid, window.latent, window.box))
    return CombinationFeatures(objects=objects, and_pairs=_and_pairs(objects))


class CombinationLayout:
    """Offsets of beta, the candidate leaf edges and the and-node pairs inside theta."""

    def __init__(self, graph):
        self.n_beta = 10 * graph.m + graph.n
        keys = set()
        for r in range(1, graph.m + 1):
            for slot_a, slot_b in SLOT_EDGES:
                for a in graph.or_node(r, slot_a).children:
                    for b in graph.or_node(r, slot_b).children:
                        keys.add((a, b))
        self.leaf_keys = sorted(keys)
        self.and_keys = [(r, rp) for r in range(1, graph.m + 1) for rp in range(1, graph.m + 1)]
        self.leaf_offset = {key: self.n_beta + LEAF_EDGE_DIM * i for i, key in enumerate(self.leaf_keys)}
        start = self.n_beta + LEAF_EDGE_DIM * len(self.leaf_keys)
        self.and_offset = {key: start + AND_EDGE_DIM * i for i, key in enumerate(self.and_keys)}
        self.size = start + AND_EDGE_DIM * len(self.and_keys)

    def vector(self, features):
        """Joint combination feature of a set of object windows."""
        theta = np.zeros(self.size)
        for obj in features.objects:
            for node_id, value in obj.leaf.items():
                theta[node_id - 1] += value
            for node_id, value in obj.deformation.items():
                theta[node_id - 1] += value
            theta[obj.and_node - 1] += obj.root
            for key, psi in obj.leaf_pairs:
                offset = self.leaf_offset.get(key)
                if offset is not None:
                    theta[offset:offset + LEAF_EDGE_DIM] += psi
        for key, psi in features.and_pairs:
            offset = self.and_offset[key]
            theta[offset:offset + AND_EDGE_DIM] += psi
        return theta

    def pack(self, params):
        theta = np.zeros(self.size)
        theta[:self.n_beta] = params.beta
        for key, alpha in params.leaf_alpha.items():
            if key in self.leaf_offset:
                theta[self.leaf_offset[key]:self.leaf_offset[key] + LEAF_EDGE_DIM] = alpha
        for key, alpha in params.and_alpha.items():
            theta[self.and_offset[key]:self.and_offset[key] + AND_EDGE_DIM] = alpha
        return theta

    def unpack(self, theta):
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.size,):
            raise DimensionMismatch(f"Combination vector has length {theta.shape}, expected {self.size}")
        leaf = {key: theta[o:o + LEAF_EDGE_DIM].copy() for key, o in self.leaf_offset.items()}
        pairs = {key: theta[o:o + AND_EDGE_DIM].copy() for key, o in self.and_offset.items()}
        return CombinationParams(beta=theta[:self.n_beta].copy(), leaf_alpha=leaf, and_alpha=pairs)


# --- 4. Training ---

class CombinationOracle(ConstraintOracle):
    """
    Whole-image samples for learning theta = (beta, leaf alphas, and alphas).
    The most violated labeling is decoded by greedy forward inference on the
    reweighted model, each candidate window gaining +1 when it matches no
    groundtruth object of its class.
    """

    def __init__(self, graph, images, config=None):
        self.graph = graph
        self.images = list(images)
        self.config = config or CombineConfig()
        self.layout = CombinationLayout(graph)
        self._positive = [self.layout.vector(extract_combination_features(graph, image, self.config))
                          for image in self.images]

    @property
    def dim(self):
        return self.layout.size

    @property
    def n_samples(self):
        return len(self.images)

    def lower_bounds(self):
        # or-node entries scale deformation costs, which must stay convex
        return {j - 1: 0.0 for j in range(self.graph.m + 1, 10 * self.graph.m + 1)}

    def positive_feature(self, k):
        return self._positive[k]

    def baseline_loss(self, k):
        return float(len(self.images[k].objects))

    def most_violated(self, theta, k):
        image = self.images[k]
        pyramid = image.pyramid(self.config.detection.hog)
        reweighted = apply_reweighting(self.graph.copy(), self.layout.unpack(theta))
        windows = class_windows(reweighted, pyramid, self.config.detection,
                                threshold=self.config.detection.threshold - 1.0)
        if not windows:
            return []
        augmented = []
        for window in windows:
            hit = match_and_count([(window.class_name, window.box)], image.objects).tp
            augmented.append(replace(window, score=window.score + (0.0 if hit else 1.0)))
        instances = greedy_forward(augmented, reweighted.edges.and_edges)
        if not instances.chosen:
            return []
        chosen = [windows[i] for i, _ in instances.chosen]
        objects = [window_responses(self.graph, pyramid, w.latent, w.box) for w in chosen]
        phi = self.layout.vector(CombinationFeatures(objects=objects, and_pairs=_and_pairs(objects)))
        ranked = sorted(chosen, key=lambda w: -w.score)
        loss = detection_count_loss(image.objects, [(w.class_name, w.box) for w in ranked])
        return [Constraint(feature=sparse.csr_matrix(phi), loss=loss, value=float(theta @ phi) + loss)]


def train_combination(graph, images, config=None):
    """
    Learns the reweighting and edge parameters of a merged model, starting
    from the identity (beta = 1, alphas = 0).

    Returns:
        CombinationParams
    """
    config = config or CombineConfig()
    oracle = CombinationOracle(graph, images, config)
    initial = oracle.layout.pack(CombinationParams.identity(graph))
    result = solve_convex(oracle, config.solver, initial)
    params = oracle.layout.unpack(result.weights)
    logger.info(f"Combination trained on {len(oracle.images)} images: objective {result.objective:.6f}, "
                f"{len(oracle.layout.leaf_keys)} candidate leaf edges, {len(oracle.layout.and_keys)} and-pairs")
    return params


# --- 5. Reweighting ---

def apply_reweighting(graph, params):
    """
    Scales every leaf filter by its beta entry, every or-node's deformation
    weights by its own, and every and-node's root filter and bias by its own;
    installs the non-zero edge parameters. Works in place.

    Raises:
        DimensionMismatch: beta does not have 10m + n entries
    """
    beta = np.asarray(params.beta, dtype=np.float64)
    if beta.shape != (10 * graph.m + graph.n,):
        raise DimensionMismatch(f"beta has {beta.size} entries, model needs {10 * graph.m + graph.n}")
    for node in graph.and_nodes:
        node.weights = node.weights * beta[node.id - 1]
        node.bias = float(node.bias * beta[node.id - 1])
    for node in graph.or_nodes:
        node.deform_weights = node.deform_weights * beta[node.id - 1]
    for leaf in graph.leaves:
        leaf.weights = leaf.weights * beta[leaf.id - 1]
    graph.edges.leaf_edges = {key: np.asarray(alpha, dtype=np.float64).copy()
                              for key, alpha in params.leaf_alpha.items() if np.any(alpha)}
    graph.edges.and_edges = {key: np.asarray(alpha, dtype=np.float64).copy()
                             for key, alpha in params.and_alpha.items() if np.any(alpha)}
    return graph
