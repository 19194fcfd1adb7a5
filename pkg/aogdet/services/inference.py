# aogdet/services/inference.py
# Detection with an And-Or graph: shared leaf response maps, deformation-
# penalized part placement (local testing), exact 3x3 activation selection
# (binding testing), sliding-window scoring and greedy multiclass assembly.

import logging
from collections import Counter
from dataclasses import dataclass, field
from itertools import product
from typing import Dict, List, Optional, Tuple

import numpy as np

from aogdet.errors import ConfigError, OutOfBounds
from aogdet.models import SLOT_EDGES, SLOTS, LatentAssignment, SlotChoice, anchor_placement
from aogdet.services.evaluation import iou_many
from aogdet.services.imaging import (HogConfig, Placement, and_pair_feature, build_hog_pyramid,
                                     deformation_cost, extract_root_feature, leaf_pair_feature)

logger = logging.getLogger(__name__)


# --- 1. Types ---

@dataclass(frozen=True)
class DetectionConfig:
    hog: HogConfig = field(default_factory=HogConfig)
    search_radius: int = 4
    threshold: float = -1.0
    nms_iou: float = 0.5

    def __post_init__(self):
        if self.search_radius < 0:
            raise ConfigError("search_radius must be >= 0")
        if not 0.0 < self.nms_iou <= 1.0:
            raise ConfigError("nms_iou must lie in (0, 1]")


@dataclass
class ScoredWindow:
    and_node: int
    class_name: str
    root: Placement
    box: Tuple[float, float, float, float]
    score: float
    latent: LatentAssignment


@dataclass
class InstanceSet:
    chosen: List[Tuple[int, int]]
    total: float
    # delta of each admitted pair at admission time
    gains: List[float] = field(default_factory=list)


@dataclass
class Detection:
    class_name: str
    and_node: int
    box: Tuple[float, float, float, float]
    score: float
    latent: LatentAssignment


@dataclass
class SlotTable:
    """Local-testing result of one or-node: per child, best score and placement."""
    slot: int
    leaves: Tuple[int, ...]
    scores: np.ndarray
    placements: List[Optional[Placement]]
    anchors: List[Optional[Placement]]


@dataclass
class Activation:
    leaves: Tuple[int, ...]
    placements: Tuple[Placement, ...]
    score: float
    edge_score: float


# --- 2. Response maps ---

def filter_response(grid, weights, shape):
    """Correlation of a (rows, cols, d) grid with a window filter; valid positions only."""
    rows = grid.shape[0] - shape.rows + 1
    cols = grid.shape[1] - shape.cols + 1
    if rows < 1 or cols < 1:
        return np.zeros((max(rows, 0), max(cols, 0)))
    kernel = np.asarray(weights).reshape(shape.rows, shape.cols, grid.shape[2])
    out = np.zeros((rows, cols))
    for dr in range(shape.rows):
        for dc in range(shape.cols):
            out += grid[dr:dr + rows, dc:dc + cols] @ kernel[dr, dc]
    return out


def deformation_transform(response, deform_weights, radius):
    """
    For every anchor a: max over |d| <= radius with a + d valid of
    response[a + d] - cost(d), scanning offsets row-major and keeping the first
    maximum.

    Returns:
        (values, best_dy, best_dx)
    """
    rows, cols = response.shape
    values = np.full((rows, cols), -np.inf)
    best_dy = np.zeros((rows, cols), dtype=np.int64)
    best_dx = np.zeros((rows, cols), dtype=np.int64)
    for dy in range(-radius, radius + 1):
        r0, r1 = max(0, -dy), min(rows, rows - dy)
        if r0 >= r1:
            continue
        for dx in range(-radius, radius + 1):
            c0, c1 = max(0, -dx), min(cols, cols - dx)
            if c0 >= c1:
                continue
            candidate = response[r0 + dy:r1 + dy, c0 + dx:c1 + dx] - deformation_cost(deform_weights, dy, dx)
            region = values[r0:r1, c0:c1]
            better = candidate > region
            region[better] = candidate[better]
            best_dy[r0:r1, c0:c1][better] = dy
            best_dx[r0:r1, c0:c1][better] = dx
    return values, best_dy, best_dx


class ResponseMaps:
    """
    Leaf response maps of one image, computed once per leaf and shared by
    every or-node (of any class) that owns the leaf. Levels are filled on
    first use; deformation transforms are cached per (leaf, or-node, level).
    """

    def __init__(self, graph, pyramid, search_radius=4):
        self.graph = graph
        self.pyramid = pyramid
        self.search_radius = search_radius
        self._maps: Dict[int, Dict[int, np.ndarray]] = {}
        self._deformed = {}
        self.compute_counts = Counter()

    @property
    def compute_count(self):
        return sum(self.compute_counts.values())

    def compute(self, handle, levels=None):
        levels = range(len(self.pyramid.levels)) if levels is None else levels
        if handle not in self._maps:
            self._maps[handle] = {}
            self.compute_counts[handle] += 1
        leaf = self.graph.leaf(handle)
        per_level = self._maps[handle]
        for level in levels:
            if level not in per_level:
                per_level[level] = filter_response(self.pyramid.levels[level].full_res_grid,
                                                   leaf.weights, leaf.shape)
        return per_level

    def leaf_map(self, handle, level):
        return self.compute(handle, (level,))[level]

    def deformed(self, handle, r, slot, level):
        key = (handle, r, slot, level)
        if key not in self._deformed:
            node = self.graph.or_node(r, slot)
            self._deformed[key] = deformation_transform(self.leaf_map(handle, level),
                                                        node.deform_weights, self.search_radius)
        return self._deformed[key]

    def deformed_at(self, handle, r, slot, anchor):
        """(value, placement) of the deformation-penalized best placement around one anchor."""
        key = (handle, r, slot, anchor.level)
        if key in self._deformed:
            values, best_dy, best_dx = self._deformed[key]
            return (values[anchor.row, anchor.col],
                    Placement(anchor.level, anchor.row + int(best_dy[anchor.row, anchor.col]),
                              anchor.col + int(best_dx[anchor.row, anchor.col])))
        response = self.leaf_map(handle, anchor.level)
        radius = self.search_radius
        r0, r1 = max(0, anchor.row - radius), min(response.shape[0], anchor.row + radius + 1)
        c0, c1 = max(0, anchor.col - radius), min(response.shape[1], anchor.col + radius + 1)
        dy = np.arange(r0, r1)[:, None] - anchor.row
        dx = np.arange(c0, c1)[None, :] - anchor.col
        node = self.graph.or_node(r, slot)
        candidate = response[r0:r1, c0:c1] - deformation_cost(node.deform_weights, dy, dx)
        best = int(np.argmax(candidate))
        row, col = divmod(best, candidate.shape[1])
        return candidate[row, col], Placement(anchor.level, r0 + row, c0 + col)


def compute_response_maps(graph, pyramid, search_radius=4):
    """Computes every leaf's response map at every level (each leaf exactly once)."""
    maps = ResponseMaps(graph, pyramid, search_radius)
    for leaf in graph.leaves:
        maps.compute(leaf.handle)
    logger.debug(f"Response maps: {maps.compute_count} leaves x {len(pyramid.levels)} levels")
    return maps


def root_response(graph, r, pyramid, level):
    node = graph.and_node(r)
    return filter_response(pyramid.levels[level].half_res_grid, node.weights, node.root_shape)


# --- 3. Local testing ---

def local_testing(graph, r, root_p, maps, search_radius=None):
    """
    Per or-node of and-node r, the deformation-penalized best placement of
    every child leaf around its anchor.

    Leaves that do not fit the level score -inf.
    """
    if search_radius is not None and search_radius != maps.search_radius:
        maps = ResponseMaps(graph, maps.pyramid, search_radius)
    grid_shape = maps.pyramid.levels[root_p.level].full_res_grid.shape
    tables = []
    for slot in range(SLOTS):
        node = graph.or_node(r, slot)
        scores = np.full(len(node.children), -np.inf)
        placements, anchors = [], []
        for index, handle in enumerate(node.children):
            try:
                anchor = anchor_placement(node, graph.leaf(handle).shape, root_p, grid_shape)
            except OutOfBounds:
                placements.append(None)
                anchors.append(None)
                continue
            value, placement = maps.deformed_at(handle, r, slot, anchor)
            scores[index] = value
            placements.append(placement)
            anchors.append(anchor)
        tables.append(SlotTable(slot=slot, leaves=tuple(node.children), scores=scores,
                                placements=placements, anchors=anchors))
    return tables


# --- 4. Binding testing: exact activation selection ---

def edge_matrices(graph, tables):
    """Pairwise leaf-edge responses for every adjacent slot pair (zero without edges)."""
    matrices = {}
    for slot_a, slot_b in SLOT_EDGES:
        ta, tb = tables[slot_a], tables[slot_b]
        matrix = np.zeros((len(ta.leaves), len(tb.leaves)))
        if graph.edges.leaf_edges:
            for i, handle_a in enumerate(ta.leaves):
                if ta.placements[i] is None:
                    continue
                for k, handle_b in enumerate(tb.leaves):
                    alpha = graph.edges.leaf_edge(handle_a, handle_b)
                    if alpha is None or tb.placements[k] is None:
                        continue
                    psi = leaf_pair_feature(ta.placements[i], graph.leaf(handle_a).shape,
                                            tb.placements[k], graph.leaf(handle_b).shape,
                                            ta.anchors[i], tb.anchors[k])
                    matrix[i, k] = float(np.dot(alpha, psi))
        matrices[(slot_a, slot_b)] = matrix
    return matrices


def assignment_score(tables, matrices, choice):
    """Unary plus pairwise score of per-slot child indices, summed in a fixed order."""
    unary = 0.0
    for slot in range(SLOTS):
        unary += tables[slot].scores[choice[slot]]
    pairwise = 0.0
    for slot_a, slot_b in SLOT_EDGES:
        pairwise += matrices[(slot_a, slot_b)][choice[slot_a], choice[slot_b]]
    return unary + pairwise, pairwise


def _column_potential(tables, matrices, c):
    s0, s1, s2 = c, c + 3, c + 6
    return (tables[s0].scores[:, None, None] + tables[s1].scores[None, :, None]
            + tables[s2].scores[None, None, :]
            + matrices[(s0, s1)][:, :, None] + matrices[(s1, s2)][None, :, :])


def _grid_dp(tables, matrices):
    """Max-sum over the 3x3 grid sweeping columns; state = the column's 3 choices."""
    f = _column_potential(tables, matrices, 0)
    backpointers = []
    for c in (1, 2):
        h_top = matrices[(c - 1, c)]
        h_mid = matrices[(c + 2, c + 3)]
        h_bot = matrices[(c + 5, c + 6)]
        t = f[:, None, :, :] + h_top[:, :, None, None]
        bp_top = np.argmax(t, axis=0)
        g = np.max(t, axis=0)
        t = g[:, :, None, :] + h_mid[None, :, :, None]
        bp_mid = np.argmax(t, axis=1)
        g = np.max(t, axis=1)
        t = g[:, :, :, None] + h_bot[None, None, :, :]
        bp_bot = np.argmax(t, axis=2)
        g = np.max(t, axis=2)
        f = g + _column_potential(tables, matrices, c)
        backpointers.append((bp_top, bp_mid, bp_bot))

    choice = [0] * SLOTS
    x0, x1, x2 = np.unravel_index(int(np.argmax(f)), f.shape)
    choice[2], choice[5], choice[8] = int(x0), int(x1), int(x2)
    for c in (2, 1):
        bp_top, bp_mid, bp_bot = backpointers[c - 1]
        prev2 = int(bp_bot[x0, x1, x2])
        prev1 = int(bp_mid[x0, x1, prev2])
        prev0 = int(bp_top[x0, prev1, prev2])
        x0, x1, x2 = prev0, prev1, prev2
        choice[c - 1], choice[c + 2], choice[c + 5] = x0, x1, x2
    return tuple(choice)


def select_activations(graph, r, tables):
    """
    Best leaf per or-node of and-node r including leaf-edge terms.

    Without leaf edges the slots decouple and each takes its argmax (ties to
    the lowest leaf id); otherwise an exact column-sweep DP over the 3x3 grid.
    """
    matrices = edge_matrices(graph, tables)
    if any(matrix.any() for matrix in matrices.values()):
        choice = _grid_dp(tables, matrices)
    else:
        choice = tuple(int(np.argmax(table.scores)) for table in tables)
    score, edge_score = assignment_score(tables, matrices, choice)
    return Activation(leaves=tuple(tables[s].leaves[choice[s]] for s in range(SLOTS)),
                      placements=tuple(tables[s].placements[choice[s]] for s in range(SLOTS)),
                      score=float(score), edge_score=float(edge_score))


def brute_force_activations(graph, r, tables):
    """Exhaustive enumeration of all child combinations (small models only)."""
    matrices = edge_matrices(graph, tables)
    best, best_choice = -np.inf, None
    for choice in product(*[range(len(table.leaves)) for table in tables]):
        score, _ = assignment_score(tables, matrices, choice)
        if score > best:
            best, best_choice = score, choice
    return best_choice, best


# --- 5. Window scoring ---

def _check_root(graph, r, root_p, pyramid):
    node = graph.and_node(r)
    if not 0 <= root_p.level < len(pyramid.levels):
        raise OutOfBounds(f"Pyramid has no level {root_p.level}")
    grid = pyramid.levels[root_p.level].half_res_grid
    if (root_p.row < 0 or root_p.col < 0 or root_p.row + node.root_shape.rows > grid.shape[0]
            or root_p.col + node.root_shape.cols > grid.shape[1]):
        raise OutOfBounds(f"Root window of and-node {r} at {root_p} exceeds the level grid")


def score_subgraph(graph, r, root_p, pyramid, maps):
    """
    Scores and-node r at root placement root_p: best part placements and
    activations plus root response and bias.

    Raises:
        OutOfBounds: root window outside the level, or a slot with no placeable leaf
    """
    _check_root(graph, r, root_p, pyramid)
    node = graph.and_node(r)
    tables = local_testing(graph, r, root_p, maps)
    for table in tables:
        if not np.isfinite(table.scores).any():
            raise OutOfBounds(f"No leaf of or-node slot {table.slot} fits level {root_p.level}")
    activation = select_activations(graph, r, tables)
    root_score = float(np.dot(node.weights, extract_root_feature(pyramid, root_p, node.root_shape)))
    latent = LatentAssignment(and_node=r, root=root_p,
                              slots=tuple(SlotChoice(leaf, placement) for leaf, placement
                                          in zip(activation.leaves, activation.placements)))
    return ScoredWindow(and_node=r, class_name=node.class_name, root=root_p,
                        box=pyramid.window_box(root_p, node.root_shape, half=True),
                        score=activation.score + root_score + node.bias, latent=latent)


def _fast_scores(graph, r, pyramid, maps, level):
    """Vectorized window scores at one level (valid only without leaf edges)."""
    node = graph.and_node(r)
    total = root_response(graph, r, pyramid, level)
    if total.size == 0:
        return total
    total = total + node.bias
    grid_shape = pyramid.levels[level].full_res_grid.shape
    rows = np.arange(total.shape[0])
    cols = np.arange(total.shape[1])
    for slot in range(SLOTS):
        or_node = graph.or_node(r, slot)
        best = np.full(total.shape, -np.inf)
        for handle in or_node.children:
            shape = graph.leaf(handle).shape
            if shape.rows > grid_shape[0] or shape.cols > grid_shape[1]:
                continue
            values, _, _ = maps.deformed(handle, r, slot, level)
            drow, dcol = or_node.anchor_offset
            ar = np.clip(2 * rows + drow - shape.rows // 2, 0, grid_shape[0] - shape.rows)
            ac = np.clip(2 * cols + dcol - shape.cols // 2, 0, grid_shape[1] - shape.cols)
            best = np.maximum(best, values[ar[:, None], ac[None, :]])
        total = total + best
    return total


def window_scores(graph, r, pyramid, maps, level):
    """Score of every root placement of and-node r at one level, as a 2-D map."""
    if not graph.edges.leaf_edges:
        return _fast_scores(graph, r, pyramid, maps, level)
    node = graph.and_node(r)
    rows = pyramid.levels[level].half_res_grid.shape[0] - node.root_shape.rows + 1
    cols = pyramid.levels[level].half_res_grid.shape[1] - node.root_shape.cols + 1
    scores = np.full((max(rows, 0), max(cols, 0)), -np.inf)
    for row in range(max(rows, 0)):
        for col in range(max(cols, 0)):
            try:
                scores[row, col] = score_subgraph(graph, r, Placement(level, row, col), pyramid, maps).score
            except OutOfBounds:
                continue
    return scores


def root_placements(pyramid, root_shape):
    """Every in-bounds root placement with its pixel box, in (level, row, col) order."""
    placements, boxes = [], []
    for level_index, level in enumerate(pyramid.levels):
        rows = level.half_res_grid.shape[0] - root_shape.rows + 1
        cols = level.half_res_grid.shape[1] - root_shape.cols + 1
        for row in range(max(rows, 0)):
            for col in range(max(cols, 0)):
                p = Placement(level_index, row, col)
                placements.append(p)
                boxes.append(pyramid.window_box(p, root_shape, half=True))
    return placements, np.asarray(boxes, dtype=np.float64).reshape(-1, 4)


def constrained_placements(pyramid, root_shape, box, min_overlap):
    """
    Root placements whose window overlaps `box` with IoU >= min_overlap; when
    none qualifies, the single placement of maximal IoU.
    """
    placements, boxes = root_placements(pyramid, root_shape)
    if not placements:
        return []
    overlaps = iou_many(box, boxes)
    keep = np.flatnonzero(overlaps >= min_overlap)
    if keep.size == 0:
        keep = [int(np.argmax(overlaps))]
    return [placements[k] for k in keep]


def best_window(graph, r, pyramid, maps, placements):
    """Highest-scoring window of and-node r among the given placements (first wins ties)."""
    best = None
    for p in placements:
        try:
            window = score_subgraph(graph, r, p, pyramid, maps)
        except OutOfBounds:
            continue
        if best is None or window.score > best.score:
            best = window
    return best


# --- 6. Sliding-window detection ---

def non_maximum_suppression(windows, nms_iou):
    """Greedy NMS: highest score first, drop anything overlapping a kept window at IoU >= nms_iou."""
    order = sorted(range(len(windows)),
                   key=lambda k: (-windows[k].score, windows[k].and_node, windows[k].root))
    kept = []
    for k in order:
        box = windows[k].box
        if kept and np.any(iou_many(box, [windows[j].box for j in kept]) >= nms_iou):
            continue
        kept.append(k)
    return [windows[k] for k in kept]


def detect_class(graph, r, pyramid, threshold=-1.0, nms_iou=0.5, maps=None, search_radius=4):
    """All windows of and-node r scoring >= threshold, after non-maximum suppression."""
    if threshold == np.inf:
        return []
    maps = maps or compute_response_maps(graph, pyramid, search_radius)
    windows = []
    for level in range(len(pyramid.levels)):
        scores = window_scores(graph, r, pyramid, maps, level)
        for row, col in zip(*np.nonzero(scores >= threshold)):
            try:
                window = score_subgraph(graph, r, Placement(level, int(row), int(col)), pyramid, maps)
            except OutOfBounds:
                continue
            if window.score >= threshold:
                windows.append(window)
    return non_maximum_suppression(windows, nms_iou)


# --- 7. Greedy forward multiclass assembly ---

def _pair_gain(boxes, alpha, k, y, kp, yp):
    """Gamma(P^k, P^k') + Gamma(P^k', P^k) for labels y at k and yp at kp."""
    gain = 0.0
    forward = alpha.get((y, yp))
    if forward is not None:
        gain += float(np.dot(forward, and_pair_feature(boxes[k], boxes[kp])))
    backward = alpha.get((yp, y))
    if backward is not None:
        gain += float(np.dot(backward, and_pair_feature(boxes[kp], boxes[k])))
    return gain


def instance_objective(scores, boxes, and_edges, chosen):
    """Total multiclass score of an instance set: window scores plus pairwise context."""
    total = 0.0
    for k, y in chosen:
        total += scores[k][y]
    for a in range(len(chosen)):
        for b in range(a + 1, len(chosen)):
            (k, y), (kp, yp) = chosen[a], chosen[b]
            total += _pair_gain(boxes, and_edges, k, y, kp, yp)
    return total


def greedy_forward_scores(scores, boxes, and_edges):
    """
    Greedy forward selection over a K x L matrix of window/label scores
    (-inf marks unavailable pairs).

    Starting from delta = scores, repeatedly admits the (k, y) with the largest
    delta (lowest k, then y, on ties) while it is positive, then adds the
    pairwise context gain with the admitted pair to every remaining delta. A
    window carries at most one label.

    Returns:
        InstanceSet
    """
    delta = np.array(scores, dtype=np.float64, copy=True)
    if delta.size == 0:
        return InstanceSet(chosen=[], total=0.0)
    chosen, gains = [], []
    total = 0.0
    used = np.zeros(delta.shape[0], dtype=bool)
    while True:
        masked = np.where(used[:, None], -np.inf, delta)
        flat = int(np.argmax(masked))
        k, y = divmod(flat, delta.shape[1])
        best = masked[k, y]
        if not best > 0:
            break
        chosen.append((k, y))
        gains.append(float(best))
        total += float(best)
        used[k] = True
        if and_edges:
            for kp in range(delta.shape[0]):
                if used[kp]:
                    continue
                for yp in range(delta.shape[1]):
                    if np.isfinite(delta[kp, yp]):
                        delta[kp, yp] += _pair_gain(boxes, and_edges, k, y, kp, yp)
    return InstanceSet(chosen=chosen, total=total, gains=gains)


def greedy_forward(windows, and_edges):
    """
    Greedy forward inference over scored windows of all classes. Window k
    carries only the label of the and-node that produced it.
    """
    if not windows:
        return InstanceSet(chosen=[], total=0.0)
    labels = sorted({w.and_node for w in windows})
    column = {r: c for c, r in enumerate(labels)}
    scores = np.full((len(windows), len(labels)), -np.inf)
    for k, window in enumerate(windows):
        scores[k, column[window.and_node]] = window.score
    # the score matrix is indexed by column; edges are keyed by and-node id
    alpha = {(column[a], column[b]): value for (a, b), value in and_edges.items()
             if a in column and b in column}
    result = greedy_forward_scores(scores, [w.box for w in windows], alpha)
    result.chosen = [(k, labels[c]) for k, c in result.chosen]
    return result


def class_windows(graph, pyramid, config=None, maps=None, threshold=None):
    """Candidate windows of every class: per-view detection, then NMS across the class's views."""
    config = config or DetectionConfig()
    threshold = config.threshold if threshold is None else threshold
    maps = maps or compute_response_maps(graph, pyramid, config.search_radius)
    windows = []
    for class_name in graph.class_names():
        candidates = []
        for r in graph.views_of(class_name):
            candidates.extend(detect_class(graph, r, pyramid, threshold, config.nms_iou, maps=maps))
        windows.extend(non_maximum_suppression(candidates, config.nms_iou))
    return windows


def detect_multiclass(graph, image, config=None, pyramid=None):
    """
    Full detection pipeline: pyramid, shared response maps, per-class
    sliding-window detection with NMS, greedy forward assembly.

    Returns:
        list of Detection, in admission order
    """
    config = config or DetectionConfig()
    pyramid = pyramid or build_hog_pyramid(image, config.hog)
    windows = class_windows(graph, pyramid, config)

    instances = greedy_forward(windows, graph.edges.and_edges)
    boxes = [w.box for w in windows]
    detections = []
    for k, r in instances.chosen:
        context = sum(_pair_gain(boxes, graph.edges.and_edges, k, r, kp, rp)
                      for kp, rp in instances.chosen if kp != k)
        window = windows[k]
        detections.append(Detection(class_name=window.class_name, and_node=r, box=window.box,
                                    score=window.score + context, latent=window.latent))
    logger.debug(f"{len(windows)} candidate windows, {len(detections)} detections")
    return detections
