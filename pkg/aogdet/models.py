# aogdet/models.py
# The And-Or graph data model: node hierarchy, parameters, sharing structure,
# parameter flattening and structural validation.
#
# Index layout (1-based, contiguous):
#   and-nodes  r = 1..m
#   or-nodes   j = m + 9(r-1) + slot + 1        -> m+1..10m
#   leaves     i = 10m+1..10m+n                 (ascending handle order)
# Leaves carry a stable handle; ids are re-derived after every structural edit.

import copy
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from aogdet.errors import DimensionMismatch, OutOfBounds
from aogdet.services.imaging import PartShape, Placement

SLOTS = 9
GRID = 3
LEAF_EDGE_DIM = 4
AND_EDGE_DIM = 6
DEFORMATION_DIM = 4
BACKGROUND = -1

# Adjacent (lower slot, higher slot) pairs in the 3x3 part layout.
SLOT_EDGES = tuple(
    [(s, s + 1) for s in range(SLOTS) if s % GRID < GRID - 1]
    + [(s, s + GRID) for s in range(SLOTS - GRID)]
)


def slots_adjacent(a, b):
    return (min(a, b), max(a, b)) in SLOT_EDGES


# --- 1. Geometry helpers ---

def _round_half_up(x):
    return int(np.floor(x + 0.5))


def part_shape_for(root_shape):
    """Part window (full-resolution cells) covering ~1/3 of the root footprint per axis."""
    return PartShape(max(1, _round_half_up(2 * root_shape.rows / 3.0)),
                     max(1, _round_half_up(2 * root_shape.cols / 3.0)))


def slot_anchor_center(root_shape, slot):
    """(row, col) of the slot's 3x3 grid center inside the root footprint, full-resolution cells."""
    a, b = divmod(slot, GRID)
    footprint_rows, footprint_cols = 2 * root_shape.rows, 2 * root_shape.cols
    return ((2 * a + 1) * footprint_rows // 6, (2 * b + 1) * footprint_cols // 6)


def anchor_placement(or_node, leaf_shape, root_p, grid_shape):
    """
    Top-left anchor of a leaf window for a root placed at root_p (half-resolution
    cells), clamped into the full-resolution grid of that level.

    Raises:
        OutOfBounds: the level grid is smaller than the leaf window
    """
    grid_rows, grid_cols = grid_shape[:2]
    if leaf_shape.rows > grid_rows or leaf_shape.cols > grid_cols:
        raise OutOfBounds(f"Leaf window {leaf_shape.rows}x{leaf_shape.cols} exceeds level "
                          f"grid {grid_rows}x{grid_cols}")
    drow, dcol = or_node.anchor_offset
    row = 2 * root_p.row + drow - leaf_shape.rows // 2
    col = 2 * root_p.col + dcol - leaf_shape.cols // 2
    row = min(max(row, 0), grid_rows - leaf_shape.rows)
    col = min(max(col, 0), grid_cols - leaf_shape.cols)
    return Placement(root_p.level, row, col)


# --- 2. Node types ---

@dataclass
class LeafNode:
    handle: int
    part_slot: int
    shape: PartShape
    weights: np.ndarray
    id: int = 0


@dataclass
class OrNode:
    owner_class: int
    part_slot: int
    # center of the part in full-resolution cells from the root footprint's top-left
    anchor_offset: Tuple[int, int]
    children: List[int]
    deform_weights: np.ndarray
    id: int = 0


@dataclass
class AndNode:
    id: int
    class_name: str
    view: int
    root_shape: PartShape
    weights: np.ndarray
    bias: float = 0.0
    or_children: List[int] = field(default_factory=list)

    @property
    def label(self):
        return f"{self.class_name}/{self.view}"


@dataclass
class EdgeSet:
    # (lower-slot leaf handle, higher-slot leaf handle) -> 4-vector
    leaf_edges: Dict[Tuple[int, int], np.ndarray] = field(default_factory=dict)
    # (r, r') -> 6-vector
    and_edges: Dict[Tuple[int, int], np.ndarray] = field(default_factory=dict)

    def leaf_edge(self, handle_a, handle_b):
        return self.leaf_edges.get((handle_a, handle_b))


@dataclass(frozen=True)
class SlotChoice:
    leaf: int  # leaf handle
    placement: Placement


@dataclass(frozen=True)
class LatentAssignment:
    and_node: int
    root: Placement
    slots: Tuple[SlotChoice, ...]

    def leaves(self):
        return tuple(choice.leaf for choice in self.slots)


@dataclass(frozen=True)
class ParameterLayout:
    """Offsets of every parameter block inside the flattened vector."""
    leaf: Dict[int, slice]
    deformation: Dict[int, slice]
    root: Dict[int, slice]
    bias: Dict[int, int]
    size: int


# --- 3. The graph ---

class AndOrGraph:
    """
    Four-layer And-Or graph: root -> and-nodes (class views) -> 9 or-nodes
    each -> leaves. A leaf shared by several or-nodes is stored once; every
    owner sees the same weights.
    """

    def __init__(self, feature_dim=36):
        self.feature_dim = feature_dim
        self.and_nodes: List[AndNode] = []
        self._or_nodes: Dict[Tuple[int, int], OrNode] = {}
        self._leaves: Dict[int, LeafNode] = {}
        self._next_handle = 1
        self.edges = EdgeSet()
        self._layout: Optional[ParameterLayout] = None

    # --- sizes ---

    @property
    def m(self):
        return len(self.and_nodes)

    @property
    def n(self):
        return len(self._leaves)

    @property
    def first_leaf_id(self):
        return 10 * self.m + 1

    @property
    def last_leaf_id(self):
        return 10 * self.m + self.n

    # --- lookup ---

    @property
    def leaves(self):
        """Leaves in id order."""
        return [self._leaves[h] for h in sorted(self._leaves)]

    @property
    def or_nodes(self):
        """Or-nodes in id order."""
        return [self._or_nodes[key] for key in sorted(self._or_nodes)]

    def leaf(self, handle):
        try:
            return self._leaves[handle]
        except KeyError:
            raise KeyError(f"No leaf with handle {handle}")

    def has_leaf(self, handle):
        return handle in self._leaves

    def leaf_by_id(self, leaf_id):
        index = leaf_id - self.first_leaf_id
        leaves = self.leaves
        if not 0 <= index < len(leaves):
            raise KeyError(f"No leaf with id {leaf_id}")
        return leaves[index]

    def and_node(self, r):
        if not 1 <= r <= self.m:
            raise KeyError(f"No and-node {r}")
        return self.and_nodes[r - 1]

    def or_node(self, r, slot):
        return self._or_nodes[(r, slot)]

    def or_by_id(self, j):
        r, slot = divmod(j - self.m - 1, SLOTS)
        return self._or_nodes[(r + 1, slot)]

    def or_id(self, r, slot):
        return self.m + SLOTS * (r - 1) + slot + 1

    def owners(self, handle):
        """Or-nodes listing the leaf as a child, in id order."""
        return [node for node in self.or_nodes if handle in node.children]

    def class_names(self):
        """Distinct class names in and-node order."""
        names = []
        for node in self.and_nodes:
            if node.class_name not in names:
                names.append(node.class_name)
        return names

    def views_of(self, class_name):
        return [node.id for node in self.and_nodes if node.class_name == class_name]

    def is_shared(self, handle):
        return len({node.owner_class for node in self.owners(handle)}) > 1

    def shared_leaf_count(self):
        """Leaves owned by or-nodes of more than one class name."""
        count = 0
        for leaf in self._leaves.values():
            names = {self.and_node(node.owner_class).class_name for node in self.owners(leaf.handle)}
            if len(names) > 1:
                count += 1
        return count

    # --- structural edits ---

    def add_leaf(self, slot, shape, weights=None):
        """Creates an unattached leaf; returns its handle."""
        dim = shape.rows * shape.cols * self.feature_dim
        if weights is None:
            weights = np.zeros(dim)
        weights = np.asarray(weights, dtype=np.float64).copy()
        if weights.shape != (dim,):
            raise DimensionMismatch(f"Leaf weights need length {dim}, got {weights.shape}")
        handle = self._next_handle
        self._next_handle += 1
        self._leaves[handle] = LeafNode(handle=handle, part_slot=slot, shape=shape, weights=weights)
        self.compact()
        return handle

    def add_and_node(self, class_name, view, root_shape, weights=None, bias=0.0, with_leaves=True):
        """
        Appends an and-node with its 9 or-nodes. With `with_leaves`, each or-node
        gets one fresh zero leaf of the default part shape.

        Returns:
            the new and-node's id r
        """
        dim = root_shape.rows * root_shape.cols * self.feature_dim
        weights = np.zeros(dim) if weights is None else np.asarray(weights, dtype=np.float64).copy()
        if weights.shape != (dim,):
            raise DimensionMismatch(f"Root weights need length {dim}, got {weights.shape}")
        r = self.m + 1
        self.and_nodes.append(AndNode(id=r, class_name=class_name, view=view,
                                      root_shape=root_shape, weights=weights, bias=float(bias)))
        for slot in range(SLOTS):
            self._or_nodes[(r, slot)] = OrNode(owner_class=r, part_slot=slot,
                                               anchor_offset=slot_anchor_center(root_shape, slot),
                                               children=[],
                                               deform_weights=np.zeros(DEFORMATION_DIM))
        if with_leaves:
            shape = part_shape_for(root_shape)
            for slot in range(SLOTS):
                self.attach_leaf(r, slot, self.add_leaf(slot, shape))
        self.compact()
        return r

    def attach_leaf(self, r, slot, handle):
        node = self._or_nodes[(r, slot)]
        if handle not in node.children:
            node.children.append(handle)
            node.children.sort()
        self.compact()

    def detach_leaf(self, r, slot, handle):
        node = self._or_nodes[(r, slot)]
        if handle in node.children:
            node.children.remove(handle)
        self.compact()

    def remove_leaf(self, handle):
        """Deletes a leaf, detaching it from every owner and dropping its edges."""
        for node in self._or_nodes.values():
            if handle in node.children:
                node.children.remove(handle)
        self._leaves.pop(handle)
        self.edges.leaf_edges = {key: value for key, value in self.edges.leaf_edges.items()
                                 if handle not in key}
        self.compact()

    def reshape_leaf(self, handle, shape, weights):
        leaf = self._leaves[handle]
        weights = np.asarray(weights, dtype=np.float64).copy()
        if weights.shape != (shape.rows * shape.cols * self.feature_dim,):
            raise DimensionMismatch(f"Weights of length {weights.shape} do not match shape {shape}")
        leaf.shape = shape
        leaf.weights = weights
        self.compact()

    def compact(self):
        """Re-derives contiguous ids after a structural edit."""
        for index, handle in enumerate(sorted(self._leaves)):
            self._leaves[handle].id = self.first_leaf_id + index
        for (r, slot), node in self._or_nodes.items():
            node.id = self.or_id(r, slot)
        for node in self.and_nodes:
            node.or_children = [self.or_id(node.id, slot) for slot in range(SLOTS)
                                if (node.id, slot) in self._or_nodes]
        self._layout = None

    def copy(self):
        return copy.deepcopy(self)

    # --- parameters ---

    def layout(self):
        if self._layout is None:
            offset = 0
            leaf, deformation, root, bias = {}, {}, {}, {}
            for node in self.leaves:
                leaf[node.handle] = slice(offset, offset + node.weights.size)
                offset += node.weights.size
            for node in self.or_nodes:
                deformation[node.id] = slice(offset, offset + DEFORMATION_DIM)
                offset += DEFORMATION_DIM
            for node in self.and_nodes:
                root[node.id] = slice(offset, offset + node.weights.size)
                offset += node.weights.size
                bias[node.id] = offset
                offset += 1
            self._layout = ParameterLayout(leaf=leaf, deformation=deformation, root=root,
                                           bias=bias, size=offset)
        return self._layout

    def quadratic_indices(self):
        """Indices of the dx^2, dy^2 deformation weights in the flattened vector."""
        layout = self.layout()
        return np.array([s.start + k for s in layout.deformation.values() for k in (2, 3)], dtype=np.int64)

    def anchor_for(self, r, slot, handle, root_p, grid_shape):
        return anchor_placement(self._or_nodes[(r, slot)], self._leaves[handle].shape, root_p, grid_shape)


# --- 4. Parameter vector ---

def flatten_parameters(graph):
    """
    Flattened parameter vector: leaf weights by leaf id, deformation weights by
    or-node id, then root weights + bias by and-node id.
    """
    layout = graph.layout()
    omega = np.empty(layout.size)
    for node in graph.leaves:
        omega[layout.leaf[node.handle]] = node.weights
    for node in graph.or_nodes:
        omega[layout.deformation[node.id]] = node.deform_weights
    for node in graph.and_nodes:
        omega[layout.root[node.id]] = node.weights
        omega[layout.bias[node.id]] = node.bias
    return omega


def unflatten_parameters(graph, omega):
    """
    Writes a flattened vector back into the graph in place.

    Raises:
        DimensionMismatch: wrong vector length
    """
    omega = np.asarray(omega, dtype=np.float64)
    layout = graph.layout()
    if omega.shape != (layout.size,):
        raise DimensionMismatch(f"Parameter vector has length {omega.shape}, model expects {layout.size}")
    for node in graph.leaves:
        node.weights = omega[layout.leaf[node.handle]].copy()
    for node in graph.or_nodes:
        node.deform_weights = omega[layout.deformation[node.id]].copy()
    for node in graph.and_nodes:
        node.weights = omega[layout.root[node.id]].copy()
        node.bias = float(omega[layout.bias[node.id]])
    return graph


# --- 5. Validation ---

def validate(graph):
    """
    Checks every structural invariant of the graph.

    Returns:
        list of human-readable violations; empty iff the graph is valid
    """
    problems = []
    dim = graph.feature_dim

    for index, node in enumerate(graph.and_nodes, start=1):
        if node.id != index:
            problems.append(f"and-node at position {index} has id {node.id}")
        expected = node.root_shape.rows * node.root_shape.cols * dim
        if node.weights.shape != (expected,):
            problems.append(f"and-node {node.id}: weights length {node.weights.size} != {expected}")
        if not np.isfinite(node.bias):
            problems.append(f"and-node {node.id}: non-finite bias")
        slots = sorted(slot for (r, slot) in graph._or_nodes if r == node.id)
        if len(slots) != SLOTS:
            problems.append(f"and-node {node.id}: expected 9 or-nodes, found {len(slots)}")
        elif slots != list(range(SLOTS)):
            problems.append(f"and-node {node.id}: or-nodes do not cover part slots 0..8")

    for node in graph.or_nodes:
        if not 1 <= node.owner_class <= graph.m:
            problems.append(f"or-node {node.id}: owner {node.owner_class} is not an and-node")
        if not node.children:
            problems.append(f"or-node {node.id}: no children")
        for handle in node.children:
            if not graph.has_leaf(handle):
                problems.append(f"or-node {node.id}: unknown leaf handle {handle}")
            elif graph.leaf(handle).part_slot != node.part_slot:
                problems.append(f"or-node {node.id}: slot mismatch with leaf {graph.leaf(handle).id} "
                                f"(slot {graph.leaf(handle).part_slot} vs {node.part_slot})")
        if node.deform_weights.shape != (DEFORMATION_DIM,):
            problems.append(f"or-node {node.id}: deformation weights must have length 4")
        elif node.deform_weights[2] < 0 or node.deform_weights[3] < 0:
            problems.append(f"or-node {node.id}: negative quadratic deformation weight")

    owned = {handle for node in graph.or_nodes for handle in node.children}
    expected_id = graph.first_leaf_id
    for leaf in graph.leaves:
        if leaf.id != expected_id:
            problems.append(f"leaf {leaf.handle}: id {leaf.id} breaks contiguous layout (expected {expected_id})")
        expected_id += 1
        if leaf.handle not in owned:
            problems.append(f"leaf {leaf.id}: not referenced by any or-node")
        if not 0 <= leaf.part_slot < SLOTS:
            problems.append(f"leaf {leaf.id}: part slot {leaf.part_slot} out of range")
        expected = leaf.shape.rows * leaf.shape.cols * dim
        if leaf.weights.shape != (expected,):
            problems.append(f"leaf {leaf.id}: weights length {leaf.weights.size} != {expected}")

    for (a, b), alpha in graph.edges.leaf_edges.items():
        if not (graph.has_leaf(a) and graph.has_leaf(b)):
            problems.append(f"leaf edge ({a}, {b}) references a missing leaf")
            continue
        slot_a, slot_b = graph.leaf(a).part_slot, graph.leaf(b).part_slot
        if (slot_a, slot_b) not in SLOT_EDGES:
            problems.append(f"leaf edge ({graph.leaf(a).id}, {graph.leaf(b).id}) joins non-adjacent "
                            f"slots {slot_a} and {slot_b}")
        if np.shape(alpha) != (LEAF_EDGE_DIM,):
            problems.append(f"leaf edge ({a}, {b}) must carry a 4-vector")

    for (r, rp), alpha in graph.edges.and_edges.items():
        if not (1 <= r <= graph.m and 1 <= rp <= graph.m):
            problems.append(f"and edge ({r}, {rp}) references a missing and-node")
        if np.shape(alpha) != (AND_EDGE_DIM,):
            problems.append(f"and edge ({r}, {rp}) must carry a 6-vector")

    return problems
