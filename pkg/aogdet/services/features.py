# aogdet/services/features.py
# Joint feature vectors phi(X, y, H) aligned with the flattened parameters,
# plus the leaf-edge term that lives outside omega.

import numpy as np

from aogdet.errors import InvalidAssignment, OutOfBounds
from aogdet.models import BACKGROUND, SLOT_EDGES, SLOTS, flatten_parameters
from aogdet.services.imaging import (deformation_feature, extract_part_feature, extract_root_feature,
                                     leaf_pair_feature)


def check_assignment(graph, pyramid, latent):
    """
    Raises:
        InvalidAssignment: the latent does not fit the graph or the pyramid
    """
    if not 1 <= latent.and_node <= graph.m:
        raise InvalidAssignment(f"Latent refers to unknown and-node {latent.and_node}")
    if len(latent.slots) != SLOTS:
        raise InvalidAssignment(f"Latent needs {SLOTS} slot choices, got {len(latent.slots)}")
    if not 0 <= latent.root.level < len(pyramid.levels):
        raise InvalidAssignment(f"Root placement at missing level {latent.root.level}")
    for slot, choice in enumerate(latent.slots):
        node = graph.or_node(latent.and_node, slot)
        if choice.leaf not in node.children:
            raise InvalidAssignment(f"Leaf handle {choice.leaf} is not a child of or-node {node.id}")
        if choice.placement.level != latent.root.level:
            raise InvalidAssignment(f"Slot {slot} placed at level {choice.placement.level}, "
                                    f"root at level {latent.root.level}")


def slot_anchors(graph, pyramid, latent):
    """Anchor placement of each chosen leaf, in slot order."""
    grid = pyramid.levels[latent.root.level].full_res_grid
    return [graph.anchor_for(latent.and_node, slot, choice.leaf, latent.root, grid.shape)
            for slot, choice in enumerate(latent.slots)]


def joint_feature(graph, pyramid, y, latent):
    """
    Feature vector phi(X, y, H) in the flattened parameter layout.

    Blocks: +part HOG at each chosen leaf, -(dx, dy, dx^2, dy^2) at each
    or-node, +root HOG and +1 bias at the and-node. Background (y = -1) maps to
    the zero vector.

    Raises:
        InvalidAssignment: latent inconsistent with y, the graph or the pyramid
    """
    layout = graph.layout()
    phi = np.zeros(layout.size)
    if y == BACKGROUND:
        return phi
    if latent is None or latent.and_node != y:
        raise InvalidAssignment(f"Latent assignment does not belong to and-node {y}")
    check_assignment(graph, pyramid, latent)

    r = latent.and_node
    and_node = graph.and_node(r)
    try:
        anchors = slot_anchors(graph, pyramid, latent)
        for slot, choice in enumerate(latent.slots):
            leaf = graph.leaf(choice.leaf)
            phi[layout.leaf[leaf.handle]] += extract_part_feature(pyramid, choice.placement, leaf.shape)
            phi[layout.deformation[graph.or_id(r, slot)]] -= deformation_feature(anchors[slot], choice.placement)
        phi[layout.root[r]] = extract_root_feature(pyramid, latent.root, and_node.root_shape)
    except OutOfBounds as e:
        raise InvalidAssignment(f"Latent assignment leaves the pyramid: {e.message}")
    phi[layout.bias[r]] = 1.0
    return phi


def leaf_edge_score(graph, pyramid, latent):
    """Sum of alpha^l . psi^l over adjacent slots with a learned edge."""
    if not graph.edges.leaf_edges:
        return 0.0
    anchors = slot_anchors(graph, pyramid, latent)
    total = 0.0
    for slot_a, slot_b in SLOT_EDGES:
        a, b = latent.slots[slot_a], latent.slots[slot_b]
        alpha = graph.edges.leaf_edge(a.leaf, b.leaf)
        if alpha is None:
            continue
        psi = leaf_pair_feature(a.placement, graph.leaf(a.leaf).shape,
                                b.placement, graph.leaf(b.leaf).shape,
                                anchors[slot_a], anchors[slot_b])
        total += float(np.dot(alpha, psi))
    return total


def latent_score(graph, pyramid, latent, omega=None):
    """omega . phi(X, r, H) plus leaf-edge responses: the window score of H."""
    omega = flatten_parameters(graph) if omega is None else omega
    phi = joint_feature(graph, pyramid, latent.and_node, latent)
    return float(np.dot(omega, phi)) + leaf_edge_score(graph, pyramid, latent)
