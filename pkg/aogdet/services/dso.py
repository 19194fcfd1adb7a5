# aogdet/services/dso.py
# Dynamical structural optimization of one class group: CCCP iterations of
# latent estimation, structural reconfiguration (leaf creation, removal and
# sharing per part slot, with feature remapping) and a convex parameter solve,
# keeping a new structure only when it lowers the training energy.

import logging
import os
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from aogdet.errors import ConfigError, InsufficientData
from aogdet.models import (SLOTS, AndOrGraph, LatentAssignment, SlotChoice, anchor_placement,
                           flatten_parameters, unflatten_parameters, validate)
from aogdet.services.clustering import IsodataConfig, Patch, bucket_by_size, isodata, resample_descriptor
from aogdet.services.evaluation import iou_many
from aogdet.services.features import joint_feature
from aogdet.services.imaging import PartShape, extract_part_feature
from aogdet.services.inference import DetectionConfig, root_placements
from aogdet.services.serialization import save_model
from aogdet.services.ssvm import DetectionOracle, SolverConfig, best_true_latent, solve_convex

logger = logging.getLogger(__name__)

MIN_ROOT_CELLS = 3


# --- 1. Types ---

@dataclass(frozen=True)
class DsoConfig:
    detection: DetectionConfig = field(default_factory=DetectionConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    min_cluster_size: int = 5
    isodata_max_iterations: int = 50
    split_factor: float = 0.6
    merge_factor: float = 0.4
    size_ratio: float = 1.25
    positive_overlap: float = 0.7
    max_iterations: int = 30
    epsilon: float = 1e-4
    enable_sharing: bool = True
    enable_reconfiguration: bool = True
    views_per_class: int = 2
    max_root_cells: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.views_per_class < 1:
            raise ConfigError("views_per_class must be >= 1")
        if self.max_root_cells < MIN_ROOT_CELLS:
            raise ConfigError(f"max_root_cells must be >= {MIN_ROOT_CELLS}")
        if not 0.0 < self.positive_overlap <= 1.0:
            raise ConfigError("positive_overlap must lie in (0, 1]")

    def isodata(self):
        return IsodataConfig(min_cluster_size=self.min_cluster_size,
                             max_iterations=self.isodata_max_iterations,
                             split_factor=self.split_factor,
                             merge_factor=self.merge_factor,
                             seed=self.seed)


@dataclass
class IterationRecord:
    t: int
    energy: float
    accepted: bool
    n_leaves: int
    n_shared: int
    created: int = 0
    removed: int = 0
    shared: int = 0


@dataclass
class DsoState:
    graph: AndOrGraph
    omega: np.ndarray
    energy: float
    iteration: int = 0
    # per sample H~_k (None for backgrounds)
    latents: List[Optional[LatentAssignment]] = field(default_factory=list)
    # leaf handle -> (sample, slot) patches it currently explains
    clusters: Dict[int, List[Tuple[int, int]]] = field(default_factory=dict)
    history: List[IterationRecord] = field(default_factory=list)


@dataclass
class ReconfigPlan:
    created: List[int] = field(default_factory=list)
    removed: List[int] = field(default_factory=list)
    # (handle, and-node, slot) attachments; `shared` are those crossing a class
    attached: List[Tuple[int, int, int]] = field(default_factory=list)
    shared: List[Tuple[int, int, int]] = field(default_factory=list)
    reshaped: List[int] = field(default_factory=list)
    # (sample, slot) -> new leaf handle, for patches that changed leaf
    moved: Dict[Tuple[int, int], int] = field(default_factory=dict)

    @property
    def is_empty(self):
        return not (self.created or self.removed or self.attached or self.reshaped or self.moved)


# --- 2. Initialization ---

def _positives_by_class(samples):
    grouped = {}
    for index, sample in enumerate(samples):
        if sample.is_positive:
            grouped.setdefault(sample.label, []).append(index)
    return grouped


def group_samples(samples, classes=None):
    """Positives of the given classes plus every background sample, in input order."""
    if classes is None:
        return list(samples)
    wanted = set(classes)
    return [s for s in samples if not s.is_positive or s.label in wanted]


def _root_shape(boxes, cell_size, max_root_cells):
    """Median box size in half-resolution cells, scaled down to fit max_root_cells."""
    widths = np.array([b[2] - b[0] for b in boxes], dtype=np.float64)
    heights = np.array([b[3] - b[1] for b in boxes], dtype=np.float64)
    rows = float(np.median(heights)) / (2 * cell_size)
    cols = float(np.median(widths)) / (2 * cell_size)
    largest = max(rows, cols)
    if largest > max_root_cells:
        rows, cols = rows * max_root_cells / largest, cols * max_root_cells / largest
    return PartShape(max(MIN_ROOT_CELLS, int(round(rows))), max(MIN_ROOT_CELLS, int(round(cols))))


def split_views(samples, indices, views):
    """Assigns view tags by aspect ratio: sorted w/h split into `views` equal runs."""
    aspect = {i: (samples[i].box[2] - samples[i].box[0]) / max(samples[i].box[3] - samples[i].box[1], 1e-9)
              for i in indices}
    ordered = sorted(indices, key=lambda i: (aspect[i], i))
    views = min(views, len(ordered))
    return {i: position * views // len(ordered) for position, i in enumerate(ordered)}


def _fixed_latent(graph, r, sample, config):
    """Latent of a positive at the placement best covering its box, parts at their anchors."""
    pyramid = sample.pyramid(config.hog)
    node = graph.and_node(r)
    placements, boxes = root_placements(pyramid, node.root_shape)
    if not placements:
        return None
    root = placements[int(np.argmax(iou_many(sample.box, boxes)))]
    grid_shape = pyramid.levels[root.level].full_res_grid.shape
    slots = []
    for slot in range(SLOTS):
        or_node = graph.or_node(r, slot)
        handle = or_node.children[0]
        slots.append(SlotChoice(handle, anchor_placement(or_node, graph.leaf(handle).shape, root, grid_shape)))
    return LatentAssignment(and_node=r, root=root, slots=tuple(slots))


def initialize_group_model(samples, config=None, classes=None):
    """
    Builds the starting model of a class group: one and-node per (class, view),
    nine or-nodes each with a single leaf, no sharing and no edges. Views come
    from an aspect-ratio split of each class's boxes; weights from one SSVM
    solve with every positive fixed at its best covering placement.

    Raises:
        InsufficientData: no positives, or a requested class without positives
    """
    config = config or DsoConfig()
    samples = group_samples(samples, classes)
    grouped = _positives_by_class(samples)
    classes = list(classes) if classes is not None else sorted(grouped)
    if not classes:
        raise InsufficientData("A group model needs at least one positive sample")
    for name in classes:
        if name not in grouped:
            raise InsufficientData(f"Class '{name}' has no positive training sample", class_name=name)

    hog = config.detection.hog
    graph = AndOrGraph(feature_dim=hog.feature_dim)
    view_of = {}
    for name in classes:
        tags = split_views(samples, grouped[name], config.views_per_class)
        for view in sorted(set(tags.values())):
            members = [i for i, v in tags.items() if v == view]
            shape = _root_shape([samples[i].box for i in members], hog.cell_size, config.max_root_cells)
            r = graph.add_and_node(name, view, shape)
            for i in members:
                view_of[i] = r
            logger.debug(f"and-node {r}: class '{name}' view {view}, root {shape.rows}x{shape.cols}, "
                         f"{len(members)} positives")

    features = []
    for index, sample in enumerate(samples):
        latent = _fixed_latent(graph, view_of[index], sample, config.detection) if index in view_of else None
        if latent is None:
            features.append(None)
            continue
        features.append(joint_feature(graph, sample.pyramid(hog), latent.and_node, latent))

    oracle = DetectionOracle(graph, samples, config.detection, features, config.positive_overlap)
    result = solve_convex(oracle, config.solver)
    unflatten_parameters(graph, result.weights)
    logger.info(f"Initialized group {classes}: m={graph.m}, n={graph.n}, objective {result.objective:.6f}")
    return graph


# --- 3. Step I: latent estimation ---

def estimate_latent(state, samples, config):
    """
    Best latent of every positive for its own class at the current weights.

    Returns:
        (latents, features, q) with q = -C * sum of the positive features
    """
    graph = state.graph
    unflatten_parameters(graph, state.omega)
    size = graph.layout().size
    latents, features = [], []
    q = np.zeros(size)
    for sample in samples:
        if not sample.is_positive:
            latents.append(None)
            features.append(np.zeros(size))
            continue
        window = best_true_latent(graph, sample, config.detection, positive_overlap=config.positive_overlap)
        if window is None:
            logger.warning(f"No placement of class '{sample.label}' fits sample {sample.image_id}")
            latents.append(None)
            features.append(np.zeros(size))
            continue
        phi = joint_feature(graph, sample.pyramid(config.detection.hog), window.and_node, window.latent)
        latents.append(window.latent)
        features.append(phi)
        q -= config.solver.C * phi
    return latents, features, q


def compute_energy(graph, samples, omega, config):
    """
    E(w) = f(w) - g(w): the loss-augmented objective minus C times each
    positive's best own-class score, both maximized afresh at w.
    """
    oracle = DetectionOracle(graph, samples, config.detection, None, config.positive_overlap)
    omega = np.asarray(omega, dtype=np.float64)
    energy = 0.5 * float(omega @ omega)
    for k, sample in enumerate(samples):
        found = oracle.most_violated(omega, k)
        top = oracle.baseline_loss(k)
        if found:
            top = max(top, found[0].value)
        own = 0.0
        if sample.is_positive:
            scores = [c.value - c.loss for c in found if graph.and_node(c.label).class_name == sample.label]
            own = max(scores) if scores else 0.0
        energy += config.solver.C * (top - own)
    return energy


# --- 4. Step II: structural reconfiguration ---

def harvest_patches(graph, samples, latents, config):
    """One patch per (positive sample, slot): the descriptor under its chosen leaf."""
    patches = []
    for k, (sample, latent) in enumerate(zip(samples, latents)):
        if latent is None:
            continue
        pyramid = sample.pyramid(config.detection.hog)
        for slot, choice in enumerate(latent.slots):
            shape = graph.leaf(choice.leaf).shape
            patches.append(Patch(sample=k, class_label=sample.label, part_slot=slot,
                                 descriptor=extract_part_feature(pyramid, choice.placement, shape),
                                 shape=shape, leaf=choice.leaf, and_node=latent.and_node,
                                 placement=choice.placement))
    return patches


def _pools(patches, enable_sharing):
    """Patch pools clustered together: per slot, and per class as well without sharing."""
    pools = {}
    for patch in patches:
        key = (patch.part_slot,) if enable_sharing else (patch.part_slot, patch.class_label)
        pools.setdefault(key, []).append(patch)
    return [pools[key] for key in sorted(pools)]


def _initial_centroids(bucket, min_cluster_size):
    """
    One mean per leaf already in the bucket, topped up with farthest-point
    seeds to one centroid per 4 * min_cluster_size patches. Extra modes are
    then found by k-means and superfluous seeds merged away by ISODATA.
    """
    X = bucket.descriptors
    leaves = sorted({p.leaf for p in bucket.patches})
    centroids = [X[[i for i, p in enumerate(bucket.patches) if p.leaf == h]].mean(axis=0) for h in leaves]
    target = max(len(centroids), len(X) // (4 * min_cluster_size))
    nearest = np.min([((X - c) ** 2).sum(axis=1) for c in centroids], axis=0)
    while len(centroids) < target and nearest.max() > 0:
        pick = X[int(np.argmax(nearest))]
        centroids.append(pick)
        nearest = np.minimum(nearest, ((X - pick) ** 2).sum(axis=1))
    return np.vstack(centroids)


def remap_feature(phi, old_graph, new_graph, assignments):
    """
    Moves a positive feature into the layout of a reconfigured graph: part
    blocks go to each patch's new leaf, everything else keeps its node.

    Args:
        assignments: [(new leaf handle, descriptor at the leaf's shape)]
    """
    old, new = old_graph.layout(), new_graph.layout()
    remapped = np.zeros(new.size)
    for j, block in new.deformation.items():
        remapped[block] = phi[old.deformation[j]]
    for r, block in new.root.items():
        remapped[block] = phi[old.root[r]]
        remapped[new.bias[r]] = phi[old.bias[r]]
    for handle, descriptor in assignments:
        remapped[new.leaf[handle]] += descriptor
    return remapped


def reconfigure(state, samples, latents, features, q, config):
    """
    Per part slot: cluster the harvested patches (pooled across the group's
    classes when sharing is on), then map every cluster to a leaf. A cluster
    keeps its majority leaf when that leaf is still free, otherwise it becomes
    a new leaf initialized at its unit-norm centroid. Leaves left without a
    cluster are removed unless they are some or-node's last child; each leaf
    is attached to every and-node that contributed patches to its cluster.

    Returns:
        (plan, graph, latents, features, q); an empty plan returns the inputs
        unchanged
    """
    graph = state.graph
    unflatten_parameters(graph, state.omega)
    patches = harvest_patches(graph, samples, latents, config)
    plan = ReconfigPlan()
    target = {}        # patch index -> leaf handle in the new graph
    descriptor = {}    # patch index -> descriptor at the target leaf's shape
    new_graph = graph.copy()
    index_of = {id(p): i for i, p in enumerate(patches)}
    claimed = set()

    for pool in _pools(patches, config.enable_sharing):
        for bucket in bucket_by_size(pool, config.size_ratio):
            seeds = _initial_centroids(bucket, config.min_cluster_size)
            result = isodata(bucket.descriptors, config.isodata(), initial_centroids=seeds)
            clusters = sorted(range(result.k), key=lambda c: (-result.members(c).size, c))
            for c in clusters:
                members = result.members(c)
                if members.size == 0:
                    continue
                votes = Counter(bucket.patches[i].leaf for i in members)
                majority = min(votes, key=lambda h: (-votes[h], h))
                slot = bucket.patches[members[0]].part_slot
                if majority not in claimed:
                    handle = majority
                    leaf = new_graph.leaf(handle)
                    if leaf.shape != bucket.shape:
                        new_graph.reshape_leaf(handle, bucket.shape,
                                               resample_descriptor(leaf.weights, leaf.shape, bucket.shape))
                        plan.reshaped.append(handle)
                else:
                    centroid = result.centroids[c]
                    norm = float(np.linalg.norm(centroid))
                    handle = new_graph.add_leaf(slot, bucket.shape, centroid / norm if norm > 0 else centroid)
                    plan.created.append(handle)
                claimed.add(handle)

                for i in members:
                    patch = bucket.patches[i]
                    position = index_of[id(patch)]
                    target[position] = handle
                    descriptor[position] = bucket.descriptors[i]
                    if handle != patch.leaf:
                        plan.moved[(patch.sample, patch.part_slot)] = handle
                    owner = new_graph.or_node(patch.and_node, slot)
                    if handle not in owner.children:
                        owner_classes = {new_graph.and_node(o.owner_class).class_name
                                         for o in new_graph.owners(handle)}
                        new_graph.attach_leaf(patch.and_node, slot, handle)
                        plan.attached.append((handle, patch.and_node, slot))
                        if owner_classes and new_graph.and_node(patch.and_node).class_name not in owner_classes:
                            plan.shared.append((handle, patch.and_node, slot))

    for leaf in list(new_graph.leaves):
        if leaf.handle in claimed:
            continue
        if any(len(node.children) == 1 for node in new_graph.owners(leaf.handle)):
            continue
        new_graph.remove_leaf(leaf.handle)
        plan.removed.append(leaf.handle)

    if plan.is_empty:
        return plan, graph, latents, features, q

    problems = validate(new_graph)
    if problems:
        raise ConfigError(f"Reconfiguration produced an invalid graph: {problems[0]}", problems=problems)

    assigned = {}
    for position, patch in enumerate(patches):
        assigned.setdefault(patch.sample, []).append((patch.part_slot, target[position], descriptor[position]))
    new_latents, new_features = [], []
    new_q = np.zeros(new_graph.layout().size)
    for k, (latent, phi) in enumerate(zip(latents, features)):
        if latent is None:
            new_latents.append(None)
            new_features.append(np.zeros(new_graph.layout().size))
            continue
        choices = sorted(assigned.get(k, []))
        slots = list(latent.slots)
        for slot, handle, _ in choices:
            slots[slot] = SlotChoice(handle, slots[slot].placement)
        new_latents.append(LatentAssignment(and_node=latent.and_node, root=latent.root, slots=tuple(slots)))
        remapped = remap_feature(phi, graph, new_graph, [(handle, d) for _, handle, d in choices])
        new_features.append(remapped)
        new_q -= config.solver.C * remapped

    logger.debug(f"Reconfiguration: {len(plan.created)} created, {len(plan.removed)} removed, "
                 f"{len(plan.shared)} shared, {len(plan.moved)} patches moved")
    return plan, new_graph, new_latents, new_features, new_q


# --- 5. Step III: parameters and acceptance ---

def step_parameters(graph, samples, features, config, initial=None):
    """
    Convex step on a fixed structure: solve with the given positive features
    from `initial`, then measure the energy with fresh latents.

    Returns:
        (omega, energy)
    """
    oracle = DetectionOracle(graph, samples, config.detection, features, config.positive_overlap)
    result = solve_convex(oracle, config.solver, initial)
    energy = compute_energy(graph, samples, result.weights, config)
    return result.weights, energy


def _clusters_from(latents):
    clusters = {}
    for k, latent in enumerate(latents):
        if latent is None:
            continue
        for slot, choice in enumerate(latent.slots):
            clusters.setdefault(choice.leaf, []).append((k, slot))
    return clusters


def _checkpoint(directory, t, graph):
    if directory:
        save_model(os.path.join(directory, f'iter_{t:03d}.aogm'), graph)


def run_dso(samples, config=None, graph=None, classes=None, checkpoint_dir=None):
    """
    CCCP training of one class group with structure learning.

    Each iteration estimates latents, proposes a reconfigured structure and
    solves its parameters. The new structure is kept when its energy is lower;
    otherwise the old structure takes a plain parameter step, and even that is
    dropped if it would raise the energy. Stops after a relative energy change
    below `epsilon` on an iteration without accepted reconfiguration.

    Returns:
        DsoState after the last iteration
    """
    config = config or DsoConfig()
    samples = group_samples(samples, classes)
    graph = graph or initialize_group_model(samples, config, classes)
    omega = flatten_parameters(graph)
    state = DsoState(graph=graph, omega=omega, energy=compute_energy(graph, samples, omega, config))
    logger.info(f"DSO start: E={state.energy:.6f}, m={graph.m}, n={graph.n}")

    for t in range(1, config.max_iterations + 1):
        latents, features, q = estimate_latent(state, samples, config)
        previous = state.energy
        accepted = False
        plan = ReconfigPlan()

        if config.enable_reconfiguration:
            plan, new_graph, new_latents, new_features, _ = reconfigure(state, samples, latents, features, q, config)
            if not plan.is_empty:
                omega_d, energy_d = step_parameters(new_graph, samples, new_features, config,
                                                    initial=flatten_parameters(new_graph))
                if energy_d < state.energy:
                    state.graph, state.omega, state.energy = new_graph, omega_d, energy_d
                    latents = new_latents
                    accepted = True

        if not accepted:
            omega_t, energy_t = step_parameters(state.graph, samples, features, config, initial=state.omega)
            if energy_t <= state.energy:
                state.omega, state.energy = omega_t, energy_t

        unflatten_parameters(state.graph, state.omega)
        state.latents = latents
        state.clusters = _clusters_from(latents)
        state.iteration = t
        counts = (len(plan.created), len(plan.removed), len(plan.shared)) if accepted else (0, 0, 0)
        record = IterationRecord(t=t, energy=state.energy, accepted=accepted, n_leaves=state.graph.n,
                                 n_shared=state.graph.shared_leaf_count(), created=counts[0],
                                 removed=counts[1], shared=counts[2])
        state.history.append(record)
        logger.info(f"{t} {record.energy:.6f} {'yes' if accepted else 'no'} {record.n_leaves} "
                    f"{record.n_shared} {record.created} {record.removed} {record.shared}")
        if accepted or state.energy < previous:
            _checkpoint(checkpoint_dir, t, state.graph)

        change = abs(previous - state.energy) / max(abs(previous), 1e-12)
        if not accepted and change < config.epsilon:
            logger.info(f"DSO converged after {t} iterations (relative change {change:.2e})")
            break
    return state


def train_group(samples, config=None, classes=None, checkpoint_dir=None):
    """Trains one group model; returns the final AndOrGraph."""
    state = run_dso(samples, config, classes=classes, checkpoint_dir=checkpoint_dir)
    return state.graph
