# aogdet/services/grouping.py
# Class grouping: a seed model per class harvests part patches, patches of
# all classes are clustered per part slot, and classes whose patches keep
# landing in the same clusters are trained together.

import logging
import os
from dataclasses import replace

import numpy as np

from aogdet.errors import FormatError, IoError
from aogdet.services.clustering import SimilarityMatrix, build_similarity, partition_groups
from aogdet.services.dso import DsoConfig, harvest_patches, run_dso
from aogdet.services.ssvm import best_true_latent

logger = logging.getLogger(__name__)

SEED_ITERATIONS = 2


def train_seed_model(samples, class_name, config=None, iterations=SEED_ITERATIONS):
    """Single-leaf-per-or-node model of one class, a few DSO iterations without reconfiguration."""
    config = config or DsoConfig()
    seed_config = replace(config, max_iterations=iterations, enable_reconfiguration=False)
    return run_dso(samples, seed_config, classes=[class_name]).graph


def seed_patches(graph, samples, config):
    """Part patches of every positive of the graph's classes under its best own-class latent."""
    names = set(graph.class_names())
    chosen, latents = [], []
    for sample in samples:
        if not sample.is_positive or sample.label not in names:
            continue
        window = best_true_latent(graph, sample, config.detection, positive_overlap=config.positive_overlap)
        if window is not None:
            chosen.append(sample)
            latents.append(window.latent)
    return harvest_patches(graph, chosen, latents, config)


def slotwise_similarity(patches, labels, config):
    """Similarity counts summed over the nine part slots, clustering each slot separately."""
    counts = np.zeros((len(labels), len(labels)), dtype=np.int64)
    for slot in sorted({p.part_slot for p in patches}):
        members = [p for p in patches if p.part_slot == slot]
        counts += build_similarity(members, labels, config.isodata(), config.size_ratio).counts
    return SimilarityMatrix(counts=counts, labels=list(labels))


def group_classes(samples, config=None, classes=None, sigma=None, seed_iterations=SEED_ITERATIONS):
    """
    Partitions the classes into groups trained together.

    Returns:
        (groups as lists of class names, SimilarityMatrix)
    """
    config = config or DsoConfig()
    labels = list(classes) if classes is not None else sorted({s.label for s in samples if s.is_positive})
    patches = []
    for name in labels:
        graph = train_seed_model(samples, name, config, seed_iterations)
        harvested = seed_patches(graph, samples, config)
        logger.info(f"Seed model '{name}': {len(harvested)} patches")
        patches.extend(harvested)
    similarity = slotwise_similarity(patches, labels, config)
    groups = [[labels[i] for i in group] for group in partition_groups(similarity, sigma)]
    logger.info(f"Grouping (sigma={similarity.sigma if sigma is None else sigma:.2f}): {groups}")
    return groups, similarity


def write_groups(path, groups):
    """One line per group, space-separated class labels."""
    try:
        directory = os.path.dirname(os.path.abspath(path))
        os.makedirs(directory, exist_ok=True)
        with open(path, 'w', encoding='utf-8') as handle:
            for group in groups:
                handle.write(' '.join(group) + '\n')
    except OSError as e:
        raise IoError(f"Cannot write groups file {path}: {e}", path=path)


def read_groups(path):
    """
    Raises:
        IoError: missing or unreadable file
        FormatError: a class listed twice
    """
    try:
        with open(path, 'r', encoding='utf-8') as handle:
            lines = handle.read().splitlines()
    except OSError as e:
        raise IoError(f"Cannot read groups file {path}: {e}", path=path)
    groups, seen = [], set()
    for number, line in enumerate(lines, start=1):
        names = line.split('#', 1)[0].split()
        if not names:
            continue
        for name in names:
            if name in seen:
                raise FormatError(f"{path}:{number}: class '{name}' is already in another group")
            seen.add(name)
        groups.append(names)
    return groups
