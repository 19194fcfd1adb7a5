# aogdet/services/datasets.py
# Dataset manifests, detection files and the sample lists the trainers consume.
#
# Manifest: plain text, '#' comments, optional header "# split <name>".
#   <image path> <class> <x_min> <y_min> <x_max> <y_max>   one annotation
#   <image path>                                          image without objects
# Relative paths resolve against the manifest's directory.
#
# Detections: "<image_id> <class> <score> <x_min> <y_min> <x_max> <y_max>".

import json
import logging
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

from aogdet.errors import FormatError, IoError
from aogdet.services.combine import CombinedTrainingImage
from aogdet.services.imaging import load_image
from aogdet.services.ssvm import TrainingSample
from aogdet.utils.general import box_area, convert_to_json_safe

logger = logging.getLogger(__name__)


# --- 1. Manifests ---

@dataclass
class ManifestEntry:
    path: str
    annotations: List[Tuple[str, Tuple[float, float, float, float]]] = field(default_factory=list)


@dataclass
class DatasetManifest:
    entries: List[ManifestEntry]
    split: str = 'train'
    root: str = '.'

    def resolve(self, entry):
        return entry.path if os.path.isabs(entry.path) else os.path.join(self.root, entry.path)

    def classes(self):
        return sorted({label for entry in self.entries for label, _ in entry.annotations})

    def groundtruth(self):
        """{image_id: [(class, box)]} keyed by the path as written in the manifest."""
        return {entry.path: list(entry.annotations) for entry in self.entries}


def _parse_line(path, number, line):
    parts = line.split()
    if len(parts) == 1:
        return parts[0], None
    if len(parts) != 6:
        raise FormatError(f"{path}:{number}: expected 'path class x_min y_min x_max y_max', got {line!r}")
    try:
        box = tuple(float(v) for v in parts[2:])
    except ValueError:
        raise FormatError(f"{path}:{number}: box coordinates must be numbers")
    if box_area(box) <= 0:
        raise FormatError(f"{path}:{number}: degenerate box {box}")
    return parts[0], (parts[1], box)


def load_manifest(path, check_files=True):
    """
    Raises:
        IoError: unreadable manifest, or a listed image that does not exist
        FormatError: malformed line or degenerate box
    """
    try:
        with open(path, 'r', encoding='utf-8') as handle:
            lines = handle.read().splitlines()
    except OSError as e:
        raise IoError(f"Cannot read manifest {path}: {e}", path=path)

    split = 'train'
    entries: Dict[str, ManifestEntry] = {}
    for number, raw in enumerate(lines, start=1):
        stripped = raw.strip()
        if stripped.startswith('#'):
            words = stripped[1:].split()
            if len(words) == 2 and words[0] == 'split':
                split = words[1]
            continue
        if not stripped:
            continue
        image, annotation = _parse_line(path, number, stripped)
        entry = entries.setdefault(image, ManifestEntry(path=image))
        if annotation is not None:
            entry.annotations.append(annotation)

    manifest = DatasetManifest(entries=list(entries.values()), split=split,
                               root=os.path.dirname(os.path.abspath(path)))
    if check_files:
        for entry in manifest.entries:
            if not os.path.isfile(manifest.resolve(entry)):
                raise IoError(f"Image listed in {path} not found: {entry.path}", path=entry.path)
    logger.debug(f"Manifest {path}: {len(manifest.entries)} images, split '{split}'")
    return manifest


def save_manifest(path, manifest):
    try:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, 'w', encoding='utf-8') as handle:
            handle.write(f"# split {manifest.split}\n")
            for entry in manifest.entries:
                if not entry.annotations:
                    handle.write(f"{entry.path}\n")
                for label, box in entry.annotations:
                    handle.write(f"{entry.path} {label} " + ' '.join(f"{v:g}" for v in box) + '\n')
    except OSError as e:
        raise IoError(f"Cannot write manifest {path}: {e}", path=path)


# --- 2. Training inputs ---

def build_training_samples(manifest, classes=None):
    """
    One positive sample per annotation (of the given classes) and one
    background sample per image without annotations. Images load once.
    """
    wanted = set(classes) if classes is not None else None
    samples = []
    for entry in manifest.entries:
        image = load_image(manifest.resolve(entry))
        if not entry.annotations:
            samples.append(TrainingSample(entry.path, image=image))
            continue
        for index, (label, box) in enumerate(entry.annotations):
            if wanted is None or label in wanted:
                samples.append(TrainingSample(f"{entry.path}#{index}", label, box, image=image))
    return samples


def build_combined_images(manifest):
    return [CombinedTrainingImage(entry.path, list(entry.annotations), image=load_image(manifest.resolve(entry)))
            for entry in manifest.entries if entry.annotations]


# --- 3. Detection files ---

def write_detections(path, detections_by_image):
    """
    Args:
        detections_by_image: {image_id: [Detection]}
    """
    try:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, 'w', encoding='utf-8') as handle:
            for image_id, detections in detections_by_image.items():
                for d in detections:
                    x0, y0, x1, y1 = d.box
                    handle.write(f"{image_id} {d.class_name} {d.score:.6f} {x0:g} {y0:g} {x1:g} {y1:g}\n")
    except OSError as e:
        raise IoError(f"Cannot write detections {path}: {e}", path=path)


def read_detections(path):
    """
    Returns:
        {image_id: [(class, score, box)]}

    Raises:
        IoError, FormatError
    """
    try:
        with open(path, 'r', encoding='utf-8') as handle:
            lines = handle.read().splitlines()
    except OSError as e:
        raise IoError(f"Cannot read detections {path}: {e}", path=path)
    detections: Dict[str, list] = {}
    for number, line in enumerate(lines, start=1):
        parts = line.split()
        if not parts or parts[0].startswith('#'):
            continue
        if len(parts) != 7:
            raise FormatError(f"{path}:{number}: expected 7 fields, got {len(parts)}")
        try:
            score = float(parts[2])
            box = tuple(float(v) for v in parts[3:])
        except ValueError:
            raise FormatError(f"{path}:{number}: score and box must be numbers")
        detections.setdefault(parts[0], []).append((parts[1], score, box))
    return detections


def latent_record(image_id, detection, graph):
    """JSON-safe latent assignment of one detection (view, root and per-slot leaf/placement)."""
    latent = detection.latent
    node = graph.and_node(latent.and_node)
    return convert_to_json_safe({
        'image_id': image_id,
        'class': detection.class_name,
        'view': node.view,
        'and_node': latent.and_node,
        'root': [latent.root.level, latent.root.row, latent.root.col],
        'slots': [{'leaf': choice.leaf,
                   'placement': [choice.placement.level, choice.placement.row, choice.placement.col]}
                  for choice in latent.slots],
    })


def write_latent_sidecar(path, records):
    """One JSON object per line."""
    try:
        with open(path, 'w', encoding='utf-8') as handle:
            for record in records:
                handle.write(json.dumps(record, sort_keys=True) + '\n')
    except OSError as e:
        raise IoError(f"Cannot write sidecar {path}: {e}", path=path)
