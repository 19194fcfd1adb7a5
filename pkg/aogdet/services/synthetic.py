# aogdet/services/synthetic.py
# Desk-scale synthetic corpus: objects are 3x3 grids of part archetypes, each
# archetype a 3x3 block of primitives (oriented bars, corners and blobs).
# Classes can be made to share the archetypes of one part slot, which is what
# the sharing and grouping experiments need.

import logging
import os
from dataclasses import dataclass, field
from typing import Dict, List, Tuple

import numpy as np
from PIL import Image as PILImage, ImageDraw

from aogdet.errors import ConfigError, IoError
from aogdet.models import SLOTS
from aogdet.services.datasets import DatasetManifest, ManifestEntry, save_manifest
from aogdet.services.imaging import Image, save_image

logger = logging.getLogger(__name__)

# (height, width) in pixels per view; both multiples of the 8-pixel cell.
VIEW_SHAPES = ((48, 48), (96, 48))
BAR_ORIENTATIONS = 4
CORNER_ROTATIONS = 4
# bars, corners, then one blob code
PRIMITIVES = BAR_ORIENTATIONS + CORNER_ROTATIONS + 1
PRIMITIVE_JITTER = 1
MIN_HAMMING = 4
PLACEMENT_STEP = 8
BACKGROUND_LEVEL = 40
BAR_LEVEL = 220
MAX_OBJECTS = 2


@dataclass(frozen=True)
class SynthConfig:
    classes: int = 4
    views: int = 2
    archetypes_per_slot: int = 2
    # (source class, target class, slot): the target copies the source's archetypes at that slot
    sharing_pairs: Tuple[Tuple[int, int, int], ...] = ((0, 1, 7),)
    image_size: int = 160
    noise: float = 0.1
    train_images: int = 80
    test_images: int = 40
    background_images: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.classes < 1:
            raise ConfigError("SynthConfig.classes must be >= 1")
        if not 1 <= self.views <= len(VIEW_SHAPES):
            raise ConfigError(f"SynthConfig.views must lie in [1, {len(VIEW_SHAPES)}]")
        if self.archetypes_per_slot < 1:
            raise ConfigError("SynthConfig.archetypes_per_slot must be >= 1")
        if self.image_size < max(h for h, _ in VIEW_SHAPES[:self.views]) + 2 * PLACEMENT_STEP:
            raise ConfigError(f"SynthConfig.image_size {self.image_size} cannot hold the tallest view")
        if self.noise < 0:
            raise ConfigError("SynthConfig.noise must be >= 0")
        for a, b, slot in self.sharing_pairs:
            if not (0 <= a < self.classes and 0 <= b < self.classes and 0 <= slot < SLOTS) or a == b:
                raise ConfigError(f"Invalid sharing pair {a}:{b}:{slot}")

    def class_name(self, index):
        return f"class{index}"


def parse_sharing_pairs(values):
    """'a:b:slot' strings -> tuple of int triples."""
    pairs = []
    for value in values:
        parts = str(value).split(':')
        if len(parts) != 3:
            raise ConfigError(f"Sharing pair must read 'a:b:slot', got {value!r}")
        try:
            pairs.append(tuple(int(p) for p in parts))
        except ValueError:
            raise ConfigError(f"Sharing pair must hold integers, got {value!r}")
    return tuple(pairs)


@dataclass
class SynthCorpus:
    train: DatasetManifest
    test: DatasetManifest
    # (class, slot) -> list of archetypes, each a (3, 3) array of primitive codes
    archetypes: Dict[Tuple[int, int], List[np.ndarray]] = field(default_factory=dict)
    train_path: str = ''
    test_path: str = ''


# --- 1. Archetypes ---

def build_archetypes(config, rng):
    """
    Draws archetypes pairwise at least MIN_HAMMING cells apart, then applies
    the sharing pairs.
    """
    drawn: List[np.ndarray] = []
    bank: Dict[Tuple[int, int], List[np.ndarray]] = {}
    for c in range(config.classes):
        for slot in range(SLOTS):
            entries = []
            for _ in range(config.archetypes_per_slot):
                for _attempt in range(10000):
                    candidate = rng.integers(0, PRIMITIVES, size=(3, 3))
                    if all(np.count_nonzero(candidate != other) >= MIN_HAMMING for other in drawn):
                        break
                else:
                    raise ConfigError("Cannot draw enough distinct archetypes; lower classes or archetypes_per_slot")
                drawn.append(candidate)
                entries.append(candidate)
            bank[(c, slot)] = entries
    for a, b, slot in config.sharing_pairs:
        bank[(b, slot)] = [arch.copy() for arch in bank[(a, slot)]]
    return bank


def primitive_kind(code):
    """'bar', 'corner' or 'blob' for an archetype cell code."""
    if code < BAR_ORIENTATIONS:
        return 'bar'
    if code < BAR_ORIENTATIONS + CORNER_ROTATIONS:
        return 'corner'
    return 'blob'


def _draw_primitive(draw, code, cx, cy, half):
    kind = primitive_kind(code)
    if kind == 'bar':
        angle = np.pi * code / BAR_ORIENTATIONS
        dx, dy = half * np.cos(angle), half * np.sin(angle)
        draw.line([(cx - dx, cy - dy), (cx + dx, cy + dy)], fill=BAR_LEVEL, width=2)
    elif kind == 'corner':
        angle = 0.5 * np.pi * (code - BAR_ORIENTATIONS)
        u = np.array([np.cos(angle), np.sin(angle)])
        v = np.array([-u[1], u[0]])
        vertex = np.array([cx, cy]) - 0.5 * half * (u + v)
        arm_u, arm_v = vertex + 1.5 * half * u, vertex + 1.5 * half * v
        draw.line([tuple(arm_u), tuple(vertex), tuple(arm_v)], fill=BAR_LEVEL, width=2, joint='curve')
    else:
        radius = 0.7 * half
        draw.ellipse([cx - radius, cy - radius, cx + radius, cy + radius], fill=BAR_LEVEL)


def _draw_archetype(draw, archetype, x, y, width, height, offsets=None):
    """offsets: optional (3, 3, 2) pixel jitter per cell"""
    sub_w, sub_h = width / 3.0, height / 3.0
    half = min(sub_w, sub_h) / 2.0 - 0.5
    for i in range(3):
        for j in range(3):
            cx, cy = x + (j + 0.5) * sub_w, y + (i + 0.5) * sub_h
            if offsets is not None:
                cx, cy = cx + offsets[i, j, 0], cy + offsets[i, j, 1]
            _draw_primitive(draw, int(archetype[i, j]), cx, cy, half)


def render_object(canvas, bank, class_index, view, x, y, rng, jitter=0):
    """
    Draws one object with its top-left at (x, y). Each slot draws one of its
    archetypes; with jitter > 0 every primitive moves by up to that many pixels.
    """
    height, width = VIEW_SHAPES[view]
    draw = ImageDraw.Draw(canvas)
    part_h, part_w = height / 3.0, width / 3.0
    for slot in range(SLOTS):
        row, col = divmod(slot, 3)
        choices = bank[(class_index, slot)]
        archetype = choices[int(rng.integers(len(choices)))] if len(choices) > 1 else choices[0]
        offsets = rng.integers(-jitter, jitter + 1, size=(3, 3, 2)) if jitter > 0 else None
        _draw_archetype(draw, archetype, x + col * part_w, y + row * part_h, part_w, part_h, offsets)
    return (float(x), float(y), float(x + width), float(y + height))


# --- 2. Scenes ---

def _free(box, taken):
    margin = PLACEMENT_STEP
    return all(box[2] + margin <= t[0] or t[2] + margin <= box[0] or
               box[3] + margin <= t[1] or t[3] + margin <= box[1] for t in taken)


def _finish(canvas, config, rng):
    pixels = np.asarray(canvas, dtype=np.float64)
    if config.noise > 0:
        pixels = pixels + rng.normal(0.0, config.noise * 64.0, size=pixels.shape)
    return Image.from_array(pixels)


def render_scene(config, bank, rng, objects):
    """
    Args:
        objects: list of (class index, view)

    Returns:
        (Image, [(class name, box)]); objects that find no free spot are skipped
    """
    size = config.image_size
    canvas = PILImage.new('L', (size, size), BACKGROUND_LEVEL)
    annotations, taken = [], []
    jitter = PRIMITIVE_JITTER if config.noise > 0 else 0
    for class_index, view in objects:
        height, width = VIEW_SHAPES[view]
        for _attempt in range(50):
            x = int(rng.integers(1, (size - width) // PLACEMENT_STEP)) * PLACEMENT_STEP
            y = int(rng.integers(1, (size - height) // PLACEMENT_STEP)) * PLACEMENT_STEP
            if config.noise > 0:
                x += int(rng.integers(-1, 2))
                y += int(rng.integers(-1, 2))
            box = (x, y, x + width, y + height)
            if _free(box, taken):
                break
        else:
            continue
        taken.append(box)
        drawn = render_object(canvas, bank, class_index, view, x, y, rng, jitter)
        annotations.append((config.class_name(class_index), drawn))
    return _finish(canvas, config, rng), annotations


def render_background(config, rng):
    size = config.image_size
    canvas = PILImage.new('L', (size, size), BACKGROUND_LEVEL)
    draw = ImageDraw.Draw(canvas)
    for _ in range(int(rng.integers(4, 12))):
        x0, y0, x1, y1 = (int(v) for v in rng.integers(0, size, size=4))
        draw.line([(x0, y0), (x1, y1)], fill=int(rng.integers(120, 240)), width=int(rng.integers(1, 3)))
    return _finish(canvas, config, rng)


# --- 3. Corpus ---

def _scene_objects(index, config, rng):
    first = index % config.classes
    view = (index // config.classes) % config.views
    objects = [(first, view)]
    if MAX_OBJECTS > 1 and rng.random() < 0.5:
        objects.append((int(rng.integers(config.classes)), int(rng.integers(config.views))))
    return objects


def _write(out_dir, relative, image):
    path = os.path.join(out_dir, relative)
    os.makedirs(os.path.dirname(path), exist_ok=True)
    save_image(path, image)


def generate_synthetic_corpus(out_dir, config=None):
    """
    Renders train and test splits under `out_dir` and writes `train.txt` and
    `test.txt` manifests next to them. Background-only images belong to the
    training split.

    Raises:
        IoError: output directory not writable
    """
    config = config or SynthConfig()
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as e:
        raise IoError(f"Cannot create corpus directory {out_dir}: {e}", path=out_dir)

    rng = np.random.default_rng(config.seed)
    bank = build_archetypes(config, rng)

    manifests = {}
    for split, count in (('train', config.train_images), ('test', config.test_images)):
        entries = []
        for index in range(count):
            image, annotations = render_scene(config, bank, rng, _scene_objects(index, config, rng))
            relative = f"{split}/img_{index:04d}.pgm"
            _write(out_dir, relative, image)
            entries.append(ManifestEntry(path=relative, annotations=annotations))
        if split == 'train':
            for index in range(config.background_images):
                relative = f"{split}/bg_{index:04d}.pgm"
                _write(out_dir, relative, render_background(config, rng))
                entries.append(ManifestEntry(path=relative))
        manifests[split] = DatasetManifest(entries=entries, split=split, root=os.path.abspath(out_dir))

    train_path = os.path.join(out_dir, 'train.txt')
    test_path = os.path.join(out_dir, 'test.txt')
    save_manifest(train_path, manifests['train'])
    save_manifest(test_path, manifests['test'])
    n_objects = sum(len(e.annotations) for m in manifests.values() for e in m.entries)
    logger.info(f"Synthetic corpus in {out_dir}: {config.train_images} train, {config.test_images} test, "
                f"{config.background_images} background images, {n_objects} objects")
    return SynthCorpus(train=manifests['train'], test=manifests['test'], archetypes=bank,
                       train_path=train_path, test_path=test_path)
