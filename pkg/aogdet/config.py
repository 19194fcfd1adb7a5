# config.py

import os
import logging
from dotenv import load_dotenv

from .errors import ConfigError

# Get the base directory of the package
basedir = os.path.abspath(os.path.dirname(__file__))

# Picks up a .env file in the repository root (optional).
load_dotenv(os.path.join(basedir, '..', '.env'))
# --------------------------------------


def _env(name, default, cast):
    """Reads AOG_<name> from the environment, falling back to `default`."""
    raw = os.environ.get(f'AOG_{name}')
    if raw is None or raw == '':
        return default
    return _coerce(raw, cast, name)


def _coerce(raw, cast, name):
    try:
        if cast is bool:
            return str(raw).strip().lower() in ['true', '1', 'yes', 'on']
        if cast is tuple:
            return tuple(part.strip() for part in str(raw).split(',') if part.strip())
        return cast(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"Config value for '{name}' is not a valid {cast.__name__}: {raw!r}")


class Config:
    """
    All tunables of the detector: HOG extraction, detection, clustering,
    solver, structure learning, model combination and the synthetic corpus.

    Class attributes hold the defaults (overridable through AOG_* environment
    variables); `Config.from_file` returns an instance with values overridden
    by a flat `key = value` file.
    """
    # --- HOG Settings ---
    CELL_SIZE = _env('CELL_SIZE', 8, int)
    ORIENTATION_BINS = _env('ORIENTATION_BINS', 9, int)
    LEVELS_PER_OCTAVE = _env('LEVELS_PER_OCTAVE', 5, int)
    MIN_LEVEL_CELLS = _env('MIN_LEVEL_CELLS', 5, int)
    BLOCK_NORM_EPSILON = _env('BLOCK_NORM_EPSILON', 1e-4, float)

    # --- Detection Settings ---
    # Part search radius in cells around each anchor (brute-force window scan).
    SEARCH_RADIUS = _env('SEARCH_RADIUS', 4, int)
    DETECT_THRESHOLD = _env('DETECT_THRESHOLD', -1.0, float)
    NMS_IOU = _env('NMS_IOU', 0.5, float)
    MAX_ROOT_CELLS = _env('MAX_ROOT_CELLS', 8, int)

    # --- ISODATA Settings ---
    MIN_CLUSTER_SIZE = _env('MIN_CLUSTER_SIZE', 5, int)
    ISODATA_MAX_ITERATIONS = _env('ISODATA_MAX_ITERATIONS', 50, int)
    # Scale-adaptive thresholds: fractions of the median pairwise distance.
    SPLIT_FACTOR = _env('SPLIT_FACTOR', 0.6, float)
    MERGE_FACTOR = _env('MERGE_FACTOR', 0.4, float)
    SIZE_RATIO = _env('SIZE_RATIO', 1.25, float)

    # --- Structural SVM Settings ---
    # 0.005 suits corpora of thousands of samples; desk-scale corpora need a
    # larger penalty.
    SVM_C = _env('SVM_C', 1.0, float)
    SVM_EPSILON = _env('SVM_EPSILON', 1e-3, float)
    MAX_CUTTING_PLANES = _env('MAX_CUTTING_PLANES', 30, int)
    CACHE_SIZE = _env('CACHE_SIZE', 50, int)
    POSITIVE_OVERLAP = _env('POSITIVE_OVERLAP', 0.7, float)

    # --- DSO Settings ---
    DSO_MAX_ITERATIONS = _env('DSO_MAX_ITERATIONS', 30, int)
    DSO_EPSILON = _env('DSO_EPSILON', 1e-4, float)
    ENABLE_SHARING = _env('ENABLE_SHARING', True, bool)
    ENABLE_RECONFIGURATION = _env('ENABLE_RECONFIGURATION', True, bool)
    VIEWS_PER_CLASS = _env('VIEWS_PER_CLASS', 2, int)
    SEED_ITERATIONS = _env('SEED_ITERATIONS', 2, int)
    SEED = _env('SEED', 0, int)

    # --- Combination Settings ---
    COMBINE_C = _env('COMBINE_C', 1.0, float)
    COMBINE_MAX_CUTTING_PLANES = _env('COMBINE_MAX_CUTTING_PLANES', 20, int)

    # --- Synthetic Corpus Settings ---
    SYNTH_CLASSES = _env('SYNTH_CLASSES', 4, int)
    SYNTH_VIEWS = _env('SYNTH_VIEWS', 2, int)
    SYNTH_ARCHETYPES = _env('SYNTH_ARCHETYPES', 2, int)
    # Format: "classA:classB:slot,..." (0-based class and slot indices)
    SYNTH_SHARING = _env('SYNTH_SHARING', ('0:1:7',), tuple)
    SYNTH_IMAGE_SIZE = _env('SYNTH_IMAGE_SIZE', 160, int)
    SYNTH_NOISE = _env('SYNTH_NOISE', 0.1, float)
    SYNTH_TRAIN_IMAGES = _env('SYNTH_TRAIN_IMAGES', 80, int)
    SYNTH_TEST_IMAGES = _env('SYNTH_TEST_IMAGES', 40, int)
    SYNTH_BACKGROUND_IMAGES = _env('SYNTH_BACKGROUND_IMAGES', 16, int)

    # --- Logging ---
    LOG_LEVEL = _env('LOG_LEVEL', 'INFO', str)

    @classmethod
    def keys(cls):
        return [name for name in vars(Config) if name.isupper()]

    @classmethod
    def from_file(cls, path):
        """
        Builds a Config whose attributes are overridden by a flat text file.

        Format: one `key = value` per line, '#' starts a comment, keys are the
        lower-case attribute names (e.g. `cell_size = 8`).

        Raises:
            ConfigError: unreadable file, malformed line or unknown key
        """
        config = cls()
        try:
            with open(path, 'r', encoding='utf-8') as handle:
                lines = handle.readlines()
        except OSError as e:
            raise ConfigError(f"Cannot read config file {path}: {e}")

        known = {name.lower(): name for name in cls.keys()}
        for number, line in enumerate(lines, start=1):
            line = line.split('#', 1)[0].strip()
            if not line:
                continue
            if '=' not in line:
                raise ConfigError(f"{path}:{number}: expected 'key = value', got {line!r}")
            key, value = (part.strip() for part in line.split('=', 1))
            attr = known.get(key.lower())
            if attr is None:
                raise ConfigError(f"{path}:{number}: unknown config key '{key}'")
            default = getattr(Config, attr)
            setattr(config, attr, _coerce(value, type(default), key))
        return config

    def override(self, **values):
        """Returns self with the given (lower- or upper-case) keys replaced; None values are skipped."""
        known = {name.lower(): name for name in self.keys()}
        for key, value in values.items():
            if value is None:
                continue
            attr = known.get(key.lower())
            if attr is None:
                raise ConfigError(f"unknown config key '{key}'")
            setattr(self, attr, value)
        return self

    # --- Typed views consumed by the services ---

    def hog(self):
        from .services.imaging import HogConfig
        return HogConfig(cell_size=self.CELL_SIZE,
                         orientation_bins=self.ORIENTATION_BINS,
                         levels_per_octave=self.LEVELS_PER_OCTAVE,
                         min_level_cells=self.MIN_LEVEL_CELLS,
                         block_norm_epsilon=self.BLOCK_NORM_EPSILON)

    def detection(self):
        from .services.inference import DetectionConfig
        return DetectionConfig(hog=self.hog(),
                               search_radius=self.SEARCH_RADIUS,
                               threshold=self.DETECT_THRESHOLD,
                               nms_iou=self.NMS_IOU)

    def solver(self):
        from .services.ssvm import SolverConfig
        return SolverConfig(C=self.SVM_C,
                            convergence_epsilon=self.SVM_EPSILON,
                            max_cutting_planes=self.MAX_CUTTING_PLANES,
                            cache_size=self.CACHE_SIZE)

    def dso(self):
        from .services.dso import DsoConfig
        return DsoConfig(detection=self.detection(),
                         solver=self.solver(),
                         min_cluster_size=self.MIN_CLUSTER_SIZE,
                         isodata_max_iterations=self.ISODATA_MAX_ITERATIONS,
                         split_factor=self.SPLIT_FACTOR,
                         merge_factor=self.MERGE_FACTOR,
                         size_ratio=self.SIZE_RATIO,
                         positive_overlap=self.POSITIVE_OVERLAP,
                         max_iterations=self.DSO_MAX_ITERATIONS,
                         epsilon=self.DSO_EPSILON,
                         enable_sharing=self.ENABLE_SHARING,
                         enable_reconfiguration=self.ENABLE_RECONFIGURATION,
                         views_per_class=self.VIEWS_PER_CLASS,
                         max_root_cells=self.MAX_ROOT_CELLS,
                         seed=self.SEED)

    def combine(self):
        from .services.combine import CombineConfig
        from .services.ssvm import SolverConfig
        return CombineConfig(detection=self.detection(),
                             solver=SolverConfig(C=self.COMBINE_C,
                                                 convergence_epsilon=self.SVM_EPSILON,
                                                 max_cutting_planes=self.COMBINE_MAX_CUTTING_PLANES,
                                                 cache_size=self.CACHE_SIZE),
                             positive_overlap=self.POSITIVE_OVERLAP)

    def synth(self, seed=None):
        from .services.synthetic import SynthConfig, parse_sharing_pairs
        return SynthConfig(classes=self.SYNTH_CLASSES,
                           views=self.SYNTH_VIEWS,
                           archetypes_per_slot=self.SYNTH_ARCHETYPES,
                           sharing_pairs=parse_sharing_pairs(self.SYNTH_SHARING),
                           image_size=self.SYNTH_IMAGE_SIZE,
                           noise=self.SYNTH_NOISE,
                           train_images=self.SYNTH_TRAIN_IMAGES,
                           test_images=self.SYNTH_TEST_IMAGES,
                           background_images=self.SYNTH_BACKGROUND_IMAGES,
                           seed=self.SEED if seed is None else seed)

    def validate_critical_config(self):
        """
        FAIL-FAST validation of every value the services rely on.

        Raises:
            ConfigError: listing every invalid setting at once
        """
        problems = []
        if self.CELL_SIZE < 2:
            problems.append(f"CELL_SIZE must be >= 2 (got {self.CELL_SIZE})")
        if self.ORIENTATION_BINS < 2:
            problems.append(f"ORIENTATION_BINS must be >= 2 (got {self.ORIENTATION_BINS})")
        if self.LEVELS_PER_OCTAVE < 1:
            problems.append(f"LEVELS_PER_OCTAVE must be >= 1 (got {self.LEVELS_PER_OCTAVE})")
        if self.MIN_LEVEL_CELLS < 1:
            problems.append(f"MIN_LEVEL_CELLS must be >= 1 (got {self.MIN_LEVEL_CELLS})")
        if self.BLOCK_NORM_EPSILON <= 0:
            problems.append("BLOCK_NORM_EPSILON must be positive")
        if self.SEARCH_RADIUS < 0:
            problems.append("SEARCH_RADIUS must be >= 0")
        if not 0.0 < self.NMS_IOU <= 1.0:
            problems.append("NMS_IOU must lie in (0, 1]")
        if self.SVM_C <= 0 or self.COMBINE_C <= 0:
            problems.append("SVM_C and COMBINE_C must be positive")
        if self.MIN_CLUSTER_SIZE < 1:
            problems.append("MIN_CLUSTER_SIZE must be >= 1")
        if self.SIZE_RATIO < 1.0:
            problems.append("SIZE_RATIO must be >= 1")
        if self.VIEWS_PER_CLASS < 1:
            problems.append("VIEWS_PER_CLASS must be >= 1")

        if problems:
            error_msg = (
                f"\n{'='*70}\n"
                f"CONFIGURATION ERROR\n"
                f"{'='*70}\n"
            )
            for problem in problems:
                error_msg += f"  - {problem}\n"
            error_msg += f"{'='*70}\n"
            raise ConfigError(error_msg)

        if self.SEARCH_RADIUS > 8:
            logging.getLogger(__name__).warning(
                f"SEARCH_RADIUS={self.SEARCH_RADIUS} makes the part scan quadratic in a large window; "
                f"detection will be slow."
            )
        logging.getLogger(__name__).debug("Configuration validation passed")
