# aogdet/services/ssvm.py
# Latent structural SVM: losses, loss-augmented inference over training
# samples and the n-slack cutting-plane solver for
#
#   min_w  1/2 |w|^2 + C * sum_k [ max_{y,H} (w . phi(X_k, y, H) + L(y_k, y)) - w . phi^d_k ]
#
# where phi^d_k is the fixed (latent-completed) feature of sample k.

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy import sparse
from scipy.optimize import minimize

from aogdet.errors import ConfigError, InvalidAssignment, NonConvergence, OutOfBounds
from aogdet.models import BACKGROUND, unflatten_parameters
from aogdet.services.evaluation import iou_many, match_and_count
from aogdet.services.features import joint_feature
from aogdet.services.imaging import Image, Placement, build_hog_pyramid, load_image
from aogdet.services.inference import (DetectionConfig, ResponseMaps, best_window, constrained_placements,
                                       score_subgraph, window_scores)

logger = logging.getLogger(__name__)

# Floor on the quadratic deformation weights (keeps part displacement penalized).
DEFORMATION_FLOOR = 1e-3
NEGATIVES_PER_NODE = 3
_VIOLATION_TOL = 1e-9


# --- 1. Types ---

@dataclass
class TrainingSample:
    """
    One training example: an annotated object (label + box) or a background
    image (label None, no box). The HOG pyramid is built on first use and kept.
    """
    image_id: str
    label: Optional[str] = None
    box: Optional[Tuple[float, float, float, float]] = None
    image_path: Optional[str] = None
    image: Optional[Image] = None
    _pyramid: object = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.label is not None and self.box is None:
            raise InvalidAssignment(f"Positive sample {self.image_id} has no bounding box")
        if self.label is None and self.box is not None:
            raise InvalidAssignment(f"Background sample {self.image_id} carries a bounding box")
        if self.image is None and self.image_path is None:
            raise InvalidAssignment(f"Sample {self.image_id} has neither an image nor a path")

    @property
    def is_positive(self):
        return self.label is not None

    @property
    def target(self):
        return self.label if self.label is not None else BACKGROUND

    def pyramid(self, hog_config):
        if self._pyramid is None or self._pyramid.config != hog_config:
            image = self.image if self.image is not None else load_image(self.image_path)
            self._pyramid = build_hog_pyramid(image, hog_config)
        return self._pyramid


@dataclass(frozen=True)
class SolverConfig:
    C: float = 0.005
    convergence_epsilon: float = 1e-3
    max_cutting_planes: int = 30
    # constraints kept per sample in the working set
    cache_size: int = 50
    # above this many constraints the working set is solved by subgradient steps
    qp_limit: int = 500
    strict: bool = False

    def __post_init__(self):
        if not self.C > 0:
            raise ConfigError(f"C must be positive (got {self.C})")
        if self.convergence_epsilon <= 0:
            raise ConfigError("convergence_epsilon must be positive")
        if self.max_cutting_planes < 1 or self.cache_size < 1:
            raise ConfigError("max_cutting_planes and cache_size must be >= 1")


@dataclass
class Constraint:
    """A candidate output (y, H) of one sample: its feature, loss and w . phi + loss when found."""
    feature: sparse.csr_matrix
    loss: float
    value: float = 0.0
    label: object = None
    latent: object = None


@dataclass
class SolverResult:
    weights: np.ndarray
    objective: float
    converged: bool
    rounds: int
    # per round: (round, best objective, its hinge term, its regularizer)
    history: List[tuple] = field(default_factory=list)


@dataclass
class LossAugmentedResult:
    label: object
    latent: object
    value: float


# --- 2. Losses ---

def zero_one_loss(y_true, y_pred):
    return 0.0 if y_true == y_pred else 1.0


def detection_count_loss(truth, predicted, iou_threshold=0.5):
    """
    Number of groundtruth objects not found: K - tp.

    Args:
        truth: [(class_name, box)]
        predicted: [(class_name, box)] in descending score order
    """
    return float(len(truth) - match_and_count(predicted, truth, iou_threshold).tp)


# --- 3. Oracles ---

class ConstraintOracle(ABC):
    """
    Supplies the solver with the per-sample data of the training problem:
    fixed positive features, the loss of the always-available baseline output
    (zero feature) and the most violated outputs under a weight vector.
    """

    @property
    @abstractmethod
    def dim(self) -> int:
        ...

    @property
    @abstractmethod
    def n_samples(self) -> int:
        ...

    def lower_bounds(self) -> Dict[int, float]:
        return {}

    @abstractmethod
    def positive_feature(self, k) -> np.ndarray:
        ...

    @abstractmethod
    def baseline_loss(self, k) -> float:
        ...

    @abstractmethod
    def most_violated(self, w, k) -> List[Constraint]:
        """Candidate outputs of sample k, highest w . phi + loss first."""


def _negative_windows(graph, r, pyramid, maps, limit):
    """Top windows of and-node r over a whole image, suppressing overlapping ones."""
    node = graph.and_node(r)
    entries = []
    for level in range(len(pyramid.levels)):
        scores = window_scores(graph, r, pyramid, maps, level)
        for (row, col), value in np.ndenumerate(scores):
            if np.isfinite(value):
                entries.append((-float(value), level, row, col))
    entries.sort()
    kept, boxes = [], []
    for _, level, row, col in entries[:10 * limit]:
        p = Placement(level, int(row), int(col))
        box = pyramid.window_box(p, node.root_shape, half=True)
        if boxes and np.any(iou_many(box, boxes) >= 0.5):
            continue
        try:
            kept.append(score_subgraph(graph, r, p, pyramid, maps))
        except OutOfBounds as e:
            logger.debug(f"Skipping negative window {p}: {e}")
            continue
        boxes.append(box)
        if len(kept) == limit:
            break
    return kept


def candidate_windows(graph, sample, config, maps=None, positive_overlap=0.7,
                      negatives_per_node=NEGATIVES_PER_NODE):
    """
    Best windows of every and-node on one sample: for an annotated object the
    best placement among those overlapping the box at IoU >= positive_overlap,
    for a background image its top scoring windows (hard negatives).
    """
    pyramid = sample.pyramid(config.hog)
    maps = maps or ResponseMaps(graph, pyramid, config.search_radius)
    windows = []
    for node in graph.and_nodes:
        if sample.is_positive:
            placements = constrained_placements(pyramid, node.root_shape, sample.box, positive_overlap)
            window = best_window(graph, node.id, pyramid, maps, placements)
            if window is not None:
                windows.append(window)
        else:
            windows.extend(_negative_windows(graph, node.id, pyramid, maps, negatives_per_node))
    return windows


def best_true_latent(graph, sample, config, maps=None, positive_overlap=0.7):
    """
    Highest scoring window of the sample's own class over all of its views,
    restricted to placements overlapping the annotation (ties: lowest and-node).

    Returns:
        ScoredWindow or None when no view fits the image
    """
    pyramid = sample.pyramid(config.hog)
    maps = maps or ResponseMaps(graph, pyramid, config.search_radius)
    best = None
    for r in graph.views_of(sample.label):
        placements = constrained_placements(pyramid, graph.and_node(r).root_shape, sample.box, positive_overlap)
        window = best_window(graph, r, pyramid, maps, placements)
        if window is not None and (best is None or window.score > best.score):
            best = window
    return best


def loss_augmented_inference(graph, sample, config, omega=None, positive_overlap=0.7):
    """
    argmax over (y, H) of w . phi(X, y, H) + L(y_k, y), the background option
    (score 0) included. Ties go to background, then to the lowest and-node.
    """
    if omega is not None:
        unflatten_parameters(graph, omega)
    best = LossAugmentedResult(label=BACKGROUND, latent=None,
                               value=zero_one_loss(sample.target, BACKGROUND))
    for window in candidate_windows(graph, sample, config, positive_overlap=positive_overlap):
        value = window.score + zero_one_loss(sample.target, window.class_name)
        if value > best.value:
            best = LossAugmentedResult(label=window.and_node, latent=window.latent, value=value)
    return best


class DetectionOracle(ConstraintOracle):
    """
    Oracle over detection training samples for one fixed graph structure.

    Args:
        graph: structure whose weights are overwritten by every query
        samples: list of TrainingSample
        positive_features: per sample phi^d_k (None or zeros for backgrounds)
    """

    def __init__(self, graph, samples, config=None, positive_features=None, positive_overlap=0.7,
                 negatives_per_node=NEGATIVES_PER_NODE):
        # private copy: queries overwrite its weights
        self.graph = graph.copy()
        self.samples = list(samples)
        self.config = config or DetectionConfig()
        self.positive_overlap = positive_overlap
        self.negatives_per_node = negatives_per_node
        size = graph.layout().size
        features = positive_features if positive_features is not None else [None] * len(self.samples)
        self._positive = [np.zeros(size) if phi is None else np.asarray(phi, dtype=np.float64)
                          for phi in features]
        self._loaded = None

    @property
    def dim(self):
        return self.graph.layout().size

    @property
    def n_samples(self):
        return len(self.samples)

    def lower_bounds(self):
        return {int(i): DEFORMATION_FLOOR for i in self.graph.quadratic_indices()}

    def positive_feature(self, k):
        return self._positive[k]

    def baseline_loss(self, k):
        return zero_one_loss(self.samples[k].target, BACKGROUND)

    def _load(self, w):
        if self._loaded is None or not np.array_equal(self._loaded, w):
            unflatten_parameters(self.graph, w)
            self._loaded = np.array(w, copy=True)

    def most_violated(self, w, k):
        self._load(w)
        sample = self.samples[k]
        pyramid = sample.pyramid(self.config.hog)
        maps = ResponseMaps(self.graph, pyramid, self.config.search_radius)
        constraints = []
        for window in candidate_windows(self.graph, sample, self.config, maps, self.positive_overlap,
                                        self.negatives_per_node):
            phi = joint_feature(self.graph, pyramid, window.and_node, window.latent)
            loss = zero_one_loss(sample.target, window.class_name)
            constraints.append(Constraint(feature=sparse.csr_matrix(phi), loss=loss,
                                          value=float(w @ phi) + loss,
                                          label=window.and_node, latent=window.latent))
        constraints.sort(key=lambda c: (-c.value, c.label))
        return constraints


# --- 4. Objective ---

def evaluate_objective(oracle, w, C):
    """
    True training objective at w.

    Returns:
        (objective, hinge, regularizer, per-sample candidate lists)
    """
    hinge = 0.0
    candidates = []
    for k in range(oracle.n_samples):
        found = oracle.most_violated(w, k)
        candidates.append(found)
        top = oracle.baseline_loss(k)
        if found:
            top = max(top, found[0].value)
        hinge += top - float(w @ oracle.positive_feature(k))
    regularizer = 0.5 * float(w @ w)
    return regularizer + C * hinge, C * hinge, regularizer, candidates


# --- 5. Working-set solvers ---

class _WorkingSet:
    """Per-sample constraint rows d = phi^d_k - phi_c with losses, duals and ages."""

    def __init__(self, oracle, cache_size):
        self.oracle = oracle
        self.cache_size = cache_size
        self.rows: List[List[sparse.csr_matrix]] = []
        self.losses: List[List[float]] = []
        self.alphas: List[List[float]] = []
        self.tags: List[List[tuple]] = []
        self.order: List[List[int]] = []
        self._clock = 0
        for k in range(oracle.n_samples):
            self.rows.append([sparse.csr_matrix(oracle.positive_feature(k))])
            self.losses.append([oracle.baseline_loss(k)])
            self.alphas.append([0.0])
            self.tags.append([('baseline',)])
            self.order.append([0])

    @property
    def size(self):
        return sum(len(rows) for rows in self.rows)

    def current_max(self, w, k):
        return max(loss - float(row @ w) for row, loss in zip(self.rows[k], self.losses[k]))

    def add(self, k, constraint):
        feature = constraint.feature
        tag = (constraint.loss, feature.indices.tobytes(), feature.data.tobytes())
        if tag in self.tags[k]:
            return False
        positive = sparse.csr_matrix(self.oracle.positive_feature(k))
        self._clock += 1
        self.rows[k].append((positive - feature).tocsr())
        self.losses[k].append(constraint.loss)
        self.alphas[k].append(0.0)
        self.tags[k].append(tag)
        self.order[k].append(self._clock)
        if len(self.rows[k]) > self.cache_size + 1:
            self._evict(k)
        return True

    def _evict(self, k):
        # position 0 is the baseline output and is never evicted
        candidates = sorted(range(1, len(self.rows[k])), key=lambda i: self.order[k][i])
        idle = [i for i in candidates if self.alphas[k][i] <= 1e-12]
        victim = idle[0] if idle else candidates[0]
        for store in (self.rows[k], self.losses[k], self.alphas[k], self.tags[k], self.order[k]):
            del store[victim]

    def primal(self, w, C):
        hinge = sum(self.current_max(w, k) for k in range(len(self.rows)))
        return 0.5 * float(w @ w) + C * hinge


def _bound_rows(bounds, dim):
    index = np.array(sorted(bounds), dtype=np.int64)
    values = np.array([bounds[i] for i in index], dtype=np.float64)
    rows = sparse.csr_matrix((np.ones(index.size), (np.arange(index.size), index)), shape=(index.size, dim))
    return rows, values, index


def _solve_dual(working, bounds, dim, C, mu0=None):
    """
    Exact working-set solve through the dual

        max  sum alpha_c b_c + sum mu_i lb_i - 1/2 |sum alpha_c d_c + sum mu_i e_i|^2
        s.t. sum_{c in W_k} alpha_c = C,  alpha >= 0,  mu >= 0

    Returns:
        (w, lower bound on the working-set optimum, mu)
    """
    bound_rows, bound_values, _ = _bound_rows(bounds, dim)
    rows = [row for sample_rows in working.rows for row in sample_rows]
    R = sparse.vstack(rows + ([bound_rows] if bound_values.size else []), format='csr')
    Q = (R @ R.T).toarray()
    c = np.concatenate([np.concatenate([np.asarray(l, dtype=np.float64) for l in working.losses]),
                        bound_values])
    n_alpha = len(c) - bound_values.size

    A = np.zeros((len(working.rows), len(c)))
    x0 = np.zeros(len(c))
    offset = 0
    for k, alphas in enumerate(working.alphas):
        A[k, offset:offset + len(alphas)] = 1.0
        start = np.asarray(alphas, dtype=np.float64)
        if start.sum() <= 0:
            start = np.zeros(len(alphas))
            start[0] = C
        else:
            start = start * (C / start.sum())
        x0[offset:offset + len(alphas)] = start
        offset += len(alphas)
    if mu0 is not None and mu0.size == bound_values.size:
        x0[n_alpha:] = mu0

    result = minimize(lambda x: 0.5 * x @ Q @ x - c @ x, x0,
                      jac=lambda x: Q @ x - c,
                      method='SLSQP',
                      bounds=[(0.0, None)] * len(c),
                      constraints=[{'type': 'eq', 'fun': lambda x: A @ x - C, 'jac': lambda x: A}],
                      options={'maxiter': 1000, 'ftol': 1e-12})
    x = np.clip(result.x, 0.0, None)
    if not result.success:
        logger.debug(f"Working-set QP: {result.message}")

    offset = 0
    for k, alphas in enumerate(working.alphas):
        working.alphas[k] = list(x[offset:offset + len(alphas)])
        offset += len(alphas)
    w = np.asarray(R.T @ x).ravel()
    lower = -(0.5 * x @ Q @ x - c @ x)
    return w, float(lower), x[n_alpha:]


def _project(w, bounds):
    if bounds:
        index = np.fromiter(bounds.keys(), dtype=np.int64)
        w[index] = np.maximum(w[index], np.fromiter(bounds.values(), dtype=np.float64))
    return w


def _solve_subgradient(working, bounds, w0, C, iterations=500):
    """Projected subgradient steps on the working-set primal; returns the best iterate."""
    w = _project(np.array(w0, copy=True), bounds)
    best_w, best = w.copy(), working.primal(w, C)
    for t in range(1, iterations + 1):
        g = w.copy()
        for k, (rows, losses) in enumerate(zip(working.rows, working.losses)):
            values = [loss - float(row @ w) for row, loss in zip(rows, losses)]
            g -= C * np.asarray(rows[int(np.argmax(values))].todense()).ravel()
        w = _project(w - g / t, bounds)
        value = working.primal(w, C)
        if value < best:
            best, best_w = value, w.copy()
    return best_w


# --- 6. Cutting-plane training ---

def solve_convex(oracle, config=None, initial=None):
    """
    n-slack cutting-plane training.

    Each round evaluates the true objective at the current weights, adds the
    violated outputs of every sample to its working set and re-solves the
    working-set problem (dual QP, or subgradient steps for large sets). The
    best weights seen are returned, so the result never scores worse than
    `initial`.

    Converged when a round finds no violated output or the best objective is
    within a relative `convergence_epsilon` of the working-set lower bound.

    Raises:
        NonConvergence: round cap reached with config.strict set
    """
    config = config or SolverConfig()
    dim = oracle.dim
    bounds = oracle.lower_bounds()
    w = np.zeros(dim) if initial is None else np.asarray(initial, dtype=np.float64).copy()
    if w.shape != (dim,):
        raise ConfigError(f"Initial weights have length {w.size}, problem has {dim}")

    working = _WorkingSet(oracle, config.cache_size)
    best_w, best = w.copy(), None
    history = []
    lower, mu = None, None
    converged = False
    rounds = 0

    for rounds in range(1, config.max_cutting_planes + 1):
        objective, hinge, regularizer, candidates = evaluate_objective(oracle, w, config.C)
        if best is None or objective < best[0]:
            best, best_w = (objective, hinge, regularizer), w.copy()
        history.append((rounds,) + best)
        logger.info(f"{rounds} {best[0]:.6f} {best[1]:.6f} {best[2]:.6f}")

        if lower is not None and best[0] - lower <= config.convergence_epsilon * max(1.0, abs(best[0])):
            converged = True
            break

        added = 0
        for k, found in enumerate(candidates):
            threshold = working.current_max(w, k) + float(w @ oracle.positive_feature(k))
            for constraint in found:
                if constraint.value <= threshold + _VIOLATION_TOL:
                    break
                added += working.add(k, constraint)
        if not added:
            converged = True
            break

        if working.size + len(bounds) <= config.qp_limit:
            w, lower, mu = _solve_dual(working, bounds, dim, config.C, mu)
        else:
            logger.debug(f"{working.size} constraints exceed the QP limit; subgradient step")
            w, lower = _solve_subgradient(working, bounds, w, config.C), None

    result = SolverResult(weights=best_w, objective=best[0], converged=converged, rounds=rounds,
                          history=history)
    if not converged:
        if config.strict:
            raise NonConvergence(f"Cutting-plane solver did not converge in {rounds} rounds",
                                 result=result)
        logger.warning(f"Cutting-plane solver stopped after {rounds} rounds without converging "
                       f"(best objective {best[0]:.6f})")
    return result


def subgradient_reference(oracle, C, iterations=2000, initial=None):
    """
    Projected subgradient descent on the true objective with step 1/t; an
    independent check of solve_convex.

    Returns:
        SolverResult with the best iterate
    """
    dim = oracle.dim
    bounds = oracle.lower_bounds()
    w = np.zeros(dim) if initial is None else np.asarray(initial, dtype=np.float64).copy()
    best_w, best = w.copy(), None
    history = []
    for t in range(1, iterations + 1):
        objective, hinge, regularizer, candidates = evaluate_objective(oracle, w, C)
        if best is None or objective < best[0]:
            best, best_w = (objective, hinge, regularizer), w.copy()
        history.append((t,) + best)
        g = w.copy()
        for k, found in enumerate(candidates):
            g -= C * oracle.positive_feature(k)
            if found and found[0].value > oracle.baseline_loss(k):
                g += C * np.asarray(found[0].feature.todense()).ravel()
        w = _project(w - g / t, bounds)
    return SolverResult(weights=best_w, objective=best[0], converged=True, rounds=iterations, history=history)
