import numpy as np
import pytest
from scipy import sparse

from aogdet.errors import ConfigError, InvalidAssignment, NonConvergence
from aogdet.models import BACKGROUND
from aogdet.services.ssvm import (Constraint, ConstraintOracle, SolverConfig, TrainingSample, detection_count_loss,
                                  evaluate_objective, solve_convex, subgradient_reference, zero_one_loss)

from conftest import random_image


class BinaryOracle(ConstraintOracle):
    """
    Linear binary SVM without bias written as a structured problem: a positive
    either keeps its own output (feature x, loss 0) or falls back to the zero
    baseline (loss 1); a negative pays loss 1 for firing with feature x.
    """

    def __init__(self, points, labels, bounds=None):
        self.points = np.asarray(points, dtype=np.float64)
        self.labels = list(labels)
        self.bounds = bounds or {}

    @property
    def dim(self):
        return self.points.shape[1]

    @property
    def n_samples(self):
        return len(self.points)

    def lower_bounds(self):
        return dict(self.bounds)

    def positive_feature(self, k):
        return self.points[k] if self.labels[k] else np.zeros(self.dim)

    def baseline_loss(self, k):
        return 1.0 if self.labels[k] else 0.0

    def most_violated(self, w, k):
        x = self.points[k]
        loss = 0.0 if self.labels[k] else 1.0
        return [Constraint(feature=sparse.csr_matrix(x), loss=loss, value=float(w @ x) + loss, label=1)]


def make_problem(rng, n=20, center=(2.0, 1.0, 0.0), spread=1.0):
    labels = [k % 2 == 0 for k in range(n)]
    signs = np.where(labels, 1.0, -1.0)[:, None]
    points = signs * np.asarray(center) + rng.normal(0.0, spread, size=(n, len(center)))
    return points, labels


class TestSolver:
    def test_separable_data_has_no_hinge(self, rng):
        points, labels = make_problem(rng, center=(3.0, 0.0, 0.0), spread=0.3)
        oracle = BinaryOracle(points, labels)
        result = solve_convex(oracle, SolverConfig(C=1.0, convergence_epsilon=1e-6, max_cutting_planes=100))
        assert result.converged
        _, hinge, _, _ = evaluate_objective(oracle, result.weights, 1.0)
        assert hinge <= 1e-4

    def test_agrees_with_subgradient_descent(self, rng):
        points, labels = make_problem(rng)
        oracle = BinaryOracle(points, labels)
        C = 0.01
        result = solve_convex(oracle, SolverConfig(C=C, convergence_epsilon=1e-6, max_cutting_planes=100))
        reference = subgradient_reference(oracle, C, iterations=5000)
        assert result.objective == pytest.approx(reference.objective, abs=1e-3 * max(1.0, abs(result.objective)))
        assert result.objective <= reference.objective + 1e-5

    def test_tiny_c_shrinks_weights(self, rng):
        points, labels = make_problem(rng)
        result = solve_convex(BinaryOracle(points, labels), SolverConfig(C=1e-6, convergence_epsilon=1e-6))
        assert np.linalg.norm(result.weights) < 1e-4

    def test_lower_bounds_hold(self, rng):
        points, labels = make_problem(rng, center=(-1.0, 2.0, 0.0))
        oracle = BinaryOracle(points, labels, bounds={0: 0.5})
        initial = np.array([0.5, 0.0, 0.0])
        result = solve_convex(oracle, SolverConfig(C=0.1, convergence_epsilon=1e-6, max_cutting_planes=100),
                              initial=initial)
        assert result.weights[0] >= 0.5 - 1e-4
        assert result.weights[1] > 0

    def test_never_worse_than_the_start(self, rng):
        points, labels = make_problem(rng)
        oracle = BinaryOracle(points, labels)
        initial = rng.normal(size=3)
        result = solve_convex(oracle, SolverConfig(C=0.05, max_cutting_planes=3), initial=initial)
        assert result.objective <= evaluate_objective(oracle, initial, 0.05)[0] + 1e-12
        best = [entry[1] for entry in result.history]
        assert all(b <= a for a, b in zip(best, best[1:]))

    def test_subgradient_path_for_large_working_sets(self, rng):
        points, labels = make_problem(rng)
        oracle = BinaryOracle(points, labels)
        exact = solve_convex(oracle, SolverConfig(C=0.01, convergence_epsilon=1e-6, max_cutting_planes=100))
        rough = solve_convex(oracle, SolverConfig(C=0.01, qp_limit=1, max_cutting_planes=40))
        assert rough.objective >= exact.objective - 1e-5
        assert rough.objective <= evaluate_objective(oracle, np.zeros(3), 0.01)[0]

    def test_strict_mode_raises(self, rng):
        points, labels = make_problem(rng)
        with pytest.raises(NonConvergence):
            solve_convex(BinaryOracle(points, labels), SolverConfig(max_cutting_planes=1, strict=True))

    def test_initial_weights_must_fit(self, rng):
        points, labels = make_problem(rng)
        with pytest.raises(ConfigError):
            solve_convex(BinaryOracle(points, labels), initial=np.zeros(5))

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            SolverConfig(C=0.0)
        with pytest.raises(ConfigError):
            SolverConfig(max_cutting_planes=0)


class TestLosses:
    def test_zero_one(self):
        assert zero_one_loss('a', 'a') == 0.0
        assert zero_one_loss('a', BACKGROUND) == 1.0

    def test_detection_count(self):
        truth = [('a', (0, 0, 10, 10)), ('b', (20, 20, 30, 30))]
        assert detection_count_loss(truth, []) == 2.0
        assert detection_count_loss(truth, [('a', (0, 0, 10, 10))]) == 1.0
        assert detection_count_loss(truth, [('a', (0, 0, 10, 10)), ('a', (0, 0, 10, 10))]) == 1.0
        assert detection_count_loss(truth, [('a', (0, 0, 10, 10)), ('b', (20, 20, 30, 30))]) == 0.0


class TestTrainingSample:
    def test_positive_needs_box(self, rng):
        with pytest.raises(InvalidAssignment):
            TrainingSample('x', label='a', image_path='x.pgm')

    def test_background_has_no_box(self):
        with pytest.raises(InvalidAssignment):
            TrainingSample('x', box=(0, 0, 1, 1), image_path='x.pgm')

    def test_needs_pixels(self):
        with pytest.raises(InvalidAssignment):
            TrainingSample('x')

    def test_pyramid_is_cached(self, rng, small_hog):
        sample = TrainingSample('x', image=random_image(rng))
        assert sample.target == BACKGROUND and not sample.is_positive
        assert sample.pyramid(small_hog) is sample.pyramid(small_hog)
