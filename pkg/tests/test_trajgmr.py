"""Tests for Gaussian mixture regression and reach reconstruction."""

import numpy as np
import pytest
from scipy.stats import norm

from gazereach.config import EmConfig
from gazereach.errors import IncompatibleModelError, InputError, ParameterError, UnsupportedConditioningError
from gazereach.minjerk import reach_positions
from gazereach.scene import ALL_LABELS
from gazereach.trajgmm import GmmModel, TrainingMatrix, fit, fit_action_models
from gazereach.trajgmr import GmrQuery, predict, reconstruct_action, regress


def _random_model(rng, k=3, d=3):
    covs = []
    for _ in range(k):
        a = rng.normal(size=(d, d))
        covs.append(a @ a.T + 0.05 * np.eye(d))
    priors = rng.dirichlet(np.ones(k))
    return GmmModel(priors, rng.normal(size=(k, d)), np.array(covs), (0,), tuple(range(1, d)))


def _direct(model, t):
    """Loop-per-point mixture regression straight from the definitions."""
    out = list(model.output_dims)
    weights = np.array(
        [p * norm.pdf(t, m[0], np.sqrt(c[0, 0])) for p, m, c in zip(model.priors, model.means, model.covariances)]
    )
    weights /= weights.sum()
    means, covs = [], []
    for m, c in zip(model.means, model.covariances):
        gain = c[out, 0] / c[0, 0]
        means.append(m[out] + gain * (t - m[0]))
        covs.append(c[np.ix_(out, out)] - np.outer(gain, c[0, out]))
    mean = sum(w * mu for w, mu in zip(weights, means))
    cov = sum(w * (s + np.outer(mu - mean, mu - mean)) for w, mu, s in zip(weights, means, covs))
    return mean, cov


# --- regress ---


class TestRegress:
    """Test conditioning a joint mixture on time."""

    def test_single_component_is_linear_regression(self):
        """K=1 gives the Gaussian conditional."""
        model = GmmModel([1.0], [[0.5, 2.0]], [[[0.04, 0.02], [0.02, 0.05]]])
        result = regress(model, [0.0, 0.5, 1.0])
        assert np.allclose(result.mean[:, 0], 2.0 + 0.5 * (np.array([0.0, 0.5, 1.0]) - 0.5))
        assert np.allclose(result.covariance[:, 0, 0], 0.05 - 0.02**2 / 0.04)
        assert np.allclose(result.responsibilities, 1.0)

    def test_symmetric_components(self):
        """Mirror-image components split evenly at the midpoint."""
        cov = np.diag([0.01, 0.02])
        model = GmmModel([0.5, 0.5], [[0.25, -1.0], [0.75, 1.0]], np.array([cov, cov]))
        result = regress(model, [0.5])
        assert np.allclose(result.responsibilities[0], [0.5, 0.5])
        assert result.mean[0, 0] == pytest.approx(0.0, abs=1e-12)
        assert result.covariance[0, 0, 0] == pytest.approx(0.02 + 1.0)

    def test_matches_direct_computation(self):
        """Vectorized regression agrees with a per-point loop."""
        rng = np.random.default_rng(0)
        for _ in range(5):
            model = _random_model(rng)
            times = np.sort(rng.uniform(-2.0, 2.0, size=15))
            result = regress(model, times)
            for i, t in enumerate(times):
                mean, cov = _direct(model, t)
                assert np.allclose(result.mean[i], mean, atol=1e-10, rtol=0)
                assert np.allclose(result.covariance[i], cov, atol=1e-10, rtol=0)

    def test_covariance_positive_semidefinite(self):
        """Every output covariance is symmetric PSD."""
        rng = np.random.default_rng(1)
        model = _random_model(rng, k=4, d=4)
        result = regress(model, np.linspace(-3.0, 3.0, 61))
        for cov in result.covariance:
            assert np.array_equal(cov, cov.T)
            assert np.linalg.eigvalsh(cov).min() >= -1e-12

    def test_grid_refinement_is_pointwise(self):
        """Halving the grid returns the same values at the shared points."""
        model = _random_model(np.random.default_rng(2))
        fine = regress(model, np.linspace(0.0, 1.0, 21))
        coarse = regress(model, np.linspace(0.0, 1.0, 11))
        assert np.allclose(fine.mean[::2], coarse.mean, atol=1e-12)
        assert np.allclose(fine.covariance[::2], coarse.covariance, atol=1e-12)

    def test_affine_outputs(self):
        """Scaling and shifting the outputs maps mean and covariance accordingly."""
        model = _random_model(np.random.default_rng(3), d=2)
        a, b = 3.0, -0.7
        means = model.means.copy()
        means[:, 1] = a * means[:, 1] + b
        scale = np.diag([1.0, a])
        covs = np.array([scale @ c @ scale for c in model.covariances])
        moved = GmmModel(model.priors, means, covs)
        times = np.linspace(-1.0, 1.0, 9)
        base, out = regress(model, times), regress(moved, times)
        assert np.allclose(out.mean, a * base.mean + b)
        assert np.allclose(out.covariance, a**2 * base.covariance)

    def test_fits_a_sine(self):
        """K=4 regression follows sin(2πt) to within twice the sample noise."""
        rng = np.random.default_rng(4)
        noise = 0.05
        t = rng.uniform(0.0, 1.0, 800)
        y = np.sin(2 * np.pi * t) + rng.normal(0.0, noise, size=800)
        model = fit(np.column_stack([t, y]), 4, EmConfig(init="kmeans"), seed=1)
        grid = np.linspace(0.0, 1.0, 100)
        result = regress(model, grid)
        rmse = np.sqrt(np.mean((result.mean[:, 0] - np.sin(2 * np.pi * grid)) ** 2))
        assert rmse <= 2 * noise

    def test_time_as_output_rejected(self):
        """Only conditioning on column 0 is supported."""
        model = GmmModel([1.0], [[0.0, 0.0]], [np.eye(2)], (1,), (0,))
        with pytest.raises(UnsupportedConditioningError):
            regress(model, [0.0])

    def test_query_validation(self):
        """Query times must be finite and non-decreasing."""
        with pytest.raises(InputError):
            GmrQuery([0.0, float("nan")])
        with pytest.raises(InputError):
            GmrQuery([0.5, 0.1])

    def test_csv(self):
        """CSV has mean and variance columns per output."""
        model = _random_model(np.random.default_rng(5))
        text = regress(model, [0.0, 0.1]).to_csv(names=["x", "y"])
        assert text.splitlines()[0] == "t,mean_x,mean_y,var_x,var_y"
        assert len(text.splitlines()) == 3


# --- reconstruction ---


class TestReconstruct:
    """Test mean reaches from fitted action models."""

    def test_matches_minimum_jerk(self, clean_bundle, scene):
        """K=4 reconstructions track the noise-free demonstrations and hit both endpoints."""
        for label in ALL_LABELS:
            traj = reconstruct_action(clean_bundle[label], n_points=100)
            truth = reach_positions(np.asarray(scene.ball_start), scene.goal(label), 0.0, 1.2, traj.times)
            errors = np.linalg.norm(traj.positions - truth, axis=1)
            assert np.sqrt(np.mean(errors**2)) <= 0.010, label.token
            assert errors[0] <= 0.002, label.token
            assert errors[-1] <= 0.002, label.token

    def test_place_right_ends_at_marker(self, clean_bundle, scene):
        """The P_R mean reach ends within 2 mm of the right place marker."""
        label = next(label for label in ALL_LABELS if label.token == "P_R")
        traj = reconstruct_action(clean_bundle[label], n_points=100)
        assert np.linalg.norm(traj.positions[-1] - scene.goal(label)) <= 0.002

    def test_more_components_reach_sub_millimeter(self, clean_dataset, scene):
        """With K=12 the noise-free reconstruction error drops below 1 mm."""
        bundle = fit_action_models(clean_dataset, EmConfig(n_components=12), seed=5)
        for label in ALL_LABELS:
            traj = reconstruct_action(bundle[label], n_points=100)
            truth = reach_positions(np.asarray(scene.ball_start), scene.goal(label), 0.0, 1.2, traj.times)
            errors = np.linalg.norm(traj.positions - truth, axis=1)
            assert np.sqrt(np.mean(errors**2)) < 0.001, label.token

    def test_noisy_demonstrations(self, noisy_bundle, scene):
        """Twenty noisy trials per label still give reaches within 10 mm, endpoints within 20 mm."""
        for label in ALL_LABELS:
            traj = reconstruct_action(noisy_bundle[label], n_points=100)
            truth = reach_positions(np.asarray(scene.ball_start), scene.goal(label), 0.0, 1.2, traj.times)
            errors = np.linalg.norm(traj.positions - truth, axis=1)
            assert np.sqrt(np.mean(errors**2)) <= 0.010, label.token
            assert errors[0] <= 0.020, label.token
            assert errors[-1] <= 0.020, label.token

    def test_grid_and_variance(self, clean_bundle):
        """Grid spans the modeled duration and the envelope is non-negative."""
        traj = reconstruct_action(clean_bundle[ALL_LABELS[0]], n_points=50)
        assert len(traj) == 50
        assert traj.times[0] == 0.0
        assert traj.times[-1] == pytest.approx(1.2)
        assert np.all(traj.variance >= 0)

    def test_two_points(self, clean_bundle):
        """n_points=2 gives start and end only."""
        traj = reconstruct_action(clean_bundle[ALL_LABELS[3]], n_points=2)
        assert len(traj) == 2

    def test_too_few_points(self, clean_bundle):
        """One point is not a trajectory."""
        with pytest.raises(ParameterError):
            reconstruct_action(clean_bundle[ALL_LABELS[0]], n_points=1)

    def test_predict_per_axis_covariance_is_diagonal(self, clean_bundle):
        """Per-axis models give diagonal 3x3 covariances."""
        mean, cov = predict(clean_bundle[ALL_LABELS[1]], np.linspace(0.0, 1.2, 7))
        assert mean.shape == (7, 3)
        off_diagonal = cov - np.einsum("nii->ni", cov)[:, :, None] * np.eye(3)
        assert np.all(off_diagonal == 0.0)

    def test_incompatible_time_scales(self):
        """Models with different time scales cannot be combined."""
        rng = np.random.default_rng(6)
        rows = np.column_stack([rng.uniform(0, 1, 50), rng.normal(size=50)])
        models = [
            fit(TrainingMatrix(rows, time_scale=scale), 1, seed=0) for scale in (1.0, 1.0, 2.0)
        ]
        with pytest.raises(IncompatibleModelError):
            reconstruct_action(models)

    def test_wrong_model_count(self):
        """Two models are neither per-axis nor joint."""
        model = GmmModel([1.0], [[0.0, 0.0]], [np.eye(2)])
        with pytest.raises(IncompatibleModelError):
            predict([model, model], [0.0])
