# 文件: tests/test_ticc_solver.py
import itertools

import numpy as np
import pytest

from clustering import export_cluster_model, load_cluster_model
from config import TiccParams
from errors import DataError, ShapeError
from ticc_solver import (TiccModel, TiccSolver, extend_tail, glasso_objective, project_toeplitz, soft_threshold,
                         solve_toeplitz_glasso, stack_windows, ticc_fit, toeplitz_glasso_admm, toeplitz_groups)


def _regime_data(seed=0, dwell=(150, 250), visits=6):
    rng = np.random.default_rng(seed)
    means = [np.zeros(2), np.array([3.0, 3.0])]
    covs = [np.array([[1.0, 0.6], [0.6, 1.0]]), np.array([[1.0, -0.6], [-0.6, 1.0]])]
    values, labels = [], []
    for i in range(visits):
        j = i % 2
        n = int(rng.integers(*dwell))
        values.append(rng.multivariate_normal(means[j], covs[j], size=n))
        labels.append(np.full(n, j))
    return np.vstack(values), np.concatenate(labels)


def _matched_accuracy(pred, truth, k):
    return max(np.mean(np.asarray(perm)[pred] == truth) for perm in itertools.permutations(range(k)))


class TestAdmm:
    def test_soft_threshold(self):
        assert soft_threshold(0.3, 0.5) == 0.0
        assert soft_threshold(0.8, 0.5) == pytest.approx(0.3)
        assert soft_threshold(-0.8, 0.5) == pytest.approx(-0.3)

    def test_scalar_inverse(self):
        theta = toeplitz_glasso_admm(np.array([[2.0]]), 0.0, threshold=1e-10, max_iter=5000)
        assert theta[0, 0] == pytest.approx(0.5, abs=1e-8)

    def test_unregularized_inverse(self, rng):
        a = rng.normal(size=(4, 4))
        S = a @ a.T + 4 * np.eye(4)
        result = solve_toeplitz_glasso(S, 0.0, block_size=4, threshold=1e-10, max_iter=10000)
        assert result.converged
        np.testing.assert_allclose(result.theta, np.linalg.inv(S), atol=1e-6)

    def test_large_penalty_zeroes_weak_partial_correlation(self):
        S = np.array([[1.0, 0.1], [0.1, 1.0]])
        theta = toeplitz_glasso_admm(S, 0.5, threshold=1e-10, max_iter=10000)
        assert abs(theta[0, 1]) < 1e-6
        assert theta[0, 0] == pytest.approx(1 / 1.5, abs=1e-6)

    def test_result_is_block_toeplitz_and_positive_definite(self, rng):
        x = rng.normal(size=(200, 6))
        S = np.cov(x, rowvar=False, bias=True)
        theta = toeplitz_glasso_admm(S, 0.01, block_size=2, threshold=1e-8, max_iter=5000)
        np.testing.assert_allclose(theta, theta.T)
        assert np.linalg.eigvalsh(theta).min() > 0
        block = lambda r, c: theta[2 * r:2 * r + 2, 2 * c:2 * c + 2]
        np.testing.assert_allclose(block(0, 0), block(1, 1), atol=1e-6)
        np.testing.assert_allclose(block(0, 1), block(1, 2), atol=1e-6)
        np.testing.assert_allclose(block(1, 0), block(0, 1).T, atol=1e-6)

    def test_projection_is_idempotent(self, rng):
        groups = toeplitz_groups(2, 3)
        m = rng.normal(size=(6, 6))
        once = project_toeplitz(m + m.T, groups)
        np.testing.assert_allclose(project_toeplitz(once, groups), once)

    def test_rejects_asymmetric_input(self):
        with pytest.raises(DataError):
            toeplitz_glasso_admm(np.array([[1.0, 0.2], [0.0, 1.0]]), 0.1)

    def test_rejects_bad_block_size(self):
        with pytest.raises(ShapeError):
            toeplitz_glasso_admm(np.eye(5), 0.1, block_size=2)


class TestStacking:
    def test_stack_windows_order(self):
        values = np.arange(10.0).reshape(5, 2)
        stacked = stack_windows(values, 3)
        assert stacked.shape == (3, 6)
        np.testing.assert_array_equal(stacked[0], [0, 1, 2, 3, 4, 5])
        np.testing.assert_array_equal(stacked[2], [4, 5, 6, 7, 8, 9])

    def test_too_short(self):
        with pytest.raises(DataError):
            stack_windows(np.zeros((2, 3)), 3)

    def test_extend_tail(self):
        assert extend_tail(np.array([0, 1]), 4).tolist() == [0, 1, 1, 1]


class TestTiccFit:
    def test_recovers_generating_regimes(self):
        values, truth = _regime_data()
        params = TiccParams(window=2, lam=1e-3, beta=20.0, max_iter=10)
        model, labels = ticc_fit([values], params, k=2, seed=3)
        assert len(labels[0]) == len(values)
        assert _matched_accuracy(labels[0], truth, 2) >= 0.95
        assert model.iterations >= 1

    def test_zero_beta_is_pointwise_argmin(self):
        values, _ = _regime_data(seed=1)
        model, labels = ticc_fit([values], TiccParams(window=2, lam=1e-3, beta=0.0, max_iter=5), k=2, seed=3)
        costs = model.cost_matrix(stack_windows(values, 2))
        np.testing.assert_array_equal(model.assign(values)[:len(costs)], costs.argmin(axis=1))

    def test_single_cluster_is_whole_data_estimate(self):
        values, _ = _regime_data(seed=2)
        params = TiccParams(window=2, lam=5e-3, beta=10.0, max_iter=3)
        model, labels = ticc_fit([values], params, k=1)
        assert set(labels[0].tolist()) == {0}
        x = stack_windows(values, 2)
        expected = toeplitz_glasso_admm(np.cov(x, rowvar=False, bias=True), params.lam, len(x), params.rho,
                                        params.threshold, block_size=2, max_iter=params.admm_max_iter)
        np.testing.assert_allclose(model.precisions[0], expected)

    def test_multiple_sessions_share_one_model(self):
        a, _ = _regime_data(seed=4, visits=4)
        b, _ = _regime_data(seed=5, visits=4)
        model, labels = ticc_fit([a, b], TiccParams(window=2, lam=1e-3, beta=20.0, max_iter=5), k=2)
        assert [len(x) for x in labels] == [len(a), len(b)]
        np.testing.assert_array_equal(model.assign(b), labels[1])

    def test_not_enough_samples(self):
        with pytest.raises(DataError):
            ticc_fit([np.zeros((5, 2))], TiccParams(window=4), k=2)

    def test_model_round_trip(self, tmp_path):
        values, _ = _regime_data(seed=6, visits=2)
        model, _ = ticc_fit([values], TiccParams(window=2, max_iter=2), k=2)
        loaded = load_cluster_model(export_cluster_model(model, str(tmp_path / 'ticc.json')))
        assert isinstance(loaded, TiccModel)
        np.testing.assert_array_equal(loaded.assign(values), model.assign(values))


def _var_regimes(seed, blocks=8, length=60):
    rng = np.random.default_rng(seed)
    transitions = [np.array([[0.9, 0.0], [0.0, 0.9]]), np.array([[0.0, 0.8], [-0.8, 0.0]])]
    state = np.zeros(2)
    values = []
    for i in range(blocks):
        a = transitions[i % 2]
        for _ in range(length):
            state = a @ state + 0.4 * rng.standard_normal(2)
            values.append(state.copy())
    return np.array(values)


class TestObjective:
    def test_cost_matrix_matches_glasso_scaling(self, rng):
        x = stack_windows(rng.normal(size=(80, 2)), 2)
        S = np.cov(x, rowvar=False, bias=True)
        lam = 0.05
        theta = toeplitz_glasso_admm(S, lam, block_size=2, threshold=1e-9, max_iter=5000)
        model = TiccModel(x.mean(axis=0)[None], theta[None], window=2, e=2, lam=lam, beta=0.0)
        total = model.cost_matrix(x)[:, 0].sum()
        expected = 0.5 * len(x) * (glasso_objective(S, theta, lam) + x.shape[1] * np.log(2 * np.pi))
        assert total == pytest.approx(expected, rel=1e-10)

    def test_m_step_keeps_better_previous_precision(self, rng):
        x = stack_windows(rng.normal(size=(120, 2)), 2)
        S = np.cov(x, rowvar=False, bias=True)
        converged = toeplitz_glasso_admm(S, 5e-3, block_size=2, threshold=1e-10, max_iter=20000)
        solver = TiccSolver(TiccParams(window=2, admm_max_iter=1), k=1)
        _, precisions = solver._m_step(x, np.zeros(len(x), dtype=np.int64), 2, converged[None])
        np.testing.assert_array_equal(precisions[0], converged)
        _, fresh = solver._m_step(x, np.zeros(len(x), dtype=np.int64), 2)
        assert glasso_objective(S, fresh[0], 5e-3) > glasso_objective(S, converged, 5e-3)

    @pytest.mark.parametrize('seed', range(8))
    def test_objective_is_non_increasing(self, seed):
        values = _var_regimes(seed)
        solver = TiccSolver(TiccParams(window=3, max_iter=6), k=2, seed=seed)
        model, _ = solver.fit([values])
        history = model.objective_history
        for i in range(1, len(history)):
            if i + 1 in solver.reseeded_at:
                continue
            assert history[i] <= history[i - 1] + 1e-6 * max(1.0, abs(history[i - 1]))
