"""
Tests for the sum-of-margins solver

Covers:
1. Dataset validation
2. Exact fixed-direction thresholds (checked against a linear program)
3. Worked examples and the brute-force oracle suite
4. Degeneracy, hard mode and convergence errors
5. Cone solver settings and invariances of the optimum
6. Rank repair (pruning, swapping, incremental building)
"""

import os
import sys
from unittest.mock import patch

import numpy as np
import pytest
from cvxopt import solvers
from scipy.optimize import linprog

# Add parent directory to path
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from features import FeatureMap, Mu
from ordinal_margin import (
    SOLVER_OPTIONS,
    RankedDataset,
    RankSolution,
    SolverConvergenceError,
    incremental_build,
    oracle_objective,
    prune_misranked,
    reward_from_w,
    solve_sum_of_margins,
    solve_thresholds,
    threshold_objective_batch,
)


def dataset(points, ranks, C=1.0):
    """Dataset with source ids p0, p1, ..."""
    mus = [Mu(np.atleast_1d(np.asarray(p, dtype=float)), r, f'p{i}')
           for i, (p, r) in enumerate(zip(points, ranks))]
    return RankedDataset(tuple(mus), C)


def threshold_lp(scores, ranks, k, C):
    """Fixed-direction threshold program solved as a plain LP."""
    scores = np.asarray(scores, dtype=float)
    ranks = np.asarray(ranks)
    n_pairs = k - 1
    upper = np.flatnonzero(ranks < k)
    lower = np.flatnonzero(ranks > 1)
    n = 2 * n_pairs + upper.size + lower.size
    c = np.concatenate([np.ones(n_pairs), -np.ones(n_pairs), C * np.ones(n - 2 * n_pairs)])
    rows, rhs = [], []
    for r in range(n_pairs):
        row = np.zeros(n)
        row[r], row[n_pairs + r] = 1.0, -1.0
        rows.append(row)
        rhs.append(0.0)
    for r in range(n_pairs - 1):
        row = np.zeros(n)
        row[n_pairs + r], row[r + 1] = 1.0, -1.0
        rows.append(row)
        rhs.append(0.0)
    for j, i in enumerate(upper):
        row = np.zeros(n)
        row[ranks[i] - 1], row[2 * n_pairs + j] = -1.0, -1.0
        rows.append(row)
        rhs.append(-scores[i])
    for j, i in enumerate(lower):
        row = np.zeros(n)
        row[n_pairs + ranks[i] - 2], row[2 * n_pairs + upper.size + j] = 1.0, -1.0
        rows.append(row)
        rhs.append(scores[i])
    bounds = [(None, None)] * (2 * n_pairs) + [(0, None)] * (n - 2 * n_pairs)
    result = linprog(c, A_ub=np.array(rows), b_ub=np.array(rhs), bounds=bounds, method='highs')
    assert result.status == 0
    return result.fun


def random_instance(rng):
    d = int(rng.integers(1, 3))
    k = int(rng.integers(2, 4))
    n = int(rng.integers(k, 7))
    ranks = np.concatenate([np.arange(1, k + 1), rng.integers(1, k + 1, size=n - k)])
    points = rng.uniform(-1.0, 1.0, size=(n, d))
    return dataset(points, ranks, C=float(rng.choice([1.0, 2.0])))


# ============================================================================
# DATASET
# ============================================================================

class TestRankedDataset:
    """Test dataset validation."""

    def test_empty_rank(self):
        with pytest.raises(ValueError, match="rank 2 empty"):
            dataset([0.0, 1.0], [1, 3])

    def test_single_rank(self):
        with pytest.raises(ValueError, match="two ranks"):
            dataset([0.0, 1.0], [1, 1])

    def test_duplicate_ids(self):
        mu = Mu([0.0], 1, 'x')
        with pytest.raises(ValueError, match="duplicate"):
            RankedDataset((mu, Mu([1.0], 2, 'x')))

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="dimensions"):
            RankedDataset((Mu([0.0], 1, 'a'), Mu([1.0, 2.0], 2, 'b')))

    def test_unbounded_rejected(self):
        data = dataset([0.0, 1.0], [1, 2], C=0.5)
        with pytest.raises(ValueError, match="unbounded"):
            solve_sum_of_margins(data)

    def test_relabel_and_remove(self):
        data = dataset([0.0, 1.0, 2.0], [1, 2, 2])
        assert data.with_relabeled('p2', 1).get('p2').rank == 1
        assert data.with_removed('p1').source_ids == ['p0', 'p2']


# ============================================================================
# FIXED-DIRECTION THRESHOLDS
# ============================================================================

class TestThresholds:
    """Test the exact threshold program."""

    def test_separated_scores(self):
        result = solve_thresholds([0.0, 1.0, 2.0], [1, 2, 3], 3)
        np.testing.assert_array_equal(result.a, [0.0, 1.0])
        np.testing.assert_array_equal(result.b, [1.0, 2.0])
        assert result.objective == -2.0

    def test_hard_thresholds(self):
        result = solve_thresholds([0.0, 0.5, 1.0, 2.0], [1, 1, 2, 2], 2, C=np.inf)
        np.testing.assert_array_equal(result.a, [0.5])
        np.testing.assert_array_equal(result.b, [1.0])

    def test_least_slack_among_optima(self):
        # Objective 0 for every a1 in [0, 1]; least slack puts a1 at 1
        result = solve_thresholds([0.0, 2.0, 1.0, 2.0], [1, 1, 2, 3], 3)
        assert result.objective == pytest.approx(0.0)
        assert result.eps.sum() + result.sig.sum() == pytest.approx(1.0)
        assert result.eps[1] == pytest.approx(1.0)

    @pytest.mark.parametrize("seed", range(25))
    def test_matches_linear_program(self, seed):
        rng = np.random.default_rng(seed)
        k = int(rng.integers(2, 5))
        n = int(rng.integers(k, 12))
        ranks = np.concatenate([np.arange(1, k + 1), rng.integers(1, k + 1, size=n - k)])
        scores = rng.normal(size=n)
        C = float(rng.choice([1.0, 1.5, 3.0]))
        expected = threshold_lp(scores, ranks, k, C)
        assert solve_thresholds(scores, ranks, k, C).objective == pytest.approx(expected,
                                                                                abs=1e-9)

    def test_batch_matches_single(self):
        rng = np.random.default_rng(7)
        ranks = np.array([1, 2, 3, 1, 2, 3, 2])
        scores = rng.normal(size=(5, 7))
        batch = threshold_objective_batch(scores, ranks, 3, 1.0)
        single = [solve_thresholds(row, ranks, 3, 1.0).objective for row in scores]
        np.testing.assert_allclose(batch, single, atol=1e-12)


# ============================================================================
# WORKED EXAMPLES
# ============================================================================

class TestWorkedExamples:
    """Test the one-dimensional examples."""

    def test_two_ranks(self):
        solution = solve_sum_of_margins(dataset([0.0, 1.0], [1, 2]))
        np.testing.assert_allclose(solution.w, [1.0], atol=1e-6)
        assert solution.objective == pytest.approx(-1.0, abs=1e-6)
        np.testing.assert_allclose(solution.a, [0.0], atol=1e-6)
        np.testing.assert_allclose(solution.b, [1.0], atol=1e-6)
        np.testing.assert_allclose(solution.margins, [1.0], atol=1e-6)
        assert solution.max_slack == pytest.approx(0.0, abs=1e-9)
        assert not solution.degenerate

    def test_identical_points(self):
        solution = solve_sum_of_margins(dataset([0.3, 0.3, 0.3], [1, 2, 3]))
        assert solution.objective == pytest.approx(0.0, abs=1e-9)
        np.testing.assert_allclose(solution.margins, [0.0, 0.0], atol=1e-9)
        assert solution.max_slack == pytest.approx(0.0, abs=1e-9)

    def test_three_ranks(self):
        solution = solve_sum_of_margins(dataset([0.0, 1.0, 2.0], [1, 2, 3]))
        np.testing.assert_allclose(solution.w, [1.0], atol=1e-6)
        np.testing.assert_allclose(np.ravel(np.column_stack([solution.a, solution.b])),
                                   [0.0, 1.0, 1.0, 2.0], atol=1e-6)
        assert solution.objective == pytest.approx(-2.0, abs=1e-6)

    def test_conflicted_is_degenerate(self):
        data = dataset([0.0, 1.0, 0.5], [1, 1, 2])
        solution = solve_sum_of_margins(data)
        assert solution.degenerate
        np.testing.assert_array_equal(solution.w, [0.0])
        np.testing.assert_array_equal(solution.margins, [0.0])
        assert solution.objective == 0.0
        assert oracle_objective(data) == pytest.approx(0.0, abs=1e-12)

    def test_deterministic(self):
        data = dataset([[0.1, 0.9], [0.4, 0.2], [0.8, 0.7]], [1, 2, 3])
        assert solve_sum_of_margins(data) == solve_sum_of_margins(data)

    def test_solution_dict_round_trip(self):
        solution = solve_sum_of_margins(dataset([0.0, 1.0, 2.0], [1, 2, 3]))
        assert RankSolution.from_dict(solution.to_dict()) == solution


# ============================================================================
# ORACLE SUITE
# ============================================================================

class TestOracle:
    """Test the solver against brute force for d <= 2."""

    @pytest.mark.parametrize("seed", range(50))
    def test_random_instance(self, seed):
        data = random_instance(np.random.default_rng(1000 + seed))
        solution = solve_sum_of_margins(data)
        assert solution.objective == pytest.approx(oracle_objective(data), abs=1e-3)
        assert solution.feasibility_residual <= 1e-6

    @pytest.mark.parametrize("points,ranks,expected", [
        ([0.0, 1.0], [1, 2], -1.0),
        ([0.3, 0.3, 0.3], [1, 2, 3], 0.0),
        ([0.0, 1.0, 2.0], [1, 2, 3], -2.0),
        ([0.0, 1.0, 0.5], [1, 1, 2], 0.0),
    ])
    def test_worked_examples(self, points, ranks, expected):
        data = dataset(points, ranks)
        assert oracle_objective(data) == pytest.approx(expected, abs=1e-12)
        assert solve_sum_of_margins(data).objective == pytest.approx(expected, abs=1e-6)


# ============================================================================
# HARD MODE AND ERRORS
# ============================================================================

class TestHardMode:
    """Test the slack-free program."""

    def test_max_margin_direction(self):
        data = dataset([[1.0, 0.0, 0.0, 9.0], [1.0, 0.0, 9.0, 0.0]], [1, 2])
        solution = solve_sum_of_margins(data, hard=True)
        np.testing.assert_allclose(solution.w, [0.0, 0.0, 1.0, -1.0] / np.sqrt(2.0), atol=1e-6)
        assert solution.margins[0] == pytest.approx(9.0 * np.sqrt(2.0), abs=1e-5)

    def test_identical_is_degenerate(self):
        data = dataset([[0.2, 0.4], [0.2, 0.4]], [1, 2])
        solution = solve_sum_of_margins(data, hard=True)
        assert solution.degenerate
        np.testing.assert_array_equal(solution.w, [0.0, 0.0])

    def test_non_convergence_reports_iterate(self):
        data = dataset([0.0, 1.0], [1, 2])
        stalled = {
            'status': 'unknown', 'x': None, 'iterations': 200, 'gap': 1.0,
            'relative gap': 1.0, 'primal infeasibility': 1.0, 'dual infeasibility': 1.0,
        }
        with patch('ordinal_margin.solvers.socp', return_value=stalled):
            with pytest.raises(SolverConvergenceError) as caught:
                solve_sum_of_margins(data)
        assert caught.value.status == 'unknown'
        assert caught.value.best is None

    def test_bad_tolerance(self):
        with pytest.raises(ValueError, match="tol"):
            solve_sum_of_margins(dataset([0.0, 1.0], [1, 2]), tol=0.0)


# ============================================================================
# SOLVER SETTINGS AND INVARIANCES
# ============================================================================

SEPARABLE_POINTS = [
    [0.0, 0.05], [0.2, -0.05], [0.1, 0.1],
    [1.0, 0.0], [1.1, 0.1], [0.9, -0.1],
    [2.0, 0.05], [2.2, -0.1], [1.9, 0.0],
]
SEPARABLE_RANKS = [1, 1, 1, 2, 2, 2, 3, 3, 3]

MIXED_POINTS = [[0.0, 0.4], [0.6, -0.2], [0.5, 0.3], [0.2, 0.9], [1.0, 0.1], [0.7, 0.8]]
MIXED_RANKS = [1, 1, 2, 2, 3, 3]


class TestSolverSettings:
    """Test that the cone solver runs with the module settings."""

    def test_solve_is_quiet(self, capfd):
        solve_sum_of_margins(dataset(SEPARABLE_POINTS, SEPARABLE_RANKS))
        out, _ = capfd.readouterr()
        assert 'pcost' not in out
        assert out == ''

    def test_settings_applied_during_solve(self):
        real_socp = solvers.socp
        seen = {}

        def spy(*args, **kwargs):
            assert 'options' not in kwargs
            seen.update(solvers.options)
            return real_socp(*args, **kwargs)

        with patch('ordinal_margin.solvers.socp', side_effect=spy):
            solve_sum_of_margins(dataset([0.0, 1.0], [1, 2]))
        for key, value in SOLVER_OPTIONS.items():
            assert seen[key] == value

    def test_global_settings_restored(self):
        before = dict(solvers.options)
        solvers.options['show_progress'] = True
        try:
            solve_sum_of_margins(dataset([0.0, 1.0], [1, 2]))
            assert solvers.options['show_progress'] is True
        finally:
            solvers.options.clear()
            solvers.options.update(before)


class TestInvariances:
    """Test structural properties of the optimum."""

    def test_separable_certificate(self):
        solution = solve_sum_of_margins(dataset(SEPARABLE_POINTS, SEPARABLE_RANKS))
        assert not solution.degenerate
        assert solution.max_slack <= 1e-6
        assert np.all(solution.margins > 0)

    def test_rank_order_consistency(self):
        solution = solve_sum_of_margins(dataset(SEPARABLE_POINTS, SEPARABLE_RANKS))
        scores = np.asarray(SEPARABLE_POINTS) @ solution.w
        ranks = np.asarray(SEPARABLE_RANKS)
        for rank in (1, 2):
            assert scores[ranks == rank].max() < scores[ranks == rank + 1].min()

    @pytest.mark.parametrize("points,ranks", [
        (SEPARABLE_POINTS, SEPARABLE_RANKS),
        (MIXED_POINTS, MIXED_RANKS),
    ])
    def test_translation_invariance(self, points, ranks):
        shift = np.array([5.0, -3.0])
        base = solve_sum_of_margins(dataset(points, ranks))
        moved = solve_sum_of_margins(dataset(np.asarray(points) + shift, ranks))
        assert moved.objective == pytest.approx(base.objective, abs=1e-6)
        np.testing.assert_allclose(moved.margins, base.margins, atol=1e-6)
        np.testing.assert_allclose(moved.a, base.a + base.w @ shift, atol=1e-5)

    @pytest.mark.parametrize("points,ranks", [
        (SEPARABLE_POINTS, SEPARABLE_RANKS),
        (MIXED_POINTS, MIXED_RANKS),
    ])
    def test_within_rank_permutation(self, points, ranks):
        data = dataset(points, ranks)
        reordered = RankedDataset(
            tuple(mu for rank in range(1, data.k + 1)
                  for mu in reversed([m for m in data.mus if m.rank == rank])),
            data.C,
        )
        first = solve_sum_of_margins(data)
        second = solve_sum_of_margins(reordered)
        np.testing.assert_allclose(second.w, first.w, atol=1e-6)
        assert second.objective == pytest.approx(first.objective, abs=1e-6)
        np.testing.assert_allclose(second.margins, first.margins, atol=1e-6)
        for source_id in first.eps:
            assert second.eps[source_id] == pytest.approx(first.eps[source_id], abs=1e-6)
        for source_id in first.sig:
            assert second.sig[source_id] == pytest.approx(first.sig[source_id], abs=1e-6)


class TestRewardFromW:
    """Test reward construction."""

    def test_identity(self):
        w = np.array([0.5, -0.5, 0.25])
        np.testing.assert_array_equal(reward_from_w(w, FeatureMap.lossless(3)), w)

    def test_zero(self):
        np.testing.assert_array_equal(reward_from_w(np.zeros(2), FeatureMap.lossless(2)),
                                      np.zeros(2))

    def test_mismatch(self):
        with pytest.raises(ValueError, match="feature map has 2"):
            reward_from_w(np.ones(3), FeatureMap.lossless(2))


# ============================================================================
# RANK REPAIR
# ============================================================================

def clustered_with_plant(seed):
    """Three ranked clusters of three in 2-D plus one mislabeled centroid."""
    rng = np.random.default_rng(seed)
    points, ranks, ids = [], [], []
    for rank, centre in zip((1, 2, 3), (0.0, 1.0, 2.0)):
        for j in range(3):
            points.append(np.array([centre, 0.0]) + rng.uniform(-0.1, 0.1, size=2))
            ranks.append(rank)
            ids.append(f'r{rank}_{j}')
    true_rank = int(rng.integers(2, 4))
    plant = np.mean([p for p, r in zip(points, ranks) if r == true_rank], axis=0)
    mus = [Mu(p, r, sid) for p, r, sid in zip(points, ranks, ids)]
    return mus, Mu(plant, true_rank - 1, 'plant')


class TestPruning:
    """Test slack-driven pruning."""

    def test_separable_unchanged(self):
        result = prune_misranked(dataset([0.0, 1.0, 2.0], [1, 2, 3]))
        assert result.removed == []
        assert result.residual_max_slack == pytest.approx(0.0, abs=1e-9)

    def test_outlier_removed(self):
        data = dataset([0.0, 1.0, 2.0, 2.0], [1, 2, 3, 1])
        result = prune_misranked(data)
        assert result.removed == ['p3']
        assert result.solution.objective == pytest.approx(-2.0, abs=1e-6)
        assert result.residual_max_slack <= 1e-6

    def test_zero_budget(self):
        data = dataset([0.0, 1.0, 0.0, 1.0], [1, 1, 2, 2])
        result = prune_misranked(data, max_removals=0)
        assert result.dataset == data
        assert result.removed == []

    def test_zero_budget_with_slack(self):
        data = dataset([0.0, 1.0, 2.0, 2.0], [1, 2, 3, 1])
        result = prune_misranked(data, max_removals=0)
        assert result.budget_exhausted
        assert result.residual_max_slack == pytest.approx(1.0, abs=1e-6)

    def test_sole_member_refused(self):
        # The only rank-3 demonstrator sits below rank 2
        data = dataset([0.0, 0.1, 2.0, 2.1, 1.0], [1, 1, 2, 2, 3])
        result = prune_misranked(data, max_removals=5)
        assert 'p4' not in result.removed
        assert 'p4' in result.refused or result.residual_max_slack <= 1e-6

    def test_swap_mode_relabels(self):
        data = dataset([0.0, 1.0, 2.0, 2.0], [1, 2, 3, 1])
        result = prune_misranked(data, mode='swap')
        assert result.swapped[0][0] == 'p3'
        assert result.swapped[0][1:] == (1, 2)

    def test_unknown_mode(self):
        with pytest.raises(ValueError, match="mode"):
            prune_misranked(dataset([0.0, 1.0], [1, 2]), mode='shuffle')

    @pytest.mark.parametrize("seed", range(10))
    def test_planted_demonstrator_removed(self, seed):
        mus, plant = clustered_with_plant(seed)
        result = prune_misranked(RankedDataset(tuple(mus) + (plant,)), max_removals=1)
        assert result.removed == ['plant']
        assert result.residual_max_slack <= 1e-6


class TestIncrementalBuild:
    """Test incremental dataset building."""

    def test_consistent_candidate_accepted(self):
        seed = dataset([0.0, 2.0], [1, 2])
        result = incremental_build(seed, [Mu([-1.0], 1, 'extra')])
        assert result.rejected == []
        assert 'extra' in result.dataset.source_ids

    def test_duplicate_at_other_rank_rejected(self):
        seed = dataset([0.0, 1.0, 2.0], [1, 2, 3])
        result = incremental_build(seed, [Mu([0.0], 3, 'copy')])
        assert result.rejected == ['copy']
        assert result.dataset == seed

    def test_empty_candidates(self):
        seed = dataset([0.0, 1.0], [1, 2])
        result = incremental_build(seed, [])
        assert result.dataset == seed

    def test_inconsistent_seed(self):
        with pytest.raises(ValueError, match="not consistent"):
            incremental_build(dataset([0.0, 1.0, 2.0, 2.0], [1, 2, 3, 1]), [])

    def test_rank_out_of_range(self):
        seed = dataset([0.0, 1.0], [1, 2])
        result = incremental_build(seed, [Mu([5.0], 4, 'far')])
        assert result.rejected == ['far']

    @pytest.mark.parametrize("seed", range(10))
    def test_planted_demonstrator_rejected(self, seed):
        mus, plant = clustered_with_plant(seed)
        first = tuple(mus[i] for i in (0, 3, 6))
        rest = [mu for i, mu in enumerate(mus) if i not in (0, 3, 6)]
        result = incremental_build(RankedDataset(first), rest + [plant])
        assert result.rejected == ['plant']
        assert len(result.dataset.mus) == 9
