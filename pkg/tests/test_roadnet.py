"""
Tests for the road network pipeline

Covers:
1. Network generation, oriented states and the turn-choice MDP
2. Pickup quality and the shift simulator
3. Driver ranking
4. Decomposition
5. Per-cluster solves and the end-to-end run (slow)
"""

import filecmp
import os
import sys

import numpy as np
import pytest

# Add parent directory to path
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from features import FeatureMap, Trajectory
from file_formats import read_trajectory_csv
from mdp_core import validate_mdp
from roadnet import (
    CityConfig,
    Decomposition,
    DriverLog,
    DriverRanking,
    RoadNetwork,
    Segment,
    count_traversals,
    decompose,
    driver_mu,
    generate_network,
    load_network,
    plant_pickup_quality,
    rank_drivers,
    restrict_to_cluster,
    run_city,
    save_network,
    segment_value_table,
    simulate_drivers,
    solve_city,
    spread_slack_constant,
    to_network_mdp,
)


# ============================================================================
# HELPERS
# ============================================================================

def make_log(driver_id, n_occupied, length=10, states=None):
    """Single-trajectory log with ``n_occupied`` trailing occupied steps."""
    occupied = [False] * (length - n_occupied) + [True] * n_occupied
    states = list(range(length)) if states is None else states
    trajectory = Trajectory(states, occupied, list(range(len(states))))
    return DriverLog(driver_id, 0.5, [trajectory])


def path_network(n_segments):
    """Intersections 0..n joined in a line."""
    positions = {node: (float(node), 0.0) for node in range(n_segments + 1)}
    segments = [Segment(sid, sid, sid + 1, 1.0) for sid in range(n_segments)]
    return RoadNetwork(positions, segments)


@pytest.fixture(scope='module')
def small_net():
    return generate_network(30, topology_seed=2)


@pytest.fixture(scope='module')
def small_logs(small_net):
    return simulate_drivers(small_net, 6, seed=4, shift_length=120)


# ============================================================================
# NETWORK
# ============================================================================

class TestNetwork:
    """Test network generation and oriented states."""

    def test_segment_count_and_states(self):
        net = generate_network(50, topology_seed=1)
        assert net.n_segments == 50
        assert net.n_states == 100
        assert net.is_connected()

    def test_deterministic(self):
        assert generate_network(40, 3) == generate_network(40, 3)
        assert generate_network(40, 3) != generate_network(40, 4)

    def test_city_scale(self):
        net = generate_network(2203, topology_seed=0)
        assert net.n_states == 4406
        assert net.is_connected()

    def test_lengths_jittered(self, small_net):
        for seg in small_net.segments:
            (x1, y1), (x2, y2) = small_net.positions[seg.u], small_net.positions[seg.v]
            straight = np.hypot(x2 - x1, y2 - y1)
            assert straight <= seg.length <= 1.3 * straight + 1e-12

    def test_too_small(self):
        with pytest.raises(ValueError, match="n_segments"):
            generate_network(5, 0)

    def test_orientation(self):
        net = path_network(2)
        assert (net.tail(0), net.head(0)) == (0, 1)
        assert (net.tail(1), net.head(1)) == (1, 0)
        assert net.successors(0) == [1, 2]
        # Dead end offers only the U-turn
        assert net.successors(2) == [3]

    def test_network_mdp(self, small_net):
        mdp = to_network_mdp(small_net, 0.9)
        assert validate_mdp(mdp) == []
        assert mdp.n_states == small_net.n_states
        for state in range(mdp.n_states):
            reachable = set(np.flatnonzero(mdp.transition[state].sum(axis=0)))
            assert reachable == set(small_net.successors(state))

    def test_save_and_load(self, small_net, tmp_path):
        path = save_network(small_net, tmp_path / 'network.json')
        assert load_network(path) == small_net

    def test_load_rejects_unknown_intersection(self):
        payload = path_network(2).to_dict()
        payload['segments'][1]['v'] = 99
        with pytest.raises(ValueError, match="unknown intersection"):
            RoadNetwork.from_dict(payload)


# ============================================================================
# DRIVERS
# ============================================================================

class TestPickupQuality:
    """Test planted pickup quality."""

    def test_hotspots_have_full_quality(self, small_net):
        pickup = plant_pickup_quality(small_net, 3, seed=1)
        assert len(pickup.hotspots) == 3
        np.testing.assert_array_equal(pickup.quality[list(pickup.hotspots)], 1.0)
        assert np.all((pickup.quality > 0) & (pickup.quality <= 1))

    def test_neighbour_quality(self):
        net = path_network(4)
        pickup = plant_pickup_quality(net, 4, seed=0)
        assert pickup.quality.max() == 1.0
        single = plant_pickup_quality(net, 1, seed=0)
        hotspot = single.hotspots[0]
        for sid in range(4):
            assert single.quality[sid] == pytest.approx(np.exp(-abs(sid - hotspot) / 2.0))

    def test_no_hotspots(self, small_net):
        assert not np.any(plant_pickup_quality(small_net, 0, seed=1).quality)

    def test_bad_count(self, small_net):
        with pytest.raises(ValueError, match="n_hotspots"):
            plant_pickup_quality(small_net, 31, seed=1)


class TestSimulation:
    """Test the shift simulator."""

    def test_log_shape(self, small_net, small_logs):
        assert [log.driver_id for log in small_logs] == [f'driver_{i:03d}' for i in range(6)]
        for log in small_logs:
            assert log.states.size == 120
            times = np.concatenate([t.timestamps for t in log.trajectories])
            np.testing.assert_array_equal(times, np.arange(120))

    def test_moves_follow_network(self, small_net, small_logs):
        for log in small_logs:
            states = log.states
            for before, after in zip(states[:-1], states[1:]):
                assert after in small_net.successors(int(before))

    def test_trajectories_split_at_drop_off(self, small_logs):
        for log in small_logs:
            for trajectory in log.trajectories:
                # Vacant search followed by at most one trip
                assert np.all(np.diff(trajectory.occupied.astype(int)) >= 0)

    def test_deterministic(self, small_net, small_logs):
        again = simulate_drivers(small_net, 6, seed=4, shift_length=120)
        for first, second in zip(small_logs, again):
            assert first.trajectories == second.trajectories

    def test_no_hotspots_never_picks_up(self, small_net):
        pickup = plant_pickup_quality(small_net, 0, seed=0)
        logs = simulate_drivers(small_net, 3, seed=0, pickup=pickup, shift_length=60)
        assert all(log.vacancy_ratio == 1.0 for log in logs)

    def test_skill_lowers_vacancy(self):
        net = generate_network(200, topology_seed=5)
        pickup = plant_pickup_quality(net, 10, seed=5)
        skilled, unskilled = [], []
        for seed in range(10):
            low, high = simulate_drivers(net, 2, [0.0, 1.0], seed=seed, pickup=pickup)
            unskilled.append(low.vacancy_ratio)
            skilled.append(high.vacancy_ratio)
        assert np.mean(skilled) < np.mean(unskilled)

    def test_bad_skill(self, small_net):
        with pytest.raises(ValueError, match="skills"):
            simulate_drivers(small_net, 2, 1.5)


# ============================================================================
# RANKING
# ============================================================================

class TestRankDrivers:
    """Test vacancy-based ranking."""

    def test_even_split(self):
        logs = [make_log(f'd{i:02d}', 1, length=2 + i) for i in range(30)]
        ranking = rank_drivers(logs, 3, 10)
        counts = np.bincount(list(ranking.labels.values()))
        assert list(counts[1:]) == [10, 10, 10]
        # Shorter logs have the lowest vacancy and form the best rank
        assert ranking.labels['d00'] == 1
        assert ranking.ranks['d00'] == 3
        assert ranking.labels['d29'] == 3
        assert ranking.ranks['d29'] == 1
        assert not ranking.ties

    def test_excess_drivers_excluded(self):
        logs = [make_log(f'd{i}', 9 - i) for i in range(7)]
        ranking = rank_drivers(logs, 3, 2)
        assert ranking.excluded == ['d6']
        assert ranking.ranks == {'d0': 3, 'd1': 3, 'd2': 2, 'd3': 2, 'd4': 1, 'd5': 1}

    def test_tie_on_boundary(self, caplog):
        logs = [make_log('a', 8), make_log('b', 5), make_log('c', 5), make_log('d', 1)]
        ranking = rank_drivers(logs, 2, 2)
        assert ranking.ties
        # Equal vacancy falls back to driver id
        assert ranking.labels['b'] == 1
        assert ranking.labels['c'] == 2
        assert "rank ties" in caplog.text

    def test_one_per_rank(self):
        logs = [make_log(name, n) for name, n in (('x', 2), ('y', 7), ('z', 4))]
        ranking = rank_drivers(logs, 3, 1)
        assert ranking.labels == {'y': 1, 'z': 2, 'x': 3}

    def test_too_few_drivers(self):
        with pytest.raises(ValueError, match="cannot fill"):
            rank_drivers([make_log('a', 1)], 2, 1)


# ============================================================================
# DECOMPOSITION
# ============================================================================

class TestDecompose:
    """Test the cluster decomposition."""

    def test_count_traversals(self):
        net = path_network(4)
        counts = count_traversals(net, [make_log('a', 0, length=3, states=[4, 7, 4])])
        assert counts[3] == 2
        assert sum(counts.values()) == 2

    def test_unbounded_is_single_cluster(self, small_net, small_logs):
        decomposition = decompose(small_net, small_logs, 10 ** 6)
        assert decomposition.clusters == [tuple(range(small_net.n_states))]
        assert decomposition.cut_intersections == []

    def test_busiest_intersection_cut_first(self):
        net = path_network(4)
        logs = [make_log('a', 0, length=3, states=[4, 7, 4])]
        decomposition = decompose(net, logs, 4)
        assert decomposition.cut_intersections == [3, 1]
        assert decomposition.clusters == [(0, 1), (2, 3, 4, 5), (6, 7)]
        assert decomposition.satisfied

    def test_hub_cut_separates_spokes(self):
        positions = {node: (float(node), 0.0) for node in range(6)}
        segments = [Segment(sid, 0, sid + 1, 1.0) for sid in range(5)]
        net = RoadNetwork(positions, segments)
        decomposition = decompose(net, [], 4)
        assert decomposition.cut_intersections == [0]
        # Each spoke keeps its outer intersection
        assert decomposition.clusters == [(2 * i, 2 * i + 1) for i in range(5)]

    def test_fully_cut_segment_is_own_cluster(self):
        decomposition = decompose(path_network(3), [], 2)
        assert decomposition.cut_intersections == [1, 2]
        assert decomposition.clusters == [(0, 1), (2, 3), (4, 5)]
        assert decomposition.uncovered_states(6).size == 0

    def test_respects_bound(self):
        net = generate_network(150, topology_seed=8)
        logs = simulate_drivers(net, 4, seed=1, shift_length=100)
        decomposition = decompose(net, logs, 130)
        assert decomposition.satisfied
        assert max(decomposition.cluster_sizes) <= 130
        covered = sorted(s for cluster in decomposition.clusters for s in cluster)
        assert covered == list(range(net.n_states))

    def test_bad_bound(self, small_net):
        with pytest.raises(ValueError, match="max_dim"):
            decompose(small_net, [], 1)


# ============================================================================
# CITY SOLVE
# ============================================================================

class TestSolveCity:
    """Test per-cluster solving and recombination."""

    def test_driver_mu_uses_search_prefix(self):
        trajectory = Trajectory([0, 1, 2], [False, True, True], [0, 1, 2])
        mu = driver_mu(DriverLog('a', 0.0, [trajectory]), FeatureMap.lossless(4), 0.5)
        np.testing.assert_allclose(mu, [1.0, 0.0, 0.0, 0.0])

    def test_driver_mu_without_search(self):
        trajectory = Trajectory([0, 1], [True, True], [0, 1])
        mu = driver_mu(DriverLog('a', 0.0, [trajectory]), FeatureMap.lossless(2), 0.5)
        np.testing.assert_array_equal(mu, [0.0, 0.0])

    def test_restriction_consistency(self, small_net, small_logs):
        ranking = rank_drivers(small_logs, 3, 2)
        decomposition = decompose(small_net, small_logs, 20)
        fmap = FeatureMap.lossless(small_net.n_states)
        by_id = {log.driver_id: log for log in small_logs}
        full_mu = {d: driver_mu(by_id[d], fmap, 0.9) for d in ranking.ranks}
        # A dropped cluster leaves its states uncovered
        partial = Decomposition(decomposition.clusters[1:], decomposition.cut_intersections,
                                decomposition.max_dim)
        for split in (decomposition, partial):
            mass = {d: 0.0 for d in ranking.ranks}
            for states in split.clusters:
                for mu in restrict_to_cluster(full_mu, ranking, states):
                    mass[mu.source_id] += mu.vector.sum()
            uncovered = split.uncovered_states(small_net.n_states)
            for driver, vector in full_mu.items():
                assert mass[driver] + vector[uncovered].sum() == pytest.approx(vector.sum(),
                                                                               abs=1e-9)

    def test_restriction_keeps_discounting(self):
        full_mu = {'a': np.array([1.0, 0.5, 0.25, 0.125]), 'b': np.zeros(4)}
        ranking = DriverRanking({'a': 2, 'b': 1}, {'a': 1, 'b': 2}, {'a': 0.1, 'b': 0.9}, [])
        restricted = restrict_to_cluster(full_mu, ranking, (2, 3))
        assert [mu.source_id for mu in restricted] == ['a', 'b']
        np.testing.assert_array_equal(restricted[0].vector, [0.25, 0.125])
        assert restricted[0].rank == 2

    def test_spread_slack_constant(self):
        even = DriverRanking({'a': 1, 'b': 1, 'c': 2, 'd': 2}, {}, {}, [])
        assert spread_slack_constant(even) == 0.5
        uneven = DriverRanking({'a': 1, 'b': 2, 'c': 2, 'd': 3, 'e': 3, 'f': 3}, {}, {}, [])
        assert spread_slack_constant(uneven) == 1.0

    def test_clusters_weighted_by_margin(self, small_net, small_logs):
        ranking = rank_drivers(small_logs, 3, 2)
        solution = solve_city(small_net, small_logs, ranking, decompose(small_net, small_logs, 20))
        for result in solution.clusters:
            idx = list(result.states)
            if result.degenerate:
                np.testing.assert_array_equal(solution.global_w[idx], 0.0)
                assert solution.flagged[idx].all()
            else:
                expected = -result.solution.objective * result.solution.w
                np.testing.assert_allclose(solution.global_w[idx], expected, atol=1e-12)
                assert result.solution.objective < 0
                assert not solution.flagged[idx].any()

    def test_cluster_order_invariance(self, small_net, small_logs):
        ranking = rank_drivers(small_logs, 3, 2)
        decomposition = decompose(small_net, small_logs, 20)
        forward = solve_city(small_net, small_logs, ranking, decomposition)
        reordered = Decomposition(list(reversed(decomposition.clusters)),
                                  decomposition.cut_intersections, decomposition.max_dim)
        backward = solve_city(small_net, small_logs, ranking, reordered)
        np.testing.assert_allclose(forward.global_w, backward.global_w, atol=1e-12)
        np.testing.assert_array_equal(forward.flagged, backward.flagged)

    def test_unvisited_cluster_is_flagged(self):
        net = path_network(8)
        logs = [make_log(f'd{i}', i, length=4, states=[0, 1, 0, 1]) for i in range(4)]
        ranking = rank_drivers(logs, 2, 2)
        decomposition = Decomposition([(0, 1, 2, 3), (10, 11, 12, 13)], [], 8)
        solution = solve_city(net, logs, ranking, decomposition)
        unvisited = solution.clusters[1]
        assert unvisited.degenerate
        assert solution.flagged[[10, 11, 12, 13]].all()
        np.testing.assert_array_equal(solution.global_w[[10, 11, 12, 13]], 0.0)
        # States outside every cluster keep w = 0 and carry no estimate
        assert not np.any(solution.global_w[4:10])
        assert solution.flagged[4:10].all()

    def test_missing_logs(self, small_net, small_logs):
        ranking = rank_drivers(small_logs, 3, 2)
        with pytest.raises(ValueError, match="without logs"):
            solve_city(small_net, small_logs[:3], ranking, decompose(small_net, small_logs, 20))

    def test_segment_value_table(self):
        values = np.array([1.0, 2.0, 5.0, 3.0])
        flagged = np.array([False, True, False, False])
        table = segment_value_table(values, flagged)
        assert list(table['orientation']) == ['backward', 'forward']
        assert list(table['value']) == [2.0, 5.0]
        assert list(table['flagged']) == [True, False]


@pytest.fixture(scope='module')
def small_city_config():
    return CityConfig(n_segments=40, n_drivers=6, k=3, per_rank=2, max_dim=40,
                      shift_length=120)


class TestRunCity:
    """Test the pipeline on a small city."""

    def test_outputs(self, small_city_config, tmp_path):
        report = run_city(small_city_config, out_dir=tmp_path)
        assert report.n_states == 80
        assert all(size <= 40 for size in report.cluster_sizes)
        assert len(report.rank_labels) == 6
        for name in ('network.json', 'trajectories.csv', 'ranking.csv', 'global_solution.json',
                     'segment_values.csv', 'expert_features.csv', 'city_report.json'):
            assert (tmp_path / name).exists()
        records = read_trajectory_csv(tmp_path / 'trajectories.csv')
        assert sorted(records) == [f'driver_{i:03d}' for i in range(6)]

    def test_invalid_config(self):
        with pytest.raises(ValueError, match="invalid city config"):
            run_city(CityConfig(n_drivers=5))

    def test_nonpositive_slack_constant(self):
        with pytest.raises(ValueError, match="C must be positive"):
            run_city(CityConfig(C=0.0))

    def test_missing_output_directory(self, small_city_config, tmp_path):
        with pytest.raises(FileNotFoundError):
            run_city(small_city_config, out_dir=tmp_path / 'absent')


@pytest.fixture(scope='module')
def default_city(tmp_path_factory):
    out = tmp_path_factory.mktemp('default_city')
    return out, run_city(CityConfig(), out_dir=out)


@pytest.mark.slow
@pytest.mark.integration
class TestDefaultCity:
    """Default synthetic city: recovery quality and reproducibility."""

    def test_recovers_pickup_quality(self, default_city):
        _, report = default_city
        assert report.spearman > 0.5

    def test_clusters_within_bound(self, default_city):
        _, report = default_city
        assert report.decomposition_satisfied
        assert max(report.cluster_sizes) <= 130
        assert sum(report.cluster_sizes) == report.n_states

    def test_rerun_is_identical(self, default_city, tmp_path):
        first, _ = default_city
        run_city(CityConfig(), out_dir=tmp_path)
        names = sorted(p.name for p in first.iterdir())
        match, mismatch, errors = filecmp.cmpfiles(first, tmp_path, names, shallow=False)
        assert mismatch == [] and errors == []
        assert len(match) == 7
