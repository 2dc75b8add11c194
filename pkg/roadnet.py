"""
Road Network Reward Recovery
============================

Desk-scale city pipeline on synthetic data:
- Grid-with-diagonals road network; each segment yields two oriented states
  (state 2*i runs u -> v, state 2*i + 1 runs v -> u)
- Planted pickup hotspots and a taxi shift simulator whose drivers steer
  towards good pickup areas in proportion to their skill
- Driver ranking by the share of time spent vacant
- Decomposition into clusters of bounded size by cutting the most
  traversed intersections
- Independent sum-of-margins solves per cluster, recombined into a global
  reward weighted by each cluster's margin, and the resulting value map
  per segment

Usage:
    from roadnet import CityConfig, run_city
    report = run_city(CityConfig(), out_dir="city_out")
"""

import logging
from collections import Counter
from dataclasses import asdict, dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import networkx as nx
import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy.stats import spearmanr

from features import FeatureMap, Mu, Trajectory, empirical_mu
from file_formats import read_json, write_json, write_table, write_trajectory_csv
from mdp_core import Mdp, ValueFunction, optimal_policy
from ordinal_margin import (RankedDataset, RankSolution, SolverConvergenceError,
                            solve_sum_of_margins)

logger = logging.getLogger('RankIRL.RoadNet')

ORIENTATIONS = ('forward', 'backward')


# ============================================================================
# NETWORK
# ============================================================================

@dataclass(frozen=True)
class Segment:
    segment_id: int
    u: int
    v: int
    length: float


@dataclass
class RoadNetwork:
    """Undirected road segments between intersections."""
    positions: Dict[int, Tuple[float, float]]
    segments: List[Segment]
    traversal_counts: Dict[int, int] = field(default_factory=dict)

    @property
    def n_segments(self) -> int:
        return len(self.segments)

    @property
    def n_states(self) -> int:
        return 2 * len(self.segments)

    @property
    def intersections(self) -> List[int]:
        return sorted(self.positions)

    @cached_property
    def incident(self) -> Dict[int, List[int]]:
        """Segment ids touching each intersection."""
        table: Dict[int, List[int]] = {node: [] for node in self.positions}
        for seg in self.segments:
            table[seg.u].append(seg.segment_id)
            table[seg.v].append(seg.segment_id)
        return {node: sorted(ids) for node, ids in table.items()}

    @cached_property
    def successor_table(self) -> List[List[int]]:
        return [self._successors(state) for state in range(self.n_states)]

    def head(self, state: int) -> int:
        seg = self.segments[state // 2]
        return seg.v if state % 2 == 0 else seg.u

    def tail(self, state: int) -> int:
        seg = self.segments[state // 2]
        return seg.u if state % 2 == 0 else seg.v

    def _successors(self, state: int) -> List[int]:
        node = self.head(state)
        leaving = []
        for sid in self.incident[node]:
            seg = self.segments[sid]
            leaving.append(2 * sid if seg.u == node else 2 * sid + 1)
        return sorted(leaving)

    def successors(self, state: int) -> List[int]:
        """Oriented segments leaving the head of ``state``, U-turn included."""
        return self.successor_table[state]

    def graph(self) -> nx.Graph:
        g = nx.Graph()
        g.add_nodes_from(self.positions)
        for seg in self.segments:
            g.add_edge(seg.u, seg.v, segment_id=seg.segment_id, length=seg.length)
        return g

    def segment_graph(self) -> nx.Graph:
        """Segments as nodes, adjacent when they share an intersection."""
        g = nx.Graph()
        g.add_nodes_from(range(self.n_segments))
        for ids in self.incident.values():
            for i, first in enumerate(ids):
                for second in ids[i + 1:]:
                    g.add_edge(first, second)
        return g

    def is_connected(self) -> bool:
        return nx.is_connected(self.graph())

    def with_traversal_counts(self, counts: Dict[int, int]) -> 'RoadNetwork':
        return RoadNetwork(dict(self.positions), list(self.segments), dict(counts))

    def to_dict(self) -> Dict:
        return {
            'intersections': [
                {'id': node, 'x': self.positions[node][0], 'y': self.positions[node][1]}
                for node in self.intersections
            ],
            'segments': [asdict(seg) for seg in self.segments],
            'traversal_counts': {str(node): count
                                 for node, count in sorted(self.traversal_counts.items())},
        }

    @classmethod
    def from_dict(cls, payload: Dict) -> 'RoadNetwork':
        try:
            positions = {int(item['id']): (float(item['x']), float(item['y']))
                         for item in payload['intersections']}
            segments = [Segment(int(item['segment_id']), int(item['u']), int(item['v']),
                                float(item['length']))
                        for item in payload['segments']]
        except (KeyError, TypeError) as error:
            raise ValueError(f"malformed network description: {error}") from error
        for position, seg in enumerate(segments):
            if seg.segment_id != position:
                raise ValueError(f"segment ids must be 0..n-1 in order, found {seg.segment_id}")
            if seg.u not in positions or seg.v not in positions:
                raise ValueError(f"segment {seg.segment_id} references an unknown intersection")
        counts = {int(node): int(count)
                  for node, count in payload.get('traversal_counts', {}).items()}
        return cls(positions, segments, counts)

    def __eq__(self, other) -> bool:
        if not isinstance(other, RoadNetwork):
            return NotImplemented
        return (self.positions == other.positions and self.segments == other.segments
                and self.traversal_counts == other.traversal_counts)


def save_network(net: RoadNetwork, path: Union[str, Path]) -> Path:
    return write_json(net.to_dict(), path)


def load_network(path: Union[str, Path]) -> RoadNetwork:
    return RoadNetwork.from_dict(read_json(path))


def _grid_side(n_segments: int) -> int:
    side = 2
    while (3 * side - 1) * (side - 1) < n_segments:
        side += 1
    return side


def generate_network(n_segments: int, topology_seed: int) -> RoadNetwork:
    """
    Connected grid-with-diagonals network with exactly ``n_segments`` segments.

    A random spanning tree of the smallest large-enough square grid
    guarantees connectivity; further grid edges and one diagonal per cell
    are added in random order until the count is reached.
    """
    if n_segments < 10:
        raise ValueError(f"n_segments must be >= 10, got {n_segments}")
    rng = np.random.default_rng(topology_seed)
    side = _grid_side(n_segments)

    def node_id(row: int, col: int) -> int:
        return row * side + col

    grid = nx.Graph()
    for row in range(side):
        for col in range(side):
            if col + 1 < side:
                grid.add_edge(node_id(row, col), node_id(row, col + 1))
            if row + 1 < side:
                grid.add_edge(node_id(row, col), node_id(row + 1, col))
    grid_edges = sorted(tuple(sorted(edge)) for edge in grid.edges())
    for (u, v), weight in zip(grid_edges, rng.random(len(grid_edges))):
        grid[u][v]['weight'] = weight
    tree = sorted(tuple(sorted(edge)) for edge in nx.minimum_spanning_tree(grid).edges())

    diagonals = []
    for row in range(side - 1):
        for col in range(side - 1):
            if rng.random() < 0.5:
                diagonals.append((node_id(row, col), node_id(row + 1, col + 1)))
            else:
                diagonals.append((node_id(row, col + 1), node_id(row + 1, col)))
    tree_set = set(tree)
    extras = [edge for edge in grid_edges if edge not in tree_set]
    extras += [tuple(sorted(edge)) for edge in diagonals]
    extras = [extras[i] for i in rng.permutation(len(extras))]

    chosen = sorted(tree + extras[:n_segments - len(tree)])
    positions = {node_id(row, col): (float(col), float(row))
                 for row in range(side) for col in range(side)}
    jitter = rng.uniform(1.0, 1.3, size=len(chosen))
    segments = []
    for sid, ((u, v), factor) in enumerate(zip(chosen, jitter)):
        (x1, y1), (x2, y2) = positions[u], positions[v]
        segments.append(Segment(sid, u, v, float(np.hypot(x2 - x1, y2 - y1) * factor)))

    net = RoadNetwork(positions, segments)
    logger.info(f"Generated network: {net.n_segments} segments, {len(positions)} intersections")
    return net


def to_network_mdp(net: RoadNetwork, gamma: float) -> Mdp:
    """
    Deterministic turn-choice MDP over oriented segments.

    Action j at a state moves to its j-th successor; states with fewer
    successors than the maximum reuse them cyclically.
    """
    table = net.successor_table
    n_actions = max(len(options) for options in table)
    transition = np.zeros((net.n_states, n_actions, net.n_states))
    for state, options in enumerate(table):
        for action in range(n_actions):
            transition[state, action, options[action % len(options)]] = 1.0
    return Mdp(transition, gamma)


# ============================================================================
# DRIVERS
# ============================================================================

@dataclass(frozen=True)
class PickupField:
    """Planted pickup quality per segment in [0, 1]."""
    hotspots: Tuple[int, ...]
    quality: np.ndarray


def plant_pickup_quality(net: RoadNetwork, n_hotspots: int, seed: int) -> PickupField:
    """Quality = max over hotspots of exp(-hops / 2) on the segment adjacency graph."""
    if n_hotspots < 0 or n_hotspots > net.n_segments:
        raise ValueError(f"n_hotspots must lie in [0, {net.n_segments}], got {n_hotspots}")
    rng = np.random.default_rng([seed, 1])
    hotspots = tuple(sorted(int(h) for h in rng.choice(net.n_segments, n_hotspots,
                                                       replace=False)))
    quality = np.zeros(net.n_segments)
    graph = net.segment_graph()
    for hotspot in hotspots:
        for sid, hops in nx.single_source_shortest_path_length(graph, hotspot).items():
            quality[sid] = max(quality[sid], np.exp(-hops / 2.0))
    return PickupField(hotspots, quality)


@dataclass
class DriverLog:
    """One shift of a driver, split into trajectories at drop-offs."""
    driver_id: str
    skill: float
    trajectories: List[Trajectory]

    @property
    def vacancy_ratio(self) -> float:
        occupied = np.concatenate([t.occupied for t in self.trajectories])
        return float(1.0 - occupied.mean())

    @property
    def states(self) -> np.ndarray:
        return np.concatenate([t.states for t in self.trajectories])


def simulate_drivers(net: RoadNetwork, n_drivers: int,
                     skill_profile: Union[float, Sequence[float], None] = None,
                     seed: int = 0, pickup: Optional[PickupField] = None,
                     shift_length: int = 480, pickup_scale: float = 0.5,
                     steering: float = 6.0) -> List[DriverLog]:
    """
    Simulate one shift per driver, one step per minute.

    A vacant driver picks up on the current segment with probability
    ``pickup_scale * quality``; otherwise it moves to a successor chosen
    with weight exp(steering * skill * quality). A trip lasts 5 to 15
    uniformly random steps. Trajectories restart after every drop-off.

    Args:
        net: Road network
        n_drivers: Number of drivers
        skill_profile: One skill in [0, 1] per driver, a shared skill, or
            None for evenly spread skills
        seed: Seed; each driver draws from its own stream
        pickup: Planted quality, a single hotspot if None

    Returns:
        One DriverLog per driver, ids driver_000, driver_001, ...
    """
    if n_drivers < 1:
        raise ValueError("n_drivers must be at least 1")
    if skill_profile is None:
        skills = np.linspace(0.0, 1.0, n_drivers)
    else:
        skills = np.broadcast_to(np.asarray(skill_profile, dtype=float), (n_drivers,))
    if np.any(skills < 0) or np.any(skills > 1):
        raise ValueError("skills must lie in [0, 1]")
    if pickup is None:
        pickup = plant_pickup_quality(net, 1, seed)

    quality = pickup.quality[np.arange(net.n_states) // 2]
    table = net.successor_table
    logs = []
    for index in range(n_drivers):
        rng = np.random.default_rng([seed, 2, index])
        skill = float(skills[index])
        state = int(rng.integers(net.n_states))
        occupied = False
        remaining = 0
        trajectories = []
        current: Dict[str, list] = {'states': [], 'occupied': [], 'timestamps': []}

        def close():
            if current['states']:
                trajectories.append(Trajectory(**current))
            for values in current.values():
                values.clear()

        for minute in range(shift_length):
            if not occupied and current['occupied'] and current['occupied'][-1]:
                close()
            current['states'].append(state)
            current['occupied'].append(occupied)
            current['timestamps'].append(minute)

            options = table[state]
            if occupied:
                remaining -= 1
                occupied = remaining > 0
                state = options[int(rng.integers(len(options)))]
            elif rng.random() < pickup_scale * quality[state]:
                occupied = True
                remaining = int(rng.integers(5, 16))
                state = options[int(rng.integers(len(options)))]
            else:
                weights = np.exp(steering * skill * quality[options])
                state = options[int(rng.choice(len(options), p=weights / weights.sum()))]
        close()
        logs.append(DriverLog(f'driver_{index:03d}', skill, trajectories))

    logger.info(f"Simulated {n_drivers} drivers over {shift_length} steps")
    return logs


def logs_from_trajectories(records: Dict[str, List[Trajectory]],
                           skills: Optional[Dict[str, float]] = None) -> List[DriverLog]:
    skills = skills or {}
    return [DriverLog(driver, float(skills.get(driver, np.nan)), trajectories)
            for driver, trajectories in sorted(records.items())]


@dataclass
class DriverRanking:
    """Internal ranks (k = best) and user labels (1 = best) of selected drivers."""
    ranks: Dict[str, int]
    labels: Dict[str, int]
    vacancy: Dict[str, float]
    excluded: List[str]
    ties: bool = False


def rank_drivers(logs: Sequence[DriverLog], k: int, per_rank: int) -> DriverRanking:
    """Lowest vacancy first; the first ``per_rank`` drivers form the best rank."""
    if k < 2 or per_rank < 1:
        raise ValueError("need k >= 2 and per_rank >= 1")
    if len(logs) < k * per_rank:
        raise ValueError(f"{len(logs)} drivers cannot fill {k} ranks of {per_rank}")

    vacancy = {log.driver_id: log.vacancy_ratio for log in logs}
    order = sorted(vacancy, key=lambda driver: (vacancy[driver], driver))
    selected = order[:k * per_rank]

    ranks, labels = {}, {}
    for position, driver in enumerate(selected):
        label = position // per_rank + 1
        labels[driver] = label
        ranks[driver] = k + 1 - label

    boundaries = [per_rank * i for i in range(1, k)]
    if len(order) > len(selected):
        boundaries.append(len(selected))
    ties = any(vacancy[order[i - 1]] == vacancy[order[i]] for i in boundaries)
    if ties:
        logger.warning("rank ties: equal vacancy ratios straddle a rank boundary")

    return DriverRanking(ranks, labels, {d: vacancy[d] for d in selected},
                         order[k * per_rank:], ties)


# ============================================================================
# DECOMPOSITION
# ============================================================================

def count_traversals(net: RoadNetwork, logs: Sequence[DriverLog]) -> Dict[int, int]:
    """How often drivers pass through each intersection."""
    counts = {node: 0 for node in net.positions}
    for log in logs:
        states = log.states
        for state in states[:-1]:
            counts[net.head(int(state))] += 1
    return counts


@dataclass
class Decomposition:
    """Clusters of oriented-segment states, each at most ``max_dim`` states."""
    clusters: List[Tuple[int, ...]]
    cut_intersections: List[int]
    max_dim: int
    traversal_counts: Dict[int, int] = field(default_factory=dict)
    satisfied: bool = True

    @property
    def cluster_sizes(self) -> List[int]:
        return [len(cluster) for cluster in self.clusters]

    def uncovered_states(self, n_states: int) -> np.ndarray:
        """States outside every cluster."""
        covered = np.zeros(n_states, dtype=bool)
        for cluster in self.clusters:
            covered[list(cluster)] = True
        return np.flatnonzero(~covered)


def _segment_components(net: RoadNetwork, cut: set) -> List[List[int]]:
    """
    Segments joined through non-cut intersections.

    A segment whose ends are all cut forms a component of its own.
    """
    graph = nx.Graph()
    graph.add_nodes_from(('segment', sid) for sid in range(net.n_segments))
    for seg in net.segments:
        for node in (seg.u, seg.v):
            if node not in cut:
                graph.add_edge(('segment', seg.segment_id), ('node', node))
    return sorted(sorted(item[1] for item in component if item[0] == 'segment')
                  for component in nx.connected_components(graph))


def decompose(net: RoadNetwork, logs: Sequence[DriverLog], max_dim: int) -> Decomposition:
    """
    Cut the most traversed intersections until every cluster fits ``max_dim``.

    Only intersections inside oversized clusters are cut, highest traversal
    count first, ties to the lowest intersection id. Intersections carry no
    states, so the clusters always partition the full state space.
    """
    if max_dim < 2:
        raise ValueError(f"max_dim must be >= 2, got {max_dim}")
    counts = count_traversals(net, logs)
    cut: List[int] = []
    satisfied = True
    while True:
        components = _segment_components(net, set(cut))
        oversized = [c for c in components if 2 * len(c) > max_dim]
        if not oversized:
            break
        candidates = set()
        for component in oversized:
            members = set(component)
            for sid in component:
                seg = net.segments[sid]
                for node in (seg.u, seg.v):
                    inside = sum(1 for other in net.incident[node] if other in members)
                    if node not in cut and inside >= 2:
                        candidates.add(node)
        if not candidates:
            satisfied = False
            logger.warning(f"Cannot split clusters below {max_dim} states; keeping best effort")
            break
        node = min(candidates, key=lambda v: (-counts[v], v))
        cut.append(node)

    clusters = [tuple(s for sid in component for s in (2 * sid, 2 * sid + 1))
                for component in components]
    logger.info(
        f"Decomposed {net.n_states} states into {len(clusters)} clusters "
        f"(largest {max((len(c) for c in clusters), default=0)}) with {len(cut)} cuts"
    )
    return Decomposition(clusters, cut, max_dim, counts, satisfied)


# ============================================================================
# CITY SOLVE
# ============================================================================

def driver_mu(log: DriverLog, fmap: FeatureMap, gamma: float) -> np.ndarray:
    """Feature expectations of the vacant search stretch of every trajectory."""
    searches = [p for p in (t.search_prefix() for t in log.trajectories) if p is not None]
    if not searches:
        return np.zeros(fmap.d)
    return empirical_mu(searches, fmap, gamma)


@dataclass
class ClusterResult:
    index: int
    states: Tuple[int, ...]
    solution: Optional[RankSolution] = None
    error: Optional[str] = None

    @property
    def degenerate(self) -> bool:
        return self.solution is None or self.solution.degenerate


@dataclass
class CitySolution:
    global_w: np.ndarray
    clusters: List[ClusterResult]
    value_function: ValueFunction
    flagged: np.ndarray
    segment_values: pd.DataFrame

    def to_dict(self) -> Dict:
        return {
            'w': self.global_w.tolist(),
            'flagged_states': np.flatnonzero(self.flagged).tolist(),
            'clusters': [
                {
                    'index': c.index,
                    'states': list(c.states),
                    'degenerate': c.degenerate,
                    'error': c.error,
                    'solution': None if c.solution is None else c.solution.to_dict(),
                }
                for c in self.clusters
            ],
        }


def spread_slack_constant(ranking: DriverRanking) -> float:
    """Smallest C that keeps every end rank bounded: 1 / size of the smaller end rank."""
    sizes = Counter(ranking.ranks.values())
    return 1.0 / min(sizes[min(sizes)], sizes[max(sizes)])


def restrict_to_cluster(full_mu: Dict[str, np.ndarray], ranking: DriverRanking,
                        states: Sequence[int]) -> List[Mu]:
    """Ranked feature expectations on one cluster's states, no re-discounting."""
    idx = np.asarray(states, dtype=int)
    return [Mu(full_mu[driver][idx], ranking.ranks[driver], driver)
            for driver in sorted(ranking.ranks)]


def _solve_cluster(index: int, states: Tuple[int, ...], mus: List[Mu], C: float,
                   tol: float) -> ClusterResult:
    try:
        solution = solve_sum_of_margins(RankedDataset(tuple(mus), C), tol)
    except (ValueError, SolverConvergenceError) as error:
        logger.exception(f"Cluster {index} failed")
        return ClusterResult(index, states, None, str(error))
    return ClusterResult(index, states, solution)


def solve_city(net: RoadNetwork, logs: Sequence[DriverLog], ranking: DriverRanking,
               decomposition: Decomposition, gamma: float = 0.9, C: Optional[float] = None,
               tol: float = 1e-8, n_jobs: int = 1,
               out_dir: Optional[Union[str, Path]] = None) -> CitySolution:
    """
    Solve every cluster independently and recombine.

    Each ranked driver's feature expectations are restricted to a cluster's
    states without re-discounting. C defaults to spread_slack_constant(ranking).
    A cluster's unit-norm w enters the global reward scaled by the margin sum
    it achieved. States outside every cluster and states of degenerate or
    failed clusters keep w = 0 and are flagged.

    Returns:
        CitySolution with the global w, per-cluster results, the value
        function of the network MDP under reward w, and per-segment values
    """
    fmap = FeatureMap.lossless(net.n_states)
    by_id = {log.driver_id: log for log in logs}
    missing = sorted(set(ranking.ranks) - set(by_id))
    if missing:
        raise ValueError(f"ranked drivers without logs: {missing}")
    if C is None:
        C = spread_slack_constant(ranking)
    full_mu = {driver: driver_mu(by_id[driver], fmap, gamma) for driver in sorted(ranking.ranks)}

    jobs = [delayed(_solve_cluster)(index, states, restrict_to_cluster(full_mu, ranking, states),
                                    C, tol)
            for index, states in enumerate(decomposition.clusters)]
    results = Parallel(n_jobs=n_jobs)(jobs)

    global_w = np.zeros(net.n_states)
    flagged = np.zeros(net.n_states, dtype=bool)
    flagged[decomposition.uncovered_states(net.n_states)] = True
    for result in results:
        idx = np.array(result.states)
        if result.degenerate:
            flagged[idx] = True
        else:
            global_w[idx] = -result.solution.objective * result.solution.w
    n_degenerate = sum(result.degenerate for result in results)
    logger.info(f"Solved {len(results)} clusters ({n_degenerate} degenerate or failed)")

    mdp = to_network_mdp(net, gamma)
    _, values = optimal_policy(mdp, global_w)
    solution = CitySolution(global_w, results, values, flagged,
                            segment_value_table(values.values, flagged))
    if out_dir is not None:
        out = Path(out_dir)
        write_json(solution.to_dict(), out / 'global_solution.json')
        write_table(solution.segment_values, out / 'segment_values.csv')
    return solution


def _best_orientation(per_state: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    pairs = np.asarray(per_state, dtype=float).reshape(-1, 2)
    choice = (pairs[:, 1] > pairs[:, 0]).astype(int)
    return choice, pairs[np.arange(pairs.shape[0]), choice]


def segment_value_table(values: np.ndarray, flagged: np.ndarray) -> pd.DataFrame:
    """Per segment, the orientation with the higher value."""
    choice, best = _best_orientation(values)
    chosen_states = 2 * np.arange(choice.size) + choice
    return pd.DataFrame({
        'segment_id': np.arange(choice.size),
        'orientation': [ORIENTATIONS[c] for c in choice],
        'value': best,
        'flagged': flagged[chosen_states],
    })


# ============================================================================
# PIPELINE
# ============================================================================

@dataclass
class CityConfig:
    n_segments: int = 200
    n_drivers: int = 30
    k: int = 3
    per_rank: int = 10
    max_dim: int = 130
    seed: int = 7
    gamma: float = 0.9
    C: Optional[float] = None
    n_hotspots: int = 1
    shift_length: int = 1440
    pickup_scale: float = 0.5
    steering: float = 6.0
    tol: float = 1e-8
    n_jobs: int = 1
    network_path: Optional[str] = None

    def validate(self) -> List[str]:
        errors = []
        if self.network_path is None and self.n_segments < 10:
            errors.append("n_segments must be >= 10")
        if self.n_drivers < self.k * self.per_rank:
            errors.append(f"{self.n_drivers} drivers cannot fill {self.k} ranks of {self.per_rank}")
        if self.max_dim < 2:
            errors.append("max_dim must be >= 2")
        if not 0.0 <= self.gamma < 1.0:
            errors.append("gamma must lie in [0, 1)")
        if self.shift_length < 1:
            errors.append("shift_length must be positive")
        if self.C is not None and self.C <= 0:
            errors.append("C must be positive")
        return errors


@dataclass
class CityReport:
    config: CityConfig
    n_states: int
    hotspots: List[int]
    cluster_sizes: List[int]
    cut_intersections: List[int]
    n_flagged_states: int
    decomposition_satisfied: bool
    rank_ties: bool
    rank_labels: Dict[str, Dict[str, float]]
    degenerate_clusters: List[int]
    failed_clusters: List[int]
    spearman: float

    def to_dict(self) -> Dict:
        return asdict(self)


def run_city(config: CityConfig, out_dir: Optional[Union[str, Path]] = None) -> CityReport:
    """
    Run the synthetic city end to end.

    Writes, when ``out_dir`` is given: network.json, trajectories.csv,
    ranking.csv, global_solution.json, segment_values.csv,
    expert_features.csv and city_report.json.
    """
    errors = config.validate()
    if errors:
        raise ValueError("invalid city config: " + "; ".join(errors))

    if config.network_path is not None:
        net = load_network(config.network_path)
    else:
        net = generate_network(config.n_segments, config.seed)
    if not net.is_connected():
        raise ValueError("road network is not connected")

    pickup = plant_pickup_quality(net, config.n_hotspots, config.seed)
    skills = np.random.default_rng([config.seed, 3]).permutation(
        np.linspace(0.0, 1.0, config.n_drivers))
    logs = simulate_drivers(net, config.n_drivers, skills, config.seed, pickup,
                            config.shift_length, config.pickup_scale, config.steering)
    ranking = rank_drivers(logs, config.k, config.per_rank)
    decomposition = decompose(net, logs, config.max_dim)
    net = net.with_traversal_counts(decomposition.traversal_counts)
    solution = solve_city(net, logs, ranking, decomposition, config.gamma, config.C,
                          config.tol, config.n_jobs)

    rho, _ = spearmanr(solution.segment_values['value'], pickup.quality)
    report = CityReport(
        config=config,
        n_states=net.n_states,
        hotspots=list(pickup.hotspots),
        cluster_sizes=decomposition.cluster_sizes,
        cut_intersections=list(decomposition.cut_intersections),
        n_flagged_states=int(solution.flagged.sum()),
        decomposition_satisfied=decomposition.satisfied,
        rank_ties=ranking.ties,
        rank_labels={d: {'label': ranking.labels[d], 'rank': ranking.ranks[d],
                         'vacancy_ratio': ranking.vacancy[d]} for d in sorted(ranking.ranks)},
        degenerate_clusters=[c.index for c in solution.clusters
                             if c.solution is not None and c.solution.degenerate],
        failed_clusters=[c.index for c in solution.clusters if c.solution is None],
        spearman=float(rho),
    )
    logger.info(f"City pipeline finished: Spearman {report.spearman:.3f}")

    if out_dir is not None:
        write_city_outputs(out_dir, net, logs, ranking, solution, report, config.gamma)
    return report


def write_city_outputs(out_dir: Union[str, Path], net: RoadNetwork, logs: Sequence[DriverLog],
                       ranking: DriverRanking, solution: CitySolution, report: CityReport,
                       gamma: float) -> None:
    out = Path(out_dir)
    if not out.is_dir():
        raise FileNotFoundError(f"output directory does not exist: {out}")

    save_network(net, out / 'network.json')
    write_trajectory_csv({log.driver_id: log.trajectories for log in logs},
                         out / 'trajectories.csv')
    write_table(pd.DataFrame({
        'driver_id': [log.driver_id for log in logs],
        'skill': [log.skill for log in logs],
        'vacancy_ratio': [log.vacancy_ratio for log in logs],
        'label': [ranking.labels.get(log.driver_id, 0) for log in logs],
        'rank': [ranking.ranks.get(log.driver_id, 0) for log in logs],
    }), out / 'ranking.csv')
    write_json(solution.to_dict(), out / 'global_solution.json')
    write_table(solution.segment_values, out / 'segment_values.csv')

    fmap = FeatureMap.lossless(net.n_states)
    best_rank = max(ranking.ranks.values())
    experts = [log for log in logs if ranking.ranks.get(log.driver_id) == best_rank]
    mean_mu = np.mean([driver_mu(log, fmap, gamma) for log in experts], axis=0)
    choice, best = _best_orientation(mean_mu)
    write_table(pd.DataFrame({
        'segment_id': np.arange(choice.size),
        'orientation': [ORIENTATIONS[c] for c in choice],
        'mu': best,
    }), out / 'expert_features.csv')

    write_json(report.to_dict(), out / 'city_report.json')
    logger.info(f"Wrote city outputs to {out}")
