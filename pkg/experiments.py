"""
Reproducible Experiments
========================

Seed-controlled experiment programs:
- Four-state counterexample check (an approximate reward that equates a bad
  and a harmless policy while the expert stays optimal)
- Gridworld comparison of the sum-of-margins recovery against max-margin
  apprenticeship learning

Gridworld conventions:
    Rows grow downwards; actions are 0=N, 1=S, 2=E, 3=W.
    Even rows are preferable: every non-goal odd-row cell carries
    ``odd_row_penalty``; the absorbing goal carries ``goal_reward``.
    The defaults are declared experiment parameters, not measured values.
"""

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from joblib import Parallel, delayed

from baseline_al import SAMPLE_MODES, AlTrace, abbeel_max_margin
from file_formats import write_heatmap_csv, write_json
from features import (FeatureMap, InitialDistribution, Mu, empirical_mu, exact_mu, occupancy,
                      sample_trajectories, truncation_horizon)
from mdp_core import Mdp, Policy, build_prop1_mdp, optimal_policy, policy_evaluation
from ordinal_margin import DEFAULT_C, RankedDataset, RankSolution, reward_from_w
from ordinal_margin import solve_sum_of_margins

logger = logging.getLogger('RankIRL.Experiments')

NORTH, SOUTH, EAST, WEST = 0, 1, 2, 3
ACTION_NAMES = ('N', 'S', 'E', 'W')
MOVES = {NORTH: (-1, 0), SOUTH: (1, 0), EAST: (0, 1), WEST: (0, -1)}

DEFAULTS_NOTE = (
    "Gridworld rewards, goal location, discount and slip are declared experiment "
    "defaults; no numeric values were published for them."
)


# ============================================================================
# COUNTEREXAMPLE CHECK
# ============================================================================

@dataclass
class Prop1Report:
    """Values and assertion outcomes of the four-state counterexample."""
    delta: float
    gamma: float
    values: Dict[str, float]
    checks: Dict[str, bool]
    degenerate: bool = False
    notes: List[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.degenerate or all(self.checks.values())

    def to_dict(self) -> Dict:
        payload = asdict(self)
        payload['passed'] = self.passed
        return payload


def run_prop1_check(delta: float = 1.0, gamma: float = 0.9) -> Prop1Report:
    """
    Verify the counterexample for one (delta, gamma).

    Checks that the expert is optimal under both rewards, that the
    approximate reward values pi1 and pi2 equally, and that under the true
    reward pi1 is worse than pi2 by gamma * delta / (1 - gamma).

    Returns:
        Prop1Report; failed checks are report content, not exceptions
    """
    instance = build_prop1_mdp(delta, gamma)
    mdp = instance.mdp
    start = instance.START_STATE

    def value(policy: Policy, reward: np.ndarray) -> float:
        return float(policy_evaluation(mdp, policy, reward).values[start])

    values = {
        'v_pi1_true': value(instance.pi1, instance.true_reward),
        'v_pi2_true': value(instance.pi2, instance.true_reward),
        'v_pi1_approx': value(instance.pi1, instance.approx_reward),
        'v_pi2_approx': value(instance.pi2, instance.approx_reward),
        'v_expert_true': value(instance.expert_policy, instance.true_reward),
        'v_expert_approx': value(instance.expert_policy, instance.approx_reward),
    }
    expert_action = instance.expert_policy.action(start)
    best_true, _ = optimal_policy(mdp, instance.true_reward)
    best_approx, _ = optimal_policy(mdp, instance.approx_reward)
    gap = gamma * delta / (1.0 - gamma)

    checks = {
        'expert_optimal_true': best_true.action(start) == expert_action,
        'expert_optimal_approx': best_approx.action(start) == expert_action,
        'approx_values_equal': abs(values['v_pi1_approx'] - values['v_pi2_approx']) <= 1e-9,
        'true_gap': (values['v_pi1_true'] < values['v_pi2_true']
                     and values['v_pi1_true'] <= values['v_pi2_true'] - gap + 1e-9),
    }
    report = Prop1Report(delta=float(delta), gamma=float(gamma), values=values, checks=checks)
    if gamma == 0.0:
        report.degenerate = True
        report.notes.append("gamma=0 degenerate: every start action has value 0, the strict gap vanishes")

    logger.info(
        f"Counterexample check delta={delta}, gamma={gamma}: "
        f"{'pass' if report.passed else 'FAIL'} {checks}"
    )
    return report


# ============================================================================
# GRIDWORLD
# ============================================================================

@dataclass(frozen=True)
class GridSpec:
    """Gridworld parameters; ``goal_cell`` defaults to the bottom-right corner."""
    size: int = 16
    odd_row_penalty: float = -0.1
    goal_reward: float = 1.0
    goal_cell: Optional[Tuple[int, int]] = None
    gamma: float = 0.95
    slip_prob: float = 0.0

    def __post_init__(self):
        goal = (self.size - 1, self.size - 1) if self.goal_cell is None else self.goal_cell
        object.__setattr__(self, 'goal_cell', (int(goal[0]), int(goal[1])))

    def validate(self) -> List[str]:
        errors = []
        if self.size < 2:
            errors.append(f"size must be >= 2, got {self.size}")
        if not 0.0 <= self.slip_prob < 1.0:
            errors.append(f"slip_prob must lie in [0, 1), got {self.slip_prob}")
        if not self.odd_row_penalty < 0.0 < self.goal_reward:
            errors.append("need odd_row_penalty < 0 < goal_reward")
        if not 0.0 <= self.gamma < 1.0:
            errors.append(f"gamma must lie in [0, 1), got {self.gamma}")
        row, col = self.goal_cell
        if not (0 <= row < self.size and 0 <= col < self.size):
            errors.append(f"goal cell {self.goal_cell} lies outside the grid")
        return errors


@dataclass(frozen=True)
class Gridworld:
    spec: GridSpec
    mdp: Mdp
    fmap: FeatureMap
    true_reward: np.ndarray

    def state(self, row: int, col: int) -> int:
        return row * self.spec.size + col

    def cell(self, state: int) -> Tuple[int, int]:
        return divmod(int(state), self.spec.size)

    @property
    def goal_state(self) -> int:
        return self.state(*self.spec.goal_cell)

    def grid(self, per_state) -> np.ndarray:
        """Reshape a per-state vector to (size, size)."""
        return np.asarray(per_state, dtype=float).reshape(self.spec.size, self.spec.size)


def build_gridworld(spec: GridSpec) -> Gridworld:
    """
    Build the gridworld MDP with lossless features.

    The intended move happens with probability 1 - slip_prob, each other
    move with slip_prob / 3. Moves off the grid stay in place; the goal
    absorbs under every action.
    """
    errors = spec.validate()
    if errors:
        raise ValueError("invalid grid spec: " + "; ".join(errors))

    size = spec.size
    n_states = size * size
    goal = spec.goal_cell[0] * size + spec.goal_cell[1]

    def moved(state: int, action: int) -> int:
        row, col = divmod(state, size)
        d_row, d_col = MOVES[action]
        row = min(max(row + d_row, 0), size - 1)
        col = min(max(col + d_col, 0), size - 1)
        return row * size + col

    transition = np.zeros((n_states, 4, n_states))
    for state in range(n_states):
        if state == goal:
            transition[state, :, state] = 1.0
            continue
        targets = [moved(state, action) for action in range(4)]
        for action in range(4):
            for other in range(4):
                prob = 1.0 - spec.slip_prob if other == action else spec.slip_prob / 3.0
                transition[state, action, targets[other]] += prob

    rows = np.repeat(np.arange(size), size)
    true_reward = np.where(rows % 2 == 1, spec.odd_row_penalty, 0.0)
    true_reward[goal] = spec.goal_reward
    true_reward.setflags(write=False)

    return Gridworld(spec, Mdp(transition, spec.gamma), FeatureMap.lossless(n_states), true_reward)


# ============================================================================
# RANKED DEMONSTRATORS
# ============================================================================

@dataclass(frozen=True)
class RankedPolicy:
    """A demonstrator policy; ``label`` counts from 1 = best, ``rank`` is internal."""
    name: str
    label: int
    rank: int
    policy: Policy


def _toward_parity(grid: Gridworld, row: int, parity: int) -> int:
    """N or S towards the nearest row of ``parity``; ties go towards the goal row."""
    size = grid.spec.size
    options = [(r, action) for r, action in ((row - 1, NORTH), (row + 1, SOUTH))
               if 0 <= r < size and r % 2 == parity]
    if len(options) == 1:
        return options[0][1]
    return NORTH if grid.spec.goal_cell[0] < row else SOUTH


def _scripted_policy(grid: Gridworld, follow_parity: int, direction: int,
                     descend_at_end: bool) -> Policy:
    size = grid.spec.size
    actions = np.zeros(size * size, dtype=int)
    last_col = size - 1 if direction == EAST else 0
    for state in range(size * size):
        if state == grid.goal_state:
            continue
        row, col = grid.cell(state)
        if row % 2 != follow_parity:
            actions[state] = _toward_parity(grid, row, follow_parity)
        elif descend_at_end and col == last_col:
            actions[state] = SOUTH
        else:
            actions[state] = direction
    return Policy(actions)


def rank_policies(grid: Gridworld) -> List[RankedPolicy]:
    """
    The four ranked demonstrators, best first.

    1. The optimal policy under the true reward
    2. Leaves odd rows for the nearest even row, goes right along even rows
       and steps down once at the last column
    3. Leaves even rows for the nearest odd row, goes right along odd rows
       and steps down once at the last column
    4. Leaves even rows for the nearest odd row and goes left along odd rows

    Labels count from 1 = best; internal ranks put the best at index 4.
    """
    expert, _ = optimal_policy(grid.mdp, grid.true_reward)
    policies = [
        ('optimal', expert),
        ('even_rows_right', _scripted_policy(grid, 0, EAST, descend_at_end=True)),
        ('odd_rows_right', _scripted_policy(grid, 1, EAST, descend_at_end=True)),
        ('odd_rows_left', _scripted_policy(grid, 1, WEST, descend_at_end=False)),
    ]
    k = len(policies)
    return [RankedPolicy(name, label, k + 1 - label, policy)
            for label, (name, policy) in enumerate(policies, start=1)]


# ============================================================================
# METRICS
# ============================================================================

def even_odd_preference(reward_grid) -> float:
    """Fraction of column pairs (2i, c), (2i+1, c) where the even cell scores higher."""
    reward_grid = np.asarray(reward_grid, dtype=float)
    n_pairs = reward_grid.shape[0] // 2
    even = reward_grid[0:2 * n_pairs:2]
    odd = reward_grid[1:2 * n_pairs:2]
    return float(np.mean(even > odd))


def performance_ratio(grid: Gridworld, w, d0: InitialDistribution,
                      optimum: Optional[float] = None) -> float:
    """Expected true return of the policy optimal for ``w`` over that of the true optimum."""
    policy, _ = optimal_policy(grid.mdp, reward_from_w(w, grid.fmap))
    achieved = float(d0.probs @ policy_evaluation(grid.mdp, policy, grid.true_reward).values)
    if optimum is None:
        best, _ = optimal_policy(grid.mdp, grid.true_reward)
        optimum = float(d0.probs @ policy_evaluation(grid.mdp, best, grid.true_reward).values)
    if optimum <= 0:
        logger.warning(f"Optimal expected return {optimum:.6g} is not positive; ratio is unreliable")
    return achieved / optimum


def odd_row_occupancy(grid: Gridworld, policy: Policy, d0: InitialDistribution) -> float:
    """Share of discounted occupancy spent on non-goal odd-row cells."""
    x = occupancy(grid.mdp, policy, d0)
    rows = np.repeat(np.arange(grid.spec.size), grid.spec.size)
    mask = rows % 2 == 1
    mask[grid.goal_state] = False
    return float(x[mask].sum() / x.sum())


# ============================================================================
# COMPARISON
# ============================================================================

@dataclass
class ComparisonReport:
    """Sum-of-margins recovery against the apprenticeship-learning baseline."""
    spec: GridSpec
    sample_mode: str
    n_traj: int
    epsilon: float
    rank_labels: Dict[str, Dict[str, int]]
    rankirl_w: np.ndarray
    rankirl_solution: RankSolution
    baseline_traces: Dict[int, AlTrace]
    even_odd_preference: float
    baseline_even_odd_preference: Dict[int, float]
    perf_ratio_rankirl: float
    perf_ratio_baseline: Dict[int, float]
    odd_row_occupancy_rankirl: float
    odd_row_occupancy_baseline: Dict[int, float]

    @property
    def baseline_w(self) -> Dict[int, np.ndarray]:
        return {seed: trace.final_w for seed, trace in self.baseline_traces.items()}

    @property
    def advantage(self) -> float:
        return self.perf_ratio_rankirl - float(np.mean(list(self.perf_ratio_baseline.values())))

    @property
    def baseline_mean_preference(self) -> float:
        return float(np.mean(list(self.baseline_even_odd_preference.values())))

    def to_dict(self) -> Dict:
        return {
            'spec': asdict(self.spec),
            'defaults_note': DEFAULTS_NOTE,
            'sample_mode': self.sample_mode,
            'n_traj': self.n_traj,
            'epsilon': self.epsilon,
            'rank_labels': self.rank_labels,
            'rankirl': {
                'w': self.rankirl_w.tolist(),
                'objective': self.rankirl_solution.objective,
                'margins': self.rankirl_solution.margins.tolist(),
                'degenerate': self.rankirl_solution.degenerate,
                'even_odd_preference': self.even_odd_preference,
                'perf_ratio': self.perf_ratio_rankirl,
                'odd_row_occupancy': self.odd_row_occupancy_rankirl,
            },
            'baseline': {
                str(seed): {
                    'final_w': trace.final_w.tolist(),
                    'converged': trace.converged,
                    'iterations': len(trace.iterations),
                    'even_odd_preference': self.baseline_even_odd_preference[seed],
                    'perf_ratio': self.perf_ratio_baseline[seed],
                    'odd_row_occupancy': self.odd_row_occupancy_baseline[seed],
                }
                for seed, trace in self.baseline_traces.items()
            },
            'baseline_mean_even_odd_preference': self.baseline_mean_preference,
            'advantage': self.advantage,
        }


def _demonstrator_mu(grid: Gridworld, ranked: RankedPolicy, d0: InitialDistribution,
                     sample_mode: str, n_traj: int, seed: int) -> np.ndarray:
    if sample_mode == 'exact':
        return exact_mu(grid.mdp, ranked.policy, grid.fmap, d0)
    horizon = truncation_horizon(grid.mdp.gamma, grid.fmap.max_phi)
    trajectories = sample_trajectories(grid.mdp, ranked.policy, d0, n_traj, horizon,
                                       [seed, ranked.label])
    return empirical_mu(trajectories, grid.fmap, grid.mdp.gamma)


def run_gridworld_comparison(spec: GridSpec, n_baseline_seeds: int = 10,
                             sample_mode: str = 'exact', n_traj: int = 1000, seed: int = 0,
                             epsilon: float = 0.5, max_iter: int = 100, C: float = DEFAULT_C,
                             tol: float = 1e-8, n_jobs: int = 1,
                             out_dir: Optional[str] = None) -> ComparisonReport:
    """
    Compare both recoveries on the ranked gridworld demonstrators.

    Args:
        spec: Gridworld parameters
        n_baseline_seeds: Baseline runs, seeded seed+1 .. seed+n
        sample_mode: 'exact' or 'sampled' feature expectations
        n_traj: Trajectories per estimate in sampled mode
        seed: Base seed for sampling and baseline runs
        epsilon: Baseline stopping margin
        max_iter: Baseline iteration budget
        C: Slack trade-off constant
        tol: Solver tolerance
        n_jobs: Parallel baseline runs (joblib)
        out_dir: If given, report and heatmaps are written there

    Returns:
        ComparisonReport
    """
    if n_baseline_seeds < 1:
        raise ValueError("n_baseline_seeds must be at least 1")
    if sample_mode not in SAMPLE_MODES:
        raise ValueError(f"sample_mode must be one of {SAMPLE_MODES}")

    grid = build_gridworld(spec)
    d0 = InitialDistribution.uniform(grid.mdp.n_states)
    ranked = rank_policies(grid)
    logger.info(f"Built {spec.size}x{spec.size} gridworld with {len(ranked)} ranked demonstrators")

    mus = [Mu(_demonstrator_mu(grid, rp, d0, sample_mode, n_traj, seed), rp.rank, rp.name)
           for rp in ranked]
    solution = solve_sum_of_margins(RankedDataset(tuple(mus), C), tol)
    expert_mu = mus[0].vector

    seeds = [seed + i for i in range(1, n_baseline_seeds + 1)]
    traces = Parallel(n_jobs=n_jobs)(
        delayed(abbeel_max_margin)(grid.mdp, grid.fmap, d0, expert_mu, epsilon, max_iter, s,
                                   sample_mode, n_traj)
        for s in seeds
    )
    baseline = dict(zip(seeds, traces))

    best, _ = optimal_policy(grid.mdp, grid.true_reward)
    optimum = float(d0.probs @ policy_evaluation(grid.mdp, best, grid.true_reward).values)

    def recovered_policy(w: np.ndarray) -> Policy:
        return optimal_policy(grid.mdp, reward_from_w(w, grid.fmap))[0]

    report = ComparisonReport(
        spec=spec,
        sample_mode=sample_mode,
        n_traj=n_traj,
        epsilon=epsilon,
        rank_labels={rp.name: {'label': rp.label, 'rank': rp.rank} for rp in ranked},
        rankirl_w=solution.w,
        rankirl_solution=solution,
        baseline_traces=baseline,
        even_odd_preference=even_odd_preference(grid.grid(reward_from_w(solution.w, grid.fmap))),
        baseline_even_odd_preference={
            s: even_odd_preference(grid.grid(reward_from_w(t.final_w, grid.fmap)))
            for s, t in baseline.items()
        },
        perf_ratio_rankirl=performance_ratio(grid, solution.w, d0, optimum),
        perf_ratio_baseline={s: performance_ratio(grid, t.final_w, d0, optimum)
                             for s, t in baseline.items()},
        odd_row_occupancy_rankirl=odd_row_occupancy(grid, recovered_policy(solution.w), d0),
        odd_row_occupancy_baseline={s: odd_row_occupancy(grid, recovered_policy(t.final_w), d0)
                                    for s, t in baseline.items()},
    )
    logger.info(
        f"Even/odd preference {report.even_odd_preference:.3f} "
        f"(baseline mean {report.baseline_mean_preference:.3f}); "
        f"advantage {report.advantage:.3f}"
    )

    if out_dir is not None:
        write_comparison(report, grid, out_dir)
    return report


def write_comparison(report: ComparisonReport, grid: Gridworld, out_dir: str) -> List[Path]:
    """Write the report JSON, baseline traces and both reward heatmaps."""
    out = Path(out_dir)
    if not out.is_dir():
        raise FileNotFoundError(f"output directory does not exist: {out}")
    first_seed = min(report.baseline_traces)
    paths = [
        write_json(report.to_dict(), out / 'gridworld_report.json'),
        write_json([t.to_dict() for t in report.baseline_traces.values()],
                   out / 'baseline_traces.json'),
        write_heatmap_csv(grid.grid(reward_from_w(report.rankirl_w, grid.fmap)),
                          out / 'rankirl_reward.csv'),
        write_heatmap_csv(grid.grid(reward_from_w(report.baseline_traces[first_seed].final_w,
                                                  grid.fmap)),
                          out / 'baseline_reward.csv'),
    ]
    logger.info(f"Wrote gridworld outputs to {out}")
    return paths
