"""
RankIRL Command Line
====================

Entry point tying the modules together:
- prop1         check the four-state counterexample
- gridworld     compare sum-of-margins recovery with the max-margin baseline
- rank-solve    solve the sum-of-margins program for a feature expectation CSV
- mu            estimate feature expectations from a trajectory file
- city          run the synthetic road-network pipeline
- validate-mdp  report structural problems of an MDP JSON file

Users label ranks with 1 = best. Internally a higher rank index is better;
labels are inverted here and nowhere else, and every output records the
mapping.

Exit codes: 0 success, 1 usage or validation error, 2 I/O error,
3 solver non-convergence.
"""

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from experiments import GridSpec, run_gridworld_comparison, run_prop1_check
from features import FeatureMap, Mu, empirical_mu
from file_formats import (load_mdp, read_features_csv, read_json, read_mu_csv,
                          read_trajectories, read_trajectory_csv, write_json, write_mu_csv,
                          write_solution_json)
from mdp_core import validate_mdp
from ordinal_margin import DEFAULT_C, RankedDataset, SolverConvergenceError, solve_sum_of_margins
from roadnet import CityConfig, driver_mu, logs_from_trajectories, run_city

logger = logging.getLogger('RankIRL.CLI')

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_IO = 2
EXIT_SOLVER = 3

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


def configure_logging(verbose: bool = False) -> None:
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO, format=LOG_FORMAT)


def _header(text: str) -> None:
    print(f"\n{'=' * 70}")
    print(f"  {text}")
    print(f"{'=' * 70}\n")


# ============================================================================
# CONFIGURATION
# ============================================================================

@dataclass
class Prop1Config:
    delta: float = 1.0
    gamma: float = 0.9


@dataclass
class GridworldConfig:
    size: int = 16
    odd_row_penalty: float = -0.1
    goal_reward: float = 1.0
    slip_prob: float = 0.0
    gamma: float = 0.95
    n_baseline_seeds: int = 10
    sample_mode: str = 'exact'
    n_traj: int = 1000
    seed: int = 0
    epsilon: float = 0.5
    max_iter: int = 100
    C: float = DEFAULT_C
    tol: float = 1e-8
    n_jobs: int = 1

    def grid_spec(self) -> GridSpec:
        return GridSpec(size=self.size, odd_row_penalty=self.odd_row_penalty,
                        goal_reward=self.goal_reward, gamma=self.gamma,
                        slip_prob=self.slip_prob)


@dataclass
class RankSolveConfig:
    mu_csv: Optional[str] = None
    C: float = DEFAULT_C
    tol: float = 1e-8
    hard: bool = False
    output: Optional[str] = None


@dataclass
class MuConfig:
    traj_file: Optional[str] = None
    features_file: Optional[str] = None
    lossless: bool = False
    n_states: Optional[int] = None
    mdp_file: Optional[str] = None
    gamma: float = 0.9
    source_id: Optional[str] = None
    rank: int = 1
    output: Optional[str] = None


@dataclass
class ValidateConfig:
    mdp_file: Optional[str] = None


def config_from_args(config_cls, args: argparse.Namespace):
    """Dataclass config from parsed flags; unset flags keep the dataclass default."""
    values = {}
    for item in fields(config_cls):
        value = getattr(args, item.name, None)
        if value is not None:
            values[item.name] = value
    return config_cls(**values)


def config_from_manifest(config_cls, command: str, path: str):
    """Reload the config a previous run recorded in run_config.json."""
    manifest = read_json(path)
    if manifest.get('command') != command:
        raise ValueError(f"manifest {path} was written by {manifest.get('command')!r}, "
                         f"not {command!r}")
    known = {item.name for item in fields(config_cls)}
    unknown = sorted(set(manifest.get('config', {})) - known)
    if unknown:
        raise ValueError(f"manifest {path} has unknown settings {unknown}")
    return config_cls(**manifest['config'])


def write_manifest(command: str, config, out_dir: Path) -> Path:
    return write_json({'command': command, 'config': asdict(config)}, out_dir / 'run_config.json')


# ============================================================================
# RANK LABELS
# ============================================================================

def labels_to_internal(labels: Sequence[int]) -> Tuple[List[int], Dict[str, int]]:
    """
    Invert user labels (1 = best) to internal ranks (k = best).

    Raises:
        ValueError: if some label between 1 and the largest one is unused
    """
    k = max(labels)
    for label in range(1, k + 1):
        if label not in labels:
            raise ValueError(f"rank {label} empty")
    mapping = {str(label): k + 1 - label for label in range(1, k + 1)}
    return [k + 1 - label for label in labels], mapping


# ============================================================================
# COMMANDS
# ============================================================================

def cmd_prop1(config: Prop1Config, out: Optional[Path]) -> int:
    report = run_prop1_check(config.delta, config.gamma)
    _header(f"Counterexample check (delta={config.delta}, gamma={config.gamma})")
    for name, value in report.values.items():
        print(f"  {name:<20} {value:.10g}")
    for name, ok in report.checks.items():
        print(f"  {'✓' if ok else '✗'} {name}")
    for note in report.notes:
        print(f"  note: {note}")
    if out is not None:
        write_json(report.to_dict(), out / 'prop1_report.json')
    return EXIT_OK if report.passed else EXIT_USAGE


def cmd_gridworld(config: GridworldConfig, out: Optional[Path]) -> int:
    report = run_gridworld_comparison(
        config.grid_spec(), n_baseline_seeds=config.n_baseline_seeds,
        sample_mode=config.sample_mode, n_traj=config.n_traj, seed=config.seed,
        epsilon=config.epsilon, max_iter=config.max_iter, C=config.C, tol=config.tol,
        n_jobs=config.n_jobs, out_dir=None if out is None else str(out),
    )
    _header("Gridworld comparison")
    print(f"  Even/odd preference (ranked):   {report.even_odd_preference:.4f}")
    print(f"  Even/odd preference (baseline): {report.baseline_mean_preference:.4f}")
    print(f"  Performance ratio (ranked):     {report.perf_ratio_rankirl:.4f}")
    print(f"  Advantage over baseline mean:   {report.advantage:.4f}")
    return EXIT_OK


def cmd_rank_solve(config: RankSolveConfig, out: Optional[Path]) -> int:
    if config.mu_csv is None:
        raise ValueError("rank-solve needs a feature expectation CSV")
    rows = read_mu_csv(config.mu_csv)
    ranks, mapping = labels_to_internal([mu.rank for mu in rows])
    data = RankedDataset(tuple(mu.relabeled(rank) for mu, rank in zip(rows, ranks)), config.C)
    solution = solve_sum_of_margins(data, config.tol, hard=config.hard)
    extra = {
        'rank_mapping': mapping,
        'labels': {mu.source_id: mu.rank for mu in rows},
        'C': config.C,
        'hard': config.hard,
    }

    _header(f"Sum-of-margins solution ({data.k} ranks, d={data.d})")
    print(f"  objective:  {solution.objective:.10g}")
    print(f"  margins:    {np.round(solution.margins, 10).tolist()}")
    print(f"  degenerate: {solution.degenerate}")

    target = config.output
    if target is None and out is not None:
        target = str(out / 'solution.json')
    if target is not None:
        write_solution_json(solution, target, extra)
    else:
        payload = solution.to_dict()
        payload.update(extra)
        print(json.dumps(payload, indent=2))
    return EXIT_OK


def _mu_feature_map(config: MuConfig) -> FeatureMap:
    if config.features_file is not None:
        return read_features_csv(config.features_file)
    if not config.lossless:
        raise ValueError("mu needs --features or --lossless")
    n_states = config.n_states
    if n_states is None and config.mdp_file is not None:
        n_states = load_mdp(config.mdp_file).n_states
    if n_states is None:
        raise ValueError("--lossless needs --n-states or --mdp")
    return FeatureMap.lossless(n_states)


def cmd_mu(config: MuConfig, out: Optional[Path]) -> int:
    if config.traj_file is None:
        raise ValueError("mu needs a trajectory file")
    fmap = _mu_feature_map(config)
    path = Path(config.traj_file)

    if path.suffix == '.csv':
        logs = logs_from_trajectories(read_trajectory_csv(path))
        mus = [Mu(driver_mu(log, fmap, config.gamma), config.rank, log.driver_id)
               for log in logs]
    else:
        trajectories = read_trajectories(path)
        largest = max(int(t.states.max()) for t in trajectories)
        if largest >= fmap.n_states:
            raise ValueError(f"state {largest} has no features (n_states = {fmap.n_states})")
        source = config.source_id or path.stem
        mus = [Mu(empirical_mu(trajectories, fmap, config.gamma), config.rank, source)]

    _header(f"Feature expectations (gamma={config.gamma}, d={fmap.d})")
    for mu in mus:
        print(f"  {mu.source_id}: {np.round(mu.vector, 10).tolist()}")

    target = config.output
    if target is None and out is not None:
        target = str(out / 'mu.csv')
    if target is not None:
        write_mu_csv(mus, target)
    return EXIT_OK


def cmd_city(config: CityConfig, out: Optional[Path]) -> int:
    report = run_city(config, out)
    _header(f"City pipeline ({report.n_states} states)")
    print(f"  Clusters:        {len(report.cluster_sizes)} (largest {max(report.cluster_sizes)})")
    print(f"  Cut:             {len(report.cut_intersections)} intersections")
    print(f"  No estimate:     {report.n_flagged_states} states")
    print(f"  Degenerate:      {report.degenerate_clusters}")
    print(f"  Failed:          {report.failed_clusters}")
    print(f"  Spearman vs planted quality: {report.spearman:.4f}")
    if report.rank_ties:
        print("  ⚠️  rank ties at a rank boundary")
    return EXIT_OK


def cmd_validate_mdp(config: ValidateConfig, out: Optional[Path]) -> int:
    if config.mdp_file is None:
        raise ValueError("validate-mdp needs an MDP file")
    mdp = load_mdp(config.mdp_file, validate=False)
    violations = validate_mdp(mdp)
    _header(f"MDP check: {config.mdp_file}")
    if violations:
        print(f"❌ ERRORS ({len(violations)}):")
        for violation in violations:
            print(f"  • {violation}")
        return EXIT_USAGE
    print(f"✓ {mdp.n_states} states, {mdp.n_actions} actions, gamma={mdp.gamma}")
    return EXIT_OK


COMMANDS: Dict[str, Tuple[type, Callable]] = {
    'prop1': (Prop1Config, cmd_prop1),
    'gridworld': (GridworldConfig, cmd_gridworld),
    'rank-solve': (RankSolveConfig, cmd_rank_solve),
    'mu': (MuConfig, cmd_mu),
    'city': (CityConfig, cmd_city),
    'validate-mdp': (ValidateConfig, cmd_validate_mdp),
}


# ============================================================================
# PARSER
# ============================================================================

class RankIrlArgumentParser(argparse.ArgumentParser):
    """Usage errors exit with status 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = RankIrlArgumentParser(add_help=False)
    common.add_argument('--seed', type=int, help='Random seed')
    common.add_argument('--out', help='Existing output directory')
    common.add_argument('--tol', type=float, help='Solver tolerance')
    common.add_argument('--gamma', type=float, help='Discount factor')
    common.add_argument('--c', dest='C', type=float, help='Slack trade-off constant C')
    common.add_argument('--config', dest='manifest', help='Reload a run_config.json')
    common.add_argument('--verbose', action='store_true', help='Debug logging')

    parser = RankIrlArgumentParser(
        prog='rank-irl',
        description='Reward recovery from ranked demonstrations',
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Counterexample check
  rank-irl prop1 --delta 1 --gamma 0.9

  # Gridworld comparison with 10 baseline seeds
  rank-irl gridworld --out results/

  # Solve a ranked feature expectation file (rank 1 = best)
  rank-irl rank-solve mus.csv --c 1 --output solution.json

  # Rerun the city pipeline from a manifest
  rank-irl city --config results/run_config.json --out rerun/
        """
    )
    sub = parser.add_subparsers(dest='command', metavar='COMMAND')
    sub.required = True

    prop1 = sub.add_parser('prop1', parents=[common], help='Four-state counterexample')
    prop1.add_argument('--delta', type=float)

    grid = sub.add_parser('gridworld', parents=[common], help='Gridworld comparison')
    grid.add_argument('--size', type=int)
    grid.add_argument('--odd-row-penalty', type=float)
    grid.add_argument('--goal-reward', type=float)
    grid.add_argument('--slip', dest='slip_prob', type=float)
    grid.add_argument('--seeds', dest='n_baseline_seeds', type=int)
    grid.add_argument('--sample-mode', choices=['exact', 'sampled'])
    grid.add_argument('--n-traj', type=int)
    grid.add_argument('--epsilon', type=float)
    grid.add_argument('--max-iter', type=int)
    grid.add_argument('--n-jobs', type=int)

    solve = sub.add_parser('rank-solve', parents=[common], help='Sum-of-margins solve')
    solve.add_argument('mu_csv', nargs='?')
    solve.add_argument('--hard', action='store_true', default=None)
    solve.add_argument('--output')

    mu = sub.add_parser('mu', parents=[common], help='Empirical feature expectations')
    mu.add_argument('traj_file', nargs='?')
    mu.add_argument('--features', dest='features_file')
    mu.add_argument('--lossless', action='store_true', default=None)
    mu.add_argument('--n-states', type=int)
    mu.add_argument('--mdp', dest='mdp_file')
    mu.add_argument('--source-id')
    mu.add_argument('--rank', type=int, help='User rank label (1 = best)')
    mu.add_argument('--output')

    city = sub.add_parser('city', parents=[common], help='Synthetic road-network pipeline')
    city.add_argument('--segments', dest='n_segments', type=int)
    city.add_argument('--drivers', dest='n_drivers', type=int)
    city.add_argument('--k', type=int)
    city.add_argument('--per-rank', type=int)
    city.add_argument('--max-dim', type=int)
    city.add_argument('--hotspots', dest='n_hotspots', type=int)
    city.add_argument('--shift-length', type=int)
    city.add_argument('--network', dest='network_path')
    city.add_argument('--n-jobs', type=int)

    check = sub.add_parser('validate-mdp', parents=[common], help='Validate an MDP file')
    check.add_argument('mdp_file', nargs='?')
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main CLI entry point."""
    args = build_parser().parse_args(argv)
    configure_logging(args.verbose)
    config_cls, handler = COMMANDS[args.command]

    out = None
    if args.out is not None:
        out = Path(args.out)
        if not out.is_dir():
            print(f"❌ output directory does not exist: {out}", file=sys.stderr)
            return EXIT_IO

    try:
        if args.manifest is not None:
            config = config_from_manifest(config_cls, args.command, args.manifest)
        else:
            config = config_from_args(config_cls, args)
        if out is not None:
            write_manifest(args.command, config, out)
        return handler(config, out)
    except SolverConvergenceError as error:
        logger.error(f"Solver did not converge: {error}")
        return EXIT_SOLVER
    except OSError as error:
        logger.error(f"I/O error: {error}")
        return EXIT_IO
    except ValueError as error:
        logger.error(str(error))
        print(f"❌ {error}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == '__main__':
    sys.exit(main())
