"""
Max-Margin Apprenticeship Learning
==================================

Baseline that matches a single expert's feature expectations:

1. Start from a uniformly random deterministic policy pi_0 (seeded).
2. At iteration i find the unit direction w_i maximizing the margin t_i by
   which the expert beats every policy found so far.
3. Stop once t_i <= epsilon, otherwise add the optimal policy for w_i . phi.

The margin step is the hard two-rank case of the sum-of-margins program.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from features import FeatureMap, InitialDistribution, Mu, empirical_mu, exact_mu
from features import sample_trajectories, truncation_horizon
from mdp_core import Mdp, Policy, optimal_policy
from ordinal_margin import RankedDataset, RankSolution, reward_from_w, solve_sum_of_margins

logger = logging.getLogger('RankIRL.Baseline')

SAMPLE_MODES = ('exact', 'sampled')


@dataclass
class AlIteration:
    """One margin step and the policy it produced (None on the final step)."""
    w: np.ndarray
    t: float
    policy: Optional[Policy] = None
    mu: Optional[np.ndarray] = None


@dataclass
class AlTrace:
    """Full run of the baseline for one seed."""
    seed: int
    initial_policy: Policy
    initial_mu: np.ndarray
    iterations: List[AlIteration] = field(default_factory=list)
    final_w: Optional[np.ndarray] = None
    converged: bool = False

    def to_dict(self) -> Dict:
        return {
            'seed': self.seed,
            'iterations': [{'t': it.t, 'w': it.w.tolist()} for it in self.iterations],
            'final_w': None if self.final_w is None else self.final_w.tolist(),
            'converged': self.converged,
        }


def max_margin_step(mu_expert, mus: Sequence[np.ndarray]) -> Tuple[np.ndarray, float, RankSolution]:
    """
    Unit direction separating the expert from every recorded policy.

    Returns:
        (w, t, solution); w = 0 and t = 0 when the expert cannot be
        separated from the recorded feature expectations
    """
    expert = Mu(mu_expert, rank=2, source_id='expert')
    opponents = tuple(Mu(mu, rank=1, source_id=f'policy_{j}') for j, mu in enumerate(mus))
    if not opponents:
        raise ValueError("at least one opposing feature expectation is required")
    solution = solve_sum_of_margins(RankedDataset(opponents + (expert,)), hard=True)
    t = 0.0 if solution.degenerate else float(solution.margins[0])
    return solution.w, t, solution


def _policy_mu(mdp: Mdp, policy: Policy, fmap: FeatureMap, d0: InitialDistribution,
               sample_mode: str, n_traj: int, seed: Sequence[int]) -> np.ndarray:
    if sample_mode == 'exact':
        return exact_mu(mdp, policy, fmap, d0)
    horizon = truncation_horizon(mdp.gamma, fmap.max_phi)
    trajectories = sample_trajectories(mdp, policy, d0, n_traj, horizon, list(seed))
    return empirical_mu(trajectories, fmap, mdp.gamma)


def abbeel_max_margin(mdp: Mdp, fmap: FeatureMap, d0: InitialDistribution, mu_E,
                      epsilon: float, max_iter: int, seed: int,
                      sample_mode: str = 'exact', n_traj: int = 1000,
                      initial_policy: Optional[Policy] = None) -> AlTrace:
    """
    Run the max-margin apprenticeship-learning loop.

    Args:
        mdp: Known model
        fmap: Feature map
        d0: Start-state distribution
        mu_E: Expert feature expectations
        epsilon: Margin at which the loop stops
        max_iter: Maximum number of margin steps
        seed: Seed of the random initial policy and of sampling
        sample_mode: 'exact' feature expectations or 'sampled' estimates
        n_traj: Trajectories per estimate in sampled mode
        initial_policy: Override of the random initial policy

    Returns:
        AlTrace; ``converged`` is False if max_iter was reached first
    """
    mu_E = np.asarray(mu_E.vector if isinstance(mu_E, Mu) else mu_E, dtype=float)
    if not epsilon > 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    if mu_E.size != fmap.d:
        raise ValueError(f"expert feature expectations have {mu_E.size} components, d = {fmap.d}")
    if sample_mode not in SAMPLE_MODES:
        raise ValueError(f"sample_mode must be one of {SAMPLE_MODES}")
    if max_iter < 1:
        raise ValueError("max_iter must be at least 1")

    if initial_policy is None:
        rng = np.random.default_rng(seed)
        initial_policy = Policy(rng.integers(0, mdp.n_actions, size=mdp.n_states))
    initial_mu = _policy_mu(mdp, initial_policy, fmap, d0, sample_mode, n_traj, (seed, 0))

    trace = AlTrace(seed=seed, initial_policy=initial_policy, initial_mu=initial_mu)
    mus = [initial_mu]
    for i in range(1, max_iter + 1):
        w, t, _ = max_margin_step(mu_E, mus)
        step = AlIteration(w=w, t=t)
        trace.iterations.append(step)
        if np.any(w):
            trace.final_w = w
        logger.debug(f"Seed {seed} iteration {i}: margin {t:.6g}")
        if t <= epsilon:
            trace.converged = True
            break
        step.policy, _ = optimal_policy(mdp, reward_from_w(w, fmap))
        step.mu = _policy_mu(mdp, step.policy, fmap, d0, sample_mode, n_traj, (seed, i))
        mus.append(step.mu)

    if trace.final_w is None:
        trace.final_w = np.zeros(fmap.d)
    if not trace.converged:
        logger.warning(
            f"Seed {seed}: margin {trace.iterations[-1].t:.6g} still above {epsilon} "
            f"after {max_iter} iterations"
        )
    else:
        logger.info(f"Seed {seed}: converged after {len(trace.iterations)} iterations")
    return trace
