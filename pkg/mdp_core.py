"""
Finite MDP Core
===============

Finite Markov decision processes with a dense transition table:
- Structural validation (row-stochastic transitions, gamma < 1)
- Exact policy evaluation (direct solve, iterative sweeps for large models)
- Value iteration with deterministic greedy extraction
- The four-state construction showing that an approximate reward can make a
  bad policy look as good as an alternative one

Rewards accrue on the current state, including t = 0:

    V(s) = R(s) + gamma * sum_s' P(s' | s, pi(s)) V(s')
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

logger = logging.getLogger('RankIRL.MDP')

# Largest model evaluated with a direct linear solve.
DIRECT_SOLVE_LIMIT = 2000
ROW_SUM_TOL = 1e-12
TIE_TOL = 1e-12


def _frozen(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


# ============================================================================
# DOMAIN TYPES
# ============================================================================

@dataclass(frozen=True)
class Mdp:
    """
    Finite MDP with transition table ``transition[s, a, s']``.

    Construction only checks shapes. Probability and discount defects are
    reported by :func:`validate_mdp` so malformed models can be inspected.
    """
    transition: np.ndarray
    gamma: float
    reward: Optional[np.ndarray] = None

    def __post_init__(self):
        transition = np.array(self.transition, dtype=float)
        if transition.ndim != 3 or transition.shape[0] != transition.shape[2]:
            raise ValueError(
                f"transition must have shape (n_states, n_actions, n_states), got {transition.shape}"
            )
        if transition.shape[0] == 0 or transition.shape[1] == 0:
            raise ValueError("MDP needs at least one state and one action")
        object.__setattr__(self, 'transition', _frozen(transition))
        object.__setattr__(self, 'gamma', float(self.gamma))
        if self.reward is not None:
            reward = np.array(self.reward, dtype=float)
            if reward.shape != (transition.shape[0],):
                raise ValueError(
                    f"reward length {reward.size} does not match n_states {transition.shape[0]}"
                )
            object.__setattr__(self, 'reward', _frozen(reward))

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    def with_reward(self, reward: Optional[np.ndarray]) -> 'Mdp':
        return Mdp(self.transition, self.gamma, reward)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Mdp):
            return NotImplemented
        same_reward = (
            (self.reward is None and other.reward is None)
            or (self.reward is not None and other.reward is not None
                and np.array_equal(self.reward, other.reward))
        )
        return (self.gamma == other.gamma and same_reward
                and np.array_equal(self.transition, other.transition))

    def __hash__(self) -> int:
        return hash((self.transition.tobytes(), self.gamma))


@dataclass(frozen=True)
class Policy:
    """Deterministic policy: one action index per state."""
    actions: np.ndarray

    def __post_init__(self):
        actions = np.array(self.actions, dtype=int).reshape(-1)
        if actions.size == 0:
            raise ValueError("policy must define an action for at least one state")
        if np.any(actions < 0):
            raise ValueError("policy actions must be non-negative indices")
        object.__setattr__(self, 'actions', _frozen(actions))

    @property
    def n_states(self) -> int:
        return self.actions.size

    def action(self, state: int) -> int:
        return int(self.actions[state])

    def check(self, mdp: Mdp) -> None:
        """Raise ValueError if this policy does not fit ``mdp``."""
        if self.n_states != mdp.n_states:
            raise ValueError(
                f"policy covers {self.n_states} states, MDP has {mdp.n_states}"
            )
        if int(self.actions.max()) >= mdp.n_actions:
            raise ValueError(
                f"policy uses action {int(self.actions.max())}, MDP has {mdp.n_actions} actions"
            )

    def __eq__(self, other) -> bool:
        return isinstance(other, Policy) and np.array_equal(self.actions, other.actions)

    def __hash__(self) -> int:
        return hash(self.actions.tobytes())


@dataclass(frozen=True)
class ValueFunction:
    """Per-state values plus the Bellman residual they were accepted at."""
    values: np.ndarray
    residual: float = 0.0
    sweep_deltas: Tuple[float, ...] = field(default=())

    def __post_init__(self):
        object.__setattr__(self, 'values', _frozen(np.array(self.values, dtype=float)))

    def __len__(self) -> int:
        return self.values.size


# ============================================================================
# VALIDATION
# ============================================================================

def validate_mdp(mdp: Mdp) -> List[str]:
    """
    Check the probability and discount invariants of an MDP.

    Returns:
        List of human-readable violations, empty when the MDP is well formed.
    """
    violations = []
    transition = mdp.transition

    negative = np.argwhere(transition.min(axis=2) < 0)
    for s, a in negative:
        violations.append(f"(s={s}, a={a}): negative transition probability")

    sums = transition.sum(axis=2)
    bad_rows = np.argwhere(np.abs(sums - 1.0) > ROW_SUM_TOL)
    for s, a in bad_rows:
        violations.append(f"(s={s}, a={a}): row sums to {sums[s, a]:.12g}, expected 1")

    if not mdp.gamma < 1.0:
        violations.append("gamma not < 1")
    if mdp.gamma < 0.0:
        violations.append("gamma must be >= 0")

    return violations


def _check_reward(mdp: Mdp, reward) -> np.ndarray:
    reward = np.asarray(reward, dtype=float)
    if reward.shape != (mdp.n_states,):
        raise ValueError(
            f"reward length {reward.size} does not match n_states {mdp.n_states}"
        )
    return reward


def _check_tol(tol: float) -> None:
    if not tol > 0:
        raise ValueError(f"tol must be positive, got {tol}")


def _check_gamma(mdp: Mdp) -> None:
    if not 0.0 <= mdp.gamma < 1.0:
        raise ValueError(f"gamma must lie in [0, 1), got {mdp.gamma}")


# ============================================================================
# POLICY EVALUATION
# ============================================================================

def policy_transition(mdp: Mdp, policy: Policy) -> np.ndarray:
    """Transition matrix P_pi[s, s'] of a deterministic policy."""
    policy.check(mdp)
    return mdp.transition[np.arange(mdp.n_states), policy.actions, :]


def _bellman_residual(p_pi: np.ndarray, reward: np.ndarray, gamma: float,
                      values: np.ndarray) -> float:
    return float(np.max(np.abs(reward + gamma * p_pi @ values - values)))


def policy_evaluation(mdp: Mdp, policy: Policy, reward, tol: float = 1e-10,
                      max_sweeps: int = 100000) -> ValueFunction:
    """
    Evaluate a deterministic policy exactly.

    Args:
        mdp: The model, gamma in [0, 1)
        policy: Policy to evaluate
        reward: Per-state reward vector
        tol: Maximum accepted Bellman residual
        max_sweeps: Cap on the fixed-point sweeps that polish the solution

    Returns:
        ValueFunction whose residual is at most ``tol`` unless the sweep cap
        was reached first
    """
    reward = _check_reward(mdp, reward)
    _check_tol(tol)
    _check_gamma(mdp)
    p_pi = policy_transition(mdp, policy)
    gamma = mdp.gamma

    if mdp.n_states <= DIRECT_SOLVE_LIMIT:
        values = np.linalg.solve(np.eye(mdp.n_states) - gamma * p_pi, reward)
    else:
        values = np.zeros(mdp.n_states)

    residual = _bellman_residual(p_pi, reward, gamma, values)
    sweeps = 0
    while residual > tol and sweeps < max_sweeps:
        values = reward + gamma * p_pi @ values
        residual = _bellman_residual(p_pi, reward, gamma, values)
        sweeps += 1
    if residual > tol:
        logger.warning(f"Policy evaluation hit {max_sweeps} sweeps with residual {residual:.3e}")
    elif sweeps:
        logger.debug(f"Policy evaluation used {sweeps} sweeps, residual {residual:.3e}")

    return ValueFunction(values, residual)


# ============================================================================
# OPTIMAL CONTROL
# ============================================================================

def q_values(mdp: Mdp, reward, values: np.ndarray) -> np.ndarray:
    """Action values Q[s, a] = R(s) + gamma * E[V(s') | s, a]."""
    reward = _check_reward(mdp, reward)
    return reward[:, None] + mdp.gamma * np.einsum('sat,t->sa', mdp.transition, values)


def greedy_policy(mdp: Mdp, reward, values: np.ndarray) -> Policy:
    """Greedy policy for ``values``; near-ties go to the lowest action index."""
    q = q_values(mdp, reward, values)
    best = q.max(axis=1, keepdims=True)
    near_best = q >= best - TIE_TOL * (1.0 + np.abs(best))
    return Policy(np.argmax(near_best, axis=1))


def optimal_policy(mdp: Mdp, reward, tol: float = 1e-10,
                   max_sweeps: int = 100000) -> Tuple[Policy, ValueFunction]:
    """
    Value iteration to a Bellman residual of at most ``tol``.

    Returns:
        (greedy policy, value function it is greedy with respect to)
    """
    reward = _check_reward(mdp, reward)
    _check_tol(tol)
    transition = mdp.transition
    gamma = mdp.gamma

    values = np.zeros(mdp.n_states)
    deltas = []
    for _ in range(max_sweeps):
        updated = reward + gamma * np.einsum('sat,t->sa', transition, values).max(axis=1)
        delta = float(np.max(np.abs(updated - values)))
        deltas.append(delta)
        values = updated
        if delta <= tol:
            break
    else:
        logger.warning(f"Value iteration hit {max_sweeps} sweeps with residual {deltas[-1]:.3e}")

    residual = float(np.max(np.abs(
        reward + gamma * np.einsum('sat,t->sa', transition, values).max(axis=1) - values
    )))
    policy = greedy_policy(mdp, reward, values)
    return policy, ValueFunction(values, residual, tuple(deltas))


# ============================================================================
# GENERATORS
# ============================================================================

def random_mdp(n_states: int, n_actions: int, gamma: float, seed: int) -> Mdp:
    """Random dense MDP with Dirichlet(1) transition rows."""
    if n_states < 1 or n_actions < 1:
        raise ValueError("n_states and n_actions must be positive")
    rng = np.random.default_rng(seed)
    transition = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    # Renormalize so rows pass the 1e-12 sum check after float rounding
    transition /= transition.sum(axis=2, keepdims=True)
    return Mdp(transition, gamma)


@dataclass(frozen=True)
class Prop1Instance:
    """
    Four-state counterexample where an approximate reward hides how bad a
    policy is.

    States s0..s3 and actions a, b, c (indices 0, 1, 2). From s0 action a
    enters s1, b enters s2 and c enters s3; s1, s2 and s3 absorb under every
    action. The true reward is (0, -delta, 1, 0) and the approximate reward is
    (0, 0, 1, 0).

    The expert enters the +1 state s2. Under the approximate reward ``pi1``
    (enters s1) and ``pi2`` (enters s3) have equal values.
    """
    mdp: Mdp
    true_reward: np.ndarray
    approx_reward: np.ndarray
    expert_policy: Policy
    pi1: Policy
    pi2: Policy

    START_STATE = 0
    ACTION_NAMES = ('a', 'b', 'c')


def build_prop1_mdp(delta: float, gamma: float) -> Prop1Instance:
    """
    Build the four-state counterexample.

    Args:
        delta: Penalty magnitude on s1, must be positive
        gamma: Discount factor in [0, 1)

    Returns:
        Prop1Instance with the MDP, both rewards and the three policies
    """
    if not delta > 0:
        raise ValueError(f"delta must be positive, got {delta}")
    if not 0.0 <= gamma < 1.0:
        raise ValueError(f"gamma must lie in [0, 1), got {gamma}")

    transition = np.zeros((4, 3, 4))
    for action, target in enumerate((1, 2, 3)):
        transition[0, action, target] = 1.0
    for state in (1, 2, 3):
        transition[state, :, state] = 1.0

    def start_with(action: int) -> Policy:
        return Policy(np.array([action, 0, 0, 0]))

    return Prop1Instance(
        mdp=Mdp(transition, gamma),
        true_reward=_frozen(np.array([0.0, -float(delta), 1.0, 0.0])),
        approx_reward=_frozen(np.array([0.0, 0.0, 1.0, 0.0])),
        expert_policy=start_with(1),
        pi1=start_with(0),
        pi2=start_with(2),
    )
