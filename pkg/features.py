"""
Feature Expectations
====================

State features and discounted feature expectations:
- FeatureMap with values in [0, 1] (lossless identity map or normalized raw features)
- Exact feature expectations from the discounted state occupancy
- Empirical feature expectations from finite trajectories
- Trajectory sampling for known MDPs

Each trajectory is discounted from its own first step and counts as one
draw from the initial distribution. Trajectories are never stitched.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Union

import numpy as np

from mdp_core import Mdp, Policy, policy_transition

logger = logging.getLogger('RankIRL.Features')

OCCUPANCY_RESIDUAL_TOL = 1e-10
DISTRIBUTION_TOL = 1e-12


def _frozen(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


# ============================================================================
# DOMAIN TYPES
# ============================================================================

@dataclass(frozen=True)
class FeatureMap:
    """Per-state feature vectors ``phi[s]`` with every component in [0, 1]."""
    phi: np.ndarray

    def __post_init__(self):
        phi = np.array(self.phi, dtype=float)
        if phi.ndim != 2 or phi.size == 0:
            raise ValueError(f"phi must be a non-empty (n_states, d) table, got shape {phi.shape}")
        if phi.min() < 0.0 or phi.max() > 1.0:
            raise ValueError(
                "feature components must lie in [0, 1]; use FeatureMap.from_raw to normalize"
            )
        object.__setattr__(self, 'phi', _frozen(phi))

    @property
    def n_states(self) -> int:
        return self.phi.shape[0]

    @property
    def d(self) -> int:
        return self.phi.shape[1]

    @property
    def max_phi(self) -> float:
        return float(self.phi.max())

    @classmethod
    def lossless(cls, n_states: int) -> 'FeatureMap':
        """One indicator feature per state."""
        if n_states < 1:
            raise ValueError("n_states must be positive")
        return cls(np.eye(n_states))

    @classmethod
    def from_raw(cls, raw) -> 'FeatureMap':
        """
        Min-max normalize external features per dimension.

        Constant dimensions map to 0. The transform is logged when any
        component falls outside [0, 1].
        """
        raw = np.array(raw, dtype=float)
        if raw.ndim != 2 or raw.size == 0:
            raise ValueError(f"raw features must be a non-empty 2-D table, got shape {raw.shape}")
        if raw.min() >= 0.0 and raw.max() <= 1.0:
            return cls(raw)

        low = raw.min(axis=0)
        span = raw.max(axis=0) - low
        scale = np.where(span > 0, span, 1.0)
        logger.warning(
            f"Features outside [0, 1]: min-max normalized {raw.shape[1]} dimensions "
            f"(offsets {low.tolist()}, scales {scale.tolist()})"
        )
        return cls(np.clip((raw - low) / scale, 0.0, 1.0))

    def __eq__(self, other) -> bool:
        return isinstance(other, FeatureMap) and np.array_equal(self.phi, other.phi)

    def __hash__(self) -> int:
        return hash(self.phi.tobytes())


@dataclass(frozen=True)
class Trajectory:
    """
    Ordered state indices with optional per-step metadata.

    ``occupied`` and ``timestamps`` are used by road-network logs.
    """
    states: np.ndarray
    occupied: Optional[np.ndarray] = None
    timestamps: Optional[np.ndarray] = None

    def __post_init__(self):
        states = np.array(self.states, dtype=int).reshape(-1)
        if states.size == 0:
            raise ValueError("trajectory must contain at least one state")
        if np.any(states < 0):
            raise ValueError("trajectory state indices must be non-negative")
        object.__setattr__(self, 'states', _frozen(states))
        for name, dtype in (('occupied', bool), ('timestamps', int)):
            value = getattr(self, name)
            if value is None:
                continue
            value = np.array(value, dtype=dtype).reshape(-1)
            if value.size != states.size:
                raise ValueError(f"{name} has {value.size} entries for {states.size} states")
            object.__setattr__(self, name, _frozen(value))

    def __len__(self) -> int:
        return self.states.size

    def search_prefix(self) -> Optional['Trajectory']:
        """Leading unoccupied steps, or None if the first step is occupied."""
        if self.occupied is None:
            return self
        occupied_at = np.flatnonzero(self.occupied)
        end = int(occupied_at[0]) if occupied_at.size else len(self)
        if end == 0:
            return None
        timestamps = None if self.timestamps is None else self.timestamps[:end]
        return Trajectory(self.states[:end], self.occupied[:end], timestamps)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Trajectory):
            return NotImplemented

        def same(x, y):
            return (x is None and y is None) or (
                x is not None and y is not None and np.array_equal(x, y))

        return (np.array_equal(self.states, other.states)
                and same(self.occupied, other.occupied)
                and same(self.timestamps, other.timestamps))

    def __hash__(self) -> int:
        return hash(self.states.tobytes())


@dataclass(frozen=True)
class Mu:
    """Feature expectations of one demonstrator with its rank label."""
    vector: np.ndarray
    rank: int
    source_id: str

    def __post_init__(self):
        vector = np.array(self.vector, dtype=float).reshape(-1)
        if vector.size == 0:
            raise ValueError("feature expectation vector must be non-empty")
        if int(self.rank) < 1:
            raise ValueError(f"rank must be a positive integer, got {self.rank}")
        object.__setattr__(self, 'vector', _frozen(vector))
        object.__setattr__(self, 'rank', int(self.rank))
        object.__setattr__(self, 'source_id', str(self.source_id))

    @property
    def d(self) -> int:
        return self.vector.size

    def relabeled(self, rank: int) -> 'Mu':
        return Mu(self.vector, rank, self.source_id)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Mu):
            return NotImplemented
        return (self.rank == other.rank and self.source_id == other.source_id
                and np.array_equal(self.vector, other.vector))

    def __hash__(self) -> int:
        return hash((self.vector.tobytes(), self.rank, self.source_id))


@dataclass(frozen=True)
class InitialDistribution:
    """Start-state distribution."""
    probs: np.ndarray

    def __post_init__(self):
        probs = np.array(self.probs, dtype=float).reshape(-1)
        if probs.size == 0 or np.any(probs < 0):
            raise ValueError("initial distribution must be a non-empty non-negative vector")
        if abs(probs.sum() - 1.0) > DISTRIBUTION_TOL:
            raise ValueError(f"initial distribution sums to {probs.sum():.15g}, expected 1")
        object.__setattr__(self, 'probs', _frozen(probs))

    @property
    def n_states(self) -> int:
        return self.probs.size

    @classmethod
    def uniform(cls, n_states: int) -> 'InitialDistribution':
        return cls(np.full(n_states, 1.0 / n_states))

    @classmethod
    def point(cls, n_states: int, state: int) -> 'InitialDistribution':
        probs = np.zeros(n_states)
        probs[state] = 1.0
        return cls(probs)

    @classmethod
    def from_mass(cls, mass) -> 'InitialDistribution':
        """Uniform over the states where ``mass`` is non-zero."""
        support = np.asarray(mass, dtype=float) != 0
        if not support.any():
            raise ValueError("no state carries mass")
        probs = support / support.sum()
        return cls(probs)


# ============================================================================
# EXACT FEATURE EXPECTATIONS
# ============================================================================

def _check_shapes(mdp: Mdp, fmap: FeatureMap, d0: InitialDistribution) -> None:
    if fmap.n_states != mdp.n_states:
        raise ValueError(f"feature map covers {fmap.n_states} states, MDP has {mdp.n_states}")
    if d0.n_states != mdp.n_states:
        raise ValueError(
            f"initial distribution covers {d0.n_states} states, MDP has {mdp.n_states}"
        )


def occupancy(mdp: Mdp, policy: Policy, d0: InitialDistribution) -> np.ndarray:
    """Discounted state occupancy x solving x = d0 + gamma * P_pi^T x."""
    if d0.n_states != mdp.n_states:
        raise ValueError(
            f"initial distribution covers {d0.n_states} states, MDP has {mdp.n_states}"
        )
    p_pi = policy_transition(mdp, policy)
    system = np.eye(mdp.n_states) - mdp.gamma * p_pi.T
    x = np.linalg.solve(system, d0.probs)
    residual = float(np.max(np.abs(system @ x - d0.probs)))
    if residual > OCCUPANCY_RESIDUAL_TOL:
        raise RuntimeError(f"occupancy solve residual {residual:.3e} exceeds tolerance")
    return x


def exact_mu(mdp: Mdp, policy: Policy, fmap: FeatureMap,
             d0: InitialDistribution) -> np.ndarray:
    """
    Exact discounted feature expectations of a policy.

    Args:
        mdp: Known model
        policy: Deterministic policy
        fmap: Feature map over the model's states
        d0: Start-state distribution

    Returns:
        Vector Phi^T x of length ``fmap.d``
    """
    _check_shapes(mdp, fmap, d0)
    return fmap.phi.T @ occupancy(mdp, policy, d0)


# ============================================================================
# EMPIRICAL FEATURE EXPECTATIONS
# ============================================================================

def per_trajectory_mu(trajectories: Sequence[Trajectory], fmap: FeatureMap,
                      gamma: float) -> np.ndarray:
    """Discounted feature sum of every trajectory, one row each."""
    if len(trajectories) == 0:
        raise ValueError("at least one trajectory is required")
    rows = np.empty((len(trajectories), fmap.d))
    for i, trajectory in enumerate(trajectories):
        states = trajectory.states
        if int(states.max()) >= fmap.n_states:
            raise ValueError(
                f"trajectory {i} visits state {int(states.max())}, "
                f"feature map covers {fmap.n_states} states"
            )
        weights = gamma ** np.arange(states.size)
        rows[i] = weights @ fmap.phi[states]
    return rows


def empirical_mu(trajectories: Sequence[Trajectory], fmap: FeatureMap,
                 gamma: float) -> np.ndarray:
    """Average discounted feature sum over trajectories."""
    return per_trajectory_mu(trajectories, fmap, gamma).mean(axis=0)


def value_from_w(w, mu) -> float:
    """Expected return w . mu of a linear reward."""
    w = np.asarray(w, dtype=float).reshape(-1)
    mu = np.asarray(mu.vector if isinstance(mu, Mu) else mu, dtype=float).reshape(-1)
    if w.size != mu.size:
        raise ValueError(f"w has {w.size} components, mu has {mu.size}")
    return float(w @ mu)


# ============================================================================
# SAMPLING
# ============================================================================

def truncation_horizon(gamma: float, max_phi: float = 1.0, tol: float = 1e-6) -> int:
    """Smallest T with gamma**T * max_phi / (1 - gamma) <= tol."""
    if not 0.0 <= gamma < 1.0:
        raise ValueError(f"gamma must lie in [0, 1), got {gamma}")
    if max_phi <= 0 or gamma == 0.0:
        return 1
    bound = tol * (1.0 - gamma) / max_phi
    if bound >= 1.0:
        return 1
    horizon = int(np.ceil(np.log(bound) / np.log(gamma)))
    while gamma ** horizon * max_phi / (1.0 - gamma) > tol:
        horizon += 1
    return max(horizon, 1)


def sample_trajectories(mdp: Mdp, policy: Policy, d0: InitialDistribution, n_traj: int,
                        horizon: int, seed: Union[int, Sequence[int]]) -> List[Trajectory]:
    """
    Simulate ``n_traj`` trajectories of ``horizon`` steps each.

    All trajectories advance together; each step draws one uniform number
    per trajectory against the sparse support of its transition row.
    """
    if n_traj < 1 or horizon < 1:
        raise ValueError("n_traj and horizon must be positive")
    if d0.n_states != mdp.n_states:
        raise ValueError(
            f"initial distribution covers {d0.n_states} states, MDP has {mdp.n_states}"
        )
    p_pi = policy_transition(mdp, policy)

    width = int((p_pi > 0).sum(axis=1).max())
    order = np.argsort(-p_pi, axis=1, kind='stable')[:, :width]
    support_probs = np.take_along_axis(p_pi, order, axis=1)
    cumulative = np.cumsum(support_probs, axis=1)

    rng = np.random.default_rng(seed)
    paths = np.empty((n_traj, horizon), dtype=int)
    paths[:, 0] = rng.choice(mdp.n_states, size=n_traj, p=d0.probs)
    for t in range(1, horizon):
        current = paths[:, t - 1]
        draws = rng.random(n_traj)[:, None] * cumulative[current, -1:]
        column = np.minimum((cumulative[current] <= draws).sum(axis=1), width - 1)
        paths[:, t] = order[current, column]

    return [Trajectory(row) for row in paths]
