"""
Sum-of-Margins Ordinal Regression
=================================

Recovers a linear reward direction from ranked feature expectations by
solving

    minimize    sum_r (a_r - b_r) + C * (sum eps + sum sig)
    subject to  a_r <= b_r <= a_{r+1}
                w . mu_i <= a_r + eps_i        for mu_i in rank r   (r < k)
                b_r - sig_i <= w . mu_i        for mu_i in rank r+1
                ||w|| <= 1,  eps, sig >= 0

Higher rank index means a better demonstrator and a higher score w . mu.

The program is a second-order cone program and is handed to cvxopt's
interior-point solver. Thresholds and slacks are then recomputed exactly for
the returned direction by a dynamic program over the candidate threshold
values, which also makes them canonical (least total slack, then lowest
thresholds).

Also provided:
- A brute-force oracle over unit directions for d <= 2
- Slack-driven rank repair (pruning and swapping) and incremental building
"""

import logging
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from cvxopt import matrix, solvers

from features import FeatureMap, Mu

logger = logging.getLogger('RankIRL.Solver')

DEFAULT_C = 1.0
DEGENERATE_TOL = 1e-7
SOLVER_OPTIONS = {
    'show_progress': False,
    'abstol': 1e-10,
    'reltol': 1e-10,
    'feastol': 1e-10,
    'maxiters': 200,
}


class SolverConvergenceError(RuntimeError):
    """The cone solver stopped without a usable optimum."""

    def __init__(self, message: str, best: Optional['RankSolution'] = None,
                 status: Optional[str] = None, residuals: Optional[Dict[str, float]] = None):
        super().__init__(message)
        self.best = best
        self.status = status
        self.residuals = residuals or {}
        self.iterate: Optional[np.ndarray] = None


# ============================================================================
# DOMAIN TYPES
# ============================================================================

@dataclass(frozen=True)
class RankedDataset:
    """Ranked feature expectations with the slack trade-off constant."""
    mus: Tuple[Mu, ...]
    C: float = DEFAULT_C

    def __post_init__(self):
        mus = tuple(self.mus)
        object.__setattr__(self, 'mus', mus)
        object.__setattr__(self, 'C', float(self.C))
        if not mus:
            raise ValueError("dataset needs at least one demonstrator")
        dims = sorted({mu.d for mu in mus})
        if len(dims) > 1:
            raise ValueError(f"inconsistent feature dimensions: {dims}")
        ids = [mu.source_id for mu in mus]
        duplicates = sorted({sid for sid in ids if ids.count(sid) > 1})
        if duplicates:
            raise ValueError(f"duplicate source ids: {duplicates}")
        present = {mu.rank for mu in mus}
        k = max(present)
        for rank in range(1, k + 1):
            if rank not in present:
                raise ValueError(f"rank {rank} empty")
        if k < 2:
            raise ValueError("at least two ranks are required")
        if not self.C > 0:
            raise ValueError(f"C must be positive, got {self.C}")

    @property
    def k(self) -> int:
        return max(mu.rank for mu in self.mus)

    @property
    def d(self) -> int:
        return self.mus[0].d

    @property
    def matrix(self) -> np.ndarray:
        return np.vstack([mu.vector for mu in self.mus])

    @property
    def ranks(self) -> np.ndarray:
        return np.array([mu.rank for mu in self.mus], dtype=int)

    @property
    def source_ids(self) -> List[str]:
        return [mu.source_id for mu in self.mus]

    def members(self, rank: int) -> List[Mu]:
        return [mu for mu in self.mus if mu.rank == rank]

    def get(self, source_id: str) -> Mu:
        for mu in self.mus:
            if mu.source_id == source_id:
                return mu
        raise KeyError(source_id)

    def with_added(self, mu: Mu) -> 'RankedDataset':
        return RankedDataset(self.mus + (mu,), self.C)

    def with_removed(self, source_id: str) -> 'RankedDataset':
        return RankedDataset(tuple(m for m in self.mus if m.source_id != source_id), self.C)

    def with_relabeled(self, source_id: str, rank: int) -> 'RankedDataset':
        return RankedDataset(
            tuple(m.relabeled(rank) if m.source_id == source_id else m for m in self.mus),
            self.C,
        )

    def check_bounded(self) -> None:
        """The soft program is unbounded below unless C times each end rank size is >= 1."""
        for rank in (1, self.k):
            size = len(self.members(rank))
            if self.C * size < 1.0:
                raise ValueError(
                    f"C * |rank {rank}| = {self.C * size:.6g} < 1: objective is unbounded below"
                )


@dataclass
class RankSolution:
    """Solution of the sum-of-margins program."""
    w: np.ndarray
    a: np.ndarray
    b: np.ndarray
    eps: Dict[str, float]
    sig: Dict[str, float]
    objective: float
    margins: np.ndarray
    feasibility_residual: float
    degenerate: bool = False
    status: str = 'optimal'
    iterations: int = 0

    def total_slack(self, source_id: str) -> float:
        return self.eps.get(source_id, 0.0) + self.sig.get(source_id, 0.0)

    @property
    def max_slack(self) -> float:
        ids = set(self.eps) | set(self.sig)
        return max((self.total_slack(sid) for sid in ids), default=0.0)

    def to_dict(self) -> Dict:
        return {
            'w': self.w.tolist(),
            'a': self.a.tolist(),
            'b': self.b.tolist(),
            'eps': dict(self.eps),
            'sig': dict(self.sig),
            'objective': self.objective,
            'margins': self.margins.tolist(),
            'degenerate': self.degenerate,
            'feasibility_residual': self.feasibility_residual,
            'status': self.status,
            'iterations': self.iterations,
        }

    @classmethod
    def from_dict(cls, payload: Dict) -> 'RankSolution':
        return cls(
            w=np.array(payload['w'], dtype=float),
            a=np.array(payload['a'], dtype=float),
            b=np.array(payload['b'], dtype=float),
            eps={str(k): float(v) for k, v in payload['eps'].items()},
            sig={str(k): float(v) for k, v in payload['sig'].items()},
            objective=float(payload['objective']),
            margins=np.array(payload['margins'], dtype=float),
            feasibility_residual=float(payload['feasibility_residual']),
            degenerate=bool(payload['degenerate']),
            status=str(payload.get('status', 'optimal')),
            iterations=int(payload.get('iterations', 0)),
        )

    def __eq__(self, other) -> bool:
        if not isinstance(other, RankSolution):
            return NotImplemented
        return (np.array_equal(self.w, other.w) and np.array_equal(self.a, other.a)
                and np.array_equal(self.b, other.b) and self.eps == other.eps
                and self.sig == other.sig and self.objective == other.objective
                and np.array_equal(self.margins, other.margins)
                and self.feasibility_residual == other.feasibility_residual
                and self.degenerate == other.degenerate and self.status == other.status
                and self.iterations == other.iterations)


@dataclass(frozen=True)
class Thresholds:
    """Exact thresholds and slacks for a fixed direction."""
    a: np.ndarray
    b: np.ndarray
    eps: np.ndarray
    sig: np.ndarray
    objective: float


# ============================================================================
# FIXED-DIRECTION THRESHOLDS
# ============================================================================

def _slacks(scores: np.ndarray, ranks: np.ndarray, a: np.ndarray,
            b: np.ndarray, k: int) -> Tuple[np.ndarray, np.ndarray]:
    eps = np.zeros(scores.size)
    sig = np.zeros(scores.size)
    upper = ranks < k
    lower = ranks > 1
    eps[upper] = np.maximum(scores[upper] - a[ranks[upper] - 1], 0.0)
    sig[lower] = np.maximum(b[ranks[lower] - 2] - scores[lower], 0.0)
    return eps, sig


def _lex_better(p: float, s: float, best_p: float, best_s: float, tie: float) -> bool:
    return p < best_p - tie or (p <= best_p + tie and s < best_s - tie)


def solve_thresholds(scores, ranks, k: int, C: float = DEFAULT_C) -> Thresholds:
    """
    Optimal thresholds and slacks for fixed scores w . mu_i.

    Some optimal solution places every threshold on a score value, so a
    dynamic program over the chain a_1 <= b_1 <= ... <= b_{k-1} with the
    sorted scores as candidates is exact. Among optimal chains the one with
    least total slack wins, then the one with the lowest threshold values.
    ``C = inf`` gives the hard-margin thresholds.

    Args:
        scores: Score of every instance
        ranks: Rank label (1..k) of every instance
        k: Number of ranks
        C: Slack trade-off constant

    Returns:
        Thresholds with slacks aligned to the input order
    """
    scores = np.asarray(scores, dtype=float).reshape(-1)
    ranks = np.asarray(ranks, dtype=int).reshape(-1)
    if scores.size != ranks.size:
        raise ValueError("scores and ranks must have the same length")
    n_pairs = k - 1

    if np.isinf(C):
        a = np.array([scores[ranks == r].max() for r in range(1, k)])
        b = np.array([scores[ranks == r + 1].min() for r in range(1, k)])
        eps, sig = _slacks(scores, ranks, a, b, k)
        return Thresholds(a, b, eps, sig, float(np.sum(a - b)))

    values = np.unique(scores)
    scale = 1.0 + float(np.abs(values).max())
    tie = 1e-12 * scale * max(1, scores.size)

    # Primary cost and slack of placing each chain position on each candidate
    primary = np.empty((2 * n_pairs, values.size))
    slack = np.empty_like(primary)
    for r in range(1, k):
        above = scores[ranks == r]
        below = scores[ranks == r + 1]
        slack[2 * r - 2] = np.maximum(above[None, :] - values[:, None], 0.0).sum(axis=1)
        slack[2 * r - 1] = np.maximum(values[:, None] - below[None, :], 0.0).sum(axis=1)
        primary[2 * r - 2] = values + C * slack[2 * r - 2]
        primary[2 * r - 1] = -values + C * slack[2 * r - 1]

    best_p = primary[0].copy()
    best_s = slack[0].copy()
    back = np.zeros(primary.shape, dtype=int)
    for j in range(1, 2 * n_pairs):
        run = 0
        new_p = np.empty(values.size)
        new_s = np.empty(values.size)
        for v in range(values.size):
            if _lex_better(best_p[v], best_s[v], best_p[run], best_s[run], tie):
                run = v
            back[j, v] = run
            new_p[v] = primary[j, v] + best_p[run]
            new_s[v] = slack[j, v] + best_s[run]
        best_p, best_s = new_p, new_s

    end = 0
    for v in range(1, values.size):
        if _lex_better(best_p[v], best_s[v], best_p[end], best_s[end], tie):
            end = v
    chain = np.empty(2 * n_pairs, dtype=int)
    chain[-1] = end
    for j in range(2 * n_pairs - 1, 0, -1):
        chain[j - 1] = back[j, chain[j]]

    thresholds = values[chain]
    a, b = thresholds[0::2].copy(), thresholds[1::2].copy()
    eps, sig = _slacks(scores, ranks, a, b, k)
    objective = float(np.sum(a - b) + C * (eps.sum() + sig.sum()))
    return Thresholds(a, b, eps, sig, objective)


def threshold_objective_batch(score_matrix, ranks, k: int, C: float = DEFAULT_C) -> np.ndarray:
    """Optimal fixed-direction objective for every row of ``score_matrix``."""
    scores = np.atleast_2d(np.asarray(score_matrix, dtype=float))
    ranks = np.asarray(ranks, dtype=int).reshape(-1)
    candidates = np.sort(scores, axis=1)
    best = None
    for r in range(1, k):
        above = scores[:, ranks == r]
        cost = candidates + C * np.maximum(
            above[:, None, :] - candidates[:, :, None], 0.0).sum(axis=2)
        best = cost if best is None else cost + np.minimum.accumulate(best, axis=1)
        below = scores[:, ranks == r + 1]
        cost = -candidates + C * np.maximum(
            candidates[:, :, None] - below[:, None, :], 0.0).sum(axis=2)
        best = cost + np.minimum.accumulate(best, axis=1)
    return best.min(axis=1)


def oracle_objective(data: RankedDataset, resolution: float = 1e-3, refine: bool = True) -> float:
    """
    Brute-force optimum for d <= 2.

    Scans unit directions (every ``resolution`` radians for d = 2) plus
    w = 0, then rescans a narrow window around the best directions.
    """
    data.check_bounded()
    mus = data.matrix
    ranks = data.ranks
    if data.d == 1:
        directions = np.array([[-1.0], [0.0], [1.0]])
        return float(threshold_objective_batch(directions @ mus.T, ranks, data.k, data.C).min())
    if data.d != 2:
        raise ValueError("the brute-force oracle supports d <= 2")

    def scan(angles: np.ndarray) -> np.ndarray:
        directions = np.column_stack([np.cos(angles), np.sin(angles)])
        return threshold_objective_batch(directions @ mus.T, ranks, data.k, data.C)

    angles = np.arange(0.0, 2.0 * np.pi, resolution)
    values = scan(angles)
    best = min(0.0, float(values.min()))
    if refine:
        for centre in angles[np.argsort(values, kind='stable')[:10]]:
            window = np.linspace(centre - resolution, centre + resolution, 2001)
            best = min(best, float(scan(window).min()))
    return best


# ============================================================================
# CONE PROGRAM
# ============================================================================

@dataclass
class _Layout:
    d: int
    n_pairs: int
    upper: np.ndarray
    lower: np.ndarray
    hard: bool

    @property
    def a0(self) -> int:
        return self.d

    @property
    def b0(self) -> int:
        return self.d + self.n_pairs

    @property
    def eps0(self) -> int:
        return self.d + 2 * self.n_pairs

    @property
    def sig0(self) -> int:
        return self.eps0 + (0 if self.hard else self.upper.size)

    @property
    def size(self) -> int:
        return self.sig0 + (0 if self.hard else self.lower.size)


def _program(mus: np.ndarray, ranks: np.ndarray, k: int, C: float,
             hard: bool) -> Tuple[_Layout, np.ndarray, np.ndarray, np.ndarray]:
    """Objective vector and linear inequalities G x <= h of the cone program."""
    layout = _Layout(mus.shape[1], k - 1, np.flatnonzero(ranks < k),
                     np.flatnonzero(ranks > 1), hard)
    n = layout.size

    c = np.zeros(n)
    c[layout.a0:layout.b0] = 1.0
    c[layout.b0:layout.eps0] = -1.0
    c[layout.eps0:] = C

    rows = []
    for r in range(layout.n_pairs):
        row = np.zeros(n)
        row[layout.a0 + r], row[layout.b0 + r] = 1.0, -1.0
        rows.append(row)
    for r in range(layout.n_pairs - 1):
        row = np.zeros(n)
        row[layout.b0 + r], row[layout.a0 + r + 1] = 1.0, -1.0
        rows.append(row)
    for j, i in enumerate(layout.upper):
        row = np.zeros(n)
        row[:layout.d] = mus[i]
        row[layout.a0 + ranks[i] - 1] = -1.0
        if not hard:
            row[layout.eps0 + j] = -1.0
        rows.append(row)
    for j, i in enumerate(layout.lower):
        row = np.zeros(n)
        row[:layout.d] = -mus[i]
        row[layout.b0 + ranks[i] - 2] = 1.0
        if not hard:
            row[layout.sig0 + j] = -1.0
        rows.append(row)
    for j in range(layout.eps0, n):
        row = np.zeros(n)
        row[j] = -1.0
        rows.append(row)

    G = np.vstack(rows)
    return layout, c, G, np.zeros(G.shape[0])


@contextmanager
def _solver_options() -> Iterator[None]:
    """cvxopt reads its settings from the module-wide solvers.options only."""
    saved = dict(solvers.options)
    solvers.options.update(SOLVER_OPTIONS)
    try:
        yield
    finally:
        solvers.options.clear()
        solvers.options.update(saved)


def _socp(c: np.ndarray, G: np.ndarray, h: np.ndarray, d: int) -> Tuple[np.ndarray, Dict]:
    """Minimize c.x subject to G x <= h and ||x[:d]|| <= 1."""
    n = c.size
    Gq = np.zeros((d + 1, n))
    Gq[1:, :d] = -np.eye(d)
    hq = np.zeros(d + 1)
    hq[0] = 1.0

    with _solver_options():
        result = solvers.socp(matrix(c), Gl=matrix(G), hl=matrix(h),
                              Gq=[matrix(Gq)], hq=[matrix(hq)])
    status = result['status']
    x = None if result['x'] is None else np.array(result['x']).reshape(-1)
    info = {
        'status': status,
        'iterations': int(result.get('iterations', 0) or 0),
        'gap': result.get('gap'),
        'relative gap': result.get('relative gap'),
        'primal infeasibility': result.get('primal infeasibility'),
        'dual infeasibility': result.get('dual infeasibility'),
    }
    if status == 'optimal':
        return x, info

    gap = info['gap']
    pinf = info['primal infeasibility']
    objective = float(c @ x) if x is not None else np.inf
    if (status == 'unknown' and x is not None and gap is not None and pinf is not None
            and gap <= 1e-7 * (1.0 + abs(objective)) and pinf <= 1e-7):
        logger.warning(f"Cone solver stopped early (gap {gap:.2e}); accepting iterate")
        return x, info

    residuals = {key: float(value) for key, value in info.items()
                 if key not in ('status', 'iterations') and value is not None}
    error = SolverConvergenceError(
        f"cone solver finished with status '{status}'", status=status, residuals=residuals
    )
    error.iterate = x
    raise error


def _assemble(data: RankedDataset, w: np.ndarray, hard: bool, degenerate: bool,
              info: Dict) -> RankSolution:
    """Exact thresholds, slacks and residuals for a chosen direction."""
    mus, ranks, k = data.matrix, data.ranks, data.k
    scores = mus @ w
    C = np.inf if hard else data.C
    thresholds = solve_thresholds(scores, ranks, k, C)
    a, b = thresholds.a, thresholds.b

    ids = data.source_ids
    eps = {ids[i]: float(thresholds.eps[i]) for i in np.flatnonzero(ranks < k)}
    sig = {ids[i]: float(thresholds.sig[i]) for i in np.flatnonzero(ranks > 1)}
    slack_total = sum(eps.values()) + sum(sig.values())
    objective = float(np.sum(a - b) + (0.0 if hard else data.C * slack_total))

    violations = [0.0, float(np.linalg.norm(w)) - 1.0]
    violations.extend(a - b)
    violations.extend(b[:-1] - a[1:])
    upper = ranks < k
    lower = ranks > 1
    violations.extend(scores[upper] - a[ranks[upper] - 1] - thresholds.eps[upper])
    violations.extend(b[ranks[lower] - 2] - thresholds.sig[lower] - scores[lower])

    return RankSolution(
        w=w, a=a, b=b, eps=eps, sig=sig, objective=objective, margins=b - a,
        feasibility_residual=float(max(violations)), degenerate=degenerate,
        status=info.get('status', 'optimal'), iterations=info.get('iterations', 0),
    )


def solve_sum_of_margins(data: RankedDataset, tol: float = 1e-8,
                         hard: bool = False) -> RankSolution:
    """
    Solve the sum-of-margins program.

    Args:
        data: Ranked feature expectations (C taken from the dataset)
        tol: Accepted objective error
        hard: Drop the slacks (every instance must be ordered exactly)

    Returns:
        RankSolution with a unit-norm w, or w = 0 flagged degenerate when
        no direction achieves a positive total margin

    Raises:
        ValueError: Unbounded program or bad tolerance
        SolverConvergenceError: The cone solver did not converge
    """
    if not tol > 0:
        raise ValueError(f"tol must be positive, got {tol}")
    if not hard:
        data.check_bounded()

    raw = data.matrix
    ranks, k, d = data.ranks, data.k, data.d
    # Scores are shift invariant up to the thresholds; center and scale for conditioning
    centred = raw - raw.mean(axis=0)
    scale = max(1.0, float(np.abs(centred).max()))
    mus = centred / scale
    C = data.C

    layout, c, G, h = _program(mus, ranks, k, C, hard)
    try:
        x, info = _socp(c, G, h, d)
    except SolverConvergenceError as error:
        iterate = error.iterate
        if iterate is not None and np.linalg.norm(iterate[:d]) > 0:
            w_best = iterate[:d] / max(1.0, float(np.linalg.norm(iterate[:d])))
            error.best = _assemble(data, w_best, hard, False, {'status': error.status})
        raise

    w_first = x[:d]
    optimum = float(c @ x)
    degenerate = optimum >= -max(DEGENERATE_TOL, tol)

    if not degenerate:
        w = w_first / np.linalg.norm(w_first)
    elif hard:
        w = np.zeros(d)
    else:
        w, info = _best_flat_direction(mus, ranks, layout, c, G, h, optimum, info)
        if np.any(w) and solve_thresholds(mus @ w, ranks, k, C).objective > max(DEGENERATE_TOL,
                                                                                 tol):
            w = np.zeros(d)
        degenerate = not np.any(w)

    solution = _assemble(data, w, hard, degenerate, info)
    logger.debug(
        f"Solved {len(data.mus)} demonstrators, k={k}, d={d}: objective {solution.objective:.6g}, "
        f"degenerate={solution.degenerate}"
    )
    return solution


def _best_flat_direction(mus: np.ndarray, ranks: np.ndarray, layout: _Layout, c: np.ndarray,
                         G: np.ndarray, h: np.ndarray, optimum: float,
                         info: Dict) -> Tuple[np.ndarray, Dict]:
    """
    Among directions attaining a non-negative optimum, the one pointing most
    from the worst rank's mean towards the best rank's mean.

    Returns w = 0 when no such direction has a positive projection.
    """
    d = layout.d
    spread = mus[ranks == ranks.max()].mean(axis=0) - mus[ranks == 1].mean(axis=0)
    if np.linalg.norm(spread) <= 1e-12:
        return np.zeros(d), info

    c_flat = np.zeros(c.size)
    c_flat[:d] = -spread
    bound = max(optimum, 0.0) + 1e-8
    G_flat = np.vstack([G, c])
    h_flat = np.append(h, bound)
    try:
        x, flat_info = _socp(c_flat, G_flat, h_flat, d)
    except SolverConvergenceError as error:
        logger.warning(f"Direction search among flat optima stalled ({error}); keeping w = 0")
        return np.zeros(d), info
    if x is None:
        return np.zeros(d), info
    w = x[:d]
    if spread @ w <= 1e-5 * np.linalg.norm(spread) or np.linalg.norm(w) <= 1e-6:
        return np.zeros(d), info
    return w / np.linalg.norm(w), flat_info


def reward_from_w(w, fmap: FeatureMap) -> np.ndarray:
    """Per-state reward R(s) = w . phi(s)."""
    w = np.asarray(w, dtype=float).reshape(-1)
    if w.size != fmap.d:
        raise ValueError(f"w has {w.size} components, feature map has {fmap.d}")
    return fmap.phi @ w


# ============================================================================
# RANK REPAIR
# ============================================================================

@dataclass
class RepairResult:
    """Outcome of pruning or incremental building."""
    dataset: RankedDataset
    removed: List[str] = field(default_factory=list)
    swapped: List[Tuple[str, int, int]] = field(default_factory=list)
    solution: Optional[RankSolution] = None
    residual_max_slack: float = 0.0
    budget_exhausted: bool = False
    refused: List[str] = field(default_factory=list)

    @property
    def rejected(self) -> List[str]:
        return self.removed


def _slack_order(data: RankedDataset, solution: RankSolution) -> List[Tuple[float, str]]:
    ranked = [(round(solution.total_slack(sid), 12), sid) for sid in data.source_ids]
    return sorted(ranked, key=lambda item: (-item[0], item[1]))


def prune_misranked(data: RankedDataset, slack_tol: float = 1e-6, max_removals: int = 10,
                    mode: str = 'remove', tol: float = 1e-8) -> RepairResult:
    """
    Drop (or relabel) the demonstrator with the largest total slack until
    every slack is within ``slack_tol``.

    Args:
        data: Ranked dataset to repair
        slack_tol: Slack accepted as consistent
        max_removals: Budget of modifications (removals plus swaps)
        mode: 'remove', or 'swap' to first move a demonstrator one rank in
            the direction its slack points, removing it if it is still the
            worst afterwards
        tol: Solver tolerance

    Returns:
        RepairResult with the reduced dataset and the removal log in order
    """
    if mode not in ('remove', 'swap'):
        raise ValueError(f"unknown pruning mode '{mode}'")
    if max_removals < 0:
        raise ValueError("max_removals must be non-negative")

    result = RepairResult(dataset=data)
    solution = solve_sum_of_margins(data, tol)
    changes = 0
    swapped_ids = set()

    while True:
        order = _slack_order(result.dataset, solution)
        worst = order[0][0]
        if worst <= slack_tol:
            break
        if changes >= max_removals:
            result.budget_exhausted = True
            logger.info(f"Pruning budget exhausted with max slack {worst:.6g}")
            break

        target = None
        for slack, sid in order:
            if slack <= slack_tol:
                break
            if len(result.dataset.members(result.dataset.get(sid).rank)) > 1:
                target = sid
                break
            if sid not in result.refused:
                result.refused.append(sid)
                logger.warning(f"Refusing to empty rank of sole member {sid}")
        if target is None:
            break

        mu = result.dataset.get(target)
        if mode == 'swap' and target not in swapped_ids:
            step = 1 if solution.eps.get(target, 0.0) >= solution.sig.get(target, 0.0) else -1
            new_rank = mu.rank + step
            if 1 <= new_rank <= result.dataset.k:
                result.dataset = result.dataset.with_relabeled(target, new_rank)
                result.swapped.append((target, mu.rank, new_rank))
                swapped_ids.add(target)
                logger.info(f"Swapped {target} from rank {mu.rank} to {new_rank}")
                changes += 1
                solution = solve_sum_of_margins(result.dataset, tol)
                continue

        result.dataset = result.dataset.with_removed(target)
        result.removed.append(target)
        logger.info(f"Removed {target} (total slack {solution.total_slack(target):.6g})")
        changes += 1
        solution = solve_sum_of_margins(result.dataset, tol)

    result.solution = solution
    result.residual_max_slack = solution.max_slack
    return result


def incremental_build(seed: RankedDataset, candidates: Sequence[Mu], slack_tol: float = 1e-6,
                      tol: float = 1e-8) -> RepairResult:
    """
    Grow a consistent dataset one candidate at a time.

    Candidates are tried in order and kept only if the re-solved program
    keeps every slack within ``slack_tol``.

    Raises:
        ValueError: The seed itself needs slack above ``slack_tol``
    """
    solution = solve_sum_of_margins(seed, tol)
    if solution.max_slack > slack_tol:
        raise ValueError(
            f"seed dataset is not consistent: max slack {solution.max_slack:.6g} > {slack_tol}"
        )

    result = RepairResult(dataset=seed, solution=solution)
    for mu in candidates:
        if not 1 <= mu.rank <= seed.k:
            logger.warning(f"Rejected {mu.source_id}: rank {mu.rank} outside 1..{seed.k}")
            result.removed.append(mu.source_id)
            continue
        trial = result.dataset.with_added(mu)
        trial_solution = solve_sum_of_margins(trial, tol)
        if trial_solution.max_slack <= slack_tol:
            result.dataset = trial
            result.solution = trial_solution
        else:
            logger.info(f"Rejected {mu.source_id}: max slack {trial_solution.max_slack:.6g}")
            result.removed.append(mu.source_id)

    result.residual_max_slack = result.solution.max_slack
    return result
