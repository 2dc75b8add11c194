"""
File Formats
============

CSV and JSON codecs for every artifact the command line reads or writes:
- MDP JSON (validated on load)
- Trajectory text files (one trajectory per line) and the extended
  driver-log CSV (driver_id, t, state_id, occupied)
- Feature expectation CSV (source_id, rank, mu_0 .. mu_{d-1})
- Solution JSON, reward heatmap CSV and generic result tables

Floats are written in shortest round-trip form so every file parses back
into an equal value.
"""

import json
import logging
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Union

import numpy as np
import pandas as pd

from features import FeatureMap, Mu, Trajectory
from mdp_core import Mdp, validate_mdp
from ordinal_margin import RankSolution

logger = logging.getLogger('RankIRL.FileFormats')

PathLike = Union[str, Path]
TRAJECTORY_COLUMNS = ['driver_id', 't', 'state_id', 'occupied']


class FileFormatError(ValueError):
    """Malformed input file; ``line`` is 1-based when known."""

    def __init__(self, message: str, path: Optional[PathLike] = None,
                 line: Optional[int] = None):
        where = '' if path is None else f"{path}"
        if line is not None:
            where += f" line {line}"
        super().__init__(f"{where}: {message}" if where else message)
        self.path = path
        self.line = line


# ============================================================================
# JSON
# ============================================================================

def write_json(payload, path: PathLike) -> Path:
    path = Path(path)
    path.write_text(json.dumps(payload, indent=2) + '\n', encoding='utf-8')
    logger.info(f"Wrote {path}")
    return path


def read_json(path: PathLike):
    path = Path(path)
    try:
        return json.loads(path.read_text(encoding='utf-8'))
    except json.JSONDecodeError as error:
        raise FileFormatError(error.msg, path, error.lineno) from error


def mdp_to_dict(mdp: Mdp) -> Dict:
    payload = {
        'n_states': mdp.n_states,
        'n_actions': mdp.n_actions,
        'gamma': mdp.gamma,
        'transitions': mdp.transition.tolist(),
    }
    if mdp.reward is not None:
        payload['reward'] = mdp.reward.tolist()
    return payload


def mdp_from_dict(payload: Dict, validate: bool = True) -> Mdp:
    """
    Build an MDP from its JSON form.

    Raises:
        ValueError: missing keys, inconsistent sizes, or (with ``validate``)
            any structural violation found by validate_mdp
    """
    try:
        transition = np.array(payload['transitions'], dtype=float)
        mdp = Mdp(transition, float(payload['gamma']), payload.get('reward'))
        declared = (int(payload['n_states']), int(payload['n_actions']))
    except KeyError as error:
        raise ValueError(f"MDP description lacks {error}") from error
    except TypeError as error:
        raise ValueError(f"MDP description is malformed: {error}") from error
    if declared != (mdp.n_states, mdp.n_actions):
        raise ValueError(
            f"declared shape {declared} does not match transitions "
            f"({mdp.n_states}, {mdp.n_actions})"
        )
    if validate:
        violations = validate_mdp(mdp)
        if violations:
            raise ValueError("invalid MDP: " + "; ".join(violations))
    return mdp


def save_mdp(mdp: Mdp, path: PathLike) -> Path:
    return write_json(mdp_to_dict(mdp), path)


def load_mdp(path: PathLike, validate: bool = True) -> Mdp:
    return mdp_from_dict(read_json(path), validate)


def write_solution_json(solution: RankSolution, path: PathLike,
                        extra: Optional[Dict] = None) -> Path:
    payload = solution.to_dict()
    payload.update(extra or {})
    return write_json(payload, path)


def read_solution_json(path: PathLike) -> RankSolution:
    try:
        return RankSolution.from_dict(read_json(path))
    except KeyError as error:
        raise FileFormatError(f"solution lacks {error}", path) from error


# ============================================================================
# TRAJECTORIES
# ============================================================================

def read_trajectories(path: PathLike) -> List[Trajectory]:
    """One trajectory per non-blank line; '#' starts a comment."""
    path = Path(path)
    trajectories = []
    with open(path, encoding='utf-8') as handle:
        for number, line in enumerate(handle, start=1):
            text = line.split('#', 1)[0].strip()
            if not text:
                continue
            try:
                states = [int(token) for token in text.split()]
            except ValueError:
                raise FileFormatError(f"non-integer state id in {text!r}", path, number)
            if min(states) < 0:
                raise FileFormatError("negative state id", path, number)
            trajectories.append(Trajectory(states))
    if not trajectories:
        raise FileFormatError("no trajectories found", path)
    return trajectories


def write_trajectories(trajectories: Iterable[Trajectory], path: PathLike) -> Path:
    path = Path(path)
    lines = [' '.join(str(int(s)) for s in t.states) for t in trajectories]
    path.write_text('\n'.join(lines) + '\n', encoding='utf-8')
    return path


def write_trajectory_csv(records: Dict[str, Sequence[Trajectory]], path: PathLike) -> Path:
    """Driver logs in the extended CSV form, drivers in id order."""
    rows = []
    for driver in sorted(records):
        for trajectory in records[driver]:
            if trajectory.occupied is None or trajectory.timestamps is None:
                raise ValueError(f"trajectory of {driver} lacks occupancy or timestamps")
            for t, state, occupied in zip(trajectory.timestamps, trajectory.states,
                                          trajectory.occupied):
                rows.append((driver, int(t), int(state), int(occupied)))
    path = Path(path)
    pd.DataFrame(rows, columns=TRAJECTORY_COLUMNS).to_csv(path, index=False)
    return path


def read_trajectory_csv(path: PathLike) -> Dict[str, List[Trajectory]]:
    """
    Parse driver logs, splitting a driver's rows into trajectories.

    A new trajectory starts after every drop-off (occupied followed by
    vacant) and wherever consecutive timestamps are not one step apart.
    """
    frame = pd.read_csv(path, dtype={'driver_id': str})
    missing = [c for c in TRAJECTORY_COLUMNS if c not in frame.columns]
    if missing:
        raise FileFormatError(f"missing columns {missing}", path, 1)
    for column in ('t', 'state_id', 'occupied'):
        bad = pd.to_numeric(frame[column], errors='coerce').isna() | frame[column].isna()
        if bad.any():
            raise FileFormatError(f"malformed {column}", path, int(np.flatnonzero(bad)[0]) + 2)
    if not frame['occupied'].isin([0, 1]).all():
        row = int(np.flatnonzero(~frame['occupied'].isin([0, 1]).to_numpy())[0])
        raise FileFormatError("occupied must be 0 or 1", path, row + 2)
    if (frame['state_id'] < 0).any():
        row = int(np.flatnonzero((frame['state_id'] < 0).to_numpy())[0])
        raise FileFormatError("negative state id", path, row + 2)

    records: Dict[str, List[Trajectory]] = {}
    for driver, rows in frame.groupby('driver_id', sort=True):
        times = rows['t'].to_numpy(dtype=int)
        states = rows['state_id'].to_numpy(dtype=int)
        occupied = rows['occupied'].to_numpy(dtype=bool)
        breaks = (np.diff(times) != 1) | (occupied[:-1] & ~occupied[1:])
        starts = np.concatenate([[0], np.flatnonzero(breaks) + 1, [times.size]])
        records[driver] = [
            Trajectory(states[lo:hi], occupied[lo:hi], times[lo:hi])
            for lo, hi in zip(starts[:-1], starts[1:])
        ]
    return records


# ============================================================================
# FEATURES AND FEATURE EXPECTATIONS
# ============================================================================

def read_features_csv(path: PathLike) -> FeatureMap:
    """Header-less table, one row of raw features per state, normalized on ingestion."""
    frame = pd.read_csv(path, header=None, float_precision='round_trip')
    try:
        raw = frame.to_numpy(dtype=float)
    except ValueError as error:
        raise FileFormatError(f"non-numeric feature value: {error}", path) from error
    if np.isnan(raw).any():
        row = int(np.flatnonzero(np.isnan(raw).any(axis=1))[0])
        raise FileFormatError("missing feature value", path, row + 1)
    return FeatureMap.from_raw(raw)


def write_mu_csv(mus: Sequence[Mu], path: PathLike,
                 ranks: Optional[Sequence[int]] = None) -> Path:
    """
    Write feature expectations; ``ranks`` overrides the stored ranks
    (the command line writes user-facing labels).
    """
    if not mus:
        raise ValueError("nothing to write")
    d = mus[0].d
    frame = pd.DataFrame([mu.vector for mu in mus], columns=[f'mu_{i}' for i in range(d)])
    frame.insert(0, 'rank', list(ranks) if ranks is not None else [mu.rank for mu in mus])
    frame.insert(0, 'source_id', [mu.source_id for mu in mus])
    path = Path(path)
    frame.to_csv(path, index=False)
    return path


def read_mu_csv(path: PathLike) -> List[Mu]:
    frame = pd.read_csv(path, dtype={'source_id': str}, float_precision='round_trip')
    if list(frame.columns[:2]) != ['source_id', 'rank']:
        raise FileFormatError("header must start with source_id,rank", path, 1)
    mu_columns = list(frame.columns[2:])
    if not mu_columns or mu_columns != [f'mu_{i}' for i in range(len(mu_columns))]:
        raise FileFormatError("feature columns must be mu_0 .. mu_{d-1}", path, 1)

    mus = []
    for row, record in enumerate(frame.itertuples(index=False), start=2):
        values = pd.to_numeric(pd.Series(record[2:]), errors='coerce').to_numpy(dtype=float)
        rank = pd.to_numeric(pd.Series([record[1]]), errors='coerce').iloc[0]
        if np.isnan(values).any():
            raise FileFormatError("malformed feature value", path, row)
        if pd.isna(rank) or float(rank) != int(rank) or int(rank) < 1:
            raise FileFormatError(f"rank must be a positive integer, got {record[1]!r}", path, row)
        if pd.isna(record[0]):
            raise FileFormatError("missing source_id", path, row)
        mus.append(Mu(values, int(rank), str(record[0])))
    if not mus:
        raise FileFormatError("no feature expectation rows", path)
    return mus


# ============================================================================
# TABLES
# ============================================================================

def write_heatmap_csv(grid: np.ndarray, path: PathLike) -> Path:
    """Header-less table, one CSV row per grid row."""
    path = Path(path)
    pd.DataFrame(np.asarray(grid, dtype=float)).to_csv(path, header=False, index=False)
    logger.info(f"Wrote {path}")
    return path


def read_heatmap_csv(path: PathLike) -> np.ndarray:
    return pd.read_csv(path, header=None, float_precision='round_trip').to_numpy(dtype=float)


def write_table(frame: pd.DataFrame, path: PathLike) -> Path:
    path = Path(path)
    frame.to_csv(path, index=False)
    logger.info(f"Wrote {path}")
    return path


def read_table(path: PathLike) -> pd.DataFrame:
    return pd.read_csv(path, float_precision='round_trip')
