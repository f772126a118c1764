"""Regeneration structure of recorded walks.

A regeneration happens at t when the walk arrives by two consecutive steps
along the principal axis at a good site whose pre-pattern position was a
strict running maximum of the level, and the level never drops back to the
arrival level afterwards.  The never-again clause can only be checked to the
end of the trajectory, so records close to the horizon are censored; the
exponential backtail of backtracking excursions makes a censored
misclassification exponentially unlikely beyond the buffer.

Detection scans for all indices with that characterization.  The original
construction (attempt points S_k, failure levels M_k) is also replayed
literally by replay_def_s for cross-validation; the two agree on
non-censored times unless a regeneration hides inside the level window of a
failed attempt at a non-good site, which the agreement test would surface.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from .environment import EnvironmentSpec, base_conductance_between
from .geometry import AnalysisParams, Classifier
from .walk import Trajectory


class InsufficientDataError(ValueError):
    """Too few usable records or replicas for the requested statistic."""


@dataclass(frozen=True)
class RegenRecord:
    """One regeneration: index, site, increment to the next regeneration and
    the tie-direction conductance vector at the arrival edge.

    J and Z describe the increment to the next detected regeneration; on the
    final record they run to the horizon instead and the record is censored.
    """

    tau: int
    site: tuple
    J: int
    Z: tuple
    A: tuple
    censored: bool


def default_buffer(n_steps: int) -> int:
    return max(10_000, n_steps // 100)


def _step_pattern(traj: Trajectory) -> np.ndarray:
    """pattern[t] is true when X_t = X_{t-1} + e1 = X_{t-2} + 2 e1."""
    e1 = np.asarray(traj.spec.e1_move, dtype=np.int64)
    steps = np.diff(traj.sites, axis=0)
    is_e1 = np.all(steps == e1, axis=1)
    out = np.zeros(traj.sites.shape[0], dtype=bool)
    out[2:] = is_e1[1:] & is_e1[:-1]
    return out


def _strict_running_max(levels: np.ndarray) -> np.ndarray:
    out = np.zeros(levels.shape[0], dtype=bool)
    out[0] = True
    if levels.shape[0] > 1:
        out[1:] = levels[1:] > np.maximum.accumulate(levels)[:-1]
    return out


def ladder_times(traj: Trajectory) -> List[int]:
    """Indices of strict running maxima of the level, starting with 0."""
    return [int(i) for i in np.nonzero(_strict_running_max(traj.levels))[0]]


def open_ladder_index(traj: Trajectory, spec: EnvironmentSpec,
                      params: AnalysisParams,
                      classifier: Optional[Classifier] = None) -> Optional[int]:
    """First index arriving by a double principal step at an open site whose
    pre-pattern position strictly dominates all earlier levels."""
    cls = classifier if classifier is not None else Classifier(spec, params)
    pattern = _step_pattern(traj)
    strict = _strict_running_max(traj.levels)
    for t in np.nonzero(pattern)[0]:
        if strict[t - 2] and cls.vertex_is_open(traj.sites[t]):
            return int(t)
    return None


def _tie_conductances(spec: EnvironmentSpec, site) -> tuple:
    """a_x: base conductances from x - e1 toward every tie direction."""
    e1 = spec.e1_move
    prev = tuple(int(c) - int(e) for c, e in zip(site, e1))
    out = []
    for mv in spec.tie_moves:
        other = tuple(p + int(m) for p, m in zip(prev, mv))
        out.append(base_conductance_between(spec, prev, other))
    return tuple(out)


def detect_regenerations(traj: Trajectory, spec: EnvironmentSpec,
                         params: AnalysisParams, buffer: Optional[int] = None,
                         classifier: Optional[Classifier] = None) -> List[RegenRecord]:
    """All regeneration times of the trajectory, in order.

    A time t qualifies when (a) the walk arrives at X_t by two consecutive
    principal-axis steps and X_{t-2} is a strict running maximum, (b) X_t is
    good, and (c) the level never returns to or below the arrival level
    before the horizon.  Records in the final buffer steps, and the last
    record (whose increment is cut off), are censored.
    """
    n = traj.n_steps
    if buffer is None:
        buffer = default_buffer(n)
    if buffer < 0 or buffer >= max(n, 1):
        raise ValueError("buffer must lie inside the trajectory")
    cls = classifier if classifier is not None else Classifier(spec, params)
    levels = traj.levels
    pattern = _step_pattern(traj)
    strict = _strict_running_max(levels)
    candidates = pattern.copy()
    candidates[2:] &= strict[:-2]
    # separation: nothing at or below the candidate level afterwards
    suffix_min = np.empty(n + 1)
    suffix_min[-1] = np.inf
    if n > 0:
        suffix_min[:-1] = np.minimum.accumulate(levels[::-1])[::-1][1:]
    separated = suffix_min > levels
    taus = [int(t) for t in np.nonzero(candidates & separated)[0]
            if cls.is_good(traj.sites[t])]
    records = []
    for i, t in enumerate(taus):
        last = i + 1 == len(taus)
        nxt = n if last else taus[i + 1]
        records.append(RegenRecord(
            tau=t,
            site=tuple(int(c) for c in traj.sites[t]),
            J=int(nxt - t),
            Z=tuple(int(c) for c in traj.sites[nxt] - traj.sites[t]),
            A=_tie_conductances(spec, traj.sites[t]),
            censored=last or t > n - buffer,
        ))
    return records


def replay_def_s(traj: Trajectory, spec: EnvironmentSpec,
                 params: AnalysisParams, buffer: Optional[int] = None,
                 classifier: Optional[Classifier] = None) -> List[int]:
    """Literal replay of the attempt construction, for cross-validation.

    Attempts S_k restart after the walk exceeds the failure level M_k: the
    backtrack level if the attempt site was good, otherwise the top of its
    directed reach.  The first attempt that is good and never backtracks is
    the regeneration; the chain then restarts there.  Returns the times
    found before the censoring buffer.
    """
    n = traj.n_steps
    if buffer is None:
        buffer = default_buffer(n)
    cls = classifier if classifier is not None else Classifier(spec, params)
    levels = traj.levels
    pattern = _step_pattern(traj)
    taus: List[int] = []
    s0 = 0
    while True:
        tau = _replay_one(traj, levels, pattern, s0, cls)
        if tau is None or tau > n - buffer:
            return taus
        taus.append(tau)
        s0 = tau


def _first_index_above(levels: np.ndarray, start: int, threshold: float) -> Optional[int]:
    above = levels[start:] > threshold
    if not above.any():
        return None
    return start + int(np.argmax(above))


def _replay_one(traj: Trajectory, levels: np.ndarray, pattern: np.ndarray,
                s0: int, cls: Classifier) -> Optional[int]:
    n = traj.n_steps
    m_level = levels[s0]
    while True:
        t_entry = _first_index_above(levels, s0, m_level)
        if t_entry is None:
            return None
        # first pattern index at or after t_entry + 2 whose pre-pattern site
        # strictly dominates the levels since t_entry, at an open site
        local_max = np.maximum.accumulate(levels[t_entry:])
        s = None
        for c in np.nonzero(pattern[t_entry + 2:])[0]:
            i = int(t_entry + 2 + c)
            pre = i - 2
            if pre > t_entry and not levels[pre] > local_max[pre - 1 - t_entry]:
                continue
            if cls.vertex_is_open(traj.sites[i]):
                s = i
                break
        if s is None:
            return None
        if cls.is_good(traj.sites[s]):
            backtrack = _first_at_or_below(levels, s + 1, levels[s])
            if backtrack is None:
                return s
            r = backtrack
        else:
            reach = cls.directed_reach_max_level(traj.sites[s])
            r = _first_index_above(levels, s0, levels[s] + reach)
            if r is None:
                return None
        m_level = float(levels[s0:r + 1].max())


def _first_at_or_below(levels: np.ndarray, start: int, threshold: float) -> Optional[int]:
    if start > levels.shape[0] - 1:
        return None
    below = levels[start:] <= threshold
    if not below.any():
        return None
    return start + int(np.argmax(below))


# -- chain statistics -----------------------------------------------------------

def survival_slope(values: Sequence[float], n_points: int = 12,
                   min_count: int = 10, span_decades: float = 4.0) -> Optional[float]:
    """Log-log slope of the empirical survival function over its tail decades.

    The threshold grid is anchored at the largest value that still has
    min_count exceedances, not at the sample maximum: for heavy tails the
    maximum sits decades beyond the last resolvable threshold.  Returns None
    when fewer than three usable thresholds exist (degenerate or too-light
    tails).
    """
    v = np.sort(np.asarray(values, dtype=np.float64))
    v = v[v > 0]
    if v.size <= min_count + 3:
        return None
    top = float(v[-min_count])
    lo = max(float(np.median(v)), top / 10.0 ** span_decades)
    if not top > lo:
        return None
    thresholds = np.unique(np.logspace(np.log10(lo), np.log10(top), n_points))
    xs, ys = [], []
    for t in thresholds:
        count = int((v > t).sum())
        if count >= min_count and count < v.size:
            xs.append(np.log(t))
            ys.append(np.log(count / v.size))
    if len(xs) < 3:
        return None
    return float(np.polyfit(xs, ys, 1)[0])


def _lag1_autocorr(x: np.ndarray) -> Optional[float]:
    x = np.asarray(x, dtype=np.float64)
    if x.size < 3 or x.std() == 0.0:
        return None
    return float(np.corrcoef(x[:-1], x[1:])[0, 1])


@dataclass(frozen=True)
class RegenChainStats:
    n_records: int
    n_censored: int
    mean_j: float
    mean_z: tuple
    mean_z_level: float
    speed: tuple               # mean_z / mean_j
    j_tail_slope: Optional[float]
    autocorr_j: Optional[float]
    autocorr_z_level: Optional[float]
    a_mean: tuple
    a_autocorr: Optional[float]


def regen_chain_stats(records: Sequence[RegenRecord],
                      spec: EnvironmentSpec) -> RegenChainStats:
    """Increment-chain summary over the non-censored records."""
    live = [r for r in records if not r.censored]
    if len(live) < 2:
        raise InsufficientDataError(
            f"need at least 2 non-censored records, have {len(live)}")
    j = np.asarray([r.J for r in live], dtype=np.float64)
    z = np.asarray([r.Z for r in live], dtype=np.float64)
    a = np.asarray([r.A for r in live], dtype=np.float64)
    ell = np.asarray(spec.ell)
    z_level = z @ ell
    mean_j = float(j.mean())
    mean_z = tuple(float(c) for c in z.mean(axis=0))
    return RegenChainStats(
        n_records=len(live),
        n_censored=len(records) - len(live),
        mean_j=mean_j,
        mean_z=mean_z,
        mean_z_level=float(z_level.mean()),
        speed=tuple(c / mean_j for c in mean_z),
        j_tail_slope=survival_slope(j),
        autocorr_j=_lag1_autocorr(j),
        autocorr_z_level=_lag1_autocorr(z_level),
        a_mean=tuple(float(c) for c in a.mean(axis=0)),
        a_autocorr=_lag1_autocorr(a[:, 0]),
    )


def write_records_csv(path, spec: EnvironmentSpec, records_by_replica) -> None:
    """CSV export: one row per record, replica then time order."""
    ell = np.asarray(spec.ell)
    zc = [f"Z_{i}" for i in range(spec.d)]
    ac = [f"A_{i}" for i in range(len(spec.tie_moves))]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["replica", "tau", "J", *zc, "Z_level", "censored", *ac])
        for replica, records in records_by_replica:
            for r in records:
                z_level = float(np.asarray(r.Z) @ ell)
                writer.writerow([replica, r.tau, r.J, *r.Z, z_level,
                                 int(r.censored), *r.A])
