"""Desk-scale experiments: speed dichotomy, displacement exponent, box exits,
backtrack tails, idealized trap times, trap occupation.

Every experiment is a pure function of its config: replica r always runs in
the environment seeded derive_seed(seed, 1, r) with walk seed
derive_seed(seed, 2, r), and aggregation is a deterministic fold in replica
order, so results are independent of the worker count.  When a config names
an output path the experiment writes config.json (echo plus timestamp),
results.csv (per-replica or per-threshold rows) and summary.json there.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import integrate, stats

from .environment import ConductanceLaw, EnvironmentSpec, derive_seed
from .geometry import AnalysisParams, Classifier
from .regeneration import (
    InsufficientDataError,
    RegenRecord,
    default_buffer,
    detect_regenerations,
    survival_slope,
    write_records_csv,
)
from .walk import (
    EXIT_POSITIVE,
    run,
    run_exit_batch,
    run_summary_batch,
    transition_distribution,
)

MIN_BATCHES = 10


class NonPositiveLevelError(ValueError):
    """Every replica finished at level <= 0; the log-ratio is undefined."""


# -- presets ----------------------------------------------------------------------

PRESETS = {
    # uniformly elliptic disorder: every edge is K-normal for K = 128
    "elliptic": {
        "spec": {"d": 2, "lambda": 0.3, "ell_hat": [1.0, 0.0],
                 "law": {"kind": "log_uniform", "k": 100.0}, "seed": 2026},
        "params": {"k": 128.0},
    },
    # heavy tails below the ballisticity threshold, gamma = 0.5
    "gamma05": {
        "spec": {"d": 2, "lambda": 1.0, "ell_hat": [1.0, 0.0],
                 "law": {"kind": "pareto", "gamma": 0.5}, "seed": 2026},
        "params": {"k": 1.0e4},
    },
    # gamma = 0.75, still zero speed
    "gamma075": {
        "spec": {"d": 2, "lambda": 1.0, "ell_hat": [1.0, 0.0],
                 "law": {"kind": "pareto", "gamma": 0.75}, "seed": 2026},
        "params": {"k": 1.0e4},
    },
    # finite-mean heavy tail: ballistic
    "pareto2": {
        "spec": {"d": 2, "lambda": 1.0, "ell_hat": [1.0, 0.0],
                 "law": {"kind": "pareto", "gamma": 2.0}, "seed": 2026},
        "params": {"k": 1.0e4},
    },
    # bounded disorder at unit bias: ballistic
    "logu2": {
        "spec": {"d": 2, "lambda": 1.0, "ell_hat": [1.0, 0.0],
                 "law": {"kind": "log_uniform", "k": 2.0}, "seed": 2026},
        "params": {"k": 8.0},
    },
}


def dyadic_checkpoints(horizon: int, first: int = 16) -> tuple:
    """Powers of two from `first` to the horizon, plus the horizon itself."""
    if horizon < 1:
        raise ValueError("horizon must be positive")
    out = []
    t = first
    while t < horizon:
        out.append(t)
        t *= 2
    out.append(horizon)
    return tuple(out)


@dataclass(frozen=True)
class ExperimentConfig:
    spec: EnvironmentSpec
    params: AnalysisParams
    horizon: int
    replicas: int
    checkpoints: tuple = ()
    output_path: Optional[str] = None

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be positive")
        if self.replicas < 1:
            raise ValueError("replicas must be at least 1")
        cps = tuple(int(c) for c in self.checkpoints)
        if not cps:
            cps = dyadic_checkpoints(self.horizon)
        if list(cps) != sorted(cps):
            raise ValueError("checkpoints must be sorted")
        if cps[0] < 1 or cps[-1] > self.horizon:
            raise ValueError("checkpoints must lie in [1, horizon]")
        object.__setattr__(self, "checkpoints", cps)

    def env_seed(self, replica: int) -> int:
        return derive_seed(self.spec.seed, 1, replica)

    def walk_seed(self, replica: int) -> int:
        return derive_seed(self.spec.seed, 2, replica)

    def to_dict(self) -> dict:
        return {
            "spec": self.spec.to_dict(),
            "params": dataclasses.asdict(self.params),
            "horizon": self.horizon,
            "replicas": self.replicas,
            "checkpoints": list(self.checkpoints),
            "output_path": self.output_path,
        }

    @classmethod
    def from_dict(cls, d) -> "ExperimentConfig":
        return cls(
            spec=EnvironmentSpec.from_dict(d["spec"]),
            params=AnalysisParams(**d["params"]),
            horizon=int(d["horizon"]),
            replicas=int(d["replicas"]),
            checkpoints=tuple(d.get("checkpoints", ())),
            output_path=d.get("output_path"),
        )


def preset_config(name: str, horizon: int, replicas: int, seed: Optional[int] = None,
                  checkpoints: tuple = (), output_path: Optional[str] = None,
                  lam: Optional[float] = None) -> ExperimentConfig:
    """Expand a named preset into a full config; seed and lambda overridable."""
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    entry = PRESETS[name]
    spec_d = dict(entry["spec"])
    if seed is not None:
        spec_d["seed"] = int(seed)
    if lam is not None:
        spec_d["lambda"] = float(lam)
    return ExperimentConfig(
        spec=EnvironmentSpec.from_dict(spec_d),
        params=AnalysisParams(**entry["params"]),
        horizon=horizon,
        replicas=replicas,
        checkpoints=checkpoints,
        output_path=output_path,
    )


# -- shared plumbing ---------------------------------------------------------------

def _batch_ci(values: np.ndarray, n_batches: int = MIN_BATCHES):
    """Batch-means 95% confidence interval for the mean of `values`.

    Values are folded into n_batches contiguous batches in replica order.
    """
    if values.size < n_batches:
        raise InsufficientDataError(
            f"need at least {n_batches} replicas for a batch-means CI")
    batches = np.array([b.mean() for b in np.array_split(values, n_batches)])
    mean = float(batches.mean())
    half = float(stats.t.ppf(0.975, n_batches - 1)
                 * batches.std(ddof=1) / math.sqrt(n_batches))
    return mean, mean - half, mean + half


def _chunk_ranges(n: int, workers: int):
    size = (n + workers - 1) // workers
    return [(lo, min(lo + size, n)) for lo in range(0, n, size)]


def _summary_worker(spec_dict, start, horizon, env_seeds, walk_seeds, checkpoints):
    spec = EnvironmentSpec.from_dict(spec_dict)
    return run_summary_batch(spec, start, horizon, env_seeds, walk_seeds,
                             checkpoints)


def _run_summaries(config: ExperimentConfig, workers: int = 1):
    """(sites (R, C, d), min_levels (R,), final_levels (R,)) for all replicas."""
    env_seeds = [config.env_seed(r) for r in range(config.replicas)]
    walk_seeds = [config.walk_seed(r) for r in range(config.replicas)]
    origin = (0,) * config.spec.d
    if workers <= 1 or config.replicas < 2 * workers:
        return run_summary_batch(config.spec, origin, config.horizon,
                                 env_seeds, walk_seeds, config.checkpoints)
    parts = []
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [
            pool.submit(_summary_worker, config.spec.to_dict(), origin,
                        config.horizon, env_seeds[lo:hi], walk_seeds[lo:hi],
                        config.checkpoints)
            for lo, hi in _chunk_ranges(config.replicas, workers)
        ]
        for f in futures:
            parts.append(f.result())
    sites = np.concatenate([p[0] for p in parts], axis=0)
    mins = np.concatenate([p[1] for p in parts])
    finals = np.concatenate([p[2] for p in parts])
    return sites, mins, finals


def write_outputs(config: ExperimentConfig, rows: Sequence[dict],
                  fieldnames: Sequence[str], summary: dict,
                  out_dir=None, overwrite: bool = False) -> Path:
    """Write config.json / results.csv / summary.json into the output directory.

    Refuses to touch an existing directory unless overwrite is set.  Output
    bytes depend only on the config and results, except the timestamp field.
    """
    target = Path(out_dir if out_dir is not None else config.output_path)
    if target.exists() and not overwrite:
        raise FileExistsError(
            f"output directory {target} exists; pass overwrite to replace it")
    target.mkdir(parents=True, exist_ok=True)
    echo = {"config": config.to_dict(),
            "timestamp": datetime.now(timezone.utc).isoformat()}
    (target / "config.json").write_text(json.dumps(echo, indent=2, sort_keys=True))
    with open(target / "results.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(fieldnames))
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    (target / "summary.json").write_text(json.dumps(summary, indent=2,
                                                    sort_keys=True))
    return target


# -- speed -------------------------------------------------------------------------

@dataclass(frozen=True)
class SpeedEstimate:
    """Per-checkpoint velocity along ell_hat with batch-means CIs."""

    checkpoints: tuple
    v_level: tuple           # mean of (X_t . ell) / t per checkpoint
    ci: tuple                # (low, high) per checkpoint
    v_vector: tuple          # mean of X_t / t per checkpoint
    n_replicas: int
    n_batches: int


def estimate_speed(config: ExperimentConfig, workers: int = 1,
                   out_dir=None, overwrite: bool = False) -> SpeedEstimate:
    if config.replicas < MIN_BATCHES:
        raise InsufficientDataError(
            f"speed estimation needs at least {MIN_BATCHES} replicas")
    sites, _, _ = _run_summaries(config, workers)
    times = np.asarray(config.checkpoints, dtype=np.float64)
    levels = sites @ config.spec.ell            # (R, C)
    v_level, ci = [], []
    for ci_idx, t in enumerate(times):
        mean, lo, hi = _batch_ci(levels[:, ci_idx] / t)
        v_level.append(mean)
        ci.append((lo, hi))
    v_vec = tuple(
        tuple(float(c) for c in sites[:, i, :].mean(axis=0) / t)
        for i, t in enumerate(times)
    )
    est = SpeedEstimate(
        checkpoints=config.checkpoints,
        v_level=tuple(v_level),
        ci=tuple(ci),
        v_vector=v_vec,
        n_replicas=config.replicas,
        n_batches=MIN_BATCHES,
    )
    if out_dir is not None or config.output_path is not None:
        names = ["replica"] + [f"level_{t}" for t in config.checkpoints]
        rows = [
            {"replica": r, **{f"level_{t}": float(levels[r, i])
                              for i, t in enumerate(config.checkpoints)}}
            for r in range(config.replicas)
        ]
        summary = {
            "experiment": "speed",
            "checkpoints": list(config.checkpoints),
            "v_level": list(est.v_level),
            "ci": [list(c) for c in est.ci],
            "v_vector": [list(v) for v in est.v_vector],
            "n_replicas": est.n_replicas,
        }
        write_outputs(config, rows, names, summary, out_dir, overwrite)
    return est


def homogeneous_speed(spec: EnvironmentSpec) -> float:
    """Exact drift along ell_hat for a constant-conductance environment."""
    probs = transition_distribution(spec, (0,) * spec.d)
    drift = np.zeros(spec.d)
    for axis in range(spec.d):
        drift[axis] = probs[2 * axis] - probs[2 * axis + 1]
    return float(drift @ spec.ell)


# -- displacement exponent -----------------------------------------------------------

@dataclass(frozen=True)
class ExponentEstimate:
    """Polynomial displacement order fitted from checkpoint levels."""

    slope: float
    stderr: float
    per_checkpoint_levels: tuple    # (time, median level, replicas used)
    method: str
    n_excluded: int

    def __post_init__(self):
        if not math.isfinite(self.slope):
            raise ValueError("slope must be finite")
        if self.stderr < 0:
            raise ValueError("stderr must be nonnegative")


def exponent_from_levels(checkpoints: Sequence[int],
                         levels: np.ndarray, method: str) -> ExponentEstimate:
    """Estimator core on a (replicas, checkpoints) level table.

    terminal_ratio: median over replicas of ln(level)/ln(t) at the final
    checkpoint, with a normal-approximation standard error of the median.
    dyadic_regression: OLS slope of ln(median level) against ln(t).
    Replicas with final level <= 0 are excluded and counted.
    """
    times = np.asarray(checkpoints, dtype=np.float64)
    levels = np.asarray(levels, dtype=np.float64)
    usable = levels[:, -1] > 0
    n_excluded = int((~usable).sum())
    kept = levels[usable]
    if kept.shape[0] == 0:
        raise NonPositiveLevelError(
            "no replica finished at a positive level; cannot fit an exponent")
    table = []
    for i, t in enumerate(times):
        col = kept[:, i]
        pos = col[col > 0]
        med = float(np.median(pos)) if pos.size else float("nan")
        table.append((float(t), med, int(pos.size)))
    if method == "terminal_ratio":
        ratios = np.log(kept[:, -1]) / math.log(times[-1])
        slope = float(np.median(ratios))
        stderr = float(1.2533 * ratios.std(ddof=1) / math.sqrt(ratios.size)
                       if ratios.size > 1 else 0.0)
    elif method == "dyadic_regression":
        pts = [(math.log(t), math.log(m)) for t, m, n in table
               if n > 0 and m > 0]
        if len(pts) < 2:
            raise NonPositiveLevelError(
                "fewer than two checkpoints with positive median level")
        x = np.array([p[0] for p in pts])
        y = np.array([p[1] for p in pts])
        slope_f, intercept = np.polyfit(x, y, 1)
        resid = y - (slope_f * x + intercept)
        dof = len(pts) - 2
        if dof > 0:
            sxx = float(((x - x.mean()) ** 2).sum())
            stderr = float(math.sqrt(max(resid @ resid, 0.0) / dof / sxx))
        else:
            stderr = 0.0
        slope = float(slope_f)
    else:
        raise ValueError("method must be terminal_ratio or dyadic_regression")
    return ExponentEstimate(slope=slope, stderr=stderr,
                            per_checkpoint_levels=tuple(table),
                            method=method, n_excluded=n_excluded)


def estimate_exponent(config: ExperimentConfig, workers: int = 1,
                      out_dir=None, overwrite: bool = False) -> dict:
    """Both exponent estimators on simulated replicas, keyed by method."""
    sites, _, _ = _run_summaries(config, workers)
    levels = sites @ config.spec.ell
    out = {
        method: exponent_from_levels(config.checkpoints, levels, method)
        for method in ("terminal_ratio", "dyadic_regression")
    }
    if out_dir is not None or config.output_path is not None:
        names = ["replica"] + [f"level_{t}" for t in config.checkpoints]
        rows = [
            {"replica": r, **{f"level_{t}": float(levels[r, i])
                              for i, t in enumerate(config.checkpoints)}}
            for r in range(config.replicas)
        ]
        summary = {
            "experiment": "exponent",
            "exponent_median": out["terminal_ratio"].slope,
            "terminal_stderr": out["terminal_ratio"].stderr,
            "regression_slope": out["dyadic_regression"].slope,
            "regression_stderr": out["dyadic_regression"].stderr,
            "n_excluded": out["terminal_ratio"].n_excluded,
            "per_checkpoint_levels":
                [list(row) for row in out["terminal_ratio"].per_checkpoint_levels],
        }
        write_outputs(config, rows, names, summary, out_dir, overwrite)
    return out


# -- box exit probabilities -----------------------------------------------------------

@dataclass(frozen=True)
class ExitTable:
    """Wrong-exit probability per box scale with a log-linear slope."""

    rows: tuple                  # (L, p_wrong, ci_low, ci_high)
    slope: Optional[float]
    alpha_prime: float


def exit_probability_experiment(config: ExperimentConfig, l_list: Sequence[int],
                                alpha_prime: float = 1.5, workers: int = 1,
                                out_dir=None, overwrite: bool = False) -> ExitTable:
    if list(l_list) != sorted(l_list):
        raise ValueError("l_list must be increasing")
    if config.replicas < MIN_BATCHES:
        raise InsufficientDataError(
            f"exit experiment needs at least {MIN_BATCHES} replicas")
    env_seeds = [config.env_seed(r) for r in range(config.replicas)]
    walk_seeds = [config.walk_seed(r) for r in range(config.replicas)]
    origin = (0,) * config.spec.d
    rows = []
    detail = []
    for big_l in l_list:
        cats, steps = run_exit_batch(config.spec, origin, float(big_l),
                                     float(big_l) ** alpha_prime,
                                     config.horizon, env_seeds, walk_seeds)
        wrong = np.array([c != EXIT_POSITIVE for c in cats], dtype=np.float64)
        mean, lo, hi = _batch_ci(wrong)
        rows.append((int(big_l), mean, lo, hi))
        detail.extend(
            {"L": int(big_l), "replica": r, "category": cats[r],
             "steps": int(steps[r])}
            for r in range(config.replicas)
        )
    slope = None
    if all(r[1] > 0 for r in rows) and len(rows) >= 2:
        slope = float(np.polyfit([r[0] for r in rows],
                                 [math.log(r[1]) for r in rows], 1)[0])
    table = ExitTable(rows=tuple(rows), slope=slope, alpha_prime=alpha_prime)
    if out_dir is not None or config.output_path is not None:
        summary = {
            "experiment": "exit_probability",
            "alpha_prime": alpha_prime,
            "rows": [list(r) for r in rows],
            "slope": slope,
        }
        write_outputs(config, detail, ["L", "replica", "category", "steps"],
                      summary, out_dir, overwrite)
    return table


# -- backtrack tail ---------------------------------------------------------------------

@dataclass(frozen=True)
class BacktrackTable:
    """P[min level <= -k] per k with a log-linear slope over positive entries."""

    rows: tuple                  # (k, p, ci_low, ci_high)
    slope: Optional[float]


def backtrack_tail_experiment(config: ExperimentConfig, k_list: Sequence[int],
                              workers: int = 1, out_dir=None,
                              overwrite: bool = False) -> BacktrackTable:
    if config.replicas < MIN_BATCHES:
        raise InsufficientDataError(
            f"backtrack experiment needs at least {MIN_BATCHES} replicas")
    _, min_levels, _ = _run_summaries(config, workers)
    rows = []
    for k in k_list:
        hit = (min_levels <= -float(k)).astype(np.float64)
        mean, lo, hi = _batch_ci(hit)
        rows.append((int(k), mean, lo, hi))
    pos = [(k, p) for k, p, _, _ in rows if p > 0]
    slope = None
    if len(pos) >= 2:
        slope = float(np.polyfit([k for k, _ in pos],
                                 [math.log(p) for _, p in pos], 1)[0])
    table = BacktrackTable(rows=tuple(rows), slope=slope)
    if out_dir is not None or config.output_path is not None:
        detail = [{"replica": r, "min_level": float(min_levels[r])}
                  for r in range(config.replicas)]
        summary = {"experiment": "backtrack_tail",
                   "rows": [list(r) for r in rows], "slope": slope}
        write_outputs(config, detail, ["replica", "min_level"], summary,
                      out_dir, overwrite)
    return table


# -- idealized traps -----------------------------------------------------------------------

@dataclass(frozen=True)
class TrapSamples:
    """Idealized trap times with their empirical tail slope."""

    variant: str
    samples: np.ndarray
    tail_slope: Optional[float]
    zero_fraction: float


def idealized_trap_sampler(law: ConductanceLaw, variant: str, d: int,
                           n_samples: int, seed: int) -> TrapSamples:
    """Idealized trap time samples.

    X1 is the sojourn at a single high edge: geometric with success chance
    (1/c) for one conductance draw c (capped at 1).  X2 models the
    low-conductance funnel: the walk enters with probability c' and then
    stays a geometric time of parameter c', where c' is the largest of
    4d - 2 draws (capped at 1); a missed entry contributes 0.  Geometric
    variables take values in {1, 2, ...} with mean 1/p.
    """
    if n_samples < 1000:
        raise ValueError("need at least 1000 samples")
    if variant not in ("X1", "X2"):
        raise ValueError("variant must be X1 or X2")
    rng = np.random.default_rng(seed)
    if variant == "X1":
        c = law.quantile(rng.random(n_samples))
        p = np.minimum(1.0 / c, 1.0)
        samples = rng.geometric(p).astype(np.float64)
    else:
        draws = law.quantile(rng.random((n_samples, 4 * d - 2)))
        cp = np.minimum(draws.max(axis=1), 1.0)
        entered = rng.random(n_samples) < cp
        samples = np.where(entered, rng.geometric(cp), 0).astype(np.float64)
    return TrapSamples(
        variant=variant,
        samples=samples,
        tail_slope=survival_slope(samples[samples > 0], span_decades=6.0),
        zero_fraction=float((samples == 0).mean()),
    )


def x1_survival_exact(law: ConductanceLaw, n: int) -> float:
    """P[X1 > n] = E[(1 - (1/c) ^ 1)^n] by quadrature over the law's quantiles."""
    def integrand(u):
        c = law.quantile(u)
        return (1.0 - min(1.0 / c, 1.0)) ** n
    val, _ = integrate.quad(integrand, 0.0, 1.0, limit=400)
    return float(val)


# -- trap occupation ---------------------------------------------------------------------

@dataclass(frozen=True)
class TrapOccupation:
    """Share of time at bad sites with per-visit sojourn statistics."""

    bad_fraction: float
    n_sojourns: int
    mean_sojourn: float
    max_sojourn: int
    per_replica: tuple          # (replica, bad_fraction, n_sojourns, mean, max)


def _bad_runs(flags: np.ndarray):
    """Lengths of maximal runs of True in flags."""
    runs = []
    count = 0
    for f in flags:
        if f:
            count += 1
        elif count:
            runs.append(count)
            count = 0
    if count:
        runs.append(count)
    return runs


def trap_occupation_experiment(config: ExperimentConfig, workers: int = 1,
                               out_dir=None, overwrite: bool = False) -> TrapOccupation:
    if config.horizon < 10 ** 5:
        raise ValueError("trap occupation needs a horizon of at least 1e5")
    per_replica = []
    all_runs = []
    bad_time = 0
    total = 0
    for r in range(config.replicas):
        spec_r = dataclasses.replace(config.spec, seed=config.env_seed(r))
        traj = run(spec_r, (0,) * spec_r.d, config.horizon,
                   walk_seed=config.walk_seed(r))
        cls = Classifier(spec_r, config.params)
        uniq, inverse = np.unique(traj.sites, axis=0, return_inverse=True)
        flags = np.array([not cls.is_good(site) for site in uniq])
        bad = flags[inverse]
        runs = _bad_runs(bad)
        frac = float(bad.mean())
        per_replica.append((r, frac, len(runs),
                            float(np.mean(runs)) if runs else 0.0,
                            int(max(runs)) if runs else 0))
        all_runs.extend(runs)
        bad_time += int(bad.sum())
        total += bad.size
    occ = TrapOccupation(
        bad_fraction=bad_time / total,
        n_sojourns=len(all_runs),
        mean_sojourn=float(np.mean(all_runs)) if all_runs else 0.0,
        max_sojourn=int(max(all_runs)) if all_runs else 0,
        per_replica=tuple(per_replica),
    )
    if out_dir is not None or config.output_path is not None:
        rows = [{"replica": r, "bad_fraction": f, "n_sojourns": n,
                 "mean_sojourn": m, "max_sojourn": mx}
                for r, f, n, m, mx in per_replica]
        summary = {"experiment": "trap_occupation",
                   "bad_fraction": occ.bad_fraction,
                   "n_sojourns": occ.n_sojourns,
                   "mean_sojourn": occ.mean_sojourn,
                   "max_sojourn": occ.max_sojourn}
        write_outputs(config, rows,
                      ["replica", "bad_fraction", "n_sojourns", "mean_sojourn",
                       "max_sojourn"], summary, out_dir, overwrite)
    return occ


# -- regeneration survey ---------------------------------------------------------------

@dataclass(frozen=True)
class RegenSurvey:
    """Regeneration chains pooled over replicas.

    Autocorrelations come from consecutive non-censored pairs within each
    replica (never across replica boundaries); the J tail is fitted on the
    pooled non-censored durations.
    """

    n_records: int
    n_censored: int
    mean_j: float
    mean_z_level: float
    speed_level: float
    j_tail_slope: Optional[float]
    autocorr_j: Optional[float]
    autocorr_z_level: Optional[float]
    per_replica_counts: tuple


def _paired_autocorr(chains) -> Optional[float]:
    left, right = [], []
    for chain in chains:
        for i in range(len(chain) - 1):
            left.append(chain[i])
            right.append(chain[i + 1])
    if len(left) < 3:
        return None
    left = np.asarray(left)
    right = np.asarray(right)
    if left.std() == 0 or right.std() == 0:
        return None
    return float(np.corrcoef(left, right)[0, 1])


def _records_worker(spec_dict, params_dict, horizon, env_seed, walk_seed, buffer):
    spec = EnvironmentSpec.from_dict(spec_dict)
    spec = dataclasses.replace(spec, seed=env_seed)
    params = AnalysisParams(**params_dict)
    traj = run(spec, (0,) * spec.d, horizon, walk_seed=walk_seed)
    return detect_regenerations(traj, spec, params, buffer=buffer)


def regeneration_survey(config: ExperimentConfig, buffer: Optional[int] = None,
                        workers: int = 1, out_dir=None,
                        overwrite: bool = False):
    """Detect regenerations on every replica and pool the chain statistics.

    Returns (records_by_replica, RegenSurvey).
    """
    if buffer is None:
        buffer = default_buffer(config.horizon)
    args = [(config.spec.to_dict(), dataclasses.asdict(config.params),
             config.horizon, config.env_seed(r), config.walk_seed(r), buffer)
            for r in range(config.replicas)]
    if workers <= 1:
        all_records = [_records_worker(*a) for a in args]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            all_records = list(pool.map(_records_worker, *zip(*args)))
    by_replica = list(enumerate(all_records))
    ell = np.asarray(config.spec.ell)
    j_chains, z_chains, live_j, live_z = [], [], [], []
    n_records = n_censored = 0
    counts = []
    for r, records in by_replica:
        live = [rec for rec in records if not rec.censored]
        n_records += len(records)
        n_censored += len(records) - len(live)
        counts.append((r, len(records), len(live)))
        j_chains.append([rec.J for rec in live])
        z_chains.append([float(np.asarray(rec.Z) @ ell) for rec in live])
        live_j.extend(rec.J for rec in live)
        live_z.extend(float(np.asarray(rec.Z) @ ell) for rec in live)
    if len(live_j) < 2:
        raise InsufficientDataError(
            f"only {len(live_j)} non-censored records across all replicas")
    mean_j = float(np.mean(live_j))
    mean_z = float(np.mean(live_z))
    survey = RegenSurvey(
        n_records=n_records,
        n_censored=n_censored,
        mean_j=mean_j,
        mean_z_level=mean_z,
        speed_level=mean_z / mean_j,
        j_tail_slope=survival_slope(live_j),
        autocorr_j=_paired_autocorr(j_chains),
        autocorr_z_level=_paired_autocorr(z_chains),
        per_replica_counts=tuple(counts),
    )
    if out_dir is not None or config.output_path is not None:
        target = Path(out_dir if out_dir is not None else config.output_path)
        summary = {
            "experiment": "regeneration",
            "n_records": survey.n_records,
            "n_censored": survey.n_censored,
            "mean_j": survey.mean_j,
            "mean_z_level": survey.mean_z_level,
            "speed_level": survey.speed_level,
            "j_tail_slope": survey.j_tail_slope,
            "autocorr_j": survey.autocorr_j,
            "autocorr_z_level": survey.autocorr_z_level,
            "buffer": buffer,
        }
        write_outputs(config, [], [], summary, target, overwrite)
        write_records_csv(target / "results.csv", config.spec, by_replica)
    return by_replica, survey


def pair_sojourn_exact(spec: EnvironmentSpec, u, v) -> float:
    """Expected steps to leave {u, v} starting at u, by the 2-state closed form."""
    u = tuple(int(c) for c in u)
    v = tuple(int(c) for c in v)
    diff = [abs(a - b) for a, b in zip(u, v)]
    if sum(diff) != 1:
        raise ValueError("u and v must be lattice neighbors")
    axis = diff.index(1)
    pu = transition_distribution(spec, u)
    pv = transition_distribution(spec, v)
    p_uv = pu[2 * axis] if v[axis] > u[axis] else pu[2 * axis + 1]
    p_vu = pv[2 * axis] if u[axis] > v[axis] else pv[2 * axis + 1]
    return (1.0 + p_uv) / (1.0 - p_uv * p_vu)


def edge_sojourn_times(spec: EnvironmentSpec, u, v, horizon: int,
                       walk_seed: int, start=None):
    """Durations of the walk's visits to the vertex pair {u, v}.

    Returns (durations entered at u, durations entered at v); the final
    visit is dropped when the horizon truncates it.
    """
    u = tuple(int(c) for c in u)
    v = tuple(int(c) for c in v)
    if start is None:
        start = (0,) * spec.d
    traj = run(spec, start, horizon, walk_seed=walk_seed)
    at_u = np.all(traj.sites == np.asarray(u, dtype=np.int64), axis=1)
    at_v = np.all(traj.sites == np.asarray(v, dtype=np.int64), axis=1)
    inside = at_u | at_v
    out_u, out_v = [], []
    t = 0
    n = inside.size
    while t < n:
        if not inside[t]:
            t += 1
            continue
        begin = t
        while t < n and inside[t]:
            t += 1
        if t == n:
            break          # truncated visit
        (out_u if at_u[begin] else out_v).append(t - begin)
    return out_u, out_v
