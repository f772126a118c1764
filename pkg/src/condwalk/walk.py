"""Quenched lattice walks driven by a lazy conductance environment.

The walk at x jumps to a neighbour y with probability proportional to
c(x, y); weights are computed with the common factor exp(2 lam x . ell)
removed, so trajectories at arbitrary distances never overflow.  Stepping is
delegated to the numba kernels; everything here is bookkeeping, geometry and
summaries of recorded trajectories.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property
from typing import Optional, Sequence

import numpy as np

from . import _kernels
from .environment import ENV_TAG, EnvironmentSpec, local_weights, mix64

EXIT_POSITIVE = "positive"
EXIT_NEGATIVE = "negative"
EXIT_SIDE = "side"
EXIT_NONE = "none"

_EXIT_CODES = {0: EXIT_POSITIVE, 1: EXIT_NEGATIVE, 2: EXIT_SIDE, 3: EXIT_NONE}


def env_hash_state(seed: int) -> int:
    """Pre-mixed hash state for an environment seed (kernel argument)."""
    return mix64((seed & ((1 << 64) - 1)) ^ ENV_TAG)


def transition_distribution(spec: EnvironmentSpec, x) -> np.ndarray:
    """One-step law at x in order (+e_0, -e_0, +e_1, -e_1, ...)."""
    w = local_weights(spec, x)
    return w / w.sum()


def transverse_frame(spec: EnvironmentSpec) -> np.ndarray:
    """Rows f_2 .. f_d: an orthonormal completion of ell_hat.

    Deterministic: QR of [ell_hat | I] with signs fixed so each row's first
    nonzero entry is positive.
    """
    d = spec.d
    m = np.empty((d, d), dtype=np.float64)
    m[:, 0] = spec.ell
    m[:, 1:] = np.eye(d)[:, : d - 1]
    q, _ = np.linalg.qr(m)
    if q[:, 0] @ spec.ell < 0:
        q = -q
    rows = q[:, 1:].T.copy()
    for i in range(rows.shape[0]):
        nz = np.nonzero(np.abs(rows[i]) > 1e-12)[0]
        if nz.size and rows[i, nz[0]] < 0:
            rows[i] = -rows[i]
    return rows


@dataclass(frozen=True)
class Box:
    """Slab-shaped box: |level| < L and |transverse_i| < l_perp, all
    relative to the center site.

    The positive boundary is the part of the exterior with relative level
    >= L; classification gives it priority over the transverse sides.
    """

    center: tuple
    big_l: float
    l_perp: float
    ell: tuple
    frame_perp: tuple

    @classmethod
    def from_spec(cls, spec: EnvironmentSpec, center, big_l: float, l_perp: float) -> "Box":
        return cls(
            center=tuple(int(c) for c in center),
            big_l=float(big_l),
            l_perp=float(l_perp),
            ell=tuple(float(v) for v in spec.ell),
            frame_perp=tuple(tuple(float(v) for v in row) for row in transverse_frame(spec)),
        )

    @cached_property
    def _ell(self) -> np.ndarray:
        return np.asarray(self.ell)

    @cached_property
    def _perp(self) -> np.ndarray:
        return np.asarray(self.frame_perp, dtype=np.float64).reshape(len(self.frame_perp), -1)

    def relative_coords(self, sites) -> tuple:
        rel = np.atleast_2d(np.asarray(sites, dtype=np.float64)) - np.asarray(self.center)
        return rel @ self._ell, rel @ self._perp.T

    def contains(self, sites) -> np.ndarray:
        lvl, tr = self.relative_coords(sites)
        return (np.abs(lvl) < self.big_l) & np.all(np.abs(tr) < self.l_perp, axis=-1)

    def classify(self, site) -> str:
        """Boundary class of a site outside the open box."""
        lvl, tr = self.relative_coords(site)
        lvl = float(lvl[0])
        if lvl >= self.big_l:
            return EXIT_POSITIVE
        if lvl <= -self.big_l:
            return EXIT_NEGATIVE
        if np.any(np.abs(tr[0]) >= self.l_perp):
            return EXIT_SIDE
        raise ValueError(f"site {site} is inside the box")

    def lattice_sites(self) -> np.ndarray:
        """All lattice sites inside the open box (small boxes only)."""
        d = self._ell.shape[0]
        # crude bounding cube: |x - center|_2 <= sqrt(L^2 + (d-1) Lp^2)
        rad = int(np.ceil(np.sqrt(self.big_l**2 + (d - 1) * self.l_perp**2))) + 1
        axes = [np.arange(c - rad, c + rad + 1) for c in self.center]
        grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
        return grid[self.contains(grid)]


@dataclass
class Trajectory:
    """A recorded walk: spec, start, walk seed and every visited site."""

    spec: EnvironmentSpec
    start: tuple
    walk_seed: int
    sites: np.ndarray

    @property
    def n_steps(self) -> int:
        return self.sites.shape[0] - 1

    @cached_property
    def levels(self) -> np.ndarray:
        return self.spec.levels(self.sites)

    @cached_property
    def running_max_levels(self) -> np.ndarray:
        return np.maximum.accumulate(self.levels)

    def final_site(self) -> tuple:
        return tuple(int(c) for c in self.sites[-1])


def _kernel_args(spec: EnvironmentSpec):
    mv_axis, mv_dir, mv_exp, _ = spec.move_table
    law_id, p0, p1, p2 = spec.law.kernel_code()
    ob, oa, ov = spec.override_arrays
    return mv_axis, mv_dir, mv_exp, law_id, p0, p1, p2, ob, oa, ov


def run(spec: EnvironmentSpec, start, n_steps: int, walk_seed: int,
        chunk: int = 1 << 20) -> Trajectory:
    """Run a full-resolution walk of n_steps from start.

    Deterministic in (spec, start, n_steps, walk_seed); chunk size only
    bounds memory per kernel call and does not affect the trajectory.
    Site coordinates stay far below 2^62 for any feasible n_steps, so
    integer overflow is not reachable.
    """
    start = tuple(int(c) for c in start)
    mv_axis, mv_dir, mv_exp, law_id, p0, p1, p2, ob, oa, ov = _kernel_args(spec)
    env_h0 = np.uint64(env_hash_state(spec.seed))
    sites = np.empty((n_steps + 1, spec.d), dtype=np.int64)
    sites[0] = start
    x = np.asarray(start, dtype=np.int64)
    done = 0
    while done < n_steps:
        take = min(chunk, n_steps - done)
        out = np.empty((take + 1, spec.d), dtype=np.int64)
        _kernels.walk_record(x, take, done, env_h0, np.uint64(walk_seed),
                             mv_axis, mv_dir, mv_exp, law_id, p0, p1, p2,
                             ob, oa, ov, out)
        sites[done + 1: done + take + 1] = out[1:]
        x = out[-1].copy()
        done += take
    return Trajectory(spec=spec, start=start, walk_seed=int(walk_seed), sites=sites)


def run_summary_batch(spec: EnvironmentSpec, start, n_steps: int,
                      env_seeds: Sequence[int], walk_seeds: Sequence[int],
                      checkpoints: Sequence[int]):
    """Batch of replicas keeping only checkpoint sites and level extremes.

    Replica r runs in the environment obtained by replacing spec.seed with
    env_seeds[r].  Returns (sites (R, C, d), min_levels (R,), final_levels (R,)).
    """
    checkpoints = np.asarray(sorted(int(c) for c in checkpoints), dtype=np.int64)
    if checkpoints.size and checkpoints[-1] > n_steps:
        raise ValueError("checkpoints exceed the horizon")
    mv_axis, mv_dir, mv_exp, law_id, p0, p1, p2, ob, oa, ov = _kernel_args(spec)
    _, _, _, mv_dlevel = spec.move_table
    env_h0s = np.array([env_hash_state(s) for s in env_seeds], dtype=np.uint64)
    wseeds = np.array([int(s) & ((1 << 64) - 1) for s in walk_seeds], dtype=np.uint64)
    n_rep = env_h0s.shape[0]
    out_sites = np.empty((n_rep, checkpoints.size, spec.d), dtype=np.int64)
    out_min = np.empty(n_rep, dtype=np.float64)
    out_fin = np.empty(n_rep, dtype=np.float64)
    x0 = np.asarray(start, dtype=np.int64)
    _kernels.walk_summary_batch(x0, n_steps, env_h0s, wseeds, checkpoints,
                                mv_axis, mv_dir, mv_exp, mv_dlevel,
                                law_id, p0, p1, p2, ob, oa, ov,
                                out_sites, out_min, out_fin)
    return out_sites, out_min, out_fin


def run_exit_batch(spec: EnvironmentSpec, start, big_l: float, l_perp: float,
                   max_steps: int, env_seeds: Sequence[int],
                   walk_seeds: Sequence[int]):
    """Batch of replicas stopped at the first exit from a Box around start.

    Returns (categories list[str], steps (R,)).
    """
    mv_axis, mv_dir, mv_exp, law_id, p0, p1, p2, ob, oa, ov = _kernel_args(spec)
    mv_dlevel = spec.move_table[3]
    frame = transverse_frame(spec)
    d = spec.d
    mv_dtrans = np.zeros((2 * d, d - 1), dtype=np.float64)
    for m in range(2 * d):
        mv_dtrans[m] = frame[:, mv_axis[m]] * mv_dir[m]
    env_h0s = np.array([env_hash_state(s) for s in env_seeds], dtype=np.uint64)
    wseeds = np.array([int(s) & ((1 << 64) - 1) for s in walk_seeds], dtype=np.uint64)
    n_rep = env_h0s.shape[0]
    out_code = np.empty(n_rep, dtype=np.int8)
    out_steps = np.empty(n_rep, dtype=np.int64)
    x0 = np.asarray(start, dtype=np.int64)
    _kernels.walk_exit_batch(x0, max_steps, env_h0s, wseeds, float(big_l),
                             float(l_perp), mv_axis, mv_dir, mv_exp, mv_dlevel,
                             mv_dtrans, law_id, p0, p1, p2, ob, oa, ov,
                             out_code, out_steps)
    return [_EXIT_CODES[int(c)] for c in out_code], out_steps


def hitting_time(traj: Trajectory, level: float) -> Optional[int]:
    """First index with site level strictly above `level`, or None.

    Matches the half-space convention: the positive half-space at height k
    is {x : x . ell_hat > k}, with strict inequality.
    """
    above = np.nonzero(traj.levels > level)[0]
    return int(above[0]) if above.size else None


def first_hit(traj: Trajectory, predicate) -> Optional[int]:
    """First index whose site satisfies predicate(site), or None."""
    for t in range(traj.sites.shape[0]):
        if predicate(tuple(int(c) for c in traj.sites[t])):
            return t
    return None


def min_level(traj: Trajectory) -> float:
    """Most negative level reached, relative to the start (always <= 0)."""
    return float(np.min(traj.levels - traj.levels[0]))


def exit_classification(traj: Trajectory, box: Box):
    """(category, index, site) of the first exit from the open box.

    category is one of "positive", "negative", "side", "none"; index and site
    are None when the walk never leaves the box within the trajectory.
    """
    inside = box.contains(traj.sites)
    outside = np.nonzero(~inside)[0]
    if not outside.size:
        return EXIT_NONE, None, None
    i = int(outside[0])
    site = tuple(int(c) for c in traj.sites[i])
    return box.classify(site), i, site


def write_jsonl(traj: Trajectory, path, thin: int = 1) -> None:
    """Dump a trajectory as JSON lines {"t", "site", "level"}.

    With thin=k, every k-th site plus the final site is written.
    """
    levels = traj.levels
    with open(path, "w") as fh:
        n = traj.sites.shape[0]
        for t in range(0, n, thin):
            fh.write(json.dumps({
                "t": t,
                "site": [int(c) for c in traj.sites[t]],
                "level": float(levels[t]),
            }) + "\n")
        if (n - 1) % thin != 0:
            fh.write(json.dumps({
                "t": n - 1,
                "site": [int(c) for c in traj.sites[n - 1]],
                "level": float(levels[n - 1]),
            }) + "\n")
        fh.write(json.dumps({
            "final_site": [int(c) for c in traj.sites[n - 1]],
            "min_level": float(np.min(levels)),
            "max_level": float(np.max(levels)),
        }) + "\n")
