"""Trap geometry: normal edges, open vertices, directed goodness, bad clusters.

A vertex is K-open when all 2d incident base conductances lie in [1/K, K],
K-super-open when all its lattice neighbours are open, and K-good when an
infinite directed open path starts there.  Goodness is approximated by a
truncated search: a directed open path of good_depth edges must exist.  The
default directed-path move rule alternates a forced +e_1 move (internal
frame) with a free move among {+e_1 .. +e_d}; every second step then makes
strict e_1 progress, which keeps the truncated search exact and finite.  The
weaker reading of the path condition (only moves directly following an e_1
move are constrained) is available as move_rule="displayed".

Bad clusters are connected components of non-good vertices; their outer
vertex boundary consists of good vertices only, which is what trap sealing
relies on.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from .environment import EdgeKey, EnvironmentSpec, base_conductance
from .walk import Box

MOVE_RULES = ("alternating", "displayed")


@dataclass(frozen=True)
class AnalysisParams:
    """Classification parameters: cutoff K and goodness truncation depth."""

    k: float
    good_depth: int = 30
    move_rule: str = "alternating"

    def __post_init__(self):
        if not self.k > 1.0:
            raise ValueError("K must be > 1")
        if self.good_depth < 1:
            raise ValueError("good_depth must be at least 1")
        if self.move_rule not in MOVE_RULES:
            raise ValueError(f"move_rule must be one of {MOVE_RULES}")


@dataclass(frozen=True)
class ClusterReport:
    """One surveyed cluster: its sites, outer boundary, width, clipping flag."""

    origin: tuple
    sites: tuple
    boundary: tuple
    width: int
    truncated: bool

    @property
    def volume(self) -> int:
        return len(self.sites)


class Classifier:
    """Cached vertex/edge classification for one (spec, params) pair."""

    def __init__(self, spec: EnvironmentSpec, params: AnalysisParams):
        self.spec = spec
        self.params = params
        self._edge_cache: dict = {}
        self._open_cache: dict = {}
        self._super_cache: dict = {}
        self._good_cache: dict = {}
        self._super_good_cache: dict = {}
        d = spec.d
        self._e1 = tuple(int(c) for c in spec.e1_move)
        self._pos_moves = tuple(tuple(int(c) for c in spec.internal_move(j)) for j in range(d))
        self._all_moves = self._pos_moves + tuple(
            tuple(int(c) for c in spec.internal_move(j, positive=False)) for j in range(d)
        )
        # uniformly elliptic shortcut: when the law's support (and every
        # override) sits inside [1/k, k] no edge can be abnormal
        lo, hi = spec.law.support()
        self._all_normal = (lo >= 1.0 / params.k and hi <= params.k and all(
            1.0 / params.k <= v <= params.k for _, _, v in spec.overrides))

    # -- edges and vertices ------------------------------------------------

    def edge_is_normal(self, edge: EdgeKey) -> bool:
        if self._all_normal:
            return True
        key = (tuple(edge[0]), int(edge[1]))
        hit = self._edge_cache.get(key)
        if hit is None:
            c = base_conductance(self.spec, edge)
            hit = 1.0 / self.params.k <= c <= self.params.k
            self._edge_cache[key] = hit
        return hit

    def vertex_is_open(self, x) -> bool:
        if self._all_normal:
            return True
        x = tuple(int(c) for c in x)
        hit = self._open_cache.get(x)
        if hit is None:
            hit = True
            for k in range(self.spec.d):
                below = list(x)
                below[k] -= 1
                if not (self.edge_is_normal(EdgeKey(x, k))
                        and self.edge_is_normal(EdgeKey(tuple(below), k))):
                    hit = False
                    break
            self._open_cache[x] = hit
        return hit

    def vertex_is_super_open(self, x) -> bool:
        x = tuple(int(c) for c in x)
        hit = self._super_cache.get(x)
        if hit is None:
            hit = all(
                self.vertex_is_open(_shift(x, mv))
                for mv in self._all_moves
            )
            self._super_cache[x] = hit
        return hit

    # -- directed goodness ---------------------------------------------------

    def _good_search(self, x, depth: int, super_variant: bool) -> bool:
        if self._all_normal:
            return True
        is_open = self.vertex_is_super_open if super_variant else self.vertex_is_open
        x = tuple(int(c) for c in x)
        if not is_open(x):
            return False
        if self.params.move_rule == "alternating":
            frontier = {x}
            for step in range(depth):
                moves = (self._e1,) if step % 2 == 0 else self._pos_moves
                nxt = set()
                for z in frontier:
                    for mv in moves:
                        y = _shift(z, mv)
                        if is_open(y):
                            nxt.add(y)
                if not nxt:
                    return False
                frontier = nxt
            return True
        # "displayed" reading: a move is only constrained (to {+e_1..+e_d})
        # when the preceding move, made from an even path position, was +e_1.
        # Paths may revisit sites, so frontiers are per-layer reachable state
        # sets: nonempty at every layer up to depth iff a walk of that length
        # exists.
        frontier = {(x, 0, False)}
        for _ in range(depth):
            nxt = set()
            for z, parity, forced in frontier:
                moves = self._pos_moves if forced else self._all_moves
                for mv in moves:
                    y = _shift(z, mv)
                    if is_open(y):
                        nxt.add((y, 1 - parity, parity == 0 and mv == self._e1))
            if not nxt:
                return False
            frontier = nxt
        return True

    def is_good(self, x, depth: Optional[int] = None) -> bool:
        if depth is not None and depth != self.params.good_depth:
            return self._good_search(x, depth, super_variant=False)
        x = tuple(int(c) for c in x)
        hit = self._good_cache.get(x)
        if hit is None:
            hit = self._good_search(x, self.params.good_depth, super_variant=False)
            self._good_cache[x] = hit
        return hit

    def is_super_good(self, x, depth: Optional[int] = None) -> bool:
        if depth is not None and depth != self.params.good_depth:
            return self._good_search(x, depth, super_variant=True)
        x = tuple(int(c) for c in x)
        hit = self._super_good_cache.get(x)
        if hit is None:
            hit = self._good_search(x, self.params.good_depth, super_variant=True)
            self._super_good_cache[x] = hit
        return hit

    def directed_reach_max_level(self, x, cap_steps: Optional[int] = None) -> float:
        """Highest relative level reachable from x along directed open paths.

        Finite for non-good x (the search dies out); raises RuntimeError if
        the frontier survives past cap_steps, which signals x is good.
        Only the alternating rule gives a finite search; used by the literal
        regeneration replay.
        """
        cap = cap_steps if cap_steps is not None else 4 * self.params.good_depth
        x = tuple(int(c) for c in x)
        best = 0.0
        if not self.vertex_is_open(x):
            return best
        frontier = {x}
        for step in range(cap):
            moves = (self._e1,) if step % 2 == 0 else self._pos_moves
            nxt = set()
            for z in frontier:
                for mv in moves:
                    y = _shift(z, mv)
                    if self.vertex_is_open(y):
                        nxt.add(y)
            if not nxt:
                return best
            for y in nxt:
                lvl = self.spec.level(np.subtract(y, x))
                if lvl > best:
                    best = lvl
            frontier = nxt
        raise RuntimeError(
            f"directed reach from {x} survived {cap} steps; the site is good "
            "and its reach set is unbounded"
        )

    # -- clusters --------------------------------------------------------

    def bad_cluster(self, x, box: Box, super_variant: bool = False) -> ClusterReport:
        """Connected component of non-good vertices containing x, clipped to box.

        super_variant=True gives the weakly-bad cluster (non-super-good
        vertices).  The truncated flag is set when the BFS reaches the box
        wall, in which case the true cluster may extend further.
        """
        good = self.is_super_good if super_variant else self.is_good
        x = tuple(int(c) for c in x)
        if good(x):
            return ClusterReport(origin=x, sites=(), boundary=(), width=0, truncated=False)
        sites = {x}
        boundary = set()
        frontier = [x]
        truncated = not bool(box.contains(x))
        while frontier:
            z = frontier.pop()
            for mv in self._all_moves:
                y = _shift(z, mv)
                if y in sites:
                    continue
                if not box.contains(y):
                    truncated = True
                    continue
                if good(y):
                    boundary.add(y)
                else:
                    sites.add(y)
                    frontier.append(y)
        return ClusterReport(
            origin=x,
            sites=tuple(sorted(sites)),
            boundary=tuple(sorted(boundary)),
            width=_width(sites),
            truncated=truncated,
        )


def _shift(x: tuple, mv: tuple) -> tuple:
    return tuple(a + b for a, b in zip(x, mv))


def _width(sites: Iterable) -> int:
    arr = np.asarray(sorted(sites), dtype=np.int64)
    if arr.size == 0:
        return 0
    return int(np.max(arr.max(axis=0) - arr.min(axis=0)))


# -- functional wrappers ----------------------------------------------------

def edge_is_normal(spec: EnvironmentSpec, params: AnalysisParams, edge: EdgeKey) -> bool:
    return Classifier(spec, params).edge_is_normal(edge)

def vertex_is_open(spec: EnvironmentSpec, params: AnalysisParams, x) -> bool:
    return Classifier(spec, params).vertex_is_open(x)

def vertex_is_super_open(spec: EnvironmentSpec, params: AnalysisParams, x) -> bool:
    return Classifier(spec, params).vertex_is_super_open(x)

def is_good(spec: EnvironmentSpec, params: AnalysisParams, x, depth: Optional[int] = None) -> bool:
    return Classifier(spec, params).is_good(x, depth)

def is_super_good(spec: EnvironmentSpec, params: AnalysisParams, x, depth: Optional[int] = None) -> bool:
    return Classifier(spec, params).is_super_good(x, depth)

def bad_cluster(spec: EnvironmentSpec, params: AnalysisParams, x, box: Box) -> ClusterReport:
    return Classifier(spec, params).bad_cluster(x, box)

def weakly_bad_cluster(spec: EnvironmentSpec, params: AnalysisParams, x, box: Box) -> ClusterReport:
    return Classifier(spec, params).bad_cluster(x, box, super_variant=True)


@dataclass
class WidthSurvey:
    """Sampled width statistics of bad clusters in a box."""

    n_samples: int
    widths: np.ndarray
    volumes: np.ndarray
    truncated: np.ndarray
    bad_fraction: float
    truncated_count: int
    tail_levels: np.ndarray
    tail_survival: np.ndarray
    tail_slope: Optional[float]


def cluster_width_survey(spec: EnvironmentSpec, params: AnalysisParams, box: Box,
                         n_samples: int, seed: Optional[int] = None,
                         super_variant: bool = False) -> WidthSurvey:
    """Sample sites uniformly in box and measure their (weakly-)bad clusters.

    The site sequence is deterministic given the survey seed (default:
    derived from spec.seed).  The tail slope is the least-squares slope of
    ln P[W >= n] against n, restricted to non-truncated clusters and to
    levels with at least 5 surviving samples; None when no positive widths
    were seen (degenerate all-good survey) or fewer than 3 usable levels
    exist.  Truncated clusters are flagged, never silently clipped.
    """
    from .environment import derive_seed

    if seed is None:
        seed = derive_seed(spec.seed, 3)
    rng = np.random.default_rng(seed & ((1 << 63) - 1))
    lattice = box.lattice_sites()
    if lattice.shape[0] == 0:
        raise ValueError("survey box contains no lattice sites")
    pick = rng.integers(0, lattice.shape[0], size=n_samples)
    cls = Classifier(spec, params)
    widths = np.zeros(n_samples, dtype=np.int64)
    volumes = np.zeros(n_samples, dtype=np.int64)
    truncated = np.zeros(n_samples, dtype=bool)
    n_bad = 0
    for i, idx in enumerate(pick):
        rep = cls.bad_cluster(lattice[idx], box, super_variant=super_variant)
        widths[i] = rep.width
        volumes[i] = rep.volume
        truncated[i] = rep.truncated
        if rep.volume:
            n_bad += 1
    usable = widths[~truncated]
    positive = usable[usable > 0]
    levels = np.array([], dtype=np.int64)
    survival = np.array([])
    slope = None
    if positive.size:
        levels = np.arange(1, positive.max() + 1)
        survival = np.array([(usable >= n).mean() for n in levels])
        counts = np.array([(usable >= n).sum() for n in levels])
        ok = counts >= 5
        if ok.sum() >= 3:
            slope = float(np.polyfit(levels[ok], np.log(survival[ok]), 1)[0])
    return WidthSurvey(
        n_samples=n_samples,
        widths=widths,
        volumes=volumes,
        truncated=truncated,
        bad_fraction=n_bad / n_samples,
        truncated_count=int(truncated.sum()),
        tail_levels=levels,
        tail_survival=survival,
        tail_slope=slope,
    )


def goodness_depth_agreement(spec: EnvironmentSpec, params: AnalysisParams, box: Box,
                             n_samples: int, depth_factor: int = 2,
                             seed: Optional[int] = None) -> float:
    """Fraction of sampled sites whose goodness verdict is stable when the
    truncation depth is multiplied by depth_factor."""
    from .environment import derive_seed

    if seed is None:
        seed = derive_seed(spec.seed, 4)
    rng = np.random.default_rng(seed & ((1 << 63) - 1))
    lattice = box.lattice_sites()
    pick = rng.integers(0, lattice.shape[0], size=n_samples)
    cls = Classifier(spec, params)
    deep = params.good_depth * depth_factor
    agree = 0
    for idx in pick:
        x = lattice[idx]
        if cls.is_good(x) == cls.is_good(x, depth=deep):
            agree += 1
    return agree / n_samples
