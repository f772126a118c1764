"""Exact electrical-network computations on finite pieces of the environment.

Networks are undirected weighted graphs with optional vertex self-loops.  A
loop at x stores its full stay mass m(x): it contributes m(x) once to pi(x)
and the chain stays put with probability m(x)/pi(x).  Under this convention
the trap-sealing loop conductance can be stored verbatim and pi is conserved
by sealing; the classic textbook loop of conductance c corresponds to mass
2c, which is also what merging two adjacent vertices produces.

Conductances are stored with the common factor e^{2*lam*shift} removed
(shift = minimum level of the vertex set).  Voltages, probabilities and
eigenvalues are invariant under this normalization; resistances scale by
e^{-2*lam*shift}.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Dict, Iterable, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy import sparse
from scipy.sparse import linalg as spla

from .environment import (
    EnvironmentSpec,
    OverflowRiskError,
    base_conductance,
    canonical_edge,
)
from .geometry import AnalysisParams, Classifier
from .walk import Box

DIRECT_SOLVE_LIMIT = 5000
RESIDUAL_RTOL = 1e-10
EIG_RTOL = 1e-8
EIG_MAX_ITER = 10**5


class DisconnectedNetworkError(ValueError):
    """A free vertex has no path to any fixed vertex."""


class SingularNetworkError(RuntimeError):
    """The linear solve failed or returned non-finite values."""


class TruncatedTrapError(RuntimeError):
    """A bad cluster reaches the working-box wall, so sealing would clip it."""


class ConvergenceFailureError(RuntimeError):
    """Inverse power iteration did not reach tolerance within the cap."""


@dataclass(frozen=True)
class FiniteNetwork:
    """Immutable finite network: sites, positive edge conductances, loop masses."""

    sites: tuple                     # vertex index -> site tuple
    edges: tuple                     # (u, v, c) with u < v, unique pairs
    loop_mass: tuple = ()            # (vertex, mass)
    boundary: frozenset = frozenset()
    level_shift: float = 0.0

    def __post_init__(self):
        seen = set()
        for u, v, c in self.edges:
            if u == v:
                raise ValueError("edges must join distinct vertices; use loop_mass")
            if not c > 0:
                raise ValueError("conductances must be positive")
            pair = (min(u, v), max(u, v))
            if pair in seen:
                raise ValueError(f"duplicate edge {pair}")
            seen.add(pair)
        for _, m in self.loop_mass:
            if not m > 0:
                raise ValueError("loop masses must be positive")

    @property
    def n(self) -> int:
        return len(self.sites)

    @cached_property
    def index(self) -> dict:
        return {s: i for i, s in enumerate(self.sites)}

    @cached_property
    def conductances(self) -> sparse.csr_matrix:
        """Symmetric off-diagonal conductance matrix (loops excluded)."""
        if self.edges:
            u, v, c = zip(*self.edges)
        else:
            u, v, c = (), (), ()
        u, v = np.asarray(u + v, dtype=np.int64), np.asarray(v + u, dtype=np.int64)
        data = np.asarray(c + c, dtype=np.float64)
        return sparse.csr_matrix((data, (u, v)), shape=(self.n, self.n))

    @cached_property
    def loop_vector(self) -> np.ndarray:
        m = np.zeros(self.n)
        for x, mass in self.loop_mass:
            m[x] += mass
        return m

    @cached_property
    def pi(self) -> np.ndarray:
        """Invariant measure: incident edge conductances plus loop mass, once."""
        return np.asarray(self.conductances.sum(axis=1)).ravel() + self.loop_vector

    def transition_matrix(self) -> sparse.csr_matrix:
        """Row-stochastic kernel including stay probabilities m(x)/pi(x)."""
        p = self.conductances + sparse.diags(self.loop_vector)
        inv = sparse.diags(1.0 / self.pi)
        return (inv @ p).tocsr()

    def total_edge_conductance(self) -> float:
        return float(sum(c for _, _, c in self.edges))

    def total_loop_mass(self) -> float:
        return float(self.loop_vector.sum())

    def vertex(self, site) -> int:
        key = tuple(site)
        if key in self.index:
            return self.index[key]
        return self.index[tuple(int(c) for c in key)]

    def dump(self, path) -> None:
        """Edge-list text dump: header maps indices to sites, then u v c lines."""
        with open(path, "w") as fh:
            fh.write(f"# vertices {self.n} level_shift {self.level_shift!r}\n")
            for i, s in enumerate(self.sites):
                fh.write(f"# {i} {' '.join(str(c) for c in s)}\n")
            for u, v, c in self.edges:
                fh.write(f"{u} {v} {c!r}\n")
            for x, m in self.loop_mass:
                fh.write(f"{x} {x} {m!r}\n")


def build_network(spec: EnvironmentSpec, vertex_set: Iterable,
                  boundary: Iterable = ()) -> FiniteNetwork:
    """Assemble the lattice network induced on vertex_set.

    All nearest-neighbor edges with both endpoints in the set are included
    with conductance c_*(e) e^{lam ((x+y).ell - 2*shift)}, shift being the
    minimum level over the set.
    """
    sites = tuple(sorted(tuple(int(c) for c in s) for s in set(map(tuple, vertex_set))))
    if not sites:
        raise ValueError("vertex set is empty")
    index = {s: i for i, s in enumerate(sites)}
    levels = np.asarray([spec.level(s) for s in sites])
    shift = float(levels.min())
    spread = float(levels.max()) - shift
    if 2 * spec.lam * spread > 700.0:
        raise OverflowRiskError(
            f"level spread {spread:.1f} exceeds 700/(2*lam); "
            "use a smaller vertex set")
    edges = []
    d = spec.d
    for s in sites:
        i = index[s]
        for k in range(d):
            t = list(s)
            t[k] += 1
            t = tuple(t)
            j = index.get(t)
            if j is None:
                continue
            c_star = base_conductance(spec, canonical_edge(s, t))
            expo = spec.lam * (levels[i] + levels[j] - 2 * shift)
            edges.append((min(i, j), max(i, j), c_star * math.exp(expo)))
    bset = frozenset(index[tuple(int(c) for c in s)] for s in boundary)
    return FiniteNetwork(sites=sites, edges=tuple(sorted(edges)), boundary=bset,
                         level_shift=shift)


def merged_network(net: FiniteNetwork, group: Sequence, label=("merged",)) -> FiniteNetwork:
    """Collapse the given sites into one vertex.

    Edges inside the group become loop mass 2c at the merged vertex;
    parallel edges to the outside add up.  Mirrors the network reduction
    used by the mean-return argument.
    """
    gset = {net.vertex(s) for s in group}
    if not gset:
        raise ValueError("empty merge group")
    keep = [i for i in range(net.n) if i not in gset]
    new_sites = tuple(net.sites[i] for i in keep) + (tuple(label),)
    old2new = {i: k for k, i in enumerate(keep)}
    merged = len(keep)
    acc: Dict[Tuple[int, int], float] = {}
    loops: Dict[int, float] = {}
    for u, v, c in net.edges:
        nu = old2new.get(u, merged)
        nv = old2new.get(v, merged)
        if nu == nv:
            loops[nu] = loops.get(nu, 0.0) + 2 * c
        else:
            key = (min(nu, nv), max(nu, nv))
            acc[key] = acc.get(key, 0.0) + c
    for x, m in net.loop_mass:
        nx = old2new.get(x, merged)
        loops[nx] = loops.get(nx, 0.0) + m
    new_boundary = frozenset(old2new[b] for b in net.boundary if b in old2new)
    return FiniteNetwork(
        sites=new_sites,
        edges=tuple((u, v, c) for (u, v), c in sorted(acc.items())),
        loop_mass=tuple(sorted(loops.items())),
        boundary=new_boundary,
        level_shift=net.level_shift,
    )


# -- harmonic solves ----------------------------------------------------------

def _laplacian(net: FiniteNetwork) -> sparse.csr_matrix:
    c = net.conductances
    deg = np.asarray(c.sum(axis=1)).ravel()
    return (sparse.diags(deg) - c).tocsr()


def _check_reachable(net: FiniteNetwork, fixed_ids) -> None:
    seen = np.zeros(net.n, dtype=bool)
    seen[list(fixed_ids)] = True
    stack = list(fixed_ids)
    adj = net.conductances
    while stack:
        i = stack.pop()
        for j in adj.indices[adj.indptr[i]:adj.indptr[i + 1]]:
            if not seen[j]:
                seen[j] = True
                stack.append(j)
    if not seen.all():
        missing = int(np.nonzero(~seen)[0][0])
        raise DisconnectedNetworkError(
            f"vertex {net.sites[missing]} has no path to a fixed vertex")


def harmonic_voltage(net: FiniteNetwork, fixed: Mapping) -> np.ndarray:
    """Solve the weighted Laplace equation with the given fixed site values.

    Returns one voltage per vertex, in net.sites order.  The residual of the
    free-vertex equations is checked against RESIDUAL_RTOL * max|u|.
    """
    if not fixed:
        raise ValueError("need at least one fixed vertex")
    fixed_ids = {}
    for s, val in fixed.items():
        fixed_ids[net.vertex(s) if not isinstance(s, (int, np.integer)) else int(s)] = float(val)
    _check_reachable(net, fixed_ids.keys())
    u = np.zeros(net.n)
    for i, val in fixed_ids.items():
        u[i] = val
    free = np.asarray([i for i in range(net.n) if i not in fixed_ids], dtype=np.int64)
    if free.size == 0:
        return u
    lap = _laplacian(net)
    a = lap[free][:, free]
    rhs = -lap[free][:, sorted(fixed_ids)] @ np.asarray(
        [fixed_ids[i] for i in sorted(fixed_ids)])
    try:
        if free.size <= DIRECT_SOLVE_LIMIT:
            sol = spla.spsolve(a.tocsc(), rhs)
        else:
            # equilibrate before preconditioning: lattice conductances span
            # e^{2 lam L} so the raw matrix defeats ILU/CG outright
            dr = 1.0 / np.sqrt(a.diagonal())
            scale_m = sparse.diags(dr)
            a_s = (scale_m @ a @ scale_m).tocsc()
            ilu = spla.spilu(a_s, drop_tol=1e-5, fill_factor=20)
            pre = spla.LinearOperator(a_s.shape, ilu.solve)
            sol_s, info = spla.cg(a_s, rhs * dr, rtol=1e-13, atol=0.0,
                                  maxiter=max(2000, 10 * free.size), M=pre)
            if info != 0:
                raise SingularNetworkError(f"iterative solve failed (info={info})")
            sol = sol_s * dr
    except RuntimeError as exc:
        raise SingularNetworkError(str(exc)) from exc
    if not np.all(np.isfinite(sol)):
        raise SingularNetworkError("solver returned non-finite voltages")
    u[free] = sol
    scale = max(abs(float(u.max())), abs(float(u.min())), 1e-300)
    resid = np.abs(a @ sol - rhs).max()
    anorm = np.abs(a).sum(axis=1).max()
    if resid > RESIDUAL_RTOL * scale * float(anorm):
        raise SingularNetworkError(f"residual {resid:.2e} too large")
    return u


def escape_probability(net: FiniteNetwork, y, x, absorbing: Iterable) -> float:
    """P_y[the chain hits x before the absorbing set], by harmonic voltage."""
    aids = {net.vertex(s) for s in absorbing}
    xi = net.vertex(x)
    if xi in aids:
        raise ValueError("x must not belong to the absorbing set")
    fixed = {i: 0.0 for i in aids}
    fixed[xi] = 1.0
    u = harmonic_voltage(net, fixed)
    return float(u[net.vertex(y)])


def effective_resistance(net: FiniteNetwork, a, sinks: Iterable) -> float:
    """Effective resistance between a and the sink set (in normalized units)."""
    sids = {net.vertex(s) for s in sinks}
    ai = net.vertex(a)
    if ai in sids:
        raise ValueError("a must not be a sink")
    fixed = {i: 0.0 for i in sids}
    fixed[ai] = 1.0
    u = harmonic_voltage(net, fixed)
    adj = net.conductances
    current = 0.0
    for ptr in range(adj.indptr[ai], adj.indptr[ai + 1]):
        j = adj.indices[ptr]
        current += adj.data[ptr] * (1.0 - u[j])
    if current <= 0:
        raise SingularNetworkError("no current flows; network degenerate")
    return 1.0 / current


def mean_return_time(net: FiniteNetwork, delta) -> float:
    """E_delta[first return time] = (2 sum_edges c + sum loop mass) / pi(delta).

    This is the exact reversible-chain formula sum_x pi(x) / pi(delta) under
    the mass-once loop convention.
    """
    i = net.vertex(delta)
    pi_delta = float(net.pi[i])
    if pi_delta <= 0:
        raise ValueError("delta is isolated")
    return (2.0 * net.total_edge_conductance() + net.total_loop_mass()) / pi_delta


def sample_return_times(net: FiniteNetwork, delta, n_returns: int,
                        seed: int = 0, n_walkers: int = 256) -> np.ndarray:
    """Monte Carlo return times to delta: n_returns i.i.d. samples.

    Each walker contributes its first few excursions (a per-walker quota
    fixed in advance); stopping at a global count instead would bias the
    sample toward short excursions.  Simulation oracle for mean_return_time.
    """
    rng = np.random.default_rng(seed)
    p = np.asarray(net.transition_matrix().todense())
    cum = np.cumsum(p, axis=1)
    start = net.vertex(delta)
    n_walkers = min(n_walkers, n_returns)
    quota = -(-n_returns // n_walkers)
    state = np.full(n_walkers, start, dtype=np.int64)
    age = np.zeros(n_walkers, dtype=np.int64)
    done = np.zeros(n_walkers, dtype=np.int64)
    times = [[] for _ in range(n_walkers)]
    active = np.ones(n_walkers, dtype=bool)
    while active.any():
        idx = np.nonzero(active)[0]
        u = rng.random(idx.size)
        state[idx] = (cum[state[idx]] < u[:, None]).sum(axis=1)
        age[idx] += 1
        back = idx[state[idx] == start]
        for w in back:
            times[w].append(int(age[w]))
            age[w] = 0
            done[w] += 1
        active[back[done[back] >= quota]] = False
    flat = [t for lst in times for t in lst]
    return np.asarray(flat[:n_returns], dtype=np.int64)


def expected_visits(spec: EnvironmentSpec, x, truncation_radius: int) -> float:
    """pi(x) / C(x <-> sphere of the given radius), the expected number of
    visits to x (including time 0) before leaving the ball.

    Nondecreasing in the radius and converges, from below, to the infinite-
    volume value pi(x)/C(x <-> infinity) by Rayleigh monotonicity.
    """
    if truncation_radius < 2:
        raise ValueError("truncation radius must be at least 2")
    x = tuple(int(c) for c in x)
    r = truncation_radius
    d = spec.d
    axes = [np.arange(-r - 1, r + 2)] * d
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
    dist = np.sqrt((grid.astype(float) ** 2).sum(axis=1))
    inside = grid[dist <= r]
    shell = grid[(dist > r) & (dist <= r + 1)]
    sites = [tuple(int(c) + xi for c, xi in zip(row, x)) for row in inside]
    ground = [tuple(int(c) + xi for c, xi in zip(row, x)) for row in shell]
    net = build_network(spec, sites + ground, boundary=ground)
    fixed = {s: 0.0 for s in ground}
    fixed[x] = 1.0
    u = harmonic_voltage(net, fixed)
    i = net.vertex(x)
    adj = net.conductances
    current = 0.0
    for ptr in range(adj.indptr[i], adj.indptr[i + 1]):
        j = adj.indices[ptr]
        current += adj.data[ptr] * (1.0 - u[j])
    pi_x = float(net.pi[i])
    if current <= 0:
        raise SingularNetworkError("no escape current; ball degenerate")
    return pi_x / current


# -- trap sealing -------------------------------------------------------------

@dataclass
class SealedBox:
    """seal_traps output with its provenance: the sealed network plus the
    clusters that were absorbed."""

    network: FiniteNetwork
    clusters: tuple
    interior_ok: tuple      # vertices with the full Z^d neighborhood resolved


def _cluster_hitting(spec: EnvironmentSpec, cluster_sites, boundary_sites,
                     shift: float):
    """Hitting distribution H[z, y] = P_z[trap walk exits at y] for z in the
    cluster, y on its outer boundary; plus the (normalized) conductances from
    cluster sites, as sparse pieces."""
    bsites = list(boundary_sites)
    csites = list(cluster_sites)
    cidx = {s: i for i, s in enumerate(csites)}
    bidx = {s: i for i, s in enumerate(bsites)}
    nc, nb = len(csites), len(bsites)
    q = np.zeros((nc, nc))
    rmat = np.zeros((nc, nb))
    deg = np.zeros(nc)
    lam = spec.lam
    for s in csites:
        i = cidx[s]
        lvl_s = spec.level(s)
        for k in range(spec.d):
            for sgn in (1, -1):
                t = list(s)
                t[k] += sgn
                t = tuple(t)
                c_star = base_conductance(spec, canonical_edge(s, t))
                c = c_star * math.exp(lam * (lvl_s + spec.level(t) - 2 * shift))
                deg[i] += c
                if t in cidx:
                    q[i, cidx[t]] += c
                elif t in bidx:
                    rmat[i, bidx[t]] += c
                else:
                    raise TruncatedTrapError(
                        f"cluster neighbor {t} is neither bad nor boundary")
    # probability form: (I - Q) H = R with rows normalized by full degree
    qn = q / deg[:, None]
    rn = rmat / deg[:, None]
    h = np.linalg.solve(np.eye(nc) - qn, rn)
    return h, cidx, bidx


def seal_traps(spec: EnvironmentSpec, params: AnalysisParams, box: Box,
               margin: int = 20, classifier: Optional[Classifier] = None) -> SealedBox:
    """Seal every bad cluster meeting the box: the walk on the result is the
    walk induced on good sites by the original chain.

    Vertices: good sites in the box, plus outer-boundary sites of sealed
    clusters (possibly slightly outside).  Edges between boundary sites
    (including loops) carry pi(x) P_x[X_1 enters the trap side, first return
    to the boundary lands at y]; other edges keep their conductance.  The
    defining formula is evaluated from both endpoints and must agree within
    1e-9 relative, a reversibility consequence.
    """
    cls = classifier if classifier is not None else Classifier(spec, params)
    work = Box(center=box.center, big_l=box.big_l + margin,
               l_perp=box.l_perp + margin, ell=box.ell, frame_perp=box.frame_perp)
    lattice = [tuple(int(c) for c in row) for row in box.lattice_sites()]
    good_in_box = [s for s in lattice if cls.is_good(s)]
    # collect clusters of every bad site in the box grown by one step, so the
    # sealed transitions of every in-box good site are complete
    seed_box = Box(center=box.center, big_l=box.big_l + 1.5,
                   l_perp=box.l_perp + 1.5, ell=box.ell, frame_perp=box.frame_perp)
    seeds = [tuple(int(c) for c in row) for row in seed_box.lattice_sites()]
    clusters = []
    assigned = set()
    for s in seeds:
        if s in assigned or cls.is_good(s):
            continue
        rep = cls.bad_cluster(s, work)
        if rep.truncated:
            raise TruncatedTrapError(
                f"cluster at {s} reaches the working box wall; enlarge margin")
        clusters.append(rep)
        assigned.update(rep.sites)
    # vertex set: good sites in box plus all cluster boundaries
    vset = set(good_in_box)
    for rep in clusters:
        vset.update(rep.boundary)
    sites = tuple(sorted(vset))
    levels = np.asarray([spec.level(s) for s in sites])
    shift = float(levels.min())
    if 2 * spec.lam * (float(levels.max()) - shift) > 700.0:
        raise OverflowRiskError("level spread too large for sealing")
    index = {s: i for i, s in enumerate(sites)}
    bad_sites = {s for rep in clusters for s in rep.sites}
    boundary_sites = {s for rep in clusters for s in rep.boundary}
    lam = spec.lam

    def norm_conductance(a, b):
        c_star = base_conductance(spec, canonical_edge(a, b))
        return c_star * math.exp(lam * (spec.level(a) + spec.level(b) - 2 * shift))

    acc: Dict[Tuple[int, int], float] = {}
    loops: Dict[int, float] = {}

    def add_edge(a_id, b_id, c):
        if a_id == b_id:
            loops[a_id] = loops.get(a_id, 0.0) + c
        else:
            key = (min(a_id, b_id), max(a_id, b_id))
            acc[key] = acc.get(key, 0.0) + c

    # retained edges: both endpoints in the vertex set, at most one of them
    # on a trap boundary
    for s in sites:
        i = index[s]
        for k in range(spec.d):
            t = list(s)
            t[k] += 1
            t = tuple(t)
            j = index.get(t)
            if j is None:
                continue
            if s in boundary_sites and t in boundary_sites:
                continue    # handled by the sealing formula below
            add_edge(i, j, norm_conductance(s, t))

    # sealed contributions, cluster by cluster
    contrib: Dict[Tuple[int, int], float] = {}

    def add_contrib(a_id, b_id, c):
        key = (a_id, b_id)
        contrib[key] = contrib.get(key, 0.0) + c

    for rep in clusters:
        h, cidx, bidx = _cluster_hitting(spec, rep.sites, rep.boundary, shift)
        blist = list(rep.boundary)
        for xs in blist:
            xi = index[xs]
            # steps from xs into this cluster, redistributed to the exits
            for k in range(spec.d):
                for sgn in (1, -1):
                    t = list(xs)
                    t[k] += sgn
                    t = tuple(t)
                    if t not in cidx:
                        continue
                    c_in = norm_conductance(xs, t)
                    row = h[cidx[t]]
                    for ys, bj in bidx.items():
                        w = c_in * row[bj]
                        if w > 0.0:
                            add_contrib(xi, index[ys], w)

    # direct boundary-boundary steps
    for s in boundary_sites:
        i = index[s]
        for k in range(spec.d):
            t = list(s)
            t[k] += 1
            t = tuple(t)
            if t in boundary_sites:
                add_contrib(i, index[t], norm_conductance(s, t))
                add_contrib(index[t], i, norm_conductance(s, t))

    # reversibility: the formula evaluated from either endpoint must agree
    pairs = {(min(a, b), max(a, b)) for (a, b) in contrib if a != b}
    for a, b in sorted(pairs):
        v1 = contrib.get((a, b), 0.0)
        v2 = contrib.get((b, a), 0.0)
        scale = max(abs(v1), abs(v2), 1e-300)
        if abs(v1 - v2) > 1e-9 * scale:
            raise SingularNetworkError(
                f"sealing asymmetry at {sites[a]}-{sites[b]}: {v1!r} vs {v2!r}")
        add_edge(a, b, 0.5 * (v1 + v2))
    for (a, b), val in contrib.items():
        if a == b:
            add_edge(a, a, val)

    # vertices whose full lattice neighborhood is inside the vertex set or
    # absorbed clusters: pi is conserved there (checked by callers/tests)
    interior = []
    for s in sites:
        ok = True
        for k in range(spec.d):
            for sgn in (1, -1):
                t = list(s)
                t[k] += sgn
                t = tuple(t)
                if t not in index and t not in bad_sites:
                    ok = False
        if ok:
            interior.append(s)

    net = FiniteNetwork(
        sites=sites,
        edges=tuple((u, v, c) for (u, v), c in sorted(acc.items())),
        loop_mass=tuple(sorted(loops.items())),
        boundary=frozenset(),
        level_shift=shift,
    )
    return SealedBox(network=net, clusters=tuple(clusters), interior_ok=tuple(interior))


def stationary_weight_normalized(spec: EnvironmentSpec, x, shift: float) -> float:
    """pi(x) with the e^{2 lam shift} factor removed, matching seal_traps."""
    x = tuple(int(c) for c in x)
    lvl = spec.level(x)
    total = 0.0
    for k in range(spec.d):
        for sgn in (1, -1):
            t = list(x)
            t[k] += sgn
            t = tuple(t)
            c_star = base_conductance(spec, canonical_edge(x, t))
            total += c_star * math.exp(spec.lam * (lvl + spec.level(t) - 2 * shift))
    return total


# -- induced-walk equivalence ---------------------------------------------------

@dataclass
class EquivalenceReport:
    max_discrepancy: float
    n_starts: int
    n_targets: int
    mc_max_z: Optional[float] = None


def _exit_distribution(net: FiniteNetwork, starts, targets) -> np.ndarray:
    """Rows: starts; columns: absorbing targets; entries: absorption law.

    One sparse factorization with a matrix right-hand side.
    """
    tids = [net.vertex(t) for t in targets]
    fixed = set(tids)
    _check_reachable(net, fixed)
    free = np.asarray([i for i in range(net.n) if i not in fixed], dtype=np.int64)
    pos_in_free = {int(i): k for k, i in enumerate(free)}
    lap = _laplacian(net)
    lff = lap[free][:, free].tocsc()
    rhs = -lap[free][:, tids].toarray()
    sol = spla.spsolve(lff, rhs)
    if sol.ndim == 1:
        sol = sol[:, None]
    if not np.all(np.isfinite(sol)):
        raise SingularNetworkError("absorption solve returned non-finite values")
    out = np.zeros((len(starts), len(tids)))
    for row, s in enumerate(starts):
        i = net.vertex(s)
        out[row] = sol[pos_in_free[i]]
    return out


def induced_walk_equivalence_check(spec: EnvironmentSpec, params: AnalysisParams,
                                   box: Box, ring: float = 2.0, margin: int = 20,
                                   n_runs: int = 0, mc_start=None,
                                   seed: int = 0) -> EquivalenceReport:
    """Compare exit laws of the original chain and the sealed-network chain.

    Both chains start at good sites of the box and are absorbed at the first
    good site outside it (targets live in a surrounding ring).  The original
    chain runs on all sites, good and bad; the sealed chain runs on the
    sealed network.  Both laws are exact linear solves and the report carries
    their max discrepancy, which reversibility makes zero up to solver error.
    With n_runs > 0 a Monte Carlo cross-check of the original walk from
    mc_start is added (max absolute z-score over targets).
    """
    cls = Classifier(spec, params)
    grown = Box(center=box.center, big_l=box.big_l + ring,
                l_perp=box.l_perp + ring, ell=box.ell, frame_perp=box.frame_perp)
    sealed = seal_traps(spec, params, grown, margin=margin, classifier=cls)
    good_net = sealed.network
    starts, targets = [], []
    for s in good_net.sites:
        if bool(box.contains(s)):
            starts.append(s)
        else:
            targets.append(s)
    if not targets:
        raise ValueError("box has no good exterior sites in the sealed network")
    if not starts:
        raise ValueError("box contains no good sites")
    # support of the original walk until absorption: good box sites, targets,
    # and the sealed clusters it may traverse
    full_sites = set(starts) | set(targets)
    for rep in sealed.clusters:
        full_sites.update(rep.sites)
    full_net = build_network(spec, full_sites)
    exact_full = _exit_distribution(full_net, starts, targets)
    exact_sealed = _exit_distribution(good_net, starts, targets)
    disc = float(np.abs(exact_full - exact_sealed).max())
    report = EquivalenceReport(max_discrepancy=disc, n_starts=len(starts),
                               n_targets=len(targets))
    if n_runs > 0:
        start = tuple(int(c) for c in (mc_start or starts[0]))
        probs = exact_full[starts.index(start)]
        counts = _mc_exit_counts(full_net, start, targets, n_runs, seed)
        freq = counts / n_runs
        se = np.sqrt(np.maximum(probs * (1 - probs), 1e-12) / n_runs)
        report.mc_max_z = float((np.abs(freq - probs) / np.maximum(se, 1e-12)).max())
    return report


def _mc_exit_counts(net: FiniteNetwork, start, targets, n_runs: int,
                    seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    p = np.asarray(net.transition_matrix().todense())
    cum = np.cumsum(p, axis=1)
    tids = np.asarray([net.vertex(t) for t in targets])
    absorbing = np.zeros(net.n, dtype=bool)
    absorbing[tids] = True
    col_of = {int(t): i for i, t in enumerate(tids)}
    counts = np.zeros(len(targets), dtype=np.int64)
    state = np.full(n_runs, net.vertex(start), dtype=np.int64)
    alive = ~absorbing[state]
    while alive.any():
        idx = np.nonzero(alive)[0]
        u = rng.random(idx.size)
        state[idx] = (cum[state[idx]] < u[:, None]).sum(axis=1)
        hit = idx[absorbing[state[idx]]]
        for h in hit:
            counts[col_of[int(state[h])]] += 1
        alive[hit] = False
    return counts


# -- Dirichlet eigenvalue --------------------------------------------------------

def dirichlet_eigenvalue(net: FiniteNetwork, domain: Iterable) -> float:
    """Principal Dirichlet eigenvalue of I - P on the domain.

    pi comes from the full network, so edges leaving the domain act as
    killing.  Computed by inverse power iteration on the symmetrized
    operator to relative tolerance EIG_RTOL; dense full-spectrum
    computations are kept to the tests as an independent oracle.
    """
    dom = [net.vertex(s) for s in domain]
    if not dom:
        return math.inf
    dom = np.asarray(sorted(set(dom)), dtype=np.int64)
    pi = net.pi[dom]
    if np.any(pi <= 0):
        raise ValueError("domain contains an isolated vertex")
    c = net.conductances[dom][:, dom] + sparse.diags(net.loop_vector[dom])
    dinv = sparse.diags(1.0 / np.sqrt(pi))
    s_op = (sparse.eye(dom.size) - dinv @ c @ dinv).tocsc()
    if dom.size == 1:
        return float(s_op[0, 0])
    try:
        lu = spla.splu(s_op)
    except RuntimeError as exc:
        raise ConvergenceFailureError(f"factorization failed: {exc}") from exc
    rng = np.random.default_rng(12345)
    v = rng.standard_normal(dom.size)
    v /= np.linalg.norm(v)
    lam_prev = math.inf
    for _ in range(EIG_MAX_ITER):
        w = lu.solve(v)
        nw = np.linalg.norm(w)
        if not np.isfinite(nw) or nw == 0:
            raise ConvergenceFailureError("inverse iteration broke down")
        v = w / nw
        lam = float(v @ (s_op @ v))
        if abs(lam - lam_prev) <= EIG_RTOL * max(abs(lam), 1e-300):
            return lam
        lam_prev = lam
    raise ConvergenceFailureError(
        f"no convergence after {EIG_MAX_ITER} iterations")
