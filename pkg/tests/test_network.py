"""Electrical-network solvers: harmonic voltages, escape bounds, return times,
trap sealing, induced-walk equivalence and Dirichlet eigenvalues."""

import math

import numpy as np
import pytest
from scipy import linalg

from condwalk.environment import (
    ConductanceLaw,
    EnvironmentSpec,
    OverflowRiskError,
    full_conductance,
)
from condwalk.geometry import AnalysisParams
from condwalk.network import (
    ConvergenceFailureError,
    DisconnectedNetworkError,
    FiniteNetwork,
    SingularNetworkError,
    TruncatedTrapError,
    build_network,
    dirichlet_eigenvalue,
    effective_resistance,
    escape_probability,
    expected_visits,
    harmonic_voltage,
    induced_walk_equivalence_check,
    mean_return_time,
    merged_network,
    sample_return_times,
    seal_traps,
    stationary_weight_normalized,
)
from condwalk.walk import Box, run

ORIGIN = (0, 0)
NEIGHBORS = ((1, 0), (-1, 0), (0, 1), (0, -1))


def _star(conductances=(1.0, 1.0, 1.0, 1.0)):
    """Origin plus its four lattice neighbors, one edge each."""
    sites = tuple(sorted((ORIGIN,) + NEIGHBORS))
    idx = {s: i for i, s in enumerate(sites)}
    edges = tuple(
        (min(idx[ORIGIN], idx[t]), max(idx[ORIGIN], idx[t]), c)
        for t, c in zip(NEIGHBORS, conductances))
    return FiniteNetwork(sites=sites, edges=edges)


def _path(conductances):
    n = len(conductances) + 1
    sites = tuple((i,) for i in range(n))
    edges = tuple((i, i + 1, float(c)) for i, c in enumerate(conductances))
    return FiniteNetwork(sites=sites, edges=edges)


def _random_cluster(rng, n):
    """Random connected lattice animal of n sites grown from the origin."""
    sites = {ORIGIN}
    frontier = [ORIGIN]
    while len(sites) < n:
        base = frontier[rng.integers(len(frontier))]
        k = rng.integers(4)
        step = ((1, 0), (-1, 0), (0, 1), (0, -1))[k]
        new = (base[0] + step[0], base[1] + step[1])
        if new not in sites:
            sites.add(new)
            frontier.append(new)
    return sites


def _random_net(rng, n, loops=False):
    """Random connected network with log-uniform conductances."""
    cluster = sorted(_random_cluster(rng, n))
    idx = {s: i for i, s in enumerate(cluster)}
    edges = []
    for s in cluster:
        for step in ((1, 0), (0, 1)):
            t = (s[0] + step[0], s[1] + step[1])
            if t in idx:
                edges.append((idx[s], idx[t], float(10.0 ** rng.uniform(-2, 2))))
    mass = ()
    if loops:
        picks = rng.random(len(cluster)) < 0.4
        mass = tuple((i, float(10.0 ** rng.uniform(-1, 1)))
                     for i in range(len(cluster)) if picks[i])
    return FiniteNetwork(sites=tuple(cluster), edges=tuple(edges), loop_mass=mass)


def _defect_spec():
    return EnvironmentSpec(d=2, lam=0.5, ell_hat=(1.0, 0.0),
                           law=ConductanceLaw.constant(1.0), seed=7,
                           overrides={((0, 0), 0): 100.0})


# -- construction and validation ----------------------------------------------

def test_network_validation():
    with pytest.raises(ValueError):
        FiniteNetwork(sites=((0,), (1,)), edges=((0, 1, 0.0),))
    with pytest.raises(ValueError):
        FiniteNetwork(sites=((0,), (1,)), edges=((0, 0, 1.0),))
    with pytest.raises(ValueError):
        FiniteNetwork(sites=((0,), (1,)), edges=((0, 1, 1.0), (1, 0, 2.0)))
    with pytest.raises(ValueError):
        FiniteNetwork(sites=((0,),), loop_mass=((0, -1.0),), edges=())


def test_build_network_two_site_edge():
    spec = EnvironmentSpec(d=2, lam=1.0, ell_hat=(1.0, 0.0),
                           law=ConductanceLaw.constant(1.0), seed=1)
    net = build_network(spec, [(0, 0), (1, 0)])
    assert net.level_shift == 0.0
    assert len(net.edges) == 1
    assert net.edges[0][2] == pytest.approx(math.e, rel=1e-15)


def test_build_network_singleton_and_overflow():
    spec = EnvironmentSpec(d=2, lam=1.0, ell_hat=(1.0, 0.0),
                           law=ConductanceLaw.constant(1.0), seed=1)
    net = build_network(spec, [(0, 0)])
    assert net.edges == ()
    with pytest.raises(OverflowRiskError):
        build_network(spec, [(0, 0), (400, 0)])


def test_build_network_translation_invariance():
    spec = EnvironmentSpec(d=2, lam=0.7, ell_hat=(1.0, 0.0),
                           law=ConductanceLaw.constant(1.0), seed=5)
    base = [(i, j) for i in range(4) for j in range(3)]
    moved = [(i + 9, j) for (i, j) in base]
    net_a = build_network(spec, base)
    net_b = build_network(spec, moved)
    for (u, v, c), (u2, v2, c2) in zip(net_a.edges, net_b.edges):
        assert (u, v) == (u2, v2)
        assert c == pytest.approx(c2, rel=1e-12)
    ua = harmonic_voltage(net_a, {(0, 0): 1.0, (3, 2): 0.0})
    ub = harmonic_voltage(net_b, {(9, 0): 1.0, (12, 2): 0.0})
    np.testing.assert_allclose(ua, ub, rtol=1e-12)


# -- harmonic solves ------------------------------------------------------------

def test_harmonic_midpoint():
    net = _path([1.0, 1.0])
    u = harmonic_voltage(net, {(0,): 1.0, (2,): 0.0})
    assert u[1] == pytest.approx(0.5, abs=1e-14)


def test_harmonic_series_divider():
    net = _path([2.0, 1.0])
    u = harmonic_voltage(net, {(0,): 1.0, (2,): 0.0})
    assert u[1] == pytest.approx(2.0 / 3.0, rel=1e-14)


def test_harmonic_maximum_principle():
    rng = np.random.default_rng(11)
    for _ in range(25):
        net = _random_net(rng, 20)
        fixed = {net.sites[0]: float(rng.uniform(-2, 2)),
                 net.sites[-1]: float(rng.uniform(-2, 2))}
        u = harmonic_voltage(net, fixed)
        lo, hi = min(fixed.values()), max(fixed.values())
        assert u.min() >= lo - 1e-12 and u.max() <= hi + 1e-12


def test_harmonic_disconnected_raises():
    net = FiniteNetwork(sites=((0,), (1,), (5,), (6,)),
                        edges=((0, 1, 1.0), (2, 3, 1.0)))
    with pytest.raises(DisconnectedNetworkError):
        harmonic_voltage(net, {(0,): 1.0, (1,): 0.0})


def test_rescaling_invariance():
    rng = np.random.default_rng(12)
    net = _random_net(rng, 25)
    scaled = FiniteNetwork(sites=net.sites,
                           edges=tuple((u, v, 7.0 * c) for u, v, c in net.edges))
    fixed = {net.sites[0]: 1.0, net.sites[-1]: 0.0}
    np.testing.assert_allclose(harmonic_voltage(net, fixed),
                               harmonic_voltage(scaled, fixed), rtol=1e-12)
    r1 = effective_resistance(net, net.sites[0], [net.sites[-1]])
    r2 = effective_resistance(scaled, net.sites[0], [net.sites[-1]])
    assert r2 == pytest.approx(r1 / 7.0, rel=1e-12)


# -- escape probabilities --------------------------------------------------------

def test_escape_one_step_uniform():
    net = _star()
    others = [t for t in NEIGHBORS if t != (1, 0)]
    assert escape_probability(net, ORIGIN, (1, 0), others) == pytest.approx(0.25, abs=1e-14)


def test_escape_one_step_weighted():
    net = _star((3.0, 1.0, 1.0, 1.0))
    others = [t for t in NEIGHBORS if t != (1, 0)]
    assert escape_probability(net, ORIGIN, (1, 0), others) == pytest.approx(0.5, abs=1e-14)


def test_escape_absorbing_overlap_rejected():
    net = _star()
    with pytest.raises(ValueError):
        escape_probability(net, ORIGIN, (1, 0), NEIGHBORS)


def _boundary_of(cluster):
    out = set()
    for s in cluster:
        for step in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            t = (s[0] + step[0], s[1] + step[1])
            if t not in cluster:
                out.add(t)
    return out


def test_escape_lower_bound_random_graphs():
    """P_y[T_x <= T_boundary] >= c1/(4d) / |G| whenever the target edge
    dominates every boundary edge by the factor c1."""
    rng = np.random.default_rng(21)
    for _ in range(100):
        g = _random_cluster(rng, int(rng.integers(2, 13)))
        boundary = _boundary_of(g)
        sites = sorted(g | boundary)
        idx = {s: i for i, s in enumerate(sites)}
        edges = {}
        boundary_cs = []
        for s in sites:
            for step in ((1, 0), (0, 1)):
                t = (s[0] + step[0], s[1] + step[1])
                if t not in idx or (s in boundary and t in boundary):
                    continue
                c = float(10.0 ** rng.uniform(-2, 2))
                edges[(min(idx[s], idx[t]), max(idx[s], idx[t]))] = c
                if (s in g) != (t in g):
                    boundary_cs.append(((s, t), c))
        net = FiniteNetwork(sites=tuple(sites),
                            edges=tuple((u, v, c) for (u, v), c in edges.items()))
        # target edge: the strongest boundary edge, so c1 is its ratio to the max
        (pair, c_xy) = max(boundary_cs, key=lambda it: it[1])
        x, y = (pair[0], pair[1]) if pair[0] in boundary else (pair[1], pair[0])
        c1 = c_xy / max(c for _, c in boundary_cs)
        p = escape_probability(net, y, x, [b for b in boundary if b != x])
        assert p >= c1 / 8.0 / len(g) - 1e-12


# -- effective resistance ---------------------------------------------------------

def test_resistance_series_and_parallel():
    assert effective_resistance(_path([1.0]), (0,), [(1,)]) == pytest.approx(1.0)
    assert effective_resistance(_path([1.0, 1.0]), (0,), [(2,)]) == pytest.approx(2.0)
    doubled = FiniteNetwork(sites=((0,), (1,)), edges=((0, 1, 2.0),))
    assert effective_resistance(doubled, (0,), [(1,)]) == pytest.approx(0.5)


def test_resistance_rayleigh_monotone():
    rng = np.random.default_rng(31)
    checked = 0
    for _ in range(100):
        net = _random_net(rng, 15)
        a, sink = net.sites[0], net.sites[-1]
        r_full = effective_resistance(net, a, [sink])
        drop = int(rng.integers(len(net.edges)))
        pruned_edges = tuple(e for i, e in enumerate(net.edges) if i != drop)
        pruned = FiniteNetwork(sites=net.sites, edges=pruned_edges)
        try:
            r_pruned = effective_resistance(pruned, a, [sink])
        except (DisconnectedNetworkError, SingularNetworkError):
            continue    # resistance became infinite, bound holds trivially
        assert r_pruned >= r_full - 1e-10 * max(1.0, r_full)
        checked += 1
    assert checked >= 50


# -- mean return times -------------------------------------------------------------

def test_mean_return_frozen_examples():
    edge = _path([1.0])
    assert mean_return_time(edge, (0,)) == pytest.approx(2.0, rel=1e-15)
    tri = FiniteNetwork(sites=((0,), (1,), (2,)),
                        edges=((0, 1, 1.0), (1, 2, 1.0), (0, 2, 1.0)))
    assert mean_return_time(tri, (0,)) == pytest.approx(3.0, rel=1e-15)


def _return_time_fundamental(net, delta):
    """Oracle: first-step decomposition with hitting times from the
    fundamental-matrix linear system."""
    p = np.asarray(net.transition_matrix().todense())
    i = net.vertex(delta)
    free = [k for k in range(net.n) if k != i]
    q = p[np.ix_(free, free)]
    t_free = np.linalg.solve(np.eye(len(free)) - q, np.ones(len(free)))
    t = np.zeros(net.n)
    t[free] = t_free
    return 1.0 + float(p[i] @ t)


def test_mean_return_matches_fundamental_matrix():
    rng = np.random.default_rng(41)
    for _ in range(20):
        net = _random_net(rng, int(rng.integers(5, 51)), loops=True)
        delta = net.sites[int(rng.integers(net.n))]
        exact = mean_return_time(net, delta)
        oracle = _return_time_fundamental(net, delta)
        assert exact == pytest.approx(oracle, rel=1e-9)


def test_mean_return_monte_carlo():
    rng = np.random.default_rng(51)
    for trial in range(3):
        net = _random_net(rng, 12, loops=True)
        delta = net.sites[int(rng.integers(net.n))]
        exact = mean_return_time(net, delta)
        samples = sample_return_times(net, delta, 20000, seed=100 + trial)
        se = samples.std(ddof=1) / math.sqrt(len(samples))
        assert abs(samples.mean() - exact) <= 3 * se


def test_merged_network_traps():
    path = _path([1.0, 1.0])
    merged = merged_network(path, [(1,), (2,)])
    assert merged.loop_mass == ((1, 2.0),)
    assert mean_return_time(merged, ("merged",)) == pytest.approx(4.0 / 3.0)
    tri = FiniteNetwork(sites=((0,), (1,), (2,)),
                        edges=((0, 1, 1.0), (1, 2, 1.0), (0, 2, 1.0)))
    collapsed = merged_network(tri, [(1,), (2,)])
    assert collapsed.edges == ((0, 1, 2.0),)
    assert mean_return_time(collapsed, ("merged",)) == pytest.approx(1.5)


# -- expected visits -----------------------------------------------------------------

def test_expected_visits_monotone_in_radius():
    spec = EnvironmentSpec(d=2, lam=1.0, ell_hat=(1.0, 0.0),
                           law=ConductanceLaw.constant(1.0), seed=1)
    values = [expected_visits(spec, (0, 0), r) for r in (3, 6, 12)]
    assert values[0] <= values[1] + 1e-12
    assert values[1] <= values[2] + 1e-12
    assert values[0] > 1.0     # the time-0 visit plus a positive return chance


def test_expected_visits_converged_by_radius_40():
    spec = EnvironmentSpec(d=2, lam=1.0, ell_hat=(1.0, 0.0),
                           law=ConductanceLaw.constant(1.0), seed=1)
    v40 = expected_visits(spec, (0, 0), 40)
    v60 = expected_visits(spec, (0, 0), 60)
    assert abs(v60 - v40) <= 0.01 * v40


def test_expected_visits_matches_simulation():
    spec = EnvironmentSpec(d=2, lam=0.3, ell_hat=(1.0, 0.0),
                           law=ConductanceLaw.log_uniform(100.0), seed=99)
    formula = expected_visits(spec, (0, 0), 40)
    reps, horizon = 300, 30000
    counts = np.empty(reps)
    for r in range(reps):
        traj = run(spec, (0, 0), horizon, walk_seed=r + 1)
        counts[r] = int(np.all(traj.sites == 0, axis=1).sum())
    se = counts.std(ddof=1) / math.sqrt(reps)
    assert abs(counts.mean() - formula) <= 3 * se


# -- trap sealing --------------------------------------------------------------------

def test_seal_no_traps_is_plain_network():
    spec = EnvironmentSpec(d=2, lam=0.5, ell_hat=(1.0, 0.0),
                           law=ConductanceLaw.constant(1.0), seed=7)
    box = Box.from_spec(spec, (0, 0), 4.0, 4.0)
    sealed = seal_traps(spec, AnalysisParams(k=2.0), box)
    assert sealed.clusters == ()
    assert sealed.network.loop_mass == ()
    ref = build_network(spec, sealed.network.sites)
    assert sealed.network.sites == ref.sites
    for (u, v, c), (u2, v2, c2) in zip(sealed.network.edges, ref.edges):
        assert (u, v) == (u2, v2)
        assert c == pytest.approx(c2, rel=1e-12)


def test_seal_single_defect_conserves_pi():
    spec = _defect_spec()
    box = Box.from_spec(spec, (0, 0), 4.0, 4.0)
    sealed = seal_traps(spec, AnalysisParams(k=2.0), box)
    assert len(sealed.clusters) == 1
    assert sealed.clusters[0].sites == ((-1, 0), (0, 0), (1, 0))
    net = sealed.network
    assert all(m > 0 for _, m in net.loop_mass)
    for s in sealed.interior_ok:
        want = stationary_weight_normalized(spec, s, net.level_shift)
        assert net.pi[net.vertex(s)] == pytest.approx(want, rel=1e-9)


def test_seal_single_defect_dominates_original():
    """Sealing only ever adds conductance between neighboring good sites."""
    spec = _defect_spec()
    box = Box.from_spec(spec, (0, 0), 4.0, 4.0)
    sealed = seal_traps(spec, AnalysisParams(k=2.0), box)
    net = sealed.network
    bset = {s for rep in sealed.clusters for s in rep.boundary}
    scale = math.exp(-2 * spec.lam * net.level_shift)
    checked = 0
    for u, v, c in net.edges:
        su, sv = net.sites[u], net.sites[v]
        if su in bset and sv in bset and sum(abs(a - b) for a, b in zip(su, sv)) == 1:
            orig = full_conductance(spec, su, sv) * scale
            assert c >= orig * (1 - 1e-12)
            checked += 1
    assert checked >= 4


def test_seal_truncated_cluster_raises():
    spec = _defect_spec()
    box = Box.from_spec(spec, (0, 0), 1.2, 4.0)
    with pytest.raises(TruncatedTrapError):
        seal_traps(spec, AnalysisParams(k=2.0), box, margin=0)


def test_seal_random_environment_conserves_pi():
    spec = EnvironmentSpec(d=2, lam=1.0, ell_hat=(1.0, 0.0),
                           law=ConductanceLaw.pareto(0.5), seed=123)
    params = AnalysisParams(k=10000.0)
    box = Box.from_spec(spec, (0, 0), 5.0, 5.0)
    sealed = seal_traps(spec, params, box)
    assert sealed.clusters        # this seed does contain traps
    net = sealed.network
    for s in sealed.interior_ok:
        want = stationary_weight_normalized(spec, s, net.level_shift)
        assert net.pi[net.vertex(s)] == pytest.approx(want, rel=1e-9)


# -- induced walk equivalence -----------------------------------------------------

def test_equivalence_no_traps_zero():
    spec = EnvironmentSpec(d=2, lam=0.5, ell_hat=(1.0, 0.0),
                           law=ConductanceLaw.constant(1.0), seed=7)
    box = Box.from_spec(spec, (0, 0), 3.0, 3.0)
    rep = induced_walk_equivalence_check(spec, AnalysisParams(k=2.0), box)
    assert rep.max_discrepancy <= 1e-12


def test_equivalence_single_defect_exact():
    spec = _defect_spec()
    box = Box.from_spec(spec, (0, 0), 4.0, 4.0)
    rep = induced_walk_equivalence_check(spec, AnalysisParams(k=2.0), box)
    assert rep.max_discrepancy <= 1e-9
    assert rep.n_starts > 0 and rep.n_targets > 0


def test_equivalence_random_environment_exact():
    spec = EnvironmentSpec(d=2, lam=1.0, ell_hat=(1.0, 0.0),
                           law=ConductanceLaw.pareto(0.5), seed=123)
    box = Box.from_spec(spec, (0, 0), 5.0, 5.0)
    rep = induced_walk_equivalence_check(spec, AnalysisParams(k=10000.0), box)
    assert rep.max_discrepancy <= 1e-9


def test_equivalence_monte_carlo_cross_check():
    spec = _defect_spec()
    box = Box.from_spec(spec, (0, 0), 4.0, 4.0)
    rep = induced_walk_equivalence_check(spec, AnalysisParams(k=2.0), box,
                                         n_runs=20000, seed=5)
    assert rep.mc_max_z is not None
    assert rep.mc_max_z < 3.0


# -- Dirichlet eigenvalues ----------------------------------------------------------

def test_dirichlet_single_interior_vertex():
    net = _path([1.0, 1.0, 1.0])
    assert dirichlet_eigenvalue(net, [(1,)]) == pytest.approx(1.0, abs=1e-12)


def test_dirichlet_two_interior_path():
    net = _path([1.0, 1.0, 1.0])
    lam = dirichlet_eigenvalue(net, [(1,), (2,)])
    assert lam == pytest.approx(1.0 - math.cos(math.pi / 3), abs=1e-7)


def _dirichlet_dense(net, domain):
    dom = sorted(net.vertex(s) for s in domain)
    pi = net.pi[dom]
    c = np.asarray(net.conductances.todense())[np.ix_(dom, dom)]
    c = c + np.diag(net.loop_vector[dom])
    dinv = np.diag(1.0 / np.sqrt(pi))
    s = np.eye(len(dom)) - dinv @ c @ dinv
    return float(linalg.eigvalsh(s)[0])


def test_dirichlet_matches_dense_spectrum():
    rng = np.random.default_rng(61)
    for _ in range(10):
        net = _random_net(rng, int(rng.integers(20, 120)), loops=True)
        n_dom = int(rng.integers(2, net.n))
        dom = [net.sites[i] for i in rng.choice(net.n, size=n_dom, replace=False)]
        got = dirichlet_eigenvalue(net, dom)
        want = _dirichlet_dense(net, dom)
        assert got == pytest.approx(want, abs=1e-7)


def test_dirichlet_domain_monotonicity():
    rng = np.random.default_rng(71)
    net = _random_net(rng, 60, loops=True)
    big = list(net.sites[5:40])
    small = big[:12]
    assert dirichlet_eigenvalue(net, small) >= dirichlet_eigenvalue(net, big) - 1e-10


def test_dirichlet_empty_domain_infinite():
    net = _path([1.0])
    assert dirichlet_eigenvalue(net, []) == math.inf


def test_dirichlet_unkilled_domain_fails():
    # domain = whole connected loop-free component: the operator is singular
    net = _path([1.0])
    with pytest.raises(ConvergenceFailureError):
        dirichlet_eigenvalue(net, [(0,), (1,)])


# -- dump -----------------------------------------------------------------------------

def test_dump_round_readable(tmp_path):
    net = FiniteNetwork(sites=((0, 0), (1, 0)), edges=((0, 1, 2.5),),
                        loop_mass=((1, 0.75),))
    path = tmp_path / "net.txt"
    net.dump(path)
    lines = path.read_text().splitlines()
    assert lines[0].startswith("# vertices 2")
    assert "# 0 0 0" in lines and "# 1 1 0" in lines
    payload = [ln for ln in lines if not ln.startswith("#")]
    assert payload == ["0 1 2.5", "1 1 0.75"]
