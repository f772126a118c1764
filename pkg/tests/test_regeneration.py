import numpy as np
import pytest

from condwalk.environment import ConductanceLaw, EnvironmentSpec
from condwalk.geometry import AnalysisParams, Classifier
from condwalk.regeneration import (
    InsufficientDataError,
    RegenRecord,
    default_buffer,
    detect_regenerations,
    ladder_times,
    open_ladder_index,
    regen_chain_stats,
    replay_def_s,
    survival_slope,
    write_records_csv,
)
from condwalk.walk import Trajectory, run


def _flat_spec(**kw):
    base = dict(d=2, lam=0.5, ell_hat=(1.0, 0.0),
                law=ConductanceLaw.constant(1.0), seed=1)
    base.update(kw)
    return EnvironmentSpec(**base)


def _params(**kw):
    base = dict(k=4.0)
    base.update(kw)
    return AnalysisParams(**base)


def _traj(spec, points):
    sites = np.asarray(points, dtype=np.int64)
    return Trajectory(spec, tuple(int(c) for c in sites[0]), 0, sites)


def _elliptic_spec(seed=11):
    return EnvironmentSpec(d=2, lam=0.3, ell_hat=(1.0, 0.0),
                           law=ConductanceLaw.log_uniform(100.0), seed=seed)


def _pareto_spec(seed=300):
    return EnvironmentSpec(d=2, lam=1.0, ell_hat=(1.0, 0.0),
                           law=ConductanceLaw.pareto(0.5), seed=seed)


def _ballistic_spec(seed=11):
    # strong drift and mild disorder give a dense regeneration chain
    return EnvironmentSpec(d=2, lam=1.0, ell_hat=(1.0, 0.0),
                           law=ConductanceLaw.log_uniform(10.0), seed=seed)


# -- ladder times ---------------------------------------------------------------

def test_ladder_monotone_path():
    spec = _flat_spec()
    traj = _traj(spec, [(i, 0) for i in range(5)])
    assert ladder_times(traj) == [0, 1, 2, 3, 4]


def test_ladder_sideways_excursion():
    spec = _flat_spec()
    traj = _traj(spec, [(0, 0), (0, 1), (1, 1)])
    assert ladder_times(traj) == [0, 2]


def test_ladder_constant_level():
    spec = _flat_spec()
    traj = _traj(spec, [(0, 0), (0, 1), (0, 2), (0, 1)])
    assert ladder_times(traj) == [0]


# -- open ladder index ----------------------------------------------------------

def test_open_ladder_monotone_all_normal():
    spec = _flat_spec()
    traj = _traj(spec, [(i, 0) for i in range(5)])
    assert open_ladder_index(traj, spec, _params()) == 2


def test_open_ladder_absent_without_double_step():
    spec = _flat_spec()
    traj = _traj(spec, [(0, 0), (1, 0), (1, 1), (2, 1), (2, 2)])
    assert open_ladder_index(traj, spec, _params()) is None


def test_open_ladder_postcondition_on_simulated_walk():
    spec = _elliptic_spec()
    params = _params(k=128.0)
    traj = run(spec, (0, 0), 2000, walk_seed=5)
    i = open_ladder_index(traj, spec, params)
    assert i is not None
    assert np.array_equal(traj.sites[i] - traj.sites[i - 2], 2 * spec.e1_move)
    assert Classifier(spec, params).vertex_is_open(traj.sites[i])


# -- detection on hand-built paths ----------------------------------------------

def test_detect_monotone_every_pattern_index():
    spec = _flat_spec()
    traj = _traj(spec, [(i, 0) for i in range(7)])
    records = detect_regenerations(traj, spec, _params(), buffer=0)
    assert [r.tau for r in records] == [2, 3, 4, 5, 6]
    assert [r.J for r in records] == [1, 1, 1, 1, 0]
    assert [r.censored for r in records] == [False, False, False, False, True]
    for r in records[:-1]:
        assert r.Z == (1, 0)
        assert r.A == (1.0,)


def test_detect_none_after_return_below_start():
    spec = _flat_spec()
    traj = _traj(spec, [(0, 0), (1, 0), (2, 0), (1, 0), (0, 0), (-1, 0)])
    assert detect_regenerations(traj, spec, _params(), buffer=0) == []


def test_detect_buffer_marks_tail_censored():
    spec = _flat_spec()
    traj = _traj(spec, [(i, 0) for i in range(12)])
    records = detect_regenerations(traj, spec, _params(), buffer=4)
    flags = {r.tau: r.censored for r in records}
    assert flags[2] is False and flags[7] is False
    assert all(flags[t] for t in range(8, 12))


def test_detect_rejects_bad_buffer():
    spec = _flat_spec()
    traj = _traj(spec, [(0, 0), (1, 0), (2, 0)])
    with pytest.raises(ValueError):
        detect_regenerations(traj, spec, _params(), buffer=5)


def test_tie_vector_two_directions_with_overrides():
    spec = _flat_spec(ell_hat=(1.0, 1.0),
                      overrides={((1, 0), 0): 5.0, ((1, 0), 1): 7.0})
    assert spec.tie_moves == ((1, 0), (0, 1))
    traj = _traj(spec, [(0, 0), (1, 0), (2, 0), (3, 0)])
    records = detect_regenerations(traj, spec, _params(k=16.0), buffer=0)
    by_tau = {r.tau: r for r in records}
    assert by_tau[2].A == (5.0, 7.0)
    assert len(by_tau[3].A) == 2
    assert all(v > 0 for r in records for v in r.A)


# -- invariants on simulated walks ----------------------------------------------

def test_detected_records_invariants():
    spec = _ballistic_spec(seed=21)
    params = _params(k=16.0)
    traj = run(spec, (0, 0), 20_000, walk_seed=9)
    records = detect_regenerations(traj, spec, params, buffer=2000)
    live = [r for r in records if not r.censored]
    assert len(live) >= 5
    levels = traj.levels
    ladders = set(ladder_times(traj))
    taus = [r.tau for r in records]
    assert taus == sorted(taus)
    assert set(taus) <= ladders
    assert all(levels[taus[i]] < levels[taus[i + 1]] for i in range(len(taus) - 1))
    for r in records:
        assert np.all(levels[r.tau + 1:] > levels[r.tau])
    for i, r in enumerate(live):
        nxt = records[i + 1]
        assert r.J == nxt.tau - r.tau
        assert np.array_equal(np.asarray(r.Z),
                              traj.sites[nxt.tau] - traj.sites[r.tau])
        assert float(np.asarray(r.Z) @ spec.ell) > 0
    assert detect_regenerations(traj, spec, params, buffer=2000) == records


def test_detection_stable_under_horizon_extension():
    # a non-censored record of the long walk is always found on a prefix
    # whose horizon still covers it
    spec = _ballistic_spec(seed=33)
    params = _params(k=16.0)
    traj = run(spec, (0, 0), 20_000, walk_seed=2)
    full = detect_regenerations(traj, spec, params, buffer=2000)
    m, buf = 10_000, 2000
    prefix = Trajectory(spec, traj.start, traj.walk_seed, traj.sites[:m + 1])
    short = {r.tau for r in detect_regenerations(prefix, spec, params, buffer=buf)}
    for r in full:
        if not r.censored and r.tau <= m - buf:
            assert r.tau in short


# -- literal construction replay -------------------------------------------------

def test_replay_monotone_stride():
    # the shifted construction only sees patterns fully inside each entry
    # window, so on a monotone path it fires every third step
    spec = _flat_spec()
    traj = _traj(spec, [(i, 0) for i in range(7)])
    assert replay_def_s(traj, spec, _params(), buffer=0) == [3, 6]


def test_replay_none_after_return_below_start():
    spec = _flat_spec()
    traj = _traj(spec, [(0, 0), (1, 0), (2, 0), (1, 0), (0, 0), (-1, 0)])
    assert replay_def_s(traj, spec, _params(), buffer=0) == []


def test_replay_times_are_detected_regenerations():
    cases = [
        (_flat_spec(seed=2), _params()),
        (_ballistic_spec(seed=41), _params(k=16.0)),
        (_pareto_spec(seed=301), _params(k=1e4)),
    ]
    n, buf = 4000, 500
    total = 0
    for spec, params in cases:
        for walk_seed in (1, 2, 3):
            traj = run(spec, (0, 0), n, walk_seed=walk_seed)
            cls = Classifier(spec, params)
            replay = replay_def_s(traj, spec, params, buffer=buf, classifier=cls)
            records = detect_regenerations(traj, spec, params, buffer=buf,
                                           classifier=cls)
            detected = {r.tau for r in records if r.tau <= n - buf}
            assert set(replay) <= detected
            total += len(replay)
    assert total > 10


# -- chain statistics -------------------------------------------------------------

def _constant_records(n, censor_last=True):
    recs = [RegenRecord(tau=2 + i, site=(2 + i, 0), J=1, Z=(1, 0), A=(1.0,),
                        censored=False) for i in range(n)]
    if censor_last:
        recs[-1] = RegenRecord(tau=recs[-1].tau, site=recs[-1].site, J=0,
                               Z=(0, 0), A=(1.0,), censored=True)
    return recs


def test_stats_constant_chain():
    spec = _flat_spec()
    stats = regen_chain_stats(_constant_records(11), spec)
    assert stats.n_records == 10 and stats.n_censored == 1
    assert stats.mean_j == 1.0
    assert stats.speed == (1.0, 0.0)
    assert stats.mean_z_level == 1.0
    assert stats.autocorr_j is None
    assert stats.autocorr_z_level is None
    assert stats.j_tail_slope is None
    assert stats.a_mean == (1.0,)


def test_stats_requires_two_live_records():
    spec = _flat_spec()
    with pytest.raises(InsufficientDataError):
        regen_chain_stats(_constant_records(2), spec)


def test_stats_on_simulated_chain():
    spec = _ballistic_spec(seed=55)
    traj = run(spec, (0, 0), 30_000, walk_seed=13)
    records = detect_regenerations(traj, spec, _params(k=16.0), buffer=3000)
    stats = regen_chain_stats(records, spec)
    assert stats.n_records >= 10
    assert stats.mean_j > 0 and stats.mean_z_level > 0
    assert stats.speed[0] == pytest.approx(stats.mean_z_level / stats.mean_j)
    assert abs(stats.autocorr_z_level) < 1.0
    assert all(v > 0 for v in stats.a_mean)


def test_survival_slope_recovers_pareto_tail():
    rng = np.random.default_rng(7)
    samples = (1.0 - rng.random(40_000)) ** -2.0   # survival t^(-1/2)
    slope = survival_slope(samples)
    assert slope == pytest.approx(-0.5, abs=0.1)


def test_survival_slope_degenerate_returns_none():
    assert survival_slope([1.0] * 50) is None
    assert survival_slope([1.0, 2.0]) is None


def test_default_buffer_floor_and_fraction():
    assert default_buffer(1000) == 10_000
    assert default_buffer(5_000_000) == 50_000


# -- export -----------------------------------------------------------------------

def test_write_records_csv_roundtrip(tmp_path):
    spec = _flat_spec()
    traj = _traj(spec, [(i, 0) for i in range(7)])
    records = detect_regenerations(traj, spec, _params(), buffer=0)
    path = tmp_path / "records.csv"
    write_records_csv(path, spec, [(0, records), (1, records[:2])])
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "replica,tau,J,Z_0,Z_1,Z_level,censored,A_0"
    assert len(lines) == 1 + len(records) + 2
    first = lines[1].split(",")
    assert first[0] == "0" and first[1] == "2" and first[2] == "1"
    assert float(first[5]) == 1.0 and first[6] == "0"
