"""Numba stepping kernels for the lattice walk.

Pure infrastructure: each kernel re-derives edge conductances on the fly with
the same counter-based hash as environment.edge_uniform (bit-equality is
unit-tested) and advances the walk with counter-based step noise, so chunked
and batched runs reproduce exactly.  All sites are in original lattice
coordinates; the internal sorted frame only enters through the per-move
tables built by EnvironmentSpec.move_table.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

from .environment import MIX_M1, MIX_M2, PHI64, WALK_TAG

U11 = np.uint64(11)
U27 = np.uint64(27)
U30 = np.uint64(30)
U31 = np.uint64(31)
UM1 = np.uint64(MIX_M1)
UM2 = np.uint64(MIX_M2)
UPHI = np.uint64(PHI64)
UWALK = np.uint64(WALK_TAG)
TWO_NEG53 = 2.0**-53


@njit(cache=True)
def _mixu(h):
    h = h ^ (h >> U30)
    h = h * UM1
    h = h ^ (h >> U27)
    h = h * UM2
    h = h ^ (h >> U31)
    return h


@njit(cache=True)
def _absorb(h, v):
    return _mixu(h + v * UPHI)


@njit(cache=True)
def _quantile(law_id, p0, p1, p2, u):
    if law_id == 0:
        return p0
    elif law_id == 1:
        return math.exp((2.0 * u - 1.0) * math.log(p0))
    elif law_id == 2:
        return u ** (-1.0 / p0)
    elif law_id == 3:
        return u ** (1.0 / p0)
    else:
        if u < p2:
            return (u / p2) ** (-1.0 / p0)
        return ((u - p2) / (1.0 - p2)) ** (1.0 / p1)


@njit(cache=True)
def edge_uniform_kernel(env_h0, base, axis):
    """Twin of environment.edge_uniform given h0 = mix64(seed ^ ENV_TAG)."""
    h = _absorb(env_h0, np.uint64(axis))
    for j in range(base.shape[0]):
        h = _absorb(h, np.uint64(base[j]))
    return (np.float64(h >> U11) + 0.5) * TWO_NEG53


@njit(cache=True)
def _step_weights(env_h0, x, mv_axis, mv_dir, mv_exp, law_id, p0, p1, p2, ob, oa, ov, w):
    d = x.shape[0]
    for m in range(2 * d):
        k = mv_axis[m]
        bk = x[k] if mv_dir[m] > 0 else x[k] - 1
        c = -1.0
        for i in range(ob.shape[0]):
            if oa[i] == k:
                match = True
                for j in range(d):
                    bj = bk if j == k else x[j]
                    if ob[i, j] != bj:
                        match = False
                        break
                if match:
                    c = ov[i]
                    break
        if c < 0.0:
            h = _absorb(env_h0, np.uint64(k))
            for j in range(d):
                bj = bk if j == k else x[j]
                h = _absorb(h, np.uint64(bj))
            u = (np.float64(h >> U11) + 0.5) * TWO_NEG53
            c = _quantile(law_id, p0, p1, p2, u)
        w[m] = c * mv_exp[m]
    total = 0.0
    for m in range(2 * d):
        total += w[m]
    return total


@njit(cache=True)
def _pick_move(w, n_moves, u, total):
    r = u * total
    acc = 0.0
    for m in range(n_moves):
        acc += w[m]
        if r < acc:
            return m
    return n_moves - 1


@njit(cache=True)
def walk_record(x0, n_steps, t0, env_h0, walk_seed, mv_axis, mv_dir, mv_exp,
                law_id, p0, p1, p2, ob, oa, ov, out):
    """Step n_steps from x0, recording every site into out (n_steps+1, d).

    t0 is the absolute index of the first step taken; the step-noise stream is
    indexed by absolute step, so consecutive chunks concatenate exactly.
    """
    d = x0.shape[0]
    x = x0.copy()
    w = np.empty(2 * d, dtype=np.float64)
    ws = np.uint64(walk_seed) ^ UWALK
    for j in range(d):
        out[0, j] = x[j]
    for t in range(n_steps):
        total = _step_weights(env_h0, x, mv_axis, mv_dir, mv_exp,
                              law_id, p0, p1, p2, ob, oa, ov, w)
        hu = _mixu(ws + np.uint64(t0 + t) * UPHI)
        u = (np.float64(hu >> U11) + 0.5) * TWO_NEG53
        m = _pick_move(w, 2 * d, u, total)
        x[mv_axis[m]] += mv_dir[m]
        for j in range(d):
            out[t + 1, j] = x[j]


@njit(cache=True)
def walk_summary_batch(x0, n_steps, env_h0s, walk_seeds, checkpoints,
                       mv_axis, mv_dir, mv_exp, mv_dlevel,
                       law_id, p0, p1, p2, ob, oa, ov,
                       out_sites, out_min_level, out_final_level):
    """Many independent replicas, keeping checkpoint sites and level extremes.

    Replica r uses environment hash state env_h0s[r] and walk seed
    walk_seeds[r].  checkpoints must be sorted ascending; out_sites has shape
    (R, len(checkpoints), d).  Levels are tracked relative to the start site.
    """
    n_rep = env_h0s.shape[0]
    d = x0.shape[0]
    n_ck = checkpoints.shape[0]
    for r in range(n_rep):
        x = x0.copy()
        w = np.empty(2 * d, dtype=np.float64)
        ws = walk_seeds[r] ^ UWALK
        level = 0.0
        min_level = 0.0
        ck = 0
        while ck < n_ck and checkpoints[ck] == 0:
            for j in range(d):
                out_sites[r, ck, j] = x[j]
            ck += 1
        for t in range(n_steps):
            total = _step_weights(env_h0s[r], x, mv_axis, mv_dir, mv_exp,
                                  law_id, p0, p1, p2, ob, oa, ov, w)
            hu = _mixu(ws + np.uint64(t) * UPHI)
            u = (np.float64(hu >> U11) + 0.5) * TWO_NEG53
            m = _pick_move(w, 2 * d, u, total)
            x[mv_axis[m]] += mv_dir[m]
            level += mv_dlevel[m]
            if level < min_level:
                min_level = level
            if ck < n_ck and t + 1 == checkpoints[ck]:
                for j in range(d):
                    out_sites[r, ck, j] = x[j]
                ck += 1
        out_min_level[r] = min_level
        out_final_level[r] = level


@njit(cache=True)
def walk_exit_batch(x0, max_steps, env_h0s, walk_seeds, big_l, l_perp,
                    mv_axis, mv_dir, mv_exp, mv_dlevel, mv_dtrans,
                    law_id, p0, p1, p2, ob, oa, ov,
                    out_code, out_steps):
    """Run replicas until they leave the box {|level| < L, |transverse| < L_perp}.

    Levels and transverse coordinates are relative to the start site x0.
    Exit codes: 0 positive side (level >= L), 1 negative side (level <= -L),
    2 transverse side, 3 still inside after max_steps.
    """
    n_rep = env_h0s.shape[0]
    d = x0.shape[0]
    n_tr = mv_dtrans.shape[1]
    for r in range(n_rep):
        x = x0.copy()
        w = np.empty(2 * d, dtype=np.float64)
        trans = np.zeros(n_tr, dtype=np.float64)
        ws = walk_seeds[r] ^ UWALK
        level = 0.0
        code = 3
        steps = max_steps
        for t in range(max_steps):
            total = _step_weights(env_h0s[r], x, mv_axis, mv_dir, mv_exp,
                                  law_id, p0, p1, p2, ob, oa, ov, w)
            hu = _mixu(ws + np.uint64(t) * UPHI)
            u = (np.float64(hu >> U11) + 0.5) * TWO_NEG53
            m = _pick_move(w, 2 * d, u, total)
            x[mv_axis[m]] += mv_dir[m]
            level += mv_dlevel[m]
            for i in range(n_tr):
                trans[i] += mv_dtrans[m, i]
            if level >= big_l:
                code = 0
                steps = t + 1
                break
            if level <= -big_l:
                code = 1
                steps = t + 1
                break
            hit_side = False
            for i in range(n_tr):
                if trans[i] >= l_perp or trans[i] <= -l_perp:
                    hit_side = True
                    break
            if hit_side:
                code = 2
                steps = t + 1
                break
        out_code[r] = code
        out_steps[r] = steps
