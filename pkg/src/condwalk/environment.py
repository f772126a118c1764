"""Lazy i.i.d. conductance environments on the Z^d lattice.

An environment assigns every nearest-neighbour edge of Z^d a base conductance
drawn from a one-dimensional law, plus a directional tilt: the walk uses edge
weights c(x, y) = c_*([x, y]) * exp(lambda * (x + y) . ell_hat).  Base
conductances are never stored; each edge value is recomputed on demand from a
counter-based hash of (seed, canonical edge), so environments over arbitrary
regions of Z^d are O(1) memory and bit-for-bit reproducible across processes.

Hash construction (constants are fixed for reproducibility): the 64-bit state
starts from ``seed XOR ENV_TAG`` passed through the splitmix64 finalizer, then
absorbs the edge axis and the base-site coordinates in order, each absorb step
being ``state = mix64(state + value * PHI mod 2^64)`` with PHI the 64-bit
golden ratio.  The final state maps to a uniform in (0, 1) via
``((state >> 11) + 0.5) * 2^-53``, which never returns 0.0 or 1.0, and the
uniform is pushed through the law's quantile function.  Walk-step noise and
derived per-replica seeds use the same mixer with different domain tags, so
the environment stream and walk streams never share state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Mapping, NamedTuple, Sequence, Union

import numpy as np

MASK64 = (1 << 64) - 1
PHI64 = 0x9E3779B97F4A7C15
MIX_M1 = 0xBF58476D1CE4E5B9
MIX_M2 = 0x94D049BB133111EB
ENV_TAG = 0x243F6A8885A308D3
WALK_TAG = 0x452821E638D01377
DERIVE_TAG = 0x13198A2E03707344

#: Used when a spec is built without an explicit seed; echoed into outputs.
DEFAULT_SEED = 123456789

#: Exponents beyond this make exp() overflow double precision.
EXP_LIMIT = 700.0


class NotAdjacentError(ValueError):
    """Raised when an edge is requested between non-neighbouring sites."""


class OverflowRiskError(ValueError):
    """Raised when a conductance exponent would overflow double precision."""


def mix64(h: int) -> int:
    """splitmix64 finalizer on 64-bit integers."""
    h = int(h) & MASK64
    h ^= h >> 30
    h = (h * MIX_M1) & MASK64
    h ^= h >> 27
    h = (h * MIX_M2) & MASK64
    h ^= h >> 31
    return h


def _absorb(h: int, v: int) -> int:
    return mix64((h + ((int(v) & MASK64) * PHI64 & MASK64)) & MASK64)


def _to_unit(h: int) -> float:
    # (0, 1) exclusive on both ends: quantile transforms stay finite.
    return ((h >> 11) + 0.5) * 2.0**-53


def edge_uniform(seed: int, base: Sequence[int], axis: int) -> float:
    """Uniform in (0,1) attached to the canonical edge (base, axis)."""
    h = mix64((seed & MASK64) ^ ENV_TAG)
    h = _absorb(h, axis)
    for c in base:
        h = _absorb(h, int(c))
    return _to_unit(h)


def step_uniform(walk_seed: int, t: int) -> float:
    """Uniform in (0,1) for walk step t; counter-based, chunking-safe."""
    h = mix64((((int(walk_seed) & MASK64) ^ WALK_TAG) + (int(t) * PHI64 & MASK64)) & MASK64)
    return _to_unit(h)


def derive_seed(master: int, *values: int) -> int:
    """Deterministic child seed from a master seed and integer labels.

    Experiments use this to give each replica its own environment and walk
    seeds: replica r gets derive_seed(seed, 1, r) and derive_seed(seed, 2, r).
    """
    h = mix64((master & MASK64) ^ DERIVE_TAG)
    for v in values:
        h = _absorb(h, int(v))
    return h


def edge_uniforms_array(seed: int, bases: np.ndarray, axes: np.ndarray) -> np.ndarray:
    """Vectorized edge_uniform over bases (n, d) and axes (n,).

    Bit-identical to the scalar version (unit-tested); used by surveys and
    classification sweeps.
    """
    bases = np.asarray(bases, dtype=np.int64)
    axes = np.asarray(axes, dtype=np.int64)
    n, d = bases.shape
    m1 = np.uint64(MIX_M1)
    m2 = np.uint64(MIX_M2)
    phi = np.uint64(PHI64)

    def _mix(h):
        h = h ^ (h >> np.uint64(30))
        h = h * m1
        h = h ^ (h >> np.uint64(27))
        h = h * m2
        return h ^ (h >> np.uint64(31))

    h0 = np.uint64(mix64((seed & MASK64) ^ ENV_TAG))
    h = _mix(h0 + axes.view(np.uint64) * phi)
    for j in range(d):
        h = _mix(h + bases[:, j].view(np.uint64) * phi)
    return ((h >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53


class EdgeKey(NamedTuple):
    """Canonical name of a lattice edge: base site plus axis.

    The edge joins ``base`` and ``base + e_axis``; ``base`` is the endpoint
    with the smaller coordinate along ``axis``.  Axes are 0-based.
    """

    base: tuple
    axis: int


Site = Union[Sequence[int], np.ndarray]


def canonical_edge(x: Site, y: Site) -> EdgeKey:
    """Canonical EdgeKey of the edge between neighbouring sites x and y."""
    x = tuple(int(c) for c in x)
    y = tuple(int(c) for c in y)
    if len(x) != len(y):
        raise NotAdjacentError(f"sites live in different dimensions: {x}, {y}")
    diff_axis = -1
    for k, (a, b) in enumerate(zip(x, y)):
        if a != b:
            if diff_axis >= 0 or abs(a - b) != 1:
                raise NotAdjacentError(f"sites are not lattice neighbours: {x}, {y}")
            diff_axis = k
    if diff_axis < 0:
        raise NotAdjacentError(f"sites coincide: {x}")
    base = x if x[diff_axis] < y[diff_axis] else y
    return EdgeKey(base, diff_axis)


_LAW_KINDS = ("constant", "log_uniform", "pareto", "inverse_pareto", "two_sided")


@dataclass(frozen=True)
class ConductanceLaw:
    """Marginal law of the i.i.d. base conductances.

    Supported kinds:

    - ``constant(c)``: point mass at c.
    - ``log_uniform(k)``: log c uniform on [-ln k, ln k]; support [1/k, k].
    - ``pareto(gamma)``: P[c > t] = t^-gamma for t >= 1.
    - ``inverse_pareto(beta)``: c = U^(1/beta), support (0, 1]; heavy mass
      near 0 for small beta.
    - ``two_sided(gamma, beta, p_heavy)``: pareto(gamma) with probability
      p_heavy, otherwise inverse_pareto(beta).
    """

    kind: str
    params: tuple

    def __post_init__(self):
        if self.kind not in _LAW_KINDS:
            raise ValueError(f"unknown law kind {self.kind!r}")
        object.__setattr__(self, "params", tuple(float(p) for p in self.params))
        p = self.params
        if self.kind == "constant" and not (len(p) == 1 and p[0] > 0):
            raise ValueError("constant law needs one positive value")
        if self.kind == "log_uniform" and not (len(p) == 1 and p[0] > 1):
            raise ValueError("log_uniform law needs k > 1")
        if self.kind == "pareto" and not (len(p) == 1 and p[0] > 0):
            raise ValueError("pareto law needs gamma > 0")
        if self.kind == "inverse_pareto" and not (len(p) == 1 and p[0] > 0):
            raise ValueError("inverse_pareto law needs beta > 0")
        if self.kind == "two_sided":
            if len(p) != 3 or p[0] <= 0 or p[1] <= 0 or not 0 < p[2] < 1:
                raise ValueError("two_sided law needs gamma > 0, beta > 0, 0 < p_heavy < 1")

    @classmethod
    def constant(cls, value: float) -> "ConductanceLaw":
        return cls("constant", (value,))

    @classmethod
    def log_uniform(cls, k: float) -> "ConductanceLaw":
        return cls("log_uniform", (k,))

    @classmethod
    def pareto(cls, gamma: float) -> "ConductanceLaw":
        return cls("pareto", (gamma,))

    @classmethod
    def inverse_pareto(cls, beta: float) -> "ConductanceLaw":
        return cls("inverse_pareto", (beta,))

    @classmethod
    def two_sided(cls, gamma: float, beta: float, p_heavy: float) -> "ConductanceLaw":
        return cls("two_sided", (gamma, beta, p_heavy))

    def quantile(self, u):
        """Inverse CDF; accepts scalars or numpy arrays of uniforms in (0,1)."""
        u = np.asarray(u, dtype=np.float64)
        if self.kind == "constant":
            out = np.full_like(u, self.params[0])
        elif self.kind == "log_uniform":
            lnk = math.log(self.params[0])
            out = np.exp((2.0 * u - 1.0) * lnk)
        elif self.kind == "pareto":
            out = u ** (-1.0 / self.params[0])
        elif self.kind == "inverse_pareto":
            out = u ** (1.0 / self.params[0])
        else:
            g, b, p = self.params
            heavy = u < p
            uh = np.clip(u / p, None, 1.0)
            ul = np.clip((u - p) / (1.0 - p), 0.0, None)
            # avoid 0**negative in the dead branch
            out = np.where(heavy, np.maximum(uh, 1e-300) ** (-1.0 / g), ul ** (1.0 / b))
        return float(out) if out.ndim == 0 else out

    def cdf(self, t):
        """P[c <= t]; accepts scalars or numpy arrays."""
        t = np.asarray(t, dtype=np.float64)
        if self.kind == "constant":
            out = np.where(t >= self.params[0], 1.0, 0.0)
        elif self.kind == "log_uniform":
            lnk = math.log(self.params[0])
            safe = np.maximum(t, 1e-300)
            out = np.clip((np.log(safe) + lnk) / (2.0 * lnk), 0.0, 1.0)
            out = np.where(t <= 0, 0.0, out)
        elif self.kind == "pareto":
            g = self.params[0]
            out = np.where(t < 1.0, 0.0, 1.0 - np.maximum(t, 1.0) ** (-g))
        elif self.kind == "inverse_pareto":
            b = self.params[0]
            out = np.clip(np.maximum(t, 0.0) ** b, 0.0, 1.0)
            out = np.where(t <= 0, 0.0, out)
        else:
            g, b, p = self.params
            out = p * ConductanceLaw.pareto(g).cdf(t) + (1 - p) * ConductanceLaw.inverse_pareto(b).cdf(t)
        out = np.asarray(out)
        return float(out) if out.ndim == 0 else out

    def mean(self) -> float:
        """E[c]; inf for heavy tails with gamma <= 1."""
        if self.kind == "constant":
            return self.params[0]
        if self.kind == "log_uniform":
            k = self.params[0]
            return (k - 1.0 / k) / (2.0 * math.log(k))
        if self.kind == "pareto":
            g = self.params[0]
            return math.inf if g <= 1 else g / (g - 1.0)
        if self.kind == "inverse_pareto":
            b = self.params[0]
            return b / (b + 1.0)
        g, b, p = self.params
        heavy = math.inf if g <= 1 else g / (g - 1.0)
        return p * heavy + (1 - p) * b / (b + 1.0)

    def tail_exponent(self):
        """gamma with P[c > t] ~ t^-gamma, or None if the tail is not polynomial."""
        if self.kind == "pareto":
            return self.params[0]
        if self.kind == "two_sided":
            return self.params[0]
        return None

    def support(self) -> tuple:
        """(lo, hi) hull of the support; hi may be inf."""
        if self.kind == "constant":
            return self.params[0], self.params[0]
        if self.kind == "log_uniform":
            k = self.params[0]
            return 1.0 / k, k
        if self.kind == "pareto":
            return 1.0, math.inf
        if self.kind == "inverse_pareto":
            return 0.0, 1.0
        return 0.0, math.inf

    def kernel_code(self) -> tuple:
        """(law_id, p0, p1, p2) encoding consumed by the numba kernels."""
        pid = _LAW_KINDS.index(self.kind)
        p = list(self.params) + [0.0, 0.0, 0.0]
        return pid, p[0], p[1], p[2]

    def to_dict(self) -> dict:
        names = {
            "constant": ("value",),
            "log_uniform": ("k",),
            "pareto": ("gamma",),
            "inverse_pareto": ("beta",),
            "two_sided": ("gamma", "beta", "p_heavy"),
        }[self.kind]
        d = {"kind": self.kind}
        d.update({n: v for n, v in zip(names, self.params)})
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ConductanceLaw":
        d = dict(d)
        kind = d.pop("kind")
        order = {
            "constant": ("value",),
            "log_uniform": ("k",),
            "pareto": ("gamma",),
            "inverse_pareto": ("beta",),
            "two_sided": ("gamma", "beta", "p_heavy"),
        }[kind]
        return cls(kind, tuple(float(d[n]) for n in order))


def _normalize_overrides(overrides) -> tuple:
    if not overrides:
        return ()
    items = []
    if isinstance(overrides, Mapping):
        overrides = overrides.items()
    for key, value in overrides:
        base, axis = key
        base = tuple(int(c) for c in base)
        value = float(value)
        if value <= 0:
            raise ValueError("override conductances must be positive")
        items.append((base, int(axis), value))
    items.sort()
    return tuple(items)


@dataclass(frozen=True)
class EnvironmentSpec:
    """Full description of a quenched environment plus walk tilt.

    Fields
    ------
    d : lattice dimension, >= 2.
    lam : bias strength lambda > 0 (0 allowed for unbiased test fixtures).
    ell_hat : bias direction; normalized to a unit vector on construction.
    law : marginal ConductanceLaw of the base conductances.
    seed : environment seed (any int; reduced mod 2^64).
    overrides : optional pinned edges, iterable of ((base, axis), value); these
        replace the hashed base conductance exactly and are part of the spec's
        identity (used by synthetic trap experiments and tests).
    """

    d: int
    lam: float
    ell_hat: tuple
    law: ConductanceLaw
    seed: int = DEFAULT_SEED
    overrides: tuple = ()

    def __post_init__(self):
        if self.d < 2:
            raise ValueError("d must be >= 2")
        # lam = 0 is accepted for unbiased test fixtures; the ballistic
        # theory and all experiment presets assume lam > 0.
        if not self.lam >= 0:
            raise ValueError("lambda must be nonnegative")
        ell = np.asarray(self.ell_hat, dtype=np.float64)
        if ell.shape != (self.d,):
            raise ValueError(f"ell_hat must have length d={self.d}")
        norm = float(np.linalg.norm(ell))
        if norm == 0.0:
            raise ValueError("ell_hat must be nonzero")
        object.__setattr__(self, "ell_hat", tuple(float(c) for c in ell / norm))
        object.__setattr__(self, "seed", int(self.seed) & MASK64)
        object.__setattr__(self, "overrides", _normalize_overrides(self.overrides))
        for base, axis, _ in self.overrides:
            if len(base) != self.d or not 0 <= axis < self.d:
                raise ValueError(f"override edge ({base}, {axis}) does not fit d={self.d}")

    # -- derived geometry ------------------------------------------------

    @cached_property
    def ell(self) -> np.ndarray:
        return np.asarray(self.ell_hat, dtype=np.float64)

    @cached_property
    def _frame(self):
        """Signed permutation into the sorted internal frame.

        Internal axis j corresponds to original axis perm[j] with sign
        sign_of[perm[j]]; internal ell components are |ell| sorted decreasing,
        so internal e_1 has the maximal projection on ell_hat (>= 1/sqrt d).
        """
        sign_of = np.where(self.ell >= 0, 1, -1).astype(np.int64)
        perm = np.argsort(-np.abs(self.ell), kind="stable").astype(np.int64)
        ell_int = np.abs(self.ell)[perm]
        return perm, sign_of, ell_int

    @property
    def ell_internal(self) -> np.ndarray:
        return self._frame[2]

    @cached_property
    def e1_move(self) -> np.ndarray:
        """Internal +e_1 as an original-coordinates move vector."""
        perm, sign_of, _ = self._frame
        v = np.zeros(self.d, dtype=np.int64)
        v[perm[0]] = sign_of[perm[0]]
        return v

    def internal_move(self, j: int, positive: bool = True) -> np.ndarray:
        """Internal +/- e_{j+1} as an original-coordinates move vector."""
        perm, sign_of, _ = self._frame
        v = np.zeros(self.d, dtype=np.int64)
        v[perm[j]] = sign_of[perm[j]] * (1 if positive else -1)
        return v

    @cached_property
    def tie_moves(self) -> tuple:
        """Directions e with e . ell_hat equal to the maximal projection.

        Returned as original-coordinate move vectors; this is the index set of
        the conductance vector attached to regeneration records.
        """
        _, _, ell_int = self._frame
        return tuple(
            tuple(int(c) for c in self.internal_move(j))
            for j in range(self.d)
            if ell_int[j] == ell_int[0]
        )

    @cached_property
    def move_table(self):
        """Per-move arrays for the stepping kernels.

        Move index m in [0, 2d): internal axis m // 2, positive iff m even.
        Entries: original axis, original direction, exp(lam * signed ell),
        signed level increment.
        """
        perm, sign_of, ell_int = self._frame
        dd = self.d
        mv_axis = np.empty(2 * dd, dtype=np.int64)
        mv_dir = np.empty(2 * dd, dtype=np.int64)
        mv_exp = np.empty(2 * dd, dtype=np.float64)
        mv_dlevel = np.empty(2 * dd, dtype=np.float64)
        for j in range(dd):
            k = int(perm[j])
            for par, sgn in ((0, 1), (1, -1)):
                m = 2 * j + par
                mv_axis[m] = k
                mv_dir[m] = sgn * int(sign_of[k])
                mv_exp[m] = math.exp(self.lam * ell_int[j] * sgn)
                mv_dlevel[m] = ell_int[j] * sgn
        return mv_axis, mv_dir, mv_exp, mv_dlevel

    @cached_property
    def override_arrays(self):
        n = len(self.overrides)
        ob = np.zeros((n, self.d), dtype=np.int64)
        oa = np.zeros(n, dtype=np.int64)
        ov = np.zeros(n, dtype=np.float64)
        for i, (base, axis, value) in enumerate(self.overrides):
            ob[i] = base
            oa[i] = axis
            ov[i] = value
        return ob, oa, ov

    @cached_property
    def _override_map(self) -> dict:
        return {(base, axis): value for base, axis, value in self.overrides}

    # -- levels ----------------------------------------------------------

    def level(self, x) -> float:
        """Projection x . ell_hat."""
        return float(np.dot(np.asarray(x, dtype=np.float64), self.ell))

    def levels(self, sites: np.ndarray) -> np.ndarray:
        return np.asarray(sites, dtype=np.float64) @ self.ell

    # -- serialization ---------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "d": self.d,
            "lambda": self.lam,
            "ell_hat": list(self.ell_hat),
            "law": self.law.to_dict(),
            "seed": self.seed,
            "overrides": [
                {"base": list(base), "axis": axis, "value": value}
                for base, axis, value in self.overrides
            ],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "EnvironmentSpec":
        overrides = tuple(
            ((tuple(o["base"]), int(o["axis"])), float(o["value"]))
            for o in d.get("overrides", ())
        )
        return cls(
            d=int(d["d"]),
            lam=float(d["lambda"]),
            ell_hat=tuple(d["ell_hat"]),
            law=ConductanceLaw.from_dict(d["law"]),
            seed=int(d.get("seed", DEFAULT_SEED)),
            overrides=overrides,
        )


def base_conductance(spec: EnvironmentSpec, edge: EdgeKey) -> float:
    """Base conductance c_*(e) of a canonical edge.

    Depends only on (seed, law, overrides) and the canonical edge: the same
    edge yields the same value under any bias direction or strength.
    """
    base = tuple(int(c) for c in edge[0])
    axis = int(edge[1])
    if not 0 <= axis < spec.d or len(base) != spec.d:
        raise ValueError(f"edge {edge} does not fit d={spec.d}")
    pinned = spec._override_map.get((base, axis))
    if pinned is not None:
        return pinned
    return float(spec.law.quantile(edge_uniform(spec.seed, base, axis)))


def base_conductance_between(spec: EnvironmentSpec, x: Site, y: Site) -> float:
    return base_conductance(spec, canonical_edge(x, y))


def full_conductance(spec: EnvironmentSpec, x: Site, y: Site) -> float:
    """Tilted conductance c(x,y) = c_*([x,y]) exp(lam (x+y) . ell_hat)."""
    edge = canonical_edge(x, y)
    xs = np.asarray(x, dtype=np.float64)
    ys = np.asarray(y, dtype=np.float64)
    expo = spec.lam * float((xs + ys) @ spec.ell)
    if abs(expo) > EXP_LIMIT:
        raise OverflowRiskError(
            f"conductance exponent {expo:.1f} exceeds +-{EXP_LIMIT}; "
            "work in a level-shifted finite network instead"
        )
    return base_conductance(spec, edge) * math.exp(expo)


def local_weights(spec: EnvironmentSpec, x: Site) -> np.ndarray:
    """Unnormalized jump weights at x in order (+e_0, -e_0, +e_1, -e_1, ...).

    The common factor exp(2 lam x . ell_hat) is removed, so entries are
    c_*([x, x +- e_k]) * exp(+- lam ell_k); this is the overflow-safe form the
    walk uses at arbitrary sites.
    """
    x = np.asarray(x, dtype=np.int64)
    w = np.empty(2 * spec.d, dtype=np.float64)
    for k in range(spec.d):
        up = x.copy()
        up[k] += 1
        dn = x.copy()
        dn[k] -= 1
        tilt = math.exp(spec.lam * spec.ell[k])
        w[2 * k] = base_conductance(spec, EdgeKey(tuple(x), k)) * tilt
        w[2 * k + 1] = base_conductance(spec, EdgeKey(tuple(dn), k)) / tilt
    return w


def stationary_weight(spec: EnvironmentSpec, x: Site) -> float:
    """pi(x) = sum of full conductances over the 2d incident edges."""
    x = np.asarray(x, dtype=np.int64)
    total = 0.0
    for k in range(spec.d):
        for delta in (1, -1):
            y = x.copy()
            y[k] += delta
            total += full_conductance(spec, x, y)
    return total
