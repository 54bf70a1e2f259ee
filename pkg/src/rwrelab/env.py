"""Random environments for nearest-neighbour walks and their quenched statistics.

An environment assigns to each site x a right-step probability omega_x.
With rho_x = (1 - omega_x) / omega_x the potential is V(0) = 0 and
V(x+1) - V(x) = log rho_x.  Ladder locations are the strict running minima of
V, and the stretches between consecutive ladders are the blocks.  Products of
rho are always evaluated as exp of potential differences.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np

from ._kernels import block_scan_draw, forward_products, xoshiro_state
from .errors import AssumptionViolated, BlockOverflow, BufferExhausted, NoRoot
from .rng import SeedLike, as_generator
from .trap import TrapEnvironment

SERIES_TOL = 1e-12
SERIES_PATIENCE = 50
BLOCK_CAP = 10**6
KAPPA_BRACKET = (1e-6, 4.0)


# ---------------------------------------------------------------------------
# single-site law


@dataclass(frozen=True, eq=False)
class EnvDistribution:
    """Finite-support law of a single omega_x.

    ``support`` is a sequence of ``(omega, probability)`` pairs.
    """

    support: tuple

    def __post_init__(self):
        pairs = tuple((float(w), float(p)) for w, p in self.support)
        if not pairs:
            raise ValueError("empty support")
        om = np.array([w for w, _ in pairs])
        pr = np.array([p for _, p in pairs])
        if np.any((om <= 0) | (om >= 1)):
            raise ValueError("omega values must lie strictly inside (0, 1)")
        if np.any((pr <= 0) | (pr > 1)):
            raise ValueError("probabilities must lie in (0, 1]")
        if abs(pr.sum() - 1.0) > 1e-12:
            raise ValueError(f"probabilities sum to {pr.sum()!r}, not 1")
        object.__setattr__(self, "support", pairs)
        # ties such as rho in {4, 1/4} can come out as +-1e-17 in floating point
        if self.mean_log_rho >= -1e-12:
            raise AssumptionViolated(
                f"E[log rho] = {self.mean_log_rho:.3g} must be negative (transience to the right)")

    @classmethod
    def from_rho(cls, rho, probs=None) -> "EnvDistribution":
        rho = np.atleast_1d(np.asarray(rho, dtype=float))
        if probs is None:
            probs = np.full(rho.size, 1.0 / rho.size)
        return cls(tuple(zip(1.0 / (1.0 + rho), probs)))

    @classmethod
    def two_point(cls, kappa: float, r: float = 2.0) -> "EnvDistribution":
        """rho in {r, s} with probability 1/2 each, where r^kappa + s^kappa = 2."""
        s = (2.0 - r**kappa) ** (1.0 / kappa)
        return cls.from_rho([r, s])

    @classmethod
    def constant(cls, omega: float) -> "EnvDistribution":
        return cls(((omega, 1.0),))

    @property
    def omega_values(self) -> np.ndarray:
        return np.array([w for w, _ in self.support])

    @property
    def probs(self) -> np.ndarray:
        return np.array([p for _, p in self.support])

    @property
    def rho_values(self) -> np.ndarray:
        om = self.omega_values
        return (1.0 - om) / om

    @property
    def mean_log_rho(self) -> float:
        return float(np.dot(self.probs, np.log(self.rho_values)))

    @property
    def mean_rho(self) -> float:
        return float(np.dot(self.probs, self.rho_values))

    def moment(self, kappa: float) -> float:
        """E[rho^kappa]."""
        return float(np.dot(self.probs, self.rho_values**kappa))

    @property
    def ballistic(self) -> bool:
        return self.mean_rho < 1.0

    @property
    def speed(self) -> float:
        """Limiting speed (1 - E rho)/(1 + E rho), or 0 when E rho >= 1."""
        m = self.mean_rho
        return (1.0 - m) / (1.0 + m) if m < 1.0 else 0.0

    def draw(self, rng: np.random.Generator, size: int) -> np.ndarray:
        cdf = np.cumsum(self.probs)
        cdf[-1] = 1.0
        idx = np.searchsorted(cdf, rng.random(size), side="right")
        return self.omega_values[idx]

    def to_dict(self) -> dict:
        return {"support": [list(p) for p in self.support]}


class KappaRoot(NamedTuple):
    kappa: float
    ballistic: bool


def solve_kappa(dist: EnvDistribution, bracket=KAPPA_BRACKET, iterations: int = 200) -> KappaRoot:
    """Positive root of E[rho^kappa] = 1 by bisection.

    The map kappa -> E[rho^kappa] is strictly convex, equals 1 at 0 and has a
    negative slope there, so there is at most one positive root.  ``ballistic``
    is set when E[rho] < 1, in which case the root exceeds 1.
    """
    if dist.mean_log_rho >= -1e-12:
        raise AssumptionViolated("E[log rho] must be negative")
    lo, hi = bracket
    f = lambda k: dist.moment(k) - 1.0
    if f(hi) <= 0.0:
        raise NoRoot(f"E[rho^kappa] < 1 on (0, {hi}]; no trapping regime")
    if f(lo) >= 0.0:
        raise NoRoot("E[rho^kappa] >= 1 already at the lower bracket")
    for _ in range(iterations):
        mid = 0.5 * (lo + hi)
        if f(mid) < 0.0:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 4 * np.finfo(float).eps * hi:
            break
    k = lo if abs(f(lo)) <= abs(f(hi)) else hi
    return KappaRoot(float(k), dist.ballistic)


# ---------------------------------------------------------------------------
# environments


class LadderStats(NamedTuple):
    """Per-ladder statistics, one entry per ladder location in the window.

    ``k`` is the ladder index (0 for the last ladder <= 0), ``nu`` the position,
    ``block_length`` = nu_{k+1} - nu_k, ``beta`` the expected crossing time,
    ``M`` the largest potential climb exp(V(j+1) - V(nu_k)) in the block.
    Entries that need sites outside the window are NaN and ``complete`` is
    False for them.  ``beta`` is NaN where the left series is not certified.
    """

    k: np.ndarray
    nu: np.ndarray
    block_length: np.ndarray
    beta: np.ndarray
    M: np.ndarray
    complete: np.ndarray

    def index_of(self, k: int) -> int:
        i = k - int(self.k[0])
        if not 0 <= i < self.k.size:
            raise IndexError(f"ladder {k} outside window")
        return i


class Environment:
    """omega_x on the integer window [x_min, x_max] (immutable)."""

    def __init__(self, omega, x_min: int, dist: Optional[EnvDistribution] = None,
                 law: str = "P", seed=None):
        omega = np.array(omega, dtype=float)
        if omega.ndim != 1 or omega.size == 0:
            raise ValueError("omega must be a non-empty 1-d array")
        if np.any((omega <= 0) | (omega >= 1)):
            raise ValueError("omega values must lie in (0, 1)")
        self.x_min = int(x_min)
        self.x_max = self.x_min + omega.size - 1
        if not self.x_min <= 0 <= self.x_max + 1:
            raise ValueError("window must contain 0")
        if law not in ("P", "Q"):
            raise ValueError("law must be 'P' or 'Q'")
        omega.setflags(write=False)
        self.omega = omega
        self.dist = dist
        self.law = law
        self.seed = seed

    def __len__(self):
        return self.omega.size

    def i(self, x):
        """Array index of site x."""
        return np.asarray(x) - self.x_min

    def omega_at(self, x: int) -> float:
        return float(self.omega[x - self.x_min])

    @cached_property
    def rho(self) -> np.ndarray:
        return (1.0 - self.omega) / self.omega

    @cached_property
    def log_rho(self) -> np.ndarray:
        return np.log1p(-self.omega) - np.log(self.omega)

    @cached_property
    def potential(self) -> np.ndarray:
        """V at positions x_min .. x_max + 1 (one more entry than omega)."""
        c = np.concatenate(([0.0], np.cumsum(self.log_rho)))
        return c - c[-self.x_min] if self.x_min <= 0 else c

    def V(self, x):
        return self.potential[np.asarray(x) - self.x_min]

    @cached_property
    def ladders(self) -> LadderStats:
        return _ladder_stats(self)

    @cached_property
    def R_window(self) -> np.ndarray:
        """R_x = sum_{j>=x} Pi_{x,j} by backward recursion, NaN where the right edge matters."""
        return _bulk_R(self)

    @cached_property
    def W_window(self) -> np.ndarray:
        """W_x = sum_{i<=x} Pi_{i,x} by forward recursion, NaN where the left edge matters."""
        return _bulk_W(self)

    @cached_property
    def g_window(self) -> np.ndarray:
        """g(x) = 1 + R_x + R_{x+1} at every site, NaN where not certified."""
        R = self.R_window
        g = np.full(self.omega.size, np.nan)
        g[:-1] = 1.0 + R[:-1] + R[1:]
        return g

    # ------------------------------------------------------------------ io
    def header(self) -> dict:
        return {"law": self.law, "x_min": self.x_min, "x_max": self.x_max,
                "seed": self.seed, "dist": self.dist.to_dict() if self.dist else None}

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write("# " + json.dumps(self.header(), sort_keys=True) + "\n")
            fh.write("omega\n")
            for w in self.omega:
                fh.write(repr(float(w)) + "\n")

    @classmethod
    def from_csv(cls, path) -> "Environment":
        with open(path) as fh:
            head = json.loads(fh.readline()[2:])
            assert fh.readline().strip() == "omega"
            omega = np.array([float(line) for line in fh if line.strip()])
        return cls._from_header(head, omega)

    def to_binary(self, path) -> None:
        np.savez(path, omega=self.omega, header=np.array(json.dumps(self.header(), sort_keys=True)))

    @classmethod
    def from_binary(cls, path) -> "Environment":
        with np.load(path) as z:
            return cls._from_header(json.loads(str(z["header"])), z["omega"])

    @classmethod
    def _from_header(cls, head, omega):
        dist = EnvDistribution(tuple(map(tuple, head["dist"]["support"]))) if head["dist"] else None
        env = cls(omega, head["x_min"], dist, head["law"], head["seed"])
        if env.x_max != head["x_max"]:
            raise ValueError("omega length does not match the header window")
        return env


def save_ladders_csv(stats: LadderStats, path, complete_only: bool = True) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "nu_k", "beta_k", "M_k"])
        for i in range(stats.k.size):
            if complete_only and not stats.complete[i]:
                continue
            w.writerow([int(stats.k[i]), int(stats.nu[i]), repr(float(stats.beta[i])), repr(float(stats.M[i]))])


# ---------------------------------------------------------------------------
# sampling


def _cut_blocks(dist: EnvDistribution, rng: np.random.Generator, n_sites: int, cap: int,
                chunk: int = 65536):
    """Draw a stream of i.i.d. omegas and cut it at successive strict record minima of V.

    Returns the omega stream and the cut positions (block end indices), with
    enough complete blocks to cover ``n_sites`` sites.  The incomplete tail of
    the stream is dropped.  Each block is one draw of the first-descent block:
    omega_0, omega_1, ... up to the first x with V(x) < V(0).
    """
    pieces, cuts = [], []
    start = 0          # stream index where the current (open) block begins
    total = 0          # number of drawn sites
    level = 0.0        # V at the start of the open block
    vcur = 0.0         # V at the end of the stream
    covered = 0
    while covered < n_sites:
        om = dist.draw(rng, chunk)
        lr = np.log1p(-om) - np.log(om)
        v = vcur + np.cumsum(lr)        # V at stream positions total+1 .. total+chunk
        pieces.append(om)
        prev_min = np.minimum.accumulate(np.concatenate(([level], v)))[:-1]
        rec = np.flatnonzero(v < prev_min)          # V(total + c + 1) is a new strict minimum
        if rec.size:
            ends = total + rec + 1
            lens = np.diff(np.concatenate(([start], ends)))
            if lens.max() > cap:
                raise BlockOverflow(f"block of length {lens.max()} exceeds cap {cap}")
            need = np.searchsorted(ends, n_sites, side="left")
            if need < ends.size:
                ends = ends[: need + 1]
            cuts.extend(ends.tolist())
            start = int(ends[-1])
            level = v[start - total - 1]
            covered = start
        total += chunk
        vcur = v[-1]
        if total - start > cap:
            raise BlockOverflow(f"open block longer than cap {cap}")
    stream = np.concatenate(pieces)
    return stream, np.array(cuts, dtype=np.int64)


def sample_blocks(dist: EnvDistribution, n_blocks: int, seed: SeedLike, cap: int = BLOCK_CAP):
    """Sample ``n_blocks`` i.i.d. first-descent blocks; returns (omega stream, block lengths)."""
    rng = as_generator(seed, "blocks")
    streams, lengths, have = [], [], 0
    while have < n_blocks:
        om, cuts = _cut_blocks(dist, rng, max(1024, 4 * (n_blocks - have)), cap)
        lens = np.diff(np.concatenate(([0], cuts)))[: n_blocks - have]
        streams.append(om[: lens.sum()])
        lengths.append(lens)
        have += lens.size
    return np.concatenate(streams), np.concatenate(lengths)


def sample_environment(dist: EnvDistribution, law: str, window, seed: SeedLike,
                       cap: int = BLOCK_CAP) -> Environment:
    """Sample omega on the integer window [x_min, x_max] under law P or Q.

    Under P the omegas are i.i.d.  Under Q the window is tiled by i.i.d.
    first-descent blocks in both directions starting from a ladder at 0, so
    V(y) > 0 for every y < 0.
    """
    x_min, x_max = int(window[0]), int(window[1])
    if not x_min <= 0 <= x_max:
        raise ValueError("window must contain 0")
    if law == "P":
        rng = as_generator(seed, "env", "P")
        omega = dist.draw(rng, x_max - x_min + 1)
    elif law == "Q":
        rng_r = as_generator(seed, "env", "Q", "right")
        rng_l = as_generator(seed, "env", "Q", "left") if not isinstance(seed, np.random.Generator) else seed
        right, _ = _cut_blocks(dist, rng_r, x_max + 1, cap)
        right = right[: x_max + 1]
        if x_min < 0:
            stream, cuts = _cut_blocks(dist, rng_l, -x_min, cap)
            starts = np.concatenate(([0], cuts[:-1]))
            # block j (j = 0, 1, ...) sits immediately left of block j-1
            left = np.concatenate([stream[s:e] for s, e in zip(starts[::-1], cuts[::-1])])
            left = left[left.size + x_min:]
        else:
            left = np.empty(0)
        omega = np.concatenate((left, right))
    else:
        raise ValueError("law must be 'P' or 'Q'")
    return Environment(omega, x_min, dist, law, seed if isinstance(seed, (int, np.integer)) else None)


def mean_block_length(dist: EnvDistribution, n_blocks: int = 20000, seed: int = 0) -> tuple:
    """Monte Carlo estimate (mean, stderr) of the expected block length."""
    _, lengths = sample_blocks(dist, n_blocks, seed)
    return float(lengths.mean()), float(lengths.std(ddof=1) / math.sqrt(lengths.size))


def default_buffer(dist: EnvDistribution) -> int:
    """Buffer size (sites) used by experiments: 200 times the mean block length."""
    return int(math.ceil(200.0 * mean_block_length(dist)[0]))


# ---------------------------------------------------------------------------
# ladders


def _ladder_stats(env: Environment) -> LadderStats:
    V = env.potential
    run_min = np.minimum.accumulate(V)
    is_rec = np.empty(V.size, dtype=bool)
    is_rec[0] = True
    is_rec[1:] = V[1:] < run_min[:-1]
    pos = np.flatnonzero(is_rec) + env.x_min          # ladder positions in [x_min, x_max+1]
    n0 = np.searchsorted(pos, 0, side="right") - 1    # index of nu_0
    k = np.arange(pos.size) - n0
    blen = np.zeros(pos.size, dtype=np.int64)
    blen[:-1] = np.diff(pos)
    complete = np.ones(pos.size, dtype=bool)
    complete[-1] = False                             # its successor lies outside the window
    # the left edge is always a record of the window but a genuine ladder only
    # when the window starts at the ladder 0 of a Q-environment
    if not (env.x_min == 0 and env.law == "Q"):
        complete[0] = False
    M = np.full(pos.size, np.nan)
    beta = np.full(pos.size, np.nan)
    if pos.size > 1:
        seg = pos[:-1] - env.x_min
        Vn = V[1: pos[-1] - env.x_min + 1]           # V(j+1) for j = x_min .. nu_last - 1
        M[:-1] = np.exp(np.maximum.reduceat(Vn, seg) - V[seg])
        W = env.W_window[: pos[-1] - env.x_min]
        beta[:-1] = blen[:-1] + 2.0 * np.add.reduceat(W, seg)
    return LadderStats(k, pos, blen, beta, M, complete & np.isfinite(beta))


def _bulk_W(env: Environment, tol: float = SERIES_TOL, patience: int = SERIES_PATIENCE) -> np.ndarray:
    """Forward recursion W_j = rho_j (1 + W_{j-1}) from the left edge.

    W_j is certified when every dropped-edge term exp(V(j+1) - V(i)) with i in
    the first ``patience`` sites is below tol * W_j, which is the
    consecutive-step stopping rule of the series read from the other end.
    """
    rho = env.rho
    W = forward_products(rho)
    V = env.potential
    edge = V[: min(patience, rho.size)].min()
    bad = V[1:] - edge >= np.log(tol * W)
    W[bad] = np.nan
    return W


def _bulk_R(env: Environment, tol: float = SERIES_TOL, patience: int = SERIES_PATIENCE) -> np.ndarray:
    """Backward recursion R_i = rho_i (1 + R_{i+1}) from the right edge, certified as in _bulk_W."""
    rho = env.rho
    R = forward_products(rho[::-1])[::-1].copy()
    V = env.potential
    edge = V[-min(patience, rho.size):].max()       # V(j+1) for the last patience sites
    bad = edge - V[:-1] >= np.log(tol * R)
    R[bad] = np.nan
    return R


def compute_potential_and_ladders(env: Environment):
    """Return the potential on [x_min, x_max+1] and the ladder statistics."""
    return env.potential, env.ladders


# ---------------------------------------------------------------------------
# point queries (series with a consecutive-step stopping rule)


class SeriesValue(NamedTuple):
    value: float
    error: float


def _tail_ratio(env: Environment) -> float:
    mlr = env.dist.mean_log_rho if env.dist is not None else float(np.mean(env.log_rho))
    return math.exp(min(mlr, -1e-3))


def R_series(env: Environment, x: int, tol: float = SERIES_TOL, patience: int = SERIES_PATIENCE) -> SeriesValue:
    """R_x = sum_{j>=x} Pi_{x,j}, truncated by the consecutive-step rule."""
    rho = env.rho
    j = x - env.x_min
    if j < 0:
        raise BufferExhausted(f"site {x} is left of the window")
    term, total, quiet = 1.0, 0.0, 0
    while True:
        if j >= rho.size:
            raise BufferExhausted(f"series R_{x} did not converge before the right edge {env.x_max}")
        term *= rho[j]
        total += term
        quiet = quiet + 1 if term < tol * total else 0
        if quiet >= patience:
            break
        j += 1
    q = _tail_ratio(env)
    return SeriesValue(total, term * q / (1.0 - q))


def W_series(env: Environment, x: int, tol: float = SERIES_TOL, patience: int = SERIES_PATIENCE) -> SeriesValue:
    """W_x = sum_{i<=x} Pi_{i,x}, truncated by the consecutive-step rule."""
    rho = env.rho
    i = x - env.x_min
    if i >= rho.size:
        raise BufferExhausted(f"site {x} is right of the window")
    term, total, quiet = 1.0, 0.0, 0
    while True:
        if i < 0:
            raise BufferExhausted(f"series W_{x} did not converge before the left edge {env.x_min}")
        term *= rho[i]
        total += term
        quiet = quiet + 1 if term < tol * total else 0
        if quiet >= patience:
            break
        i -= 1
    q = _tail_ratio(env)
    return SeriesValue(total, term * q / (1.0 - q))


def g_function(env: Environment, x: int, tol: float = SERIES_TOL) -> SeriesValue:
    """Expected number of visits to x of the walk started at x.

    g(x) = 1 + R_x + R_{x+1} = (1 + R_{x+1}) / omega_x.
    """
    r1 = R_series(env, x + 1, tol)
    g = (1.0 + r1.value) / env.omega_at(x)
    return SeriesValue(g, r1.error / env.omega_at(x))


def ladder_position(env: Environment, k: int) -> int:
    st = env.ladders
    return int(st.nu[st.index_of(k)])


def beta_k(env: Environment, k: int, tol: float = SERIES_TOL) -> float:
    """Expected time for the walk from nu_k to reach nu_{k+1}.

    beta_k = (nu_{k+1} - nu_k) + 2 sum_{j=nu_k}^{nu_{k+1}-1} W_j with W_{nu_k-1}
    from the truncated series and the rest from W_j = rho_j (1 + W_{j-1}).
    """
    st = env.ladders
    i = st.index_of(k)
    if i + 1 >= st.nu.size:
        raise BufferExhausted(f"ladder {k + 1} is outside the window")
    a, b = int(st.nu[i]), int(st.nu[i + 1])
    w = W_series(env, a - 1, tol).value if a > env.x_min else None
    if w is None:
        raise BufferExhausted(f"no left buffer for ladder {k}")
    rho = env.rho
    s = 0.0
    for j in range(a - env.x_min, b - env.x_min):
        w = rho[j] * (1.0 + w)
        s += w
    return (b - a) + 2.0 * s


def M_k(env: Environment, k: int) -> float:
    st = env.ladders
    i = st.index_of(k)
    if i + 1 >= st.nu.size:
        raise BufferExhausted(f"ladder {k + 1} is outside the window")
    return float(st.M[i])


def b_coeff(env: Environment, x: int, k: int) -> float:
    """Expected number of visits to x by the walk from nu_k before it first hits nu_{k+1}.

    Computed as P(hit x before nu_{k+1}) * (1 + R_{x+1, nu_{k+1}-1}) / omega_x,
    with the hitting probability from the birth-death ruin formula written
    with potential differences.
    """
    st = env.ladders
    i = st.index_of(k)
    if i + 1 >= st.nu.size:
        raise BufferExhausted(f"ladder {k + 1} is outside the window")
    m, N = int(st.nu[i]), int(st.nu[i + 1])
    if x >= N:
        raise ValueError("x must be left of nu_{k+1}")
    if x < env.x_min:
        raise BufferExhausted(f"site {x} is left of the window")
    V = env.potential
    off = env.x_min
    # log Pi_{x+1,j} = V(j+1) - V(x+1) for j = x .. N-1 (j = x gives the empty product)
    lp = V[x + 1 - off: N + 1 - off] - V[x + 1 - off]
    top = lp.max()
    e = np.exp(lp - top)
    occ_sum = e.sum()                       # (1 + R_{x+1,N-1}) * exp(-top)
    hit = 1.0 if x >= m else e[m - x:].sum() / occ_sum
    return float(hit * occ_sum * math.exp(top) / env.omega_at(x))


def b_row(env: Environment, k: int) -> tuple:
    """All b_{x,k} for x in [x_min, nu_{k+1}); returns (sites, values)."""
    st = env.ladders
    i = st.index_of(k)
    m, N = int(st.nu[i]), int(st.nu[i + 1])
    V = env.potential
    off = env.x_min
    xs = np.arange(env.x_min, N)
    Vn = V[xs + 1 - off]                    # V(x+1)
    # log of sum_{j=max(x,m)}^{N-1} exp(V(j+1)) via reverse log-add accumulation
    vj = V[np.arange(env.x_min, N) + 1 - off]
    suffix = np.logaddexp.accumulate(vj[::-1])[::-1]   # suffix[x] = log sum_{j>=x} exp(V(j+1))
    lsum = np.where(xs >= m, suffix, suffix[m - off])
    vals = np.exp(lsum - Vn) / env.omega[xs - off]
    return xs, vals


def b_column(env: Environment, x: int) -> tuple:
    """b_{x,k} for every ladder k with nu_{k+1} > x whose successor lies in the window; returns (ks, values)."""
    st = env.ladders
    off = env.x_min
    if not env.x_min <= x <= env.x_max:
        raise BufferExhausted(f"site {x} is outside the window")
    V = env.potential
    ks, vals = [], []
    for i in range(st.nu.size - 1):
        m, N = int(st.nu[i]), int(st.nu[i + 1])
        if N <= x:
            continue
        lo = max(x, m)
        terms = V[lo + 1 - off: N + 1 - off] - V[x + 1 - off]
        ks.append(int(st.k[i]))
        vals.append(float(np.exp(terms).sum() / env.omega[x - off]))
    return np.array(ks, dtype=np.int64), np.array(vals)


def rescaled_trap_env(env: Environment, n: float, kappa: float) -> TrapEnvironment:
    """Trap environment with atoms (nu_k / n, beta_k / n^(1/kappa)) over complete ladders."""
    st = env.ladders
    ok = st.complete & np.isfinite(st.beta)
    x = st.nu[ok] / n
    y = st.beta[ok] / n ** (1.0 / kappa)
    return TrapEnvironment(x, y, (env.x_min / n, (env.x_max + 1) / n))


class BlockSample(NamedTuple):
    """Statistics of consecutive first-descent blocks of one long Q-stream."""

    length: np.ndarray
    beta: np.ndarray
    M: np.ndarray


def iter_block_stats(dist: EnvDistribution, seed: SeedLike, chunk_blocks: int = 1 << 20,
                     burn_in: int = 256, cap: int = BLOCK_CAP):
    """Yield BlockSample chunks of consecutive blocks from one stationary stream.

    The stream starts at a ladder with no environment to its left; the first
    ``burn_in`` blocks are discarded so that the W recursion has forgotten the
    empty left side (its influence decays geometrically with the potential).
    """
    rng = as_generator(seed, "block_stats")
    state = np.array([0.0, 0.0, 0.0, 0.0, -np.inf])
    lr_vals = np.log(dist.rho_values)
    cdf = np.cumsum(dist.probs)
    cdf[-1] = 1.0
    xs = xoshiro_state(rng)
    skip = burn_in
    while True:
        L = np.empty(chunk_blocks)
        B = np.empty(chunk_blocks)
        lM = np.empty(chunk_blocks)
        if not block_scan_draw(cdf, lr_vals, np.exp(lr_vals), state, xs, L, B, lM, cap):
            raise BlockOverflow(f"open block longer than cap {cap}")
        if skip:
            s = min(skip, chunk_blocks)
            skip -= s
            L, B, lM = L[s:], B[s:], lM[s:]
        yield BlockSample(L.astype(np.int64), B, np.exp(lM))


def sample_block_stats(dist: EnvDistribution, n_blocks: int, seed: SeedLike,
                       burn_in: int = 256) -> BlockSample:
    """Lengths, beta and M of ``n_blocks`` consecutive blocks under Q."""
    out, have = [], 0
    for chunk in iter_block_stats(dist, seed, min(1 << 20, n_blocks + burn_in), burn_in):
        out.append(chunk)
        have += chunk.length.size
        if have >= n_blocks:
            break
    return BlockSample(*(np.concatenate([getattr(c, f) for c in out])[:n_blocks]
                         for f in BlockSample._fields))
