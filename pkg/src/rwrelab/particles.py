"""Independent particle systems on trap environments and on random environments.

Initial configurations are product Poisson.  Trap particles are simulated
exactly (each holds an Exp(y_k) time at trap k and then jumps right).  Walk
particles are simulated step by step through per-site counts: at each step
the particles at x split binomially between x+1 and x-1, which has the same
law as moving every particle independently.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional

import numba
import numpy as np

from .env import Environment
from .errors import BufferExhausted, WindowExit
from .rng import SeedLike, as_generator, int_seed
from .trap import TrapEnvironment
from .uw import ProfileFunction

DEFAULT_MAX_EXIT_FRACTION = 1e-3


# ---------------------------------------------------------------------------
# data types


@dataclass(eq=False)
class ParticleConfiguration:
    """Particle counts per trap (kind 'trap') or per lattice site (kind 'rwre')."""

    counts: np.ndarray
    kind: str
    x_min: int = 0          # lattice site of counts[0] for kind 'rwre'
    means: Optional[np.ndarray] = None

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if np.any(self.counts < 0):
            raise ValueError("counts must be nonnegative")

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def to_sparse_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["site", "count"])
            for i in np.flatnonzero(self.counts):
                w.writerow([int(i) + (self.x_min if self.kind == "rwre" else 0), int(self.counts[i])])


@dataclass(frozen=True, eq=False)
class TestFunction:
    """Continuous phi(t, x), bilinear on a grid of t-nodes times x-nodes, zero outside the grid box.

    The values must vanish on the x-boundary and at the last t-node so that the
    extension by zero is continuous.
    """

    t_nodes: np.ndarray
    x_nodes: np.ndarray
    values: np.ndarray          # shape (len(t_nodes), len(x_nodes))
    name: str = "phi"

    __test__ = False            # not a pytest class

    def __post_init__(self):
        t = np.asarray(self.t_nodes, dtype=float)
        x = np.asarray(self.x_nodes, dtype=float)
        v = np.asarray(self.values, dtype=float)
        if v.shape != (t.size, x.size):
            raise ValueError("values must have shape (len(t_nodes), len(x_nodes))")
        if np.any(np.diff(t) <= 0) or np.any(np.diff(x) <= 0) or t[0] < 0:
            raise ValueError("nodes must be increasing and times non-negative")
        if np.any(v[:, 0] != 0) or np.any(v[:, -1] != 0) or np.any(v[-1] != 0):
            raise ValueError("phi must vanish on the boundary of its support box (except at the initial time)")
        object.__setattr__(self, "t_nodes", t)
        object.__setattr__(self, "x_nodes", x)
        object.__setattr__(self, "values", v)

    @classmethod
    def separable(cls, psi: ProfileFunction | tuple, chi: ProfileFunction, name: str = "phi"):
        """phi(t, x) = psi(t) chi(x); psi is either a ProfileFunction in t or (t_nodes, values)."""
        if isinstance(psi, ProfileFunction):
            tn, tv = psi.xs, psi.values
        else:
            tn, tv = (np.asarray(a, dtype=float) for a in psi)
        return cls(tn, chi.xs, np.outer(tv, chi.values), name)

    @classmethod
    def zero(cls):
        return cls(np.array([0.0, 1.0]), np.array([0.0, 1.0]), np.zeros((2, 2)), "zero")

    @property
    def T(self) -> float:
        return float(self.t_nodes[-1])

    @property
    def sup(self) -> float:
        return float(np.abs(self.values).max())

    def at_x(self, x) -> np.ndarray:
        """phi(t_i, x_p) for every t-node i and position p; shape (n_t, n_p)."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        out = np.empty((self.t_nodes.size, x.size))
        for i in range(self.t_nodes.size):
            out[i] = np.interp(x, self.x_nodes, self.values[i], left=0.0, right=0.0)
        return out

    def __call__(self, t, x):
        t = np.asarray(t, dtype=float)
        x = np.asarray(x, dtype=float)
        t, x = np.broadcast_arrays(t, x)
        cols = self.at_x(x.reshape(-1))                     # (n_t, P)
        tt = t.reshape(-1)
        i = np.clip(np.searchsorted(self.t_nodes, tt, side="right") - 1, 0, self.t_nodes.size - 2)
        w = (tt - self.t_nodes[i]) / (self.t_nodes[i + 1] - self.t_nodes[i])
        p = np.arange(tt.size)
        val = (1 - w) * cols[i, p] + w * cols[i + 1, p]
        val[(tt < self.t_nodes[0]) | (tt > self.t_nodes[-1])] = 0.0
        return val.reshape(t.shape)

    def time_antiderivative(self, x) -> "TimeAntiderivative":
        return TimeAntiderivative(self.t_nodes, self.at_x(x))


@dataclass(eq=False)
class TimeAntiderivative:
    """A(s, p) = int_0^s phi(t, x_p) dt for fixed positions x_p, exact for piecewise-linear phi."""

    t_nodes: np.ndarray
    vals: np.ndarray        # (n_t, P)

    def __post_init__(self):
        dt = np.diff(self.t_nodes)[:, None]
        inc = 0.5 * dt * (self.vals[1:] + self.vals[:-1])
        self.cum = np.vstack((np.zeros((1, self.vals.shape[1])), np.cumsum(inc, axis=0)))
        # contribution of [0, t_nodes[0]) is zero (phi vanishes before its first node)

    def __call__(self, s, p) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        p = np.asarray(p)
        tn = self.t_nodes
        sc = np.clip(s, tn[0], tn[-1])
        i = np.clip(np.searchsorted(tn, sc, side="right") - 1, 0, tn.size - 2)
        h = sc - tn[i]
        dt = tn[i + 1] - tn[i]
        f0 = self.vals[i, p]
        f1 = self.vals[i + 1, p]
        return self.cum[i, p] + h * f0 + 0.5 * h * h * (f1 - f0) / dt


@dataclass(eq=False)
class SpaceTimeIntegral:
    value: float
    normalization: float
    method: str
    error_bound: float = 0.0
    meta: dict = field(default_factory=dict)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            keys = sorted(self.meta)
            w.writerow(["value", "normalization", "method", "error_bound"] + keys)
            w.writerow([repr(self.value), repr(self.normalization), self.method, repr(self.error_bound)]
                       + [self.meta[k] for k in keys])


# ---------------------------------------------------------------------------
# initial configurations


def init_configuration(kind: str, env, u: ProfileFunction, scale: float, seed: SeedLike) -> ParticleConfiguration:
    """Product-Poisson initial configuration.

    kind 'trap': mean scale * u(x_k) * y_k at trap k (scale is a_n).
    kind 'rwre_local': mean u(x/scale) * g(x) at site x (scale is n).
    kind 'rwre_ladder': mean u(nu_k/scale) * beta_k at ladder sites, 0 elsewhere.
    """
    rng = as_generator(seed, "init", kind)
    if kind == "trap":
        W: TrapEnvironment = env
        means = scale * u(W.x) * W.y
        return ParticleConfiguration(rng.poisson(means), "trap", 0, means)
    if kind not in ("rwre_local", "rwre_ladder"):
        raise ValueError(f"unknown configuration kind {kind!r}")
    means = rwre_means(kind, env, u, scale)
    return ParticleConfiguration(rng.poisson(means), "rwre", env.x_min, means)


def rwre_means(kind: str, env: Environment, u: ProfileFunction, n: float) -> np.ndarray:
    sites = np.arange(env.x_min, env.x_max + 1)
    ux = u(sites / n)
    if kind == "rwre_local":
        g = env.g_window
        need = ux > 0
        if np.any(need & ~np.isfinite(g)):
            raise BufferExhausted("g is not certified on the support of u; enlarge the window")
        return np.where(need, ux * np.nan_to_num(g), 0.0)
    st = env.ladders
    means = np.zeros(sites.size)
    ok = np.isfinite(st.beta)
    w = u(st.nu / n)
    need = w > 0
    if np.any(need & ~ok):
        raise BufferExhausted("beta is not certified on the support of u; enlarge the window")
    sel = need & ok
    means[st.nu[sel] - env.x_min] = w[sel] * st.beta[sel]
    return means


# ---------------------------------------------------------------------------
# trap particles


@dataclass(eq=False)
class TrapTrajectory:
    """Piecewise-constant paths: particle p sits at trap ``atom`` during [start, end)."""

    W: TrapEnvironment
    horizon: float
    particle: np.ndarray
    atom: np.ndarray
    start: np.ndarray
    end: np.ndarray
    n_particles: int
    exits: int
    exit_times: np.ndarray

    def configuration_at(self, t: float) -> ParticleConfiguration:
        if not 0 <= t <= self.horizon:
            raise ValueError("time outside the simulated horizon")
        on = (self.start <= t) & (t < self.end)
        return ParticleConfiguration(np.bincount(self.atom[on], minlength=len(self.W)), "trap")


def _trap_paths(y: np.ndarray, starts: np.ndarray, T: float, rng: np.random.Generator):
    n = starts.size
    pid = np.arange(n)
    idx = starts.copy()
    tcur = np.zeros(n)
    P, A, S, E = [], [], [], []
    exit_pid, exit_t = [], []
    N = y.size
    while pid.size:
        hold = y[idx] * rng.standard_exponential(pid.size)
        tend = tcur + hold
        P.append(pid); A.append(idx); S.append(tcur); E.append(tend)
        go = tend < T
        pid, idx, tcur = pid[go], idx[go] + 1, tend[go]
        out = idx >= N
        if np.any(out):
            exit_pid.append(pid[out]); exit_t.append(tcur[out])
            pid, idx, tcur = pid[~out], idx[~out], tcur[~out]
    cat = lambda a, dt: np.concatenate(a) if a else np.empty(0, dtype=dt)
    return (cat(P, np.int64), cat(A, np.int64), cat(S, float), cat(E, float),
            cat(exit_pid, np.int64), cat(exit_t, float))


def evolve_trap_system(W: TrapEnvironment, config: ParticleConfiguration, T: float, seed: SeedLike,
                       max_exit_fraction: float = DEFAULT_MAX_EXIT_FRACTION) -> TrapTrajectory:
    """Exact simulation of independent rightward trap particles up to time T.

    Particles that run past the last trap before T are tallied; WindowExit is
    raised if their fraction exceeds ``max_exit_fraction``.
    """
    rng = as_generator(seed, "trap_system")
    starts = np.repeat(np.arange(len(W)), config.counts)
    P, A, S, E, xp, xt = _trap_paths(W.y, starts, T, rng)
    n = starts.size
    if n and xp.size / n > max_exit_fraction:
        raise WindowExit(f"{xp.size} of {n} particles left the window before T={T}")
    return TrapTrajectory(W, T, P, A, S, E, n, int(xp.size), xt)


def trap_counts_at(W: TrapEnvironment, means: np.ndarray, t: float, n_replicas: int, seed: SeedLike,
                   max_exit_fraction: float = DEFAULT_MAX_EXIT_FRACTION):
    """Counts per trap at time t for many independent replicas (site marginals only).

    Returns (counts array of shape (n_replicas, len(W)), exit fraction).
    """
    rng = as_generator(seed, "trap_counts")
    N = len(W)
    init = rng.poisson(np.broadcast_to(means, (n_replicas, N)))
    rep, atom = np.nonzero(init)
    mult = init[rep, atom]
    rep = np.repeat(rep, mult)
    idx = np.repeat(atom, mult)
    tleft = np.full(idx.size, float(t))
    final_rep, final_idx = [], []
    exits = 0
    total = idx.size
    while idx.size:
        hold = W.y[idx] * rng.standard_exponential(idx.size)
        stay = hold > tleft
        final_rep.append(rep[stay]); final_idx.append(idx[stay])
        mv = ~stay
        rep, idx, tleft = rep[mv], idx[mv] + 1, tleft[mv] - hold[mv]
        out = idx >= N
        exits += int(out.sum())
        rep, idx, tleft = rep[~out], idx[~out], tleft[~out]
    counts = np.zeros((n_replicas, N), dtype=np.int64)
    if final_rep:
        np.add.at(counts, (np.concatenate(final_rep), np.concatenate(final_idx)), 1)
    frac = exits / total if total else 0.0
    if frac > max_exit_fraction:
        raise WindowExit(f"exit fraction {frac:.3g} above {max_exit_fraction}")
    return counts, frac


# ---------------------------------------------------------------------------
# walk particles


@numba.njit(cache=True)
def _phi_weight(m, phi_tsteps, node):
    """Node index and interpolation weight of phi at the middle of step m (node=-1 outside)."""
    tm = m + 0.5
    nn = phi_tsteps.size
    if nn == 0 or tm < phi_tsteps[0] or tm >= phi_tsteps[nn - 1]:
        return -1, 0.0
    if node < 0:
        node = 0
    while node + 1 < nn and phi_tsteps[node + 1] <= tm:
        node += 1
    return node, (tm - phi_tsteps[node]) / (phi_tsteps[node + 1] - phi_tsteps[node])


@numba.njit(cache=True)
def _evolve_mean(m, omega, steps, snap_steps, snaps, phi_tab, phi_tsteps):
    """Deterministic evolution of mean counts; returns (Riemann sum in step units, mass out left, right)."""
    L = omega.size
    r = np.zeros(L)
    acc = 0.0
    out_l = 0.0
    out_r = 0.0
    s_i = 0
    node = -1
    for k in range(steps + 1):
        while s_i < snap_steps.size and snap_steps[s_i] == k:
            snaps[s_i, :] = m
            s_i += 1
        if k == steps:
            break
        node, w = _phi_weight(k, phi_tsteps, node)
        s = 0.0
        if node >= 0:
            for x in range(L):
                s += m[x] * ((1.0 - w) * phi_tab[node, x] + w * phi_tab[node + 1, x])
            acc += s
        for x in range(L):
            r[x] = m[x] * omega[x]
        out_l += m[0] - r[0]
        out_r += r[L - 1]
        prev_r = 0.0
        for x in range(L - 1):
            nx = prev_r + (m[x + 1] - r[x + 1])
            prev_r = r[x]
            m[x] = nx
        m[L - 1] = prev_r
    return acc, out_l, out_r


@numba.njit(cache=True)
def _evolve_binomial(c, omega, steps, snap_steps, snaps, phi_tab, phi_tsteps, seed):
    """Per-site binomial splitting of integer counts; same returns as _evolve_mean.

    Only the occupied range [lo, hi] is visited.
    """
    np.random.seed(seed)
    L = omega.size
    nxt = np.zeros(L, dtype=np.int64)
    acc = 0.0
    out_l = 0
    out_r = 0
    s_i = 0
    node = -1
    lo = 0
    hi = L - 1
    while lo <= hi and c[lo] == 0:
        lo += 1
    while hi >= lo and c[hi] == 0:
        hi -= 1
    for k in range(steps + 1):
        while s_i < snap_steps.size and snap_steps[s_i] == k:
            for x in range(L):
                snaps[s_i, x] = c[x]
            s_i += 1
        if k == steps or lo > hi:
            continue
        node, w = _phi_weight(k, phi_tsteps, node)
        if node >= 0:
            s = 0.0
            for x in range(lo, hi + 1):
                if c[x] != 0:
                    s += c[x] * ((1.0 - w) * phi_tab[node, x] + w * phi_tab[node + 1, x])
            acc += s
        a = max(lo - 1, 0)
        b = min(hi + 1, L - 1)
        for x in range(a, b + 1):
            nxt[x] = 0
        for x in range(lo, hi + 1):
            cx = c[x]
            if cx == 0:
                continue
            rr = np.random.binomial(cx, omega[x])
            if x + 1 < L:
                nxt[x + 1] += rr
            else:
                out_r += rr
            if x > 0:
                nxt[x - 1] += cx - rr
            else:
                out_l += cx - rr
        for x in range(a, b + 1):
            c[x] = nxt[x]
        lo, hi = a, b
        while lo <= hi and c[lo] == 0:
            lo += 1
        while hi >= lo and c[hi] == 0:
            hi -= 1
    return acc, float(out_l), float(out_r)


@dataclass(eq=False)
class RwreTrajectory:
    env: Environment
    steps: int
    snapshot_steps: np.ndarray
    snapshots: np.ndarray          # (n_snapshots, sites), counts or mean counts
    exits_left: float
    exits_right: float
    initial_total: float
    mean_field: bool
    riemann_sum: Optional[float] = None
    phi_name: Optional[str] = None
    n: Optional[float] = None
    kappa: Optional[float] = None

    @property
    def exit_fraction(self) -> float:
        return (self.exits_left + self.exits_right) / self.initial_total if self.initial_total else 0.0

    def configuration_at(self, step: int) -> ParticleConfiguration:
        j = np.flatnonzero(self.snapshot_steps == step)
        if j.size == 0:
            raise KeyError(f"no snapshot at step {step}")
        return ParticleConfiguration(np.rint(self.snapshots[j[0]]).astype(np.int64), "rwre", self.env.x_min)


def evolve_rwre_system(env: Environment, config: ParticleConfiguration, steps: int, seed: SeedLike,
                       snapshot_steps=(), phi: Optional[TestFunction] = None, n: Optional[float] = None,
                       kappa: Optional[float] = None, mean_field: bool = False) -> RwreTrajectory:
    """Evolve independent walkers for ``steps`` steps through per-site binomial splitting.

    Snapshots are taken at the requested step numbers.  With ``phi``, ``n`` and
    ``kappa`` the rescaled space-time Riemann sum is accumulated on the fly,
    with one time step of length n^(-1/kappa).  ``mean_field`` evolves the
    initial mean counts deterministically, which gives the conditional
    expectation of everything given the environment.
    """
    rng = as_generator(seed, "rwre_system")
    counts = config.counts.copy()
    if config.kind != "rwre" or counts.size != len(env) or config.x_min != env.x_min:
        raise ValueError("configuration does not match the environment")
    snap = np.asarray(sorted(set(int(s) for s in snapshot_steps)), dtype=np.int64)
    snaps = np.zeros((snap.size, counts.size))
    if phi is not None:
        if n is None or kappa is None:
            raise ValueError("phi requires n and kappa")
        scale = float(n) ** (1.0 / kappa)
        sites = np.arange(env.x_min, env.x_max + 1) / n
        tab = phi.at_x(sites)
        tsteps = phi.t_nodes * scale
        dt = 1.0 / scale
    else:
        tab = np.zeros((0, counts.size))
        tsteps = np.zeros(0)
        dt = 0.0
    if mean_field and config.means is None:
        raise ValueError("mean-field evolution needs the configuration means")
    mcounts = np.array(config.means, dtype=float) if mean_field else None
    total0 = float(mcounts.sum() if mean_field else counts.sum())
    if mean_field:
        acc, el, er = _evolve_mean(mcounts, env.omega, int(steps), snap, snaps, tab, tsteps)
    else:
        acc, el, er = _evolve_binomial(counts, env.omega, int(steps), snap, snaps, tab, tsteps, int_seed(rng))
    acc *= dt
    traj = RwreTrajectory(env, int(steps), snap, snaps, el, er, total0, mean_field)
    if phi is not None:
        traj.riemann_sum = acc / scale
        traj.phi_name, traj.n, traj.kappa = phi.name, n, kappa
    return traj


# ---------------------------------------------------------------------------
# space-time integrals


def space_time_integral(trajectory, phi: TestFunction, n: float, kappa_or_a_n: float) -> SpaceTimeIntegral:
    """Rescaled space-time integral of the empirical measure against phi.

    Trap trajectories: (1/a_n) sum over path segments of int phi(t, x_k) dt,
    exact for piecewise-linear phi (``kappa_or_a_n`` is a_n, ``n`` unused).
    Walk trajectories: (1/n^(1/kappa)) int sum_x chi_{t n^(1/kappa)}(x) phi(t, x/n) dt
    as a midpoint Riemann sum over walk steps (``kappa_or_a_n`` is kappa); the
    trajectory must have been evolved with the same phi.
    """
    if isinstance(trajectory, TrapTrajectory):
        a_n = float(kappa_or_a_n)
        W = trajectory.W
        if trajectory.start.size == 0:
            return SpaceTimeIntegral(0.0, a_n, "exact", 0.0, {"phi": phi.name})
        A = phi.time_antiderivative(W.x)
        T = trajectory.horizon
        s = np.minimum(trajectory.start, T)
        e = np.minimum(trajectory.end, T)
        val = float(np.sum(A(e, trajectory.atom) - A(s, trajectory.atom))) / a_n
        return SpaceTimeIntegral(val, a_n, "exact", 0.0, {"phi": phi.name, "exits": trajectory.exits})
    if isinstance(trajectory, RwreTrajectory):
        if trajectory.riemann_sum is None or trajectory.phi_name != phi.name or trajectory.n != n \
                or trajectory.kappa != kappa_or_a_n:
            raise ValueError("trajectory was not evolved with this test function and scaling")
        scale = float(n) ** (1.0 / kappa_or_a_n)
        # midpoint rule on each unit step: exact except on steps containing a t-node of phi;
        # each such step is off by at most (dt^2 / 4) * |d phi/dt| * mass
        dphi = np.abs(np.diff(phi.values, axis=0)).max() / np.diff(phi.t_nodes).min() if phi.t_nodes.size > 1 else 0.0
        bound = phi.t_nodes.size * (1.0 / scale) ** 2 * dphi * trajectory.initial_total / scale
        return SpaceTimeIntegral(float(trajectory.riemann_sum), scale, "riemann", float(bound),
                                 {"phi": phi.name, "n": n, "mean_field": trajectory.mean_field,
                                  "exit_fraction": trajectory.exit_fraction})
    raise TypeError("unknown trajectory type")
