"""Trap environments, trap measures, holding times and directed trap processes.

A trap environment is a finite, strictly increasing list of positions x_k with
depths y_k > 0.  The trap measure puts mass y_k at x_k.  A realization of the
holding-time measure puts mass y_k * zeta_k at x_k with zeta_k i.i.d. Exp(1).
The forward process sits at each trap for its holding time and then jumps to
the next trap on the right; the backward process does the same leftwards.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DegenerateWindow, WindowExit
from .rng import SeedLike, as_generator


@dataclass(frozen=True, eq=False)
class TrapEnvironment:
    """Finite trap environment on a window.

    Attributes:
        x: sorted trap positions.
        y: trap depths, same length as ``x``.
        window: (left, right) end points of the window.
        y_floor: smallest depth that was represented when the environment was built.
    """

    x: np.ndarray
    y: np.ndarray
    window: tuple = (-np.inf, np.inf)
    y_floor: float = 0.0
    _prefix: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        x = np.array(self.x, dtype=float).reshape(-1)
        y = np.array(self.y, dtype=float).reshape(-1)
        if x.shape != y.shape:
            raise ValueError("x and y must have the same length")
        if np.any(~np.isfinite(y)) or np.any(y <= 0):
            raise ValueError("trap depths must be finite and positive")
        if x.size > 1 and np.any(np.diff(x) <= 0):
            raise ValueError("trap positions must be strictly increasing")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "window", (float(self.window[0]), float(self.window[1])))
        prefix = np.concatenate(([0.0], np.cumsum(y)))
        prefix.setflags(write=False)
        object.__setattr__(self, "_prefix", prefix)

    def __len__(self):
        return self.x.size

    @property
    def measure(self) -> "TrapMeasure":
        return TrapMeasure(self.x, self._prefix)

    def first_at_or_right(self, x: float) -> int:
        """Index of the first trap >= x (== len(self) if none)."""
        return int(np.searchsorted(self.x, x, side="left"))

    def last_at_or_left(self, x: float) -> int:
        """Index of the last trap <= x (== -1 if none)."""
        return int(np.searchsorted(self.x, x, side="right")) - 1

    def without(self, k: int) -> "TrapEnvironment":
        """Copy of the environment with trap ``k`` removed."""
        keep = np.ones(len(self), dtype=bool)
        keep[k] = False
        return TrapEnvironment(self.x[keep], self.y[keep], self.window, self.y_floor)

    def restrict(self, a: float, b: float) -> "TrapEnvironment":
        """Traps with a <= x <= b, window clipped accordingly."""
        keep = (self.x >= a) & (self.x <= b)
        w = (max(a, self.window[0]), min(b, self.window[1]))
        return TrapEnvironment(self.x[keep], self.y[keep], w, self.y_floor)


@dataclass(frozen=True, eq=False)
class TrapMeasure:
    """Interval masses of the trap measure from prefix sums of the depths."""

    x: np.ndarray
    prefix: np.ndarray

    def mass(self, a: float, b: float) -> float:
        """Mass of the half-open interval (a, b]."""
        if b <= a:
            return 0.0
        i = np.searchsorted(self.x, a, side="right")
        j = np.searchsorted(self.x, b, side="right")
        return float(self.prefix[j] - self.prefix[i])


@dataclass(frozen=True, eq=False)
class HoldingTimes:
    """One realization of the holding-time measure on a trap environment."""

    env: TrapEnvironment
    zeta: np.ndarray
    tau: np.ndarray = field(init=False)
    cum: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        zeta = np.asarray(self.zeta, dtype=float)
        if zeta.shape != self.env.y.shape:
            raise ValueError("one exponential draw per trap is required")
        if np.any(zeta <= 0):
            raise ValueError("exponential draws must be positive")
        tau = self.env.y * zeta
        object.__setattr__(self, "zeta", zeta)
        object.__setattr__(self, "tau", tau)
        object.__setattr__(self, "cum", np.concatenate(([0.0], np.cumsum(tau))))

    def mass(self, a: float, b: float, closed_left: bool = False, closed_right: bool = True) -> float:
        """Holding-time mass of the interval between a and b with the given end conventions."""
        x = self.env.x
        i = np.searchsorted(x, a, side="left" if closed_left else "right")
        j = np.searchsorted(x, b, side="right" if closed_right else "left")
        return float(self.cum[j] - self.cum[i]) if j > i else 0.0


def sample_poisson_traps(lam: float, kappa: float, L: float, eps: float, seed: SeedLike,
                         center: float = 0.0, n_atoms: int | None = None) -> TrapEnvironment:
    """Poisson trap environment with intensity lam * y^(-kappa-1) dx dy on [c-L, c+L] x [eps, inf).

    The number of atoms is Poisson(lam * 2L * eps^-kappa / kappa), or exactly
    ``n_atoms`` (the process conditioned on its count); positions are uniform
    and depths are Pareto with P(y > t) = (t/eps)^-kappa.
    """
    if not L > 0:
        raise DegenerateWindow(f"window half-width must be positive, got {L}")
    if not (eps > 0 and 0 < kappa < 1 and lam > 0):
        raise ValueError("need eps > 0, kappa in (0,1), lam > 0")
    rng = as_generator(seed, "poisson_traps")
    n = rng.poisson(lam * 2.0 * L * eps ** (-kappa) / kappa) if n_atoms is None else int(n_atoms)
    a, b = center - L, center + L
    x = rng.uniform(a, b, size=n)
    # duplicates have probability zero but can appear in floating point
    while True:
        xs = np.sort(x)
        dup = np.flatnonzero(np.diff(xs) <= 0)
        if dup.size == 0:
            break
        xs[dup] = rng.uniform(a, b, size=dup.size)
        x = xs
    x = np.sort(x)
    y = eps * rng.random(n) ** (-1.0 / kappa)
    return TrapEnvironment(x, y, (a, b), eps)


def sigma_mass(W: TrapEnvironment, a: float, b: float) -> float:
    """Trap-measure mass of (a, b]."""
    return W.measure.mass(a, b)


def draw_holding_times(W: TrapEnvironment, seed: SeedLike) -> HoldingTimes:
    """Fresh unit-exponential draws for every trap of W."""
    if len(W) == 0:
        raise ValueError("cannot draw holding times on an empty environment")
    rng = as_generator(seed, "holding_times")
    return HoldingTimes(W, rng.standard_exponential(len(W)))


def z_forward(tau: HoldingTimes, t: float, x: float) -> float:
    """Position at time t of the rightward trap process started at x."""
    X = tau.env.x
    i0 = np.searchsorted(X, x, side="left")
    n = X.size
    if i0 >= n:
        raise WindowExit(f"no trap at or to the right of {x}")
    if t < 0:
        raise ValueError("time must be non-negative")
    base = tau.cum[i0]
    if tau.cum[n] - base <= t:
        raise WindowExit(f"forward process from {x} leaves the window before t={t}")
    j = np.searchsorted(tau.cum, base + t, side="right") - 1
    return float(X[j])


def z_backward(tau: HoldingTimes, t: float, x: float, mode: str = "star") -> float:
    """Position at time t of the leftward trap process started at x.

    ``mode='star'`` starts at the first trap <= x.  ``mode='circ'`` starts just
    after leaving x, i.e. it ignores the holding time of a trap located at x.
    """
    X = tau.env.x
    if t < 0:
        raise ValueError("time must be non-negative")
    i1 = np.searchsorted(X, x, side="right") - 1
    if mode == "circ":
        if i1 >= 0 and X[i1] == x:
            t = t + tau.tau[i1]
    elif mode != "star":
        raise ValueError(f"unknown mode {mode!r}")
    if i1 < 0:
        raise WindowExit(f"no trap at or to the left of {x}")
    top = tau.cum[i1 + 1]
    if top <= t:
        raise WindowExit(f"backward process from {x} leaves the window before t={t}")
    j = np.searchsorted(tau.cum, top - t, side="left") - 1
    return float(X[j])


def backward_index_batch(W: TrapEnvironment, zeta: np.ndarray, t: float, k: int) -> np.ndarray:
    """Trap indices of the backward process started at trap k, for many holding-time draws.

    ``zeta`` has shape (reps, len(W)) (only columns <= k are used).  Paths that
    pass the leftmost trap get index -1.
    """
    tau = zeta[:, : k + 1][:, ::-1] * W.y[: k + 1][::-1]
    # D[:, m] = holding time of traps k-m..k; the process has passed m traps when D[:, m-1] <= t
    D = np.cumsum(tau, axis=1)
    passed = np.count_nonzero(D <= t, axis=1)
    return k - passed


def forward_index_batch(W: TrapEnvironment, zeta: np.ndarray, t: float, l: int) -> np.ndarray:
    """Trap indices of the forward process started at trap l; paths past the last trap get len(W)."""
    tau = zeta[:, l:] * W.y[l:]
    D = np.cumsum(tau, axis=1)
    passed = np.count_nonzero(D <= t, axis=1)
    return l + passed


def truncate_env(W: TrapEnvironment, eps: float) -> TrapEnvironment:
    """Keep the traps with depth >= eps."""
    if eps < 0:
        raise ValueError("eps must be non-negative")
    keep = W.y >= eps
    return TrapEnvironment(W.x[keep], W.y[keep], W.window, max(W.y_floor, eps))


@dataclass
class EnvReport:
    n_atoms: int
    duplicate_positions: int
    nonpositive_depths: int
    small_trap_mass_per_length: float
    count_left_above_eps0: int
    count_right_above_eps0: int
    eps0: float

    @property
    def ok(self) -> bool:
        return self.duplicate_positions == 0 and self.nonpositive_depths == 0


def validate_env(x, y, eps0: float = 0.01, small: float = 0.01, window=None) -> EnvReport:
    """Diagnostic report on raw atom arrays (which may violate the invariants)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    order = np.argsort(x, kind="stable")
    xs = x[order]
    dups = int(np.count_nonzero(np.diff(xs) == 0)) if xs.size > 1 else 0
    if window is None:
        window = (xs[0], xs[-1]) if xs.size else (0.0, 0.0)
    length = max(window[1] - window[0], np.finfo(float).tiny)
    return EnvReport(
        n_atoms=int(x.size),
        duplicate_positions=dups,
        nonpositive_depths=int(np.count_nonzero(y <= 0)),
        small_trap_mass_per_length=float(y[(y > 0) & (y < small)].sum() / length),
        count_left_above_eps0=int(np.count_nonzero((x < 0) & (y >= eps0))),
        count_right_above_eps0=int(np.count_nonzero((x >= 0) & (y >= eps0))),
        eps0=eps0,
    )


def save_trap_csv(W: TrapEnvironment, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y"])
        for xi, yi in zip(W.x, W.y):
            w.writerow([repr(float(xi)), repr(float(yi))])


def load_trap_csv(path, window=None) -> TrapEnvironment:
    rows = list(csv.DictReader(Path(path).open()))
    x = np.array([float(r["x"]) for r in rows])
    y = np.array([float(r["y"]) for r in rows])
    if x.size > 1 and np.any(np.diff(x) <= 0):
        raise ValueError(f"{path}: positions are not strictly increasing")
    if window is None:
        window = (x[0], x[-1]) if x.size else (0.0, 0.0)
    return TrapEnvironment(x, y, window)
