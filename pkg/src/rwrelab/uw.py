"""The profile u_W(t, x) = E[u(Z*_W(t; x))] on a finite trap environment.

Two independent routes are provided: Monte Carlo over the backward trap
process, and the lower-triangular linear system

    dv_k/dt = (v_{k-1} - v_k) / y_k,   v_k(0) = u(x_k),   v_{-1} = 0,

solved level by level with the integrating factor

    v_k(t) = e^{-t/y_k} u(x_k) + int_0^t (1/y_k) e^{-(t-s)/y_k} v_{k-1}(s) ds,

where v_{k-1} is replaced by its piecewise-linear interpolant on a time grid
(the convolution of a linear piece with the exponential kernel is exact).
The grid is halved until a Richardson error estimate meets the tolerance.
"""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numba
import numpy as np

from .errors import SupportNotCovered, StiffnessWarning, WindowExit
from .rng import SeedLike, as_generator
from .trap import TrapEnvironment


# ---------------------------------------------------------------------------
# profile functions


@dataclass(frozen=True, eq=False)
class ProfileFunction:
    """Nonnegative continuous piecewise-linear function vanishing outside [xs[0], xs[-1]]."""

    xs: np.ndarray
    values: np.ndarray
    name: str = "u"

    def __post_init__(self):
        xs = np.asarray(self.xs, dtype=float)
        vals = np.asarray(self.values, dtype=float)
        if xs.shape != vals.shape or xs.size < 2:
            raise ValueError("need at least two breakpoints with matching values")
        if np.any(np.diff(xs) <= 0):
            raise ValueError("breakpoints must be strictly increasing")
        if np.any(vals < 0):
            raise ValueError("profile values must be nonnegative")
        if vals[0] != 0 or vals[-1] != 0:
            raise ValueError("profile must vanish at both ends of its support (continuity)")
        object.__setattr__(self, "xs", xs)
        object.__setattr__(self, "values", vals)

    def __call__(self, x):
        return np.interp(x, self.xs, self.values, left=0.0, right=0.0)

    @property
    def support(self) -> tuple:
        return float(self.xs[0]), float(self.xs[-1])

    @property
    def sup(self) -> float:
        return float(self.values.max())

    @property
    def total_variation(self) -> float:
        return float(np.abs(np.diff(self.values)).sum())

    @property
    def is_zero(self) -> bool:
        return not np.any(self.values > 0)

    @classmethod
    def hat(cls, a: float, b: float, height: float = 1.0, peak: Optional[float] = None, name="hat"):
        c = 0.5 * (a + b) if peak is None else peak
        return cls(np.array([a, c, b]), np.array([0.0, height, 0.0]), name)

    @classmethod
    def trapezoid(cls, a: float, b: float, c: float, d: float, height: float = 1.0, name="trapezoid"):
        return cls(np.array([a, b, c, d]), np.array([0.0, height, height, 0.0]), name)

    @classmethod
    def from_callable(cls, f: Callable, a: float, b: float, n: int = 16385, name="u"):
        """Piecewise-linear interpolant of f on n equally spaced nodes of [a, b]."""
        xs = np.linspace(a, b, n)
        vals = np.maximum(np.asarray(f(xs), dtype=float), 0.0)
        vals[0] = vals[-1] = 0.0
        return cls(xs, vals, name)

    @classmethod
    def parabola(cls, a: float = 0.0, b: float = 1.0, n: int = 16385):
        """(x - a)(b - x) on [a, b]; with odd n the vertex is a node, so the total variation is exact."""
        return cls.from_callable(lambda x: (x - a) * (b - x), a, b, n, name="parabola")

    @classmethod
    def zero(cls, a: float = 0.0, b: float = 1.0):
        return cls(np.array([a, b]), np.zeros(2), "zero")

    def to_dict(self) -> dict:
        return {"xs": self.xs.tolist(), "values": self.values.tolist(), "name": self.name}


# ---------------------------------------------------------------------------
# solutions


@dataclass(eq=False)
class UwSolution:
    """Values v[k, j] = u_W(t_grid[j], x[k]) at every trap."""

    x: np.ndarray
    y: np.ndarray
    t_grid: np.ndarray
    v: np.ndarray
    method: str
    tol: float = 0.0
    err_estimate: float = 0.0
    stderr: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    def column(self, t: float) -> np.ndarray:
        j = np.flatnonzero(np.isclose(self.t_grid, t, rtol=0, atol=1e-15))
        if j.size == 0:
            raise KeyError(f"t={t} is not on the solution grid")
        return self.v[:, j[0]]

    def value_at(self, t: float, x) -> np.ndarray:
        """u_W(t, x) for arbitrary positions: the value of the last trap <= x (0 left of all traps)."""
        col = self.column(t)
        idx = np.searchsorted(self.x, np.asarray(x, dtype=float), side="right") - 1
        return np.where(idx >= 0, col[np.maximum(idx, 0)], 0.0)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x", "y"] + [f"t={t!r}" for t in self.t_grid.tolist()])
            for k in range(self.x.size):
                w.writerow([repr(float(self.x[k])), repr(float(self.y[k]))] + [repr(float(a)) for a in self.v[k]])

    def frame_csv(self, t: float, path) -> None:
        col = self.column(t)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x", "y", "u"])
            for k in range(self.x.size):
                w.writerow([repr(float(self.x[k])), repr(float(self.y[k])), repr(float(col[k]))])


# ---------------------------------------------------------------------------
# ODE route


@numba.njit(cache=True)
def _sweep(y, v0, t, out_idx):
    """Integrating-factor sweep over all levels on the grid t; returns values at t[out_idx]."""
    K = y.size
    n = t.size
    out = np.zeros((K, out_idx.size))
    prev = np.zeros(n)
    cur = np.empty(n)
    h = np.diff(t)
    for k in range(K):
        cur[0] = v0[k]
        inv = 1.0 / y[k]
        last_h = -1.0
        e = 1.0
        phi = 1.0
        for i in range(n - 1):
            # refined grids are mostly uniform, so the exponentials are reused across equal steps
            if h[i] != last_h:
                last_h = h[i]
                z = h[i] * inv
                if z > 0.0:
                    e = np.exp(-z)
                    phi = -np.expm1(-z) / z
                else:
                    e = 1.0
                    phi = 1.0
            cur[i + 1] = e * cur[i] + prev[i + 1] * (1.0 - phi) + prev[i] * (phi - e)
        for j in range(out_idx.size):
            out[k, j] = cur[out_idx[j]]
        prev, cur = cur, prev
    return out


def _base_grid(t_grid: np.ndarray, y_min: float, n_uniform: int) -> np.ndarray:
    T = float(t_grid.max())
    if T <= 0:
        return np.array([0.0])
    h0 = T / n_uniform
    pts = [np.linspace(0.0, T, n_uniform + 1), t_grid]
    if y_min < h0:
        # graded points resolve the initial layer of the shallowest traps
        pts.append(np.geomspace(y_min * 1e-2, h0, 40))
    g = np.unique(np.concatenate(pts))
    return g[(g >= 0) & (g <= T)]


def _refine(g: np.ndarray) -> np.ndarray:
    mid = 0.5 * (g[1:] + g[:-1])
    out = np.empty(g.size + mid.size)
    out[0::2] = g
    out[1::2] = mid
    return out


def _check_stiffness(y):
    if y.size and y.min() / y.max() < 1e-9:
        warnings.warn(f"trap depths span {y.max() / y.min():.3g}; results may be slow to converge",
                      StiffnessWarning, stacklevel=3)


def _solve_triangular(y: np.ndarray, v0: np.ndarray, t_grid: np.ndarray, tol: float,
                      n_uniform: int = 64, max_refine: int = 16):
    """Sweep with grid halving until successive Richardson values agree to tol.

    With F_m the sweep on the m-times halved grid, R_m = (4 F_m - F_{m-1}) / 3
    removes the O(h^2) term; the reported error is |R_m - R_{m-1}|, which
    bounds the error of R_{m-1} and so, a fortiori, of R_m.
    """
    t_grid = np.asarray(t_grid, dtype=float)
    if y.size == 0:
        return np.zeros((0, t_grid.size)), 0.0
    g = _base_grid(t_grid, float(y.min()), n_uniform)
    F = _sweep(y, v0, g, np.searchsorted(g, t_grid))
    R = None
    est = np.inf
    for _ in range(max_refine):
        g = _refine(g)
        F_new = _sweep(y, v0, g, np.searchsorted(g, t_grid))
        R_new = (4.0 * F_new - F) / 3.0
        if R is not None:
            est = float(np.abs(R_new - R).max())
            if est <= tol:
                return R_new, est
        F, R = F_new, R_new
    warnings.warn(f"ODE error estimate {est:.3g} above tolerance {tol:.3g}", RuntimeWarning, stacklevel=3)
    return R, est


def solve_uw_ode(W: TrapEnvironment, u: ProfileFunction, t_grid, tol: float = 1e-9) -> UwSolution:
    """u_W at every trap of W and every time in t_grid from the triangular system."""
    t_grid = np.asarray(t_grid, dtype=float)
    if np.any(t_grid < 0):
        raise ValueError("times must be non-negative")
    x, y = W.x, W.y
    v = np.zeros((x.size, t_grid.size))
    if u.is_zero or x.size == 0:
        return UwSolution(x, y, t_grid, v, "ode", tol, 0.0, meta={"W": W, "u": u})
    a, _ = u.support
    if a < W.window[0]:
        raise SupportNotCovered(f"support start {a} lies left of the window {W.window}")
    _check_stiffness(y)
    # traps left of the support carry v = 0 for all times
    first = int(np.searchsorted(x, a, side="right"))
    err = 0.0
    if first < x.size:
        v[first:], err = _solve_triangular(y[first:], u(x[first:]), t_grid, tol)
    np.clip(v, 0.0, None, out=v)
    return UwSolution(x, y, t_grid, v, "ode", tol, err, meta={"W": W, "u": u})


def solve_adjoint_ode(W: TrapEnvironment, g: ProfileFunction, t_grid, tol: float = 1e-9) -> np.ndarray:
    """F_k(t) = E[g(Z_W(t; x_k))] from dF_k/dt = (F_{k+1} - F_k)/y_k, solved right to left."""
    t_grid = np.asarray(t_grid, dtype=float)
    x, y = W.x, W.y
    F = np.zeros((x.size, t_grid.size))
    if g.is_zero or x.size == 0:
        return F
    _, b = g.support
    if b > W.window[1]:
        raise SupportNotCovered(f"support end {b} lies right of the window {W.window}")
    _check_stiffness(y)
    last = int(np.searchsorted(x, b, side="left"))     # traps >= b carry F = 0
    if last > 0:
        sol, _ = _solve_triangular(y[:last][::-1].copy(), g(x[:last])[::-1].copy(), t_grid, tol)
        F[:last] = sol[::-1]
    return F


def duw_dt(solution: UwSolution, k: int, t: float) -> float:
    """Time derivative of u_W at trap k: (u_W at the previous trap - u_W at trap k) / y_k.

    At t = 0 this is (u(x_{k-1}) - u(x_k)) / y_k, the one-sided form.
    """
    col = solution.column(t)
    prev = col[k - 1] if k > 0 else 0.0
    return float((prev - col[k]) / solution.y[k])


def uw_circ(W: TrapEnvironment, u: ProfileFunction, t_grid, k: int, tol: float = 1e-9) -> np.ndarray:
    """u_W started just after leaving trap k: u on W without trap k, read at x_k."""
    Wk = W.without(k)
    if k == 0:
        return np.zeros(np.size(t_grid))
    sol = solve_uw_ode(Wk, u, t_grid, tol)
    return sol.v[k - 1]


def total_variation(values) -> float:
    """Sum of absolute successive differences of samples ordered by position."""
    v = np.asarray(values, dtype=float)
    return float(np.abs(np.diff(v)).sum()) if v.size > 1 else 0.0


def profile_total_variation(solution: UwSolution, t: float) -> float:
    """Total variation of the step function u_W(t, .) over the real line (zero far left and right)."""
    col = solution.column(t)
    return total_variation(np.concatenate(([0.0], col, [0.0])))


def jump_locations(solution: UwSolution, t: float) -> np.ndarray:
    """Positions where the step function u_W(t, .) changes value.

    The function is evaluated on the traps and on the midpoints between them,
    so the result does not assume where the jumps are.
    """
    x = solution.x
    probe = np.sort(np.concatenate((x, 0.5 * (x[1:] + x[:-1]), [x[0] - 1.0])))
    vals = solution.value_at(t, probe)
    ch = np.flatnonzero(np.diff(vals) != 0) + 1
    return probe[ch]


def dual_pairing_check(W: TrapEnvironment, u: ProfileFunction, g: ProfileFunction, t: float,
                       tol: float = 1e-10):
    """Compare sum u_W(t, x_k) g(x_k) y_k with sum u(x_k) F_k(t) y_k; returns (lhs, rhs, gap)."""
    sol = solve_uw_ode(W, u, [t], tol)
    F = solve_adjoint_ode(W, g, [t], tol)
    lhs = float(np.sum(sol.v[:, 0] * g(W.x) * W.y))
    rhs = float(np.sum(u(W.x) * F[:, 0] * W.y))
    return lhs, rhs, abs(lhs - rhs)


# ---------------------------------------------------------------------------
# Monte Carlo route


@numba.njit(cache=True)
def _backward_positions(C, t, ks, out):
    """out[r, m] = index of the backward process from trap ks[m] at time t (-1 after the left edge).

    C[r] holds prefix sums of holding times with C[r, 0] = 0.
    """
    R = C.shape[0]
    for r in range(R):
        row = C[r]
        for m in range(ks.size):
            k = ks[m]
            target = row[k + 1] - t
            # smallest j+1 with row[j+1] >= target
            lo, hi = 0, k + 1
            while lo < hi:
                mid = (lo + hi) // 2
                if row[mid] < target:
                    lo = mid + 1
                else:
                    hi = mid
            out[r, m] = lo - 1


def _mc_guard(W: TrapEnvironment, u: ProfileFunction):
    a, _ = u.support
    if not u.is_zero and a < W.window[0]:
        raise SupportNotCovered(f"support start {a} lies left of the window {W.window}")


def estimate_uw_mc_grid(W: TrapEnvironment, u: ProfileFunction, t_grid, n_reps: int, seed: SeedLike,
                        chunk: int = 20000, allow_exit: bool = True) -> UwSolution:
    """Monte Carlo u_W at every trap and time, sharing holding-time draws across traps and times.

    A path that runs past the leftmost trap never stops again in the finite
    environment, so it contributes u = 0; this is exact because u is required
    to vanish left of the window.  ``allow_exit=False`` turns such paths into
    WindowExit instead.
    """
    t_grid = np.asarray(t_grid, dtype=float)
    rng = as_generator(seed, "uw_mc")
    _mc_guard(W, u)
    N = W.x.size
    ux = u(W.x)
    ks = np.arange(N)
    s1 = np.zeros((N, t_grid.size))
    s2 = np.zeros((N, t_grid.size))
    done = 0
    while done < n_reps:
        m = min(chunk, n_reps - done)
        zeta = rng.standard_exponential((m, N))
        C = np.zeros((m, N + 1))
        np.cumsum(zeta * W.y, axis=1, out=C[:, 1:])
        for j, t in enumerate(t_grid):
            pos = np.empty((m, N), dtype=np.int64)
            _backward_positions(C, float(t), ks, pos)
            if not allow_exit and np.any(pos < 0):
                raise WindowExit("backward path passed the leftmost trap")
            val = np.where(pos >= 0, ux[np.maximum(pos, 0)], 0.0)
            s1[:, j] += val.sum(axis=0)
            s2[:, j] += (val * val).sum(axis=0)
        done += m
    mean = s1 / n_reps
    var = np.maximum(s2 / n_reps - mean**2, 0.0) * n_reps / max(n_reps - 1, 1)
    return UwSolution(W.x, W.y, t_grid, mean, "mc", 0.0, 0.0, np.sqrt(var / n_reps),
                      meta={"n_reps": n_reps})


def estimate_uw_mc(W: TrapEnvironment, u: ProfileFunction, t: float, x: float, n_reps: int,
                   seed: SeedLike) -> tuple:
    """Monte Carlo (mean, stderr) of u(Z*_W(t; x)) over independent holding times."""
    k = W.last_at_or_left(x)
    if k < 0:
        raise WindowExit(f"no trap at or left of {x}")
    if t == 0:
        return float(u(W.x[k])), 0.0
    sub = TrapEnvironment(W.x[: k + 1], W.y[: k + 1], W.window, W.y_floor)
    sol = estimate_uw_mc_grid(sub, u, [t], n_reps, seed)
    return float(sol.v[k, 0]), float(sol.stderr[k, 0])
