"""Compiled inner loops.

The walk kernels use an inline xoshiro256+ generator whose 256-bit state is
seeded from a numpy Generator, so every kernel call is reproducible from the
caller's stream.
"""
from __future__ import annotations

import math

import numba
import numpy as np
from numba import uint64

_INV53 = 1.0 / 9007199254740992.0


def xoshiro_state(rng: np.random.Generator) -> np.ndarray:
    """Fresh nonzero 4-word state drawn from ``rng``."""
    s = rng.integers(1, 2**63 - 1, size=4, dtype=np.int64).astype(np.uint64)
    return s


@numba.njit(inline="always")
def _rotl(x, k):
    return (x << uint64(k)) | (x >> uint64(64 - k))


@numba.njit(inline="always")
def _uniform(s):
    r = s[0] + s[3]
    t = s[1] << uint64(17)
    s[2] ^= s[0]
    s[3] ^= s[1]
    s[1] ^= s[2]
    s[0] ^= s[3]
    s[2] ^= t
    s[3] = _rotl(s[3], 45)
    return float(r >> uint64(11)) * _INV53


@numba.njit(cache=True)
def uniforms(n, s):
    out = np.empty(n)
    for i in range(n):
        out[i] = _uniform(s)
    return out


@numba.njit(cache=True)
def forward_products(rho):
    """out[j] = rho[j] * (1 + out[j-1]) with out[-1] = 0."""
    out = np.empty(rho.size)
    acc = 0.0
    for j in range(rho.size):
        acc = rho[j] * (1.0 + acc)
        out[j] = acc
    return out


@numba.njit(cache=True)
def walk_visits(omega, start, target, stop, n_walks, s):
    """Visits to ``target`` by walks from ``start`` killed on reaching ``stop`` (> start).

    Indices are array positions.  Walks reaching index 0 are abandoned and
    counted in the second return value.
    """
    out = np.zeros(n_walks)
    edge = 0
    for w in range(n_walks):
        x = start
        c = 0
        while x < stop:
            if x == target:
                c += 1
            if x == 0:
                edge += 1
                break
            if _uniform(s) < omega[x]:
                x += 1
            else:
                x -= 1
        out[w] = c
    return out, edge


@numba.njit(cache=True)
def walk_hitting_times(omega, start, stop, n_walks, s):
    """Steps needed by walks from ``start`` to first reach ``stop`` (> start)."""
    out = np.zeros(n_walks)
    edge = 0
    for w in range(n_walks):
        x = start
        n = 0
        while x < stop:
            if x == 0:
                edge += 1
                break
            if _uniform(s) < omega[x]:
                x += 1
            else:
                x -= 1
            n += 1
        out[w] = n
    return out, edge


@numba.njit(cache=True)
def walk_positions(omega, starts, n_steps, s):
    """Positions (array indices) after ``n_steps`` steps; -1 marks a walk that reached an edge."""
    out = np.empty(starts.size, dtype=np.int64)
    last = omega.size - 1
    for w in range(starts.size):
        x = starts[w]
        for _ in range(n_steps):
            if x <= 0 or x >= last:
                x = -1
                break
            if _uniform(s) < omega[x]:
                x += 1
            else:
                x -= 1
        out[w] = x
    return out


@numba.njit(cache=True)
def walk_hit_level(omega, start, stop, max_steps, n_walks, s):
    """Hitting time of ``stop`` capped at ``max_steps`` (returns -1 when capped)."""
    out = np.empty(n_walks)
    for w in range(n_walks):
        x = start
        n = 0
        while x < stop and n < max_steps:
            if x <= 0:
                break
            if _uniform(s) < omega[x]:
                x += 1
            else:
                x -= 1
            n += 1
        out[w] = n if x >= stop else -1.0
    return out


@numba.njit(cache=True)
def block_scan(log_rho, state, lengths, beta, logM):
    """Cut a stream of log rho values into first-descent blocks.

    ``state`` = [W_prev, V(j) - V(block start), open length, open beta sum,
    open log max] carries the open block across calls.  Completed blocks are
    written to the output arrays; returns (blocks written, stream entries used).
    """
    W = state[0]
    vrel = state[1]
    blen = state[2]
    bsum = state[3]
    lmax = state[4]
    nb = 0
    cap = lengths.size
    used = 0
    for j in range(log_rho.size):
        if nb >= cap:
            break
        lr = log_rho[j]
        W = math.exp(lr) * (1.0 + W)
        vrel += lr
        blen += 1.0
        bsum += 1.0 + 2.0 * W
        if vrel > lmax:
            lmax = vrel
        used = j + 1
        if vrel < 0.0:
            lengths[nb] = blen
            beta[nb] = bsum
            logM[nb] = lmax
            nb += 1
            vrel = 0.0
            blen = 0.0
            bsum = 0.0
            lmax = -np.inf
    state[0] = W
    state[1] = vrel
    state[2] = blen
    state[3] = bsum
    state[4] = lmax
    return nb, used


@numba.njit(cache=True)
def block_scan_draw(cdf, log_rho_values, rho_values, state, s, lengths, beta, logM, cap):
    """Like block_scan, but draws log rho i.i.d. from the discrete law (cdf, values) itself.

    Fills all output arrays; returns False if an open block exceeded ``cap``.
    """
    W = state[0]
    vrel = state[1]
    blen = state[2]
    bsum = state[3]
    lmax = state[4]
    m = cdf.size
    nb = 0
    ok = True
    while nb < lengths.size:
        u = _uniform(s)
        i = 0
        while i < m - 1 and u >= cdf[i]:
            i += 1
        lr = log_rho_values[i]
        W = rho_values[i] * (1.0 + W)
        vrel += lr
        blen += 1.0
        bsum += 1.0 + 2.0 * W
        if vrel > lmax:
            lmax = vrel
        if vrel < 0.0:
            lengths[nb] = blen
            beta[nb] = bsum
            logM[nb] = lmax
            nb += 1
            vrel = 0.0
            blen = 0.0
            bsum = 0.0
            lmax = -np.inf
        elif blen > cap:
            ok = False
            break
    state[0] = W
    state[1] = vrel
    state[2] = blen
    state[3] = bsum
    state[4] = lmax
    return ok
