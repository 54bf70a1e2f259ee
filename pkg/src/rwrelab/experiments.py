"""Experiment runners behind the command line.

Every runner takes a resolved parameter dict, a master seed and a worker
count and returns an ExperimentResult whose ``checks`` carry the measured
statistic, the threshold and the pass/fail verdict.
"""
from __future__ import annotations

import math
from typing import Callable

import numpy as np

from .env import EnvDistribution, sample_block_stats, solve_kappa
from .particles import TestFunction, trap_counts_at
from .rng import stream
from .stats import (ExperimentResult, beta_sum_samples, exponential_tail_fit, fit_lambda, hill_tail_index,
                    hydro_experiment_rwre, hydro_experiment_traps, inverse_stable_samples, ks_critical,
                    ks_distance, ladder_trap_positions, laplace_transform_check, poisson_trap_mass_samples,
                    speed_check, variance_slope)
from .trap import TrapEnvironment, sample_poisson_traps
from .uw import (ProfileFunction, duw_dt, estimate_uw_mc, jump_locations, profile_total_variation,
                 solve_uw_ode)


# ---------------------------------------------------------------------------
# parameter helpers


def make_profile(cfg) -> ProfileFunction:
    """Build u from a config value: 'parabola', {'parabola': [a, b]}, {'hat': [a, b]},
    {'trapezoid': [a, b, c, d]}, {'constant': [a, b, level]} or {'xs': [...], 'values': [...]}."""
    if cfg == "parabola":
        return ProfileFunction.parabola(0.0, 1.0)
    if cfg == "zero":
        return ProfileFunction.zero()
    if isinstance(cfg, dict):
        if "xs" in cfg:
            return ProfileFunction(np.asarray(cfg["xs"], float), np.asarray(cfg["values"], float),
                                   cfg.get("name", "u"))
        (kind, args), = cfg.items()
        if kind == "parabola":
            return ProfileFunction.parabola(*args)
        if kind == "hat":
            return ProfileFunction.hat(*args)
        if kind == "trapezoid":
            return ProfileFunction.trapezoid(*args)
        if kind == "constant":
            a, b, level = args
            w = 1e-9 * (b - a)
            return ProfileFunction.trapezoid(a, a + w, b - w, b, level, name="constant")
    raise ValueError(f"unknown profile {cfg!r}")


def make_test_function(cfg) -> TestFunction:
    """phi(t, x) = psi(t) chi(x) with psi linear from 1 at t=0 to 0 at t=T and chi a trapezoid."""
    T = float(cfg["T"])
    chi = ProfileFunction.trapezoid(*cfg["chi"], name="chi")
    name = f"lin{T!r}x" + "_".join(repr(float(c)) for c in cfg["chi"])
    return TestFunction.separable((np.array([0.0, T]), np.array([1.0, 0.0])), chi, name=name)


def make_dist(cfg) -> EnvDistribution:
    if "two_point_kappa" in cfg:
        return EnvDistribution.two_point(float(cfg["two_point_kappa"]), float(cfg.get("r", 2.0)))
    if "constant_omega" in cfg:
        return EnvDistribution.constant(float(cfg["constant_omega"]))
    if "support" in cfg:
        return EnvDistribution([tuple(p) for p in cfg["support"]])
    raise ValueError(f"unknown distribution {cfg!r}")


def poisson_env(p: dict, seed: int, name: str) -> TrapEnvironment:
    a, b = p["window"]
    return sample_poisson_traps(p["lam"], p["kappa"], 0.5 * (b - a), p["eps"], stream(seed, name, "env"),
                                center=0.5 * (a + b), n_atoms=p.get("n_atoms"))


# ---------------------------------------------------------------------------
# runners


def run_figure1(p: dict, seed: int, workers: int) -> ExperimentResult:
    W = poisson_env(p, seed, "figure1")
    u = make_profile(p["u"])
    times = [float(t) for t in p["times"]]
    sol = solve_uw_ode(W, u, times, tol=p["tol"])
    res = ExperimentResult("figure1", p, {"master": seed})
    res.tables["traps"] = (["x", "y"], [[float(a), float(b)] for a, b in zip(W.x, W.y)])
    bv_u = u.total_variation
    atoms = set(W.x.tolist())
    lo, hi = u.support
    interior = W.x[(W.x > lo) & (W.x < hi)]
    jumps_ok, bv_ok, prop_ok = True, True, True
    worst_bv, worst_prop = 0.0, 0.0
    for j, t in enumerate(times):
        col = sol.column(t)
        res.tables[f"frame_t{t:.2f}"] = (["x", "y", "u"], [[float(a), float(b), float(c)]
                                                         for a, b, c in zip(W.x, W.y, col)])
        J = jump_locations(sol, t)
        # every jump sits on an atom, and every atom inside supp u is a jump
        jumps_ok &= set(J.tolist()) <= atoms and set(interior.tolist()) <= set(J.tolist())
        bv = profile_total_variation(sol, t)
        worst_bv = max(worst_bv, bv)
        bv_ok &= bv <= bv_u + 1e-12
        if t > 0:
            # jump at x_k equals -y_k times the time derivative there
            prev = np.concatenate(([0.0], col[:-1]))
            d = np.array([duw_dt(sol, k, t) for k in range(len(W))])
            gap = np.abs((col - prev) + W.y * d)
            worst_prop = max(worst_prop, float(gap.max()))
        res.cells.append({"t": t, "n_jumps": int(J.size), "total_variation": bv, "mass": float(col @ W.y)})
    prop_ok = worst_prop < 1e-6
    res.add_check("3: jump set = atom set", bool(jumps_ok), "exact", jumps_ok)
    res.add_check("3: BV(u_W(t,.)) <= BV(u)", worst_bv, f"<= {bv_u!r}", bv_ok)
    res.add_check("3: jump size = -y_k d/dt u_W", worst_prop, "< 1e-6", prop_ok)
    return res


def run_uw_crosscheck(p: dict, seed: int, workers: int) -> ExperimentResult:
    W = poisson_env(p, seed, "uw_crosscheck")
    u = make_profile(p["u"])
    times = [float(t) for t in p["times"]]
    sol = solve_uw_ode(W, u, times, tol=1e-10)
    res = ExperimentResult("uw_crosscheck", p, {"master": seed})
    worst = 0.0
    ok = True
    rows = []
    resolution = u.sup / p["n_reps"]
    for k in range(len(W)):
        for j, t in enumerate(times):
            m, se = estimate_uw_mc(W, u, t, W.x[k], p["n_reps"], stream(seed, "uw_crosscheck", k, j))
            ode = float(sol.v[k, j])
            # a rare event seen in no replica gives a zero sample stderr; one replica can move
            # the mean by at most sup(u)/n_reps, which is used as the resolution floor
            se = max(se, resolution)
            z = abs(m - ode) / se
            ok &= z <= p["z_max"]
            worst = max(worst, z)
            rows.append([k, float(W.x[k]), t, ode, m, se, z])
    res.tables["comparison"] = (["atom", "x", "t", "ode", "mc", "stderr", "z"], rows)
    res.cells.append({"n_atoms": len(W), "max_z": worst})
    res.add_check("2: |MC - ODE| / stderr", worst, f"<= {p['z_max']}", ok)
    return res


def run_duality(p: dict, seed: int, workers: int) -> ExperimentResult:
    res = ExperimentResult("duality", p, {"master": seed})
    # holding-time duality on a small environment
    q = p["pairs"]
    W = poisson_env(q, seed, "duality")
    rng = stream(seed, "duality", "zeta")
    N = q["n_draws"]
    t = float(q["t"])
    K = len(W)
    zeta = rng.standard_exponential((N, K))
    C = np.zeros((N, K + 1))
    np.cumsum(zeta * W.y, axis=1, out=C[:, 1:])
    worst = 0.0
    rows = []
    for l in range(K):
        # forward from l: index = l + #{m : C[l+m+1] - C[l] <= t}
        fwd = l + np.count_nonzero(C[:, l + 1:] - C[:, [l]] <= t, axis=1)
        for k in range(l, K):
            # backward from k: passes trap j when C[k+1] - C[j] <= t
            bwd = k - np.count_nonzero(C[:, [k + 1]] - C[:, k::-1] <= t, axis=1)
            d = W.y[l] * (fwd == k) - W.y[k] * (bwd == l)
            se = d.std(ddof=1) / math.sqrt(N)
            z = abs(d.mean()) / se if se > 0 else (0.0 if d.mean() == 0 else math.inf)
            worst = max(worst, z)
            rows.append([l, k, float(W.y[l] * np.mean(fwd == k)), float(W.y[k] * np.mean(bwd == l)), se, z])
    res.tables["pairs"] = (["l", "k", "y_l P_forward", "y_k P_backward", "joint_stderr", "z"], rows)
    res.add_check("4: holding-time duality", worst, f"< {q['z_max']}", worst < q["z_max"])

    # particle duality: mean counts at time t against u_W(t, x_k) y_k
    r = p["particles"]
    W2 = poisson_env(r, seed, "duality_particles")
    u = make_profile(r["u"])
    t2 = float(r["t"])
    sol = solve_uw_ode(W2, u, [t2], tol=1e-10)
    target = r["a_n"] * sol.v[:, 0] * W2.y
    counts, frac = trap_counts_at(W2, r["a_n"] * u(W2.x) * W2.y, t2, r["replicas"],
                                  stream(seed, "duality", "particles"), r["max_exit_fraction"])
    m = counts.mean(axis=0)
    # resolution floor: one particle in one replica moves the mean by 1/replicas
    se = np.maximum(counts.std(axis=0, ddof=1) / math.sqrt(r["replicas"]), 1.0 / r["replicas"])
    z = np.abs(m - target) / se
    big = m >= r["dispersion_min_mean"]
    disp = counts[:, big].var(axis=0, ddof=1) / m[big]
    res.tables["particle_means"] = (["atom", "x", "y", "target", "mean", "stderr", "z", "dispersion"],
                                    [[k, float(W2.x[k]), float(W2.y[k]), float(target[k]), float(m[k]),
                                      float(se[k]), float(z[k]),
                                      float(counts[:, k].var(ddof=1) / m[k]) if m[k] > 0 else ""]
                                     for k in range(len(W2))])
    res.cells.append({"pairs_atoms": K, "particle_atoms": len(W2), "exit_fraction": frac,
                      "dispersion_atoms": int(big.sum())})
    res.add_check("5: particle mean counts", float(z.max()), f"<= {r['z_max']}", bool(z.max() <= r["z_max"]))
    lo, hi = r["dispersion_band"]
    dmin = float(disp.min()) if disp.size else float("nan")
    dmax = float(disp.max()) if disp.size else float("nan")
    res.add_check("5: index of dispersion", [dmin, dmax], f"in [{lo}, {hi}]",
                  bool(disp.size and dmin >= lo and dmax <= hi))
    return res


def interior_atoms(W: TrapEnvironment, t: float, bound: float) -> np.ndarray:
    """Atoms whose backward process leaves the window by time t with probability below ``bound``.

    Uses the Chernoff bound P(sum_{j<=k} y_j zeta_j <= t) <= min_s e^{st} prod_j 1/(1 + s y_j).
    """
    s_grid = np.geomspace(1e-3, 1e6, 400) / max(t, 1e-300)
    logp = np.cumsum(-np.log1p(np.outer(s_grid, W.y)), axis=1) + (s_grid * t)[:, None]
    return np.minimum(logp.min(axis=0), 0.0) < math.log(bound)


def run_stationarity(p: dict, seed: int, workers: int) -> ExperimentResult:
    W = poisson_env(p, seed, "stationarity")
    t = float(p["t"])
    alpha = float(p["alpha"])
    means = alpha * W.y
    # particles leaving through the right edge never affect the counts on the left of it
    counts, frac = trap_counts_at(W, means, t, p["replicas"], stream(seed, "stationarity", "particles"),
                                  max_exit_fraction=1.0)
    inner = interior_atoms(W, t, p["interior_bound"])
    m = counts.mean(axis=0)
    se = np.maximum(counts.std(axis=0, ddof=1) / math.sqrt(p["replicas"]), 1.0 / p["replicas"])
    z = np.abs(m - means) / se
    res = ExperimentResult("stationarity", p, {"master": seed})
    res.tables["means"] = (["atom", "x", "y", "interior", "target", "mean", "stderr", "z"],
                           [[k, float(W.x[k]), float(W.y[k]), bool(inner[k]), float(means[k]), float(m[k]),
                             float(se[k]), float(z[k])] for k in range(len(W))])
    zi = float(z[inner].max()) if inner.any() else float("nan")
    res.cells.append({"n_atoms": len(W), "interior_atoms": int(inner.sum()), "right_exit_fraction": frac})
    res.add_check("6: stationary means on the interior", zi, f"<= {p['z_max']}",
                  bool(inner.any() and zi <= p["z_max"]))
    return res


def run_tails(p: dict, seed: int, workers: int) -> ExperimentResult:
    res = ExperimentResult("tails", p, {"master": seed})
    for kappa in p["kappas"]:
        dist = EnvDistribution.two_point(float(kappa))
        kap = solve_kappa(dist).kappa
        bs = sample_block_stats(dist, p["n_blocks"], stream(seed, "tails", repr(float(kappa))))
        h = hill_tail_index(bs.beta, p["top_k"])
        hm = hill_tail_index(bs.M, p["top_k"])
        f = exponential_tail_fit(bs.length, p["tail_start"], p["min_count"])
        res.cells.append({"kappa": kap, "hill_beta": h.index, "hill_beta_stderr": h.stderr, "hill_M": hm.index,
                          "nu_rate": f.rate, "nu_r2": f.r2, "nu_points": f.n_points,
                          "mean_block_length": float(bs.length.mean())})
        res.tables[f"hill_profile_kappa{float(kappa):.2f}"] = (
            ["k", "index", "stderr"], [[int(a), float(b), float(c)] for a, b, c in
                                       zip(h.k_grid, h.index_grid, h.stderr_grid)])
        w = p["hill_halfwidth"]
        res.add_check(f"8: Hill index of beta, kappa={kap:.3f}", h.index, f"in [{kap - w:.3f}, {kap + w:.3f}]",
                      abs(h.index - kap) <= w)
        res.add_check(f"8: block length log-survival R^2, kappa={kap:.3f}", f.r2, f"> {p['r2_min']}",
                      f.r2 > p["r2_min"])
    return res


def run_stable_limits(p: dict, seed: int, workers: int) -> ExperimentResult:
    res = ExperimentResult("stable_limits", p, {"master": seed})
    q = p["poisson"]
    S = poisson_trap_mass_samples(q["lam"], q["kappa"], q["eps"], q["samples"], stream(seed, "stable", "poisson"))
    rep = laplace_transform_check(S, q["thetas"], lam=q["lam"], kappa=q["kappa"], eps=q["eps"])
    res.tables["poisson_laplace"] = (["theta", "empirical", "target", "stderr", "z"],
                                     [list(map(float, r)) for r in zip(rep.thetas, rep.empirical, rep.target,
                                                                       rep.stderr, rep.z)])
    res.add_check("9: Poisson trap mass Laplace transform", rep.max_z, f"<= {q['z_max']}", rep.max_z <= q["z_max"])
    b = p["beta_sums"]
    dist = EnvDistribution.two_point(float(b["kappa"]))
    kap = solve_kappa(dist).kappa
    B = beta_sum_samples(dist, b["n"], b["samples"], stream(seed, "stable", "beta_sums"), kappa=kap)
    thetas = [float(x) for x in b["thetas"]]
    rep2 = laplace_transform_check(B, thetas, kappa=kap, fit_theta=float(b["fit_theta"]))
    check = [i for i, th in enumerate(thetas) if th != float(b["fit_theta"])]
    mz = float(rep2.z[check].max())
    res.tables["beta_sum_laplace"] = (["theta", "empirical", "fitted_stable", "stderr", "z"],
                                      [list(map(float, r)) for r in zip(rep2.thetas, rep2.empirical, rep2.target,
                                                                        rep2.stderr, rep2.z)])
    res.cells.append({"poisson_max_z": rep.max_z, "beta_sum_max_z": mz, "fitted_scale": rep2.fitted_scale,
                      "kappa": kap})
    res.add_check("9: fitted stable transform of beta sums", mz, f"<= {b['z_max']}", mz <= b["z_max"])
    return res


def run_hydro_traps(p: dict, seed: int, workers: int) -> ExperimentResult:
    W = poisson_env(p, seed, "hydro_traps")
    u = make_profile(p["u"])
    phi = make_test_function(p["phi"])
    res = hydro_experiment_traps(W, u, phi, p["a_schedule"], p["eps_schedule"], p["replicas"], seed,
                                 p["delta_frac"], p["max_exit_fraction"], workers)
    ex = [c["exceedance"] for c in res.cells]
    mono = all(b <= a for a, b in zip(ex, ex[1:]))
    res.add_check("10: exceedance non-increasing in a_n", ex, "non-increasing", mono)
    if len(res.cells) > 1 and all(c["variance"] > 0 for c in res.cells):
        slope = variance_slope(res)
        lo, hi = p["variance_slope_band"]
        res.cells.append({"variance_slope": slope})
        res.add_check("variance ~ 1/a_n (log-log slope)", slope, f"in [{lo}, {hi}]", lo <= slope <= hi)
    return res


def run_hydro_rwre(p: dict, seed: int, workers: int) -> ExperimentResult:
    dist = make_dist(p["dist"])
    u = make_profile(p["u"])
    phi = make_test_function(p["phi"])
    res = hydro_experiment_rwre(dist, u, phi, p["n_schedule"], p["env_replicas"], seed, p["particle_replicas"],
                                p["mode"], p["reference_samples"], p["reference_eps"], None, p.get("buffer"),
                                p["reach"], p["max_exit_fraction"], p["max_extend"], workers)
    ks = [c["ks"] for c in res.cells]
    mono = all(b <= a for a, b in zip(ks, ks[1:]))
    res.add_check("10: KS distance non-increasing in n", ks, "non-increasing", mono)
    return res


def run_speed(p: dict, seed: int, workers: int) -> ExperimentResult:
    res = ExperimentResult("speed", p, {"master": seed})
    b = p["ballistic"]
    d = make_dist(b["dist"])
    rep = speed_check(d, [b["n"]], b["replicas"], seed)
    z = abs(rep.mean_speed[0] - rep.target) / rep.stderr[0] if rep.stderr[0] > 0 else (
        0.0 if rep.mean_speed[0] == rep.target else math.inf)
    res.cells.append({"case": "ballistic", "n": b["n"], "target": rep.target, "mean": rep.mean_speed[0],
                      "stderr": rep.stderr[0], "z": z})
    res.add_check("speed: ballistic X_n/n", z, f"<= {b['z_max']}", z <= b["z_max"])
    s = p["subballistic"]
    d2 = make_dist(s["dist"])
    rep2 = speed_check(d2, s["n_values"], s["replicas"], seed + 1)
    for n, m, se, med in zip(rep2.n_values, rep2.mean_speed, rep2.stderr, rep2.scaled_median):
        res.cells.append({"case": "subballistic", "n": n, "target": 0.0, "mean": m, "stderr": se,
                          "median_abs_X_over_n_kappa": med})
    dec = all(b2 < a2 for a2, b2 in zip(rep2.mean_speed, rep2.mean_speed[1:]))
    res.add_check("speed: |X_n|/n decreasing (zero speed)", rep2.mean_speed, "decreasing", dec)
    meds = rep2.scaled_median
    ratio = max(meds) / min(meds) if min(meds) > 0 else math.inf
    res.add_check("speed: |X_n|/n^kappa stable across n", ratio, f"max/min <= {s['scaled_ratio_max']}",
                  ratio <= s["scaled_ratio_max"])
    q = p["inverse_stable"]
    d3 = make_dist(q["dist"])
    kap = solve_kappa(d3).kappa
    fit = fit_lambda(d3, q["lambda_blocks"], q["lambda_top_k"], stream(seed, "speed", "lambda"), kap)
    Z = ladder_trap_positions(d3, q["n"], q["samples"], seed, kap)
    R = inverse_stable_samples(fit.lam, kap, q["reference_samples"], stream(seed, "speed", "reference"))
    ks = ks_distance(Z, R)
    crit = ks_critical(0.05, q["samples"], q["reference_samples"])
    res.cells.append({"case": "inverse_stable", "n": q["n"], "ks": ks, "critical_5pct": crit, "lam": fit.lam,
                      "lam_stderr": fit.stderr, "median_Z": float(np.median(Z)), "median_ref": float(np.median(R))})
    res.add_check("speed: inverse-stable marginal KS", ks, f"< {crit!r}", ks < crit)
    return res


# ---------------------------------------------------------------------------
# defaults (every key here is the complete set of allowed keys)


DEFAULTS: dict = {
    "figure1": {"kappa": 0.7, "lam": 1.0, "eps": 0.001, "window": [-0.25, 2.0], "n_atoms": None,
                "u": "parabola", "times": [0.0, 0.25, 0.5, 0.75, 1.0], "tol": 1e-10},
    "uw_crosscheck": {"kappa": 0.7, "lam": 1.0, "eps": 0.01, "window": [0.0, 2.0], "n_atoms": 50,
                      "u": "parabola", "times": [0.25, 0.5, 1.0], "n_reps": 100_000, "z_max": 3.0},
    "duality": {
        "pairs": {"kappa": 0.7, "lam": 1.0, "eps": 0.05, "window": [0.0, 1.0], "n_atoms": 5, "t": 0.5,
                  "n_draws": 100_000, "z_max": 4.0},
        "particles": {"kappa": 0.7, "lam": 1.0, "eps": 0.01, "window": [-0.2, 4.0], "n_atoms": None,
                      "u": "parabola", "t": 0.5, "a_n": 50.0, "replicas": 10_000, "z_max": 4.0,
                      "dispersion_min_mean": 0.5, "dispersion_band": [0.9, 1.1],
                      "max_exit_fraction": 1e-3},
    },
    "stationarity": {"kappa": 0.7, "lam": 1.0, "eps": 0.01, "window": [0.0, 2.0], "n_atoms": None,
                     "alpha": 5.0, "t": 1.0, "replicas": 10_000, "interior_bound": 1e-6, "z_max": 4.0},
    "tails": {"kappas": [0.5, 0.7], "n_blocks": 100_000, "top_k": 1000, "hill_halfwidth": 0.1,
              "tail_start": 0.05, "min_count": 100, "r2_min": 0.98},
    "stable_limits": {
        "poisson": {"lam": 1.0, "kappa": 0.5, "eps": 0.001, "samples": 100_000,
                    "thetas": [0.1, 0.5, 1.0, 2.0, 5.0], "z_max": 4.0},
        "beta_sums": {"kappa": 0.5, "n": 10_000, "samples": 10_000, "thetas": [0.25, 0.5, 1.0, 2.0, 4.0, 8.0],
                      "fit_theta": 1.0, "z_max": 4.0},
    },
    "hydro_traps": {"kappa": 0.7, "lam": 1.0, "eps": 0.05, "window": [-0.5, 3.5], "n_atoms": 50,
                    "u": "parabola", "phi": {"T": 0.5, "chi": [-0.25, 0.0, 1.5, 2.0]},
                    "a_schedule": [100.0, 1000.0, 10000.0], "eps_schedule": [0.2, 0.1, 0.05], "replicas": 100,
                    "delta_frac": 0.05, "max_exit_fraction": 1e-3, "variance_slope_band": [-1.3, -0.7]},
    "hydro_rwre": {"dist": {"two_point_kappa": 0.5}, "u": "parabola",
                   "phi": {"T": 0.1, "chi": [-0.25, 0.0, 1.5, 2.0]}, "n_schedule": [50, 200, 800],
                   "env_replicas": 200, "particle_replicas": 1, "mode": "mean", "reference_samples": 1000,
                   "reference_eps": 1e-5, "buffer": None, "reach": 1.5, "max_exit_fraction": 1e-3,
                   "max_extend": 4},
    "speed": {
        "ballistic": {"dist": {"constant_omega": 0.75}, "n": 10_000, "replicas": 200, "z_max": 3.0},
        "subballistic": {"dist": {"two_point_kappa": 0.5}, "n_values": [1000, 10_000, 100_000], "replicas": 100,
                         "scaled_ratio_max": 10.0},
        "inverse_stable": {"dist": {"two_point_kappa": 0.5}, "n": 10_000, "samples": 500,
                           "reference_samples": 20_000, "lambda_blocks": 200_000, "lambda_top_k": 2000},
    },
}

RUNNERS: dict[str, Callable] = {
    "figure1": run_figure1,
    "uw_crosscheck": run_uw_crosscheck,
    "duality": run_duality,
    "stationarity": run_stationarity,
    "tails": run_tails,
    "stable_limits": run_stable_limits,
    "hydro_traps": run_hydro_traps,
    "hydro_rwre": run_hydro_rwre,
    "speed": run_speed,
}
