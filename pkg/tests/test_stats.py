import json
import math

import numpy as np
import pytest
from scipy import stats as sps
from scipy.integrate import quad

from rwrelab.env import EnvDistribution, sample_block_stats
from rwrelab.errors import InsufficientSamples
from rwrelab.experiments import make_test_function
from rwrelab.stats import (ExperimentResult, LambdaFit, beta_sum_samples, exponential_tail_fit, fit_lambda,
                           hill_tail_index, hydro_experiment_rwre, hydro_experiment_traps, inverse_stable_samples,
                           ks_critical, ks_distance, laplace_transform_check, limit_integral,
                           poisson_trap_mass_samples, sample_positive_stable, speed_check,
                           truncated_levy_exponent, variance_slope)
from rwrelab.trap import TrapEnvironment, sample_poisson_traps
from rwrelab.uw import ProfileFunction

import oracles

KAPPA_HALF = EnvDistribution.two_point(0.5)


def kanter_stable(kappa, size, rng):
    """Positive stable samples with Laplace transform exp(-theta^kappa), by Kanter's representation."""
    U = rng.random(size)
    E = rng.standard_exponential(size)
    A = (np.sin(kappa * np.pi * U) ** (kappa / (1 - kappa)) * np.sin((1 - kappa) * np.pi * U)
         / np.sin(np.pi * U) ** (1 / (1 - kappa)))
    return (A / E) ** ((1 - kappa) / kappa)


# ---------------------------------------------------------------------------
# tails


@pytest.mark.parametrize("kappa", [0.3, 0.5, 0.7])
def test_hill_on_exact_pareto(kappa):
    x = oracles.pareto_samples(kappa, 100_000, np.random.default_rng(int(kappa * 10)))
    rep = hill_tail_index(x, 2000)
    assert abs(rep.index - kappa) < 3 * rep.stderr
    assert rep.stderr == pytest.approx(rep.index / math.sqrt(2000))
    lo, hi = rep.band()
    assert np.all(lo[np.isfinite(lo)] < hi[np.isfinite(hi)])


def test_hill_refuses_degenerate_input():
    with pytest.raises(InsufficientSamples):
        hill_tail_index(np.ones(1000), 100)
    with pytest.raises(InsufficientSamples):
        hill_tail_index(np.arange(1.0, 101.0), 100)
    with pytest.raises(InsufficientSamples):
        hill_tail_index(np.arange(1.0, 1001.0), 10)


def test_hill_on_block_occupation_sums():
    bs = sample_block_stats(KAPPA_HALF, 200_000, 1)
    rep = hill_tail_index(bs.beta, 2000)
    assert 0.4 <= rep.index <= 0.6


def test_exponential_tail_fit_on_geometric():
    p = 0.2
    x = np.random.default_rng(3).geometric(p, 500_000)
    fit = exponential_tail_fit(x)
    assert fit.rate == pytest.approx(-math.log(1 - p), rel=0.03)
    assert fit.r2 > 0.99


# ---------------------------------------------------------------------------
# stable laws and the truncated Levy exponent


@pytest.mark.parametrize("kappa", [0.3, 0.5, 0.8])
def test_stable_sampler_against_kanter(kappa):
    rng = np.random.default_rng(10)
    a = sample_positive_stable(kappa, 50_000, rng)
    b = kanter_stable(kappa, 50_000, np.random.default_rng(11))
    assert np.all(a > 0)
    assert sps.ks_2samp(a, b).pvalue > 1e-3
    th = np.array([0.3, 1.0, 3.0])
    emp = np.exp(-np.outer(th, a)).mean(axis=1)
    assert np.allclose(emp, np.exp(-th**kappa), atol=0.01)


def test_stable_sampler_scale():
    a = sample_positive_stable(0.5, 100_000, np.random.default_rng(1), scale=2.0)
    assert np.exp(-a).mean() == pytest.approx(math.exp(-2.0), abs=0.005)
    with pytest.raises(ValueError):
        sample_positive_stable(1.0, 5, np.random.default_rng(0))


@pytest.mark.parametrize("theta,kappa,eps", [(0.5, 0.5, 0.01), (2.0, 0.3, 1e-3), (10.0, 0.8, 0.1)])
def test_truncated_levy_exponent_against_quadrature(theta, kappa, eps):
    f = lambda y: -math.expm1(-theta * y) * y ** (-kappa - 1)
    ref = quad(f, eps, 1.0, limit=200)[0] + quad(f, 1.0, np.inf, limit=200)[0]
    assert truncated_levy_exponent(theta, 1.3, kappa, eps) == pytest.approx(1.3 * ref, rel=1e-8)


def test_truncated_levy_exponent_limits():
    assert truncated_levy_exponent(0.0, 1.0, 0.5, 0.01) == 0.0
    # untruncated lam Gamma(1-kappa)/kappa theta^kappa is 2 sqrt(pi) at lam=theta=1, kappa=1/2
    v = truncated_levy_exponent(1.0, 1.0, 0.5, 1e-12)
    assert math.exp(-v) == pytest.approx(math.exp(-2 * math.sqrt(math.pi)), rel=1e-5)


def test_poisson_trap_mass_laplace_transform():
    S = poisson_trap_mass_samples(1.0, 0.5, 1e-3, 20_000, 4)
    rep = laplace_transform_check(S, [0.1, 0.5, 1.0, 2.0], lam=1.0, kappa=0.5, eps=1e-3)
    assert rep.max_z < 4.5


def test_beta_sums_fitted_stable_transform():
    S = beta_sum_samples(KAPPA_HALF, 200, 2000, 5)
    rep = laplace_transform_check(S, [0.25, 0.5, 2.0, 4.0], kappa=0.5, fit_theta=1.0)
    assert rep.fitted_scale > 0
    assert rep.max_z < 4.5


def test_inverse_stable_first_passage():
    lam, kappa = 0.7, 0.5
    T = inverse_stable_samples(lam, kappa, 50_000, 6)
    c = lam * math.gamma(1 + kappa) * math.gamma(1 - kappa) / kappa
    S1 = T ** (-1 / kappa)
    th = np.array([0.5, 2.0])
    assert np.allclose(np.exp(-np.outer(th, S1)).mean(axis=1), np.exp(-c * th**kappa), atol=0.01)


# ---------------------------------------------------------------------------
# KS


def test_ks_matches_scipy():
    rng = np.random.default_rng(7)
    a, b = rng.normal(size=300), rng.normal(0.2, 1.0, size=500)
    assert ks_distance(a, b) == pytest.approx(sps.ks_2samp(a, b).statistic, abs=1e-12)
    assert ks_distance(a, sps.norm.cdf) == pytest.approx(sps.kstest(a, "norm").statistic, abs=1e-12)


def test_ks_edge_cases():
    a = np.arange(10.0)
    assert ks_distance(a, a) == 0.0
    assert ks_distance(a, a + 100) == 1.0
    with pytest.raises(InsufficientSamples):
        ks_distance([], a)
    n = 2000
    u = np.random.default_rng(8).random(n)
    assert ks_distance(u, lambda x: np.clip(x, 0, 1)) < 1.63 / math.sqrt(n)


def test_ks_critical():
    assert ks_critical(0.05, 100) == pytest.approx(1.358 / 10, abs=1e-3)
    assert ks_critical(0.05, 100, 100) == pytest.approx(1.358 / math.sqrt(50), abs=1e-3)


# ---------------------------------------------------------------------------
# trap intensity fit


def test_fit_lambda_matches_independent_tail_estimate():
    fit = fit_lambda(KAPPA_HALF, n_blocks=200_000, top_k=2000, seed=1)
    assert fit.kappa == pytest.approx(0.5, abs=1e-10)
    # independent estimate of the tail constant: Q(beta > x) x^kappa at a fixed level
    bs = sample_block_stats(KAPPA_HALF, 400_000, 99)
    x = np.quantile(bs.beta, 1 - 2000 / 400_000)
    C = np.mean(bs.beta > x) * x ** 0.5
    lam = 0.5 * C / bs.length.mean()
    assert abs(fit.lam - lam) < 4 * math.hypot(fit.stderr, lam / math.sqrt(4000))


# ---------------------------------------------------------------------------
# limit integrals and hydrodynamic experiments


def test_limit_integral_two_atoms_closed_form():
    W = TrapEnvironment([0.0, 1.0], [1.0, 2.0], (-0.5, 1.5))
    u = ProfileFunction([-0.5, 0.0, 0.5], [0.0, 1.0, 0.0])
    phi = make_test_function({"T": 2.0, "chi": [-0.5, -0.25, 1.25, 1.5]})
    psi = lambda t: 1 - t / 2
    # v_0 = e^{-t}, v_1 solves v' = (v_0 - v_1)/2: v_1 = e^{-t/2} - e^{-t}
    ref = quad(lambda t: psi(t) * (1.0 * math.exp(-t) + 2.0 * (math.exp(-t / 2) - math.exp(-t))), 0, 2)[0]
    assert limit_integral(W, u, phi) == pytest.approx(ref, rel=1e-8)


def test_limit_integral_vanishes_left_of_support():
    W = sample_poisson_traps(1.0, 0.7, 2.0, 0.05, 3, center=0.0)
    u = ProfileFunction.parabola(0.0, 1.0)
    phi = make_test_function({"T": 0.5, "chi": [-2.0, -1.5, -1.0, -0.5]})
    assert limit_integral(W, u, phi) == 0.0


def test_hydro_traps_zero_profile():
    W = sample_poisson_traps(1.0, 0.7, 2.0, 0.05, 2, center=1.5)
    phi = make_test_function({"T": 0.5, "chi": [-0.25, 0.0, 1.5, 2.0]})
    res = hydro_experiment_traps(W, ProfileFunction.zero(), phi, [10.0, 100.0], [0.1, 0.05], 5, 1)
    assert all(c["target"] == 0 and c["mean"] == 0 and c["exceedance"] == 0 for c in res.cells)


def test_hydro_traps_mean_and_variance_scaling():
    W = sample_poisson_traps(1.0, 0.7, 2.0, 0.05, 2, center=1.5, n_atoms=30)
    u = ProfileFunction.parabola()
    phi = make_test_function({"T": 0.5, "chi": [-0.25, 0.0, 1.5, 2.0]})
    res = hydro_experiment_traps(W, u, phi, [50.0, 500.0], [0.05, 0.05], 200, 3, max_exit_fraction=1.0)
    for c in res.cells:
        assert abs(c["mean"] - c["target"]) < 4 * math.sqrt(c["variance"] / 200)
    # same environment at both a_n: the variance scales like 1/a_n
    assert -1.3 < variance_slope(res) < -0.7


def test_variance_slope_on_synthetic_cells():
    res = ExperimentResult("x", {}, {})
    res.cells = [{"a_n": a, "variance": 3.0 / a} for a in (10.0, 100.0, 1000.0)]
    assert variance_slope(res) == pytest.approx(-1.0)


def test_env_spread_dominates_particle_noise():
    u = ProfileFunction.parabola()
    phi = make_test_function({"T": 0.1, "chi": [-0.25, 0.0, 1.5, 2.0]})
    fit = LambdaFit(0.1, 0.0, 1.0, 3.0, 0.5, 0, 0)
    res = hydro_experiment_rwre(KAPPA_HALF, u, phi, [50], 12, 4, particle_replicas=4, reference_samples=20,
                                lam_fit=fit)
    rows = np.array([r[2:] for r in res.tables["per_environment"][1]])
    within = rows.var(axis=1, ddof=1).mean() / rows.shape[1]
    between = rows.mean(axis=1).var(ddof=1)
    assert within < between


def test_speed_check_ballistic():
    rep = speed_check(EnvDistribution.constant(0.75), [2000], 200, 1)
    assert abs(rep.mean_speed[0] - 0.5) < 4 * rep.stderr[0]
    assert math.isnan(rep.scaled_median[0])


# ---------------------------------------------------------------------------
# result persistence


def test_experiment_result_save(tmp_path):
    res = ExperimentResult("demo", {"a": 1.5, "arr": np.array([1, 2])}, {"master": 3})
    res.cells = [{"n": 1, "ks": 0.25}, {"n": 2, "ks": 0.125}]
    res.tables["empty"] = (["x", "y"], [])
    res.add_check("c1", 0.1, "<= 0.2", True)
    res.runtimes["total"] = 1.0
    out = res.save(tmp_path / "r")
    assert (out / "empty.csv").read_text().strip() == "x,y"
    m = json.loads((out / "manifest.json").read_text())
    assert m == {"experiment": "demo", "params": {"a": 1.5, "arr": [1, 2]}, "seeds": {"master": 3}}
    assert not (out / "timing.json").exists()
    assert (out / "summary.csv").read_text().splitlines()[1].endswith(",true")
    assert (out / "cells.csv").read_text().splitlines()[0] == "ks,n"
    res.save(tmp_path / "t", record_timing=True)
    assert json.loads((tmp_path / "t" / "timing.json").read_text()) == {"total": 1.0}
    assert res.passed
    res.add_check("c2", 1, "<= 0", False)
    assert not res.passed
