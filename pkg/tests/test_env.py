import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import brentq

from rwrelab.env import (EnvDistribution, Environment, b_coeff, b_column, b_row, beta_k, g_function,
                         mean_block_length, rescaled_trap_env, sample_block_stats, sample_blocks,
                         sample_environment, solve_kappa, W_series)
from rwrelab.errors import AssumptionViolated, BufferExhausted, NoRoot

import oracles

KAPPA_HALF = EnvDistribution.two_point(0.5)


def q_env(seed, window=(-1500, 3000), dist=KAPPA_HALF):
    return sample_environment(dist, "Q", window, seed)


# ---------------------------------------------------------------------------
# single-site law and kappa


def test_two_point_kappa_half_matches_root_of_power_sum():
    # rho in {2, s}: 2^k + s^k = 2 at k = 1/2 gives s = (2 - sqrt 2)^2
    s = (2 - math.sqrt(2)) ** 2
    assert s == pytest.approx(0.343146, abs=1e-6)
    d = EnvDistribution.from_rho([2.0, s])
    k = solve_kappa(d)
    oracle = brentq(lambda a: 2.0**a + s**a - 2.0, 0.1, 0.99, xtol=1e-15)
    assert k.kappa == pytest.approx(0.5, abs=1e-12)
    assert k.kappa == pytest.approx(oracle, abs=1e-12)
    assert abs(d.moment(k.kappa) - 1) < 1e-12
    assert not k.ballistic


def test_symmetric_log_rho_is_rejected():
    with pytest.raises(AssumptionViolated):
        EnvDistribution.from_rho([4.0, 0.25])


def test_constant_omega_has_no_root():
    d = EnvDistribution.constant(0.75)
    assert d.ballistic and d.speed == pytest.approx(0.5)
    with pytest.raises(NoRoot):
        solve_kappa(d)


def test_bad_supports_rejected():
    with pytest.raises(ValueError):
        EnvDistribution(((0.5, 0.6), (0.7, 0.3)))
    with pytest.raises(ValueError):
        EnvDistribution(((1.0, 1.0),))


@settings(max_examples=40, deadline=None)
@given(kappa=st.floats(0.15, 0.95), r=st.floats(1.2, 6.0))
def test_kappa_root_property(kappa, r):
    # two-point laws built for a given kappa recover it, and E rho^kappa = 1
    if 2.0 - r**kappa <= 0:
        return
    d = EnvDistribution.two_point(kappa, r)
    k = solve_kappa(d).kappa
    assert abs(d.moment(k) - 1.0) < 1e-12
    assert k == pytest.approx(kappa, rel=1e-9)


# ---------------------------------------------------------------------------
# potential and ladders


def test_constant_environment_ladders():
    env = sample_environment(EnvDistribution.constant(0.75), "P", (-50, 300), 1)
    st_ = env.ladders
    assert np.array_equal(np.diff(st_.nu), np.ones(st_.nu.size - 1))
    inner = st_.complete
    assert np.allclose(st_.M[inner], 1 / 3)
    assert np.allclose(st_.beta[inner], 2.0)
    assert g_function(env, 0).value == pytest.approx(2.0, abs=1e-10)


def test_hand_ladder_pattern():
    # log rho = (+, -, -) with V(1) > V(0) > V(3): ladders at 0 and 3
    rho = np.array([2.0, 0.5, 0.25, 0.5])
    env = Environment(1.0 / (1.0 + rho), 0, law="Q")
    st_ = env.ladders
    assert list(st_.nu[:2]) == [0, 3]
    assert st_.block_length[0] == 3
    assert st_.M[0] == pytest.approx(2.0)


@pytest.mark.parametrize("seed", [1, 2, 3])
def test_potential_and_ladder_invariants(seed):
    env = q_env(seed, (-400, 800))
    V = env.potential
    assert env.V(0) == 0.0
    assert np.allclose(np.diff(V), env.log_rho, atol=1e-12)
    # law Q: V(y) > 0 for all y < 0
    assert np.all(env.V(np.arange(env.x_min, 0)) > 0)
    st_ = env.ladders
    assert np.all(np.diff(st_.nu) > 0)
    assert np.all(np.diff(env.V(st_.nu)) < 0)
    for a, b in zip(st_.nu[:-1], st_.nu[1:]):
        assert np.all(env.V(np.arange(a, b)) >= env.V(a))
    ok = st_.complete
    assert np.all(st_.beta[ok] >= st_.block_length[ok])
    assert np.all(np.isfinite(st_.M[ok]))
    i0 = st_.index_of(0)
    assert st_.nu[i0] == 0


def test_q_block_length_matches_independent_run():
    env = sample_environment(KAPPA_HALF, "Q", (0, 100_000), 1)
    lens = env.ladders.block_length[env.ladders.complete]
    mean = lens.mean()
    se = lens.std(ddof=1) / math.sqrt(lens.size)
    ref, ref_se = mean_block_length(KAPPA_HALF, n_blocks=1_000_000, seed=12345)
    assert abs(mean - ref) < 3 * math.hypot(se, ref_se)


def test_block_sampler_cuts_first_descent_blocks():
    stream, lens = sample_blocks(KAPPA_HALF, 500, 7)
    lr = np.log((1 - stream) / stream)
    pos = 0
    for L in lens:
        v = np.cumsum(lr[pos:pos + L])
        assert v[-1] < 0 and np.all(v[:-1] >= 0)
        pos += L


def test_block_stats_kernel_agrees_with_environment_ladders():
    # same law, different route: a long Q environment's complete blocks
    bs = sample_block_stats(KAPPA_HALF, 20_000, 3)
    env = sample_environment(KAPPA_HALF, "Q", (-3000, 60_000), 3)
    st_ = env.ladders
    ok = st_.complete & (st_.nu > 0)
    # distributional agreement of block lengths (two-sample KS at 1%)
    from scipy.stats import ks_2samp
    assert ks_2samp(bs.length, st_.block_length[ok]).pvalue > 0.01
    assert np.all(bs.beta >= bs.length)
    assert np.all(bs.M > 0)


def test_unif_ladder_growth():
    env = sample_environment(KAPPA_HALF, "Q", (0, 2_000_000), 4)
    nu = env.ladders.nu
    nubar = nu[-1] / (nu.size - 1)
    devs = []
    for n in (100, 1000, 10_000):
        k = np.arange(n + 1)
        devs.append(np.max(np.abs(nu[: n + 1] - k * nubar)) / n)
    assert devs[2] < devs[0]


# ---------------------------------------------------------------------------
# g, beta and b against the banded-solve oracle


@pytest.mark.parametrize("seed", [11, 12])
def test_g_matches_green_function(seed):
    env = q_env(seed)
    om = env.omega
    for x in (0, 50, 200):
        i = x - env.x_min
        # killed at the far ends: the left is a potential climb of hundreds of log units
        ref = oracles.green_diag(om, i, 0, om.size - 1)
        got = g_function(env, x).value
        assert got == pytest.approx(ref, rel=1e-7)
        assert got >= 1.0
        assert env.g_window[i] == pytest.approx(ref, rel=1e-7)


@pytest.mark.parametrize("seed", [11, 12])
def test_beta_and_b_match_green_function(seed):
    env = q_env(seed)
    st_ = env.ladders
    om = env.omega
    for k in (0, 1, 5):
        i = st_.index_of(k)
        a, b = int(st_.nu[i]), int(st_.nu[i + 1])
        G = oracles.green_row(om, a - env.x_min, 0, b - env.x_min)      # killed at nu_{k+1}
        beta = beta_k(env, k)
        assert beta == pytest.approx(G.sum(), rel=1e-8)
        assert st_.beta[i] == pytest.approx(beta, rel=1e-9)
        xs, vals = b_row(env, k)
        xs, vals = xs[1:], vals[1:]         # the left edge is the oracle's killing site
        ref = G[xs - env.x_min - 1]
        sel = ref > 1e-12 * ref.max()
        assert np.allclose(vals[sel], ref[sel], rtol=1e-7)
        for x in (a, b - 1, max(a - 3, env.x_min + 1)):
            assert b_coeff(env, x, k) == pytest.approx(G[x - env.x_min - 1], rel=1e-7)
        assert b_coeff(env, a, k) >= 1.0


@pytest.mark.parametrize("seed", [21, 22, 23])
def test_b_row_and_column_identities(seed):
    env = q_env(seed)
    st_ = env.ladders
    for k in range(0, 8):
        _, vals = b_row(env, k)
        assert vals.sum() == pytest.approx(beta_k(env, k), rel=1e-8)
    # column: sum over ladders k with nu_{k+1} > x of b_{x,k} equals g(x)
    for x in (0, 40, 120):
        ks, vals = b_column(env, x)
        # ladders whose successor is right of the window are missing; their share is bounded
        # by the climb back from beyond the window, far below 1e-6
        assert vals.sum() == pytest.approx(g_function(env, x).value, rel=1e-6)


def test_buffer_exhaustion_is_loud():
    env = sample_environment(KAPPA_HALF, "P", (-5, 5), 1)
    with pytest.raises(BufferExhausted):
        g_function(env, 4)
    with pytest.raises(BufferExhausted):
        W_series(env, 0)


def test_rescaled_trap_environment():
    env = sample_environment(EnvDistribution.constant(0.75), "Q", (0, 400), 1)
    W1 = rescaled_trap_env(env, 1, 0.5)
    st_ = env.ladders
    ok = st_.complete & np.isfinite(st_.beta)
    assert np.array_equal(W1.x, st_.nu[ok]) and np.allclose(W1.y, st_.beta[ok])
    W10 = rescaled_trap_env(env, 10, 0.5)
    assert np.allclose(W10.x[:3], np.array([0, 1, 2]) / 10 + W10.x[0])
    assert np.allclose(W10.y, 2 / 100)
    assert np.all(np.diff(W10.x) > 0)


def test_environment_serialization_round_trip(tmp_path):
    env = sample_environment(KAPPA_HALF, "Q", (-20, 40), 5)
    env.to_csv(tmp_path / "e.csv")
    env.to_binary(tmp_path / "e.npz")
    for back in (Environment.from_csv(tmp_path / "e.csv"), Environment.from_binary(tmp_path / "e.npz")):
        assert np.array_equal(back.omega, env.omega)
        assert (back.x_min, back.law, back.seed) == (env.x_min, env.law, env.seed)


def test_sampling_is_deterministic():
    a = sample_environment(KAPPA_HALF, "Q", (-100, 100), 9)
    b = sample_environment(KAPPA_HALF, "Q", (-100, 100), 9)
    assert np.array_equal(a.omega, b.omega)
