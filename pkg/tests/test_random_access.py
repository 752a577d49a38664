import io
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from das._utils import InvalidArgument
from das.random_access import (
    RandomAccessPolicy,
    access_probs_ra1,
    access_probs_ra2,
    dual_ascent_update,
    node_norms,
    psi_for_budget,
    run_distributed_das,
    simulate_round,
    simulate_rounds,
    success_prob,
    success_probs,
    write_psi_trace_csv,
    write_trajectories_csv,
)
from das.scenario import QueryScene, gen_query_scene

probs = st.lists(st.floats(0.0, 1.0), min_size=1, max_size=30)


# ---------------------------------------------------------------- collision formula

def test_single_node_no_contention():
    for L in (1, 3, 10):
        assert success_prob([0.5], L, 0) == 0.5


def test_certain_collision():
    assert success_prob([1.0, 1.0], 1, 0) == 0.0


@given(p=probs, L=st.integers(1, 12))
def test_success_probs_match_product_formula(p, L):
    np.testing.assert_allclose(success_probs(p, L), oracles.q_formula(p, L), atol=1e-14)


def test_success_prob_rejects_bad_input():
    with pytest.raises(InvalidArgument):
        success_prob([0.5, 1.2], 2, 0)
    with pytest.raises(InvalidArgument):
        success_prob([0.5], 2, 1)


def test_mean_successes_monte_carlo():
    p = np.full(400, 0.025)
    wins, per_round = simulate_rounds(p, 10, 100_000, np.random.default_rng(9))
    expected = success_probs(p, 10).sum()
    se = per_round.std(ddof=1) / math.sqrt(per_round.size)
    assert abs(per_round.mean() - expected) <= 3 * se
    assert wins.sum() == per_round.sum()


# ---------------------------------------------------------------- access probabilities

def test_ra2_zero_norm_never_transmits():
    assert access_probs_ra2([0.0, 2.0], psi=-100.0)[0] == 0.0


def test_ra2_lower_boundary():
    psi = 1.3
    w = math.exp(psi / math.e)
    assert access_probs_ra2([w], psi)[0] == pytest.approx(0.0, abs=1e-15)


@given(w=st.lists(st.floats(1e-6, 1e6), min_size=2, max_size=20), psi=st.floats(-20, 20))
def test_ra2_in_unit_interval_and_monotone(w, psi):
    p = access_probs_ra2(w, psi)
    assert np.all((p >= 0) & (p <= 1))
    order = np.argsort(w, kind="stable")
    assert np.all(np.diff(p[order]) >= 0)
    # raising the multiplier can only lower probabilities
    assert np.all(access_probs_ra2(w, psi + 0.5) <= p)


def test_ra2_rejects_negative_norms():
    with pytest.raises(InvalidArgument):
        access_probs_ra2([-1.0], 0.0)


@pytest.mark.parametrize("n,L,p", [(400, 10, 0.025), (10, 10, 1.0), (5, 10, 1.0)])
def test_ra1(n, L, p):
    assert access_probs_ra1(n, L) == p


def test_budget_multiplier_hits_l():
    rng = np.random.default_rng(2)
    w = rng.lognormal(0, 1, 50)
    psi = psi_for_budget(w, 10)
    assert access_probs_ra2(w, psi).sum() == pytest.approx(10.0, abs=1e-9)


def test_budget_multiplier_with_few_nodes():
    w = np.array([0.0, 2.0, 3.0])
    p = access_probs_ra2(w, psi_for_budget(w, 10))
    np.testing.assert_array_equal(p, [0.0, 1.0, 1.0])


@pytest.mark.parametrize("seed", range(3))
def test_closed_form_solves_access_problem(seed):
    w = np.random.default_rng(seed).lognormal(0, 1, 50)
    p = access_probs_ra2(w, psi_for_budget(w, 10))
    np.testing.assert_allclose(p, oracles.access_problem_pg(w, 10), atol=1e-6)


# ---------------------------------------------------------------- dual ascent

def test_dual_ascent_stationary():
    assert dual_ascent_update(0.7, 10, 10, 0.1) == 0.7


def test_dual_ascent_arithmetic():
    assert dual_ascent_update(0.0, 20, 10, 0.1) == pytest.approx(1.0, abs=1e-15)


def test_dual_ascent_rejects_bad_step():
    with pytest.raises(InvalidArgument):
        dual_ascent_update(0.0, 1, 1, 0.0)


def test_estimator_wrapper_updates_multiplier():
    pol = RandomAccessPolicy("RA2", n_channels=10, mu=0.1).fit()
    pol.update(20)
    assert pol.psi_ == pytest.approx(1.0)
    ra1 = RandomAccessPolicy("RA1", n_channels=10).fit().update(50)
    assert ra1.psi_ == 0.0
    np.testing.assert_array_equal(ra1.predict_proba(np.ones(40)), 0.25)


# ---------------------------------------------------------------- one slot

def test_silence():
    out = simulate_round([0, 1, 2], [0.0, 0.0, 0.0], 3, np.random.default_rng(0))
    assert out.transmitters == out.successes == out.collisions == []


def test_lone_transmitter_succeeds():
    out = simulate_round([5], [1.0], 4, np.random.default_rng(0))
    assert out.successes == [5] and 1 <= out.channel_assignment[5] <= 4


def test_single_channel_pair_collides():
    out = simulate_round([0, 1], [1.0, 1.0], 1, np.random.default_rng(0))
    assert out.successes == [] and out.collisions == [1] and out.P_hat == 2


@given(seed=st.integers(0, 10**6), n=st.integers(0, 40), L=st.integers(1, 8))
def test_round_invariants(seed, n, L):
    rng = np.random.default_rng(seed)
    p = rng.random(n)
    out = simulate_round(np.arange(n) + 100, p, L, rng)
    assert set(out.successes) <= set(out.transmitters)
    assert len(out.successes) <= L
    for k in out.transmitters:
        c = out.channel_assignment[k]
        alone = sum(v == c for v in out.channel_assignment.values()) == 1
        assert (k in out.successes) == alone
        assert (c in out.collisions) == (not alone)


def test_round_rejects_length_mismatch():
    with pytest.raises(InvalidArgument):
        simulate_round([0, 1], [0.5], 2, np.random.default_rng(0))


# ---------------------------------------------------------------- closed loop

def test_empty_signal_has_zero_error():
    sc = gen_query_scene(50, 4, 0.0, seed=1)
    for policy in ("RA1", "RA2"):
        tr = run_distributed_das(sc, 5, 10, policy, seed=1)
        assert tr.error_norm == [0.0] * 11


def test_complete_delivery_zeroes_error():
    sc = gen_query_scene(12, 3, 1.0, seed=2)
    tr = run_distributed_das(sc, 12, 200, "RA1", seed=2)
    assert tr.delivered[-1] == 12
    assert tr.error_norm[-1] <= 1e-10


def test_orthogonal_columns_error_never_increases():
    m = 6
    G = np.eye(m)
    x = np.array([1.0, -2.0, 0.5, 0.0, 3.0, -1.0])
    sc = QueryScene(G, x, G @ x, p_s=1.0)
    tr = run_distributed_das(sc, 2, 40, "RA2", seed=3)
    e = tr.error_norm
    assert all(b <= a + 1e-12 for a, b in zip(e, e[1:]))


@given(seed=st.integers(0, 10**6), policy=st.sampled_from(["RA1", "RA2"]))
def test_trajectory_invariants(seed, policy):
    sc = gen_query_scene(60, 5, 0.3, seed=seed)
    tr = run_distributed_das(sc, 4, 15, policy, seed=seed)
    remaining = [60 - d for d in tr.delivered]
    assert all(ph <= r for ph, r in zip(tr.P_hat[1:], remaining[:-1]))
    assert all(ns <= 4 for ns in tr.num_success)
    assert all(np.diff(tr.delivered) >= 0)


def test_ra2_multiplier_follows_dual_ascent():
    sc = gen_query_scene(80, 5, 0.5, seed=4)
    tr = run_distributed_das(sc, 5, 10, "RA2", mu=0.2, psi0=0.3, seed=4)
    assert tr.psi[1] == 0.3
    for t in range(1, 10):
        assert tr.psi[t + 1] == pytest.approx(dual_ascent_update(tr.psi[t], tr.P_hat[t], 5, 0.2))


def test_node_norms_silence_insignificant():
    sc = gen_query_scene(30, 4, 0.5, seed=5, threshold=0.8)
    w = node_norms(sc)
    assert np.all(w[~sc.significant()] == 0)
    sig = sc.significant()
    np.testing.assert_allclose(w[sig], np.linalg.norm(sc.G[:, sig], axis=0) * np.abs(sc.x[sig]))


def test_throughput_ceiling():
    # slotted ALOHA with L channels and L expected transmitters delivers at most L/e on average
    p = np.full(200, 10 / 200)
    _, per_round = simulate_rounds(p, 10, 20_000, np.random.default_rng(1))
    assert per_round.mean() <= 10 / math.e + 0.1
    assert per_round.max() <= 10


def test_csv_writers():
    sc = gen_query_scene(20, 3, 0.5, seed=6)
    tr = run_distributed_das(sc, 2, 3, "RA2", seed=6)
    buf = io.StringIO()
    write_trajectories_csv([(0, tr)], buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == "trial,t,policy,psi,P_hat,num_success,error_norm"
    assert len(lines) == 5 and lines[1].startswith("0,0,RA2,")
    buf = io.StringIO()
    write_psi_trace_csv(tr, buf)
    assert buf.getvalue().splitlines()[0] == "t,psi,P_hat,sum_p"
