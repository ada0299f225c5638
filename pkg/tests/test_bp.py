import copy

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fogcache.bp import (
    BPOptions,
    MessageState,
    bp_solve,
    belief_and_decide,
    build_factor_graph,
    exchange_accounting,
    repair,
    run_rounds,
    update_alpha,
    update_beta_cap,
    update_beta_eta,
)
from fogcache.delay import DelayEvaluator, Placement
from fogcache.errors import SolverError
from fogcache.greedy import greedy_place
from fogcache.model import ChannelParams, DemandModel, build_grid_topology, instance_from_positions, make_demand
from fogcache.oracle import RawMessages, brute_force_optimal, raw_max_product_round
from fogcache.rates import Scheme, build_rate_table


def evaluator(M, K, N, gamma, seed, scheme=Scheme.COOPERATIVE):
    inst = build_grid_topology(M, K, seed=seed)
    demand = make_demand(K, N, gamma, seed=seed + 1)
    return DelayEvaluator(inst, demand, build_rate_table(inst, ChannelParams(mc_samples=1000, mc_seed=seed), scheme))


def cap_state(alphas):
    """Graph-free state for one capacity factor: edges 0..len-1 all enter it."""
    class G:
        def edge(self, i, j):
            return i

        def fac_edges(self, j):
            return np.arange(len(alphas))

    st_ = MessageState(np.asarray(alphas, float), np.zeros(len(alphas)), np.zeros(1), np.zeros(1, bool))
    return G(), st_


@pytest.fixture(scope="module")
def mid():
    return [evaluator(4, 30, 12, 0.8, seed=5, scheme=s) for s in Scheme]


class TestFactorGraph:
    def test_two_cell_counts(self, two_cell_eval):
        g = build_factor_graph(two_cell_eval)
        assert g.I == 4
        assert g.J == 2 + 6
        # degree-1 delay factors for the edge users, degree-2 for the overlap user; capacity factors see N vars
        assert g.E == 2 * 1 + 2 * 2 + 2 * 1 + 2 * 2

    def test_two_cell_adjacency(self, two_cell_eval):
        g = build_factor_graph(two_cell_eval)
        N = 2
        assert g.fac_neighbors(g.eta_node(1, 1)) == [0 * N + 1, 1 * N + 1]
        assert g.fac_neighbors(g.eta_node(0, 0)) == [0]
        assert g.fac_neighbors(g.eta_node(1, 2)) == [1 * N + 1]
        assert g.fac_neighbors(g.cap_node(1)) == [2, 3]
        assert sorted(g.var_neighbors(0)) == [g.eta_node(0, 0), g.eta_node(0, 1), g.cap_node(0)]

    def test_function_index_rule(self, two_cell_eval):
        g = build_factor_graph(two_cell_eval)
        for k in range(3):
            for n in range(2):
                assert g.eta_node(n, k) == 2 * k + n
        assert g.cap_node(0) == 6 and g.cap_node(1) == 7

    def test_zero_preference_has_no_factor(self, two_cell_instance, channel):
        demand = DemandModel(np.array([[1.0, 0.0], [0.5, 0.5], [0.0, 1.0]]))
        ev = DelayEvaluator(two_cell_instance, demand, build_rate_table(two_cell_instance, channel, Scheme.COOPERATIVE))
        g = build_factor_graph(ev)
        assert g.J_eta == 4
        with pytest.raises(KeyError):
            g.eta_node(1, 0)

    def test_adjacency_rules(self, mid):
        ev = mid[0]
        g = build_factor_graph(ev)
        for j in range(g.J_eta):
            k, n = int(g.eta_user[j]), int(g.eta_file[j])
            assert g.fac_neighbors(j) == [m * ev.N + n for m in ev.serving[k]]
            assert g.fac_owner[j] == min(ev.serving[k])
        for m in range(ev.M):
            assert g.fac_neighbors(g.cap_node(m)) == list(range(m * ev.N, (m + 1) * ev.N))

    def test_ownership(self, two_cell_eval):
        g = build_factor_graph(two_cell_eval)
        assert g.processed_users(0) == (0, 1)
        assert g.processed_users(1) == (2,)

    def test_no_users(self, channel):
        inst = instance_from_positions([(0, 0), (200, 0)], np.zeros((0, 2)))
        ev = DelayEvaluator(inst, DemandModel(np.zeros((0, 3))), build_rate_table(inst, channel, Scheme.COOPERATIVE))
        g = build_factor_graph(ev)
        assert g.J == 2 and g.J_eta == 0
        res = bp_solve(ev, 2)
        assert res.converged and not res.placement.X.any()


class TestUpdateAlpha:
    def test_initial_zero(self, two_cell_eval):
        g = build_factor_graph(two_cell_eval)
        s = MessageState.initial(g)
        assert update_alpha(g, s, 0, g.cap_node(0)) == 0.0

    def test_sum_of_other_neighbours(self, two_cell_eval):
        g = build_factor_graph(two_cell_eval)
        s = MessageState.initial(g)
        # variable 0 touches eta(0,0), eta(0,1) and the capacity node of BS 0
        s.beta[g.edge(0, g.eta_node(0, 0))] = 2.0
        s.beta[g.edge(0, g.eta_node(0, 1))] = -0.5
        s.beta[g.edge(0, g.cap_node(0))] = 7.0
        assert update_alpha(g, s, 0, g.cap_node(0)) == pytest.approx(1.5)

    def test_damping(self, two_cell_eval):
        g = build_factor_graph(two_cell_eval)
        s = MessageState.initial(g)
        e = g.edge(0, g.cap_node(0))
        s.alpha[e] = 1.0
        s.beta[g.edge(0, g.eta_node(0, 0))] = 3.0
        assert update_alpha(g, s, 0, g.cap_node(0), damping=0.5) == pytest.approx(2.0)

    def test_single_neighbour(self, two_cell_eval):
        # variable 2 is file 0 at BS 1: the overlap user, user 2, and the capacity node
        g = build_factor_graph(two_cell_eval)
        s = MessageState.initial(g)
        s.beta[:] = 4.0
        assert len(g.var_neighbors(2)) == 3
        assert update_alpha(g, s, 2, g.cap_node(1)) == pytest.approx(8.0)


class TestBetaEta:
    def test_single_bs_user(self, two_cell_eval):
        g = build_factor_graph(two_cell_eval)
        s = MessageState.initial(g)
        ev, t = two_cell_eval, two_cell_eval.table
        k, n = 0, 1
        p = ev.demand.preferences[k, n]
        expected = p * ((40.0 + 1e8 / t.fetch_rate(k)) - 1e8 / t.rate(k, [0]))
        assert update_beta_eta(g, s, g.eta_node(n, k), n, ev) == pytest.approx(expected, rel=1e-12)

    def test_other_bs_on(self, two_cell_coop):
        ev, t = two_cell_coop, two_cell_coop.table
        g = build_factor_graph(ev)
        s = MessageState.initial(g)
        j = g.eta_node(0, 1)
        s.alpha[g.edge(2, j)] = 0.3  # file 0 at BS 1 looks on
        p = ev.demand.preferences[1, 0]
        expected = p * (1e8 / t.rate(1, [1]) - 1e8 / t.rate(1, [0, 1]))
        assert update_beta_eta(g, s, j, 0, ev) == pytest.approx(expected, rel=1e-12)
        assert expected > 0

    def test_non_negative(self, mid):
        rng = np.random.default_rng(0)
        for ev in mid:
            g = build_factor_graph(ev)
            s = MessageState.initial(g)
            s.alpha = rng.normal(size=g.E)
            for j in rng.choice(g.J_eta, 40, replace=False):
                for i in g.fac_neighbors(int(j)):
                    assert update_beta_eta(g, s, int(j), i, ev) >= 0.0


class TestBetaCap:
    def test_binding(self):
        g, s = cap_state([0.0, 3.0, 1.0, -0.5])
        assert update_beta_cap(g, s, 0, 0, 2) == pytest.approx(-1.0)

    def test_all_negative(self):
        g, s = cap_state([0.0, -0.1, -0.2, -0.3])
        assert update_beta_cap(g, s, 0, 0, 2) == 0.0

    def test_slack(self):
        g, s = cap_state([0.0, 5.0, 4.0])
        assert update_beta_cap(g, s, 0, 0, 3) == 0.0

    def test_zero_capacity_rejected(self):
        g, s = cap_state([0.0, 1.0])
        with pytest.raises(ValueError):
            update_beta_cap(g, s, 0, 0, 0)

    def test_non_positive(self, mid):
        rng = np.random.default_rng(1)
        g = build_factor_graph(mid[0])
        s = MessageState.initial(g)
        s.alpha = rng.normal(size=g.E)
        for m in range(g.M):
            for i in g.fac_neighbors(g.cap_node(m)):
                for q in (1, 2, 5):
                    assert update_beta_cap(g, s, g.cap_node(m), i, q) <= 0.0


class TestBelief:
    def test_tie_is_off(self, two_cell_eval):
        g = build_factor_graph(two_cell_eval)
        assert belief_and_decide(g, MessageState.initial(g), 0) == (0.0, False)

    def test_sum(self, two_cell_eval):
        g = build_factor_graph(two_cell_eval)
        s = MessageState.initial(g)
        s.beta[g.edge(0, g.eta_node(0, 0))] = 1.0
        s.beta[g.edge(0, g.cap_node(0))] = -0.25
        assert belief_and_decide(g, s, 0) == (pytest.approx(0.75), True)


class TestEngine:
    @pytest.mark.parametrize("rule", ["sign", "exact"])
    def test_flooding_matches_scalar_updates(self, mid, rule):
        for ev in mid:
            g = build_factor_graph(ev)
            q = 3
            prev = MessageState.initial(g)
            for state in run_rounds(g, ev, q, 4, BPOptions(eta_rule=rule)):
                for j in range(g.J):
                    for i in g.fac_neighbors(j):
                        e = g.edge(i, j)
                        if j >= g.J_eta:
                            want = update_beta_cap(g, prev, j, i, q)
                        elif rule == "sign":
                            want = update_beta_eta(g, prev, j, i, ev)
                        else:
                            continue
                        assert state.beta[e] == pytest.approx(want, rel=1e-12, abs=1e-12)
                for i in range(g.I):
                    for j in g.var_neighbors(i):
                        assert state.alpha[g.edge(i, j)] == pytest.approx(update_alpha(g, state, i, j), rel=1e-12, abs=1e-9)
                    assert state.beliefs[i] == pytest.approx(belief_and_decide(g, state, i)[0], abs=1e-9)
                prev = copy.deepcopy(state)

    def test_exact_rule_matches_raw_first_round(self, two_cell_eval):
        g = build_factor_graph(two_cell_eval)
        raw = raw_max_product_round(g, two_cell_eval, 1, RawMessages.uniform(g))
        state = next(run_rounds(g, two_cell_eval, 1, 1, BPOptions(eta_rule="exact")))
        a, b = raw.log_ratios()
        assert np.max(np.abs(a - state.alpha)) <= 1e-9
        assert np.max(np.abs(b - state.beta)) <= 1e-9
        raw_beliefs = np.bincount(g.edge_var, weights=b, minlength=g.I)
        assert np.max(np.abs(raw_beliefs - state.beliefs)) <= 1e-9

    def test_rules_agree_on_single_cover(self, channel):
        inst = instance_from_positions([(0, 0), (1000, 0)], [(0, 10), (20, 0), (990, 0)])
        ev = DelayEvaluator(inst, make_demand(3, 4, 0.7, seed=0), build_rate_table(inst, channel, Scheme.COOPERATIVE))
        g = build_factor_graph(ev)
        a = list(run_rounds(g, ev, 2, 5, BPOptions(eta_rule="sign")))[-1]
        b = list(run_rounds(g, ev, 2, 5, BPOptions(eta_rule="exact")))[-1]
        assert np.allclose(a.beta, b.beta, atol=1e-12)


class TestSolve:
    def test_zero_capacity(self, two_cell_eval):
        res = bp_solve(two_cell_eval, 0)
        assert not res.placement.X.any()
        assert res.rounds == 1 and res.converged

    def test_single_bs_two_files(self, channel):
        inst = instance_from_positions([(0, 0)], [(40, 0)])
        ev = DelayEvaluator(inst, DemandModel(np.array([[0.9, 0.1]])), build_rate_table(inst, channel, Scheme.COOPERATIVE))
        res = bp_solve(ev, 1)
        best, _ = brute_force_optimal(ev, 1)
        assert res.converged and res.placement == best
        assert res.placement.sets == ((0,),)

    def test_non_finite_message(self, two_cell_instance, two_cell_demand, channel):
        ev = DelayEvaluator(two_cell_instance, two_cell_demand, build_rate_table(two_cell_instance, channel, Scheme.COOPERATIVE))
        ev.miss_delay[0, 0] = np.inf
        with pytest.raises(SolverError, match="round 1"):
            bp_solve(ev, 1)

    def test_deterministic(self, mid):
        a = bp_solve(mid[0], 3, BPOptions(schedule="sequential", damping=0.8))
        b = bp_solve(mid[0], 3, BPOptions(schedule="sequential", damping=0.8))
        assert a.placement == b.placement
        assert a.trace.rounds == b.trace.rounds
        assert np.array_equal(a.state.alpha, b.state.alpha)

    @pytest.mark.parametrize("schedule", ["flooding", "sequential"])
    def test_close_to_greedy(self, mid, schedule):
        for ev in mid:
            res = bp_solve(ev, 3, BPOptions(schedule=schedule, damping=0.8))
            greedy = ev.average_delay(greedy_place(ev, 3)[0])
            assert res.placement.feasible
            assert ev.average_delay(res.placement) <= 1.1 * greedy

    def test_trace_csv(self, mid, tmp_path):
        res = bp_solve(mid[0], 2, BPOptions(t_max=5))
        res.trace.write_csv(tmp_path / "bp.csv")
        lines = (tmp_path / "bp.csv").read_text().splitlines()
        assert len(lines) == 1 + res.rounds
        assert lines[0].startswith("round,avg_delay_s,changed,max_delta,computed,exchanged")

    def test_options_validated(self):
        for bad in ({"damping": 1.0}, {"schedule": "gossip"}, {"eta_rule": "x"}, {"t_max": 0}):
            with pytest.raises(ValueError):
                BPOptions(**bad)


class TestRepair:
    def test_keeps_top_beliefs(self):
        est = np.array([1, 1, 1, 0], bool)
        beliefs = np.array([0.5, 2.0, 1.0, -1.0])
        pl, repaired = repair(est, beliefs, N=4, M=1, capacities=2)
        assert repaired and pl.sets == ((1, 2),)

    def test_untouched_when_feasible(self):
        pl, repaired = repair(np.array([1, 0, 0, 1], bool), np.zeros(4), N=2, M=2, capacities=1)
        assert not repaired and pl.sets == ((0,), (1,))

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 10_000), q=st.integers(1, 6), t_max=st.integers(1, 6))
    def test_output_always_feasible(self, mid, seed, q, t_max):
        ev = mid[seed % 2]
        res = bp_solve(ev, q, BPOptions(t_max=t_max))
        assert res.placement.feasible


class TestExchange:
    def test_single_cover_has_no_exchange(self, channel):
        inst = instance_from_positions([(0, 0), (1000, 0)], [(0, 10), (990, 0)])
        ev = DelayEvaluator(inst, make_demand(2, 3, 0.7, seed=0), build_rate_table(inst, channel, Scheme.COOPERATIVE))
        res = bp_solve(ev, 1)
        computed, exchanged = exchange_accounting(build_factor_graph(ev), res.trace)
        assert exchanged.sum() == 0 and computed.sum() > 0

    def test_two_cell_crossing_edges(self, two_cell_eval):
        g = build_factor_graph(two_cell_eval)
        res = bp_solve(two_cell_eval, 1, BPOptions(t_max=7))
        _, exchanged = exchange_accounting(g, res.trace)
        # the overlap user's two delay factors live at BS 0 and each reach one BS-1 variable
        crossing = np.flatnonzero(g.crossing())
        assert crossing.size == 2
        assert set(g.edge_var[crossing]) == {2, 3}
        assert exchanged.sum() == 2 * crossing.size * res.rounds

    def test_exchanged_bounded(self, mid):
        for ev in mid:
            res = bp_solve(ev, 2, BPOptions(t_max=4))
            computed, exchanged = exchange_accounting(build_factor_graph(ev), res.trace)
            assert np.all(exchanged <= computed)
