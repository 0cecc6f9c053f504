"""Negotiation-stage tests: anchored penalty lattices, best-response
oracles by grid search, price updates, and full loop convergence."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gridroll.fleet import BusVirtualStorage, aggregate_to_bus
from gridroll.grid import Branch, NetworkModel
from gridroll.negotiation import (AggregatorAgent, NegotiationConfig, aggregator_response,
                                  allocate_award, anchored_lattice, dso_response,
                                  negotiate, update_prices, _snap_minimum)
from helpers import make_ev


def simple_storage(horizon=2, pch=10.0, pdis=0.0, e_min_end=12.0, e_max=20.0,
                   eta_ch=1.0, eta_dis=1.0):
    e_min = np.zeros(horizon)
    e_min[-1] = e_min_end
    return BusVirtualStorage(bus=1, horizon=horizon, member_ids=("a",),
                             capacity_kwh=e_max,
                             p_max_ch_kw=np.full(horizon, pch),
                             p_max_dis_kw=np.full(horizon, pdis),
                             e_min_kwh=e_min, e_max_kwh=np.full(horizon, e_max),
                             arrivals_kwh=np.zeros(horizon),
                             departures_kwh=np.zeros(horizon),
                             initial_energy_kwh=0.0, desired_energy_kwh=e_min_end,
                             eta_ch=eta_ch, eta_dis=eta_dis)


def line_network(horizon=1, n_bus=2, r=0.001, x=0.001, limit_kw=70.0,
                 base_kw=0.0, v_min=0.9, v_max=1.1):
    branches = tuple(Branch(i, i + 1, r, x) for i in range(n_bus - 1))
    base = np.full((n_bus, horizon), 0.0)
    base[1:, :] = base_kw
    return NetworkModel(n_bus=n_bus, slack=0, branches=branches, s_base_kva=400.0,
                        slack_voltage=1.0, v_min=v_min, v_max=v_max,
                        transformer_limit_kw=limit_kw, base_load_kw=base).prepare()


def test_price_update_pinned_value():
    lam = np.array([[0.10]])
    out = update_prices(lam, np.array([[2.0]]), np.array([[0.0]]), 70.0,
                        NegotiationConfig())
    assert out[0, 0] == pytest.approx(0.10 + 0.4 * 2.0 / 70.0, rel=1e-12)
    assert out[0, 0] == pytest.approx(0.11142857142857143, rel=1e-12)
    # diminishing variant scales the step by the round number
    out3 = update_prices(lam, np.array([[2.0]]), np.array([[0.0]]), 70.0,
                         NegotiationConfig(diminishing_step=True), iteration=4)
    assert out3[0, 0] == pytest.approx(0.10 + 0.1 * 2.0 / 70.0, rel=1e-12)


def test_config_validation():
    for bad in [NegotiationConfig(price_step=0.0), NegotiationConfig(tolerance=-1),
                NegotiationConfig(max_iters=0), NegotiationConfig(penalty_weight=0.0),
                NegotiationConfig(max_segment_kw=0.0)]:
        with pytest.raises(ValueError):
            bad.validate()


@settings(max_examples=60, deadline=None)
@given(lo=st.floats(-30, 0), width=st.floats(0.5, 40), frac=st.floats(0, 1),
       step=st.floats(0.05, 2.0))
def test_anchored_lattice_properties(lo, width, frac, step):
    hi = lo + width
    anchor = lo + frac * width
    seg = anchored_lattice(lo, hi, anchor, step)
    xs = seg.breakpoints
    assert xs[0] == pytest.approx(lo)
    assert xs[-1] == pytest.approx(hi)
    assert np.all(np.diff(xs) > 0)
    assert np.max(np.diff(xs)) <= step + 1e-9
    assert np.min(np.abs(xs - anchor)) <= 1e-9  # knot at the anchor
    assert np.all(np.diff(seg.slopes) >= -1e-12)
    # chords touch the quadratic at every breakpoint
    vals = (xs[0] - anchor) ** 2 + np.concatenate([[0.0], np.cumsum(seg.slopes * np.diff(xs))])
    assert np.allclose(vals, (xs - anchor) ** 2, atol=1e-8)


@settings(max_examples=60, deadline=None)
@given(anchor=st.floats(-5, 5), coef=st.floats(-10, 10), weight=st.floats(0.2, 4))
def test_snap_minimum_is_breakpoint_argmin(anchor, coef, weight):
    seg = anchored_lattice(-8.0, 8.0, anchor, 0.5)
    u = _snap_minimum(seg, coef, weight)
    xs = seg.breakpoints
    objs = weight * (xs - anchor) ** 2 + coef * xs
    assert weight * (u - anchor) ** 2 + coef * u <= objs.min() + 1e-9


def test_zero_price_response_reproduces_plan_exactly():
    ev1 = make_ev("a", bus=3, arrival=1, departure=4, soc_init=0.4, soc_desired=0.8)
    ev2 = make_ev("b", bus=3, arrival=2, departure=4, soc_init=0.5, soc_desired=0.7)
    storages = aggregate_to_bus([ev1, ev2], 4)
    plan = np.array([0.0, 3.1, 4.8, 3.5])  # deliverable: checked by the walk below
    agent = AggregatorAgent("agg", storages, {3: plan})
    resp = aggregator_response(agent, np.zeros((4, 4)), NegotiationConfig())
    assert not resp.distress
    assert np.array_equal(resp.kw[3], plan)


def test_aggregator_response_near_grid_search_optimum():
    st_ = simple_storage(horizon=2, pch=6.0, pdis=4.0, e_min_end=5.0,
                         e_max=40.0, eta_ch=0.9, eta_dis=0.95)
    target = np.array([4.0, 1.0])
    lam = np.array([0.8, 0.0])
    cfg = NegotiationConfig(penalty_weight=1.0)
    agent = AggregatorAgent("agg", {1: st_}, {1: target})
    prices = np.zeros((2, 2))
    prices[1] = lam
    resp = aggregator_response(agent, prices, cfg)
    p = resp.kw[1]
    # feasibility walk with the storage's own conversion rule
    lvl0 = p[0] * 0.9 if p[0] >= 0 else p[0] / 0.95
    lvl1 = lvl0 + (p[1] * 0.9 if p[1] >= 0 else p[1] / 0.95)
    assert lvl1 >= 5.0 - 1e-7
    got = float(lam @ p + np.sum((p - target) ** 2))

    grid = np.linspace(-4.0, 6.0, 241)
    g0, g1 = np.meshgrid(grid, grid, indexing="ij")
    e0 = np.where(g0 >= 0, g0 * 0.9, g0 / 0.95)
    e1 = e0 + np.where(g1 >= 0, g1 * 0.9, g1 / 0.95)
    feas = (e0 >= -1e-12) & (e0 <= 40.0) & (e1 >= 5.0) & (e1 <= 40.0)
    obj = lam[0] * g0 + lam[1] * g1 + (g0 - target[0]) ** 2 + (g1 - target[1]) ** 2
    best = float(np.min(np.where(feas, obj, np.inf)))
    # within the penalty linearisation gap plus grid resolution
    assert got <= best + 0.12
    assert got >= best - 0.05


def test_dso_response_shares_transformer_cut():
    net = line_network(horizon=1, n_bus=3, limit_kw=70.0)
    caps_ch = np.array([[0.0], [40.0], [45.0]])
    caps_dis = np.zeros((3, 1))
    req = np.array([[0.0], [40.0], [45.0]])
    granted = dso_response(net, caps_ch, caps_dis, req, np.zeros((3, 1)),
                           NegotiationConfig())
    assert granted[:, 0].sum() == pytest.approx(70.0, abs=1e-6)
    # equal marginal penalty: cuts differ by at most a lattice step
    cuts = req[1:, 0] - granted[1:, 0]
    assert abs(cuts[0] - cuts[1]) <= 0.9
    assert np.all(granted[:, 0] <= caps_ch[:, 0] + 1e-9)


def test_dso_grants_requests_when_secure():
    net = line_network(horizon=2, n_bus=3)
    caps_ch = np.full((3, 2), 20.0)
    caps_ch[0] = 0.0
    req = np.array([[0.0, 0.0], [10.0, 4.0], [5.0, 0.5]])
    granted = dso_response(net, caps_ch, np.zeros((3, 2)), req, np.zeros((3, 2)),
                           NegotiationConfig())
    assert np.array_equal(granted, req)


def test_negotiate_converges_immediately_when_secure():
    st_ = simple_storage(horizon=2, pch=10.0, e_min_end=6.0)
    agent = AggregatorAgent("agg", {1: st_}, {1: np.array([4.0, 2.0])})
    net = line_network(horizon=2)
    outcome = negotiate([agent], net, NegotiationConfig())
    assert outcome.converged
    assert outcome.iterations == 1
    assert np.array_equal(outcome.granted_kw[1], np.array([4.0, 2.0]))
    assert np.all(outcome.prices == 0.0)
    assert outcome.mismatch_trace == [0.0]


def test_negotiate_relieves_transformer_congestion():
    st_ = simple_storage(horizon=2, pch=10.0, e_min_end=12.0)
    agent = AggregatorAgent("agg", {1: st_}, {1: np.array([9.0, 3.0])})
    net = line_network(horizon=2, limit_kw=7.0)
    cfg = NegotiationConfig()
    outcome = negotiate([agent], net, cfg)
    assert outcome.converged
    assert 1 < outcome.iterations <= cfg.max_iters
    quantum = cfg.tolerance * net.transformer_limit_kw / cfg.price_step
    assert outcome.granted_kw[1, 0] <= 7.0 + 1e-9
    assert outcome.mismatch_trace[-1] <= quantum + 1e-9
    assert outcome.mismatch_trace[-1] < outcome.mismatch_trace[0]
    # congestion hour priced, slack hour untouched
    assert outcome.prices[1, 0] > 0.5
    assert outcome.prices[1, 1] == pytest.approx(0.0, abs=1e-12)
    # the award still delivers the required energy up to the residual
    assert outcome.granted_kw[1].sum() >= 12.0 - quantum - 1e-6
    # the plan alone would have overloaded the transformer
    assert agent.plan_kw[1][0] > net.transformer_limit_kw


def test_negotiate_relieves_voltage_congestion():
    branches = tuple(Branch(i, i + 1, 0.05, 0.02) for i in range(6))
    base = np.zeros((7, 1))
    base[1:, 0] = 3.0
    net = NetworkModel(n_bus=7, slack=0, branches=branches, s_base_kva=100.0,
                       slack_voltage=1.0, v_min=0.9, v_max=1.1,
                       transformer_limit_kw=70.0, base_load_kw=base).prepare()
    st_ = BusVirtualStorage(bus=6, horizon=1, member_ids=("a",), capacity_kwh=60.0,
                            p_max_ch_kw=np.array([30.0]), p_max_dis_kw=np.zeros(1),
                            e_min_kwh=np.zeros(1), e_max_kwh=np.array([60.0]),
                            arrivals_kwh=np.zeros(1), departures_kwh=np.zeros(1),
                            initial_energy_kwh=0.0, desired_energy_kwh=0.0,
                            eta_ch=0.9, eta_dis=0.95)
    agent = AggregatorAgent("agg", {6: st_}, {6: np.array([25.0])})
    # the raw plan violates the floor through the linearised model
    volts = net.predicted_voltages(np.vstack([np.zeros((6, 1)), [[25.0]]]))
    assert volts[6, 0] < 0.9
    outcome = negotiate([agent], net, NegotiationConfig())
    assert outcome.converged
    awarded = np.zeros((7, 1))
    awarded[6, 0] = outcome.granted_kw[6, 0]
    assert outcome.granted_kw[6, 0] < 25.0
    assert net.predicted_voltages(awarded)[6, 0] >= 0.9 - 1e-9
    assert outcome.prices[6, 0] > 0.0


def test_negotiate_is_deterministic():
    st_ = simple_storage(horizon=2, pch=10.0, e_min_end=12.0)
    agent = AggregatorAgent("agg", {1: st_}, {1: np.array([9.0, 3.0])})
    net = line_network(horizon=2, limit_kw=7.0)
    a = negotiate([agent], net, NegotiationConfig())
    b = negotiate([agent], net, NegotiationConfig())
    assert np.array_equal(a.prices, b.prices)
    assert a.mismatch_trace == b.mismatch_trace
    assert a.iterations == b.iterations


def test_undeliverable_plan_sets_distress():
    st_ = simple_storage(horizon=2, pch=3.0, e_min_end=50.0)  # cannot reach 50 kWh
    agent = AggregatorAgent("agg", {1: st_}, {1: np.array([3.0, 3.0])})
    net = line_network(horizon=2)
    outcome = negotiate([agent], net, NegotiationConfig(max_iters=3))
    assert "agg" in outcome.distress
    assert np.array_equal(outcome.agent_kw["agg"][1], np.array([3.0, 3.0]))


def test_allocate_award_pro_rata_and_capacity_fallback():
    st_a = simple_storage(horizon=1, pch=6.0, e_min_end=0.0)
    st_b = simple_storage(horizon=1, pch=2.0, e_min_end=0.0)
    a = AggregatorAgent("a", {1: st_a}, {1: np.array([6.0])})
    b = AggregatorAgent("b", {1: st_b}, {1: np.array([2.0])})
    net = line_network(horizon=1, limit_kw=4.0)
    outcome = negotiate([a, b], net, NegotiationConfig(max_iters=200))
    shares = allocate_award([a, b], outcome)
    total = shares["a"][1][0] + shares["b"][1][0]
    assert total == pytest.approx(outcome.granted_kw[1, 0], abs=1e-9)
    assert shares["a"][1][0] > shares["b"][1][0]

    # zero requests split by capacity
    outcome.agent_kw = {"a": {1: np.zeros(1)}, "b": {1: np.zeros(1)}}
    outcome.granted_kw = np.zeros((2, 1))
    outcome.granted_kw[1, 0] = 1.0
    shares = allocate_award([a, b], outcome)
    assert shares["a"][1][0] == pytest.approx(0.75)
    assert shares["b"][1][0] == pytest.approx(0.25)
