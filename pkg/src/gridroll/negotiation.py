"""Price negotiation between EV aggregators and the network operator.

Aggregators submit bus-level plans (their balancing-market positions).
The operator awards bus powers that respect the transformer rating and
the voltage band.  Both sides re-optimise against per-bus hourly prices;
whenever requests exceed awards the price rises in proportion to the
normalised mismatch, and symmetric quadratic penalties anchored at the
counterparty's position pull the two schedules together.  The loop stops
once no price moves more than the tolerance.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .fleet import BusVirtualStorage
from .grid import NetworkModel
from .kernel import EQ, GE, LE, LpBuilder, PwlSegment, add_pwl_term, solve_lp

log = logging.getLogger(__name__)

# Breaks charge/discharge simultaneity ties in the storage response; far
# below any penalty chord slope, so anchors are never displaced.
_TIE_EPS = 1e-6
_LEVEL_TOL = 1e-9


class AwardInfeasible(RuntimeError):
    """The operator cannot find any secure award, meaning the feeder is
    insecure before any EV load is added."""


@dataclass(frozen=True)
class NegotiationConfig:
    price_step: float = 0.4       # price change per unit of normalised mismatch
    tolerance: float = 0.005      # stop when no price moves more than this
    max_iters: int = 500
    # Pull toward the counterparty position, per kW^2.  Prices settle near
    # twice this weight times the curtailment, so stiffer pulls need more
    # rounds for the same relief.
    penalty_weight: float = 0.5
    max_segment_kw: float = 0.4   # resolution of the linearised penalty
    diminishing_step: bool = False

    def validate(self) -> None:
        if self.price_step <= 0:
            raise ValueError("price_step must be positive")
        if self.tolerance <= 0:
            raise ValueError("tolerance must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")
        if self.penalty_weight <= 0:
            raise ValueError("penalty_weight must be positive")
        if self.max_segment_kw <= 0:
            raise ValueError("max_segment_kw must be positive")


@dataclass
class AggregatorAgent:
    """One aggregator's negotiation state: its bus storages and the plan
    it would run absent any network price."""

    name: str
    storages: dict[int, BusVirtualStorage]
    plan_kw: dict[int, np.ndarray]

    def buses(self) -> list[int]:
        return sorted(self.storages)


@dataclass
class AgentResponse:
    kw: dict[int, np.ndarray]
    distress: bool = False


@dataclass
class NegotiationOutcome:
    converged: bool
    iterations: int
    prices: np.ndarray        # (n_bus, horizon)
    requested_kw: np.ndarray  # (n_bus, horizon), sum of final aggregator responses
    granted_kw: np.ndarray    # (n_bus, horizon), final operator award
    agent_kw: dict[str, dict[int, np.ndarray]]
    mismatch_trace: list[float] = field(default_factory=list)
    price_move_trace: list[float] = field(default_factory=list)
    distress: set[str] = field(default_factory=set)


def anchored_lattice(lo: float, hi: float, anchor: float, step_kw: float) -> PwlSegment:
    """Breakpoints over [lo, hi] with a knot at the anchor, carrying the
    chord slopes of the unit quadratic (x - anchor)^2.

    The knot makes the penalty minimum an exact lattice point, so a zero
    price reproduces the anchor without discretisation error.
    """
    pivot = min(max(anchor, lo), hi)
    pieces = [np.array([lo])]
    if pivot - lo > 1e-12:
        k = max(1, math.ceil((pivot - lo) / step_kw))
        pieces = [np.linspace(lo, pivot, k + 1)]
    if hi - pivot > 1e-12:
        k = max(1, math.ceil((hi - pivot) / step_kw))
        pieces.append(np.linspace(pivot, hi, k + 1)[1:])
    xs = np.concatenate(pieces)
    slopes = (xs[:-1] + xs[1:]) - 2.0 * anchor
    width = float(np.max(np.diff(xs))) if len(xs) > 1 else 0.0
    return PwlSegment(breakpoints=xs, slopes=slopes, error_bound=width * width / 4.0)


def _snap_minimum(lattice: PwlSegment, linear_coef: float, weight: float) -> float:
    """Breakpoint minimising linear_coef*u + weight*PWL(u); fills chords
    while their marginal cost stays negative."""
    u = float(lattice.breakpoints[0])
    for k, s in enumerate(lattice.slopes):
        if weight * float(s) + linear_coef < 0.0:
            u = float(lattice.breakpoints[k + 1])
        else:
            break
    return u


def _level_walk(storage: BusVirtualStorage, net_kw: np.ndarray) -> bool:
    """Whether a net profile keeps the stored energy inside its envelope."""
    level = storage.initial_energy_kwh
    for h in range(storage.horizon):
        level += storage.arrivals_kwh[h] - storage.departures_kwh[h]
        p = net_kw[h]
        level += p * storage.eta_ch if p >= 0 else p / storage.eta_dis
        if not storage.e_min_kwh[h] - _LEVEL_TOL <= level <= storage.e_max_kwh[h] + _LEVEL_TOL:
            return False
        if storage.p_max_ch_kw[h] == 0 and storage.p_max_dis_kw[h] == 0 and abs(level) > _LEVEL_TOL:
            return False
    return True


def _solve_bus_lp(storage: BusVirtualStorage, target: np.ndarray, lam: np.ndarray,
                  cfg: NegotiationConfig) -> np.ndarray | None:
    """Full storage response LP for one bus; None when infeasible."""
    split = _solve_bus_lp_split(storage, target, lam, cfg)
    if split is None:
        return None
    ch, dis = split
    return ch - dis


def _solve_bus_lp_split(storage: BusVirtualStorage, target: np.ndarray, lam: np.ndarray,
                        cfg: NegotiationConfig) -> tuple[np.ndarray, np.ndarray] | None:
    """Same LP with the raw charge/discharge pair kept separate, so the
    simultaneity left by the convexified penalty stays observable."""
    b = LpBuilder()
    pch: dict[int, int] = {}
    pdis: dict[int, int] = {}
    for h in range(storage.horizon):
        if storage.p_max_ch_kw[h] == 0 and storage.p_max_dis_kw[h] == 0:
            continue
        pch[h] = b.add_var(0.0, float(storage.p_max_ch_kw[h]), obj=float(lam[h]) + _TIE_EPS)
        pdis[h] = b.add_var(0.0, float(storage.p_max_dis_kw[h]), obj=-float(lam[h]) + _TIE_EPS)
        lattice = anchored_lattice(-float(storage.p_max_dis_kw[h]),
                                   float(storage.p_max_ch_kw[h]),
                                   float(target[h]), cfg.max_segment_kw)
        add_pwl_term(b, [(pch[h], 1.0), (pdis[h], -1.0)], lattice,
                     1.0, -2.0 * float(target[h]), weight=cfg.penalty_weight)
        b.add_constant(cfg.penalty_weight * float(target[h]) ** 2)

    base = storage.initial_energy_kwh
    running: list[tuple[int, float]] = []
    prev_active = False
    for h in range(storage.horizon):
        base += storage.arrivals_kwh[h] - storage.departures_kwh[h]
        active = h in pch
        if active:
            running.append((pch[h], storage.eta_ch))
            running.append((pdis[h], -1.0 / storage.eta_dis))
            b.add_row(list(running), LE, float(storage.e_max_kwh[h]) - base)
            b.add_row(list(running), GE, float(storage.e_min_kwh[h]) - base)
        elif prev_active and running:
            # All members gone: the energy account must close exactly.
            b.add_row(list(running), EQ, -base)
        prev_active = active

    sol = solve_lp(b.build_lp())
    if not sol.optimal:
        return None
    ch = np.zeros(storage.horizon)
    dis = np.zeros(storage.horizon)
    for h, v in pch.items():
        ch[h] = sol.values[v]
        dis[h] = sol.values[pdis[h]]
    return ch, dis


def aggregator_response(agent: AggregatorAgent, prices: np.ndarray,
                        cfg: NegotiationConfig) -> AgentResponse:
    """Best reply of one aggregator to the posted prices.

    Per bus, each hour's ideal power is the lattice point balancing the
    price against the quadratic pull toward the submitted plan; when that
    profile leaves the energy envelope the full LP is solved instead.  An
    infeasible envelope (a degraded plan) keeps the submitted plan and
    raises the distress flag.
    """
    out: dict[int, np.ndarray] = {}
    distress = False
    for bus, storage in agent.storages.items():
        target = agent.plan_kw[bus]
        lam = prices[bus]
        snapped = np.zeros(storage.horizon)
        for h in range(storage.horizon):
            if storage.p_max_ch_kw[h] == 0 and storage.p_max_dis_kw[h] == 0:
                continue
            lattice = anchored_lattice(-float(storage.p_max_dis_kw[h]),
                                       float(storage.p_max_ch_kw[h]),
                                       float(target[h]), cfg.max_segment_kw)
            snapped[h] = _snap_minimum(lattice, float(lam[h]), cfg.penalty_weight)
        if _level_walk(storage, snapped):
            out[bus] = snapped
            continue
        solved = _solve_bus_lp(storage, target, lam, cfg)
        if solved is None:
            log.warning("aggregator %s: bus %d plan is not deliverable; keeping it as bid",
                        agent.name, bus)
            out[bus] = target.copy()
            distress = True
        else:
            out[bus] = solved
    return AgentResponse(kw=out, distress=distress)


def dso_response(network: NetworkModel, caps_ch: np.ndarray, caps_dis: np.ndarray,
                 request_kw: np.ndarray, prices: np.ndarray,
                 cfg: NegotiationConfig) -> np.ndarray:
    """Operator award: per hour, the secure bus powers closest to the
    aggregators' requests, nudged by the prices it collects."""
    n, H = request_kw.shape
    granted = np.zeros((n, H))
    cap = network.transformer_limit_kw
    for h in range(H):
        buses = [b for b in range(n) if caps_ch[b, h] > 0 or caps_dis[b, h] > 0]
        if not buses:
            continue
        lattices = {}
        snapped = np.zeros(n)
        for bus in buses:
            lattices[bus] = anchored_lattice(-float(caps_dis[bus, h]), float(caps_ch[bus, h]),
                                             float(request_kw[bus, h]), cfg.max_segment_kw)
            snapped[bus] = _snap_minimum(lattices[bus], -float(prices[bus, h]),
                                         cfg.penalty_weight)
        if _hour_secure(network, h, snapped, cap):
            granted[:, h] = snapped
            continue

        b = LpBuilder()
        xs = {}
        for bus in buses:
            xs[bus] = b.add_var(-float(caps_dis[bus, h]), float(caps_ch[bus, h]),
                                obj=-float(prices[bus, h]))
            add_pwl_term(b, [(xs[bus], 1.0)], lattices[bus],
                         1.0, -2.0 * float(request_kw[bus, h]), weight=cfg.penalty_weight)
            b.add_constant(cfg.penalty_weight * float(request_kw[bus, h]) ** 2)
        b.add_row([(x, 1.0) for x in xs.values()], LE, cap)
        b.add_row([(x, 1.0) for x in xs.values()], GE, -cap)
        for i in range(n):
            if i == network.slack:
                continue
            srow = network.sensitivity[h, i]
            coeffs = [(xs[bus], float(srow[bus])) for bus in buses if srow[bus] != 0.0]
            if not coeffs:
                continue
            b.add_row(coeffs, LE, float(network.u0[i, h]) - network.v_min)
            b.add_row(coeffs, GE, float(network.u0[i, h]) - network.v_max)
        sol = solve_lp(b.build_lp())
        if not sol.optimal:
            raise AwardInfeasible(f"hour {h}: no secure award exists (base case insecure)")
        for bus in buses:
            granted[bus, h] = sol.values[xs[bus]]
    return granted


def _hour_secure(network: NetworkModel, h: int, load: np.ndarray, cap: float) -> bool:
    if abs(load.sum()) > cap + 1e-9:
        return False
    volts = network.u0[:, h] - network.sensitivity[h] @ load
    return bool(np.all(volts >= network.v_min - 1e-12)
                and np.all(volts <= network.v_max + 1e-12))


def update_prices(prices: np.ndarray, requested_kw: np.ndarray, granted_kw: np.ndarray,
                  transformer_limit_kw: float, cfg: NegotiationConfig,
                  iteration: int = 1) -> np.ndarray:
    """One price adjustment: proportional to mismatch over the rating."""
    step = cfg.price_step / iteration if cfg.diminishing_step else cfg.price_step
    return prices + step * (requested_kw - granted_kw) / transformer_limit_kw


def negotiate(agents: list[AggregatorAgent], network: NetworkModel,
              cfg: NegotiationConfig = NegotiationConfig(),
              initial_prices: np.ndarray | None = None) -> NegotiationOutcome:
    """Run synchronous price-adjustment rounds until quiescence.

    Convergence means no per-bus hourly price moved by more than the
    tolerance after an update, which bounds every remaining mismatch by
    tolerance * rating / price_step kilowatts.
    """
    cfg.validate()
    n, H = network.n_bus, network.horizon
    caps_ch = np.zeros((n, H))
    caps_dis = np.zeros((n, H))
    for agent in agents:
        for bus, st in agent.storages.items():
            caps_ch[bus] += st.p_max_ch_kw
            caps_dis[bus] += st.p_max_dis_kw

    prices = np.zeros((n, H)) if initial_prices is None else initial_prices.astype(float).copy()
    outcome = NegotiationOutcome(converged=False, iterations=0, prices=prices,
                                 requested_kw=np.zeros((n, H)), granted_kw=np.zeros((n, H)),
                                 agent_kw={})
    for it in range(1, cfg.max_iters + 1):
        responses = {agent.name: aggregator_response(agent, prices, cfg) for agent in agents}
        requested = np.zeros((n, H))
        for agent in agents:
            resp = responses[agent.name]
            if resp.distress:
                outcome.distress.add(agent.name)
            for bus, kw in resp.kw.items():
                requested[bus] += kw
        granted = dso_response(network, caps_ch, caps_dis, requested, prices, cfg)
        new_prices = update_prices(prices, requested, granted,
                                   network.transformer_limit_kw, cfg, iteration=it)
        move = float(np.max(np.abs(new_prices - prices))) if prices.size else 0.0
        prices = new_prices
        outcome.mismatch_trace.append(float(np.max(np.abs(requested - granted))))
        outcome.price_move_trace.append(move)
        outcome.iterations = it
        outcome.prices = prices
        outcome.requested_kw = requested
        outcome.granted_kw = granted
        outcome.agent_kw = {name: resp.kw for name, resp in responses.items()}
        if move <= cfg.tolerance:
            outcome.converged = True
            break
    if not outcome.converged:
        log.warning("negotiation stopped after %d rounds with %.3f kW mismatch",
                    outcome.iterations, outcome.mismatch_trace[-1])
    return outcome


def allocate_award(agents: list[AggregatorAgent], outcome: NegotiationOutcome) -> dict[str, dict[int, np.ndarray]]:
    """Split the operator award per aggregator, pro rata to final requests.

    When requests cancel at a shared bus the award is split by charging
    capacity instead.  With one aggregator per bus this is exact.
    """
    out: dict[str, dict[int, np.ndarray]] = {a.name: {} for a in agents}
    H = outcome.granted_kw.shape[1]
    by_bus: dict[int, list[AggregatorAgent]] = {}
    for agent in agents:
        for bus in agent.storages:
            by_bus.setdefault(bus, []).append(agent)
            out[agent.name][bus] = np.zeros(H)
    for bus, members in by_bus.items():
        for h in range(H):
            award = outcome.granted_kw[bus, h]
            asks = np.array([outcome.agent_kw[m.name].get(bus, np.zeros(H))[h] for m in members])
            total = asks.sum()
            if abs(total) > 1e-9:
                shares = asks / total
            else:
                caps = np.array([m.storages[bus].p_max_ch_kw[h] + m.storages[bus].p_max_dis_kw[h]
                                 for m in members])
                shares = caps / caps.sum() if caps.sum() > 0 else np.full(len(members), 1.0 / len(members))
            for m, s in zip(members, shares):
                out[m.name][bus][h] = award * s
    return out
