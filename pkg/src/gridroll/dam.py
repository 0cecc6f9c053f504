"""Day-ahead scheduling: one small MILP per vehicle.

Each connected hour carries a charge power, a discharge power, and two
binaries that keep the two directions mutually exclusive; state of charge
links the hours.  Problems for different vehicles are independent, so the
fleet solve is a loop over per-EV models.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .fleet import EvSpec, battery_operating_cost
from .kernel import EQ, LE, LpBuilder, MilpProblem, SolveStatus, solve_milp

log = logging.getLogger(__name__)


class HorizonMismatch(ValueError):
    """Price series does not cover every connection window."""


class InfeasibleSchedule(RuntimeError):
    """No feasible day-ahead plan for a vehicle (window too short for the
    energy target)."""

    def __init__(self, ev_id: str, detail: str = ""):
        super().__init__(f"{ev_id}: no feasible day-ahead schedule{': ' + detail if detail else ''}")
        self.ev_id = ev_id


@dataclass(frozen=True)
class DamVars:
    """Variable indices of one vehicle's day-ahead model, by local hour."""

    hours: tuple[int, ...]
    p_ch: tuple[int, ...]
    p_dis: tuple[int, ...]
    d_ch: tuple[int, ...]
    d_dis: tuple[int, ...]
    soc: tuple[int, ...]


@dataclass
class DamSchedule:
    """Fleet-wide day-ahead plan.  Power is grid-side kW on the full
    horizon (zero outside each vehicle's window); soc[ev][h] is the state
    of charge at the end of hour h-1, starting from soc_init at index of
    the arrival hour."""

    horizon: int
    charge_kw: dict[str, np.ndarray]
    discharge_kw: dict[str, np.ndarray]
    soc: dict[str, np.ndarray]
    cost: dict[str, float]
    total_cost: float
    nodes: dict[str, int]

    def net_kw(self, ev_id: str) -> np.ndarray:
        return self.charge_kw[ev_id] - self.discharge_kw[ev_id]

    def bus_profile(self, fleet: list[EvSpec], n_bus: int) -> np.ndarray:
        out = np.zeros((n_bus, self.horizon))
        for ev in fleet:
            out[ev.bus] += self.net_kw(ev.ev_id)
        return out


def build_dam_model(ev: EvSpec, prices: np.ndarray, *, include_boc: bool = True
                    ) -> tuple[MilpProblem, DamVars]:
    """Day-ahead MILP for one vehicle over its connection window."""
    ev.validate()
    if len(prices) < ev.departure_hour:
        raise HorizonMismatch(
            f"{ev.ev_id}: prices cover {len(prices)} h, window ends at {ev.departure_hour}")
    hours = tuple(range(ev.arrival_hour, ev.departure_hour))
    wear = battery_operating_cost(ev).cost_per_kwh if include_boc else 0.0

    b = LpBuilder()
    p_ch, p_dis, d_ch, d_dis, soc = [], [], [], [], []
    for h in hours:
        p_ch.append(b.add_var(0.0, ev.p_max_ch_kw, obj=float(prices[h])))
        p_dis.append(b.add_var(0.0, ev.p_max_dis_kw, obj=wear - float(prices[h])))
        d_ch.append(b.add_var(0.0, 1.0, binary=True))
        d_dis.append(b.add_var(0.0, 1.0, binary=True))
    for t, h in enumerate(hours):
        final = t == len(hours) - 1
        lo = max(ev.soc_desired, ev.soc_min) if final else ev.soc_min
        soc.append(b.add_var(lo, ev.soc_max))

    for t in range(len(hours)):
        b.add_row([(d_ch[t], 1.0), (d_dis[t], 1.0)], LE, 1.0)
        b.add_row([(p_ch[t], 1.0), (d_ch[t], -ev.p_max_ch_kw)], LE, 0.0)
        b.add_row([(p_dis[t], 1.0), (d_dis[t], -ev.p_max_dis_kw)], LE, 0.0)
        coeffs = [(soc[t], 1.0),
                  (p_ch[t], -ev.eta_ch / ev.capacity_kwh),
                  (p_dis[t], 1.0 / (ev.eta_dis * ev.capacity_kwh))]
        if t == 0:
            b.add_row(coeffs, EQ, ev.soc_init)
        else:
            b.add_row(coeffs + [(soc[t - 1], -1.0)], EQ, 0.0)

    return b.build_milp(), DamVars(hours=hours, p_ch=tuple(p_ch), p_dis=tuple(p_dis),
                                   d_ch=tuple(d_ch), d_dis=tuple(d_dis), soc=tuple(soc))


def solve_dam(fleet: list[EvSpec], prices: np.ndarray, *, include_boc: bool = True
              ) -> DamSchedule:
    """Solve the day-ahead plan for every vehicle in the fleet."""
    prices = np.asarray(prices, dtype=float)
    horizon = len(prices)
    charge: dict[str, np.ndarray] = {}
    discharge: dict[str, np.ndarray] = {}
    socs: dict[str, np.ndarray] = {}
    cost: dict[str, float] = {}
    nodes: dict[str, int] = {}
    for ev in sorted(fleet, key=lambda e: e.ev_id):
        prob, idx = build_dam_model(ev, prices, include_boc=include_boc)
        sol = solve_milp(prob)
        if sol.status is not SolveStatus.OPTIMAL:
            raise InfeasibleSchedule(ev.ev_id, f"solver status {sol.status.value}")
        ch = np.zeros(horizon)
        dis = np.zeros(horizon)
        traj = np.full(horizon + 1, np.nan)
        traj[: ev.arrival_hour + 1] = ev.soc_init
        for t, h in enumerate(idx.hours):
            ch[h] = max(0.0, float(sol.values[idx.p_ch[t]]))
            dis[h] = max(0.0, float(sol.values[idx.p_dis[t]]))
            traj[h + 1] = float(sol.values[idx.soc[t]])
        traj[ev.departure_hour:] = traj[ev.departure_hour]
        charge[ev.ev_id] = ch
        discharge[ev.ev_id] = dis
        socs[ev.ev_id] = traj
        cost[ev.ev_id] = float(sol.objective_value)
        nodes[ev.ev_id] = sol.nodes
        log.debug("day-ahead %s: cost %.4f, %d nodes", ev.ev_id, sol.objective_value, sol.nodes)
    return DamSchedule(horizon=horizon, charge_kw=charge, discharge_kw=discharge,
                       soc=socs, cost=cost, total_cost=float(sum(cost.values())),
                       nodes=nodes)
